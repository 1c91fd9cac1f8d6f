mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use cold_core::features::{AdContext, FeatureGroup, FeatureSchema, FeatureValue, RawExample, UserContext};
use cold_core::models::{write_checkpoint, Checkpoint, ColdConfig, ColdModel, CtrModel};
use cold_core::training::{
    evaluate_auc, train_batch, train_batch_with, train_online, JsonLines, NoProgress, ProgressRecord, SnapshotBus,
    TrainConfig, Trainer,
};
use cold_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schema() -> Arc<FeatureSchema> {
    Arc::new(
        FeatureSchema::new(vec![
            FeatureGroup::user("u", 10).with_dim(4),
            FeatureGroup::ad("a", 10).with_dim(4),
        ])
        .unwrap(),
    )
}

/// Click iff user and ad ids share parity: not additive in the two ids.
fn parity_examples(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|t| {
            let u = rng.random_range(0..10u32);
            let a = rng.random_range(0..10u32);
            RawExample {
                user: Arc::new(UserContext {
                    user_id: u,
                    values: vec![FeatureValue::Id(u)],
                }),
                ad: Arc::new(AdContext {
                    ad_id: a,
                    values: vec![FeatureValue::Id(a)],
                }),
                label: (u % 2 == a % 2) as u8,
                bid: 1.0,
                timestamp: t as u64,
            }
        })
        .collect()
}

fn noisy_examples(n: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut ex = parity_examples(n, seed);
    for e in &mut ex {
        if rng.random_bool(0.2) {
            e.label ^= 1;
        }
    }
    ex
}

fn model(seed: u64) -> ColdModel {
    let s = schema();
    let config = ColdConfig {
        hidden: vec![16, 8],
        seed,
        ..ColdConfig::default()
    };
    ColdModel::new(s.clone(), &s.all_groups(), &config).unwrap()
}

fn params(m: &ColdModel) -> Vec<Vec<f32>> {
    let mut m = m.clone();
    m.params_mut().into_iter().map(|p| p.to_vec()).collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let m = model(1);
    let before = params(&m);
    let config = TrainConfig {
        learning_rate: 0.0,
        batch_size: 32,
        epochs: 2,
        publish_every: 32,
        ..TrainConfig::default()
    };
    let trained = train_batch(m, &parity_examples(256, 1), &config).unwrap();
    assert_eq!(params(&trained), before);
    assert_eq!(trained.version(), 1);
}

#[test]
fn separable_set_is_learned() {
    let train = parity_examples(2000, 2);
    let holdout = parity_examples(500, 3);
    let config = TrainConfig {
        learning_rate: 0.01,
        batch_size: 32,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model(2), config.learning_rate);
    let mut best = 0.0;
    for epoch in 0..20 {
        trainer.epoch(&train, config.batch_size, 7, true).unwrap();
        best = evaluate_auc(trainer.model(), &holdout).unwrap();
        if best >= 0.99 {
            assert!(epoch < 20);
            break;
        }
    }
    assert!(best >= 0.99, "holdout AUC {best}");
}

#[test]
fn loss_decreases_for_every_seed() {
    let train = noisy_examples(1024, 4);
    for seed in 0..5 {
        let mut records: Vec<ProgressRecord> = Vec::new();
        let config = TrainConfig {
            learning_rate: 0.005,
            batch_size: 64,
            epochs: 6,
            seed,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(model(seed), config.learning_rate);
        train_batch_with(trainer, &train, &config, None, &mut records).unwrap();
        assert_eq!(records.len(), 6);
        let (first, last) = (records[0].loss, records[5].loss);
        assert!(last < first, "seed {seed}: {first} -> {last}");
        assert_eq!(records[5].version, 1);
        assert_eq!(records[5].examples, 6 * 1024);
    }
}

fn checkpoint_bytes(m: ColdModel) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(
        &mut buf,
        &Checkpoint {
            model: m.into(),
            optimizer: None,
        },
    )
    .unwrap();
    buf
}

#[test]
fn same_seed_same_bytes() {
    let train = noisy_examples(600, 5);
    let config = TrainConfig {
        learning_rate: 0.01,
        batch_size: 50,
        epochs: 3,
        seed: 11,
        ..TrainConfig::default()
    };
    let a = checkpoint_bytes(train_batch(model(3), &train, &config).unwrap());
    let b = checkpoint_bytes(train_batch(model(3), &train, &config).unwrap());
    assert_eq!(a, b);
    let other = TrainConfig { seed: 12, ..config };
    assert_ne!(a, checkpoint_bytes(train_batch(model(3), &train, &other).unwrap()));
}

#[test]
fn online_pass_equals_unshuffled_epoch() {
    let train = noisy_examples(640, 6);
    let config = TrainConfig {
        learning_rate: 0.01,
        batch_size: 64,
        publish_every: train.len(),
        shuffle: false,
        ..TrainConfig::default()
    };
    let mut batch = Trainer::new(model(4), config.learning_rate);
    batch.epoch(&train, config.batch_size, 0, false).unwrap();

    let bus = SnapshotBus::new();
    let summary = train_online(model(4), train.clone(), &config, &bus, None, &mut NoProgress).unwrap();
    assert_eq!(params(&summary.model), params(batch.model()));
    assert_eq!(summary.published, vec![1]);
    assert_eq!(summary.steps, 10);
    assert_eq!(bus.version(), 1);
}

#[test]
fn online_publishes_on_schedule() {
    let train = noisy_examples(1000, 7);
    let config = TrainConfig {
        learning_rate: 0.01,
        batch_size: 50,
        publish_every: 200,
        ..TrainConfig::default()
    };
    let bus = SnapshotBus::new();
    let mut log = Vec::new();
    let summary = train_online(model(5), train, &config, &bus, None, &mut JsonLines(&mut log)).unwrap();
    assert_eq!(summary.published, vec![1, 2, 3, 4, 5]);
    let lines: Vec<ProgressRecord> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert!(lines.windows(2).all(|w| w[0].version < w[1].version));
}

#[test]
fn out_of_order_records_are_counted_and_skipped() {
    let mut train = noisy_examples(100, 8);
    train[10].timestamp = 3;
    train[50].timestamp = 0;
    let config = TrainConfig {
        batch_size: 10,
        publish_every: 100,
        ..TrainConfig::default()
    };
    let bus = SnapshotBus::new();
    let summary = train_online(model(6), train, &config, &bus, None, &mut NoProgress).unwrap();
    assert_eq!((summary.accepted, summary.rejected), (98, 2));
}

#[test]
fn online_continues_bus_versions() {
    let bus = SnapshotBus::with_model({
        let mut m = model(7);
        m.set_version(41);
        m
    });
    let config = TrainConfig {
        batch_size: 10,
        publish_every: 100,
        ..TrainConfig::default()
    };
    let summary = train_online(model(7), noisy_examples(100, 9), &config, &bus, None, &mut NoProgress).unwrap();
    assert_eq!(summary.published, vec![42]);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: f32::NAN,
            ..TrainConfig::default()
        },
        TrainConfig {
            publish_every: 10,
            batch_size: 20,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(train_batch(model(0), &parity_examples(10, 0), &c), Err(Error::Config(_))));
    }
    assert!(matches!(
        train_batch(model(0), &[], &TrainConfig::default()),
        Err(Error::EmptyDataset)
    ));
}

#[test]
fn bus_rejects_stale_snapshots() {
    let bus = SnapshotBus::new();
    let mut m = model(1);
    m.set_version(2);
    bus.publish(Arc::new(m.clone())).unwrap();
    assert!(matches!(
        bus.publish(Arc::new(m.clone())),
        Err(Error::StaleSnapshot { current: 2, offered: 2 })
    ));
    m.set_version(1);
    assert!(bus.publish(Arc::new(m)).is_err());
    assert_eq!(bus.version(), 2);
}

#[test]
fn bus_versions_never_regress_under_concurrent_readers() {
    let bus = Arc::new(SnapshotBus::<ColdModel>::new());
    let base = model(2);
    let done = Arc::new(AtomicBool::new(false));
    let started = Arc::new(std::sync::Barrier::new(5));
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let bus = bus.clone();
            let done = done.clone();
            let started = started.clone();
            std::thread::spawn(move || {
                started.wait();
                let mut last = 0;
                let mut reads = 0u64;
                loop {
                    let finished = done.load(Ordering::Acquire);
                    if let Some(m) = bus.latest() {
                        let v = m.version();
                        assert!(v >= last, "version went from {last} to {v}");
                        last = v;
                    }
                    reads += 1;
                    if finished {
                        break;
                    }
                }
                reads
            })
        })
        .collect();
    started.wait();
    for v in 1..=2000 {
        let mut m = base.clone();
        m.set_version(v);
        bus.publish(Arc::new(m)).unwrap();
    }
    done.store(true, Ordering::Release);
    for r in readers {
        assert!(r.join().unwrap() > 0);
    }
    assert_eq!(bus.version(), 2000);
}
