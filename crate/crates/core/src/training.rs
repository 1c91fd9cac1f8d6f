//! Batch and online training loops plus the snapshot bus that hands
//! trained models to the serving side.

use std::io::Write;
use std::sync::{Arc, RwLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RawExample;
use crate::metrics::auc;
use crate::models::{CtrModel, OptimizerState};
use crate::numerics::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    /// Passes over the data for [`train_batch`].
    pub epochs: usize,
    pub seed: u64,
    /// Examples between two snapshot publishes in [`train_online`].
    pub publish_every: usize,
    /// Reshuffle every epoch of [`train_batch`].
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 1,
            seed: 0,
            publish_every: 4096,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.publish_every < self.batch_size {
            return Err(Error::Config(format!(
                "publish_every ({}) must be at least batch_size ({})",
                self.publish_every, self.batch_size
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One line of the training progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressRecord {
    pub step: u64,
    pub examples: u64,
    /// Mean loss over the steps since the previous record.
    pub loss: f32,
    pub holdout_auc: Option<f64>,
    pub version: u64,
}

/// Receives progress records as training runs.
pub trait ProgressSink {
    fn record(&mut self, record: &ProgressRecord) -> Result<()>;
}

impl ProgressSink for Vec<ProgressRecord> {
    fn record(&mut self, record: &ProgressRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Writes each record as one JSON line.
pub struct JsonLines<W: Write>(pub W);

impl<W: Write> ProgressSink for JsonLines<W> {
    fn record(&mut self, record: &ProgressRecord) -> Result<()> {
        serde_json::to_writer(&mut self.0, record)?;
        self.0.write_all(b"\n")?;
        self.0.flush()?;
        Ok(())
    }
}

/// Discards every record.
pub struct NoProgress;

impl ProgressSink for NoProgress {
    fn record(&mut self, _: &ProgressRecord) -> Result<()> {
        Ok(())
    }
}

/// A model together with its optimizer.
#[derive(Clone, Debug)]
pub struct Trainer<M: CtrModel> {
    model: M,
    adam: Adam,
    epochs: u64,
    examples: u64,
    loss_sum: f64,
    loss_steps: u64,
}

impl<M: CtrModel> Trainer<M> {
    pub fn new(model: M, learning_rate: f32) -> Trainer<M> {
        let adam = Adam::new(AdamConfig::with_learning_rate(learning_rate), &model.param_shapes());
        Trainer {
            model,
            adam,
            epochs: 0,
            examples: 0,
            loss_sum: 0.0,
            loss_steps: 0,
        }
    }

    /// Continues from saved optimizer state. The learning rate of the saved
    /// state is replaced by `learning_rate`.
    pub fn resume(model: M, state: OptimizerState, learning_rate: f32) -> Result<Trainer<M>> {
        if state.adam.shapes() != model.param_shapes() {
            return Err(Error::InvalidArgument("optimizer state does not match the model".into()));
        }
        let mut adam = state.adam;
        adam.config.learning_rate = learning_rate;
        Ok(Trainer {
            model,
            adam,
            epochs: state.epochs,
            examples: 0,
            loss_sum: 0.0,
            loss_steps: 0,
        })
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut M {
        &mut self.model
    }

    pub fn into_model(self) -> M {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState {
            adam: self.adam.clone(),
            epochs: self.epochs,
        }
    }

    /// One Adam step on a mini-batch; returns its mean loss.
    pub fn step(&mut self, batch: &[&RawExample]) -> Result<f32> {
        let (loss, grads) = self.model.loss_and_grads(batch)?;
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params = self.model.params_mut();
        self.adam.step(&mut params, &grad_refs)?;
        self.examples += batch.len() as u64;
        self.loss_sum += loss as f64;
        self.loss_steps += 1;
        Ok(loss)
    }

    /// One pass over `examples`, shuffled with a permutation derived from
    /// `seed` and the epoch counter.
    pub fn epoch(&mut self, examples: &[RawExample], batch_size: usize, seed: u64, shuffle: bool) -> Result<()> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..examples.len()).collect();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.epochs.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<&RawExample> = chunk.iter().map(|&i| &examples[i]).collect();
            self.step(&batch)?;
        }
        self.epochs += 1;
        Ok(())
    }

    fn take_record(&mut self, holdout: Option<&[RawExample]>) -> Result<ProgressRecord> {
        let holdout_auc = match holdout {
            Some(h) if !h.is_empty() => evaluate_auc(&self.model, h).ok(),
            _ => None,
        };
        let loss = if self.loss_steps == 0 {
            f32::NAN
        } else {
            (self.loss_sum / self.loss_steps as f64) as f32
        };
        self.loss_sum = 0.0;
        self.loss_steps = 0;
        Ok(ProgressRecord {
            step: self.steps(),
            examples: self.examples,
            loss,
            holdout_auc,
            version: self.model.version(),
        })
    }
}

/// AUC of `model` over labelled examples.
pub fn evaluate_auc<M: CtrModel>(model: &M, examples: &[RawExample]) -> Result<f64> {
    let scores = model.predict(examples)?;
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    auc(&scores, &labels)
}

/// Trains for `config.epochs` passes and returns the model with its version
/// bumped by one.
pub fn train_batch<M: CtrModel>(model: M, examples: &[RawExample], config: &TrainConfig) -> Result<M> {
    let trainer = Trainer::new(model, config.learning_rate);
    Ok(train_batch_with(trainer, examples, config, None, &mut NoProgress)?.into_model())
}

/// [`train_batch`] on an existing trainer, emitting one progress record per
/// epoch.
pub fn train_batch_with<M: CtrModel>(
    mut trainer: Trainer<M>,
    examples: &[RawExample],
    config: &TrainConfig,
    holdout: Option<&[RawExample]>,
    progress: &mut dyn ProgressSink,
) -> Result<Trainer<M>> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for e in 0..config.epochs {
        trainer.epoch(examples, config.batch_size, config.seed, config.shuffle)?;
        if e + 1 == config.epochs {
            let v = trainer.model.version() + 1;
            trainer.model.set_version(v);
        }
        let record = trainer.take_record(holdout)?;
        progress.record(&record)?;
    }
    Ok(trainer)
}

/// Latest published model. One writer publishes; any number of readers
/// take an `Arc` of the current snapshot and score without holding a lock.
#[derive(Debug)]
pub struct SnapshotBus<M> {
    current: RwLock<Option<Arc<M>>>,
}

impl<M> Default for SnapshotBus<M> {
    fn default() -> Self {
        SnapshotBus {
            current: RwLock::new(None),
        }
    }
}

/// Something with a snapshot version.
pub trait Versioned {
    fn snapshot_version(&self) -> u64;
}

impl<M: CtrModel> Versioned for M {
    fn snapshot_version(&self) -> u64 {
        self.version()
    }
}

impl Versioned for crate::models::AnyModel {
    fn snapshot_version(&self) -> u64 {
        self.version()
    }
}

impl<M: Versioned> SnapshotBus<M> {
    pub fn new() -> SnapshotBus<M> {
        SnapshotBus::default()
    }

    pub fn with_model(model: M) -> SnapshotBus<M> {
        SnapshotBus {
            current: RwLock::new(Some(Arc::new(model))),
        }
    }

    /// Swaps in `model`. Its version must be greater than the current one.
    pub fn publish(&self, model: Arc<M>) -> Result<u64> {
        let mut guard = self.current.write().unwrap_or_else(|e| e.into_inner());
        let offered = model.snapshot_version();
        if let Some(cur) = guard.as_ref() {
            let current = cur.snapshot_version();
            if offered <= current {
                return Err(Error::StaleSnapshot { current, offered });
            }
        }
        *guard = Some(model);
        Ok(offered)
    }

    pub fn latest(&self) -> Option<Arc<M>> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Version of the latest snapshot, 0 when nothing is published.
    pub fn version(&self) -> u64 {
        self.latest().map_or(0, |m| m.snapshot_version())
    }
}

/// Outcome of an online training run.
#[derive(Clone, Debug)]
pub struct OnlineSummary<M> {
    pub model: M,
    pub accepted: u64,
    /// Records dropped for arriving with a timestamp older than the last
    /// accepted one.
    pub rejected: u64,
    pub steps: u64,
    pub published: Vec<u64>,
}

/// Consumes `stream` in arrival order, one Adam step per mini-batch, and
/// publishes a snapshot to `bus` every `publish_every` examples and once
/// more at the end if anything changed since the last publish.
pub fn train_online<M, I>(
    model: M,
    stream: I,
    config: &TrainConfig,
    bus: &SnapshotBus<M>,
    holdout: Option<&[RawExample]>,
    progress: &mut dyn ProgressSink,
) -> Result<OnlineSummary<M>>
where
    M: CtrModel,
    I: IntoIterator<Item = RawExample>,
{
    train_online_with(Trainer::new(model, config.learning_rate), stream, config, bus, holdout, progress)
}

pub fn train_online_with<M, I>(
    mut trainer: Trainer<M>,
    stream: I,
    config: &TrainConfig,
    bus: &SnapshotBus<M>,
    holdout: Option<&[RawExample]>,
    progress: &mut dyn ProgressSink,
) -> Result<OnlineSummary<M>>
where
    M: CtrModel,
    I: IntoIterator<Item = RawExample>,
{
    config.validate()?;
    let mut pending: Vec<RawExample> = Vec::with_capacity(config.batch_size);
    let mut last_ts: Option<u64> = None;
    let (mut accepted, mut rejected) = (0u64, 0u64);
    let mut since_publish = 0usize;
    let mut published = Vec::new();

    let mut publish = |trainer: &mut Trainer<M>, published: &mut Vec<u64>| -> Result<()> {
        let v = trainer.model.version().max(bus.version()) + 1;
        trainer.model.set_version(v);
        bus.publish(Arc::new(trainer.model.clone()))?;
        published.push(v);
        let record = trainer.take_record(holdout)?;
        progress.record(&record)
    };

    for ex in stream {
        if last_ts.is_some_and(|t| ex.timestamp < t) {
            rejected += 1;
            continue;
        }
        last_ts = Some(ex.timestamp);
        accepted += 1;
        pending.push(ex);
        if pending.len() == config.batch_size {
            let refs: Vec<&RawExample> = pending.iter().collect();
            trainer.step(&refs)?;
            since_publish += pending.len();
            pending.clear();
            if since_publish >= config.publish_every {
                publish(&mut trainer, &mut published)?;
                since_publish = 0;
            }
        }
    }
    if !pending.is_empty() {
        let refs: Vec<&RawExample> = pending.iter().collect();
        trainer.step(&refs)?;
        since_publish += pending.len();
    }
    if since_publish > 0 {
        publish(&mut trainer, &mut published)?;
    }
    if accepted == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(OnlineSummary {
        steps: trainer.steps(),
        model: trainer.model,
        accepted,
        rejected,
        published,
    })
}
