use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};
use cold_core::data::{generate, sample_examples, truth_path, GroundTruth, Population};
use cold_core::engine::{
    bench_qps_rt, spawn_server, split_and_score, BenchReport, FrontEndQuery, LiveTarget, PathScorer, Scorer,
};
use cold_core::features::{load_dataset, save_dataset, AdContext, FeatureSchema, RawExample, UserContext};
use cold_core::metrics::{auc, gauc, topk_recall, MetricReport, ScoredCandidate, ScoredSet};
use cold_core::models::{
    load_checkpoint, load_model, save_checkpoint, AnyModel, Checkpoint, ColdModel, CtrModel, TwoTowerModel,
};
use cold_core::selection::{select, SelectionData};
use cold_core::training::{
    train_batch_with, train_online, JsonLines, SnapshotBus, Trainer, Versioned,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ModelKind, RunConfig};
use crate::plot;
use crate::report::{render_table, Report};

/// What a command hands back to `main`.
pub struct Outcome {
    pub report: Report,
    pub plots: Vec<PathBuf>,
}

fn outcome(report: Report) -> Outcome {
    Outcome { report, plots: Vec::new() }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn gen(config: &RunConfig) -> Result<Outcome> {
    let data = generate(&config.data.generator)?;
    let path = &config.data.path;
    ensure_parent(path)?;
    save_dataset(path, &data.schema, &data.examples).with_context(|| format!("writing {}", path.display()))?;
    let truth_file = truth_path(path);
    data.truth.save(&truth_file)?;
    let clicks = data.examples.iter().filter(|e| e.label == 1).count();
    let result = json!({
        "dataset": path,
        "truth": truth_file,
        "examples": data.examples.len(),
        "click_rate": clicks as f64 / data.examples.len().max(1) as f64,
        "schema_digest": data.schema.digest(),
        "dataset_sha256": sha256_file(path)?,
        "truth_sha256": sha256_file(&truth_file)?,
    });
    let table = render_table(
        &["file", "examples", "sha256"],
        &[
            vec![path.display().to_string(), data.examples.len().to_string(), result["dataset_sha256"].as_str().unwrap_or("").into()],
            vec![truth_file.display().to_string(), "-".into(), result["truth_sha256"].as_str().unwrap_or("").into()],
        ],
    );
    Ok(outcome(Report::new("gen", config, result, table)?))
}

/// A dataset with its ground truth (when the sidecar exists) and a holdout.
struct Loaded {
    schema: Arc<FeatureSchema>,
    examples: Vec<RawExample>,
    truth: Option<GroundTruth>,
    population: Option<Population>,
    holdout: Vec<RawExample>,
}

fn load_data(config: &RunConfig) -> Result<Loaded> {
    let path = &config.data.path;
    let (schema, examples) = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    let truth_file = truth_path(path);
    let truth = if truth_file.exists() {
        Some(GroundTruth::load(&truth_file).with_context(|| format!("loading {}", truth_file.display()))?)
    } else {
        None
    };
    let (examples, holdout, population) = match &truth {
        Some(t) => {
            let population = t.contexts(&schema)?;
            let start = examples.iter().map(|e| e.timestamp).max().map_or(0, |t| t + 1);
            let holdout = sample_examples(t, &population, start, config.data.holdout_examples, config.seed ^ 0x5EED)?;
            (examples, holdout, Some(population))
        }
        None => {
            // no generator truth: hold out the most recent tenth
            let mut examples = examples;
            let cut = examples.len() - examples.len() / 10;
            let holdout = examples.split_off(cut);
            (examples, holdout, None)
        }
    };
    if examples.is_empty() || holdout.is_empty() {
        bail!("dataset {} is too small to split off a holdout", path.display());
    }
    Ok(Loaded {
        schema: Arc::new(schema),
        examples,
        truth,
        population,
        holdout,
    })
}

fn groups_of(config: &RunConfig, schema: &FeatureSchema) -> Result<Option<Vec<usize>>> {
    if config.model.groups.is_empty() {
        return Ok(None);
    }
    let groups = config
        .model
        .groups
        .iter()
        .map(|g| schema.require(g))
        .collect::<cold_core::Result<Vec<_>>>()?;
    Ok(Some(groups))
}

fn holdout_metrics<M: CtrModel>(model: &M, holdout: &[RawExample]) -> Result<(f64, f64)> {
    let scores = model.predict(holdout)?;
    let labels: Vec<u8> = holdout.iter().map(|e| e.label).collect();
    let users: Vec<u32> = holdout.iter().map(|e| e.user.user_id).collect();
    Ok((auc(&scores, &labels)?, gauc(&users, &scores, &labels)?.value))
}

fn run_training<M>(
    config: &RunConfig,
    data: &Loaded,
    fresh: impl FnOnce() -> Result<M>,
    unwrap: impl FnOnce(AnyModel) -> Option<M>,
    resume: bool,
) -> Result<Outcome>
where
    M: CtrModel + Into<AnyModel>,
{
    let ckpt_path = &config.model.checkpoint;
    let trainer = if resume {
        let ckpt = load_checkpoint(ckpt_path, &data.schema)
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?;
        let state = ckpt
            .optimizer
            .ok_or_else(|| anyhow!("checkpoint {} has no optimizer state", ckpt_path.display()))?;
        let kind = ckpt.model.kind();
        let model = unwrap(ckpt.model).ok_or_else(|| anyhow!("checkpoint holds a {kind} model"))?;
        Trainer::resume(model, state, config.train.learning_rate)?
    } else {
        Trainer::new(fresh()?, config.train.learning_rate)
    };
    let log_path = PathBuf::from(format!("{}.log.jsonl", ckpt_path.display()));
    ensure_parent(&log_path)?;
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let started = Instant::now();
    let trainer = train_batch_with(
        trainer,
        &data.examples,
        &config.train,
        Some(&data.holdout),
        &mut JsonLines(BufWriter::new(log)),
    )?;
    let seconds = started.elapsed().as_secs_f64();
    let (auc, gauc) = holdout_metrics(trainer.model(), &data.holdout)?;
    let checkpoint = Checkpoint {
        model: trainer.model().clone().into(),
        optimizer: Some(trainer.optimizer_state()),
    };
    save_checkpoint(ckpt_path, &checkpoint).with_context(|| format!("writing {}", ckpt_path.display()))?;
    let result = json!({
        "checkpoint": ckpt_path,
        "metric_log": log_path,
        "kind": checkpoint.model.kind(),
        "model_version": checkpoint.model.version(),
        "steps": trainer.steps(),
        "epochs_total": trainer.epochs(),
        "resumed": resume,
        "train_examples": data.examples.len(),
        "holdout_examples": data.holdout.len(),
        "holdout_auc": auc,
        "holdout_gauc": gauc,
        "seconds": seconds,
    });
    let table = render_table(
        &["model", "version", "epochs", "holdout AUC", "holdout GAUC"],
        &[vec![
            checkpoint.model.kind().into(),
            checkpoint.model.version().to_string(),
            trainer.epochs().to_string(),
            format!("{auc:.4}"),
            format!("{gauc:.4}"),
        ]],
    );
    Ok(outcome(Report::new("train", config, result, table)?))
}

pub fn train(config: &RunConfig, resume: bool) -> Result<Outcome> {
    let data = load_data(config)?;
    let groups = groups_of(config, &data.schema)?;
    let schema = data.schema.clone();
    match config.model.kind {
        ModelKind::Cold => run_training(
            config,
            &data,
            || {
                let groups = groups.unwrap_or_else(|| schema.all_groups());
                Ok(ColdModel::new(schema.clone(), &groups, &config.model.cold)?)
            },
            AnyModel::into_cold,
            resume,
        ),
        ModelKind::TwoTower => run_training(
            config,
            &data,
            || {
                Ok(match groups {
                    Some(g) => TwoTowerModel::new(schema.clone(), &g, &config.model.two_tower)?,
                    None => TwoTowerModel::with_all_groups(schema.clone(), &config.model.two_tower)?,
                })
            },
            AnyModel::into_two_tower,
            resume,
        ),
    }
}

#[derive(Serialize)]
struct ModelEval {
    checkpoint: PathBuf,
    kind: String,
    version: u64,
    metrics: Vec<MetricReport>,
    /// `(k, recall)` for increasing k at fixed m.
    recall_curve: Vec<(usize, f64)>,
}

/// Mean top-k recall over the first `users` users against every ad.
fn recall_curve(
    scorer: &dyn Scorer,
    oracle: &dyn Fn(&UserContext, &[AdContext]) -> Result<Vec<f32>>,
    population: &Population,
    bids: &[f32],
    users: usize,
    ks: &[usize],
    m: usize,
) -> Result<Vec<(usize, f64)>> {
    let ads: Vec<AdContext> = population.ads.iter().map(|a| (**a).clone()).collect();
    let users = users.min(population.users.len()).max(1);
    let mut sums = vec![0.0; ks.len()];
    for user in &population.users[..users] {
        let pre = scorer.score_candidates(user, &ads)?;
        let truth = oracle(user, &ads)?;
        let set = ScoredSet::new(
            ads.iter()
                .enumerate()
                .map(|(i, a)| ScoredCandidate {
                    ad_id: a.ad_id,
                    pre_rank_pctr: pre[i],
                    oracle_pctr: truth[i],
                    bid: bids[a.ad_id as usize],
                    label: 0,
                })
                .collect(),
        )?;
        for (s, &k) in sums.iter_mut().zip(ks) {
            *s += topk_recall(&set, k, m)?;
        }
    }
    Ok(ks.iter().zip(sums).map(|(&k, s)| (k, s / users as f64)).collect())
}

pub fn eval(config: &RunConfig) -> Result<Outcome> {
    let data = load_data(config)?;
    let truth = data
        .truth
        .as_ref()
        .ok_or_else(|| anyhow!("eval needs the ground-truth sidecar {}", truth_path(&config.data.path).display()))?;
    let population = data.population.as_ref().expect("population comes with the truth");
    let paths = if config.eval.checkpoints.is_empty() {
        vec![config.model.checkpoint.clone()]
    } else {
        config.eval.checkpoints.clone()
    };
    let oracle_model = match &config.eval.oracle_checkpoint {
        Some(p) => Some(load_model(p, &data.schema).with_context(|| format!("loading oracle {}", p.display()))?),
        None => None,
    };
    let oracle = |user: &UserContext, ads: &[AdContext]| -> Result<Vec<f32>> {
        match &oracle_model {
            Some(m) => Ok(m.score_candidates(user, ads)?),
            None => ads
                .iter()
                .map(|a| Ok(cold_core::data::oracle_pctr(truth, user.user_id, a.ad_id)? as f32))
                .collect(),
        }
    };
    let (m, k_max) = (config.eval.recall_m, config.eval.recall_k.min(population.ads.len()));
    let mut ks: Vec<usize> = [m, 2 * m, 3 * m, 5 * m, k_max].into_iter().filter(|&k| k <= k_max).collect();
    ks.dedup();
    let echo = json!({ "recall_k": k_max, "recall_m": m, "oracle": config.eval.oracle_checkpoint });

    let mut models = Vec::new();
    for path in &paths {
        let model = load_model(path, &data.schema).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let (a, g) = holdout_metrics_any(&model, &data.holdout)?;
        let curve = recall_curve(&model, &oracle, population, &truth.ad_bid, config.eval.recall_users, &ks, m)?;
        let recall = curve.iter().find(|(k, _)| *k == k_max).map_or(f64::NAN, |c| c.1);
        let n = data.holdout.len() as u64;
        let users = config.eval.recall_users.min(population.users.len()) as u64;
        models.push(ModelEval {
            checkpoint: path.clone(),
            kind: model.kind().into(),
            version: model.version(),
            metrics: vec![
                MetricReport::new("auc", a).with_population("examples", n).with_config(echo.clone()),
                MetricReport::new("gauc", g).with_population("examples", n).with_config(echo.clone()),
                MetricReport::new("topk_recall", recall)
                    .with_population("users", users)
                    .with_population("candidates", population.ads.len() as u64)
                    .with_config(echo.clone()),
            ],
            recall_curve: curve,
        });
    }
    let rows: Vec<Vec<String>> = models
        .iter()
        .map(|e| {
            let mut row = vec![e.checkpoint.display().to_string(), e.kind.clone()];
            row.extend(e.metrics.iter().map(|m| format!("{:.4}", m.value)));
            row
        })
        .collect();
    let recall_header = format!("Recall@{k_max}/{m}");
    let table = render_table(&["checkpoint", "model", "AUC", "GAUC", &recall_header], &rows);
    let mut out = outcome(Report::new("eval", config, json!({ "models": models }), table)?);
    if config.plots {
        let path = config.out_dir.join("eval_recall.svg");
        std::fs::create_dir_all(&config.out_dir)?;
        let series: Vec<(&str, Vec<(f64, f64)>)> = models
            .iter()
            .map(|e| (e.kind.as_str(), e.recall_curve.iter().map(|&(k, r)| (k as f64, r)).collect()))
            .collect();
        plot::lines(&path, &format!("top-k recall (m = {m})"), "k", "recall", &series)?;
        out.plots.push(path);
    }
    Ok(out)
}

fn holdout_metrics_any(model: &AnyModel, holdout: &[RawExample]) -> Result<(f64, f64)> {
    match model {
        AnyModel::Cold(m) => holdout_metrics(m, holdout),
        AnyModel::TwoTower(m) => holdout_metrics(m, holdout),
    }
}

/// Front-end queries with random users and distinct random candidates.
fn make_queries(config: &RunConfig, truth: &GroundTruth, population: &Population) -> Result<Vec<FrontEndQuery>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xB3AC);
    let n_ads = population.ads.len();
    let per_query = config.engine.candidates_per_query.min(n_ads);
    (0..config.engine.queries.max(1))
        .map(|i| {
            let user = population.users[rng.random_range(0..population.users.len())].clone();
            let picks = sample(&mut rng, n_ads, per_query);
            let ads: Vec<AdContext> = picks.iter().map(|a| (*population.ads[a]).clone()).collect();
            let bids = picks.iter().map(|a| truth.ad_bid[a]).collect();
            Ok(FrontEndQuery::new(i as u64, user, ads, bids, config.engine.winners.min(per_query))?)
        })
        .collect()
}

fn load_cold(config: &RunConfig, schema: &FeatureSchema) -> Result<ColdModel> {
    let path = &config.model.checkpoint;
    let model = load_model(path, schema).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let kind = model.kind();
    model
        .into_cold()
        .ok_or_else(|| anyhow!("{} holds a {kind} model; this command needs a cold model", path.display()))
}

pub fn select_cmd(config: &RunConfig) -> Result<Outcome> {
    let data = load_data(config)?;
    let (truth, population) = match (&data.truth, &data.population) {
        (Some(t), Some(p)) => (t, p),
        _ => bail!("select needs the ground-truth sidecar for its query workload"),
    };
    let full = load_cold(config, &data.schema)?;
    let n = full.groups().len();
    let ks = if config.select.ks.is_empty() {
        let mut ks = vec![2.min(n), n.div_ceil(2), n];
        ks.dedup();
        ks
    } else {
        config.select.ks.clone()
    };
    let queries = make_queries(config, truth, population)?;
    let sample_len = config.select.sample_examples.min(data.holdout.len());
    let selection_config = cold_core::selection::SelectionConfig {
        model: config.model.cold.clone(),
        train: config.train.clone(),
        bench: config.engine.bench.clone(),
        plan: config.engine.plan,
        bench_workers: config.engine.workers,
    };
    let input = SelectionData {
        train: &data.examples,
        holdout: &data.holdout,
        sample: &data.holdout[..sample_len],
        queries: &queries,
    };
    let report = select(&full, &ks, &config.select.constraint, &input, &selection_config)?;
    let table = report.table();
    let mut out = outcome(Report::new("select", config, &report, table)?);
    if config.plots {
        std::fs::create_dir_all(&config.out_dir)?;
        let gauc_path = config.out_dir.join("select_gauc.svg");
        let gauc: Vec<(f64, f64)> = report.candidates.iter().map(|c| (c.k as f64, c.gauc)).collect();
        plot::lines(&gauc_path, "holdout GAUC vs K", "K", "GAUC", &[("GAUC", gauc)])?;
        let qps_path = config.out_dir.join("select_qps.svg");
        let qps: Vec<(f64, f64)> = report.candidates.iter().map(|c| (c.k as f64, c.qps)).collect();
        plot::lines(&qps_path, "usable QPS vs K", "K", "QPS", &[("QPS", qps)])?;
        out.plots.extend([gauc_path, qps_path]);
    }
    Ok(out)
}

pub fn bench(config: &RunConfig) -> Result<Outcome> {
    let data = load_data(config)?;
    let (truth, population) = match (&data.truth, &data.population) {
        (Some(t), Some(p)) => (t, p),
        _ => bail!("bench needs the ground-truth sidecar for its query workload"),
    };
    let model = load_cold(config, &data.schema)?;
    let queries = make_queries(config, truth, population)?;
    let plan = config.engine.plan;
    let mut cells: Vec<BenchReport> = Vec::new();
    for &path in &config.engine.paths {
        for &precision in &config.engine.precisions {
            let scorer = PathScorer {
                model: &model,
                path,
                precision,
            };
            let target = LiveTarget {
                queries: &queries,
                handler: |q: &FrontEndQuery| split_and_score(q, &scorer, &plan).map(drop),
                workers: config.engine.workers,
            };
            let mut report = bench_qps_rt(&target, &config.engine.bench)?;
            report.path = Some(path);
            report.precision = Some(precision);
            report.chunk_size = Some(plan.chunk_size);
            cells.push(report);
        }
    }
    if cells.is_empty() {
        bail!("engine.paths and engine.precisions must not be empty");
    }
    let base = cells[0].usable_qps;
    let ratio = |q: f64| if base > 0.0 { q / base } else { f64::NAN };
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.path.map(|p| p.to_string()).unwrap_or_default(),
                c.precision.map(|p| p.to_string()).unwrap_or_default(),
                format!("{:.0}", c.usable_qps),
                format!("{:.2}", c.p50_ms),
                format!("{:.2}", c.p95_ms),
                format!("{:.2}", c.p99_ms),
                format!("{:.2}x", ratio(c.usable_qps)),
            ]
        })
        .collect();
    let table = render_table(&["path", "precision", "QPS", "p50 ms", "p95 ms", "p99 ms", "vs first"], &rows);
    let result = json!({
        "cells": cells,
        "qps_ratio_vs_first": cells.iter().map(|c| ratio(c.usable_qps)).collect::<Vec<_>>(),
        "queries": queries.len(),
        "candidates_per_query": queries[0].ads.len(),
    });
    let mut out = outcome(Report::new("bench", config, result, table)?);
    if config.plots {
        std::fs::create_dir_all(&config.out_dir)?;
        let path = config.out_dir.join("bench_qps.svg");
        let bars: Vec<(String, f64)> = cells
            .iter()
            .map(|c| {
                let label = format!(
                    "{}/{}",
                    c.path.map(|p| p.to_string()).unwrap_or_default(),
                    c.precision.map(|p| p.to_string()).unwrap_or_default()
                );
                (label, c.usable_qps)
            })
            .collect();
        plot::bars(&path, "usable QPS by path and precision", "QPS", &bars)?;
        out.plots.push(path);
    }
    Ok(out)
}

pub fn serve(config: &RunConfig) -> Result<Outcome> {
    let path = &config.model.checkpoint;
    let (schema, ckpt) =
        cold_core::models::load_checkpoint_any(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let stream = match &config.serve.stream {
        Some(p) => {
            let (stream_schema, examples) = load_dataset(p).with_context(|| format!("loading stream {}", p.display()))?;
            if stream_schema.digest() != schema.digest() {
                bail!("stream {} does not match the checkpoint schema", p.display());
            }
            Some(examples)
        }
        None => None,
    };
    match ckpt.model {
        AnyModel::Cold(m) => serve_model(config, m, stream),
        AnyModel::TwoTower(m) => serve_model(config, m, stream),
    }
}

fn serve_model<M>(config: &RunConfig, model: M, stream: Option<Vec<RawExample>>) -> Result<Outcome>
where
    M: CtrModel + Scorer + Versioned,
{
    let bus = Arc::new(SnapshotBus::with_model(model.clone()));
    let server = spawn_server(bus.clone(), &config.serve.addr, config.engine.plan, config.serve.threads)
        .with_context(|| format!("binding {}", config.serve.addr))?;
    let started = Instant::now();
    println!(
        "{}",
        json!({ "event": "listening", "addr": server.addr().to_string(), "version": bus.version() })
    );
    let initial = bus.version();
    let mut online = json!(null);
    if let Some(stream) = stream {
        let mut log = JsonLines(std::io::stdout());
        let summary = train_online(model, stream, &config.train, &bus, None, &mut log)?;
        online = json!({
            "accepted": summary.accepted,
            "rejected": summary.rejected,
            "steps": summary.steps,
            "published": summary.published,
        });
    }
    match config.serve.duration_s {
        Some(s) => {
            let left = Duration::from_secs_f64(s).saturating_sub(started.elapsed());
            std::thread::sleep(left);
            server.stop()?;
        }
        None => server.wait()?,
    }
    let result = json!({
        "addr": config.serve.addr,
        "initial_version": initial,
        "final_version": bus.version(),
        "online_training": online,
        "seconds": started.elapsed().as_secs_f64(),
    });
    let table = render_table(
        &["initial version", "final version"],
        &[vec![initial.to_string(), bus.version().to_string()]],
    );
    Ok(outcome(Report::new("serve", config, result, table)?))
}
