//! Feature-group selection by SE weight under a system-performance
//! constraint.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::engine::{bench_qps_rt, split_and_score, BenchConfig, FrontEndQuery, LiveTarget, SplitPlan};
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, RawExample, Side};
use crate::metrics::gauc;
use crate::models::{ColdConfig, ColdModel, CtrModel};
use crate::training::{train_batch, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedGroup {
    /// Index into the schema.
    pub group: usize,
    pub id: String,
    pub side: Side,
    /// Mean SE weight over the sample.
    pub weight: f32,
}

/// Orders the model's groups by descending mean SE weight over `sample`;
/// equal weights keep schema order.
pub fn rank_groups(model: &ColdModel, sample: &[RawExample]) -> Result<Vec<RankedGroup>> {
    if model.version() == 0 {
        return Err(Error::Untrained);
    }
    if sample.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let weights = model.se_weights_examples(sample)?;
    let schema = model.schema();
    let mut ranked: Vec<RankedGroup> = model
        .groups()
        .iter()
        .zip(&weights.mean)
        .map(|(&g, &w)| RankedGroup {
            group: g,
            id: schema.group(g).id.clone(),
            side: schema.group(g).side,
            weight: w,
        })
        .collect();
    // groups() is in schema order and the sort is stable
    ranked.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    Ok(ranked)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub min_qps: f64,
    pub max_p99_ms: f64,
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        if self.min_qps > 0.0 && self.max_p99_ms > 0.0 {
            Ok(())
        } else {
            Err(Error::Config("constraint min_qps and max_p99_ms must be positive".into()))
        }
    }

    pub fn admits(&self, qps: f64, p99_ms: f64) -> bool {
        qps >= self.min_qps && p99_ms <= self.max_p99_ms
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate {
    pub k: usize,
    pub groups: Vec<String>,
    /// Width of the concatenated input.
    pub d_in: usize,
    pub gauc: f64,
    pub qps: f64,
    pub p99_ms: f64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub ranking: Vec<RankedGroup>,
    pub constraint: Constraint,
    pub candidates: Vec<SelectionCandidate>,
    /// `k` of the chosen candidate; `None` when no candidate is feasible.
    pub chosen: Option<usize>,
    pub outcome: String,
}

impl SelectionReport {
    pub fn chosen_candidate(&self) -> Option<&SelectionCandidate> {
        self.chosen.and_then(|k| self.candidates.iter().find(|c| c.k == k))
    }

    /// Plain-text trade-off table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| K | D_in | GAUC | QPS | p99 (ms) | feasible | chosen |");
        let _ = writeln!(out, "|---|------|------|-----|----------|----------|--------|");
        for c in &self.candidates {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.0} | {:.2} | {} | {} |",
                c.k,
                c.d_in,
                c.gauc,
                c.qps,
                c.p99_ms,
                if c.feasible { "yes" } else { "no" },
                if self.chosen == Some(c.k) { "*" } else { "" }
            );
        }
        let _ = writeln!(out, "\n{}", self.outcome);
        out
    }
}

/// Everything [`select`] needs besides the full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub model: ColdConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub plan: SplitPlan,
    pub bench_workers: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            model: ColdConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            plan: SplitPlan::default(),
            bench_workers: 1,
        }
    }
}

pub struct SelectionData<'a> {
    pub train: &'a [RawExample],
    pub holdout: &'a [RawExample],
    /// Examples the SE weights are averaged over.
    pub sample: &'a [RawExample],
    /// Workload for the throughput measurement.
    pub queries: &'a [FrontEndQuery],
}

/// GAUC of `model` on labelled examples.
pub fn holdout_gauc<M: CtrModel>(model: &M, examples: &[RawExample]) -> Result<f64> {
    let scores = model.predict(examples)?;
    let users: Vec<u32> = examples.iter().map(|e| e.user.user_id).collect();
    let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
    Ok(gauc(&users, &scores, &labels)?.value)
}

/// Retrains one candidate on `groups` and measures it.
pub fn evaluate_candidate(
    schema: &Arc<FeatureSchema>,
    groups: &[usize],
    data: &SelectionData<'_>,
    config: &SelectionConfig,
    constraint: &Constraint,
) -> Result<(ColdModel, SelectionCandidate)> {
    let model = ColdModel::new(schema.clone(), groups, &config.model)?;
    let model = train_batch(model, data.train, &config.train)?;
    let gauc = holdout_gauc(&model, data.holdout)?;
    let target = LiveTarget {
        queries: data.queries,
        handler: |q: &FrontEndQuery| split_and_score(q, &model, &config.plan).map(drop),
        workers: config.bench_workers,
    };
    let bench = bench_qps_rt(&target, &config.bench)?;
    let candidate = SelectionCandidate {
        k: groups.len(),
        groups: groups.iter().map(|&g| schema.group(g).id.clone()).collect(),
        d_in: schema.width(groups),
        gauc,
        qps: bench.usable_qps,
        p99_ms: bench.p99_ms,
        feasible: constraint.admits(bench.usable_qps, bench.p99_ms),
    };
    Ok((model, candidate))
}

/// `k` of the feasible candidate with the highest GAUC; ties go to the
/// earlier candidate.
pub fn choose(candidates: &[SelectionCandidate]) -> Option<usize> {
    candidates
        .iter()
        .filter(|c| c.feasible)
        .fold(None::<&SelectionCandidate>, |best, c| match best {
            Some(b) if b.gauc >= c.gauc => Some(b),
            _ => Some(c),
        })
        .map(|c| c.k)
}

/// Ranks the groups of `full`, retrains a fresh model on the top-K groups for
/// every K, and chooses the best holdout GAUC among candidates meeting
/// `constraint`.
pub fn select(
    full: &ColdModel,
    ks: &[usize],
    constraint: &Constraint,
    data: &SelectionData<'_>,
    config: &SelectionConfig,
) -> Result<SelectionReport> {
    if ks.is_empty() {
        return Err(Error::InvalidArgument("no candidate K given".into()));
    }
    constraint.validate()?;
    let ranking = rank_groups(full, data.sample)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > ranking.len()) {
        return Err(Error::InvalidArgument(format!(
            "K = {k} outside 1..={} groups",
            ranking.len()
        )));
    }
    let schema = full.schema();
    let mut candidates = Vec::with_capacity(ks.len());
    for &k in ks {
        let groups: Vec<usize> = ranking[..k].iter().map(|r| r.group).collect();
        let (_, candidate) = evaluate_candidate(schema, &groups, data, config, constraint)?;
        candidates.push(candidate);
    }
    let chosen = choose(&candidates);
    let outcome = match chosen {
        Some(k) => format!("chosen: K = {k}"),
        None => "no feasible candidate".to_string(),
    };
    Ok(SelectionReport {
        ranking,
        constraint: *constraint,
        candidates,
        chosen,
        outcome,
    })
}
