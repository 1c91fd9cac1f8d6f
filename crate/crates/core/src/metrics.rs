//! Offline evaluation metrics: AUC, impression-weighted GAUC, eCPM and
//! top-k recall against a ranking oracle.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AdContext, UserContext};

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Mann-Whitney U with average ranks for tied groups.
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 1) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// GAUC with the population it was computed over.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gauc {
    pub value: f64,
    /// Users with both classes.
    pub users: usize,
    /// Impressions of those users.
    pub impressions: usize,
    /// Users skipped for having a single class.
    pub skipped_users: usize,
}

/// Per-user AUC averaged with impression weights. Users whose impressions
/// are all one class are left out of both numerator and denominator.
pub fn gauc(users: &[u32], scores: &[f32], labels: &[u8]) -> Result<Gauc> {
    if users.len() != scores.len() || users.len() != labels.len() {
        return Err(Error::InvalidArgument("users, scores and labels differ in length".into()));
    }
    let mut by_user: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &u) in users.iter().enumerate() {
        by_user.entry(u).or_default().push(i);
    }
    let mut weighted = 0.0f64;
    let mut impressions = 0usize;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for rows in by_user.values() {
        let s: Vec<f32> = rows.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = rows.iter().map(|&i| labels[i]).collect();
        match auc(&s, &l) {
            Ok(a) => {
                weighted += a * rows.len() as f64;
                impressions += rows.len();
                used += 1;
            }
            Err(Error::UndefinedMetric(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("no user has both positive and negative impressions".into()));
    }
    Ok(Gauc {
        value: weighted / impressions as f64,
        users: used,
        impressions,
        skipped_users: skipped,
    })
}

pub fn ecpm(pctr: f64, bid: f64) -> f64 {
    pctr * bid
}

/// Positions of `ecpm` sorted by descending value, ties by ascending id.
pub fn rank_by_ecpm(ids: &[u32], ecpm: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| match ecpm[b].total_cmp(&ecpm[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        other => other,
    });
    order
}

/// One candidate of a request, scored by both the pre-ranker and the oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub ad_id: u32,
    pub pre_rank_pctr: f32,
    pub oracle_pctr: f32,
    pub bid: f32,
    pub label: u8,
}

/// The candidate set of one request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    candidates: Vec<ScoredCandidate>,
}

impl ScoredSet {
    pub fn new(candidates: Vec<ScoredCandidate>) -> Result<ScoredSet> {
        let mut seen = HashSet::with_capacity(candidates.len());
        for c in &candidates {
            if !seen.insert(c.ad_id) {
                return Err(Error::InvalidArgument(format!("duplicate ad id {} in candidate set", c.ad_id)));
            }
        }
        Ok(ScoredSet { candidates })
    }

    pub fn candidates(&self) -> &[ScoredCandidate] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn top(&self, n: usize, score: impl Fn(&ScoredCandidate) -> f32) -> Vec<u32> {
        let ids: Vec<u32> = self.candidates.iter().map(|c| c.ad_id).collect();
        let e: Vec<f64> = self
            .candidates
            .iter()
            .map(|c| ecpm(score(c) as f64, c.bid as f64))
            .collect();
        rank_by_ecpm(&ids, &e).into_iter().take(n).map(|i| ids[i]).collect()
    }
}

/// `|top-k by pre-rank eCPM ∩ top-m by oracle eCPM| / m`.
pub fn topk_recall(set: &ScoredSet, k: usize, m: usize) -> Result<f64> {
    if k > set.len() || m > set.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} and m = {m} must not exceed the {} candidates",
            set.len()
        )));
    }
    if m == 0 {
        return Err(Error::UndefinedMetric("m must be positive".into()));
    }
    let pre: HashSet<u32> = set.top(k, |c| c.pre_rank_pctr).into_iter().collect();
    let hits = set.top(m, |c| c.oracle_pctr).iter().filter(|id| pre.contains(id)).count();
    Ok(hits as f64 / m as f64)
}

/// The ranking stage that pre-ranking recall is measured against.
pub trait RankingOracle: Send + Sync {
    /// Deterministic pCTR for a (user, ad) pair.
    fn pctr(&self, user: &UserContext, ad: &AdContext) -> Result<f32>;
}

/// A named metric with the population it was computed over and the
/// configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub population: HashMap<String, u64>,
    pub config: serde_json::Value,
}

impl MetricReport {
    pub fn new(metric: &str, value: f64) -> MetricReport {
        MetricReport {
            metric: metric.to_string(),
            value,
            population: HashMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn with_population(mut self, key: &str, n: u64) -> MetricReport {
        self.population.insert(key.to_string(), n);
        self
    }

    pub fn with_config(mut self, config: serde_json::Value) -> MetricReport {
        self.config = config;
        self
    }
}
