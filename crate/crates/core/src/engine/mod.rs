//! Serving: query splitting and merging, the load benchmark harness and the
//! HTTP scoring service.

mod bench;
mod serve;

pub use bench::{
    bench_qps_rt, feature_throughput, percentile, BenchConfig, BenchReport, LiveTarget, LoadRun, LoadTarget,
    RampStep, SimulatedQueue,
};
pub use serve::{spawn_server, ScoreRequest, ScoreResponse, ServerHandle, WireAd, WireUser};

use std::collections::HashSet;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AdContext, BatchPath, FeatureSchema, UserContext};
use crate::metrics::rank_by_ecpm;
use crate::models::{AnyModel, ColdModel, TwoTowerModel};
use crate::numerics::PrecisionMode;

/// Anything that turns a user and candidate ads into pCTRs.
pub trait Scorer: Send + Sync {
    fn feature_schema(&self) -> &FeatureSchema;

    fn score_candidates(&self, user: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>>;
}

impl Scorer for ColdModel {
    fn feature_schema(&self) -> &FeatureSchema {
        self.schema()
    }

    fn score_candidates(&self, user: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>> {
        self.score(user, ads)
    }
}

impl Scorer for TwoTowerModel {
    fn feature_schema(&self) -> &FeatureSchema {
        self.schema()
    }

    fn score_candidates(&self, user: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>> {
        self.score(user, ads)
    }
}

impl Scorer for AnyModel {
    fn feature_schema(&self) -> &FeatureSchema {
        self.schema()
    }

    fn score_candidates(&self, user: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>> {
        match self {
            AnyModel::Cold(m) => m.score(user, ads),
            AnyModel::TwoTower(m) => m.score(user, ads),
        }
    }
}

/// A COLD model pinned to one feature path and precision.
#[derive(Clone, Copy, Debug)]
pub struct PathScorer<'a> {
    pub model: &'a ColdModel,
    pub path: BatchPath,
    pub precision: PrecisionMode,
}

impl Scorer for PathScorer<'_> {
    fn feature_schema(&self) -> &FeatureSchema {
        self.model.schema()
    }

    fn score_candidates(&self, user: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>> {
        self.model.score_path(user, ads, self.path, self.precision)
    }
}

/// One request from the front end: a user, its candidate ads with bids, and
/// the number of winners wanted.
#[derive(Clone, Debug)]
pub struct FrontEndQuery {
    pub request_id: u64,
    pub user: Arc<UserContext>,
    pub ads: Vec<AdContext>,
    pub bids: Vec<f32>,
    pub n: usize,
}

impl FrontEndQuery {
    pub fn new(request_id: u64, user: Arc<UserContext>, ads: Vec<AdContext>, bids: Vec<f32>, n: usize) -> Result<Self> {
        let q = FrontEndQuery {
            request_id,
            user,
            ads,
            bids,
            n,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ads.is_empty() {
            return Err(Error::InvalidArgument("query has no candidates".into()));
        }
        if self.bids.len() != self.ads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bids for {} candidates",
                self.bids.len(),
                self.ads.len()
            )));
        }
        if self.n > self.ads.len() {
            return Err(Error::InvalidArgument(format!(
                "n = {} exceeds the {} candidates",
                self.n,
                self.ads.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.ads.len());
        for ad in &self.ads {
            if !seen.insert(ad.ad_id) {
                return Err(Error::InvalidArgument(format!("duplicate candidate ad {}", ad.ad_id)));
            }
        }
        if let Some(b) = self.bids.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::InvalidArgument(format!("bid {b} is not a finite non-negative number")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    /// Candidates per inference query.
    pub chunk_size: usize,
    /// Score chunks on the rayon pool instead of one after another.
    pub parallel: bool,
}

pub const DEFAULT_CHUNK_SIZE: usize = 300;

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            chunk_size: DEFAULT_CHUNK_SIZE,
            parallel: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Winner {
    pub ad_id: u32,
    pub pctr: f32,
    pub ecpm: f64,
}

/// Scores `query` in chunks of `plan.chunk_size` and returns the top `n` by
/// eCPM, ties broken by ascending ad id.
pub fn split_and_score<S: Scorer + ?Sized>(query: &FrontEndQuery, scorer: &S, plan: &SplitPlan) -> Result<Vec<Winner>> {
    query.validate()?;
    if plan.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    let chunks: Vec<&[AdContext]> = query.ads.chunks(plan.chunk_size).collect();
    let scored: Vec<Result<Vec<f32>>> = if plan.parallel && chunks.len() > 1 {
        chunks
            .par_iter()
            .map(|c| scorer.score_candidates(&query.user, c))
            .collect()
    } else {
        chunks
            .iter()
            .map(|c| scorer.score_candidates(&query.user, c))
            .collect()
    };
    let mut pctr = Vec::with_capacity(query.ads.len());
    for s in scored {
        pctr.extend(s?);
    }
    Ok(top_n(query, &pctr))
}

fn top_n(query: &FrontEndQuery, pctr: &[f32]) -> Vec<Winner> {
    let ids: Vec<u32> = query.ads.iter().map(|a| a.ad_id).collect();
    let ecpm: Vec<f64> = pctr
        .iter()
        .zip(&query.bids)
        .map(|(&p, &b)| crate::metrics::ecpm(p as f64, b as f64))
        .collect();
    rank_by_ecpm(&ids, &ecpm)
        .into_iter()
        .take(query.n)
        .map(|i| Winner {
            ad_id: ids[i],
            pctr: pctr[i],
            ecpm: ecpm[i],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureValue;

    struct ByIdScorer(FeatureSchema);

    impl Scorer for ByIdScorer {
        fn feature_schema(&self) -> &FeatureSchema {
            &self.0
        }

        fn score_candidates(&self, _: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>> {
            Ok(ads.iter().map(|a| (a.ad_id % 7) as f32 / 10.0).collect())
        }
    }

    fn query(n_ads: u32, n: usize) -> FrontEndQuery {
        let user = Arc::new(UserContext {
            user_id: 0,
            values: vec![FeatureValue::Id(0)],
        });
        let ads = (0..n_ads)
            .map(|i| AdContext {
                ad_id: i,
                values: vec![FeatureValue::Id(i)],
            })
            .collect();
        FrontEndQuery::new(1, user, ads, vec![1.0; n_ads as usize], n).unwrap()
    }

    fn scorer() -> ByIdScorer {
        use crate::features::FeatureGroup;
        ByIdScorer(FeatureSchema::new(vec![FeatureGroup::user("u", 1), FeatureGroup::ad("a", 100)]).unwrap())
    }

    #[test]
    fn chunking_does_not_change_winners() {
        let q = query(100, 10);
        let whole = split_and_score(&q, &scorer(), &SplitPlan { chunk_size: 100, parallel: false }).unwrap();
        for chunk_size in [1, 3, 30] {
            let split = split_and_score(&q, &scorer(), &SplitPlan { chunk_size, parallel: true }).unwrap();
            assert_eq!(split, whole);
        }
        // ads 6, 13, 20, ... share the top score; ascending id wins
        assert_eq!(whole[0].ad_id, 6);
        assert_eq!(whole[1].ad_id, 13);
    }

    #[test]
    fn invalid_queries() {
        let mut q = query(5, 5);
        q.n = 6;
        assert!(split_and_score(&q, &scorer(), &SplitPlan::default()).is_err());
        let mut q = query(5, 2);
        q.ads[1].ad_id = 0;
        assert!(q.validate().is_err());
        let q = query(5, 2);
        assert!(split_and_score(&q, &scorer(), &SplitPlan { chunk_size: 0, parallel: false }).is_err());
    }
}
