//! Synthetic click data with planted structure.
//!
//! Every user belongs to a latent segment and every ad to a latent category,
//! both in `0..B` with `B` a power of two. The true logit is
//!
//! ```text
//! intercept + user_scale * x_u + ad_scale * y_a + beta_cross * H(segment_u, category_a)
//! ```
//!
//! where `H` is the `B x B` Sylvester Hadamard sign matrix (optionally a
//! scaled sum of several column-permuted copies). `H` has full rank
//! `B`, so a dot-product model with fewer than `B` output dimensions cannot
//! represent the interaction, while a cross feature over
//! `(segment, category)` can. After the optional shift time `t0` the ad
//! terms and the category-to-column assignment of `H` move towards fresh
//! draws by the shift magnitude.
//!
//! The `user_segment` feature reports the latent segment only with
//! probability `1 - segment_flip`; the pooled category history is drawn
//! from the latent segment and so carries information the segment feature
//! lacks. History length also grows with the user's click propensity.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AdContext, FeatureGroup, FeatureMap, FeatureSchema, FeatureValue, RawExample, UserContext};
use crate::metrics::RankingOracle;

/// Abrupt change of the click function at `t0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftConfig {
    pub t0: u64,
    /// 0 leaves the distribution unchanged, 1 replaces the shifted terms.
    pub magnitude: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_users: u32,
    pub n_ads: u32,
    pub n_examples: usize,
    /// Segment and category count; a power of two.
    pub latent_buckets: u32,
    pub beta_cross: f32,
    pub user_scale: f32,
    pub ad_scale: f32,
    pub intercept: f32,
    /// Mean draws of the pooled category history per user.
    pub history_len: u32,
    /// Scales a user's history length by `exp(history_propensity * x_u)`,
    /// so heavier clickers have longer histories.
    pub history_propensity: f32,
    /// How strongly a user's history favours categories it likes.
    pub history_bias: f32,
    /// Probability that the observed segment feature is a random bucket
    /// instead of the user's latent segment.
    pub segment_flip: f32,
    /// Adds a user-side group that carries no label information.
    pub noise_group: bool,
    pub noise_cardinality: u32,
    pub shift: Option<ShiftConfig>,
    pub bid_log_mean: f32,
    pub bid_log_std: f32,
    /// Inflates history counts so pooled sums leave the half-precision range.
    pub stress: bool,
    /// Adds a long pooled click list and two more cross groups.
    pub cross_heavy: bool,
    pub cross_cardinality: u32,
    /// Number `J` of Hadamard patterns summed into the interaction, each
    /// over its own seeded category permutation and scaled by `1 / sqrt(J)`.
    /// With `J > 1` only about `2^-J` of the categories get the top score
    /// for a segment.
    pub interaction_terms: u32,
    pub embed_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            n_users: 2000,
            n_ads: 1000,
            n_examples: 100_000,
            latent_buckets: 32,
            beta_cross: 2.0,
            user_scale: 0.5,
            ad_scale: 0.5,
            intercept: -1.0,
            history_len: 8,
            history_propensity: 0.5,
            history_bias: 1.5,
            segment_flip: 0.3,
            noise_group: true,
            noise_cardinality: 16,
            shift: None,
            bid_log_mean: 0.0,
            bid_log_std: 0.5,
            stress: false,
            cross_heavy: false,
            cross_cardinality: 4096,
            interaction_terms: 1,
            embed_dim: crate::features::DEFAULT_EMBED_DIM,
        }
    }
}

pub const STRESS_COUNT_MIN: u32 = 200_000;
pub const STRESS_COUNT_MAX: u32 = 2_000_000;
const CLICK_LIST_LEN: usize = 48;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_ads == 0 {
            return Err(Error::Config("generator needs at least one user and one ad".into()));
        }
        if !self.latent_buckets.is_power_of_two() {
            return Err(Error::Config(format!(
                "latent_buckets must be a power of two, got {}",
                self.latent_buckets
            )));
        }
        if !(0.0..=1.0).contains(&self.segment_flip) {
            return Err(Error::Config("segment_flip must lie in [0, 1]".into()));
        }
        if self.noise_group && self.noise_cardinality == 0 {
            return Err(Error::Config("noise_cardinality must be positive".into()));
        }
        if let Some(s) = self.shift {
            if !(0.0..=1.0).contains(&s.magnitude) {
                return Err(Error::Config("shift magnitude must lie in [0, 1]".into()));
            }
        }
        if self.interaction_terms == 0 {
            return Err(Error::Config("interaction_terms must be at least 1".into()));
        }
        if !(self.bid_log_std >= 0.0 && self.bid_log_std.is_finite()) {
            return Err(Error::Config("bid_log_std must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The feature schema of the generated data.
    pub fn schema(&self) -> Result<FeatureSchema> {
        let b = self.latent_buckets;
        let dim = self.embed_dim;
        let mut groups = vec![
            FeatureGroup::user("user_id", self.n_users).with_dim(dim),
            FeatureGroup::user("user_segment", b).with_dim(dim),
            FeatureGroup::user("user_history", b).pooled().with_dim(dim),
        ];
        if self.noise_group {
            groups.push(FeatureGroup::user("user_noise", self.noise_cardinality).with_dim(dim));
        }
        if self.cross_heavy {
            groups.push(FeatureGroup::user("user_clicks", self.n_ads).pooled().with_dim(dim));
        }
        groups.push(FeatureGroup::ad("ad_id", self.n_ads).with_dim(dim));
        groups.push(FeatureGroup::ad("ad_category", b).with_dim(dim));
        groups.push(FeatureGroup::cross("cross_segment_category", self.cross_cardinality, "user_segment", "ad_category").with_dim(dim));
        if self.cross_heavy {
            groups.push(FeatureGroup::cross("cross_user_category", self.cross_cardinality, "user_id", "ad_category").with_dim(dim));
            groups.push(FeatureGroup::cross("cross_segment_ad", self.cross_cardinality, "user_segment", "ad_id").with_dim(dim));
        }
        FeatureSchema::new(groups)
    }
}

fn interaction(perms: &[Vec<u32>], segment: u32, category: u32) -> f32 {
    if perms.is_empty() {
        return hadamard(segment, category);
    }
    let sum: f32 = hadamard(segment, category)
        + perms.iter().map(|p| hadamard(segment, p[category as usize])).sum::<f32>();
    sum / ((perms.len() + 1) as f32).sqrt()
}

/// Sign of the Sylvester Hadamard matrix at `(row, col)`.
pub fn hadamard(row: u32, col: u32) -> f32 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// The planted parameters behind a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub user_coef: Vec<f32>,
    pub ad_coef: Vec<f32>,
    /// Ad terms the shifted regime moves towards.
    pub ad_coef_shifted: Vec<f32>,
    pub user_segment: Vec<u32>,
    /// Segment value the user feature reports.
    pub observed_segment: Vec<u32>,
    pub ad_category: Vec<u32>,
    /// Category to Hadamard column in the shifted regime.
    pub category_shifted: Vec<u32>,
    pub user_history: Vec<Vec<(u32, u32)>>,
    pub user_noise: Vec<u32>,
    pub user_clicks: Vec<Vec<(u32, u32)>>,
    pub ad_bid: Vec<f32>,
    /// Category permutations of the extra interaction terms.
    #[serde(default)]
    pub category_perms: Vec<Vec<u32>>,
}

impl GroundTruth {
    fn check(&self, user: u32, ad: u32) -> Result<()> {
        if user as usize >= self.user_coef.len() {
            return Err(Error::IdOutOfRange {
                group: "user_id".into(),
                id: user,
                cardinality: self.user_coef.len() as u32,
            });
        }
        if ad as usize >= self.ad_coef.len() {
            return Err(Error::IdOutOfRange {
                group: "ad_id".into(),
                id: ad,
                cardinality: self.ad_coef.len() as u32,
            });
        }
        Ok(())
    }

    /// Shift weight in effect at `timestamp`.
    pub fn shift_weight(&self, timestamp: u64) -> f64 {
        match self.config.shift {
            Some(s) if timestamp >= s.t0 => s.magnitude as f64,
            _ => 0.0,
        }
    }

    pub fn logit_at(&self, user: u32, ad: u32, timestamp: u64) -> Result<f64> {
        self.check(user, ad)?;
        let c = &self.config;
        let (u, a) = (user as usize, ad as usize);
        let w = self.shift_weight(timestamp);
        let seg = self.user_segment[u];
        let ad_term = (1.0 - w) * self.ad_coef[a] as f64 + w * self.ad_coef_shifted[a] as f64;
        let cross = (1.0 - w) * self.interaction(seg, self.ad_category[a]) as f64
            + w * self.interaction(seg, self.category_shifted[self.ad_category[a] as usize]) as f64;
        Ok(c.intercept as f64 + c.user_scale as f64 * self.user_coef[u] as f64 + c.ad_scale as f64 * ad_term
            + c.beta_cross as f64 * cross)
    }

    /// Interaction between a latent segment and a latent category.
    pub fn interaction(&self, segment: u32, category: u32) -> f32 {
        interaction(&self.category_perms, segment, category)
    }

    /// True click probability at `timestamp`, clamped inside (0, 1).
    pub fn pctr_at(&self, user: u32, ad: u32, timestamp: u64) -> Result<f64> {
        let z = self.logit_at(user, ad, timestamp)?;
        Ok((1.0 / (1.0 + (-z).exp())).clamp(1e-6, 1.0 - 1e-6))
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        self.config.schema()
    }

    pub fn user_context(&self, schema: &FeatureSchema, user: u32) -> Result<UserContext> {
        self.check(user, 0)?;
        let u = user as usize;
        let mut map = FeatureMap::new();
        map.insert("user_id".into(), FeatureValue::Id(user));
        map.insert("user_segment".into(), FeatureValue::Id(self.observed_segment[u]));
        map.insert("user_history".into(), FeatureValue::Pooled(self.user_history[u].clone()));
        if self.config.noise_group {
            map.insert("user_noise".into(), FeatureValue::Id(self.user_noise[u]));
        }
        if self.config.cross_heavy {
            map.insert("user_clicks".into(), FeatureValue::Pooled(self.user_clicks[u].clone()));
        }
        map.retain(|k, _| schema.index_of(k).is_some());
        UserContext::from_map(schema, user, &map)
    }

    pub fn ad_context(&self, schema: &FeatureSchema, ad: u32) -> Result<AdContext> {
        self.check(0, ad)?;
        let mut map = FeatureMap::new();
        map.insert("ad_id".into(), FeatureValue::Id(ad));
        map.insert("ad_category".into(), FeatureValue::Id(self.ad_category[ad as usize]));
        map.retain(|k, _| schema.index_of(k).is_some());
        AdContext::from_map(schema, ad, &map)
    }

    /// Every user and ad context, indexed by id.
    pub fn contexts(&self, schema: &FeatureSchema) -> Result<Population> {
        let users = (0..self.user_coef.len() as u32)
            .map(|u| self.user_context(schema, u).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let ads = (0..self.ad_coef.len() as u32)
            .map(|a| self.ad_context(schema, a).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        Ok(Population { users, ads })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GroundTruth> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Pre-shift true pCTR of a (user, ad) pair.
pub fn oracle_pctr(truth: &GroundTruth, user: u32, ad: u32) -> Result<f64> {
    truth.pctr_at(user, ad, 0)
}

impl RankingOracle for GroundTruth {
    fn pctr(&self, user: &UserContext, ad: &AdContext) -> Result<f32> {
        oracle_pctr(self, user.user_id, ad.ad_id).map(|p| p as f32)
    }
}

/// Shared feature contexts of every user and ad.
#[derive(Clone, Debug)]
pub struct Population {
    pub users: Vec<Arc<UserContext>>,
    pub ads: Vec<Arc<AdContext>>,
}

/// A generated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub examples: Vec<RawExample>,
    pub truth: GroundTruth,
    pub population: Population,
}

fn draw_truth(config: &GeneratorConfig) -> GroundTruth {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let b = config.latent_buckets;
    let n_users = config.n_users as usize;
    let n_ads = config.n_ads as usize;
    let normal = |rng: &mut ChaCha8Rng| -> f32 { StandardNormal.sample(rng) };

    let user_coef: Vec<f32> = (0..n_users).map(|_| normal(&mut rng)).collect();
    let ad_coef: Vec<f32> = (0..n_ads).map(|_| normal(&mut rng)).collect();
    let ad_coef_shifted: Vec<f32> = (0..n_ads).map(|_| normal(&mut rng)).collect();
    let user_segment: Vec<u32> = (0..n_users).map(|_| rng.random_range(0..b)).collect();
    let ad_category: Vec<u32> = (0..n_ads).map(|_| rng.random_range(0..b)).collect();
    let observed_segment: Vec<u32> = user_segment
        .iter()
        .map(|&s| {
            if rng.random::<f32>() < config.segment_flip {
                rng.random_range(0..b)
            } else {
                s
            }
        })
        .collect();
    let mut category_shifted: Vec<u32> = (0..b).collect();
    category_shifted.shuffle(&mut rng);

    // separate stream so a single-term configuration draws the same data
    let mut prng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E2D_51C3);
    let category_perms: Vec<Vec<u32>> = (1..config.interaction_terms)
        .map(|_| {
            let mut p: Vec<u32> = (0..b).collect();
            p.shuffle(&mut prng);
            p
        })
        .collect();
    let sign = |s: u32, c: u32| interaction(&category_perms, s, c);

    let user_history = user_segment
        .iter()
        .zip(&user_coef)
        .map(|(&seg, &x)| {
            let weights: Vec<f64> = (0..b)
                .map(|c| (config.history_bias as f64 * sign(seg, c) as f64).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut counts = vec![0u32; b as usize];
            let draws = (config.history_len as f64 * (config.history_propensity as f64 * x as f64).exp())
                .round()
                .max(1.0) as u32;
            for _ in 0..draws {
                let mut x = rng.random::<f64>() * total;
                let mut pick = b as usize - 1;
                for (c, w) in weights.iter().enumerate() {
                    if x < *w {
                        pick = c;
                        break;
                    }
                    x -= w;
                }
                counts[pick] += 1;
            }
            counts
                .into_iter()
                .enumerate()
                .filter(|&(_, n)| n > 0)
                .map(|(c, n)| {
                    let n = if config.stress {
                        rng.random_range(STRESS_COUNT_MIN..=STRESS_COUNT_MAX)
                    } else {
                        n
                    };
                    (c as u32, n)
                })
                .collect()
        })
        .collect();

    let user_noise = if config.noise_group {
        (0..n_users).map(|_| rng.random_range(0..config.noise_cardinality)).collect()
    } else {
        Vec::new()
    };

    let user_clicks = if config.cross_heavy {
        (0..n_users)
            .map(|_| {
                let mut ids: Vec<u32> = (0..CLICK_LIST_LEN).map(|_| rng.random_range(0..config.n_ads)).collect();
                ids.sort_unstable();
                let mut out: Vec<(u32, u32)> = Vec::new();
                for id in ids {
                    match out.last_mut() {
                        Some((last, n)) if *last == id => *n += 1,
                        _ => out.push((id, 1)),
                    }
                }
                out
            })
            .collect()
    } else {
        Vec::new()
    };

    let bids = LogNormal::new(config.bid_log_mean as f64, config.bid_log_std as f64).expect("validated parameters");
    let ad_bid: Vec<f32> = (0..n_ads).map(|_| bids.sample(&mut rng) as f32).collect();

    GroundTruth {
        config: config.clone(),
        user_coef,
        ad_coef,
        ad_coef_shifted,
        user_segment,
        observed_segment,
        ad_category,
        category_shifted,
        user_history,
        user_noise,
        user_clicks,
        ad_bid,
        category_perms,
    }
}

/// Generates `config.n_examples` impressions with uniformly drawn users and
/// ads, timestamps `0..n` and Bernoulli labels from the true pCTR.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let schema = config.schema()?;
    let truth = draw_truth(config);
    let population = truth.contexts(&schema)?;
    let examples = sample_examples(&truth, &population, 0, config.n_examples, config.seed.wrapping_add(1))?;
    Ok(Dataset {
        schema,
        examples,
        truth,
        population,
    })
}

/// Draws `count` more impressions with timestamps starting at `start`,
/// e.g. for a holdout set from the same ground truth.
pub fn sample_examples(
    truth: &GroundTruth,
    population: &Population,
    start: u64,
    count: usize,
    seed: u64,
) -> Result<Vec<RawExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_users = population.users.len() as u32;
    let n_ads = population.ads.len() as u32;
    (0..count)
        .map(|i| {
            let ts = start + i as u64;
            let u = rng.random_range(0..n_users);
            let a = rng.random_range(0..n_ads);
            let p = truth.pctr_at(u, a, ts)?;
            let label = u8::from(rng.random::<f64>() < p);
            Ok(RawExample {
                user: population.users[u as usize].clone(),
                ad: population.ads[a as usize].clone(),
                label,
                bid: truth.ad_bid[a as usize],
                timestamp: ts,
            })
        })
        .collect()
}

/// Conventional location of the ground-truth sidecar next to a dataset.
pub fn truth_path(dataset: &Path) -> std::path::PathBuf {
    let mut p = dataset.as_os_str().to_owned();
    p.push(".truth.json");
    p.into()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_users: 50,
            n_ads: 40,
            n_examples: 500,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn hadamard_rows_are_orthogonal() {
        for r in 0..8 {
            for s in 0..8 {
                let d: f32 = (0..8).map(|c| hadamard(r, c) * hadamard(s, c)).sum();
                assert_eq!(d, if r == s { 8.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn zero_coefficients_give_one_half() {
        let cfg = GeneratorConfig {
            beta_cross: 0.0,
            user_scale: 0.0,
            ad_scale: 0.0,
            intercept: 0.0,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        assert_eq!(oracle_pctr(&d.truth, 3, 7).unwrap(), 0.5);
    }

    #[test]
    fn degenerate_configs() {
        assert!(generate(&GeneratorConfig { n_users: 0, ..small() }).is_err());
        assert!(generate(&GeneratorConfig { n_ads: 0, ..small() }).is_err());
        assert!(generate(&GeneratorConfig { latent_buckets: 12, ..small() }).is_err());
    }

    #[test]
    fn unknown_ids_rejected() {
        let d = generate(&small()).unwrap();
        assert!(oracle_pctr(&d.truth, 50, 0).is_err());
        assert!(oracle_pctr(&d.truth, 0, 40).is_err());
    }

    #[test]
    fn bids_positive() {
        let d = generate(&small()).unwrap();
        assert!(d.examples.iter().all(|e| e.bid > 0.0));
    }
}
