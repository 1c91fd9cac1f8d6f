//! Shared fixtures for the criterion benchmarks under `benches/`.

use std::sync::Arc;

use cold_core::data::{generate, Dataset, GeneratorConfig};
use cold_core::engine::FrontEndQuery;
use cold_core::features::AdContext;
use cold_core::models::{ColdConfig, ColdModel};

/// A small cross-heavy dataset, an untrained COLD model over all of its
/// groups and `queries` requests of `candidates` ads each.
pub struct Fixture {
    pub data: Dataset,
    pub model: ColdModel,
    pub queries: Vec<FrontEndQuery>,
}

pub fn fixture(queries: usize, candidates: usize) -> Fixture {
    let data = generate(&GeneratorConfig {
        n_examples: 10,
        cross_heavy: true,
        ..GeneratorConfig::default()
    })
    .expect("generator config");
    let schema = Arc::new(data.schema.clone());
    let model = ColdModel::new(
        schema.clone(),
        &schema.all_groups(),
        &ColdConfig {
            hidden: vec![256, 128, 64],
            ..ColdConfig::default()
        },
    )
    .expect("model");
    let n_ads = data.population.ads.len();
    let candidates = candidates.min(n_ads);
    let queries = (0..queries)
        .map(|i| {
            let ads: Vec<AdContext> = (0..candidates)
                .map(|k| (*data.population.ads[(i * 131 + k) % n_ads]).clone())
                .collect();
            let bids = ads.iter().map(|a| data.truth.ad_bid[a.ad_id as usize]).collect();
            let user = data.population.users[i % data.population.users.len()].clone();
            FrontEndQuery::new(i as u64, user, ads, bids, 10).expect("query")
        })
        .collect();
    Fixture { data, model, queries }
}
