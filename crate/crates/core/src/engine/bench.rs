//! Open-loop load benchmark.
//!
//! The offered rate is ramped geometrically until the first step that is not
//! usable, then refined by bisection between the last usable and the first
//! unusable rate. A step is usable when at most `over_limit_fraction` of its
//! measured responses exceed the latency limit and the server kept up with
//! the offered rate. Latency is measured from the scheduled arrival time, so
//! queueing delay counts.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::FrontEndQuery;
use crate::error::{Error, Result};
use crate::features::{build_batch_column, build_batch_row, concat_embeddings, BatchPath, EmbeddingTables, FeatureSchema};
use crate::numerics::PrecisionMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub latency_limit_ms: f64,
    pub over_limit_fraction: f64,
    pub start_qps: f64,
    pub max_qps: f64,
    pub ramp_factor: f64,
    pub refine_steps: usize,
    /// Measured requests per step.
    pub requests_per_step: usize,
    /// Requests sent before measuring each step.
    pub warmup_requests: usize,
    /// Achieved over offered throughput below which a step counts as saturated.
    pub min_throughput_ratio: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            latency_limit_ms: 20.0,
            over_limit_fraction: 0.01,
            start_qps: 10.0,
            max_qps: 1e6,
            ramp_factor: 2.0,
            refine_steps: 5,
            requests_per_step: 400,
            warmup_requests: 40,
            min_throughput_ratio: 0.9,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.latency_limit_ms > 0.0
            && (0.0..1.0).contains(&self.over_limit_fraction)
            && self.start_qps > 0.0
            && self.max_qps >= self.start_qps
            && self.ramp_factor > 1.0
            && self.requests_per_step > 0
            && (0.0..=1.0).contains(&self.min_throughput_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid bench configuration {self:?}")))
        }
    }
}

/// Latencies of one measured step.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadRun {
    /// Per measured request, in arrival order.
    pub latencies_ms: Vec<f64>,
    /// Seconds from the first measured arrival to the last completion.
    pub span_s: f64,
}

/// A system the harness can drive at a given arrival rate.
pub trait LoadTarget {
    /// Offers `warmup + requests` arrivals at `rate` per second and returns
    /// the measurements of the last `requests`.
    fn run(&self, rate: f64, warmup: usize, requests: usize, seed: u64) -> Result<LoadRun>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampStep {
    pub offered_qps: f64,
    pub achieved_qps: f64,
    pub over_limit: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub usable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub usable_qps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub latency_limit_ms: f64,
    pub precision: Option<PrecisionMode>,
    pub path: Option<BatchPath>,
    pub chunk_size: Option<usize>,
    pub steps: Vec<RampStep>,
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

struct Measured {
    step: RampStep,
    latencies: Vec<f64>,
}

fn measure(target: &dyn LoadTarget, rate: f64, config: &BenchConfig, index: u64) -> Result<Measured> {
    let run = target.run(rate, config.warmup_requests, config.requests_per_step, config.seed.wrapping_add(index))?;
    let n = run.latencies_ms.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let over = run.latencies_ms.iter().filter(|&&l| l > config.latency_limit_ms).count() as f64 / n as f64;
    let achieved = if run.span_s > 0.0 { n as f64 / run.span_s } else { f64::INFINITY };
    let usable = over <= config.over_limit_fraction && achieved >= config.min_throughput_ratio * rate;
    Ok(Measured {
        step: RampStep {
            offered_qps: rate,
            achieved_qps: achieved,
            over_limit: over,
            p50_ms: percentile(&run.latencies_ms, 50.0),
            p99_ms: percentile(&run.latencies_ms, 99.0),
            usable,
        },
        latencies: run.latencies_ms,
    })
}

/// Finds the usable QPS of `target`. Percentiles in the report are those of
/// the highest usable step, or of the first step when none was usable.
pub fn bench_qps_rt(target: &dyn LoadTarget, config: &BenchConfig) -> Result<BenchReport> {
    config.validate()?;
    let mut steps = Vec::new();
    let mut index = 0u64;
    let mut best: Option<Measured> = None;
    let mut first: Option<Vec<f64>> = None;
    let mut failed_at: Option<f64> = None;

    let mut rate = config.start_qps;
    loop {
        let m = measure(target, rate, config, index)?;
        index += 1;
        steps.push(m.step.clone());
        first.get_or_insert_with(|| m.latencies.clone());
        if !m.step.usable {
            failed_at = Some(rate);
            break;
        }
        best = Some(m);
        if rate >= config.max_qps {
            break;
        }
        rate = (rate * config.ramp_factor).min(config.max_qps);
    }

    if let Some(mut hi) = failed_at {
        let mut lo = best.as_ref().map_or(0.0, |m| m.step.offered_qps);
        for _ in 0..config.refine_steps {
            let mid = 0.5 * (lo + hi);
            if mid <= 0.0 {
                break;
            }
            let m = measure(target, mid, config, index)?;
            index += 1;
            steps.push(m.step.clone());
            if m.step.usable {
                lo = mid;
                best = Some(m);
            } else {
                hi = mid;
            }
        }
    }

    let (usable_qps, latencies) = match best {
        Some(m) => (m.step.offered_qps, m.latencies),
        None => (0.0, first.unwrap_or_default()),
    };
    Ok(BenchReport {
        usable_qps,
        p50_ms: percentile(&latencies, 50.0),
        p95_ms: percentile(&latencies, 95.0),
        p99_ms: percentile(&latencies, 99.0),
        mean_ms: latencies.iter().sum::<f64>() / latencies.len().max(1) as f64,
        latency_limit_ms: config.latency_limit_ms,
        precision: None,
        path: None,
        chunk_size: None,
        steps,
    })
}

/// Drives a real handler from `workers` threads. Arrivals are evenly spaced
/// at the offered rate; a worker picks up the next arrival when it is free.
pub struct LiveTarget<'a, F> {
    pub queries: &'a [FrontEndQuery],
    pub handler: F,
    pub workers: usize,
}

impl<F> LoadTarget for LiveTarget<'_, F>
where
    F: Fn(&FrontEndQuery) -> Result<()> + Sync,
{
    fn run(&self, rate: f64, warmup: usize, requests: usize, _seed: u64) -> Result<LoadRun> {
        if self.queries.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let total = warmup + requests;
        let next = AtomicUsize::new(0);
        let latencies = Mutex::new(vec![0.0f64; total]);
        let last_done = Mutex::new(Duration::ZERO);
        let error: Mutex<Option<Error>> = Mutex::new(None);
        let start = Instant::now();
        let interval = 1.0 / rate;
        std::thread::scope(|s| {
            for _ in 0..self.workers.max(1) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= total {
                        break;
                    }
                    let due = Duration::from_secs_f64(i as f64 * interval);
                    let now = start.elapsed();
                    if due > now {
                        std::thread::sleep(due - now);
                    }
                    if let Err(e) = (self.handler)(&self.queries[i % self.queries.len()]) {
                        error.lock().unwrap().get_or_insert(e);
                        break;
                    }
                    let done = start.elapsed();
                    latencies.lock().unwrap()[i] = (done - due).as_secs_f64() * 1e3;
                    let mut last = last_done.lock().unwrap();
                    if done > *last {
                        *last = done;
                    }
                });
            }
        });
        if let Some(e) = error.into_inner().unwrap() {
            return Err(e);
        }
        let first_measured = warmup as f64 * interval;
        let span = last_done.into_inner().unwrap().as_secs_f64() - first_measured;
        Ok(LoadRun {
            latencies_ms: latencies.into_inner().unwrap().split_off(warmup),
            span_s: span,
        })
    }
}

/// Single-server queue with Poisson arrivals and exponential service times,
/// simulated with the Lindley recursion. Its response time at arrival rate
/// `l` is exponential with rate `mu - l`, which gives the closed-form usable
/// rate `mu - ln(1 / fraction) / limit`.
#[derive(Clone, Copy, Debug)]
pub struct SimulatedQueue {
    /// Service rate `mu` in requests per second.
    pub service_rate: f64,
}

impl SimulatedQueue {
    /// Highest arrival rate whose response-time tail above `limit_ms` is at
    /// most `fraction`.
    pub fn analytic_usable_qps(&self, limit_ms: f64, fraction: f64) -> f64 {
        (self.service_rate - (1.0 / fraction).ln() / (limit_ms / 1e3)).max(0.0)
    }
}

impl LoadTarget for SimulatedQueue {
    fn run(&self, rate: f64, warmup: usize, requests: usize, seed: u64) -> Result<LoadRun> {
        let arrivals = Exp::new(rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let service = Exp::new(self.service_rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wait = 0.0f64;
        let mut clock = 0.0f64;
        let mut first_arrival = 0.0;
        let mut last_done = 0.0f64;
        let mut latencies = Vec::with_capacity(requests);
        for i in 0..warmup + requests {
            let s: f64 = service.sample(&mut rng);
            let response = wait + s;
            if i == warmup {
                first_arrival = clock;
            }
            if i >= warmup {
                latencies.push(response * 1e3);
                last_done = last_done.max(clock + response);
            }
            let gap: f64 = arrivals.sample(&mut rng);
            wait = (wait + s - gap).max(0.0);
            clock += gap;
        }
        Ok(LoadRun {
            latencies_ms: latencies,
            span_s: last_done - first_arrival,
        })
    }
}

/// Candidates per second through feature computation and concatenation for
/// one path, measured over at least `min_time`.
pub fn feature_throughput(
    schema: &FeatureSchema,
    tables: &EmbeddingTables,
    selected: &[usize],
    queries: &[FrontEndQuery],
    path: BatchPath,
    min_time: Duration,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let start = Instant::now();
    let mut candidates = 0usize;
    let mut i = 0usize;
    while start.elapsed() < min_time || i < queries.len() {
        let q = &queries[i % queries.len()];
        let batch = match path {
            BatchPath::Row => build_batch_row(schema, tables, &q.user, &q.ads)?,
            BatchPath::Column => build_batch_column(schema, tables, &q.user, &q.ads)?,
        };
        let concat = concat_embeddings(&batch, selected)?;
        std::hint::black_box(&concat);
        candidates += q.ads.len();
        i += 1;
    }
    Ok(candidates as f64 / start.elapsed().as_secs_f64())
}
