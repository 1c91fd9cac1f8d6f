//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use cold_core::features::{ColumnarBatch, IdColumn};
use cold_core::models::ColdModel;
use cold_core::numerics::{Matrix, Mlp};

/// Dense layer in f64, weight stored fan_in x fan_out.
#[derive(Clone, Debug)]
pub struct Layer64 {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn mlp64(mlp: &Mlp) -> Vec<Layer64> {
    mlp.layers
        .iter()
        .map(|l| Layer64 {
            fan_in: l.weight.rows(),
            fan_out: l.weight.cols(),
            weight: l.weight.as_slice().iter().map(|&v| v as f64).collect(),
            bias: l.bias.iter().map(|&v| v as f64).collect(),
        })
        .collect()
}

/// Forward pass of a ReLU network with a linear last layer. Returns the
/// output rows and the sign pattern of every hidden pre-activation.
pub fn forward64(layers: &[Layer64], input: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut mask = Vec::new();
    let mut out = Vec::with_capacity(input.len());
    for x in input {
        let mut h = x.clone();
        for (i, l) in layers.iter().enumerate() {
            let mut next = l.bias.clone();
            for (a, &hv) in h.iter().enumerate() {
                for (b, n) in next.iter_mut().enumerate() {
                    *n += hv * l.weight[a * l.fan_out + b];
                }
            }
            if i + 1 < layers.len() {
                for v in next.iter_mut() {
                    mask.push(*v > 0.0);
                    *v = v.max(0.0);
                }
            }
            h = next;
        }
        out.push(h);
    }
    (out, mask)
}

/// Max-norm relative error between analytic and central-difference
/// gradients of `sum(upstream * output)` over every parameter. Parameters
/// whose perturbation flips a ReLU are skipped. Returns the error and the
/// number of parameters compared.
pub fn mlp_gradient_error(mlp: &Mlp, input: &Matrix, upstream: &Matrix, analytic: &[&[f32]], h: f64) -> (f64, usize) {
    let x: Vec<Vec<f64>> = (0..input.rows())
        .map(|r| input.row(r).iter().map(|&v| v as f64).collect())
        .collect();
    let up: Vec<Vec<f64>> = (0..upstream.rows())
        .map(|r| upstream.row(r).iter().map(|&v| v as f64).collect())
        .collect();
    let objective = |layers: &[Layer64]| -> (f64, Vec<bool>) {
        let (out, mask) = forward64(layers, &x);
        let v = out
            .iter()
            .zip(&up)
            .map(|(o, u)| o.iter().zip(u).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        (v, mask)
    };
    let base = mlp64(mlp);
    let (_, base_mask) = objective(&base);
    let mut numeric = Vec::new();
    let mut analytic_flat = Vec::new();
    let mut idx = 0;
    for li in 0..base.len() {
        for which in 0..2 {
            let len = if which == 0 { base[li].weight.len() } else { base[li].bias.len() };
            for k in 0..len {
                let mut plus = base.clone();
                let mut minus = base.clone();
                let (p, m) = if which == 0 {
                    (&mut plus[li].weight[k], &mut minus[li].weight[k])
                } else {
                    (&mut plus[li].bias[k], &mut minus[li].bias[k])
                };
                *p += h;
                *m -= h;
                let (fp, mp) = objective(&plus);
                let (fm, mm) = objective(&minus);
                if mp == base_mask && mm == base_mask {
                    numeric.push((fp - fm) / (2.0 * h));
                    analytic_flat.push(analytic[idx][k] as f64);
                }
            }
            idx += 1;
        }
    }
    (max_norm_relative(&analytic_flat, &numeric), numeric.len())
}

/// `max |a - b| / max |b|`.
pub fn max_norm_relative(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn linear_log64(x: f64) -> f64 {
    if x > 1.0 {
        x.ln() + 1.0
    } else if x < -1.0 {
        -(-x).ln() - 1.0
    } else {
        x
    }
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every parameter of a COLD model in f64, in training order: tables, SE
/// weight, SE bias, then network weight/bias pairs.
#[derive(Clone, Debug)]
pub struct Cold64 {
    pub tensors: Vec<Vec<f64>>,
    pub dims: Vec<usize>,
    pub spans: Vec<usize>,
    pub layers: Vec<(usize, usize)>,
    pub linear_log: bool,
}

/// `(id, count)` lists per example and selected group, read off a batch.
pub fn batch_ids(batch: &ColumnarBatch, groups: &[usize]) -> Vec<Vec<Vec<(u32, u32)>>> {
    (0..batch.len())
        .map(|r| {
            groups
                .iter()
                .map(|&g| match &batch.column(g).unwrap().ids {
                    IdColumn::Single(ids) => vec![(ids[r], 1)],
                    IdColumn::Pooled { offsets, entries } => entries[offsets[r]..offsets[r + 1]].to_vec(),
                })
                .collect()
        })
        .collect()
}

impl Cold64 {
    pub fn from_model(model: &ColdModel) -> Cold64 {
        let mut tensors: Vec<Vec<f64>> = model
            .tables()
            .tables()
            .iter()
            .map(|t| t.weights.as_slice().iter().map(|&v| v as f64).collect())
            .collect();
        let dims = model.tables().tables().iter().map(|t| t.weights.cols()).collect();
        tensors.push(model.se_block().weight.as_slice().iter().map(|&v| v as f64).collect());
        tensors.push(model.se_block().bias.iter().map(|&v| v as f64).collect());
        let mut layers = Vec::new();
        for l in &model.fcn().layers {
            tensors.push(l.weight.as_slice().iter().map(|&v| v as f64).collect());
            tensors.push(l.bias.iter().map(|&v| v as f64).collect());
            layers.push((l.weight.rows(), l.weight.cols()));
        }
        Cold64 {
            tensors,
            dims,
            spans: model.se_block().spans.clone(),
            layers,
            linear_log: model.use_linear_log(),
        }
    }

    /// Mean binary cross-entropy of the two-logit head. Tables are matched
    /// to groups by position, which assumes every table is selected.
    pub fn loss(&self, ids: &[Vec<Vec<(u32, u32)>>], labels: &[u8]) -> f64 {
        let n_tables = self.dims.len();
        let m = self.spans.len();
        let width: usize = self.spans.iter().sum();
        let se_w = &self.tensors[n_tables];
        let se_b = &self.tensors[n_tables + 1];
        let mut total = 0.0;
        for (ex, &y) in ids.iter().zip(labels) {
            let mut z = Vec::with_capacity(width);
            for (t, entries) in ex.iter().enumerate() {
                let dim = self.dims[t];
                let mut acc = vec![0.0; dim];
                for &(id, count) in entries {
                    for d in 0..dim {
                        acc[d] += count as f64 * self.tensors[t][id as usize * dim + d];
                    }
                }
                z.extend(acc);
            }
            if self.linear_log {
                z.iter_mut().for_each(|v| *v = linear_log64(*v));
            }
            let mut s = se_b.clone();
            for (j, &zj) in z.iter().enumerate() {
                for (i, si) in s.iter_mut().enumerate() {
                    *si += zj * se_w[j * m + i];
                }
            }
            let s: Vec<f64> = s.into_iter().map(sigmoid64).collect();
            let mut v = z.clone();
            let mut off = 0;
            for (i, &span) in self.spans.iter().enumerate() {
                for x in &mut v[off..off + span] {
                    *x *= s[i];
                }
                off += span;
            }
            let layers: Vec<Layer64> = self
                .layers
                .iter()
                .enumerate()
                .map(|(i, &(fi, fo))| Layer64 {
                    fan_in: fi,
                    fan_out: fo,
                    weight: self.tensors[n_tables + 2 + 2 * i].clone(),
                    bias: self.tensors[n_tables + 3 + 2 * i].clone(),
                })
                .collect();
            let (out, _) = forward64(&layers, &[v]);
            let d = out[0][1] - out[0][0];
            let p = sigmoid64(d);
            total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        total / ids.len() as f64
    }
}

/// Rank-limited least-squares fit `U V^T` of a matrix by alternating least
/// squares.
pub fn factorized_fit(target: &[Vec<f64>], rank: usize, iters: usize, seed: u64) -> Vec<Vec<f64>> {
    let rows = target.len();
    let cols = target[0].len();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5
    };
    let mut u: Vec<Vec<f64>> = (0..rows).map(|_| (0..rank).map(|_| next()).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..cols).map(|_| (0..rank).map(|_| next()).collect()).collect();
    let transpose: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| target[r][c]).collect()).collect();
    for _ in 0..iters {
        u = least_squares_rows(target, &v, rank);
        v = least_squares_rows(&transpose, &u, rank);
    }
    (0..rows)
        .map(|r| (0..cols).map(|c| (0..rank).map(|k| u[r][k] * v[c][k]).sum()).collect())
        .collect()
}

/// For each row `t` of `target`, solves `min_x |F x - t|` with ridge 1e-9.
fn least_squares_rows(target: &[Vec<f64>], factors: &[Vec<f64>], rank: usize) -> Vec<Vec<f64>> {
    let mut gram = vec![vec![0.0; rank]; rank];
    for f in factors {
        for a in 0..rank {
            for b in 0..rank {
                gram[a][b] += f[a] * f[b];
            }
        }
    }
    for (a, row) in gram.iter_mut().enumerate() {
        row[a] += 1e-9;
    }
    target
        .iter()
        .map(|t| {
            let mut rhs = vec![0.0; rank];
            for (f, &tv) in factors.iter().zip(t) {
                for a in 0..rank {
                    rhs[a] += f[a] * tv;
                }
            }
            solve(gram.clone(), rhs)
        })
        .collect()
}

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Expected per-row AUC of `scores` when row `r`, column `c` is shown
/// uniformly and clicked with probability `p[r][c]`, averaged over rows.
pub fn expected_row_auc(p: &[Vec<f64>], scores: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (pr, sr) in p.iter().zip(scores) {
        let mut num = 0.0;
        let mut pos_mass = 0.0;
        let mut neg_mass = 0.0;
        for (&pi, &si) in pr.iter().zip(sr) {
            pos_mass += pi;
            neg_mass += 1.0 - pi;
            for (&pj, &sj) in pr.iter().zip(sr) {
                let w = pi * (1.0 - pj);
                if si > sj {
                    num += w;
                } else if si == sj {
                    num += 0.5 * w;
                }
            }
        }
        total += num / (pos_mass * neg_mass);
    }
    total / p.len() as f64
}

/// Highest M/M/1 arrival rate whose sojourn-time tail beyond `limit_s` is at
/// most `fraction`: the sojourn time is exponential with rate `mu - lambda`.
pub fn mm1_usable_rate(mu: f64, limit_s: f64, fraction: f64) -> f64 {
    mu + fraction.ln() / limit_s
}

pub mod fuzz {
    use cold_core::features::{
        AdContext, EmbeddingTables, FeatureGroup, FeatureSchema, FeatureValue, Multiplicity, RawExample, Side,
        UserContext,
    };
    use rand::Rng;
    use std::sync::Arc;

    /// A schema with 1-3 user, 1-3 ad and 0-2 cross groups, some pooled.
    pub fn schema<R: Rng>(rng: &mut R) -> FeatureSchema {
        let mut groups = Vec::new();
        let mut user_single = Vec::new();
        let mut ad_single = Vec::new();
        for i in 0..rng.random_range(1..=3) {
            let id = format!("u{i}");
            let mut g = FeatureGroup::user(&id, rng.random_range(1..40)).with_dim(rng.random_range(1..6));
            if rng.random_bool(0.4) {
                g = g.pooled();
            } else {
                user_single.push(id);
            }
            groups.push(g);
        }
        for i in 0..rng.random_range(1..=3) {
            let id = format!("a{i}");
            let mut g = FeatureGroup::ad(&id, rng.random_range(1..40)).with_dim(rng.random_range(1..6));
            if rng.random_bool(0.3) {
                g = g.pooled();
            } else {
                ad_single.push(id);
            }
            groups.push(g);
        }
        if !user_single.is_empty() && !ad_single.is_empty() {
            for i in 0..rng.random_range(0..=2) {
                let u = &user_single[rng.random_range(0..user_single.len())];
                let a = &ad_single[rng.random_range(0..ad_single.len())];
                groups.push(
                    FeatureGroup::cross(&format!("x{i}"), rng.random_range(1..64), u, a).with_dim(rng.random_range(1..6)),
                );
            }
        }
        FeatureSchema::new(groups).expect("generated schema is valid")
    }

    fn value<R: Rng>(g: &FeatureGroup, rng: &mut R) -> FeatureValue {
        match g.multiplicity {
            Multiplicity::Single => FeatureValue::Id(rng.random_range(0..g.cardinality)),
            Multiplicity::MultiSumPool => {
                let mut seen = std::collections::BTreeMap::new();
                for _ in 0..rng.random_range(0..6) {
                    *seen.entry(rng.random_range(0..g.cardinality)).or_insert(0u32) += rng.random_range(1..1000);
                }
                FeatureValue::Pooled(seen.into_iter().collect())
            }
        }
    }

    pub fn user<R: Rng>(schema: &FeatureSchema, id: u32, rng: &mut R) -> UserContext {
        UserContext {
            user_id: id,
            values: schema.user_groups().iter().map(|&g| value(schema.group(g), rng)).collect(),
        }
    }

    pub fn ad<R: Rng>(schema: &FeatureSchema, id: u32, rng: &mut R) -> AdContext {
        AdContext {
            ad_id: id,
            values: schema.ad_groups().iter().map(|&g| value(schema.group(g), rng)).collect(),
        }
    }

    pub fn tables<R: Rng>(schema: &FeatureSchema, rng: &mut R) -> EmbeddingTables {
        EmbeddingTables::random(schema, &schema.all_groups(), rng).unwrap()
    }

    /// Random labelled examples over `n_users` users and `n_ads` ads.
    pub fn examples<R: Rng>(schema: &FeatureSchema, n: usize, n_users: u32, n_ads: u32, rng: &mut R) -> Vec<RawExample> {
        let users: Vec<Arc<UserContext>> = (0..n_users).map(|i| Arc::new(user(schema, i, rng))).collect();
        let ads: Vec<Arc<AdContext>> = (0..n_ads).map(|i| Arc::new(ad(schema, i, rng))).collect();
        (0..n)
            .map(|t| RawExample {
                user: users[rng.random_range(0..users.len())].clone(),
                ad: ads[rng.random_range(0..ads.len())].clone(),
                label: rng.random_bool(0.5) as u8,
                bid: rng.random_range(0.1..5.0),
                timestamp: t as u64,
            })
            .collect()
    }

    pub fn sides(schema: &FeatureSchema) -> (usize, usize, usize) {
        let count = |s: Side| schema.groups().iter().filter(|g| g.side == s).count();
        (count(Side::User), count(Side::Ad), count(Side::Cross))
    }
}

/// Compares a row-path and a column-path batch: id columns bit-identical,
/// embeddings within `rel` relative error.
pub fn compare_batches(row: &ColumnarBatch, col: &ColumnarBatch, rel: f32) -> Result<(), String> {
    if row.len() != col.len() || row.groups() != col.groups() {
        return Err("batch shapes differ".into());
    }
    for (a, b) in row.columns().iter().zip(col.columns()) {
        if a.ids != b.ids {
            return Err(format!("id column of group #{} differs", a.group));
        }
        for (x, y) in a.embeddings.iter().zip(&b.embeddings) {
            let scale = x.abs().max(y.abs()).max(f32::MIN_POSITIVE);
            if (x - y).abs() / scale > rel && x != y {
                return Err(format!("group #{}: {x} vs {y}", a.group));
            }
        }
    }
    Ok(())
}

/// Load target whose response times at arrival rate `l` are the exact
/// quantiles of an exponential with rate `mu - l` (seconds): no sampling
/// noise, so the harness should land on [`mm1_usable_rate`] to within its
/// bisection resolution.
pub struct InjectedExponential {
    pub mu: f64,
}

impl cold_core::engine::LoadTarget for InjectedExponential {
    fn run(&self, rate: f64, _warmup: usize, requests: usize, _seed: u64) -> cold_core::Result<cold_core::engine::LoadRun> {
        let r = self.mu - rate;
        let latencies_ms = (0..requests)
            .map(|i| {
                if r <= 0.0 {
                    return f64::INFINITY;
                }
                let q = (i as f64 + 0.5) / requests as f64;
                -(1.0 - q).ln() / r * 1e3
            })
            .collect();
        Ok(cold_core::engine::LoadRun {
            latencies_ms,
            span_s: requests as f64 / rate,
        })
    }
}
