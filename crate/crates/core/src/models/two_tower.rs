//! Vector-product baseline: independent user and ad towers combined only by
//! an inner product, so both sides can be computed ahead of time.

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cold::softplus;
use super::{scatter_embedding_grads, CtrModel};
use crate::error::{dim_err, Error, Result};
use crate::features::{
    build_batch_pairs, concat_embeddings, AdContext, EmbeddingTables, FeatureSchema, RawExample, Side,
    UserContext,
};
use crate::numerics::{dot, sigmoid, Matrix, Mlp, PrecisionMode};

pub const DEFAULT_TOWER_HIDDEN: [usize; 2] = [200, 200];
pub const DEFAULT_TOWER_OUTPUT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoTowerConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl Default for TwoTowerConfig {
    fn default() -> Self {
        TwoTowerConfig {
            hidden: DEFAULT_TOWER_HIDDEN.to_vec(),
            output_dim: DEFAULT_TOWER_OUTPUT,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoTowerModel {
    schema: Arc<FeatureSchema>,
    user_groups: Vec<usize>,
    ad_groups: Vec<usize>,
    user_tables: EmbeddingTables,
    ad_tables: EmbeddingTables,
    user_tower: Mlp,
    ad_tower: Mlp,
    version: u64,
}

/// Precomputed tower outputs keyed by entity id.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorIndex {
    positions: HashMap<u32, usize>,
    vectors: Matrix,
}

impl VectorIndex {
    pub fn get(&self, id: u32) -> Option<&[f32]> {
        self.positions.get(&id).map(|&i| self.vectors.row(i))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// `sigmoid(u . a)`.
pub fn two_tower_score(user_vector: &[f32], ad_vector: &[f32]) -> Result<f32> {
    if user_vector.len() != ad_vector.len() {
        return Err(dim_err(format!(
            "user vector has {} dims, ad vector {}",
            user_vector.len(),
            ad_vector.len()
        )));
    }
    Ok(sigmoid(dot(user_vector, ad_vector)))
}

fn empty_ad() -> AdContext {
    AdContext {
        ad_id: 0,
        values: Vec::new(),
    }
}

fn empty_user() -> UserContext {
    UserContext {
        user_id: 0,
        values: Vec::new(),
    }
}

impl TwoTowerModel {
    /// Towers over the given groups; every group must be user- or ad-side.
    pub fn new(schema: Arc<FeatureSchema>, groups: &[usize], config: &TwoTowerConfig) -> Result<TwoTowerModel> {
        let groups = schema.normalize_selection(groups)?;
        if let Some(&g) = groups.iter().find(|&&g| schema.group(g).side == Side::Cross) {
            return Err(Error::CrossFeatureRejected(schema.group(g).id.clone()));
        }
        let user_groups: Vec<usize> = groups.iter().copied().filter(|&g| schema.group(g).side == Side::User).collect();
        let ad_groups: Vec<usize> = groups.iter().copied().filter(|&g| schema.group(g).side == Side::Ad).collect();
        if user_groups.is_empty() || ad_groups.is_empty() {
            return Err(Error::InvalidArgument("both towers need at least one feature group".into()));
        }
        if config.output_dim == 0 {
            return Err(Error::Config("tower output_dim must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let user_tables = EmbeddingTables::random(&schema, &user_groups, &mut rng)?;
        let ad_tables = EmbeddingTables::random(&schema, &ad_groups, &mut rng)?;
        let tower = |width: usize, rng: &mut ChaCha8Rng| {
            let mut dims = vec![width];
            dims.extend_from_slice(&config.hidden);
            dims.push(config.output_dim);
            Mlp::xavier(&dims, rng)
        };
        let user_tower = tower(schema.width(&user_groups), &mut rng);
        let ad_tower = tower(schema.width(&ad_groups), &mut rng);
        Ok(TwoTowerModel {
            schema,
            user_groups,
            ad_groups,
            user_tables,
            ad_tables,
            user_tower,
            ad_tower,
            version: 0,
        })
    }

    /// Towers over every non-cross group of the schema.
    pub fn with_all_groups(schema: Arc<FeatureSchema>, config: &TwoTowerConfig) -> Result<TwoTowerModel> {
        let mut groups = schema.user_groups().to_vec();
        groups.extend_from_slice(schema.ad_groups());
        TwoTowerModel::new(schema, &groups, config)
    }

    pub fn from_parts(
        schema: Arc<FeatureSchema>,
        user_tables: EmbeddingTables,
        ad_tables: EmbeddingTables,
        user_tower: Mlp,
        ad_tower: Mlp,
        version: u64,
    ) -> Result<TwoTowerModel> {
        let user_groups = user_tables.groups();
        let ad_groups = ad_tables.groups();
        for &g in user_groups.iter().chain(&ad_groups) {
            if g >= schema.len() {
                return Err(Error::UnknownGroup(format!("#{g}")));
            }
            if schema.group(g).side == Side::Cross {
                return Err(Error::CrossFeatureRejected(schema.group(g).id.clone()));
            }
        }
        if user_groups.iter().any(|&g| schema.group(g).side != Side::User)
            || ad_groups.iter().any(|&g| schema.group(g).side != Side::Ad)
        {
            return Err(Error::InvalidArgument("tower tables on the wrong side".into()));
        }
        let user_tables = EmbeddingTables::from_tables(&schema, user_tables.tables().to_vec())?;
        let ad_tables = EmbeddingTables::from_tables(&schema, ad_tables.tables().to_vec())?;
        if user_tower.input_dim() != schema.width(&user_groups)
            || ad_tower.input_dim() != schema.width(&ad_groups)
            || user_tower.output_dim() != ad_tower.output_dim()
        {
            return Err(dim_err("tower shapes do not match the feature groups"));
        }
        Ok(TwoTowerModel {
            schema,
            user_groups,
            ad_groups,
            user_tables,
            ad_tables,
            user_tower,
            ad_tower,
            version,
        })
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    pub fn user_tables(&self) -> &EmbeddingTables {
        &self.user_tables
    }

    pub fn ad_tables(&self) -> &EmbeddingTables {
        &self.ad_tables
    }

    pub fn user_tower(&self) -> &Mlp {
        &self.user_tower
    }

    pub fn ad_tower(&self) -> &Mlp {
        &self.ad_tower
    }

    pub fn user_tower_mut(&mut self) -> &mut Mlp {
        &mut self.user_tower
    }

    pub fn ad_tower_mut(&mut self) -> &mut Mlp {
        &mut self.ad_tower
    }

    pub fn output_dim(&self) -> usize {
        self.user_tower.output_dim()
    }

    pub fn config(&self) -> TwoTowerConfig {
        let dims = self.user_tower.dims();
        TwoTowerConfig {
            hidden: dims[1..dims.len() - 1].to_vec(),
            output_dim: self.output_dim(),
            seed: 0,
        }
    }

    fn user_inputs(&self, users: &[&UserContext]) -> Result<Matrix> {
        let dummy = empty_ad();
        let pairs: Vec<(&UserContext, &AdContext)> = users.iter().map(|u| (*u, &dummy)).collect();
        let batch = build_batch_pairs(&self.schema, &self.user_tables, &pairs)?;
        concat_embeddings(&batch, &self.user_groups)
    }

    fn ad_inputs(&self, ads: &[&AdContext]) -> Result<Matrix> {
        let dummy = empty_user();
        let pairs: Vec<(&UserContext, &AdContext)> = ads.iter().map(|a| (&dummy, *a)).collect();
        let batch = build_batch_pairs(&self.schema, &self.ad_tables, &pairs)?;
        concat_embeddings(&batch, &self.ad_groups)
    }

    pub fn user_vectors(&self, users: &[&UserContext]) -> Result<Matrix> {
        self.user_tower.infer(&self.user_inputs(users)?, PrecisionMode::Full32)
    }

    pub fn ad_vectors(&self, ads: &[&AdContext]) -> Result<Matrix> {
        self.ad_tower.infer(&self.ad_inputs(ads)?, PrecisionMode::Full32)
    }

    /// Offline user-side index. Duplicate ids keep their first vector.
    pub fn user_index(&self, users: &[&UserContext]) -> Result<VectorIndex> {
        let vectors = self.user_vectors(users)?;
        Ok(index(users.iter().map(|u| u.user_id), vectors))
    }

    pub fn ad_index(&self, ads: &[&AdContext]) -> Result<VectorIndex> {
        let vectors = self.ad_vectors(ads)?;
        Ok(index(ads.iter().map(|a| a.ad_id), vectors))
    }

    /// Online scoring: both towers run per request.
    pub fn score(&self, user: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>> {
        let u = self.user_vectors(&[user])?;
        let refs: Vec<&AdContext> = ads.iter().collect();
        let a = self.ad_vectors(&refs)?;
        (0..a.rows()).map(|r| two_tower_score(u.row(0), a.row(r))).collect()
    }
}

fn index(ids: impl Iterator<Item = u32>, vectors: Matrix) -> VectorIndex {
    let mut positions = HashMap::new();
    for (i, id) in ids.enumerate() {
        positions.entry(id).or_insert(i);
    }
    VectorIndex { positions, vectors }
}

impl CtrModel for TwoTowerModel {
    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn set_version(&mut self, version: u64) {
        self.version = version;
    }

    fn predict(&self, examples: &[RawExample]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(1024) {
            let users: Vec<&UserContext> = chunk.iter().map(|e| &*e.user).collect();
            let ads: Vec<&AdContext> = chunk.iter().map(|e| &*e.ad).collect();
            let u = self.user_vectors(&users)?;
            let a = self.ad_vectors(&ads)?;
            for r in 0..chunk.len() {
                out.push(sigmoid(dot(u.row(r), a.row(r))));
            }
        }
        Ok(out)
    }

    fn param_shapes(&self) -> Vec<usize> {
        let mut shapes: Vec<usize> = self
            .user_tables
            .tables()
            .iter()
            .chain(self.ad_tables.tables())
            .map(|t| t.weights.as_slice().len())
            .collect();
        shapes.extend(self.user_tower.param_shapes());
        shapes.extend(self.ad_tower.param_shapes());
        shapes
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = self
            .user_tables
            .tables_mut()
            .iter_mut()
            .chain(self.ad_tables.tables_mut().iter_mut())
            .map(|t| t.weights.as_mut_slice())
            .collect();
        out.extend(self.user_tower.params_mut());
        out.extend(self.ad_tower.params_mut());
        out
    }

    fn loss_and_grads(&self, examples: &[&RawExample]) -> Result<(f32, Vec<Vec<f32>>)> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let b = examples.len();
        let dummy_ad = empty_ad();
        let dummy_user = empty_user();
        let user_pairs: Vec<(&UserContext, &AdContext)> = examples.iter().map(|e| (&*e.user, &dummy_ad)).collect();
        let ad_pairs: Vec<(&UserContext, &AdContext)> = examples.iter().map(|e| (&dummy_user, &*e.ad)).collect();
        let user_batch = build_batch_pairs(&self.schema, &self.user_tables, &user_pairs)?;
        let ad_batch = build_batch_pairs(&self.schema, &self.ad_tables, &ad_pairs)?;
        let xu = concat_embeddings(&user_batch, &self.user_groups)?;
        let xa = concat_embeddings(&ad_batch, &self.ad_groups)?;
        let (u, user_tape) = self.user_tower.forward(&xu, PrecisionMode::Full32)?;
        let (a, ad_tape) = self.ad_tower.forward(&xa, PrecisionMode::Full32)?;

        let dim = u.cols();
        let mut du = Matrix::zeros(b, dim);
        let mut da = Matrix::zeros(b, dim);
        let mut loss = 0.0f64;
        for (r, ex) in examples.iter().enumerate() {
            let logit = dot(u.row(r), a.row(r));
            let p = sigmoid(logit);
            loss += softplus(if ex.label == 1 { -logit } else { logit }) as f64;
            let g = (p - ex.label as f32) / b as f32;
            for k in 0..dim {
                du.set(r, k, g * a.get(r, k));
                da.set(r, k, g * u.get(r, k));
            }
        }
        let (user_grads, dxu) = self.user_tower.backward(&user_tape, &du)?;
        let (ad_grads, dxa) = self.ad_tower.backward(&ad_tape, &da)?;

        let mut grads = scatter_embedding_grads(&self.user_tables, &user_batch, &self.user_groups, &dxu)?;
        grads.extend(scatter_embedding_grads(&self.ad_tables, &ad_batch, &self.ad_groups, &dxa)?);
        for layer in user_grads.layers.into_iter().chain(ad_grads.layers) {
            grads.push(layer.weight);
            grads.push(layer.bias);
        }
        Ok(((loss / b as f64) as f32, grads))
    }
}
