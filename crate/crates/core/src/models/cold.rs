//! Group-wise embedding network with squeeze-and-excitation group weights.
//!
//! Scoring pipeline for a batch: column-path feature computation, concatenation
//! of the selected groups, optional element-wise linear-log, SE reweighting
//! `v_i = s_i * e_i` with `s = sigmoid(W concat + b)`, then a ReLU network
//! with a two-logit softmax head.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{scatter_embedding_grads, CtrModel};
use crate::error::{dim_err, Error, Result};
use crate::features::{
    build_batch_column, build_batch_pairs, build_batch_row, concat_embeddings, BatchPath, AdContext, ColumnarBatch, EmbeddingTables,
    FeatureSchema, RawExample, UserContext,
};
use crate::numerics::{
    affine, gemm_a_bt, gemm_at_b_acc, linear_log, linear_log_grad, sigmoid, Dense, Matrix, Mlp, MlpGrads, MlpTape,
    PrecisionMode,
};

/// Hidden widths of the scoring network; the output layer (2 logits) is implied.
pub const DEFAULT_FCN_HIDDEN: [usize; 5] = [1024, 512, 256, 128, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColdConfig {
    pub hidden: Vec<usize>,
    pub use_linear_log: bool,
    pub precision: PrecisionMode,
    pub seed: u64,
}

impl Default for ColdConfig {
    fn default() -> Self {
        ColdConfig {
            hidden: DEFAULT_FCN_HIDDEN.to_vec(),
            use_linear_log: false,
            precision: PrecisionMode::Full32,
            seed: 0,
        }
    }
}

/// Maps the concatenated embedding (width `D`) to one weight per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeBlock {
    /// `D x M`.
    pub weight: Matrix,
    pub bias: Vec<f32>,
    /// Width of each group's slice of the concatenation.
    pub spans: Vec<usize>,
}

impl SeBlock {
    pub fn groups(&self) -> usize {
        self.spans.len()
    }

    /// `sigmoid(z W + b)`, one row per example.
    pub fn weights(&self, z: &Matrix, mode: PrecisionMode) -> Result<Matrix> {
        let mut s = affine(z, &self.weight, &self.bias, mode)?;
        s.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
        Ok(s)
    }
}

/// Group importance weights from the SE block.
#[derive(Clone, Debug, PartialEq)]
pub struct SeWeights {
    /// `B x M`.
    pub per_example: Matrix,
    /// Column means of `per_example`.
    pub mean: Vec<f32>,
}

/// Scales group `i`'s slice of every row by `s[row, i]`.
pub fn apply_se(embeddings: &Matrix, spans: &[usize], s: &Matrix) -> Result<Matrix> {
    let width: usize = spans.iter().sum();
    if embeddings.cols() != width || s.cols() != spans.len() || s.rows() != embeddings.rows() {
        return Err(dim_err(format!(
            "apply_se: embeddings {}x{}, weights {}x{}, {} groups of total width {width}",
            embeddings.rows(),
            embeddings.cols(),
            s.rows(),
            s.cols(),
            spans.len()
        )));
    }
    let mut out = embeddings.clone();
    for r in 0..out.rows() {
        let weights = s.row(r).to_vec();
        let row = out.row_mut(r);
        let mut offset = 0;
        for (&w, &span) in weights.iter().zip(spans) {
            row[offset..offset + span].iter_mut().for_each(|v| *v *= w);
            offset += span;
        }
    }
    Ok(out)
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ColdForward {
    pub concat: Matrix,
    /// Concatenation after the optional linear-log.
    pub transformed: Matrix,
    pub se: Matrix,
    pub reweighted: Matrix,
    pub logits: Matrix,
    pub pctr: Vec<f32>,
    tape: MlpTape,
}

impl ColdForward {
    /// True when no intermediate value is NaN or infinite.
    pub fn all_finite(&self) -> bool {
        self.transformed.all_finite()
            && self.se.all_finite()
            && self.reweighted.all_finite()
            && self.tape.layer_inputs().iter().all(Matrix::all_finite)
            && self.logits.all_finite()
            && self.pctr.iter().all(|p| p.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct ColdModel {
    schema: Arc<FeatureSchema>,
    groups: Vec<usize>,
    tables: EmbeddingTables,
    se: SeBlock,
    fcn: Mlp,
    use_linear_log: bool,
    precision: PrecisionMode,
    version: u64,
}

impl ColdModel {
    /// Fresh model over the `groups` subset of `schema`, version 0.
    pub fn new(schema: Arc<FeatureSchema>, groups: &[usize], config: &ColdConfig) -> Result<ColdModel> {
        let groups = schema.normalize_selection(groups)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tables = EmbeddingTables::random(&schema, &groups, &mut rng)?;
        let spans: Vec<usize> = groups.iter().map(|&g| schema.group(g).embed_dim).collect();
        let width: usize = spans.iter().sum();
        let se_layer = Dense::xavier(width, groups.len(), &mut rng);
        let mut dims = vec![width];
        dims.extend_from_slice(&config.hidden);
        dims.push(2);
        let fcn = Mlp::xavier(&dims, &mut rng);
        Ok(ColdModel {
            schema,
            groups,
            tables,
            se: SeBlock {
                weight: se_layer.weight,
                bias: se_layer.bias,
                spans,
            },
            fcn,
            use_linear_log: config.use_linear_log,
            precision: config.precision,
            version: 0,
        })
    }

    /// Assembles a model from parts, validating every shape.
    pub fn from_parts(
        schema: Arc<FeatureSchema>,
        tables: EmbeddingTables,
        se: SeBlock,
        fcn: Mlp,
        use_linear_log: bool,
        precision: PrecisionMode,
        version: u64,
    ) -> Result<ColdModel> {
        let groups = tables.groups();
        if groups.is_empty() {
            return Err(Error::EmptySelection);
        }
        let tables = EmbeddingTables::from_tables(&schema, tables.tables().to_vec())?;
        let spans: Vec<usize> = groups.iter().map(|&g| schema.group(g).embed_dim).collect();
        let width: usize = spans.iter().sum();
        if se.spans != spans || se.weight.rows() != width || se.weight.cols() != spans.len() || se.bias.len() != spans.len() {
            return Err(dim_err("SE block does not match the selected groups"));
        }
        if fcn.input_dim() != width || fcn.output_dim() != 2 {
            return Err(dim_err(format!(
                "network maps {} -> {}, expected {width} -> 2",
                fcn.input_dim(),
                fcn.output_dim()
            )));
        }
        Ok(ColdModel {
            schema,
            groups,
            tables,
            se,
            fcn,
            use_linear_log,
            precision,
            version,
        })
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        &self.schema
    }

    /// Selected groups, schema order.
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn tables(&self) -> &EmbeddingTables {
        &self.tables
    }

    pub fn se_block(&self) -> &SeBlock {
        &self.se
    }

    pub fn se_block_mut(&mut self) -> &mut SeBlock {
        &mut self.se
    }

    pub fn fcn(&self) -> &Mlp {
        &self.fcn
    }

    pub fn fcn_mut(&mut self) -> &mut Mlp {
        &mut self.fcn
    }

    pub fn tables_mut(&mut self) -> &mut EmbeddingTables {
        &mut self.tables
    }

    pub fn use_linear_log(&self) -> bool {
        self.use_linear_log
    }

    pub fn set_use_linear_log(&mut self, on: bool) {
        self.use_linear_log = on;
    }

    pub fn precision(&self) -> PrecisionMode {
        self.precision
    }

    pub fn set_precision(&mut self, mode: PrecisionMode) {
        self.precision = mode;
    }

    /// Width of the concatenated embedding (`D_in`).
    pub fn input_width(&self) -> usize {
        self.se.spans.iter().sum()
    }

    pub fn config(&self) -> ColdConfig {
        let dims = self.fcn.dims();
        ColdConfig {
            hidden: dims[1..dims.len() - 1].to_vec(),
            use_linear_log: self.use_linear_log,
            precision: self.precision,
            seed: 0,
        }
    }

    /// Column-path features for one user and its candidate ads.
    pub fn build_batch(&self, user: &UserContext, ads: &[AdContext]) -> Result<ColumnarBatch> {
        build_batch_column(&self.schema, &self.tables, user, ads)
    }

    pub fn build_pairs(&self, examples: &[&RawExample]) -> Result<ColumnarBatch> {
        let pairs: Vec<(&UserContext, &AdContext)> = examples.iter().map(|e| (&*e.user, &*e.ad)).collect();
        build_batch_pairs(&self.schema, &self.tables, &pairs)
    }

    fn transform(&self, concat: &Matrix) -> Matrix {
        if self.use_linear_log {
            concat.map(linear_log)
        } else {
            concat.clone()
        }
    }

    /// Full forward pass from the concatenated embeddings.
    pub fn forward(&self, concat: &Matrix, mode: PrecisionMode) -> Result<ColdForward> {
        if concat.cols() != self.input_width() {
            return Err(dim_err(format!(
                "model expects D_in = {}, got {}",
                self.input_width(),
                concat.cols()
            )));
        }
        let transformed = self.transform(concat);
        let se = self.se.weights(&transformed, mode)?;
        let reweighted = apply_se(&transformed, &self.se.spans, &se)?;
        let (logits, tape) = self.fcn.forward(&reweighted, mode)?;
        let pctr = (0..logits.rows())
            .map(|r| sigmoid(logits.get(r, 1) - logits.get(r, 0)))
            .collect();
        Ok(ColdForward {
            concat: concat.clone(),
            transformed,
            se,
            reweighted,
            logits,
            pctr,
            tape,
        })
    }

    /// pCTR from already concatenated embeddings, without keeping intermediates.
    pub fn predict_concat(&self, concat: &Matrix, mode: PrecisionMode) -> Result<Vec<f32>> {
        let transformed = self.transform(concat);
        let se = self.se.weights(&transformed, mode)?;
        let reweighted = apply_se(&transformed, &self.se.spans, &se)?;
        let logits = self.fcn.infer(&reweighted, mode)?;
        Ok((0..logits.rows())
            .map(|r| sigmoid(logits.get(r, 1) - logits.get(r, 0)))
            .collect())
    }

    /// pCTR of every candidate ad for `user`, in the model's precision mode.
    pub fn score(&self, user: &UserContext, ads: &[AdContext]) -> Result<Vec<f32>> {
        self.score_with(user, ads, self.precision)
    }

    pub fn score_with(&self, user: &UserContext, ads: &[AdContext], mode: PrecisionMode) -> Result<Vec<f32>> {
        self.score_path(user, ads, BatchPath::Column, mode)
    }

    /// Like [`ColdModel::score_with`] with an explicit feature path.
    pub fn score_path(
        &self,
        user: &UserContext,
        ads: &[AdContext],
        path: BatchPath,
        mode: PrecisionMode,
    ) -> Result<Vec<f32>> {
        if ads.is_empty() {
            return Err(Error::InvalidArgument("no candidate ads".into()));
        }
        let batch = match path {
            BatchPath::Column => self.build_batch(user, ads)?,
            BatchPath::Row => build_batch_row(&self.schema, &self.tables, user, ads)?,
        };
        let concat = concat_embeddings(&batch, &self.groups)?;
        self.predict_concat(&concat, mode)
    }

    /// Forward pass over independent examples in the given mode.
    pub fn forward_examples(&self, examples: &[&RawExample], mode: PrecisionMode) -> Result<ColdForward> {
        let batch = self.build_pairs(examples)?;
        let concat = concat_embeddings(&batch, &self.groups)?;
        self.forward(&concat, mode)
    }

    pub fn predict_examples_with(&self, examples: &[RawExample], mode: PrecisionMode) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(1024) {
            let refs: Vec<&RawExample> = chunk.iter().collect();
            let batch = self.build_pairs(&refs)?;
            let concat = concat_embeddings(&batch, &self.groups)?;
            out.extend(self.predict_concat(&concat, mode)?);
        }
        Ok(out)
    }

    /// SE weights per example and their batch mean. The batch must carry a
    /// column for every group of the model.
    pub fn se_weights(&self, batch: &ColumnarBatch) -> Result<SeWeights> {
        let concat = concat_embeddings(batch, &self.groups)
            .map_err(|e| dim_err(format!("batch does not cover the model's groups: {e}")))?;
        let transformed = self.transform(&concat);
        let per_example = self.se.weights(&transformed, PrecisionMode::Full32)?;
        let n = per_example.rows().max(1) as f64;
        let mean = (0..per_example.cols())
            .map(|c| ((0..per_example.rows()).map(|r| per_example.get(r, c) as f64).sum::<f64>() / n) as f32)
            .collect();
        Ok(SeWeights { per_example, mean })
    }

    pub fn se_weights_examples(&self, examples: &[RawExample]) -> Result<SeWeights> {
        let refs: Vec<&RawExample> = examples.iter().collect();
        let batch = self.build_pairs(&refs)?;
        self.se_weights(&batch)
    }

    fn backward(&self, batch: &ColumnarBatch, fwd: &ColdForward, labels: &[u8]) -> Result<(f32, Vec<Vec<f32>>)> {
        let b = fwd.concat.rows();
        let width = self.input_width();
        let m = self.groups.len();

        let mut loss = 0.0f64;
        let mut dlogits = Matrix::zeros(b, 2);
        for r in 0..b {
            let d = fwd.logits.get(r, 1) - fwd.logits.get(r, 0);
            let y = labels[r] as f32;
            loss += softplus(if labels[r] == 1 { -d } else { d }) as f64;
            let g = (fwd.pctr[r] - y) / b as f32;
            dlogits.set(r, 1, g);
            dlogits.set(r, 0, -g);
        }
        let (fcn_grads, dv) = self.fcn.backward(&fwd.tape, &dlogits)?;

        // v = z * s[group]
        let z = &fwd.transformed;
        let mut dz = Matrix::zeros(b, width);
        let mut dpre = Matrix::zeros(b, m);
        for r in 0..b {
            let (zr, dvr, sr) = (z.row(r), dv.row(r), fwd.se.row(r));
            let dzr = dz.row_mut(r);
            let mut offset = 0;
            let mut dpre_row = vec![0.0f32; m];
            for (i, &span) in self.se.spans.iter().enumerate() {
                let mut ds = 0.0f32;
                for j in offset..offset + span {
                    ds += dvr[j] * zr[j];
                    dzr[j] = dvr[j] * sr[i];
                }
                dpre_row[i] = ds * sr[i] * (1.0 - sr[i]);
                offset += span;
            }
            dpre.row_mut(r).copy_from_slice(&dpre_row);
        }
        let mut se_w = vec![0.0; width * m];
        gemm_at_b_acc(&mut se_w, z.as_slice(), dpre.as_slice(), b, width, m);
        let mut se_b = vec![0.0; m];
        for r in 0..b {
            for (acc, &v) in se_b.iter_mut().zip(dpre.row(r)) {
                *acc += v;
            }
        }
        let mut dz_se = Matrix::zeros(b, width);
        gemm_a_bt(dz_se.as_mut_slice(), dpre.as_slice(), self.se.weight.as_slice(), b, width, m);
        for (d, &e) in dz.as_mut_slice().iter_mut().zip(dz_se.as_slice()) {
            *d += e;
        }
        if self.use_linear_log {
            for (d, &x) in dz.as_mut_slice().iter_mut().zip(fwd.concat.as_slice()) {
                *d *= linear_log_grad(x);
            }
        }

        let mut grads = scatter_embedding_grads(&self.tables, batch, &self.groups, &dz)?;
        grads.push(se_w);
        grads.push(se_b);
        push_mlp(&mut grads, fcn_grads);
        Ok(((loss / b as f64) as f32, grads))
    }
}

fn push_mlp(out: &mut Vec<Vec<f32>>, grads: MlpGrads) {
    for layer in grads.layers {
        out.push(layer.weight);
        out.push(layer.bias);
    }
}

#[inline]
pub(crate) fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl CtrModel for ColdModel {
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
        self.predict_examples_with(examples, self.precision)
    }

    fn param_shapes(&self) -> Vec<usize> {
        let mut shapes: Vec<usize> = self.tables.tables().iter().map(|t| t.weights.as_slice().len()).collect();
        shapes.push(self.se.weight.as_slice().len());
        shapes.push(self.se.bias.len());
        shapes.extend(self.fcn.param_shapes());
        shapes
    }

    fn params_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = self
            .tables
            .tables_mut()
            .iter_mut()
            .map(|t| t.weights.as_mut_slice())
            .collect();
        out.push(self.se.weight.as_mut_slice());
        out.push(self.se.bias.as_mut_slice());
        out.extend(self.fcn.params_mut());
        out
    }

    fn loss_and_grads(&self, examples: &[&RawExample]) -> Result<(f32, Vec<Vec<f32>>)> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let batch = self.build_pairs(examples)?;
        let concat = concat_embeddings(&batch, &self.groups)?;
        let fwd = self.forward(&concat, PrecisionMode::Full32)?;
        let labels: Vec<u8> = examples.iter().map(|e| e.label).collect();
        self.backward(&batch, &fwd, &labels)
    }
}
