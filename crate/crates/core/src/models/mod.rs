//! Scoring models and their checkpoint format.

mod checkpoint;
mod cold;
mod two_tower;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_any, load_model, read_checkpoint, read_model, save_checkpoint, save_model,
    write_checkpoint, write_model, AnyModel, Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cold::{apply_se, ColdConfig, ColdForward, ColdModel, SeBlock, SeWeights, DEFAULT_FCN_HIDDEN};
pub use two_tower::{
    two_tower_score, TwoTowerConfig, TwoTowerModel, VectorIndex, DEFAULT_TOWER_HIDDEN, DEFAULT_TOWER_OUTPUT,
};

use crate::error::{dim_err, Result};
use crate::features::{ColumnarBatch, EmbeddingTables, FeatureSchema, IdColumn, RawExample};
use crate::numerics::Matrix;

/// A click model that can be trained by the loops in [`crate::training`].
pub trait CtrModel: Clone + Send + Sync + 'static {
    fn schema(&self) -> &FeatureSchema;

    /// Snapshot id; 0 means never trained.
    fn version(&self) -> u64;

    fn set_version(&mut self, version: u64);

    /// pCTR for independent examples.
    fn predict(&self, examples: &[RawExample]) -> Result<Vec<f32>>;

    /// Lengths of the parameter tensors, in [`CtrModel::params_mut`] order.
    fn param_shapes(&self) -> Vec<usize>;

    fn params_mut(&mut self) -> Vec<&mut [f32]>;

    /// Mean binary cross-entropy over `examples` and its gradient for every
    /// parameter tensor.
    fn loss_and_grads(&self, examples: &[&RawExample]) -> Result<(f32, Vec<Vec<f32>>)>;
}

/// Routes the gradient of a concatenated embedding matrix back to the rows
/// of each table. Pooled rows receive `count` times the slice gradient.
pub(crate) fn scatter_embedding_grads(
    tables: &EmbeddingTables,
    batch: &ColumnarBatch,
    groups: &[usize],
    dconcat: &Matrix,
) -> Result<Vec<Vec<f32>>> {
    let mut out: Vec<Vec<f32>> = tables
        .tables()
        .iter()
        .map(|t| vec![0.0; t.weights.as_slice().len()])
        .collect();
    let mut offset = 0;
    for &g in groups {
        let pos = tables
            .position(g)
            .ok_or_else(|| dim_err(format!("no table for group #{g}")))?;
        let column = batch
            .column(g)
            .ok_or_else(|| dim_err(format!("no column for group #{g}")))?;
        let dim = column.dim;
        let grad = &mut out[pos];
        match &column.ids {
            IdColumn::Single(ids) => {
                for (r, &id) in ids.iter().enumerate() {
                    let src = &dconcat.row(r)[offset..offset + dim];
                    let dst = &mut grad[id as usize * dim..(id as usize + 1) * dim];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            IdColumn::Pooled { offsets, entries } => {
                for r in 0..batch.len() {
                    let src = &dconcat.row(r)[offset..offset + dim];
                    for &(id, count) in &entries[offsets[r]..offsets[r + 1]] {
                        let c = count as f32;
                        let dst = &mut grad[id as usize * dim..(id as usize + 1) * dim];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += c * s;
                        }
                    }
                }
            }
        }
        offset += dim;
    }
    Ok(out)
}
