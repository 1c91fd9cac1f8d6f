use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Initial embeddings are drawn from `U(-EMBED_INIT, EMBED_INIT)`.
pub const EMBED_INIT: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    /// Schema index of the owning group.
    pub group: usize,
    /// `cardinality x embed_dim`.
    pub weights: Matrix,
}

impl EmbeddingTable {
    pub fn cardinality(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn row(&self, id: u32) -> Option<&[f32]> {
        if (id as usize) < self.weights.rows() {
            Some(self.weights.row(id as usize))
        } else {
            None
        }
    }
}

/// Embedding tables for a subset of schema groups, kept in schema order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    tables: Vec<EmbeddingTable>,
}

impl EmbeddingTables {
    pub fn random<R: Rng + ?Sized>(schema: &FeatureSchema, groups: &[usize], rng: &mut R) -> Result<EmbeddingTables> {
        let groups = schema.normalize_selection(groups)?;
        let tables = groups
            .into_iter()
            .map(|g| {
                let def = schema.group(g);
                let weights = Matrix::from_fn(def.cardinality as usize, def.embed_dim, |_, _| {
                    rng.random_range(-EMBED_INIT..=EMBED_INIT)
                });
                EmbeddingTable { group: g, weights }
            })
            .collect();
        Ok(EmbeddingTables { tables })
    }

    pub fn zeros(schema: &FeatureSchema, groups: &[usize]) -> Result<EmbeddingTables> {
        let groups = schema.normalize_selection(groups)?;
        Ok(EmbeddingTables {
            tables: groups
                .into_iter()
                .map(|g| EmbeddingTable {
                    group: g,
                    weights: Matrix::zeros(schema.group(g).cardinality as usize, schema.group(g).embed_dim),
                })
                .collect(),
        })
    }

    /// Builds from explicit tables; they are sorted into schema order and
    /// checked against the schema.
    pub fn from_tables(schema: &FeatureSchema, mut tables: Vec<EmbeddingTable>) -> Result<EmbeddingTables> {
        tables.sort_by_key(|t| t.group);
        for w in tables.windows(2) {
            if w[0].group == w[1].group {
                return Err(Error::InvalidArgument(format!("two tables for group #{}", w[0].group)));
            }
        }
        for t in &tables {
            if t.group >= schema.len() {
                return Err(Error::UnknownGroup(format!("#{}", t.group)));
            }
            let def = schema.group(t.group);
            if t.cardinality() != def.cardinality as usize || t.dim() != def.embed_dim {
                return Err(Error::Dimension(format!(
                    "table for `{}` is {}x{}, schema wants {}x{}",
                    def.id,
                    t.cardinality(),
                    t.dim(),
                    def.cardinality,
                    def.embed_dim
                )));
            }
        }
        Ok(EmbeddingTables { tables })
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [EmbeddingTable] {
        &mut self.tables
    }

    pub fn groups(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.group).collect()
    }

    pub fn get(&self, group: usize) -> Option<&EmbeddingTable> {
        self.tables
            .binary_search_by_key(&group, |t| t.group)
            .ok()
            .map(|i| &self.tables[i])
    }

    pub fn position(&self, group: usize) -> Option<usize> {
        self.tables.binary_search_by_key(&group, |t| t.group).ok()
    }

    pub fn param_count(&self) -> usize {
        self.tables.iter().map(|t| t.weights.as_slice().len()).sum()
    }
}
