//! Feature schema, embedding tables and batch feature computation.

mod batch;
mod dataset;
mod schema;
mod tables;
mod values;

pub use batch::{
    build_batch_column, build_batch_pairs, build_batch_row, concat_embeddings, cross_hash, cross_value,
    sum_pool, BatchPath, Column, ColumnarBatch, IdColumn,
};
pub use dataset::{
    load_dataset, read_dataset, save_dataset, write_dataset, DatasetHeader, DatasetReader, ExampleRecord,
    DATASET_FORMAT, DATASET_VERSION,
};
pub use schema::{CrossSource, FeatureGroup, FeatureSchema, Multiplicity, Side, Slot, DEFAULT_EMBED_DIM};
pub use tables::{EmbeddingTable, EmbeddingTables, EMBED_INIT};
pub use values::{AdContext, FeatureMap, FeatureValue, RawExample, UserContext};
