//! Single-file checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size | content                                  |
//! |-------------|------|------------------------------------------|
//! | 0           | 8    | magic `COLDCKPT`                         |
//! | 8           | 4    | format version (`u32`, currently 1)      |
//! | 12          | 4    | header length `H` (`u32`)                |
//! | 16          | H    | UTF-8 JSON header                        |
//! | 16 + H      | ...  | tensor payload, `f32` LE, manifest order |
//!
//! The header records the model kind, its snapshot version, the schema and
//! its SHA-256 digest, the architecture, and a manifest of `(name, rows,
//! cols)` tensors whose sizes must add up to the payload length exactly.
//! A checkpoint may also carry optimizer state (`adam/m/<i>`, `adam/v/<i>`
//! tensors plus step and epoch counters) so training can resume exactly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cold::{ColdModel, SeBlock};
use super::two_tower::TwoTowerModel;
use super::CtrModel;
use crate::error::{Error, Result};
use crate::features::{EmbeddingTable, EmbeddingTables, FeatureSchema};
use crate::numerics::{Adam, AdamConfig, Dense, Matrix, Mlp, PrecisionMode};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COLDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub enum AnyModel {
    Cold(ColdModel),
    TwoTower(TwoTowerModel),
}

impl AnyModel {
    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Cold(_) => "cold",
            AnyModel::TwoTower(_) => "two_tower",
        }
    }

    pub fn version(&self) -> u64 {
        match self {
            AnyModel::Cold(m) => m.version(),
            AnyModel::TwoTower(m) => m.version(),
        }
    }

    pub fn schema(&self) -> &Arc<FeatureSchema> {
        match self {
            AnyModel::Cold(m) => m.schema(),
            AnyModel::TwoTower(m) => m.schema(),
        }
    }

    pub fn predict(&self, examples: &[crate::features::RawExample]) -> Result<Vec<f32>> {
        match self {
            AnyModel::Cold(m) => m.predict(examples),
            AnyModel::TwoTower(m) => m.predict(examples),
        }
    }

    pub fn into_cold(self) -> Option<ColdModel> {
        match self {
            AnyModel::Cold(m) => Some(m),
            AnyModel::TwoTower(_) => None,
        }
    }

    pub fn into_two_tower(self) -> Option<TwoTowerModel> {
        match self {
            AnyModel::TwoTower(m) => Some(m),
            AnyModel::Cold(_) => None,
        }
    }
}

impl From<ColdModel> for AnyModel {
    fn from(m: ColdModel) -> Self {
        AnyModel::Cold(m)
    }
}

impl From<TwoTowerModel> for AnyModel {
    fn from(m: TwoTowerModel) -> Self {
        AnyModel::TwoTower(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Architecture {
    Cold {
        groups: Vec<String>,
        use_linear_log: bool,
        precision: PrecisionMode,
        fcn_layers: usize,
    },
    TwoTower {
        user_groups: Vec<String>,
        ad_groups: Vec<String>,
        tower_layers: usize,
    },
}

/// Optimizer state saved next to the weights.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub adam: Adam,
    /// Completed passes over the training set.
    pub epochs: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    steps: u64,
    epochs: u64,
    tensors: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    model_version: u64,
    schema_digest: String,
    schema: FeatureSchema,
    architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
    payload_bytes: u64,
}

fn push_tables(out: &mut Vec<(String, Matrix)>, prefix: &str, schema: &FeatureSchema, tables: &EmbeddingTables) {
    for t in tables.tables() {
        out.push((format!("{prefix}/{}", schema.group(t.group).id), t.weights.clone()));
    }
}

fn push_mlp(out: &mut Vec<(String, Matrix)>, prefix: &str, mlp: &Mlp) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        out.push((format!("{prefix}/{i}/weight"), layer.weight.clone()));
        let bias = Matrix::from_vec(1, layer.bias.len(), layer.bias.clone()).expect("bias row");
        out.push((format!("{prefix}/{i}/bias"), bias));
    }
}

fn tensors_of(model: &AnyModel) -> (Architecture, Vec<(String, Matrix)>) {
    let mut tensors = Vec::new();
    match model {
        AnyModel::Cold(m) => {
            let schema = m.schema();
            push_tables(&mut tensors, "table", schema, m.tables());
            tensors.push(("se/weight".into(), m.se_block().weight.clone()));
            let bias = &m.se_block().bias;
            tensors.push(("se/bias".into(), Matrix::from_vec(1, bias.len(), bias.clone()).expect("bias row")));
            push_mlp(&mut tensors, "fcn", m.fcn());
            let arch = Architecture::Cold {
                groups: m.groups().iter().map(|&g| schema.group(g).id.clone()).collect(),
                use_linear_log: m.use_linear_log(),
                precision: m.precision(),
                fcn_layers: m.fcn().layers.len(),
            };
            (arch, tensors)
        }
        AnyModel::TwoTower(m) => {
            let schema = m.schema();
            push_tables(&mut tensors, "user_table", schema, m.user_tables());
            push_tables(&mut tensors, "ad_table", schema, m.ad_tables());
            push_mlp(&mut tensors, "user_tower", m.user_tower());
            push_mlp(&mut tensors, "ad_tower", m.ad_tower());
            let arch = Architecture::TwoTower {
                user_groups: m.user_tables().groups().iter().map(|&g| schema.group(g).id.clone()).collect(),
                ad_groups: m.ad_tables().groups().iter().map(|&g| schema.group(g).id.clone()).collect(),
                tower_layers: m.user_tower().layers.len(),
            };
            (arch, tensors)
        }
    }
}

pub fn write_model<W: Write>(out: W, model: &AnyModel) -> Result<()> {
    write_parts(out, model, None)
}

pub fn write_checkpoint<W: Write>(out: W, checkpoint: &Checkpoint) -> Result<()> {
    write_parts(out, &checkpoint.model, checkpoint.optimizer.as_ref())
}

fn write_parts<W: Write>(mut out: W, model: &AnyModel, optimizer: Option<&OptimizerState>) -> Result<()> {
    let (architecture, mut tensors) = tensors_of(model);
    let optimizer_header = optimizer.map(|state| {
        let (first, second) = state.adam.moments();
        for (i, (m, v)) in first.iter().zip(second).enumerate() {
            tensors.push((format!("adam/m/{i}"), Matrix::from_vec(1, m.len(), m.clone()).expect("row")));
            tensors.push((format!("adam/v/{i}"), Matrix::from_vec(1, v.len(), v.clone()).expect("row")));
        }
        OptimizerHeader {
            config: state.adam.config,
            steps: state.adam.steps(),
            epochs: state.epochs,
            tensors: first.len(),
        }
    });
    let schema = model.schema();
    let payload_bytes: usize = tensors.iter().map(|(_, t)| t.as_slice().len() * 4).sum();
    let header = Header {
        kind: model.kind().to_string(),
        model_version: model.version(),
        schema_digest: schema.digest(),
        schema: (**schema).clone(),
        architecture,
        optimizer: optimizer_header,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
        payload_bytes: payload_bytes as u64,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header_json.len() + payload_bytes);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, t) in &tensors {
        for v in t.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &AnyModel) -> Result<()> {
    save_parts(path.as_ref(), model, None)
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    save_parts(path.as_ref(), &checkpoint.model, checkpoint.optimizer.as_ref())
}

fn save_parts(path: &Path, model: &AnyModel, optimizer: Option<&OptimizerState>) -> Result<()> {
    // write-then-rename so a crash never leaves a half-written checkpoint
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    write_parts(std::io::BufWriter::new(std::fs::File::create(&tmp)?), model, optimizer)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

/// Reads a checkpoint, rejecting it unless its schema digest equals
/// `expected`'s. Optimizer state, if present, is ignored.
pub fn read_model<R: Read>(input: R, expected: &FeatureSchema) -> Result<AnyModel> {
    Ok(read_checkpoint(input, expected)?.model)
}

pub fn read_checkpoint<R: Read>(mut input: R, expected: &FeatureSchema) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(format!("bad header: {e}")))?;

    let expected_digest = expected.digest();
    if header.schema_digest != expected_digest {
        return Err(Error::DigestMismatch {
            expected: expected_digest,
            found: header.schema_digest,
        });
    }
    if header.schema.digest() != header.schema_digest {
        return Err(corrupt("embedded schema does not match its digest"));
    }

    let payload = &bytes[header_end..];
    let declared: usize = header.tensors.iter().map(|t| t.rows * t.cols * 4).sum();
    if payload.len() as u64 != header.payload_bytes || declared as u64 != header.payload_bytes {
        return Err(corrupt(format!(
            "payload is {} bytes, header declares {} (manifest {})",
            payload.len(),
            header.payload_bytes,
            declared
        )));
    }

    let mut tensors: HashMap<String, Matrix> = HashMap::new();
    let mut offset = 0;
    for entry in &header.tensors {
        let n = entry.rows * entry.cols;
        let data: Vec<f32> = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n * 4;
        tensors.insert(entry.name.clone(), Matrix::from_vec(entry.rows, entry.cols, data)?);
    }

    let optimizer = match &header.optimizer {
        None => None,
        Some(opt) => {
            let mut first = Vec::with_capacity(opt.tensors);
            let mut second = Vec::with_capacity(opt.tensors);
            for i in 0..opt.tensors {
                let m = tensors.remove(&format!("adam/m/{i}"));
                let v = tensors.remove(&format!("adam/v/{i}"));
                match (m, v) {
                    (Some(m), Some(v)) => {
                        first.push(m.into_vec());
                        second.push(v.into_vec());
                    }
                    _ => return Err(corrupt(format!("missing optimizer tensor {i}"))),
                }
            }
            let adam = Adam::from_state(opt.config, opt.steps, first, second).map_err(|e| corrupt(e.to_string()))?;
            Some(OptimizerState {
                adam,
                epochs: opt.epochs,
            })
        }
    };

    let schema = Arc::new(header.schema);
    let mut take = |name: &str| tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor `{name}`")));

    let model = match header.architecture {
        Architecture::Cold {
            groups,
            use_linear_log,
            precision,
            fcn_layers,
        } => {
            let tables = read_tables(&schema, &groups, "table", &mut take)?;
            let weight = take("se/weight")?;
            let bias = take("se/bias")?.into_vec();
            let spans = tables.groups().iter().map(|&g| schema.group(g).embed_dim).collect();
            let fcn = read_mlp("fcn", fcn_layers, &mut take)?;
            let model = ColdModel::from_parts(
                schema,
                tables,
                SeBlock { weight, bias, spans },
                fcn,
                use_linear_log,
                precision,
                header.model_version,
            )
            .map_err(|e| corrupt(e.to_string()))?;
            AnyModel::Cold(model)
        }
        Architecture::TwoTower {
            user_groups,
            ad_groups,
            tower_layers,
        } => {
            let user_tables = read_tables(&schema, &user_groups, "user_table", &mut take)?;
            let ad_tables = read_tables(&schema, &ad_groups, "ad_table", &mut take)?;
            let user_tower = read_mlp("user_tower", tower_layers, &mut take)?;
            let ad_tower = read_mlp("ad_tower", tower_layers, &mut take)?;
            let model = TwoTowerModel::from_parts(
                schema,
                user_tables,
                ad_tables,
                user_tower,
                ad_tower,
                header.model_version,
            )
            .map_err(|e| corrupt(e.to_string()))?;
            AnyModel::TwoTower(model)
        }
    };
    if model.kind() != header.kind {
        return Err(corrupt(format!("header kind `{}` does not match architecture", header.kind)));
    }
    if let Some(state) = &optimizer {
        let shapes = match &model {
            AnyModel::Cold(m) => m.param_shapes(),
            AnyModel::TwoTower(m) => m.param_shapes(),
        };
        if state.adam.shapes() != shapes {
            return Err(corrupt("optimizer state does not match the model parameters"));
        }
    }
    Ok(Checkpoint { model, optimizer })
}

fn read_tables(
    schema: &FeatureSchema,
    ids: &[String],
    prefix: &str,
    take: &mut impl FnMut(&str) -> Result<Matrix>,
) -> Result<EmbeddingTables> {
    let mut tables = Vec::with_capacity(ids.len());
    for id in ids {
        let group = schema.index_of(id).ok_or_else(|| corrupt(format!("unknown group `{id}`")))?;
        tables.push(EmbeddingTable {
            group,
            weights: take(&format!("{prefix}/{id}"))?,
        });
    }
    EmbeddingTables::from_tables(schema, tables).map_err(|e| corrupt(e.to_string()))
}

fn read_mlp(prefix: &str, layers: usize, take: &mut impl FnMut(&str) -> Result<Matrix>) -> Result<Mlp> {
    if layers == 0 {
        return Err(corrupt(format!("`{prefix}` has no layers")));
    }
    let mut out = Vec::with_capacity(layers);
    for i in 0..layers {
        let weight = take(&format!("{prefix}/{i}/weight"))?;
        let bias = take(&format!("{prefix}/{i}/bias"))?.into_vec();
        if bias.len() != weight.cols() {
            return Err(corrupt(format!("`{prefix}/{i}` bias width mismatch")));
        }
        out.push(Dense { weight, bias });
    }
    Ok(Mlp { layers: out })
}

pub fn load_model(path: impl AsRef<Path>, expected: &FeatureSchema) -> Result<AnyModel> {
    read_model(std::io::BufReader::new(std::fs::File::open(path)?), expected)
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: &FeatureSchema) -> Result<Checkpoint> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?), expected)
}

/// Reads a checkpoint without checking it against a caller-side schema and
/// returns the embedded schema alongside.
pub fn load_checkpoint_any(path: impl AsRef<Path>) -> Result<(FeatureSchema, Checkpoint)> {
    let bytes = std::fs::read(path)?;
    let schema = peek_schema(&bytes)?;
    let checkpoint = read_checkpoint(&bytes[..], &schema)?;
    Ok((schema, checkpoint))
}

fn peek_schema(bytes: &[u8]) -> Result<FeatureSchema> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint"));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header runs past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..end]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    Ok(header.schema)
}
