//! Run configuration. Values are layered: built-in defaults, then the TOML
//! file, then `COLD__SECTION__KEY` environment variables, then `--set`
//! flags and the dedicated command-line options.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cold_core::data::GeneratorConfig;
use cold_core::engine::{BenchConfig, SplitPlan};
use cold_core::features::BatchPath;
use cold_core::models::{ColdConfig, TwoTowerConfig};
use cold_core::numerics::PrecisionMode;
use cold_core::selection::Constraint;
use cold_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const ENV_PREFIX: &str = "COLD__";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory reports and plots are written to.
    pub out_dir: PathBuf,
    pub plots: bool,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub engine: EngineSection,
    pub select: SelectSection,
    pub serve: ServeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset file; the ground truth lives next to it as `<path>.truth.json`.
    pub path: PathBuf,
    pub holdout_examples: usize,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Cold,
    TwoTower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub checkpoint: PathBuf,
    /// Feature groups to use; empty means all groups the model accepts.
    pub groups: Vec<String>,
    pub cold: ColdConfig,
    pub two_tower: TwoTowerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoints compared by `eval`; empty means `model.checkpoint`.
    pub checkpoints: Vec<PathBuf>,
    /// Checkpoint acting as the ranking oracle; unset means the ground truth.
    pub oracle_checkpoint: Option<PathBuf>,
    pub recall_users: usize,
    pub recall_k: usize,
    pub recall_m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    pub plan: SplitPlan,
    pub bench: BenchConfig,
    pub workers: usize,
    /// Rayon threads for chunk scoring; 0 keeps the rayon default.
    pub threads: usize,
    pub queries: usize,
    pub candidates_per_query: usize,
    pub winners: usize,
    pub paths: Vec<BatchPath>,
    pub precisions: Vec<PrecisionMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSection {
    /// Candidate group counts; empty means {2, half, all}.
    pub ks: Vec<usize>,
    pub constraint: Constraint,
    pub sample_examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub addr: String,
    pub threads: usize,
    /// Dataset file consumed by concurrent online training.
    pub stream: Option<PathBuf>,
    /// Stop after this many seconds; unset runs until interrupted.
    pub duration_s: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            plots: false,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            engine: EngineSection::default(),
            select: SelectSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: PathBuf::from("out/data.jsonl"),
            holdout_examples: 20_000,
            generator: GeneratorConfig::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Cold,
            checkpoint: PathBuf::from("out/model.ckpt"),
            groups: Vec::new(),
            cold: ColdConfig {
                hidden: vec![256, 128, 64],
                ..ColdConfig::default()
            },
            two_tower: TwoTowerConfig::default(),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            checkpoints: Vec::new(),
            oracle_checkpoint: None,
            recall_users: 100,
            recall_k: 50,
            recall_m: 10,
        }
    }
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            plan: SplitPlan::default(),
            bench: BenchConfig::default(),
            workers: 1,
            threads: 0,
            queries: 32,
            candidates_per_query: 1000,
            winners: 10,
            paths: vec![BatchPath::Row, BatchPath::Column],
            precisions: vec![PrecisionMode::Full32, PrecisionMode::Emulated16],
        }
    }
}

impl Default for SelectSection {
    fn default() -> Self {
        SelectSection {
            ks: Vec::new(),
            constraint: Constraint {
                min_qps: 1.0,
                max_p99_ms: 20.0,
            },
            sample_examples: 5000,
        }
    }
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            addr: "127.0.0.1:8080".into(),
            threads: 2,
            stream: None,
            duration_s: None,
        }
    }
}

/// Parses an override value as a TOML scalar or array, falling back to a
/// plain string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Sets `path` (dot separated) in `root`, creating tables on the way.
pub fn set_path(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("bad config key `{path}`");
    }
    let mut table = root;
    for key in &keys[..keys.len() - 1] {
        let entry = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("config key `{path}`: `{key}` is not a table"),
        };
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// Merges `over` into `base`, recursing into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `COLD__TRAIN__LEARNING_RATE=0.01` becomes `train.learning_rate = 0.01`.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.split("__").map(str::to_lowercase).collect::<Vec<_>>().join("."), v))
        })
        .collect();
    out.sort();
    out
}

/// Resolves the final configuration.
pub fn resolve(
    file: Option<&Path>,
    env: &[(String, String)],
    sets: &[(String, String)],
    flags: &[(String, toml::Value)],
) -> Result<RunConfig> {
    let mut root = toml::Table::try_from(RunConfig::default()).context("serializing defaults")?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut root, table);
    }
    for (key, raw) in env.iter().chain(sets) {
        set_path(&mut root, key, parse_value(raw))?;
    }
    for (key, value) in flags {
        set_path(&mut root, key, value.clone())?;
    }
    let config: RunConfig = root.try_into().context("invalid configuration")?;
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.generator.validate()?;
        self.train.validate()?;
        self.engine.bench.validate()?;
        self.select.constraint.validate()?;
        if self.engine.plan.chunk_size == 0 {
            bail!("engine.plan.chunk_size must be at least 1");
        }
        if self.engine.winners == 0 || self.engine.winners > self.engine.candidates_per_query {
            bail!("engine.winners must be in 1..=engine.candidates_per_query");
        }
        if self.eval.recall_m == 0 || self.eval.recall_m > self.eval.recall_k {
            bail!("eval.recall_m must be in 1..=eval.recall_k");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_file_env_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "seed = 1\n[train]\nepochs = 2\nbatch_size = 64\n").unwrap();
        let env = env_overrides([
            ("COLD__TRAIN__EPOCHS".to_string(), "3".to_string()),
            ("COLD__SEED".to_string(), "5".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ]);
        let sets = vec![("seed".to_string(), "9".to_string())];
        let c = resolve(Some(&file), &env, &sets, &[("train.batch_size".into(), toml::Value::Integer(32))]).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn values_parse_as_toml() {
        let sets = vec![
            ("model.cold.hidden".to_string(), "[8, 4]".to_string()),
            ("serve.addr".to_string(), "0.0.0.0:9000".to_string()),
            ("engine.paths".to_string(), "[\"row\"]".to_string()),
        ];
        let c = resolve(None, &[], &sets, &[]).unwrap();
        assert_eq!(c.model.cold.hidden, vec![8, 4]);
        assert_eq!(c.serve.addr, "0.0.0.0:9000");
        assert_eq!(c.engine.paths, vec![BatchPath::Row]);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(resolve(None, &[], &[("train.epoch".into(), "3".into())], &[]).is_err());
        assert!(resolve(None, &[], &[("train.batch_size".into(), "0".into())], &[]).is_err());
        assert!(resolve(None, &[], &[("seed.x".into(), "0".into())], &[]).is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let text = toml::to_string(&RunConfig::default()).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, RunConfig::default());
    }
}
