//! TOML run configuration and its canonical hashes.
//!
//! Relative paths are resolved against the directory holding the config file.
//! Two hashes stamp artifacts: the preprocessing hash covers the data files'
//! contents, the WordNet version and the class-map and vocabulary settings;
//! the run hash extends it with everything that affects training.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::MultiObjectiveConfig;
use crate::classmap::{ClassMapParams, FreqThreshold};
use crate::curriculum::{PacingKind, PacingSchedule};
use crate::error::{Error, Result};
use crate::eval::{Strata, TIE_EPSILON};
use crate::model::optim::OptimizerConfig;
use crate::model::ModelConfig;
use crate::train::{Objective, TrainSettings};

/// Environment variable consulted when the config names no WordNet path.
pub const WORDNET_ENV: &str = "HCP_WORDNET_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// WNDB directory or fixture file.
    #[serde(default)]
    pub wordnet: Option<PathBuf>,
    /// Defaults to the training file's stem.
    #[serde(default)]
    pub corpus_id: Option<String>,
    #[serde(default = "yes")]
    pub add_eos: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub unk_threshold: u64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { unk_threshold: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacingConfig {
    pub kind: PacingKind,
    pub a: f64,
    pub b: f64,
}

impl Default for PacingConfig {
    fn default() -> Self {
        PacingConfig {
            kind: PacingKind::Constant,
            a: 0.12,
            b: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Validate every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_batch_size: usize,
    /// Caps validation windows during training; final evaluation is uncapped.
    pub max_eval_windows: Option<usize>,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            eval_every: 100,
            eval_batch_size: 16,
            max_eval_windows: None,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub strata: Vec<u64>,
    pub tie_epsilon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strata: Strata::default().bounds,
            tie_epsilon: TIE_EPSILON,
        }
    }
}

fn default_classmap() -> ClassMapParams {
    ClassMapParams {
        depth: 6,
        freq_threshold: FreqThreshold::Finite(6000),
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub objective: Objective,
    pub data: DataConfig,
    #[serde(default = "default_classmap")]
    pub classmap: ClassMapParams,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pacing: PacingConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub multi_objective: MultiObjectiveConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Config keys holding filesystem paths.
pub const PATH_KEYS: [&str; 5] = ["output_dir", "data.train", "data.valid", "data.test", "data.wordnet"];

fn parse_override(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Error::Config(format!("bad override key `{key}`")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a value's canonical JSON form (object keys sorted).
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(sha256_hex(serde_json::to_string(&v)?.as_bytes()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    /// Loads an optional config file, then applies `key.path=value` overrides.
    /// Override values are TOML literals, or bare strings when they do not
    /// parse as one; relative override paths resolve against the working directory.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let (text, base) = match path {
            Some(p) => (
                fs::read_to_string(p).map_err(|e| Error::Load {
                    path: p.to_path_buf(),
                    source: e,
                })?,
                p.parent().unwrap_or(Path::new(".")).to_path_buf(),
            ),
            None => (String::new(), std::env::current_dir()?),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let mut value = parse_override(raw);
            if PATH_KEYS.contains(&key.as_str()) {
                let p = PathBuf::from(raw);
                value = toml::Value::String(std::path::absolute(&p)?.to_string_lossy().into_owned());
            }
            set_dotted(&mut table, key, value)?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.valid);
        if let Some(t) = &mut self.data.test {
            fix(t);
        }
        if let Some(w) = &mut self.data.wordnet {
            fix(w);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        self.classmap.validate()?;
        let mut model = self.model;
        model.vocab_size = model.vocab_size.max(1);
        model.validate()?;
        self.schedule()?;
        self.optimizer.validate()?;
        Strata::new(self.eval.strata.clone())?;
        if !(self.eval.tie_epsilon >= 0.0) {
            return Err(Error::Config("tie_epsilon must be >= 0".into()));
        }
        if self.train.batch_size == 0 || self.train.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.objective == Objective::MultiObjective {
            self.multi_objective.resolved_tap(self.model.n_layers)?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<PacingSchedule> {
        PacingSchedule::new(self.pacing.kind, self.pacing.a, self.pacing.b, self.train.steps, self.seed)
    }

    pub fn strata(&self) -> Result<Strata> {
        Strata::new(self.eval.strata.clone())
    }

    pub fn corpus_id(&self) -> String {
        self.data.corpus_id.clone().unwrap_or_else(|| {
            self.data
                .train
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into())
        })
    }

    /// The WordNet location: the config value, else the environment variable.
    pub fn wordnet_path(&self) -> Result<PathBuf> {
        if let Some(p) = &self.data.wordnet {
            return Ok(p.clone());
        }
        std::env::var_os(WORDNET_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no WordNet path: set data.wordnet or {WORDNET_ENV}")))
    }

    pub fn train_settings(&self) -> Result<TrainSettings> {
        Ok(TrainSettings {
            objective: self.objective,
            schedule: self.schedule()?,
            batch_size: self.train.batch_size,
            eval_every: self.train.eval_every,
            eval_batch_size: self.train.eval_batch_size,
            max_eval_windows: self.train.max_eval_windows,
            optimizer: self.optimizer,
            multi_objective: self.multi_objective,
            seed: self.seed,
        })
    }

    /// Hash of everything preprocessing depends on.
    pub fn preprocess_hash(&self, wordnet_version: &str) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            train: String,
            valid: String,
            test: Option<String>,
            corpus_id: String,
            add_eos: bool,
            wordnet: &'a str,
            classmap: &'a ClassMapParams,
            vocab: &'a VocabConfig,
        }
        let key = Key {
            train: file_digest(&self.data.train)?,
            valid: file_digest(&self.data.valid)?,
            test: self.data.test.as_deref().map(file_digest).transpose()?,
            corpus_id: self.corpus_id(),
            add_eos: self.data.add_eos,
            wordnet: wordnet_version,
            classmap: &self.classmap,
            vocab: &self.vocab,
        };
        canonical_hash(&key)
    }

    /// Hash stamping training artifacts: preprocessing plus every training setting.
    pub fn run_hash(&self, preprocess_hash: &str) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            preprocess: &'a str,
            seed: u64,
            objective: Objective,
            model: &'a ModelConfig,
            pacing: &'a PacingConfig,
            train: &'a TrainConfig,
            optimizer: &'a OptimizerConfig,
            multi_objective: Option<&'a MultiObjectiveConfig>,
        }
        let mut model = self.model;
        model.vocab_size = 0;
        canonical_hash(&Key {
            preprocess: preprocess_hash,
            seed: self.seed,
            objective: self.objective,
            model: &model,
            pacing: &self.pacing,
            train: &self.train,
            optimizer: &self.optimizer,
            multi_objective: (self.objective == Objective::MultiObjective).then_some(&self.multi_objective),
        })
    }
}
