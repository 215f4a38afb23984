//! TOML job files.

use std::path::{Path, PathBuf};

use langsep::dataset::{DataSource, DatasetSpec};
use langsep::evalkit::IrmConfig;
use langsep::sampler::ScheduleConfig;
use langsep::srcmodel::ModelConfig;
use langsep::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Rejected configuration; lists every problem found.
#[derive(Debug)]
pub struct ConfigError(pub Vec<String>);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0.join("; "))
    }
}

impl std::error::Error for ConfigError {}

/// Parses `text`, collecting every key the target type does not know.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = toml::Deserializer::new(text);
    let mut unknown = Vec::new();
    let value: Result<T, _> = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()));
    let mut problems: Vec<String> = unknown.into_iter().map(|k| format!("unknown key `{k}`")).collect();
    match value {
        Ok(v) if problems.is_empty() => Ok(v),
        Ok(_) => Err(ConfigError(problems)),
        Err(e) => {
            problems.push(e.to_string().trim().replace('\n', " "));
            Err(ConfigError(problems))
        }
    }
}

/// Reads a job file, or the defaults when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?;
            Ok(parse(&text)?)
        }
    }
}

/// Resolves `p` against the directory of the config file.
pub fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

/// `train` job: data source plus model and optimiser settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainJob {
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            data: DatasetSpec { source: DataSource::Directory("data".into()), splits: Default::default(), seed: 0 },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl TrainJob {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.model.validate() {
            problems.push(format!("[model] {e}"));
        }
        if !self.model.has_filterbank() {
            problems.push(format!("[model] channels = {} has no filterbank (8, 16, 32 or 64)", self.model.channels));
        }
        if !(8..=16).contains(&self.model.filterbank_overlap) {
            problems.push(format!("[model] filterbank_overlap = {} outside [8, 16]", self.model.filterbank_overlap));
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("[train] {e}"));
        }
        if let Err(e) = self.data.splits.validate() {
            problems.push(format!("[data] {e}"));
        }
        if let DataSource::Synthetic(s) = &self.data.source {
            if let Err(e) = s.validate() {
                problems.push(format!("[data.source.synthetic] {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(problems))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateJob {
    pub checkpoint: Option<PathBuf>,
    pub seconds: f64,
    pub sigma_db: f64,
    pub seed: u64,
}

impl Default for GenerateJob {
    fn default() -> Self {
        Self { checkpoint: None, seconds: 4.0, sigma_db: -90.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparateJob {
    /// A single mix; combined with `mixes` if both are given.
    pub mix: Option<PathBuf>,
    pub mixes: Vec<PathBuf>,
    /// One checkpoint per source.
    pub models: Vec<PathBuf>,
    /// Output names per source; defaults to the checkpoint file stems.
    pub labels: Vec<String>,
    /// Mixing weights; defaults to all ones.
    pub weights: Option<Vec<f64>>,
    /// Write per-iteration metrics this often (0 = off).
    pub metrics_every: usize,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateJob {
    /// `<outputs>/<item>/<source>.wav`
    pub outputs: Option<PathBuf>,
    /// `<refs>/<item>/<source>.wav`
    pub refs: Option<PathBuf>,
    /// `<mixes>/<item>.wav`
    pub mixes: Option<PathBuf>,
    pub sources: Vec<String>,
    pub weights: Option<Vec<f64>>,
    /// Label of the evaluated method.
    pub method: String,
    /// Also score the ideal-ratio-mask oracle.
    pub irm: bool,
    /// Also score the "each source gets y a_s / ‖a‖²" baseline.
    pub do_nothing: bool,
    pub irm_config: IrmConfig,
}

impl Default for EvaluateJob {
    fn default() -> Self {
        Self {
            outputs: None,
            refs: None,
            mixes: None,
            sources: Vec::new(),
            weights: None,
            method: "dpss".into(),
            irm: true,
            do_nothing: true,
            irm_config: IrmConfig::default(),
        }
    }
}
