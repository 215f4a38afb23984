//! Item manifests, train/validation/test splits and dataset loading.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioError, Waveform};
use crate::rng::substream;
use crate::synth::{generate_item, SynthSpec};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset spec: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("dataset has no {0} items")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

/// Fractions of items assigned to train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), String> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(format!("split ratios {r:?} must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

/// Deterministic split assignment: a seeded shuffle, then contiguous blocks
/// of `round(n * ratio)` train and val items; the remainder is test.
pub fn assign_splits(count: usize, ratios: &SplitRatios, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut substream(seed, "split"));
    let n_train = ((count as f64) * ratios.train).round() as usize;
    let n_val = (((count as f64) * ratios.val).round() as usize).min(count - n_train.min(count));
    let mut out = vec![Split::Test; count];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_dbfs: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fundamentals: Vec<f64>,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest { line: i + 1, message: e.to_string() })?;
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// WAV files in a directory; `manifest.jsonl` fixes the splits if present.
    Directory(PathBuf),
    /// Items produced on the fly by a synthetic generator.
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default)]
    pub splits: SplitRatios,
    /// Split seed for directories without a manifest.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub wave: Waveform,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Item>,
    pub val: Vec<Item>,
    pub test: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Item] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn push(&mut self, s: Split, item: Item) {
        match s {
            Split::Train => self.train.push(item),
            Split::Val => self.val.push(item),
            Split::Test => self.test.push(item),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset, DatasetError> {
        self.splits.validate().map_err(DatasetError::Invalid)?;
        let mut data = Dataset::default();
        match &self.source {
            DataSource::Synthetic(spec) => {
                for (i, split) in assign_splits(spec.count, &spec.splits, spec.seed).into_iter().enumerate() {
                    let wave = generate_item(spec, i)?.wave;
                    data.push(split, Item { id: spec.item_id(i), wave });
                }
            }
            DataSource::Directory(dir) => {
                let manifest = dir.join(MANIFEST_FILE);
                let entries: Vec<(String, PathBuf, Split)> = if manifest.exists() {
                    read_manifest(&manifest)?.into_iter().map(|e| (e.id, dir.join(e.file), e.split)).collect()
                } else {
                    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                        .filter_map(|e| e.ok().map(|e| e.path()))
                        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                        .collect();
                    files.sort();
                    let splits = assign_splits(files.len(), &self.splits, self.seed);
                    files
                        .into_iter()
                        .zip(splits)
                        .map(|(p, s)| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p, s))
                        .collect()
                };
                for (id, path, split) in entries {
                    data.push(split, Item { id, wave: Waveform::read_wav(&path)? });
                }
            }
        }
        Ok(data)
    }
}

/// Repeats short items end to end and cuts long ones at a random offset so
/// every item has exactly `target` samples.
pub fn adjust_length(w: &Waveform, target: usize, rng: &mut impl Rng) -> Waveform {
    let n = w.len();
    let samples = if n >= target {
        let offset = if n > target { rng.random_range(0..=n - target) } else { 0 };
        w.samples[offset..offset + target].to_vec()
    } else {
        w.samples.iter().copied().cycle().take(target).collect()
    };
    Waveform { samples, sample_rate: w.sample_rate }
}
