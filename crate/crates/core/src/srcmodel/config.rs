use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subband::{DEFAULT_OVERLAP, DEFAULT_SAMPLE_RATE, SUPPORTED_CHANNELS};

pub const NOISE_FLOOR_DB: f64 = -90.0;
pub const NOISE_CEIL_DB: f64 = 0.0;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("noise level {0} dB outside [-90, 0]")]
    NoiseOutOfRange(f64),
    #[error("invalid model config: {0}")]
    Invalid(String),
}

/// Additive noise power in dB; the amplitude is `10^(dB/20)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NoiseLevelDb(f64);

impl NoiseLevelDb {
    /// A conditioning level; must lie in [-90, 0] dB.
    pub fn new(db: f64) -> Result<Self, ConfigError> {
        if !db.is_finite() || !(NOISE_FLOOR_DB..=NOISE_CEIL_DB).contains(&db) {
            return Err(ConfigError::NoiseOutOfRange(db));
        }
        Ok(Self(db))
    }

    pub fn db(self) -> f64 {
        self.0
    }

    pub fn amplitude(self) -> f64 {
        10f64.powf(self.0 / 20.0)
    }

    /// Position within the conditioning range, 0 at -90 dB and 1 at 0 dB.
    pub fn normalized(self) -> f64 {
        (self.0 - NOISE_FLOOR_DB) / (NOISE_CEIL_DB - NOISE_FLOOR_DB)
    }
}

/// Architecture of a source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Past frames seen by the convolution.
    pub context_frames: usize,
    /// Subband channels per frame.
    pub channels: usize,
    pub hidden_dim: usize,
    /// Affine layers in each of the prediction and conditioning MLPs.
    pub mlp_layers: usize,
    /// Length of the sin/cos noise-level embedding (even).
    pub rff_dim: usize,
    pub recurrent_state_dim: usize,
    /// Prototype length of the filterbank, in multiples of `channels`.
    pub filterbank_overlap: usize,
    pub sample_rate: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_frames: 10,
            channels: 64,
            hidden_dim: 1024,
            mlp_layers: 4,
            rff_dim: 256,
            recurrent_state_dim: 1024,
            filterbank_overlap: DEFAULT_OVERLAP,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration with `channels` bands and `hidden` units.
    pub fn small(channels: usize, hidden: usize) -> Self {
        Self {
            channels,
            hidden_dim: hidden,
            recurrent_state_dim: hidden,
            rff_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if self.context_frames == 0 {
            problems.push("context_frames must be >= 1".to_string());
        }
        if self.channels == 0 {
            problems.push("channels must be >= 1".to_string());
        }
        if self.hidden_dim == 0 || self.recurrent_state_dim == 0 {
            problems.push("hidden_dim and recurrent_state_dim must be >= 1".to_string());
        }
        if self.mlp_layers < 1 {
            problems.push("mlp_layers must be >= 1".to_string());
        }
        if self.rff_dim == 0 || self.rff_dim % 2 != 0 {
            problems.push("rff_dim must be a positive even number".to_string());
        }
        if self.sample_rate == 0 {
            problems.push("sample_rate must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems.join("; ")))
        }
    }

    /// Whether a filterbank exists for this channel count.
    pub fn has_filterbank(&self) -> bool {
        SUPPORTED_CHANNELS.contains(&self.channels)
    }

    /// Output parameters per frame (location and scale per channel).
    pub fn frame_params(&self) -> usize {
        2 * self.channels
    }

    pub fn frame_seconds(&self) -> f64 {
        self.channels as f64 / f64::from(self.sample_rate)
    }
}
