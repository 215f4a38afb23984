//! Synthetic source classes used as desk-scale training data.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::{to_pcm16, SampleFormat, Waveform};
use crate::dataset::{assign_splits, write_manifest, DatasetError, ManifestEntry, SplitRatios};
use crate::rng::indexed_substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceClass {
    /// Decaying harmonic notes (1/k partials) on a fixed set of fundamentals.
    HarmonicTones,
    /// White noise through a random band-pass.
    FilteredNoise,
    /// Resonant second-order autoregressive noise.
    GaussianAr,
}

impl SourceClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::HarmonicTones => "harmonic-tones",
            Self::FilteredNoise => "filtered-noise",
            Self::GaussianAr => "gaussian-ar",
        }
    }
}

impl std::str::FromStr for SourceClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "harmonic-tones" => Ok(Self::HarmonicTones),
            "filtered-noise" => Ok(Self::FilteredNoise),
            "gaussian-ar" => Ok(Self::GaussianAr),
            _ => Err(format!("unknown source class {s:?} (harmonic-tones, filtered-noise, gaussian-ar)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub class: SourceClass,
    pub count: usize,
    pub seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Note fundamentals in Hz (harmonic-tones only).
    pub fundamentals: Vec<f64>,
    /// Item RMS level is drawn uniformly from this range (dBFS).
    pub level_range_db: [f64; 2],
    /// Band-pass centre range in Hz (filtered-noise only).
    pub band_hz: [f64; 2],
    pub splits: SplitRatios,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            class: SourceClass::HarmonicTones,
            count: 200,
            seconds: 1.0,
            sample_rate: 16_000,
            seed: 0,
            fundamentals: vec![130.81, 164.81, 196.00, 220.00, 261.63, 329.63, 392.00, 440.00],
            level_range_db: [-32.0, -20.0],
            band_hz: [1500.0, 5000.0],
            splits: SplitRatios::default(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut problems = Vec::new();
        if !(self.seconds.is_finite() && self.seconds > 0.0) {
            problems.push("seconds must be positive".to_string());
        }
        if self.sample_rate < 1000 {
            problems.push("sample_rate must be >= 1000".to_string());
        }
        let nyq = f64::from(self.sample_rate) / 2.0;
        if self.class == SourceClass::HarmonicTones
            && (self.fundamentals.is_empty() || self.fundamentals.iter().any(|&f| !(f > 0.0 && f < nyq)))
        {
            problems.push("fundamentals must be non-empty and inside (0, fs/2)".to_string());
        }
        if !(self.level_range_db[0] <= self.level_range_db[1] && self.level_range_db[1] < 0.0) {
            problems.push("level_range_db must be an increasing range below 0 dBFS".to_string());
        }
        if !(self.band_hz[0] > 0.0 && self.band_hz[0] <= self.band_hz[1] && self.band_hz[1] < nyq) {
            problems.push("band_hz must be an increasing range inside (0, fs/2)".to_string());
        }
        if let Err(e) = self.splits.validate() {
            problems.push(e);
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::Invalid(problems.join("; ")))
        }
    }

    pub fn item_id(&self, index: usize) -> String {
        format!("{}-{index:04}", self.class.name())
    }
}

/// One generated item plus what went into it.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthItem {
    pub wave: Waveform,
    pub level_dbfs: f64,
    pub fundamentals: Vec<f64>,
}

fn normalise_and_quantise(mut x: Vec<f64>, level_db: f64) -> Vec<f64> {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let gain = if rms > 0.0 { 10f64.powf(level_db / 20.0) / rms } else { 0.0 };
    for v in &mut x {
        *v = f64::from(to_pcm16(*v * gain)) / 32768.0;
    }
    x
}

fn harmonic_tones(spec: &SynthSpec, n: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let fs = f64::from(spec.sample_rate);
    let mut out = vec![0.0; n];
    let mut used = Vec::new();
    let mut start = 0usize;
    while start < n {
        let dur = (rng.random_range(0.25..0.5) * fs) as usize;
        let f0 = spec.fundamentals[rng.random_range(0..spec.fundamentals.len())];
        used.push(f0);
        let tau = rng.random_range(0.2..0.8);
        let attack = 0.005 * fs;
        let partials: Vec<(f64, f64, f64)> = (1..)
            .map(|k| k as f64)
            .take_while(|k| k * f0 < 0.45 * fs)
            .map(|k| (k * f0, 1.0 / k, rng.random_range(0.0..2.0 * PI)))
            .collect();
        // Notes ring on under the next one for a short release.
        let end = (start + dur + (0.05 * fs) as usize).min(n);
        for (t, o) in out[start..end].iter_mut().enumerate() {
            let tt = t as f64 / fs;
            let env = (t as f64 / attack).min(1.0) * (-tt / tau).exp();
            let release = if t > dur { 1.0 - (t - dur) as f64 / (0.05 * fs) } else { 1.0 };
            let v: f64 = partials.iter().map(|&(f, a, ph)| a * (2.0 * PI * f * tt + ph).sin()).sum();
            *o += env * release * v;
        }
        start += dur;
    }
    used.dedup();
    (out, used)
}

fn biquad_bandpass(x: &[f64], f0: f64, q: f64, fs: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let y = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            y
        })
        .collect()
}

fn filtered_noise(spec: &SynthSpec, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let fs = f64::from(spec.sample_rate);
    let centre = rng.random_range(spec.band_hz[0]..=spec.band_hz[1]);
    let q = rng.random_range(1.5..4.0);
    let warm = 2048;
    let noise: Vec<f64> = (0..n + warm).map(|_| StandardNormal.sample(rng)).collect();
    let y = biquad_bandpass(&biquad_bandpass(&noise, centre, q, fs), centre, q, fs);
    y[warm..].to_vec()
}

fn gaussian_ar(spec: &SynthSpec, n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let fs = f64::from(spec.sample_rate);
    let r: f64 = rng.random_range(0.9..0.99);
    let theta = 2.0 * PI * rng.random_range(200.0..3000.0) / fs;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let warm = 2048;
    let (mut y1, mut y2) = (0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for t in 0..n + warm {
        let e: f64 = StandardNormal.sample(rng);
        let y = a1 * y1 + a2 * y2 + e;
        y2 = y1;
        y1 = y;
        if t >= warm {
            out.push(y);
        }
    }
    out
}

/// Item `index` of `spec`; independent of `spec.count`.
pub fn generate_item(spec: &SynthSpec, index: usize) -> Result<SynthItem, DatasetError> {
    spec.validate()?;
    let mut rng = indexed_substream(spec.seed, spec.class.name(), index as u64);
    let n = ((spec.seconds * f64::from(spec.sample_rate)).round() as usize).max(1);
    let level_dbfs = rng.random_range(spec.level_range_db[0]..=spec.level_range_db[1]);
    let (raw, fundamentals) = match spec.class {
        SourceClass::HarmonicTones => harmonic_tones(spec, n, &mut rng),
        SourceClass::FilteredNoise => (filtered_noise(spec, n, &mut rng), Vec::new()),
        SourceClass::GaussianAr => (gaussian_ar(spec, n, &mut rng), Vec::new()),
    };
    let wave = Waveform::new(normalise_and_quantise(raw, level_dbfs), spec.sample_rate)?;
    Ok(SynthItem { wave, level_dbfs, fundamentals })
}

/// Writes `count` 16-bit WAV files and `manifest.jsonl` into `dir`.
pub fn write_dataset(spec: &SynthSpec, dir: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    spec.validate()?;
    std::fs::create_dir_all(dir)?;
    let splits = assign_splits(spec.count, &spec.splits, spec.seed);
    let mut entries = Vec::with_capacity(spec.count);
    for (i, split) in splits.into_iter().enumerate() {
        let item = generate_item(spec, i)?;
        let id = spec.item_id(i);
        let file = format!("{id}.wav");
        item.wave.write_wav(dir.join(&file), SampleFormat::Pcm16)?;
        entries.push(ManifestEntry {
            id,
            file,
            class: Some(spec.class.name().to_string()),
            split,
            level_dbfs: Some(item.level_dbfs),
            fundamentals: item.fundamentals,
        });
    }
    write_manifest(&dir.join(crate::dataset::MANIFEST_FILE), &entries)?;
    Ok(entries)
}
