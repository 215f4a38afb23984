//! Mono waveforms and WAV file I/O.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("waveform is empty")]
    Empty,
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("expected mono audio, found {0} channels")]
    NotMono(u16),
    #[error("unsupported WAV encoding: {0}")]
    Unsupported(String),
    #[error("wav i/o: {0}")]
    Wav(#[from] hound::Error),
}

/// A single-channel signal with nominal full scale [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// On-disk sample encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AudioError> {
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if sample_rate == 0 {
            return Err(AudioError::BadSampleRate);
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(AudioError::NonFinite(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    /// Mean power in dB relative to full scale.
    pub fn power_dbfs(&self) -> f64 {
        power_db(&self.samples)
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self, AudioError> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(AudioError::NotMono(spec.channels));
        }
        let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| f64::from(v) / 32768.0))
                .collect::<Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()?,
            (fmt, bits) => return Err(AudioError::Unsupported(format!("{fmt:?} {bits}-bit"))),
        };
        Self::new(samples, spec.sample_rate)
    }

    /// Writes the waveform. PCM output is rounded and clipped to 16 bits.
    pub fn write_wav(&self, path: impl AsRef<Path>, format: SampleFormat) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: match format {
                SampleFormat::Pcm16 => 16,
                SampleFormat::Float32 => 32,
            },
            sample_format: match format {
                SampleFormat::Pcm16 => hound::SampleFormat::Int,
                SampleFormat::Float32 => hound::SampleFormat::Float,
            },
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &x in &self.samples {
            match format {
                SampleFormat::Pcm16 => writer.write_sample(to_pcm16(x))?,
                SampleFormat::Float32 => writer.write_sample(x as f32)?,
            }
        }
        writer.finalize()?;
        Ok(())
    }
}

pub fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Mean power of `samples` in dB; `-inf` for silence.
pub fn power_db(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NEG_INFINITY;
    }
    let p = samples.iter().map(|x| x * x).sum::<f64>() / samples.len() as f64;
    10.0 * p.log10()
}
