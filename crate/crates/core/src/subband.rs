//! Critically sampled cosine-modulated (pseudo-QMF) filterbank.
//!
//! Analysis splits a waveform into `C` subband sequences decimated by `C`;
//! frame `n` holds one coefficient per channel. Synthesis inverts the
//! analysis up to a fixed latency of `C * overlap - 1` samples. [`FilterBank::encode`]
//! and [`FilterBank::decode`] hide that latency so a round trip returns an
//! aligned signal of the original length.
//!
//! The analysis filters are `h_k[n] = 2 p[n] cos(π/C (k + ½)(n - (L-1)/2) + (-1)^k π/4)`
//! and the synthesis filters are their time reverses, which makes the bank a
//! near-tight frame: subband energy tracks signal energy and white noise stays
//! white with per-channel variance equal to the input variance.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use thiserror::Error;

use crate::audio::Waveform;
use crate::diffgraph::Real;

pub const DEFAULT_CHANNELS: usize = 64;
pub const DEFAULT_OVERLAP: usize = 10;
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const SUPPORTED_CHANNELS: [usize; 4] = [8, 16, 32, 64];

const KAISER_BETA: f64 = 8.7;
const REFINE_ITERS: usize = 20;
const STOPBAND_EDGE: f64 = 1.1;
const STOPBAND_WEIGHT: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum FilterBankError {
    #[error("unsupported channel count {0} (supported: 8, 16, 32, 64)")]
    UnsupportedChannels(usize),
    #[error("overlap factor {0} outside [8, 16]")]
    UnsupportedOverlap(usize),
    #[error("empty input")]
    Empty,
    #[error("subband frames have {got} channels, bank has {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("frame data length {got} does not match {frames} x {channels}")]
    BadShape { frames: usize, channels: usize, got: usize },
    #[error("non-finite subband coefficient at index {0}")]
    NonFinite(usize),
}

/// `frames x channels` matrix of real subband coefficients, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandFrames {
    frames: usize,
    channels: usize,
    data: Vec<f64>,
    /// Number of meaningful time-domain samples behind these frames.
    pub source_len: usize,
    pub sample_rate: u32,
}

impl SubbandFrames {
    pub fn new(frames: usize, channels: usize, data: Vec<f64>) -> Result<Self, FilterBankError> {
        if data.len() != frames * channels {
            return Err(FilterBankError::BadShape { frames, channels, got: data.len() });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(FilterBankError::NonFinite(i));
        }
        Ok(Self {
            frames,
            channels,
            data,
            source_len: frames * channels,
            sample_rate: DEFAULT_SAMPLE_RATE,
        })
    }

    pub fn zeros(frames: usize, channels: usize) -> Self {
        Self {
            frames,
            channels,
            data: vec![0.0; frames * channels],
            source_len: frames * channels,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, n: usize) -> &[f64] {
        &self.data[n * self.channels..(n + 1) * self.channels]
    }

    pub fn get(&self, n: usize, c: usize) -> f64 {
        self.data[n * self.channels + c]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Same metadata, new coefficients.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len());
        Self { data, ..self.clone() }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.frames == other.frames && self.channels == other.channels
    }
}

/// Symmetric lowpass prototype of a `channels`-band cosine-modulated bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeFilter {
    pub taps: Vec<f64>,
    pub channels: usize,
    pub overlap: usize,
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kaiser(len: usize, beta: f64) -> Vec<f64> {
    let denom = bessel_i0(beta);
    let half = (len - 1) as f64 / 2.0;
    (0..len)
        .map(|n| {
            let r = (n as f64 - half) / half;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

/// Solves `a x = b` for symmetric positive definite `a` (row-major, `n x n`).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    Some(y)
}

/// Cosine basis rows `2 cos(ω (i - centre))` over the first half of a symmetric filter.
fn half_cosine_rows(omegas: &[f64], half: usize, centre: f64) -> Vec<f64> {
    let mut rows = Vec::with_capacity(omegas.len() * half);
    for &w in omegas {
        rows.extend((0..half).map(|i| 2.0 * (w * (i as f64 - centre)).cos()));
    }
    rows
}

fn matvec(rows: &[f64], x: &[f64]) -> Vec<f64> {
    rows.chunks(x.len()).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Designs the prototype: a Kaiser-windowed sinc with cutoff π/(2C), then
/// refined by damped Gauss-Newton so that `|P(ω)|² + |P(π/C - ω)|²` is flat
/// across the first band and the response is small beyond `1.1 π/C`.
///
/// Taps are scaled so that `Σ p[n] = √C`, which gives unit round-trip gain.
pub fn design_prototype(channels: usize, overlap: usize) -> Result<PrototypeFilter, FilterBankError> {
    if !SUPPORTED_CHANNELS.contains(&channels) {
        return Err(FilterBankError::UnsupportedChannels(channels));
    }
    if !(8..=16).contains(&overlap) {
        return Err(FilterBankError::UnsupportedOverlap(overlap));
    }
    let m = channels as f64;
    let len = channels * overlap;
    let centre = (len - 1) as f64 / 2.0;
    let cutoff = PI / (2.0 * m);
    let window = kaiser(len, KAISER_BETA);
    let mut taps: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 - centre;
            let sinc = if t == 0.0 { cutoff / PI } else { (cutoff * t).sin() / (PI * t) };
            sinc * window[n]
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);

    // Work with A(ω) = Σ_i 2 h_i cos(ω (i - centre)) over the half filter,
    // normalised so the passband target of A² is 1.
    let half = len / 2;
    let mut h: Vec<f64> = taps[..half].to_vec();
    let pass: Vec<f64> = (0..8 * overlap).map(|j| j as f64 * (PI / m) / (8 * overlap - 1) as f64).collect();
    let mirrored: Vec<f64> = pass.iter().map(|w| PI / m - w).collect();
    let n_stop = 2 * len;
    let stop: Vec<f64> = (0..n_stop)
        .map(|j| STOPBAND_EDGE * PI / m + j as f64 * (PI - STOPBAND_EDGE * PI / m) / (n_stop - 1) as f64)
        .collect();
    let jp1 = half_cosine_rows(&pass, half, centre);
    let jp2 = half_cosine_rows(&mirrored, half, centre);
    let js = half_cosine_rows(&stop, half, centre);
    let residuals = |h: &[f64]| -> Vec<f64> {
        let a1 = matvec(&jp1, h);
        let a2 = matvec(&jp2, h);
        let mut r: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| x * x + y * y - 1.0).collect();
        r.extend(matvec(&js, h).into_iter().map(|s| STOPBAND_WEIGHT * s));
        r
    };
    let n_pass = pass.len();
    let n_res = n_pass + n_stop;
    let mut lambda = 1e-3;
    let mut r = residuals(&h);
    let mut cost: f64 = r.iter().map(|x| x * x).sum();
    let mut jac = vec![0.0; n_res * half];
    for _ in 0..REFINE_ITERS {
        let a1 = matvec(&jp1, &h);
        let a2 = matvec(&jp2, &h);
        for j in 0..n_pass {
            for i in 0..half {
                jac[j * half + i] = 2.0 * a1[j] * jp1[j * half + i] + 2.0 * a2[j] * jp2[j * half + i];
            }
        }
        for (dst, src) in jac[n_pass * half..].iter_mut().zip(&js) {
            *dst = STOPBAND_WEIGHT * src;
        }
        let mut normal = vec![0.0; half * half];
        f64::gemm(half, n_res, half, 1.0, &jac, 1, half as isize, &jac, half as isize, 1, 0.0, &mut normal);
        let mut grad = vec![0.0; half];
        f64::gemm(half, n_res, 1, 1.0, &jac, 1, half as isize, &r, 1, 1, 0.0, &mut grad);
        loop {
            let mut damped = normal.clone();
            for i in 0..half {
                damped[i * half + i] *= 1.0 + lambda;
            }
            let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
            let accepted = cholesky_solve(&damped, &neg, half).and_then(|step| {
                let trial: Vec<f64> = h.iter().zip(&step).map(|(a, b)| a + b).collect();
                let rt = residuals(&trial);
                let ct: f64 = rt.iter().map(|x| x * x).sum();
                (ct < cost).then_some((trial, rt, ct))
            });
            match accepted {
                Some((trial, rt, ct)) => {
                    h = trial;
                    r = rt;
                    cost = ct;
                    lambda *= 0.3;
                    break;
                }
                None => {
                    lambda *= 10.0;
                    if lambda > 1e10 {
                        break;
                    }
                }
            }
        }
    }
    let scale = m.sqrt();
    let mut taps = Vec::with_capacity(len);
    taps.extend(h.iter().map(|x| x * scale));
    taps.extend(h.iter().rev().map(|x| x * scale));
    Ok(PrototypeFilter { taps, channels, overlap })
}

fn cached_prototype(channels: usize, overlap: usize) -> Result<Arc<PrototypeFilter>, FilterBankError> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<PrototypeFilter>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(p) = cache.lock().expect("prototype cache poisoned").get(&(channels, overlap)) {
        return Ok(Arc::clone(p));
    }
    let p = Arc::new(design_prototype(channels, overlap)?);
    cache
        .lock()
        .expect("prototype cache poisoned")
        .insert((channels, overlap), Arc::clone(&p));
    Ok(p)
}

/// Analysis/synthesis pair built from one prototype.
#[derive(Debug, Clone)]
pub struct FilterBank {
    channels: usize,
    prototype: Arc<PrototypeFilter>,
    /// `channels x taps` analysis filters, row-major.
    analysis: Vec<f64>,
    /// Time-reversed analysis filters.
    synthesis: Vec<f64>,
}

impl FilterBank {
    pub fn new(channels: usize, overlap: usize) -> Result<Self, FilterBankError> {
        let prototype = cached_prototype(channels, overlap)?;
        let len = prototype.taps.len();
        let centre = (len - 1) as f64 / 2.0;
        let m = channels as f64;
        let mut analysis = Vec::with_capacity(channels * len);
        for k in 0..channels {
            let phase = if k % 2 == 0 { PI / 4.0 } else { -PI / 4.0 };
            analysis.extend(prototype.taps.iter().enumerate().map(|(n, p)| {
                2.0 * p * (PI / m * (k as f64 + 0.5) * (n as f64 - centre) + phase).cos()
            }));
        }
        let synthesis = analysis
            .chunks(len)
            .flat_map(|row| row.iter().rev().copied())
            .collect();
        Ok(Self { channels, prototype, analysis, synthesis })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn prototype(&self) -> &PrototypeFilter {
        &self.prototype
    }

    fn taps(&self) -> usize {
        self.prototype.taps.len()
    }

    /// Delay in samples between an input and its resynthesis.
    pub fn latency(&self) -> usize {
        self.taps() - 1
    }

    /// Causal analysis. The input is zero-padded to a multiple of the
    /// channel count; `source_len` records the unpadded length.
    pub fn analyze(&self, w: &Waveform) -> Result<SubbandFrames, FilterBankError> {
        self.analyze_samples(&w.samples, w.sample_rate, w.len())
    }

    fn analyze_samples(&self, x: &[f64], sample_rate: u32, source_len: usize) -> Result<SubbandFrames, FilterBankError> {
        if x.is_empty() {
            return Err(FilterBankError::Empty);
        }
        let c = self.channels;
        let taps = self.taps();
        let frames = x.len().div_ceil(c);
        // Row m holds x[mC + C - 1 - n] for n in 0..taps.
        let mut segments = vec![0.0; frames * taps];
        for m in 0..frames {
            let row = &mut segments[m * taps..(m + 1) * taps];
            let end = m * c + c - 1;
            for (n, slot) in row.iter_mut().enumerate() {
                if n > end {
                    break;
                }
                if let Some(&v) = x.get(end - n) {
                    *slot = v;
                }
            }
        }
        let mut data = vec![0.0; frames * c];
        f64::gemm(frames, taps, c, 1.0, &segments, taps as isize, 1, &self.analysis, 1, taps as isize, 0.0, &mut data);
        Ok(SubbandFrames { frames, channels: c, data, source_len, sample_rate })
    }

    /// Causal synthesis of `frames * channels` samples; the result lags the
    /// analysed signal by [`latency`](Self::latency) samples.
    pub fn synthesize(&self, x: &SubbandFrames) -> Result<Waveform, FilterBankError> {
        let samples = self.synthesize_raw(x)?;
        Ok(Waveform { samples, sample_rate: x.sample_rate })
    }

    fn synthesize_raw(&self, x: &SubbandFrames) -> Result<Vec<f64>, FilterBankError> {
        if x.channels != self.channels {
            return Err(FilterBankError::ChannelMismatch { expected: self.channels, got: x.channels });
        }
        if x.frames == 0 {
            return Err(FilterBankError::Empty);
        }
        let c = self.channels;
        let taps = self.taps();
        let mut contrib = vec![0.0; x.frames * taps];
        f64::gemm(x.frames, c, taps, 1.0, &x.data, c as isize, 1, &self.synthesis, taps as isize, 1, 0.0, &mut contrib);
        let out_len = x.frames * c;
        let mut y = vec![0.0; out_len];
        for m in 0..x.frames {
            let start = m * c + c - 1;
            if start >= out_len {
                break;
            }
            let span = (out_len - start).min(taps);
            for (dst, src) in y[start..start + span].iter_mut().zip(&contrib[m * taps..m * taps + span]) {
                *dst += src;
            }
        }
        Ok(y)
    }

    /// Analysis with enough trailing zeros that [`decode`](Self::decode)
    /// can return the full, latency-aligned signal.
    pub fn encode(&self, w: &Waveform) -> Result<SubbandFrames, FilterBankError> {
        let mut padded = w.samples.clone();
        padded.resize(w.len() + self.latency(), 0.0);
        self.analyze_samples(&padded, w.sample_rate, w.len())
    }

    /// Inverse of [`encode`](Self::encode): synthesis with the latency removed,
    /// truncated to the original length.
    pub fn decode(&self, x: &SubbandFrames) -> Result<Waveform, FilterBankError> {
        let y = self.synthesize_raw(x)?;
        let d = self.latency();
        let len = x.source_len.min(y.len().saturating_sub(d));
        if len == 0 {
            return Err(FilterBankError::Empty);
        }
        Ok(Waveform { samples: y[d..d + len].to_vec(), sample_rate: x.sample_rate })
    }

    /// Number of frames [`encode`](Self::encode) produces for `len` samples.
    pub fn encoded_frames(&self, len: usize) -> usize {
        (len + self.latency()).div_ceil(self.channels)
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::new(DEFAULT_CHANNELS, DEFAULT_OVERLAP).expect("default bank is valid")
    }
}

/// Ratio of reference energy to error energy in dB.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    let signal: f64 = reference.iter().map(|x| x * x).sum();
    let noise: f64 = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (signal / noise).log10()
}
