//! Objective evaluation: SI-SDR, mix consistency and the ideal-ratio-mask
//! oracle baseline.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::sampler::MixWeights;

/// Reported instead of +∞ when the residual vanishes.
pub const SI_SDR_CAP_DB: f64 = 300.0;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("reference signal is all zero")]
    ZeroReference,
    #[error("expected {expected} signals, got {got}")]
    Count { expected: usize, got: usize },
    #[error("item {0:?} missing from {1}")]
    MissingItem(String, &'static str),
    #[error("invalid IRM settings: {0}")]
    Irm(String),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Scale-invariant SDR in dB. Capped at [`SI_SDR_CAP_DB`]; `-∞` when the
/// estimate has no component along the reference.
pub fn si_sdr_slices(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(EvalError::Length(reference.len(), estimate.len()));
    }
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(EvalError::ZeroReference);
    }
    let alpha = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / rr;
    if alpha == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let (mut sig, mut err) = (0.0, 0.0);
    for (&r, &e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        sig += t * t;
        err += (t - e) * (t - e);
    }
    if err == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (sig / err).log10()).min(SI_SDR_CAP_DB))
}

pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    si_sdr_slices(&reference.samples, &estimate.samples)
}

/// `Σ a_s est_s`.
pub fn remix(estimates: &[Waveform], a: &MixWeights) -> Result<Waveform> {
    if estimates.len() != a.len() {
        return Err(EvalError::Count { expected: a.len(), got: estimates.len() });
    }
    let n = estimates[0].len();
    let mut out = vec![0.0; n];
    for (e, &w) in estimates.iter().zip(a.as_slice()) {
        if e.len() != n {
            return Err(EvalError::Length(n, e.len()));
        }
        out.iter_mut().zip(&e.samples).for_each(|(o, v)| *o += w * v);
    }
    Ok(Waveform { samples: out, sample_rate: estimates[0].sample_rate })
}

/// SI-SDR of the re-mixed estimates against the observed mix.
pub fn mix_consistency(estimates: &[Waveform], y: &Waveform, a: &MixWeights) -> Result<f64> {
    si_sdr(y, &remix(estimates, a)?)
}

/// Baseline that assigns `y a_s / ‖a‖²` to every source.
pub fn do_nothing(y: &Waveform, a: &MixWeights) -> Vec<Waveform> {
    a.as_slice().iter().map(|&w| y.scaled(w / a.norm_sq())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// `|R_s| / Σ|R_j|`.
    Magnitude,
    /// `|R_s|² / Σ|R_j|²`.
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrmConfig {
    pub window: usize,
    pub hop: usize,
    pub eps: f64,
    pub mask: MaskKind,
}

impl Default for IrmConfig {
    fn default() -> Self {
        Self { window: 2048, hop: 1024, eps: 1e-12, mask: MaskKind::Magnitude }
    }
}

/// Sine-windowed short-time transform at 50% overlap; the squared window
/// sums to one, so analysis followed by synthesis is the identity.
struct Stft {
    window: Vec<f64>,
    hop: usize,
    fwd: std::sync::Arc<dyn rustfft::Fft<f64>>,
    inv: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl Stft {
    fn new(cfg: &IrmConfig) -> Result<Self> {
        if cfg.window == 0 || cfg.window != 2 * cfg.hop {
            return Err(EvalError::Irm(format!("window {} must be twice the hop {}", cfg.window, cfg.hop)));
        }
        let n = cfg.window;
        let window = (0..n).map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin()).collect();
        let mut planner = FftPlanner::new();
        Ok(Self { window, hop: cfg.hop, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) })
    }

    fn frames(&self, len: usize) -> usize {
        // One hop of padding in front, enough at the end to cover every sample twice.
        len.div_ceil(self.hop) + 1
    }

    fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let n = self.window.len();
        (0..self.frames(x.len()))
            .map(|m| {
                let mut buf: Vec<Complex<f64>> = (0..n)
                    .map(|i| {
                        let t = (m * self.hop + i) as isize - self.hop as isize;
                        let v = if t >= 0 && (t as usize) < x.len() { x[t as usize] } else { 0.0 };
                        Complex::new(v * self.window[i], 0.0)
                    })
                    .collect();
                self.fwd.process(&mut buf);
                buf
            })
            .collect()
    }

    fn synthesize(&self, spec: &[Vec<Complex<f64>>], len: usize) -> Vec<f64> {
        let n = self.window.len();
        let mut out = vec![0.0; len];
        for (m, frame) in spec.iter().enumerate() {
            let mut buf = frame.clone();
            self.inv.process(&mut buf);
            for i in 0..n {
                let t = (m * self.hop + i) as isize - self.hop as isize;
                if t >= 0 && (t as usize) < len {
                    out[t as usize] += buf[i].re / n as f64 * self.window[i];
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct IrmOutput {
    pub estimates: Vec<Waveform>,
    /// `[source][frame][bin]`.
    pub masks: Vec<Vec<Vec<f64>>>,
}

/// Oracle masking of `y` with ratio masks built from the true sources.
pub fn irm_separate_with(y: &Waveform, refs: &[Waveform], cfg: &IrmConfig) -> Result<IrmOutput> {
    if refs.is_empty() {
        return Err(EvalError::Count { expected: 1, got: 0 });
    }
    if let Some(r) = refs.iter().find(|r| r.len() != y.len()) {
        return Err(EvalError::Length(y.len(), r.len()));
    }
    let stft = Stft::new(cfg)?;
    let ys = stft.analyze(&y.samples);
    let mags: Vec<Vec<Vec<f64>>> = refs
        .iter()
        .map(|r| {
            stft.analyze(&r.samples)
                .into_iter()
                .map(|f| {
                    f.into_iter()
                        .map(|c| match cfg.mask {
                            MaskKind::Magnitude => c.norm(),
                            MaskKind::Power => c.norm_sqr(),
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut masks = mags.clone();
    for m in 0..ys.len() {
        for k in 0..ys[m].len() {
            let total: f64 = mags.iter().map(|s| s[m][k]).sum::<f64>() + cfg.eps;
            for s in &mut masks {
                s[m][k] /= total;
            }
        }
    }
    let estimates = masks
        .iter()
        .map(|mask| {
            let spec: Vec<Vec<Complex<f64>>> =
                ys.iter().zip(mask).map(|(f, mk)| f.iter().zip(mk).map(|(c, &g)| c * g).collect()).collect();
            Waveform { samples: stft.synthesize(&spec, y.len()), sample_rate: y.sample_rate }
        })
        .collect();
    Ok(IrmOutput { estimates, masks })
}

pub fn irm_separate(y: &Waveform, refs: &[Waveform]) -> Result<Vec<Waveform>> {
    Ok(irm_separate_with(y, refs, &IrmConfig::default())?.estimates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub id: String,
    pub per_source: Vec<f64>,
    pub mix: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub sources: Vec<String>,
    pub items: Vec<ItemScores>,
    /// Mean SI-SDR per source over items.
    pub source_means: Vec<f64>,
    pub mix_mean: f64,
}

/// One line of the machine-readable report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub method: String,
    pub item: String,
    pub source: String,
    pub metric: String,
    /// Number, or "inf"/"-inf"/"nan" for non-finite values.
    pub value: serde_json::Value,
}

fn json_number(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map(serde_json::Value::Number).unwrap_or_else(|| {
        serde_json::Value::String(if v.is_nan() { "nan" } else if v > 0.0 { "inf" } else { "-inf" }.into())
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Scores every item of `refs`; items are visited in id order.
pub fn evaluate(
    method: &str,
    sources: &[String],
    outputs: &BTreeMap<String, Vec<Waveform>>,
    refs: &BTreeMap<String, Vec<Waveform>>,
    mixes: &BTreeMap<String, Waveform>,
    a: &MixWeights,
) -> Result<EvalReport> {
    if sources.len() != a.len() {
        return Err(EvalError::Count { expected: a.len(), got: sources.len() });
    }
    let mut items = Vec::with_capacity(refs.len());
    for (id, r) in refs {
        let est = outputs.get(id).ok_or_else(|| EvalError::MissingItem(id.clone(), "outputs"))?;
        let y = mixes.get(id).ok_or_else(|| EvalError::MissingItem(id.clone(), "mixes"))?;
        for set in [r, est] {
            if set.len() != a.len() {
                return Err(EvalError::Count { expected: a.len(), got: set.len() });
            }
        }
        let per_source = r.iter().zip(est).map(|(r, e)| si_sdr(r, e)).collect::<Result<Vec<_>>>()?;
        items.push(ItemScores { id: id.clone(), per_source, mix: mix_consistency(est, y, a)? });
    }
    let source_means = (0..a.len()).map(|s| mean(items.iter().map(|i| i.per_source[s]))).collect();
    let mix_mean = mean(items.iter().map(|i| i.mix));
    Ok(EvalReport { method: method.into(), sources: sources.to_vec(), items, source_means, mix_mean })
}

impl EvalReport {
    pub fn records(&self) -> Vec<ReportRecord> {
        let mut out = Vec::new();
        let rec = |item: &str, source: &str, value: f64| ReportRecord {
            method: self.method.clone(),
            item: item.into(),
            source: source.into(),
            metric: "si_sdr_db".into(),
            value: json_number(value),
        };
        for it in &self.items {
            for (s, &v) in self.sources.iter().zip(&it.per_source) {
                out.push(rec(&it.id, s, v));
            }
            out.push(rec(&it.id, "mix", it.mix));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.records().iter().map(|r| serde_json::to_string(r).expect("serialisable") + "\n").collect()
    }
}

/// Aggregate table with one row per source plus "mix" and one column per method.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else { return out };
    let width = reports.iter().map(|r| r.method.len()).max().unwrap_or(0).max(10);
    let _ = write!(out, "{:<12}", "SI-SDR [dB]");
    for r in reports {
        let _ = write!(out, " | {:>width$}", r.method);
    }
    out.push('\n');
    let rows = first.sources.iter().enumerate().map(|(i, s)| (s.clone(), Some(i))).chain([("mix".to_string(), None)]);
    for (label, idx) in rows {
        let _ = write!(out, "{label:<12}");
        for r in reports {
            let v = idx.map_or(r.mix_mean, |i| r.source_means.get(i).copied().unwrap_or(f64::NAN));
            let _ = write!(out, " | {v:>width$.2}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "{:<12} | {}", "items", first.items.len());
    out
}
