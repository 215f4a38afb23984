//! Annealed Langevin separation in the subband domain.
//!
//! Every source estimate follows its model's score while a Gaussian mix
//! likelihood `y ~ N(g(x̃), σ²‖a‖²)` pulls `g(x̃) = Σ a_s x̃_s` towards the
//! observation. The noise level walks a geometric (linear-in-dB) schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::diffgraph::Real;
use crate::rng::indexed_substream;
use crate::srcmodel::{ConfigError, ModelError, NoiseLevelDb, SourceModel};
use crate::subband::{FilterBank, FilterBankError, SubbandFrames};

/// Mix level the sampler works at.
pub const NORMALIZED_LEVEL_DBFS: f64 = -23.0;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid mix weights: {0}")]
    Weights(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("likelihood is degenerate at zero noise amplitude")]
    ZeroSigma,
    #[error("mixture is silent")]
    SilentMix,
    #[error("non-finite estimate after iteration {iter} (σ = {sigma_db} dB)")]
    NonFinite { iter: usize, sigma_db: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    FilterBank(#[from] FilterBankError),
}

type Result<T> = std::result::Result<T, SamplerError>;

/// Real mixing weights `a`, `y = Σ a_s x_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixWeights(Vec<f64>);

impl MixWeights {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() || a.iter().any(|v| !v.is_finite()) || a.iter().all(|&v| v == 0.0) {
            return Err(SamplerError::Weights(format!("{a:?} must be finite with non-zero norm")));
        }
        Ok(Self(a))
    }

    /// `(1, 1, ..., 1)`.
    pub fn ones(sources: usize) -> Self {
        Self(vec![1.0; sources.max(1)])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// `Σ a_s x_s`.
    pub fn mix(&self, xs: &[SubbandFrames]) -> SubbandFrames {
        let mut out = xs[0].with_data(vec![0.0; xs[0].data().len()]);
        for (&a, x) in self.0.iter().zip(xs) {
            out.data_mut().iter_mut().zip(x.data()).for_each(|(o, &v)| *o += a * v);
        }
        out
    }
}

impl TryFrom<Vec<f64>> for MixWeights {
    type Error = SamplerError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MixWeights> for Vec<f64> {
    fn from(w: MixWeights) -> Self {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Als,
    Cas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub variant: Variant,
    pub sigma_start_db: f64,
    pub sigma_end_db: f64,
    pub iterations: usize,
    /// CAS exponent.
    pub eta: f64,
    /// ALS base step size.
    pub eps_eta: f64,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { variant: Variant::Cas, sigma_start_db: 0.0, sigma_end_db: -90.0, iterations: 1500, eta: 90.0, eps_eta: 2e-5, seed: 0 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let start = NoiseLevelDb::new(self.sigma_start_db);
        let end = NoiseLevelDb::new(self.sigma_end_db);
        if start.is_err() || end.is_err() {
            problems.push(format!("sigma_start_db/sigma_end_db must lie in [-90, 0]"));
        } else if self.sigma_start_db <= self.sigma_end_db {
            problems.push("sigma_start_db must exceed sigma_end_db".to_string());
        }
        if self.iterations == 0 {
            problems.push("iterations must be >= 1".to_string());
        }
        if self.variant == Variant::Cas && !(self.eta >= 1.0) {
            problems.push(format!("eta = {} must be >= 1", self.eta));
        }
        if self.variant == Variant::Als && !(self.eps_eta > 0.0) {
            problems.push("eps_eta must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(SamplerError::Schedule(problems.join("; ")))
        }
    }

    /// Amplitude ratio between consecutive levels.
    pub fn gamma(&self) -> f64 {
        10f64.powf((self.sigma_end_db - self.sigma_start_db) / (20.0 * self.iterations as f64))
    }
}

/// `σ_{t_0} .. σ_{t_I}`, linear in dB with exact endpoints.
pub fn geometric_schedule(cfg: &ScheduleConfig) -> Result<Vec<NoiseLevelDb>> {
    cfg.validate()?;
    let n = cfg.iterations;
    (0..=n)
        .map(|i| {
            let db = if i == n {
                cfg.sigma_end_db
            } else {
                cfg.sigma_start_db + (cfg.sigma_end_db - cfg.sigma_start_db) * i as f64 / n as f64
            };
            NoiseLevelDb::new(db).map_err(Into::into)
        })
        .collect()
}

/// CAS step coefficients `α = 1 - γ^η`, `β = √(1 - γ^{2(η-1)})`; `(1, 0)` on the final step.
pub fn cas_coefficients(gamma: f64, eta: f64, is_final: bool) -> Result<(f64, f64)> {
    if !(eta >= 1.0) {
        return Err(SamplerError::Schedule(format!("eta = {eta} must be >= 1")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(SamplerError::Schedule(format!("gamma = {gamma} must lie in (0, 1)")));
    }
    if is_final {
        return Ok((1.0, 0.0));
    }
    Ok((1.0 - gamma.powf(eta), (1.0 - gamma.powf(2.0 * (eta - 1.0))).max(0.0).sqrt()))
}

/// ALS step size `ε_η γ^{i-I}`.
pub fn als_step_size(i: usize, iterations: usize, gamma: f64, eps_eta: f64) -> f64 {
    eps_eta * gamma.powf(i as f64 - iterations as f64)
}

/// `∇_{x̃_s} log p(y | x̃, σ) = a_s (y - g(x̃)) / (σ² ‖a‖²)` for every source.
pub fn mix_likelihood_score(x: &[SubbandFrames], y: &SubbandFrames, a: &MixWeights, sigma_amp: f64) -> Result<Vec<SubbandFrames>> {
    if sigma_amp == 0.0 {
        return Err(SamplerError::ZeroSigma);
    }
    check_stack(x, y, a)?;
    let g = a.mix(x);
    let k = 1.0 / (sigma_amp * sigma_amp * a.norm_sq());
    let resid: Vec<f64> = y.data().iter().zip(g.data()).map(|(y, g)| (y - g) * k).collect();
    Ok(a.as_slice().iter().map(|&a_s| y.with_data(resid.iter().map(|r| a_s * r).collect())).collect())
}

fn check_stack(x: &[SubbandFrames], y: &SubbandFrames, a: &MixWeights) -> Result<()> {
    if x.len() != a.len() || x.is_empty() {
        return Err(SamplerError::Shape(format!("{} estimates for {} weights", x.len(), a.len())));
    }
    if x.iter().any(|e| !e.same_shape(y)) {
        return Err(SamplerError::Shape("estimates and mix differ in shape".into()));
    }
    Ok(())
}

/// Source score `∇ log p(x̃ | σ)` for a batch of estimates.
pub trait ScoreProvider: Sync {
    fn score_batch(&self, xs: &[&SubbandFrames], sigma: NoiseLevelDb) -> Result<Vec<SubbandFrames>>;
}

impl<T: Real> ScoreProvider for SourceModel<T> {
    fn score_batch(&self, xs: &[&SubbandFrames], sigma: NoiseLevelDb) -> Result<Vec<SubbandFrames>> {
        Ok(SourceModel::score_batch(self, xs, sigma)?)
    }
}

/// Zero-mean Gaussian source, independent across coefficients with a fixed
/// variance per channel; at level σ the score is `-x / (v_c + σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScore {
    pub variances: Vec<f64>,
}

impl ScoreProvider for GaussianScore {
    fn score_batch(&self, xs: &[&SubbandFrames], sigma: NoiseLevelDb) -> Result<Vec<SubbandFrames>> {
        let s2 = sigma.amplitude().powi(2);
        xs.iter()
            .map(|x| {
                if x.channels() != self.variances.len() {
                    return Err(SamplerError::Shape(format!("{} channels vs {} variances", x.channels(), self.variances.len())));
                }
                let c = x.channels();
                Ok(x.with_data(x.data().iter().enumerate().map(|(i, &v)| -v / (self.variances[i % c] + s2)).collect()))
            })
            .collect()
    }
}

/// Update rule of one Langevin iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// `x + α σ² ∇ + β σ_next e`.
    Cas { alpha: f64, beta: f64, sigma_amp: f64, sigma_next_amp: f64 },
    /// `x + η ∇ + √(2η) e`.
    Als { eta: f64 },
}

/// One update of all estimates; `model_scores` and the mix term are both
/// evaluated at the incoming `x`.
pub fn langevin_step(
    x: &[SubbandFrames],
    y: &SubbandFrames,
    a: &MixWeights,
    sigma_amp: f64,
    model_scores: &[SubbandFrames],
    rule: StepRule,
    rng: &mut impl Rng,
) -> Result<Vec<SubbandFrames>> {
    let mix = mix_likelihood_score(x, y, a, sigma_amp)?;
    if model_scores.len() != x.len() || model_scores.iter().zip(x).any(|(s, e)| !s.same_shape(e)) {
        return Err(SamplerError::Shape("model scores do not match the estimates".into()));
    }
    let (step, noise) = match rule {
        StepRule::Cas { alpha, beta, sigma_amp, sigma_next_amp } => (alpha * sigma_amp * sigma_amp, beta * sigma_next_amp),
        StepRule::Als { eta } => (eta, (2.0 * eta).sqrt()),
    };
    Ok(x.iter()
        .zip(model_scores.iter().zip(&mix))
        .map(|(e, (ms, mx))| {
            let data = e
                .data()
                .iter()
                .zip(ms.data().iter().zip(mx.data()))
                .map(|(&v, (&g1, &g2))| {
                    let z = if noise != 0.0 { noise * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
                    v + step * (g1 + g2) + z
                })
                .collect();
            e.with_data(data)
        })
        .collect())
}

/// Per-iteration diagnostics of one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub chain: usize,
    pub i: usize,
    pub sigma_db: f64,
    /// SI-SDR of `g(x̃)` against `y`, in the subband domain.
    pub mix_consistency_db: f64,
    pub score_norms: Vec<f64>,
}

/// Options that do not change the result.
pub struct RunOptions<'a> {
    /// Metrics every this many iterations (and on the last); 0 disables.
    pub metrics_every: usize,
    pub on_metrics: Option<&'a mut dyn FnMut(&IterationMetrics)>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self { metrics_every: 0, on_metrics: None }
    }
}

fn step_rule(cfg: &ScheduleConfig, i: usize, schedule: &[NoiseLevelDb]) -> Result<StepRule> {
    let n = cfg.iterations;
    let gamma = cfg.gamma();
    Ok(match cfg.variant {
        Variant::Cas => {
            let (alpha, beta) = cas_coefficients(gamma, cfg.eta, i == n)?;
            let sigma_next_amp = if i < n { schedule[i + 1].amplitude() } else { 0.0 };
            StepRule::Cas { alpha, beta, sigma_amp: schedule[i].amplitude(), sigma_next_amp }
        }
        Variant::Als => StepRule::Als { eta: als_step_size(i, n, gamma, cfg.eps_eta) },
    })
}

/// Runs one chain per mix in lockstep; chain `k` separates `ys[k]` with
/// randomness from substream `k` of the schedule seed. Returns estimates
/// indexed `[chain][source]`.
pub fn separate_subband_batch(
    ys: &[SubbandFrames],
    providers: &[&dyn ScoreProvider],
    a: &MixWeights,
    cfg: &ScheduleConfig,
    mut opts: RunOptions<'_>,
) -> Result<Vec<Vec<SubbandFrames>>> {
    let schedule = geometric_schedule(cfg)?;
    if providers.len() != a.len() || providers.len() < 2 {
        return Err(SamplerError::Shape(format!("{} score providers for {} weights (need >= 2)", providers.len(), a.len())));
    }
    let Some(first) = ys.first() else { return Ok(Vec::new()) };
    if ys.iter().any(|y| !y.same_shape(first)) {
        return Err(SamplerError::Shape("all mixes in a batch must share a shape".into()));
    }
    let norm_sq = a.norm_sq();
    let start_amp = schedule[0].amplitude();
    let mut rngs: Vec<_> = (0..ys.len()).map(|k| indexed_substream(cfg.seed, "chain", k as u64)).collect();
    let mut states: Vec<Vec<SubbandFrames>> = ys
        .iter()
        .zip(rngs.iter_mut())
        .map(|(y, rng)| {
            a.as_slice()
                .iter()
                .map(|&a_s| {
                    y.with_data(
                        y.data().iter().map(|&v| a_s / norm_sq * v + start_amp * rng.sample::<f64, _>(StandardNormal)).collect(),
                    )
                })
                .collect()
        })
        .collect();

    for i in 1..=cfg.iterations {
        let sigma = schedule[i];
        let rule = step_rule(cfg, i, &schedule)?;
        // Per-source batched scores over all chains.
        let per_source = providers
            .par_iter()
            .enumerate()
            .map(|(s, p)| {
                let xs: Vec<&SubbandFrames> = states.iter().map(|st| &st[s]).collect();
                p.score_batch(&xs, sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut scores: Vec<Vec<SubbandFrames>> = vec![Vec::with_capacity(providers.len()); ys.len()];
        for source in per_source {
            for (k, sc) in source.into_iter().enumerate() {
                scores[k].push(sc);
            }
        }
        states
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .zip(scores.par_iter().zip(ys.par_iter()))
            .try_for_each(|((state, rng), (sc, y))| -> Result<()> {
                let next = langevin_step(state, y, a, sigma.amplitude(), sc, rule, rng)?;
                if next.iter().any(|e| e.data().iter().any(|v| !v.is_finite())) {
                    return Err(SamplerError::NonFinite { iter: i, sigma_db: sigma.db() });
                }
                *state = next;
                Ok(())
            })?;
        let report = opts.metrics_every > 0 && (i % opts.metrics_every == 0 || i == cfg.iterations);
        for (k, (state, sc)) in states.iter().zip(&scores).enumerate() {
            if report {
                if let Some(cb) = opts.on_metrics.as_mut() {
                    let g = a.mix(state);
                    cb(&IterationMetrics {
                        chain: k,
                        i,
                        sigma_db: sigma.db(),
                        mix_consistency_db: crate::evalkit::si_sdr_slices(ys[k].data(), g.data()).unwrap_or(f64::NAN),
                        score_norms: sc.iter().map(|s| s.energy().sqrt()).collect(),
                    });
                }
            }
        }
    }
    Ok(states)
}

/// Single-mix convenience wrapper of [`separate_subband_batch`].
pub fn separate_subband(
    y: &SubbandFrames,
    providers: &[&dyn ScoreProvider],
    a: &MixWeights,
    cfg: &ScheduleConfig,
    opts: RunOptions<'_>,
) -> Result<Vec<SubbandFrames>> {
    Ok(separate_subband_batch(std::slice::from_ref(y), providers, a, cfg, opts)?.pop().expect("one chain"))
}

/// Gain that brings `y` to [`NORMALIZED_LEVEL_DBFS`].
pub fn normalization_gain(y: &Waveform) -> Result<f64> {
    let p = y.energy() / y.len() as f64;
    if !(p > 0.0) {
        return Err(SamplerError::SilentMix);
    }
    Ok(10f64.powf(NORMALIZED_LEVEL_DBFS / 20.0) / p.sqrt())
}

/// Separates equally long mixes: normalise each to -23 dBFS, analyse, sample,
/// synthesise and undo the normalisation. Returns `[mix][source]` waveforms.
pub fn separate_batch(
    ys: &[Waveform],
    providers: &[&dyn ScoreProvider],
    a: &MixWeights,
    cfg: &ScheduleConfig,
    bank: &FilterBank,
    opts: RunOptions<'_>,
) -> Result<Vec<Vec<Waveform>>> {
    let gains = ys.iter().map(normalization_gain).collect::<Result<Vec<_>>>()?;
    let subs = ys.iter().zip(&gains).map(|(y, &g)| bank.encode(&y.scaled(g))).collect::<std::result::Result<Vec<_>, _>>()?;
    let est = separate_subband_batch(&subs, providers, a, cfg, opts)?;
    est.into_iter()
        .zip(&gains)
        .map(|(chain, &g)| {
            chain.iter().map(|e| Ok(bank.decode(e)?.scaled(1.0 / g))).collect::<Result<Vec<_>>>()
        })
        .collect()
}

pub fn separate(
    y: &Waveform,
    providers: &[&dyn ScoreProvider],
    a: &MixWeights,
    cfg: &ScheduleConfig,
    bank: &FilterBank,
    opts: RunOptions<'_>,
) -> Result<Vec<Waveform>> {
    Ok(separate_batch(std::slice::from_ref(y), providers, a, cfg, bank, opts)?.pop().expect("one mix"))
}
