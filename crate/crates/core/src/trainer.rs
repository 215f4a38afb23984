//! Negative-log-likelihood training of source models on noise-corrupted
//! subband signals.
//!
//! Each batch slot holds one file for `segments_per_file` consecutive
//! iterations. The file is corrupted once at a single noise level and consumed
//! as ordered segments; recurrent state and context carry over between
//! segments while gradients stop at segment boundaries.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{adjust_length, Dataset, DatasetError, Item};
use crate::diffgraph::{Real, Tensor};
use crate::rng::{indexed_substream, substream};
use crate::srcmodel::{Batch, Checkpoint, CheckpointError, ModelConfig, ModelError, NoiseLevelDb, SourceModel, Wrt};
use crate::subband::{FilterBank, FilterBankError, SubbandFrames};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite training loss at iteration {iter} (lr {lr:e}, noise levels {sigmas:?})")]
    NonFinite { iter: usize, lr: f64, sigmas: Vec<f64> },
    #[error("iteration {iter} outside [0, {iterations}]")]
    IterOutOfRange { iter: usize, iterations: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    FilterBank(#[from] FilterBankError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Segment length per iteration.
    pub seq_seconds: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub noise_range_db: [f64; 2],
    pub segments_per_file: usize,
    /// Items are repeated or cut to this length.
    pub item_seconds: f64,
    pub seed: u64,
    /// Validation period in iterations (0 disables periodic validation).
    pub val_every: usize,
    /// Upper bound on validation items used per evaluation.
    pub val_items: usize,
    /// Global gradient-norm clip; `None` leaves gradients untouched.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1_000_000,
            batch_size: 64,
            seq_seconds: 1.0,
            lr_start: 1e-4,
            lr_end: 1e-6,
            noise_range_db: [-90.0, 0.0],
            segments_per_file: 8,
            item_seconds: 8.0,
            seed: 0,
            val_every: 1000,
            val_items: 64,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.seq_seconds > 0.0) {
            problems.push("seq_seconds must be positive".to_string());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            problems.push("learning rates must be positive".to_string());
        }
        let [lo, hi] = self.noise_range_db;
        if NoiseLevelDb::new(lo).is_err() || NoiseLevelDb::new(hi).is_err() || lo > hi {
            problems.push(format!("noise_range_db [{lo}, {hi}] must be an increasing range inside [-90, 0]"));
        }
        if self.segments_per_file == 0 {
            problems.push("segments_per_file must be >= 1".to_string());
        }
        if self.seq_seconds * self.segments_per_file as f64 > self.item_seconds + 1e-9 {
            problems.push("segments_per_file * seq_seconds exceeds item_seconds".to_string());
        }
        if self.val_items == 0 {
            problems.push("val_items must be >= 1".to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                problems.push("grad_clip must be positive".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// Cosine decay from `lr_start` at 0 to `lr_end` at `iterations`.
pub fn cosine_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.iterations {
        return Err(TrainError::IterOutOfRange { iter, iterations: cfg.iterations });
    }
    let progress = if cfg.iterations == 0 { 0.0 } else { iter as f64 / cfg.iterations as f64 };
    Ok(cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (PI * progress).cos()))
}

/// `x + 10^(dB/20) z` with `z` standard normal per entry.
pub fn corrupt(x: &SubbandFrames, sigma: NoiseLevelDb, seed: u64) -> SubbandFrames {
    corrupt_with(x, Some(sigma), &mut substream(seed, "corrupt"))
}

/// As [`corrupt`]; `None` means a clean copy.
pub fn corrupt_with(x: &SubbandFrames, sigma: Option<NoiseLevelDb>, rng: &mut impl Rng) -> SubbandFrames {
    let Some(sigma) = sigma else { return x.clone() };
    let amp = sigma.amplitude();
    x.with_data(x.data().iter().map(|&v| v + amp * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl<T: Real> Adam<T> {
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step on `params` along `grads` (gradients of the loss).
    pub fn update(&mut self, params: &mut BTreeMap<String, Tensor<T>>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = T::from_f64_lossy(lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p - step * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub lr: f64,
    /// Mean training NLL per coefficient since the previous record.
    pub train_nll: Option<f64>,
    pub val_nll: Option<f64>,
}

/// Receives progress while training runs.
pub trait TrainSink {
    fn record(&mut self, _rec: &TrainRecord) -> Result<()> {
        Ok(())
    }

    fn best(&mut self, _ck: &Checkpoint, _val_nll: f64) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {}

/// Writes `train_log.jsonl` and `best.ckpt` into a directory.
pub struct DirSink {
    dir: PathBuf,
    log: std::io::BufWriter<std::fs::File>,
}

impl DirSink {
    pub const LOG_FILE: &'static str = "train_log.jsonl";
    pub const BEST_FILE: &'static str = "best.ckpt";

    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let log = std::io::BufWriter::new(std::fs::File::create(dir.join(Self::LOG_FILE))?);
        Ok(Self { dir: dir.to_path_buf(), log })
    }
}

impl TrainSink for DirSink {
    fn record(&mut self, rec: &TrainRecord) -> Result<()> {
        serde_json::to_writer(&mut self.log, rec).map_err(std::io::Error::other)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        log::info!(
            "iter {} lr {:.3e} train {:?} val {:?}",
            rec.iter,
            rec.lr,
            rec.train_nll,
            rec.val_nll
        );
        Ok(())
    }

    fn best(&mut self, ck: &Checkpoint, _val_nll: f64) -> Result<()> {
        ck.save(self.dir.join(Self::BEST_FILE))?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation NLL seen (initial ones included).
    pub best: Checkpoint,
    pub best_val_nll: f64,
    pub initial_val_nll: f64,
    pub final_checkpoint: Checkpoint,
    pub records: Vec<TrainRecord>,
}

fn frames_for(seconds: f64, cfg: &ModelConfig) -> usize {
    ((seconds * f64::from(cfg.sample_rate) / cfg.channels as f64).round() as usize).max(1)
}

struct Slot {
    frames: SubbandFrames,
    sigma: NoiseLevelDb,
}

fn draw_sigma(cfg: &TrainConfig, rng: &mut impl Rng) -> NoiseLevelDb {
    let [lo, hi] = cfg.noise_range_db;
    let db = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    NoiseLevelDb::new(db).expect("validated range")
}

/// Corrupted, length-adjusted subband item.
fn prepare(item: &Item, bank: &FilterBank, target: usize, sigma: NoiseLevelDb, rng: &mut impl Rng) -> Result<SubbandFrames> {
    let wave = adjust_length(&item.wave, target, rng);
    let clean = bank.analyze(&wave)?;
    Ok(corrupt_with(&clean, Some(sigma), rng))
}

/// Fixed validation set: every item corrupted once with its own noise level.
struct Validation {
    frames: Vec<SubbandFrames>,
    sigmas: Vec<NoiseLevelDb>,
}

impl Validation {
    fn new(items: &[Item], bank: &FilterBank, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let target = (cfg.item_seconds * f64::from(model_cfg.sample_rate)).round() as usize;
        let mut frames = Vec::new();
        let mut sigmas = Vec::new();
        for (i, item) in items.iter().take(cfg.val_items).enumerate() {
            let mut rng = indexed_substream(cfg.seed, "val", i as u64);
            let sigma = draw_sigma(cfg, &mut rng);
            frames.push(prepare(item, bank, target, sigma, &mut rng)?);
            sigmas.push(sigma);
        }
        Ok(Self { frames, sigmas })
    }

    /// Mean NLL per coefficient over the validation items.
    fn nll<T: Real>(&self, model: &SourceModel<T>) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        // Small groups keep the graph buffers bounded.
        for (chunk, sig) in self.frames.chunks(8).zip(self.sigmas.chunks(8)) {
            let seqs: Vec<&[f64]> = chunk.iter().map(|f| f.data()).collect();
            let batch = Batch::from_sequences(model.config(), &seqs, chunk[0].frames(), sig.to_vec())?;
            total -= model.evaluate(&batch, Wrt::Nothing)?.log_prob;
            count += chunk.iter().map(|f| f.data().len()).sum::<usize>();
        }
        Ok(total / count as f64)
    }
}

/// Trains a freshly initialised model on `data.train`, validating on `data.val`.
pub fn train<T: Real>(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate().map_err(ModelError::from)?;
    if data.train.is_empty() {
        return Err(DatasetError::EmptySplit("training").into());
    }
    let val_items = if data.val.is_empty() { &data.train } else { &data.val };
    let bank = FilterBank::new(model_cfg.channels, model_cfg.filterbank_overlap)?;
    let mut model = SourceModel::<T>::init(model_cfg.clone(), crate::rng::derive_seed(cfg.seed, "init"))?;
    let validation = Validation::new(val_items, &bank, model_cfg, cfg)?;

    let initial_val_nll = validation.nll(&model)?;
    let mut best = model.to_checkpoint();
    let mut best_val_nll = initial_val_nll;
    let mut records = Vec::new();
    let rec = TrainRecord { iter: 0, lr: cosine_lr(0, cfg)?, train_nll: None, val_nll: Some(initial_val_nll) };
    sink.record(&rec)?;
    sink.best(&best, best_val_nll)?;
    records.push(rec);

    let (b, l, c) = (cfg.batch_size, model_cfg.context_frames, model_cfg.channels);
    let s = model_cfg.recurrent_state_dim;
    let seg = frames_for(cfg.seq_seconds, model_cfg);
    let target = (cfg.item_seconds * f64::from(model_cfg.sample_rate)).round() as usize;
    let mut order: Vec<usize> = Vec::new();
    let mut order_rng = substream(cfg.seed, "order");
    let mut next_file = 0u64;
    let mut slots: Vec<Slot> = Vec::new();
    let mut prefix = Tensor::<T>::zeros(&[b, l, c]);
    let mut h0 = Tensor::<T>::zeros(&[b, s]);
    let mut adam = Adam::<T>::default();
    let mut window = (0.0, 0usize);
    let log_every = if cfg.val_every > 0 { cfg.val_every.min(100) } else { 100 };

    for iter in 1..=cfg.iterations {
        let segment = (iter - 1) % cfg.segments_per_file;
        if segment == 0 {
            slots.clear();
            for _ in 0..b {
                if order.is_empty() {
                    order = (0..data.train.len()).collect();
                    order.shuffle(&mut order_rng);
                    order.reverse();
                }
                let idx = order.pop().expect("refilled");
                let mut rng = indexed_substream(cfg.seed, "file", next_file);
                next_file += 1;
                let sigma = draw_sigma(cfg, &mut rng);
                let frames = prepare(&data.train[idx], &bank, target, sigma, &mut rng)?;
                slots.push(Slot { frames, sigma });
            }
            prefix = Tensor::zeros(&[b, l, c]);
            h0 = Tensor::zeros(&[b, s]);
        }
        let mut x = Vec::with_capacity(b * seg * c);
        for slot in &slots {
            let n = slot.frames.frames();
            for k in 0..seg {
                // Items shorter than the schedule wrap around.
                let f = (segment * seg + k) % n;
                x.extend(slot.frames.frame(f).iter().map(|&v| T::from_f64_lossy(v)));
            }
        }
        let sigmas: Vec<NoiseLevelDb> = slots.iter().map(|s| s.sigma).collect();
        let batch = Batch { x: Tensor::new(vec![b, seg, c], x).map_err(ModelError::from)?, prefix, h0, sigmas };
        let lr = cosine_lr(iter, cfg)?;
        let out = match model.evaluate(&batch, Wrt::Params) {
            Ok(o) if o.log_prob.is_finite() => o,
            Ok(_) | Err(ModelError::Graph(crate::diffgraph::GraphError::NonFinite(..))) => {
                return Err(TrainError::NonFinite { iter, lr, sigmas: batch.sigmas.iter().map(|s| s.db()).collect() })
            }
            Err(e) => return Err(e.into()),
        };
        let coeffs = (b * seg * c) as f64;
        let nll = -out.log_prob / coeffs;
        window.0 += nll;
        window.1 += 1;

        // Loss is the mean NLL, so gradients are -∇log p / coeffs.
        let scale = T::from_f64_lossy(-1.0 / coeffs);
        let mut grads = out.param_grads.expect("requested parameter gradients");
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.values().flat_map(|g| g.data()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            if norm > clip {
                let k = T::from_f64_lossy(clip / norm);
                grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v = *v * k));
            }
        }
        let mut params = model.params().tensors.clone();
        adam.update(&mut params, &grads, lr);
        model.set_tensors(params)?;
        prefix = out.final_context;
        h0 = out.final_state;

        let validate_now = (cfg.val_every > 0 && iter % cfg.val_every == 0) || iter == cfg.iterations;
        if validate_now || iter % log_every == 0 {
            let val_nll = if validate_now { Some(validation.nll(&model)?) } else { None };
            let rec = TrainRecord { iter, lr, train_nll: Some(window.0 / window.1 as f64), val_nll };
            window = (0.0, 0);
            if let Some(v) = val_nll {
                if v < best_val_nll {
                    best_val_nll = v;
                    best = model.to_checkpoint();
                    sink.best(&best, v)?;
                }
            }
            sink.record(&rec)?;
            records.push(rec);
        }
    }
    Ok(TrainOutcome { best, best_val_nll, initial_val_nll, final_checkpoint: model.to_checkpoint(), records })
}
