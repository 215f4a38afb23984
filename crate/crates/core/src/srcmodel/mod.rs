//! Noise-level-conditioned autoregressive subband source model.
//!
//! The model factorises a noisy subband sequence frame by frame,
//! `p(X̃ | σ) = Π_n p(x̃_n | x̃_{n-L..n-1}, state, σ)`, with all channels of a
//! frame conditionally independent logistics. Per frame:
//!
//! ```text
//! context (L x C) ──conv──► + cond(σ) ──GRU──► MLP ──► [μ (C) | raw s (C)]
//! σ ──RFF──► MLP ──► cond(σ)                         s = softplus(raw) + ε
//! ```
//!
//! Teacher-forced evaluation (log-probability, score, training gradients)
//! runs on a [`Graph`]. Step-by-step generation uses [`SourceModel::predict_frame`],
//! a direct implementation of the same network.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointError, StoredTensor, TensorData};
pub use config::{ConfigError, ModelConfig, NoiseLevelDb, NOISE_CEIL_DB, NOISE_FLOOR_DB};

use crate::diffgraph::{Feed, Graph, GraphError, NodeId, Real, Tensor};
use crate::subband::SubbandFrames;

/// Added to the softplus output so scales stay strictly positive.
pub const SCALE_EPS: f64 = 1e-6;
/// Standard deviation of the random Fourier feature frequencies.
pub const RFF_SCALE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Per-channel logistic parameters of one predicted frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFrameParams {
    pub mu: Vec<f64>,
    pub s: Vec<f64>,
}

impl LogisticFrameParams {
    pub fn log_density(&self, frame: &[f64]) -> f64 {
        frame
            .iter()
            .zip(self.mu.iter().zip(&self.s))
            .map(|(&x, (&mu, &s))| crate::diffgraph::logistic_log_density(x, mu, s))
            .sum()
    }

    /// Inverse-CDF sample: `μ + s (ln u - ln(1 - u))` per channel.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.s)
            .map(|(&mu, &s)| {
                let u: f64 = rng.sample(Open01);
                logistic_quantile(mu, s, u)
            })
            .collect()
    }
}

pub fn logistic_quantile(mu: f64, s: f64, u: f64) -> f64 {
    mu + s * (u.ln() - (1.0 - u).ln())
}

/// Named parameter tensors plus the fixed noise-embedding frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Real> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub rff_freqs: Vec<f64>,
}

impl<T: Real> ModelParams<T> {
    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[name]
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Teacher-forced batch: `x[B, N, C]` with the `L` frames before it and the
/// recurrent state entering the first frame.
#[derive(Debug, Clone)]
pub struct Batch<T: Real> {
    pub x: Tensor<T>,
    pub prefix: Tensor<T>,
    pub h0: Tensor<T>,
    pub sigmas: Vec<NoiseLevelDb>,
}

impl<T: Real> Batch<T> {
    /// Fresh sequences: zero context and zero state.
    pub fn from_sequences(cfg: &ModelConfig, seqs: &[&[f64]], frames: usize, sigmas: Vec<NoiseLevelDb>) -> Result<Self> {
        let c = cfg.channels;
        let b = seqs.len();
        let mut x = Vec::with_capacity(b * frames * c);
        for s in seqs {
            if s.len() != frames * c {
                return Err(ModelError::Shape(format!("sequence of {} values, expected {}", s.len(), frames * c)));
            }
            x.extend(s.iter().map(|&v| T::from_f64_lossy(v)));
        }
        Ok(Self {
            x: Tensor::new(vec![b, frames, c], x)?,
            prefix: Tensor::zeros(&[b, cfg.context_frames, c]),
            h0: Tensor::zeros(&[b, cfg.recurrent_state_dim]),
            sigmas,
        })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What [`SourceModel::evaluate`] differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    Nothing,
    Input,
    Params,
}

#[derive(Debug, Clone)]
pub struct BatchOutput<T: Real> {
    /// Sum of log densities over the batch.
    pub log_prob: f64,
    /// `∂ log_prob / ∂ x`, shaped like `x`.
    pub input_grad: Option<Tensor<T>>,
    pub param_grads: Option<BTreeMap<String, Tensor<T>>>,
    /// Recurrent state after the last frame, `[B, S]`.
    pub final_state: Tensor<T>,
    /// Last `L` frames of context (prefix included), `[B, L, C]`.
    pub final_context: Tensor<T>,
}

struct GraphNodes {
    log_prob: NodeId,
    states: NodeId,
}

/// A source model at precision `T`.
pub struct SourceModel<T: Real> {
    config: ModelConfig,
    params: ModelParams<T>,
    graph: Graph,
    nodes: GraphNodes,
}

impl<T: Real> std::fmt::Debug for SourceModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SourceModel")
            .field("config", &self.config)
            .field("params", &self.params.count())
            .field("dtype", &T::NAME)
            .finish()
    }
}

impl<T: Real> Clone for SourceModel<T> {
    fn clone(&self) -> Self {
        Self::from_params(self.config.clone(), self.params.clone()).expect("valid model")
    }
}

fn mlp_dims(input: usize, hidden: usize, output: usize, layers: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|i| {
            let fan_in = if i == 0 { input } else { hidden };
            let fan_out = if i + 1 == layers { output } else { hidden };
            (fan_in, fan_out)
        })
        .collect()
}

/// Parameter names and shapes implied by `cfg`.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (c, h, s, l) = (cfg.channels, cfg.hidden_dim, cfg.recurrent_state_dim, cfg.context_frames);
    let mut shapes = Vec::new();
    for (i, (fi, fo)) in mlp_dims(cfg.rff_dim, h, h, cfg.mlp_layers).into_iter().enumerate() {
        shapes.push((format!("cond.{i}.w"), vec![fi, fo]));
        shapes.push((format!("cond.{i}.b"), vec![fo]));
    }
    shapes.push(("conv.w".into(), vec![l * c, h]));
    shapes.push(("conv.b".into(), vec![h]));
    shapes.push(("gru.w_ih".into(), vec![h, 3 * s]));
    shapes.push(("gru.w_hh".into(), vec![s, 3 * s]));
    shapes.push(("gru.b_ih".into(), vec![3 * s]));
    shapes.push(("gru.b_hh".into(), vec![3 * s]));
    for (i, (fi, fo)) in mlp_dims(s, h, 2 * c, cfg.mlp_layers).into_iter().enumerate() {
        shapes.push((format!("pred.{i}.w"), vec![fi, fo]));
        shapes.push((format!("pred.{i}.b"), vec![fo]));
    }
    shapes
}

fn build_graph(cfg: &ModelConfig) -> (Graph, GraphNodes) {
    let mut g = Graph::new();
    let c = cfg.channels;

    let mut cond = g.input("rff");
    for i in 0..cfg.mlp_layers {
        let (w, b) = (g.input(&format!("cond.{i}.w")), g.input(&format!("cond.{i}.b")));
        cond = g.affine(cond, w, b);
        if i + 1 < cfg.mlp_layers {
            cond = g.relu(cond);
        }
    }

    let x = g.input("x");
    let prefix = g.input("prefix");
    let (cw, cb) = (g.input("conv.w"), g.input("conv.b"));
    let conv = g.causal_conv(x, prefix, cw, cb);
    let gru_in = g.add_frames(conv, cond);
    let h0 = g.input("h0");
    let ids: Vec<NodeId> = ["gru.w_ih", "gru.w_hh", "gru.b_ih", "gru.b_hh"].iter().map(|n| g.input(n)).collect();
    let states = g.gru(gru_in, h0, ids[0], ids[1], ids[2], ids[3]);

    let mut out = states;
    for i in 0..cfg.mlp_layers {
        let (w, b) = (g.input(&format!("pred.{i}.w")), g.input(&format!("pred.{i}.b")));
        out = g.affine(out, w, b);
        if i + 1 < cfg.mlp_layers {
            out = g.relu(out);
        }
    }
    let mu = g.slice(out, 0, c);
    let raw = g.slice(out, c, c);
    let sp = g.softplus(raw);
    let s = g.offset(sp, SCALE_EPS);
    let density = g.logistic_log_density(x, mu, s);
    let log_prob = g.sum(density);
    g.set_output("log_prob", log_prob);
    g.set_output("frame_params", out);
    g.set_output("states", states);
    (g, GraphNodes { log_prob, states })
}

/// `y = x · w + b`, optionally rectified.
fn dense<T: Real>(x: &[T], w: &Tensor<T>, b: &Tensor<T>, relu: bool) -> Vec<T> {
    let fan_out = w.shape()[1];
    let mut y = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == T::zero() {
            continue;
        }
        let row = &w.data()[i * fan_out..(i + 1) * fan_out];
        for (o, &wv) in y.iter_mut().zip(row) {
            *o = *o + xi * wv;
        }
    }
    if relu {
        y.iter_mut().for_each(|v| *v = v.max(T::zero()));
    }
    y
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<T: Real> SourceModel<T> {
    /// Freshly initialised model; all randomness comes from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::substream(seed, "model-init");
        let s = config.recurrent_state_dim;
        let mut tensors = BTreeMap::new();
        let last_pred = format!("pred.{}.", config.mlp_layers - 1);
        for (name, shape) in parameter_shapes(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".b") {
                if name.starts_with(&last_pred) {
                    // Initial scales of about 0.1 for every channel.
                    let raw_scale = (0.1f64.exp() - 1.0).ln();
                    (0..n).map(|k| if k < config.channels { 0.0 } else { raw_scale }).collect()
                } else {
                    vec![0.0; n]
                }
            } else if name.starts_with("gru.") {
                let bound = 1.0 / (s as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let gain = if name.starts_with(&last_pred) { 0.1 } else { 1.0 };
                (0..n).map(|_| gain * rng.random_range(-bound..bound)).collect()
            };
            tensors.insert(name, Tensor::from_f64(&shape, &data)?);
        }
        // GRU biases start at zero like the rest.
        let rff_freqs = (0..config.rff_dim / 2)
            .map(|_| RFF_SCALE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::from_params(config, ModelParams { tensors, rff_freqs })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        for (name, shape) in parameter_shapes(&config) {
            match params.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::Shape(format!("{name}: expected {shape:?}, found {:?}", t.shape())))
                }
                None => return Err(ModelError::Shape(format!("missing parameter {name}"))),
            }
        }
        if params.rff_freqs.len() * 2 != config.rff_dim {
            return Err(ModelError::Shape(format!(
                "{} RFF frequencies for rff_dim {}",
                params.rff_freqs.len(),
                config.rff_dim
            )));
        }
        let (graph, nodes) = build_graph(&config);
        Ok(Self { config, params, graph, nodes })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    /// Replaces parameter tensors (same names and shapes); RFF frequencies stay fixed.
    pub fn set_tensors(&mut self, tensors: BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, t) in &tensors {
            match self.params.tensors.get(name) {
                Some(old) if old.shape() == t.shape() => {}
                _ => return Err(ModelError::Shape(format!("cannot replace parameter {name}"))),
            }
        }
        self.params.tensors = tensors;
        Ok(())
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// `[sin(2π f_k σ̂)]_k ++ [cos(2π f_k σ̂)]_k` with `σ̂ = (dB + 90) / 90`.
    pub fn rff_embed(&self, sigma: NoiseLevelDb) -> Vec<f64> {
        let t = sigma.normalized();
        let phases: Vec<f64> = self.params.rff_freqs.iter().map(|f| 2.0 * PI * f * t).collect();
        phases.iter().map(|p| p.sin()).chain(phases.iter().map(|p| p.cos())).collect()
    }

    /// Conditioning vector: the conditioning MLP applied to the embedding.
    pub fn condition(&self, sigma: NoiseLevelDb) -> Vec<f64> {
        let mut h: Vec<T> = self.rff_embed(sigma).into_iter().map(T::from_f64_lossy).collect();
        for i in 0..self.config.mlp_layers {
            let last = i + 1 == self.config.mlp_layers;
            h = dense(&h, self.params.get(&format!("cond.{i}.w")), self.params.get(&format!("cond.{i}.b")), !last);
        }
        h.into_iter().map(T::to_f64_lossy).collect()
    }

    /// One prediction step. `context` holds the previous `L` frames, oldest
    /// first (zeros before the sequence start).
    pub fn predict_frame(&self, context: &[f64], state: &[f64], cond: &[f64]) -> Result<(LogisticFrameParams, Vec<f64>)> {
        let cfg = &self.config;
        let (c, h, s) = (cfg.channels, cfg.hidden_dim, cfg.recurrent_state_dim);
        if context.len() != cfg.context_frames * c || state.len() != s || cond.len() != h {
            return Err(ModelError::Shape(format!(
                "predict_frame: context {}, state {}, cond {} (expected {}, {s}, {h})",
                context.len(),
                state.len(),
                cond.len(),
                cfg.context_frames * c
            )));
        }
        let p = &self.params;
        let to_t = |v: &[f64]| -> Vec<T> { v.iter().map(|&x| T::from_f64_lossy(x)).collect() };
        let mut input = dense(&to_t(context), p.get("conv.w"), p.get("conv.b"), false);
        for (a, &b) in input.iter_mut().zip(cond) {
            *a = *a + T::from_f64_lossy(b);
        }
        let gi = dense(&input, p.get("gru.w_ih"), p.get("gru.b_ih"), false);
        let prev = to_t(state);
        let gh = dense(&prev, p.get("gru.w_hh"), p.get("gru.b_hh"), false);
        let mut next = Vec::with_capacity(s);
        for j in 0..s {
            let f = |v: T| v.to_f64_lossy();
            let r = sigmoid(f(gi[j]) + f(gh[j]));
            let z = sigmoid(f(gi[s + j]) + f(gh[s + j]));
            let n = (f(gi[2 * s + j]) + r * f(gh[2 * s + j])).tanh();
            next.push((1.0 - z) * n + z * f(prev[j]));
        }
        let mut out = to_t(&next);
        for i in 0..cfg.mlp_layers {
            let last = i + 1 == cfg.mlp_layers;
            out = dense(&out, p.get(&format!("pred.{i}.w")), p.get(&format!("pred.{i}.b")), !last);
        }
        let mu = out[..c].iter().map(|v| v.to_f64_lossy()).collect();
        let scale = out[c..].iter().map(|v| softplus(v.to_f64_lossy()) + SCALE_EPS).collect();
        Ok((LogisticFrameParams { mu, s: scale }, next))
    }

    /// Teacher-forced evaluation of a batch, with optional gradients.
    pub fn evaluate(&self, batch: &Batch<T>, wrt: Wrt) -> Result<BatchOutput<T>> {
        let cfg = &self.config;
        let b = batch.len();
        let (l, c) = (cfg.context_frames, cfg.channels);
        if batch.x.shape().len() != 3 || batch.x.shape()[2] != c || batch.sigmas.len() != b {
            return Err(ModelError::Shape(format!(
                "batch x {:?} with {} noise levels for {c} channels",
                batch.x.shape(),
                batch.sigmas.len()
            )));
        }
        if batch.prefix.shape() != [b, l, c] || batch.h0.shape() != [b, cfg.recurrent_state_dim] {
            return Err(ModelError::Shape(format!(
                "prefix {:?} / state {:?} do not match batch of {b}",
                batch.prefix.shape(),
                batch.h0.shape()
            )));
        }
        let n = batch.x.shape()[1];
        let mut rff = Vec::with_capacity(b * cfg.rff_dim);
        for &sigma in &batch.sigmas {
            rff.extend(self.rff_embed(sigma).into_iter().map(T::from_f64_lossy));
        }
        let rff = Tensor::new(vec![b, cfg.rff_dim], rff)?;
        let mut feed: Feed<'_, T> = self.params.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        feed.insert("rff", &rff);
        feed.insert("x", &batch.x);
        feed.insert("prefix", &batch.prefix);
        feed.insert("h0", &batch.h0);

        let eval = self.graph.forward(&feed)?;
        let log_prob = eval.value(self.nodes.log_prob).item().to_f64_lossy();
        let (input_grad, param_grads) = match wrt {
            Wrt::Nothing => (None, None),
            Wrt::Input => {
                let mut g = self.graph.backward(&eval, self.nodes.log_prob, &["x"])?;
                (g.remove("x"), None)
            }
            Wrt::Params => {
                let names: Vec<&str> = self.params.tensors.keys().map(String::as_str).collect();
                let g = self.graph.backward(&eval, self.nodes.log_prob, &names)?;
                (None, Some(g.into_iter().collect()))
            }
        };
        let states = eval.value(self.nodes.states);
        let s = cfg.recurrent_state_dim;
        let mut final_state = Vec::with_capacity(b * s);
        let mut final_context = Vec::with_capacity(b * l * c);
        for bi in 0..b {
            if n > 0 {
                final_state.extend_from_slice(&states.data()[((bi + 1) * n - 1) * s..(bi + 1) * n * s]);
            } else {
                final_state.extend_from_slice(&batch.h0.data()[bi * s..(bi + 1) * s]);
            }
            // Context after the batch: the last L frames of prefix ++ x.
            for k in 0..l {
                let src = n as isize - l as isize + k as isize;
                let frame = if src >= 0 {
                    &batch.x.data()[(bi * n + src as usize) * c..(bi * n + src as usize + 1) * c]
                } else {
                    let p = (l as isize + src) as usize;
                    &batch.prefix.data()[(bi * l + p) * c..(bi * l + p + 1) * c]
                };
                final_context.extend_from_slice(frame);
            }
        }
        Ok(BatchOutput {
            log_prob,
            input_grad,
            param_grads,
            final_state: Tensor::new(vec![b, s], final_state)?,
            final_context: Tensor::new(vec![b, l, c], final_context)?,
        })
    }

    fn check_frames(&self, x: &SubbandFrames) -> Result<()> {
        if x.channels() != self.config.channels {
            return Err(ModelError::Shape(format!(
                "{} channels, model expects {}",
                x.channels(),
                self.config.channels
            )));
        }
        Ok(())
    }

    /// `log p(X̃ | σ)` summed over frames and channels, from zero context and state.
    pub fn log_prob(&self, x: &SubbandFrames, sigma: NoiseLevelDb) -> Result<f64> {
        self.check_frames(x)?;
        let batch = Batch::from_sequences(&self.config, &[x.data()], x.frames(), vec![sigma])?;
        Ok(self.evaluate(&batch, Wrt::Nothing)?.log_prob)
    }

    /// `∇_X̃ log p(X̃ | σ)`, including paths through later frames' contexts
    /// and the recurrent state.
    pub fn score(&self, x: &SubbandFrames, sigma: NoiseLevelDb) -> Result<SubbandFrames> {
        Ok(self.score_batch(&[x], sigma)?.pop().expect("one score per input"))
    }

    /// Scores of several equally shaped sequences at one noise level.
    pub fn score_batch(&self, xs: &[&SubbandFrames], sigma: NoiseLevelDb) -> Result<Vec<SubbandFrames>> {
        let Some(first) = xs.first() else { return Ok(Vec::new()) };
        for x in xs {
            self.check_frames(x)?;
            if !x.same_shape(first) {
                return Err(ModelError::Shape("score_batch needs equally shaped inputs".into()));
            }
        }
        let seqs: Vec<&[f64]> = xs.iter().map(|x| x.data()).collect();
        let batch = Batch::from_sequences(&self.config, &seqs, first.frames(), vec![sigma; xs.len()])?;
        let grad = self.evaluate(&batch, Wrt::Input)?.input_grad.expect("requested input gradient");
        let per = first.frames() * first.channels();
        Ok(xs
            .iter()
            .zip(grad.data().chunks(per))
            .map(|(x, g)| x.with_data(g.iter().map(|v| v.to_f64_lossy()).collect()))
            .collect())
    }

    /// Ancestral sampling of `n_frames` frames at noise level `sigma`.
    pub fn generate(&self, n_frames: usize, sigma: NoiseLevelDb, seed: u64) -> Result<SubbandFrames> {
        if n_frames == 0 {
            return Err(ModelError::Shape("n_frames must be >= 1".into()));
        }
        let cfg = &self.config;
        let (l, c) = (cfg.context_frames, cfg.channels);
        let cond = self.condition(sigma);
        let mut rng = crate::rng::substream(seed, "generate");
        let mut state = vec![0.0; cfg.recurrent_state_dim];
        let mut context = vec![0.0; l * c];
        let mut out = Vec::with_capacity(n_frames * c);
        for _ in 0..n_frames {
            let (params, next) = self.predict_frame(&context, &state, &cond)?;
            let frame = params.sample(&mut rng);
            if let Some(i) = frame.iter().position(|v| !v.is_finite()) {
                return Err(ModelError::Graph(GraphError::NonFinite(i, "generate")));
            }
            context.drain(..c);
            context.extend_from_slice(&frame);
            out.extend_from_slice(&frame);
            state = next;
        }
        let mut frames = SubbandFrames::zeros(n_frames, c);
        frames.data_mut().copy_from_slice(&out);
        frames.sample_rate = cfg.sample_rate;
        Ok(frames)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(self)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.to_model()
    }
}
