//! Static-graph reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of operation records over dense
//! tensors. Node ids always refer to earlier nodes, so the list is its own
//! topological order. [`Graph::forward`] evaluates every node against a
//! [`Feed`] of named inputs; [`Graph::gradient`] runs the reverse sweep from a
//! scalar node and returns gradients for the requested inputs.
//!
//! The primitives are the ones the source model needs: affine maps, a causal
//! convolution over the frame axis, a gated recurrent cell with full
//! backpropagation through time, a handful of elementwise functions, and the
//! logistic log-density.

mod kernels;
mod tensor;

use std::borrow::Cow;
use std::collections::HashMap;

use thiserror::Error;

pub use kernels::{logistic_dlog_dx, logistic_log_density};
pub use tensor::{Real, Tensor};

use kernels::{add_rows, ln_cosh, mm, mm_at, mm_bt, sigmoid, softplus, sum_rows_into};

pub type NodeId = usize;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing input '{0}'")]
    MissingInput(String),
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("gradient requested from non-scalar node {0} with shape {1:?}")]
    NonScalarOutput(NodeId, Vec<usize>),
    #[error("input '{0}' does not reach the output")]
    Unreachable(String),
    #[error("no output named '{0}'")]
    UnknownOutput(String),
    #[error("non-finite value produced by node {0} ({1})")]
    NonFinite(NodeId, &'static str),
}

type Result<T> = std::result::Result<T, GraphError>;

/// Operation kinds. Input order for each kind is documented on the builder
/// method that creates it.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input(String),
    Affine,
    CausalConv,
    Gru,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Sin,
    Cos,
    Add,
    Mul,
    AddFrames,
    Scale(f64),
    Offset(f64),
    Concat,
    Slice { start: usize, len: usize },
    LogisticLogDensity,
    Sum,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Affine => "affine",
            Op::CausalConv => "causal_conv",
            Op::Gru => "gru",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::AddFrames => "add_frames",
            Op::Scale(_) => "scale",
            Op::Offset(_) => "offset",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::LogisticLogDensity => "logistic_log_density",
            Op::Sum => "sum",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

/// Named input tensors for one evaluation.
pub type Feed<'a, T> = HashMap<&'a str, &'a Tensor<T>>;

/// Values of every node after a forward pass.
#[derive(Debug)]
pub struct Evaluation<'a, T: Real> {
    values: Vec<Cow<'a, Tensor<T>>>,
    /// Per-node scratch saved for the backward pass (gate activations, im2col buffers).
    aux: Vec<Vec<T>>,
}

impl<'a, T: Real> Evaluation<'a, T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(GraphError::UnknownNode(bad));
        }
        self.nodes.push(Node { op, inputs: inputs.to_vec() });
        Ok(id)
    }

    fn add(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        self.push(op, inputs).expect("builder inputs come from this graph")
    }

    /// Named input node; repeated names resolve to the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        match self.input_id(name) {
            Some(id) => id,
            None => self.add(Op::Input(name.to_string()), &[]),
        }
    }

    /// `x[..., in] · w[in, out] + b[out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.add(Op::Affine, &[x, w, b])
    }

    /// Causal convolution over frames. `x[B, N, C]`, `prefix[B, L, C]` holds
    /// the `L` frames preceding `x`, `w[L*C, H]` (oldest frame first), `b[H]`.
    /// Output frame `n` depends on frames `n-L ..= n-1` only.
    pub fn causal_conv(&mut self, x: NodeId, prefix: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.add(Op::CausalConv, &[x, prefix, w, b])
    }

    /// Gated recurrent unit over `x[B, N, I]` from state `h0[B, H]` with
    /// `w_ih[I, 3H]`, `w_hh[H, 3H]`, `b_ih[3H]`, `b_hh[3H]` (gate order r, z, n).
    /// Output is the state sequence `[B, N, H]`.
    pub fn gru(&mut self, x: NodeId, h0: NodeId, w_ih: NodeId, w_hh: NodeId, b_ih: NodeId, b_hh: NodeId) -> NodeId {
        self.add(Op::Gru, &[x, h0, w_ih, w_hh, b_ih, b_hh])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Relu, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Tanh, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Sigmoid, &[x])
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Softplus, &[x])
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Sin, &[x])
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Cos, &[x])
    }

    pub fn add_nodes(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.add(Op::Mul, &[a, b])
    }

    /// `a[B, N, H] + c[B, H]` broadcast over frames.
    pub fn add_frames(&mut self, a: NodeId, c: NodeId) -> NodeId {
        self.add(Op::AddFrames, &[a, c])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.add(Op::Scale(factor), &[x])
    }

    pub fn offset(&mut self, x: NodeId, shift: f64) -> NodeId {
        self.add(Op::Offset(shift), &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        self.add(Op::Concat, parts)
    }

    /// `x[..., start..start+len]`.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        self.add(Op::Slice { start, len }, &[x])
    }

    /// Elementwise logistic log-density of `x` under location `mu`, scale `s`.
    pub fn logistic_log_density(&mut self, x: NodeId, mu: NodeId, s: NodeId) -> NodeId {
        self.add(Op::LogisticLogDensity, &[x, mu, s])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.add(Op::Sum, &[x])
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.retain(|(n, _)| n != name);
        self.outputs.push((name.to_string(), id));
    }

    pub fn output(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
            .ok_or_else(|| GraphError::UnknownOutput(name.to_string()))
    }

    fn input_id(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| matches!(&n.op, Op::Input(x) if x == name))
    }

    /// Evaluates every node. Deterministic for identical feeds.
    pub fn forward<'a, T: Real>(&self, feed: &Feed<'a, T>) -> Result<Evaluation<'a, T>> {
        let mut values: Vec<Cow<'a, Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let (value, scratch) = match &node.op {
                Op::Input(name) => {
                    let t = feed.get(name.as_str()).ok_or_else(|| GraphError::MissingInput(name.clone()))?;
                    (Cow::Borrowed(*t), Vec::new())
                }
                op => {
                    let args: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| values[i].as_ref()).collect();
                    let (t, s) = forward_op(op, &args)?;
                    if !t.is_finite() {
                        return Err(GraphError::NonFinite(id, op.name()));
                    }
                    (Cow::Owned(t), s)
                }
            };
            values.push(value);
            aux.push(scratch);
        }
        Ok(Evaluation { values, aux })
    }

    /// Forward pass followed by [`backward`](Self::backward).
    pub fn gradient<T: Real>(
        &self,
        feed: &Feed<'_, T>,
        output: NodeId,
        wrt: &[&str],
    ) -> Result<(T, HashMap<String, Tensor<T>>)> {
        let eval = self.forward(feed)?;
        let grads = self.backward(&eval, output, wrt)?;
        Ok((eval.value(output).item(), grads))
    }

    /// Reverse sweep from the scalar node `output`, returning `∂output/∂input`
    /// for each named input in `wrt`.
    pub fn backward<T: Real>(
        &self,
        eval: &Evaluation<'_, T>,
        output: NodeId,
        wrt: &[&str],
    ) -> Result<HashMap<String, Tensor<T>>> {
        if output >= self.nodes.len() {
            return Err(GraphError::UnknownNode(output));
        }
        let out_shape = eval.values[output].shape();
        if eval.values[output].len() != 1 {
            return Err(GraphError::NonScalarOutput(output, out_shape.to_vec()));
        }
        let n = self.nodes.len();
        // Nodes downstream of a requested input; only these need gradients.
        let mut live = vec![false; n];
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = self.input_id(name).ok_or_else(|| GraphError::MissingInput(name.to_string()))?;
            live[id] = true;
            targets.push((name.to_string(), id));
        }
        for id in 0..n {
            if !live[id] && self.nodes[id].inputs.iter().any(|&i| live[i]) {
                live[id] = true;
            }
        }
        // Nodes upstream of the output.
        let mut feeds_output = vec![false; n];
        feeds_output[output] = true;
        for id in (0..=output).rev() {
            if feeds_output[id] {
                for &i in &self.nodes[id].inputs {
                    feeds_output[i] = true;
                }
            }
        }
        for (name, id) in &targets {
            if !feeds_output[*id] {
                return Err(GraphError::Unreachable(name.clone()));
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        grads[output] = Some(Tensor::with_shape(out_shape.to_vec(), vec![T::one()]));
        for id in (0..=output).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Input(_)) || !live[id] || !feeds_output[id] {
                continue;
            }
            let Some(upstream) = grads[id].take() else { continue };
            let args: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| eval.values[i].as_ref()).collect();
            let need: Vec<bool> = node.inputs.iter().map(|&i| live[i]).collect();
            let input_grads = backward_op(&node.op, &args, &eval.values[id], &eval.aux[id], &upstream, &need)?;
            for ((&inp, g), &needed) in node.inputs.iter().zip(input_grads).zip(&need) {
                if !needed {
                    continue;
                }
                if let Some(g) = g {
                    match &mut grads[inp] {
                        Some(acc) => acc.add_assign(g.data()),
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        let mut result = HashMap::with_capacity(targets.len());
        for (name, id) in targets {
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(eval.values[id].shape()));
            result.insert(name, g);
        }
        Ok(result)
    }
}

fn shape_err<V>(msg: String) -> Result<V> {
    Err(GraphError::Shape(msg))
}

fn same_shape<T: Real>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn map<T: Real>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::with_shape(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn dims3<T: Real>(op: &str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => shape_err(format!("{op}: expected rank-3 tensor, got {s:?}")),
    }
}

fn dims2<T: Real>(op: &str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => shape_err(format!("{op}: expected rank-2 tensor, got {s:?}")),
    }
}

fn dims1<T: Real>(op: &str, t: &Tensor<T>) -> Result<usize> {
    match *t.shape() {
        [a] => Ok(a),
        ref s => shape_err(format!("{op}: expected rank-1 tensor, got {s:?}")),
    }
}

/// Builds the `[B*N, L*C]` context matrix of a causal convolution.
fn im2col<T: Real>(x: &[T], prefix: &[T], b: usize, n: usize, c: usize, l: usize) -> Vec<T> {
    let width = l * c;
    let mut cols = vec![T::zero(); b * n * width];
    for bi in 0..b {
        for t in 0..n {
            let row = &mut cols[(bi * n + t) * width..(bi * n + t + 1) * width];
            for k in 0..l {
                // Frame t - l + k relative to the start of x.
                let src = t as isize - l as isize + k as isize;
                let frame = if src >= 0 {
                    &x[(bi * n + src as usize) * c..(bi * n + src as usize + 1) * c]
                } else {
                    let p = (l as isize + src) as usize;
                    &prefix[(bi * l + p) * c..(bi * l + p + 1) * c]
                };
                row[k * c..(k + 1) * c].copy_from_slice(frame);
            }
        }
    }
    cols
}

fn forward_op<T: Real>(op: &Op, a: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    let none = Vec::new();
    Ok(match op {
        Op::Input(_) => unreachable!("inputs are resolved from the feed"),
        Op::Affine => {
            let (x, w, bias) = (a[0], a[1], a[2]);
            let (fan_in, fan_out) = dims2("affine weight", w)?;
            if x.last_dim() != fan_in || dims1("affine bias", bias)? != fan_out || x.shape().is_empty() {
                return shape_err(format!(
                    "affine: x {:?}, w {:?}, b {:?}",
                    x.shape(),
                    w.shape(),
                    bias.shape()
                ));
            }
            let rows = x.len() / fan_in;
            let mut out = vec![T::zero(); rows * fan_out];
            mm(x.data(), w.data(), rows, fan_in, fan_out, &mut out, false);
            add_rows(&mut out, bias.data());
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = fan_out;
            (Tensor::with_shape(shape, out), none)
        }
        Op::CausalConv => {
            let (x, prefix, w, bias) = (a[0], a[1], a[2], a[3]);
            let (b, n, c) = dims3("conv x", x)?;
            let (pb, l, pc) = dims3("conv prefix", prefix)?;
            let (width, h) = dims2("conv weight", w)?;
            if pb != b || pc != c || width != l * c || dims1("conv bias", bias)? != h {
                return shape_err(format!(
                    "causal_conv: x {:?}, prefix {:?}, w {:?}, b {:?}",
                    x.shape(),
                    prefix.shape(),
                    w.shape(),
                    bias.shape()
                ));
            }
            let cols = im2col(x.data(), prefix.data(), b, n, c, l);
            let mut out = vec![T::zero(); b * n * h];
            mm(&cols, w.data(), b * n, width, h, &mut out, false);
            add_rows(&mut out, bias.data());
            (Tensor::with_shape(vec![b, n, h], out), cols)
        }
        Op::Gru => gru_forward(a)?,
        Op::Relu => (map(a[0], |v| v.max(T::zero())), none),
        Op::Tanh => (map(a[0], |v| v.tanh()), none),
        Op::Sigmoid => (map(a[0], sigmoid), none),
        Op::Softplus => (map(a[0], softplus), none),
        Op::Sin => (map(a[0], |v| v.sin()), none),
        Op::Cos => (map(a[0], |v| v.cos()), none),
        Op::Add | Op::Mul => {
            same_shape(op.name(), a[0], a[1])?;
            let f = |x: T, y: T| if *op == Op::Add { x + y } else { x * y };
            let data = a[0].data().iter().zip(a[1].data()).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::with_shape(a[0].shape().to_vec(), data), none)
        }
        Op::AddFrames => {
            let (b, n, h) = dims3("add_frames", a[0])?;
            if a[1].shape() != [b, h] {
                return shape_err(format!("add_frames: {:?} + {:?}", a[0].shape(), a[1].shape()));
            }
            let mut out = a[0].data().to_vec();
            for bi in 0..b {
                add_rows(&mut out[bi * n * h..(bi + 1) * n * h], &a[1].data()[bi * h..(bi + 1) * h]);
            }
            (Tensor::with_shape(vec![b, n, h], out), none)
        }
        Op::Scale(f) => {
            let f = T::from_f64_lossy(*f);
            (map(a[0], |v| v * f), none)
        }
        Op::Offset(s) => {
            let s = T::from_f64_lossy(*s);
            (map(a[0], |v| v + s), none)
        }
        Op::Concat => {
            if a.is_empty() {
                return shape_err("concat: no inputs".into());
            }
            let lead = &a[0].shape()[..a[0].shape().len().saturating_sub(1)];
            let rows: usize = lead.iter().product();
            let mut total = 0;
            for t in a {
                if t.shape().is_empty() || &t.shape()[..t.shape().len() - 1] != lead {
                    return shape_err(format!("concat: leading dims differ ({:?})", t.shape()));
                }
                total += t.last_dim();
            }
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in a {
                    let d = t.last_dim();
                    out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor::with_shape(shape, out), none)
        }
        Op::Slice { start, len } => {
            let d = a[0].last_dim();
            if a[0].shape().is_empty() || start + len > d {
                return shape_err(format!("slice {start}..{} of {:?}", start + len, a[0].shape()));
            }
            let out: Vec<T> = a[0].data().chunks(d).flat_map(|row| row[*start..start + len].iter().copied()).collect();
            let mut shape = a[0].shape().to_vec();
            *shape.last_mut().unwrap() = *len;
            (Tensor::with_shape(shape, out), none)
        }
        Op::LogisticLogDensity => {
            same_shape("logistic x/mu", a[0], a[1])?;
            same_shape("logistic x/s", a[0], a[2])?;
            let two = T::one() + T::one();
            let four = two + two;
            let data = a[0]
                .data()
                .iter()
                .zip(a[1].data())
                .zip(a[2].data())
                .map(|((&x, &mu), &s)| -(four * s).ln() - two * ln_cosh((x - mu) / (two * s)))
                .collect();
            (Tensor::with_shape(a[0].shape().to_vec(), data), none)
        }
        Op::Sum => (Tensor::scalar(a[0].data().iter().copied().sum()), none),
    })
}

/// GRU forward. Scratch layout per (b, t): `[r, z, n, gh_n]`, each `H` wide.
fn gru_forward<T: Real>(a: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    let (x, h0, w_ih, w_hh, b_ih, b_hh) = (a[0], a[1], a[2], a[3], a[4], a[5]);
    let (b, n, i) = dims3("gru x", x)?;
    let (hb, h) = dims2("gru h0", h0)?;
    if hb != b
        || w_ih.shape() != [i, 3 * h]
        || w_hh.shape() != [h, 3 * h]
        || b_ih.shape() != [3 * h]
        || b_hh.shape() != [3 * h]
    {
        return shape_err(format!(
            "gru: x {:?}, h0 {:?}, w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?}",
            x.shape(),
            h0.shape(),
            w_ih.shape(),
            w_hh.shape(),
            b_ih.shape(),
            b_hh.shape()
        ));
    }
    let g = 3 * h;
    let mut gi = vec![T::zero(); b * n * g];
    mm(x.data(), w_ih.data(), b * n, i, g, &mut gi, false);
    add_rows(&mut gi, b_ih.data());
    let mut out = vec![T::zero(); b * n * h];
    let mut scratch = vec![T::zero(); b * n * 4 * h];
    let mut prev = h0.data().to_vec();
    let mut gh = vec![T::zero(); b * g];
    for t in 0..n {
        mm(&prev, w_hh.data(), b, h, g, &mut gh, false);
        add_rows(&mut gh, b_hh.data());
        for bi in 0..b {
            let gi_row = &gi[(bi * n + t) * g..(bi * n + t + 1) * g];
            let gh_row = &gh[bi * g..(bi + 1) * g];
            let s = &mut scratch[(bi * n + t) * 4 * h..(bi * n + t + 1) * 4 * h];
            for j in 0..h {
                let r = sigmoid(gi_row[j] + gh_row[j]);
                let z = sigmoid(gi_row[h + j] + gh_row[h + j]);
                let cand = (gi_row[2 * h + j] + r * gh_row[2 * h + j]).tanh();
                let hp = prev[bi * h + j];
                let hn = (T::one() - z) * cand + z * hp;
                s[j] = r;
                s[h + j] = z;
                s[2 * h + j] = cand;
                s[3 * h + j] = gh_row[2 * h + j];
                out[(bi * n + t) * h + j] = hn;
            }
        }
        for bi in 0..b {
            prev[bi * h..(bi + 1) * h].copy_from_slice(&out[(bi * n + t) * h..(bi * n + t + 1) * h]);
        }
    }
    Ok((Tensor::with_shape(vec![b, n, h], out), scratch))
}

fn gru_backward<T: Real>(a: &[&Tensor<T>], out: &Tensor<T>, scratch: &[T], dy: &[T], need: &[bool]) -> Vec<Option<Tensor<T>>> {
    let (x, h0, w_ih, w_hh) = (a[0], a[1], a[2], a[3]);
    let (b, n, i) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let h = h0.shape()[1];
    let g = 3 * h;
    let y = out.data();
    let mut d_gi = vec![T::zero(); b * n * g];
    let mut d_gh_all = vec![T::zero(); b * n * g];
    let mut dh_next = vec![T::zero(); b * h];
    let mut d_gh = vec![T::zero(); b * g];
    for t in (0..n).rev() {
        for bi in 0..b {
            let s = &scratch[(bi * n + t) * 4 * h..(bi * n + t + 1) * 4 * h];
            let row = bi * n + t;
            for j in 0..h {
                let (r, z, cand, ghn) = (s[j], s[h + j], s[2 * h + j], s[3 * h + j]);
                let hp = if t > 0 { y[(row - 1) * h + j] } else { h0.data()[bi * h + j] };
                let dh = dy[row * h + j] + dh_next[bi * h + j];
                let dcand = dh * (T::one() - z);
                let dz = dh * (hp - cand);
                let dn_pre = dcand * (T::one() - cand * cand);
                let dr_pre = dn_pre * ghn * r * (T::one() - r);
                let dz_pre = dz * z * (T::one() - z);
                d_gi[row * g + j] = dr_pre;
                d_gi[row * g + h + j] = dz_pre;
                d_gi[row * g + 2 * h + j] = dn_pre;
                d_gh[bi * g + j] = dr_pre;
                d_gh[bi * g + h + j] = dz_pre;
                d_gh[bi * g + 2 * h + j] = dn_pre * r;
                dh_next[bi * h + j] = dh * z;
            }
            d_gh_all[(bi * n + t) * g..(bi * n + t + 1) * g].copy_from_slice(&d_gh[bi * g..(bi + 1) * g]);
        }
        // dh_prev += d_gh · w_hhᵀ
        mm_bt(&d_gh, w_hh.data(), b, g, h, &mut dh_next, true);
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; 6];
    if need[0] {
        let mut dx = vec![T::zero(); b * n * i];
        mm_bt(&d_gi, w_ih.data(), b * n, g, i, &mut dx, false);
        grads[0] = Some(Tensor::with_shape(x.shape().to_vec(), dx));
    }
    if need[1] {
        grads[1] = Some(Tensor::with_shape(vec![b, h], dh_next));
    }
    if need[2] {
        let mut dw = vec![T::zero(); i * g];
        mm_at(x.data(), &d_gi, i, b * n, g, &mut dw, false);
        grads[2] = Some(Tensor::with_shape(vec![i, g], dw));
    }
    if need[3] {
        // Previous states, shifted one frame: row (b, t) holds h_{t-1}.
        let mut prev = vec![T::zero(); b * n * h];
        for bi in 0..b {
            prev[bi * n * h..bi * n * h + h].copy_from_slice(&h0.data()[bi * h..(bi + 1) * h]);
            if n > 1 {
                prev[bi * n * h + h..(bi + 1) * n * h].copy_from_slice(&y[bi * n * h..((bi + 1) * n - 1) * h]);
            }
        }
        let mut dw = vec![T::zero(); h * g];
        mm_at(&prev, &d_gh_all, h, b * n, g, &mut dw, false);
        grads[3] = Some(Tensor::with_shape(vec![h, g], dw));
    }
    if need[4] {
        let mut db = vec![T::zero(); g];
        sum_rows_into(&d_gi, &mut db);
        grads[4] = Some(Tensor::with_shape(vec![g], db));
    }
    if need[5] {
        let mut db = vec![T::zero(); g];
        sum_rows_into(&d_gh_all, &mut db);
        grads[5] = Some(Tensor::with_shape(vec![g], db));
    }
    grads
}

fn backward_op<T: Real>(
    op: &Op,
    a: &[&Tensor<T>],
    out: &Tensor<T>,
    aux: &[T],
    upstream: &Tensor<T>,
    need: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let dy = upstream.data();
    let like = |t: &Tensor<T>, data: Vec<T>| Some(Tensor::with_shape(t.shape().to_vec(), data));
    let elementwise = |f: &dyn Fn(usize) -> T| -> Vec<Option<Tensor<T>>> {
        vec![like(a[0], (0..dy.len()).map(f).collect())]
    };
    Ok(match op {
        Op::Input(_) => vec![],
        Op::Affine => {
            let (x, w) = (a[0], a[1]);
            let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
            let rows = x.len() / fan_in;
            let mut g = vec![None, None, None];
            if need[0] {
                let mut dx = vec![T::zero(); x.len()];
                mm_bt(dy, w.data(), rows, fan_out, fan_in, &mut dx, false);
                g[0] = like(x, dx);
            }
            if need[1] {
                let mut dw = vec![T::zero(); w.len()];
                mm_at(x.data(), dy, fan_in, rows, fan_out, &mut dw, false);
                g[1] = like(w, dw);
            }
            if need[2] {
                let mut db = vec![T::zero(); fan_out];
                sum_rows_into(dy, &mut db);
                g[2] = like(a[2], db);
            }
            g
        }
        Op::CausalConv => {
            let (x, prefix, w) = (a[0], a[1], a[2]);
            let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let l = prefix.shape()[1];
            let (width, h) = (w.shape()[0], w.shape()[1]);
            let mut g = vec![None, None, None, None];
            if need[0] || need[1] {
                let mut dcols = vec![T::zero(); b * n * width];
                mm_bt(dy, w.data(), b * n, h, width, &mut dcols, false);
                let mut dx = vec![T::zero(); x.len()];
                let mut dp = vec![T::zero(); prefix.len()];
                for bi in 0..b {
                    for t in 0..n {
                        let row = &dcols[(bi * n + t) * width..(bi * n + t + 1) * width];
                        for k in 0..l {
                            let src = t as isize - l as isize + k as isize;
                            let dst = if src >= 0 {
                                &mut dx[(bi * n + src as usize) * c..(bi * n + src as usize + 1) * c]
                            } else {
                                let p = (l as isize + src) as usize;
                                &mut dp[(bi * l + p) * c..(bi * l + p + 1) * c]
                            };
                            for (d, &v) in dst.iter_mut().zip(&row[k * c..(k + 1) * c]) {
                                *d = *d + v;
                            }
                        }
                    }
                }
                g[0] = like(x, dx);
                g[1] = like(prefix, dp);
            }
            if need[2] {
                let mut dw = vec![T::zero(); w.len()];
                mm_at(aux, dy, width, b * n, h, &mut dw, false);
                g[2] = like(w, dw);
            }
            if need[3] {
                let mut db = vec![T::zero(); h];
                sum_rows_into(dy, &mut db);
                g[3] = like(a[3], db);
            }
            g
        }
        Op::Gru => gru_backward(a, out, aux, dy, need),
        Op::Relu => elementwise(&|k| if a[0].data()[k] > T::zero() { dy[k] } else { T::zero() }),
        Op::Tanh => elementwise(&|k| {
            let y = out.data()[k];
            dy[k] * (T::one() - y * y)
        }),
        Op::Sigmoid => elementwise(&|k| {
            let y = out.data()[k];
            dy[k] * y * (T::one() - y)
        }),
        Op::Softplus => elementwise(&|k| dy[k] * sigmoid(a[0].data()[k])),
        Op::Sin => elementwise(&|k| dy[k] * a[0].data()[k].cos()),
        Op::Cos => elementwise(&|k| -dy[k] * a[0].data()[k].sin()),
        Op::Add => vec![like(a[0], dy.to_vec()), like(a[1], dy.to_vec())],
        Op::Mul => vec![
            need[0].then(|| Tensor::with_shape(a[0].shape().to_vec(), dy.iter().zip(a[1].data()).map(|(&g, &v)| g * v).collect())),
            need[1].then(|| Tensor::with_shape(a[1].shape().to_vec(), dy.iter().zip(a[0].data()).map(|(&g, &v)| g * v).collect())),
        ],
        Op::AddFrames => {
            let (b, n, h) = (a[0].shape()[0], a[0].shape()[1], a[0].shape()[2]);
            let mut dc = vec![T::zero(); b * h];
            for bi in 0..b {
                sum_rows_into(&dy[bi * n * h..(bi + 1) * n * h], &mut dc[bi * h..(bi + 1) * h]);
            }
            vec![like(a[0], dy.to_vec()), like(a[1], dc)]
        }
        Op::Scale(f) => {
            let f = T::from_f64_lossy(*f);
            elementwise(&|k| dy[k] * f)
        }
        Op::Offset(_) => elementwise(&|k| dy[k]),
        Op::Concat => {
            let total = out.last_dim();
            let rows = out.len() / total.max(1);
            let mut offset = 0;
            let mut g = Vec::with_capacity(a.len());
            for t in a {
                let d = t.last_dim();
                let mut part = Vec::with_capacity(t.len());
                for r in 0..rows {
                    part.extend_from_slice(&dy[r * total + offset..r * total + offset + d]);
                }
                offset += d;
                g.push(like(t, part));
            }
            g
        }
        Op::Slice { start, len } => {
            let d = a[0].last_dim();
            let mut dx = vec![T::zero(); a[0].len()];
            for (row, src) in dx.chunks_mut(d).zip(dy.chunks(*len)) {
                row[*start..start + len].copy_from_slice(src);
            }
            vec![like(a[0], dx)]
        }
        Op::LogisticLogDensity => {
            let two = T::one() + T::one();
            let (x, mu, s) = (a[0].data(), a[1].data(), a[2].data());
            let mut dx = vec![T::zero(); x.len()];
            let mut ds = vec![T::zero(); x.len()];
            for k in 0..x.len() {
                let z = (x[k] - mu[k]) / s[k];
                let th = (z / two).tanh();
                dx[k] = -dy[k] * th / s[k];
                ds[k] = dy[k] * (z * th - T::one()) / s[k];
            }
            let dmu = dx.iter().map(|&v| -v).collect();
            vec![like(a[0], dx), like(a[1], dmu), like(a[2], ds)]
        }
        Op::Sum => {
            let g = dy[0];
            vec![like(a[0], vec![g; a[0].len()])]
        }
    })
}

pub mod check;

#[cfg(test)]
mod tests;
