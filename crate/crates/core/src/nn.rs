//! Dense feed-forward networks with explicit error vectors.
//!
//! The backward pass mirrors textbook backpropagation: the last layer's error
//! is the output gradient times `σ'` of its pre-activation, hidden errors are
//! pulled back through the next layer's transposed weights, and the error
//! handed to whatever produced the input is `Wᵀ δ` of the first layer with no
//! `σ'` factor, since the input has no activation of its own.
//!
//! Parameter gradients are averaged over the mini-batch.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 6] = b"INNET1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    /// Row-wise softmax. Only allowed on the last layer.
    Softmax,
}

impl Activation {
    fn tag(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Tanh => 3,
            Activation::Softmax => 4,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Tanh,
            4 => Activation::Softmax,
            t => {
                return Err(Error::Format {
                    what: "checkpoint",
                    msg: format!("unknown activation tag {t}"),
                })
            }
        })
    }

    fn apply_row(self, z: &[f64], out: &mut [f64]) {
        match self {
            Activation::Identity => out.copy_from_slice(z),
            Activation::Relu => {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Activation::Sigmoid => {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o = 1.0 / (1.0 + (-v).exp());
                }
            }
            Activation::Tanh => {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o = v.tanh();
                }
            }
            Activation::Softmax => softmax_into(z, out),
        }
    }

    /// Elementwise derivative. `a` is the activation of `z`. Not defined for
    /// softmax, whose Jacobian is not diagonal.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            // σ'(0) = 0
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::Softmax => unreachable!("softmax has no elementwise derivative"),
        }
    }
}

pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[fan_out, fan_in]`
    pub weights: Tensor,
    /// `[fan_out]`
    pub biases: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weights: Tensor, biases: Tensor, activation: Activation) -> Result<Self> {
        if weights.rank() != 2 || biases.rank() != 1 || biases.len() != weights.rows() {
            return Err(Error::Shape(format!(
                "weights {:?} and biases {:?} disagree",
                weights.shape(),
                biases.shape()
            )));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn from_rows(weights: &[Vec<f64>], biases: &[f64], activation: Activation) -> Result<Self> {
        Self::new(
            Tensor::from_rows(weights),
            Tensor::vector(biases.to_vec()),
            activation,
        )
    }

    /// Uniform in `±1/sqrt(fan_in)` for both weights and biases.
    pub fn random<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let biases = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weights: Tensor::matrix(fan_out, fan_in, weights).expect("sized above"),
            biases: Tensor::vector(biases),
            activation,
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        Self {
            weights: Tensor::zeros(&[fan_out, fan_in]),
            biases: Tensor::zeros(&[fan_out]),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    /// `z = a Wᵀ + b` for a batch `a` of shape `[batch, fan_in]`.
    fn pre_activation(&self, input: &Tensor) -> Tensor {
        let (batch, fan_in, fan_out) = (input.rows(), self.fan_in(), self.fan_out());
        let w = self.weights.data();
        let b = self.biases.data();
        let mut z = vec![0.0; batch * fan_out];
        for r in 0..batch {
            let a = input.row(r);
            for o in 0..fan_out {
                let wrow = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = 0.0;
                for (wi, ai) in wrow.iter().zip(a) {
                    acc += wi * ai;
                }
                z[r * fan_out + o] = acc + b[o];
            }
        }
        Tensor::matrix(batch, fan_out, z).expect("sized above")
    }

    /// `Wᵀ δ` per row: `[batch, fan_out] -> [batch, fan_in]`.
    fn pull_back(&self, delta: &Tensor) -> Tensor {
        let (batch, fan_in) = (delta.rows(), self.fan_in());
        let w = self.weights.data();
        let mut out = vec![0.0; batch * fan_in];
        for r in 0..batch {
            let d = delta.row(r);
            let o_row = &mut out[r * fan_in..(r + 1) * fan_in];
            for (o, &dv) in d.iter().enumerate() {
                let wrow = &w[o * fan_in..(o + 1) * fan_in];
                for (acc, wi) in o_row.iter_mut().zip(wrow) {
                    *acc += wi * dv;
                }
            }
        }
        Tensor::matrix(batch, fan_in, out).expect("sized above")
    }
}

/// Per-layer pre-activations `z[l]` and activations `a[l]` for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor {
        self.post.last().unwrap_or(&self.input)
    }

    pub fn len(&self) -> usize {
        self.post.len()
    }

    pub fn is_empty(&self) -> bool {
        self.post.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.input.rows()
    }

    /// Activation feeding layer `l` (0-based): the input for `l == 0`.
    fn layer_input(&self, l: usize) -> &Tensor {
        if l == 0 {
            &self.input
        } else {
            &self.post[l - 1]
        }
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    /// One error tensor per layer, `[batch, fan_out(l)]`.
    pub deltas: Vec<Tensor>,
    /// Error with respect to the network input, `[batch, fan_in(0)]`.
    pub input_error: Tensor,
}

/// Batch-averaged parameter gradients, aligned with [`Network::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

impl Network {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Dimension {
                    layer: l + 1,
                    expected: pair[0].fan_out(),
                    got: pair[1].fan_in(),
                });
            }
        }
        if layers[..layers.len() - 1]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(Error::Validation(
                "softmax is only allowed on the last layer".into(),
            ));
        }
        Ok(Self { layers })
    }

    /// Random network with widths `sizes[0] -> sizes[1] -> ...`, `hidden`
    /// activations on every layer but the last.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Validation(format!("need at least two sizes, got {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { output } else { hidden };
                DenseLayer::random(sizes[l], sizes[l + 1], act, rng)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn output_activation(&self) -> Activation {
        self.layers[self.layers.len() - 1].activation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardTrace> {
        let input = input.as_batch();
        if input.cols() != self.input_width() {
            return Err(Error::Dimension {
                layer: 0,
                expected: self.input_width(),
                got: input.cols(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a_prev = post.last().unwrap_or(&input);
            let z = layer.pre_activation(a_prev);
            let mut a = Tensor::zeros(z.shape());
            for r in 0..z.rows() {
                layer.activation.apply_row(z.row(r), a.row_mut(r));
            }
            pre.push(z);
            post.push(a);
        }
        Ok(ForwardTrace { input, pre, post })
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.pre.len() != self.layers.len() || trace.post.len() != self.layers.len() {
            return Err(Error::Consistency(format!(
                "trace has {} layers, network has {}",
                trace.post.len(),
                self.layers.len()
            )));
        }
        let batch = trace.batch();
        for (l, (layer, z)) in self.layers.iter().zip(&trace.pre).enumerate() {
            if z.rows() != batch || z.cols() != layer.fan_out() {
                return Err(Error::Consistency(format!(
                    "layer {l} trace shape {:?} does not match fan_out {}",
                    z.shape(),
                    layer.fan_out()
                )));
            }
        }
        Ok(())
    }

    /// Backward pass from `∇_{a[L]}` of the loss.
    ///
    /// For a softmax output the exact Jacobian-vector product
    /// `p ⊙ (g − ⟨g, p⟩)` is used.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &Tensor) -> Result<Backward> {
        self.check_trace(trace)?;
        let last = self.layers.len() - 1;
        let output = &trace.post[last];
        if output_grad.shape() != output.shape() {
            return Err(Error::Consistency(format!(
                "output gradient shape {:?} does not match output {:?}",
                output_grad.shape(),
                output.shape()
            )));
        }
        let act = self.layers[last].activation;
        let mut delta = Tensor::zeros(output.shape());
        for r in 0..output.rows() {
            let (g, a, z) = (output_grad.row(r), output.row(r), trace.pre[last].row(r));
            let d = delta.row_mut(r);
            if act == Activation::Softmax {
                let dot: f64 = g.iter().zip(a).map(|(gi, pi)| gi * pi).sum();
                for i in 0..d.len() {
                    d[i] = a[i] * (g[i] - dot);
                }
            } else {
                for i in 0..d.len() {
                    d[i] = g[i] * act.derivative(z[i], a[i]);
                }
            }
        }
        self.backward_from_delta(trace, delta)
    }

    /// Backward pass given the last layer's error `δ[L]` directly. Used when
    /// softmax and log-loss are differentiated jointly (`δ[L] = p − onehot`).
    pub fn backward_from_delta(&self, trace: &ForwardTrace, last_delta: Tensor) -> Result<Backward> {
        self.check_trace(trace)?;
        let last = self.layers.len() - 1;
        if last_delta.shape() != trace.pre[last].shape() {
            return Err(Error::Consistency(format!(
                "last-layer error shape {:?} does not match {:?}",
                last_delta.shape(),
                trace.pre[last].shape()
            )));
        }
        let mut deltas = vec![last_delta];
        for l in (0..last).rev() {
            let upstream = self.layers[l + 1].pull_back(&deltas[0]);
            let act = self.layers[l].activation;
            let (z, a) = (&trace.pre[l], &trace.post[l]);
            let mut d = upstream;
            for ((dv, &zv), &av) in d.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
                *dv *= act.derivative(zv, av);
            }
            deltas.insert(0, d);
        }
        // no σ' on the input error
        let input_error = self.layers[0].pull_back(&deltas[0]);
        Ok(Backward {
            deltas,
            input_error,
        })
    }

    /// Mini-batch mean of `δ[l] a[l-1]ᵀ` and `δ[l]`.
    pub fn gradients(&self, trace: &ForwardTrace, back: &Backward) -> Result<Gradients> {
        self.check_trace(trace)?;
        if back.deltas.len() != self.layers.len() {
            return Err(Error::Consistency(format!(
                "{} error tensors for {} layers",
                back.deltas.len(),
                self.layers.len()
            )));
        }
        let batch = trace.batch();
        let scale = batch as f64;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let delta = &back.deltas[l];
            let a_prev = trace.layer_input(l);
            let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
            let mut gw = vec![0.0; fan_in * fan_out];
            let mut gb = vec![0.0; fan_out];
            for r in 0..batch {
                let (d, a) = (delta.row(r), a_prev.row(r));
                for o in 0..fan_out {
                    let dv = d[o];
                    gb[o] += dv;
                    for (g, &ai) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(a) {
                        *g += dv * ai;
                    }
                }
            }
            for g in gw.iter_mut().chain(gb.iter_mut()) {
                *g /= scale;
            }
            weights.push(Tensor::matrix(fan_out, fan_in, gw)?);
            biases.push(Tensor::vector(gb));
        }
        Ok(Gradients { weights, biases })
    }

    /// `w ← w − η g`, `b ← b − η g`.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.weights.len() != self.layers.len() {
            return Err(Error::Consistency("gradient/layer count mismatch".into()));
        }
        for ((layer, gw), gb) in self.layers.iter_mut().zip(&grads.weights).zip(&grads.biases) {
            if gw.shape() != layer.weights.shape() || gb.shape() != layer.biases.shape() {
                return Err(Error::Consistency("gradient shape mismatch".into()));
            }
            for (w, g) in layer.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= lr * g;
            }
            for (b, g) in layer.biases.data_mut().iter_mut().zip(gb.data()) {
                *b -= lr * g;
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, trace: &ForwardTrace, back: &Backward, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        let grads = self.gradients(trace, back)?;
        self.apply(&grads, lr)
    }

    /// All parameters, layer by layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(layer.biases.data());
        }
        out
    }

    /// Overwrites parameters from a slice laid out like [`Network::params`].
    /// Returns the number of values consumed.
    pub fn set_params(&mut self, values: &[f64]) -> Result<usize> {
        if values.len() < self.param_count() {
            return Err(Error::Shape(format!(
                "need {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            layer.weights.data_mut().copy_from_slice(&values[at..at + nw]);
            at += nw;
            let nb = layer.biases.len();
            layer.biases.data_mut().copy_from_slice(&values[at..at + nb]);
            at += nb;
        }
        Ok(at)
    }

    pub fn same_architecture(&self, other: &Network) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.fan_in() == b.fan_in() && a.fan_out() == b.fan_out() && a.activation == b.activation
            })
    }

    /// Writes the `INNET1` checkpoint: magic, then per layer
    /// `fan_in:u32, fan_out:u32, tag:u32`, row-major weights and biases as
    /// `f64`, all little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for layer in &self.layers {
            w.write_all(&(layer.fan_in() as u32).to_le_bytes())?;
            w.write_all(&(layer.fan_out() as u32).to_le_bytes())?;
            w.write_all(&layer.activation.tag().to_le_bytes())?;
            for v in layer.weights.data().iter().chain(layer.biases.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let bad = |msg: String| Error::Format {
            what: "checkpoint",
            msg,
        };
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(bad("missing INNET1 magic".into()));
        }
        let mut at = 6;
        let mut layers = Vec::new();
        while at < bytes.len() {
            let header = bytes
                .get(at..at + 12)
                .ok_or_else(|| bad(format!("truncated layer header at byte {at}")))?;
            let word = |i: usize| u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
            let (fan_in, fan_out, tag) = (word(0) as usize, word(1) as usize, word(2));
            at += 12;
            let count = fan_in * fan_out + fan_out;
            let body = bytes
                .get(at..at + count * 8)
                .ok_or_else(|| bad(format!("truncated parameters for layer {}", layers.len())))?;
            let values: Vec<f64> = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += count * 8;
            let (w, b) = values.split_at(fan_in * fan_out);
            layers.push(DenseLayer::new(
                Tensor::matrix(fan_out, fan_in, w.to_vec())?,
                Tensor::vector(b.to_vec()),
                Activation::from_tag(tag)?,
            )?);
        }
        Network::new(layers)
    }
}
