//! Encoder and fusion building blocks shared by the in-network protocol, the
//! glued reference model, and the federated/split baselines.
//!
//! An encoder is a [`Network`] whose last layer is an identity layer of width
//! `2·d_u`: the first `d_u` outputs are the Gaussian mean, the rest the
//! log-variance. The fusion side is a decoder ending in softmax (the joint
//! head) plus one single-layer softmax head per encoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Backward, ForwardTrace, Gradients, Network};
use crate::tensor::Tensor;
use crate::vloss::{
    self, apply_rate_correction, encode_with_noise, encoder_output_grad, inl_loss, logit_gradient,
    rate_gradients, GaussianEncoderOutput, LossBreakdown, Prior,
};

/// Architecture of a full stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackShape {
    /// Input width of each encoder.
    pub view_widths: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    /// `d_u`, the latent width sent by each encoder.
    pub latent: usize,
    pub fusion_hidden: Vec<usize>,
    pub classes: usize,
    pub activation: Activation,
}

impl StackShape {
    pub fn branches(&self) -> usize {
        self.view_widths.len()
    }

    /// Fusion input width `p`.
    pub fn fusion_width(&self) -> usize {
        self.latent * self.branches()
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_widths.is_empty() || self.view_widths.contains(&0) {
            return Err(Error::Validation("every encoder needs a positive input width".into()));
        }
        if self.latent == 0 || self.classes < 2 {
            return Err(Error::Validation("latent width must be positive and classes ≥ 2".into()));
        }
        if self.encoder_hidden.contains(&0) || self.fusion_hidden.contains(&0) {
            return Err(Error::Validation("hidden widths must be positive".into()));
        }
        if self.activation == Activation::Softmax {
            return Err(Error::Validation("softmax cannot be a hidden activation".into()));
        }
        Ok(())
    }
}

pub fn new_encoder<R: Rng + ?Sized>(
    input: usize,
    hidden: &[usize],
    latent: usize,
    activation: Activation,
    rng: &mut R,
) -> Result<Network> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(2 * latent);
    Network::random(&sizes, activation, Activation::Identity, rng)
}

pub fn new_fusion<R: Rng + ?Sized>(
    input: usize,
    hidden: &[usize],
    classes: usize,
    activation: Activation,
    rng: &mut R,
) -> Result<Network> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(classes);
    Network::random(&sizes, activation, Activation::Softmax, rng)
}

/// Latent width of an encoder network.
pub fn latent_width(encoder: &Network) -> usize {
    encoder.output_width() / 2
}

/// Forward state kept by an encoder between its send and its update.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub trace: ForwardTrace,
    pub enc: GaussianEncoderOutput,
}

pub fn encoder_forward(net: &Network, x: &Tensor, noise: &Tensor) -> Result<EncoderPass> {
    if net.output_width() % 2 != 0 || net.output_activation() != Activation::Identity {
        return Err(Error::Validation(
            "encoder must end in an identity layer of even width".into(),
        ));
    }
    let trace = net.forward(x)?;
    let d = latent_width(net);
    let halves = trace.output().split_features(&[d, d])?;
    let enc = encode_with_noise(&halves[0], &halves[1], noise)?;
    Ok(EncoderPass { trace, enc })
}

/// Deterministic encoding used at inference: the mean.
pub fn encoder_mean(net: &Network, x: &Tensor) -> Result<Tensor> {
    let trace = net.forward(x)?;
    let d = latent_width(net);
    let mut halves = trace.output().split_features(&[d, d])?;
    Ok(halves.swap_remove(0))
}

/// Node-local update rule: applies the rate correction to the received error
/// slice, pulls it through the reparametrization and backpropagates.
pub fn encoder_backward(
    net: &Network,
    pass: &EncoderPass,
    error_slice: &Tensor,
    prior: &Prior,
    s: f64,
) -> Result<(Backward, Gradients)> {
    let rate = rate_gradients(&pass.enc, prior)?;
    let sample_grad = apply_rate_correction(error_slice, &rate.sample, s)?;
    let out_grad = encoder_output_grad(&pass.enc, &sample_grad, &rate, s)?;
    let back = net.backward(&pass.trace, &out_grad)?;
    let grads = net.gradients(&pass.trace, &back)?;
    Ok((back, grads))
}

#[derive(Debug, Clone)]
pub struct FusionPass {
    pub trace: ForwardTrace,
    pub head_traces: Vec<ForwardTrace>,
}

impl FusionPass {
    pub fn joint(&self) -> &Tensor {
        self.trace.output()
    }

    pub fn marginals(&self) -> Vec<Tensor> {
        self.head_traces.iter().map(|t| t.output().clone()).collect()
    }
}

pub fn fusion_forward(
    fusion: &Network,
    heads: &[Network],
    latents: &Tensor,
    widths: &[usize],
) -> Result<FusionPass> {
    if heads.len() != widths.len() {
        return Err(Error::Validation(format!(
            "{} marginal heads for {} slices",
            heads.len(),
            widths.len()
        )));
    }
    let trace = fusion.forward(latents)?;
    let head_traces = latents
        .split_features(widths)?
        .iter()
        .zip(heads)
        .map(|(u, h)| h.forward(u))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusionPass { trace, head_traces })
}

#[derive(Debug, Clone)]
pub struct FusionBackward {
    pub fusion: Gradients,
    pub heads: Vec<Gradients>,
    /// `∂(−total)/∂u` per sample, before any rate correction, `[batch, p]`.
    pub input_error: Tensor,
}

/// Backward pass of `−total` at the fusion node. Only label-dependent terms
/// appear here; rate terms are the encoders' business.
pub fn fusion_backward(
    fusion: &Network,
    heads: &[Network],
    pass: &FusionPass,
    labels: &[usize],
    widths: &[usize],
    s: f64,
) -> Result<FusionBackward> {
    let joint_delta = logit_gradient(pass.joint(), labels, 1.0);
    let back = fusion.backward_from_delta(&pass.trace, joint_delta)?;
    let fusion_grads = fusion.gradients(&pass.trace, &back)?;
    let mut input_error = back.input_error;
    let cols = input_error.cols();
    let mut head_grads = Vec::with_capacity(heads.len());
    let mut offset = 0;
    for ((head, trace), &w) in heads.iter().zip(&pass.head_traces).zip(widths) {
        let delta = logit_gradient(trace.output(), labels, s);
        let hb = head.backward_from_delta(trace, delta)?;
        head_grads.push(head.gradients(trace, &hb)?);
        for r in 0..input_error.rows() {
            let src = hb.input_error.row(r);
            let dst = &mut input_error.data_mut()[r * cols + offset..r * cols + offset + w];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        offset += w;
    }
    Ok(FusionBackward {
        fusion: fusion_grads,
        heads: head_grads,
        input_error,
    })
}

/// Where reparametrization noise comes from.
#[derive(Debug, Clone)]
pub enum NoiseSource {
    /// One generator per encoder; draws `[batch, d_u]` per step.
    Sampled(Vec<ChaCha8Rng>),
    /// Fixed `ε` per encoder and sample index, `[samples, d_u]`.
    Fixed(Vec<Tensor>),
}

impl NoiseSource {
    pub fn seeded(seed: u64, encoders: usize) -> Self {
        use rand::SeedableRng;
        NoiseSource::Sampled(
            (0..encoders)
                .map(|j| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(j as u64 + 1);
                    rng
                })
                .collect(),
        )
    }

    pub fn fixed_from_rng<R: Rng + ?Sized>(samples: usize, widths: &[usize], rng: &mut R) -> Self {
        NoiseSource::Fixed(
            widths
                .iter()
                .map(|&w| vloss::standard_normal(samples, w, rng))
                .collect(),
        )
    }

    pub fn draw(&mut self, node: usize, indices: &[usize], width: usize) -> Result<Tensor> {
        match self {
            NoiseSource::Sampled(rngs) => {
                let rng = rngs
                    .get_mut(node)
                    .ok_or_else(|| Error::protocol(node, "no noise generator for node"))?;
                Ok(vloss::standard_normal(indices.len(), width, rng))
            }
            NoiseSource::Fixed(tables) => {
                let table = tables
                    .get(node)
                    .ok_or_else(|| Error::protocol(node, "no fixed noise for node"))?;
                if table.cols() != width || indices.iter().any(|&i| i >= table.rows()) {
                    return Err(Error::protocol(node, "fixed noise table too small"));
                }
                Ok(table.select_rows(indices))
            }
        }
    }
}

/// Gradients for every part of a stack.
#[derive(Debug, Clone)]
pub struct StackGradients {
    pub encoders: Vec<Gradients>,
    pub fusion: Gradients,
    pub heads: Vec<Gradients>,
}

impl StackGradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.encoders {
            out.extend(g.flatten());
        }
        out.extend(self.fusion.flatten());
        for g in &self.heads {
            out.extend(g.flatten());
        }
        out
    }
}

/// All networks of an in-network learning system glued into one model.
#[derive(Debug, Clone, PartialEq)]
pub struct InlStack {
    pub encoders: Vec<Network>,
    pub priors: Vec<Prior>,
    pub fusion: Network,
    pub heads: Vec<Network>,
}

impl InlStack {
    pub fn new<R: Rng + ?Sized>(shape: &StackShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let encoders = shape
            .view_widths
            .iter()
            .map(|&w| new_encoder(w, &shape.encoder_hidden, shape.latent, shape.activation, rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = new_fusion(
            shape.fusion_width(),
            &shape.fusion_hidden,
            shape.classes,
            shape.activation,
            rng,
        )?;
        let heads = (0..shape.branches())
            .map(|_| new_fusion(shape.latent, &[], shape.classes, shape.activation, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            priors: vec![Prior::StandardNormal; encoders.len()],
            encoders,
            fusion,
            heads,
        })
    }

    pub fn from_parts(encoders: Vec<Network>, priors: Vec<Prior>, fusion: Network, heads: Vec<Network>) -> Result<Self> {
        let stack = Self {
            encoders,
            priors,
            fusion,
            heads,
        };
        stack.check()?;
        Ok(stack)
    }

    fn check(&self) -> Result<()> {
        let j = self.encoders.len();
        if j == 0 || self.priors.len() != j || self.heads.len() != j {
            return Err(Error::Validation(format!(
                "{j} encoders, {} priors, {} heads",
                self.priors.len(),
                self.heads.len()
            )));
        }
        let p: usize = self.widths().iter().sum();
        if p != self.fusion.input_width() {
            return Err(Error::Validation(format!(
                "encoder outputs sum to {p} but the fusion input has width {}",
                self.fusion.input_width()
            )));
        }
        for (e, h) in self.encoders.iter().zip(&self.heads) {
            if h.input_width() != latent_width(e) || h.output_width() != self.fusion.output_width() {
                return Err(Error::Validation("marginal head does not fit its encoder".into()));
            }
        }
        Ok(())
    }

    pub fn branches(&self) -> usize {
        self.encoders.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.encoders.iter().map(latent_width).collect()
    }

    pub fn classes(&self) -> usize {
        self.fusion.output_width()
    }

    pub fn param_count(&self) -> usize {
        self.encoder_param_count()
            + self.fusion.param_count()
            + self.heads.iter().map(Network::param_count).sum::<usize>()
    }

    /// Parameters living on the encoder side.
    pub fn encoder_param_count(&self) -> usize {
        self.encoders.iter().map(Network::param_count).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for e in &self.encoders {
            out.extend(e.params());
        }
        out.extend(self.fusion.params());
        for h in &self.heads {
            out.extend(h.params());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "stack has {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut at = 0;
        for e in &mut self.encoders {
            at += e.set_params(&values[at..])?;
        }
        at += self.fusion.set_params(&values[at..])?;
        for h in &mut self.heads {
            at += h.set_params(&values[at..])?;
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &InlStack) -> bool {
        self.encoders.len() == other.encoders.len()
            && self.encoders.iter().zip(&other.encoders).all(|(a, b)| a.same_architecture(b))
            && self.fusion.same_architecture(&other.fusion)
            && self.heads.iter().zip(&other.heads).all(|(a, b)| a.same_architecture(b))
    }

    /// Loss and full gradient of `−total` on one batch, computed in one place.
    pub fn loss_and_gradients(
        &self,
        views: &[Tensor],
        labels: &[usize],
        noise: &[Tensor],
        s: f64,
    ) -> Result<(LossBreakdown, StackGradients)> {
        if views.len() != self.branches() || noise.len() != self.branches() {
            return Err(Error::Validation(format!(
                "{} views and {} noise tensors for {} encoders",
                views.len(),
                noise.len(),
                self.branches()
            )));
        }
        let widths = self.widths();
        let passes = self
            .encoders
            .iter()
            .zip(views)
            .zip(noise)
            .map(|((net, x), e)| encoder_forward(net, x, e))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<&Tensor> = passes.iter().map(|p| &p.enc.sample).collect();
        let latents = Tensor::concat_features(&samples)?;
        let fpass = fusion_forward(&self.fusion, &self.heads, &latents, &widths)?;
        let rates = passes
            .iter()
            .zip(&self.priors)
            .map(|(p, prior)| vloss::rate_term(&p.enc, prior))
            .collect::<Result<Vec<_>>>()?;
        let loss = inl_loss(fpass.joint(), &fpass.marginals(), &rates, labels, s)?;
        let fback = fusion_backward(&self.fusion, &self.heads, &fpass, labels, &widths, s)?;
        let mut encoders = Vec::with_capacity(self.branches());
        let mut offset = 0;
        for ((net, pass), prior) in self.encoders.iter().zip(&passes).zip(&self.priors) {
            let w = latent_width(net);
            let cols: Vec<usize> = (offset..offset + w).collect();
            let slice = column_block(&fback.input_error, &cols);
            offset += w;
            encoders.push(encoder_backward(net, pass, &slice, prior, s)?.1);
        }
        Ok((
            loss,
            StackGradients {
                encoders,
                fusion: fback.fusion,
                heads: fback.heads,
            },
        ))
    }

    pub fn apply(&mut self, grads: &StackGradients, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {lr}")));
        }
        for (net, g) in self.encoders.iter_mut().zip(&grads.encoders) {
            net.apply(g, lr)?;
        }
        self.fusion.apply(&grads.fusion, lr)?;
        for (net, g) in self.heads.iter_mut().zip(&grads.heads) {
            net.apply(g, lr)?;
        }
        Ok(())
    }

    /// One gradient-descent step on `−total`; returns the pre-step loss.
    pub fn step(
        &mut self,
        views: &[Tensor],
        labels: &[usize],
        noise: &[Tensor],
        s: f64,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let (loss, grads) = self.loss_and_gradients(views, labels, noise, s)?;
        self.apply(&grads, lr)?;
        Ok(loss)
    }

    /// Joint soft prediction from encoder means.
    pub fn predict(&self, views: &[Tensor]) -> Result<Tensor> {
        if views.len() != self.branches() {
            return Err(Error::UnavailableView(views.len()));
        }
        let means = self
            .encoders
            .iter()
            .zip(views)
            .map(|(net, x)| encoder_mean(net, x))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = means.iter().collect();
        let latents = Tensor::concat_features(&refs)?;
        Ok(self.fusion.forward(&latents)?.output().clone())
    }

    /// Objective value on a batch with given noise, no update.
    pub fn evaluate(&self, views: &[Tensor], labels: &[usize], noise: &[Tensor], s: f64) -> Result<LossBreakdown> {
        let widths = self.widths();
        let passes = self
            .encoders
            .iter()
            .zip(views)
            .zip(noise)
            .map(|((net, x), e)| encoder_forward(net, x, e))
            .collect::<Result<Vec<_>>>()?;
        let samples: Vec<&Tensor> = passes.iter().map(|p| &p.enc.sample).collect();
        let latents = Tensor::concat_features(&samples)?;
        let fpass = fusion_forward(&self.fusion, &self.heads, &latents, &widths)?;
        let rates = passes
            .iter()
            .zip(&self.priors)
            .map(|(p, prior)| vloss::rate_term(&p.enc, prior))
            .collect::<Result<Vec<_>>>()?;
        inl_loss(fpass.joint(), &fpass.marginals(), &rates, labels, s)
    }
}

fn column_block(t: &Tensor, cols: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(t.rows() * cols.len());
    for r in 0..t.rows() {
        let row = t.row(r);
        data.extend(cols.iter().map(|&c| row[c]));
    }
    Tensor::matrix(t.rows(), cols.len(), data).expect("sized above")
}

pub fn accuracy(pred: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / labels.len() as f64
}
