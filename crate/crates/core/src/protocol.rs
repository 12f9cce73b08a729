//! Star-topology in-network learning.
//!
//! Encoder nodes `1..=J` each hold one view of the data and an encoder
//! network; the fusion node `J+1` holds the labels, the decoder and the
//! per-node marginal heads. A training round is:
//!
//! 1. every encoder sends an [`Payload::ActivationBatch`] with its latent
//!    sample for the mini-batch;
//! 2. the fusion node concatenates them in node order, runs its forward and
//!    backward pass, updates itself and sends back to each node the matching
//!    slice of its input-layer error ([`Payload::ErrorSlice`]);
//! 3. each encoder adds its local rate gradient to the slice and updates.
//!
//! Encoders never see labels, other nodes' activations or fusion parameters;
//! the fusion node never sees raw views or encoder priors. Every message is
//! appended to a [`MessageLog`] and metered.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::stack::{
    encoder_backward, encoder_forward, encoder_mean, fusion_backward, fusion_forward, latent_width,
    EncoderPass, InlStack, NoiseSource,
};
use crate::tensor::Tensor;
use crate::vloss::{inl_loss, rate_term, split_error, LossBreakdown, Prior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Towards the fusion node / server.
    Fwd,
    /// Back to the encoders / clients.
    Bwd,
    /// Client to client weight transfer (split learning).
    Handoff,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Fwd => "fwd",
            Direction::Bwd => "bwd",
            Direction::Handoff => "handoff",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    ActivationBatch { node: usize, values: Tensor },
    ErrorSlice { node: usize, values: Tensor },
    PredictionRequest { node: usize, values: Tensor },
    SoftPrediction { distribution: Tensor },
}

impl Payload {
    pub fn values(&self) -> &Tensor {
        match self {
            Payload::ActivationBatch { values, .. }
            | Payload::ErrorSlice { values, .. }
            | Payload::PredictionRequest { values, .. } => values,
            Payload::SoftPrediction { distribution } => distribution,
        }
    }

    /// The encoder node on the other end of the link, if any.
    pub fn node(&self) -> Option<usize> {
        match self {
            Payload::ActivationBatch { node, .. }
            | Payload::ErrorSlice { node, .. }
            | Payload::PredictionRequest { node, .. } => Some(*node),
            Payload::SoftPrediction { .. } => None,
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Payload::ActivationBatch { .. } | Payload::PredictionRequest { .. } => Direction::Fwd,
            Payload::ErrorSlice { .. } | Payload::SoftPrediction { .. } => Direction::Bwd,
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            Payload::ActivationBatch { .. } | Payload::ErrorSlice { .. } => Phase::Train,
            Payload::PredictionRequest { .. } | Payload::SoftPrediction { .. } => Phase::Inference,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub payload: Payload,
    pub payload_bits: u64,
}

impl Message {
    /// Wraps a payload, metering `elements × width_bits`.
    pub fn new(payload: Payload, width_bits: u32) -> Self {
        let payload_bits = payload.values().len() as u64 * u64::from(width_bits);
        Self {
            payload,
            payload_bits,
        }
    }

    pub fn elements(&self) -> usize {
        self.payload.values().len()
    }
}

/// Optional fixed-width quantization of encoder-to-fusion values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Quantizer {
    /// Lossless; metered at the configured parameter width.
    #[default]
    Off,
    /// `2^bits` evenly spaced levels on `[-range, range]`; out-of-range
    /// values are clipped.
    UniformFixedWidth { bits: u32, range: f64 },
}

impl Quantizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Quantizer::Off => Ok(()),
            Quantizer::UniformFixedWidth { bits, range } => {
                if !(1..=32).contains(&bits) || !(range > 0.0) || !range.is_finite() {
                    return Err(Error::Validation(format!(
                        "quantizer needs 1..=32 bits and a positive range, got {bits} bits on ±{range}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn width_bits(&self, s_bits: u32) -> u32 {
        match *self {
            Quantizer::Off => s_bits,
            Quantizer::UniformFixedWidth { bits, .. } => bits,
        }
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        match *self {
            Quantizer::Off => t.clone(),
            Quantizer::UniformFixedWidth { bits, range } => {
                let levels = ((1u64 << bits) - 1) as f64;
                let step = 2.0 * range / levels;
                t.map(|v| {
                    let clipped = v.clamp(-range, range);
                    let idx = ((clipped + range) / step).round();
                    -range + idx * step
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: usize,
    pub direction: Direction,
    pub phase: Phase,
    /// Encoder node or client id; `0` for the fusion node or server.
    pub node: usize,
    pub elements: u64,
    pub bits: u64,
}

/// Append-only log of everything put on a link.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    records: Vec<LogRecord>,
}

impl MessageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn record(&mut self, epoch: usize, batch: usize, msg: &Message) {
        self.records.push(LogRecord {
            epoch,
            batch,
            direction: msg.payload.direction(),
            phase: msg.payload.phase(),
            node: msg.payload.node().unwrap_or(0),
            elements: msg.elements() as u64,
            bits: msg.payload_bits,
        });
    }

    /// Records a transfer that is not an in-network message (parameter
    /// uploads, downloads and handoffs of the baselines).
    pub fn record_transfer(
        &mut self,
        epoch: usize,
        batch: usize,
        direction: Direction,
        node: usize,
        elements: u64,
        width_bits: u32,
    ) {
        self.records.push(LogRecord {
            epoch,
            batch,
            direction,
            phase: Phase::Train,
            node,
            elements,
            bits: elements * u64::from(width_bits),
        });
    }

    pub fn extend(&mut self, other: &MessageLog) {
        self.records.extend_from_slice(&other.records);
    }

    pub fn meter(&self) -> Meter {
        meter(&self.records)
    }

    /// Training-phase bits logged for `epoch`.
    pub fn epoch_bits(&self, epoch: usize) -> u64 {
        self.records
            .iter()
            .filter(|r| r.epoch == epoch && r.phase == Phase::Train)
            .map(|r| r.bits)
            .sum()
    }

    /// CSV with header `epoch,batch,direction,node,elements,bits`.
    /// Inference traffic is not exported.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,batch,direction,node,elements,bits")?;
        for r in self.records.iter().filter(|r| r.phase == Phase::Train) {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch, r.batch, r.direction, r.node, r.elements, r.bits
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Meter {
    pub total: u64,
    pub by_kind: BTreeMap<(Phase, Direction), u64>,
}

impl Meter {
    pub fn get(&self, phase: Phase, direction: Direction) -> u64 {
        self.by_kind.get(&(phase, direction)).copied().unwrap_or(0)
    }
}

pub fn meter(records: &[LogRecord]) -> Meter {
    let mut m = Meter::default();
    for r in records {
        m.total += r.bits;
        *m.by_kind.entry((r.phase, r.direction)).or_default() += r.bits;
    }
    m
}

/// One edge node: an encoder and its local view. Ids start at 1.
#[derive(Debug, Clone)]
pub struct EncoderNode {
    pub id: usize,
    pub net: Network,
    pub prior: Prior,
    view: Tensor,
    pending: Option<EncoderPass>,
}

impl EncoderNode {
    pub fn new(id: usize, net: Network, prior: Prior, view: Tensor) -> Result<Self> {
        if id == 0 {
            return Err(Error::Validation("encoder ids start at 1".into()));
        }
        if view.cols() != net.input_width() {
            return Err(Error::protocol(
                id,
                format!("view width {} but encoder expects {}", view.cols(), net.input_width()),
            ));
        }
        Ok(Self {
            id,
            net,
            prior,
            view,
            pending: None,
        })
    }

    /// Width `L_j` of this node's slice.
    pub fn slice_width(&self) -> usize {
        latent_width(&self.net)
    }

    pub fn samples(&self) -> usize {
        self.view.rows()
    }

    /// Encodes the selected local samples and returns the activation message
    /// and the per-sample rate values (a local metric, never sent).
    pub fn forward(
        &mut self,
        indices: &[usize],
        noise: &Tensor,
        quantizer: &Quantizer,
        s_bits: u32,
    ) -> Result<(Message, Vec<f64>)> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.view.rows()) {
            return Err(Error::protocol(self.id, format!("sample {bad} not in local shard")));
        }
        let x = self.view.select_rows(indices);
        let pass = encoder_forward(&self.net, &x, noise)?;
        let rates = rate_term(&pass.enc, &self.prior)?;
        let values = quantizer.apply(&pass.enc.sample);
        self.pending = Some(pass);
        Ok((
            Message::new(
                Payload::ActivationBatch {
                    node: self.id,
                    values,
                },
                quantizer.width_bits(s_bits),
            ),
            rates,
        ))
    }

    /// Applies the returned error slice: rate correction, local backward
    /// pass and SGD update.
    pub fn receive_error(&mut self, msg: &Message, s: f64, lr: f64) -> Result<()> {
        let Payload::ErrorSlice { node, values } = &msg.payload else {
            return Err(Error::protocol(self.id, "expected an error slice"));
        };
        if *node != self.id {
            return Err(Error::protocol(self.id, format!("received slice addressed to node {node}")));
        }
        let pass = self
            .pending
            .take()
            .ok_or_else(|| Error::protocol(self.id, "error slice without a pending forward pass"))?;
        if values.shape() != pass.enc.sample.shape() {
            return Err(Error::protocol(
                self.id,
                format!(
                    "slice shape {:?} does not match activation {:?}",
                    values.shape(),
                    pass.enc.sample.shape()
                ),
            ));
        }
        let (_, grads) = encoder_backward(&self.net, &pass, values, &self.prior, s)?;
        self.net.apply(&grads, lr)
    }

    /// Inference message for a fresh observation: the encoder mean.
    pub fn prediction_request(&self, x: &Tensor, quantizer: &Quantizer, s_bits: u32) -> Result<Message> {
        let mean = encoder_mean(&self.net, x)?;
        Ok(Message::new(
            Payload::PredictionRequest {
                node: self.id,
                values: quantizer.apply(&mean),
            },
            quantizer.width_bits(s_bits),
        ))
    }
}

/// Output of one fusion training step.
#[derive(Debug, Clone)]
pub struct FusionStep {
    pub joint: Tensor,
    pub marginals: Vec<Tensor>,
    pub errors: Vec<Message>,
}

/// The central node `J+1`.
#[derive(Debug, Clone)]
pub struct FusionNode {
    pub net: Network,
    pub heads: Vec<Network>,
    labels: Vec<usize>,
    widths: Vec<usize>,
}

impl FusionNode {
    pub fn new(net: Network, heads: Vec<Network>, labels: Vec<usize>, widths: Vec<usize>) -> Result<Self> {
        let p: usize = widths.iter().sum();
        if p != net.input_width() {
            return Err(Error::protocol(
                0,
                format!("slices {widths:?} sum to {p}, fusion input has width {}", net.input_width()),
            ));
        }
        if heads.len() != widths.len()
            || heads.iter().zip(&widths).any(|(h, &w)| h.input_width() != w)
        {
            return Err(Error::Validation("one marginal head per slice is required".into()));
        }
        Ok(Self {
            net,
            heads,
            labels,
            widths,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Checks the J messages and concatenates them by node id.
    fn gather(&self, msgs: &[Message], train: bool) -> Result<Tensor> {
        let mut by_node: Vec<Option<&Tensor>> = vec![None; self.widths.len()];
        for msg in msgs {
            let (node, values) = match (&msg.payload, train) {
                (Payload::ActivationBatch { node, values }, true)
                | (Payload::PredictionRequest { node, values }, false) => (*node, values),
                _ => return Err(Error::protocol(0, "unexpected message kind at fusion node")),
            };
            if node == 0 || node > self.widths.len() {
                return Err(Error::protocol(node, "unknown node id"));
            }
            if values.cols() != self.widths[node - 1] {
                return Err(Error::protocol(
                    node,
                    format!("activation width {} but slice width {}", values.cols(), self.widths[node - 1]),
                ));
            }
            if by_node[node - 1].replace(values).is_some() {
                return Err(Error::protocol(node, "duplicate activation"));
            }
        }
        let parts = by_node
            .iter()
            .enumerate()
            .map(|(j, t)| t.ok_or(Error::UnavailableView(j + 1)))
            .collect::<Result<Vec<_>>>()?;
        let batch = parts[0].rows();
        if let Some(j) = parts.iter().position(|t| t.rows() != batch) {
            return Err(Error::protocol(j + 1, "batch size differs from node 1"));
        }
        Tensor::concat_features(&parts)
    }

    pub fn train_step(&mut self, msgs: &[Message], indices: &[usize], s: f64, lr: f64, s_bits: u32) -> Result<FusionStep> {
        let latents = self.gather(msgs, true)?;
        if latents.rows() != indices.len() {
            return Err(Error::protocol(0, "batch size does not match sample indices"));
        }
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        let pass = fusion_forward(&self.net, &self.heads, &latents, &self.widths)?;
        let back = fusion_backward(&self.net, &self.heads, &pass, &labels, &self.widths, s)?;
        self.net.apply(&back.fusion, lr)?;
        for (h, g) in self.heads.iter_mut().zip(&back.heads) {
            h.apply(g, lr)?;
        }
        let errors = split_error(&back.input_error, &self.widths)?
            .into_iter()
            .enumerate()
            .map(|(j, values)| Message::new(Payload::ErrorSlice { node: j + 1, values }, s_bits))
            .collect();
        Ok(FusionStep {
            joint: pass.joint().clone(),
            marginals: pass.marginals(),
            errors,
        })
    }

    pub fn infer(&self, msgs: &[Message], s_bits: u32) -> Result<Message> {
        let latents = self.gather(msgs, false)?;
        let distribution = self.net.forward(&latents)?.output().clone();
        Ok(Message::new(Payload::SoftPrediction { distribution }, s_bits))
    }
}

/// Splits a glued stack into nodes holding the given views and labels.
pub fn deploy(stack: &InlStack, views: Vec<Tensor>, labels: Vec<usize>) -> Result<(Vec<EncoderNode>, FusionNode)> {
    if views.len() != stack.branches() {
        return Err(Error::Validation(format!(
            "{} views for {} encoders",
            views.len(),
            stack.branches()
        )));
    }
    if let Some(j) = views.iter().position(|v| v.rows() != labels.len()) {
        return Err(Error::protocol(j + 1, "view not aligned with labels"));
    }
    let nodes = stack
        .encoders
        .iter()
        .zip(&stack.priors)
        .zip(views)
        .enumerate()
        .map(|(j, ((net, prior), view))| EncoderNode::new(j + 1, net.clone(), prior.clone(), view))
        .collect::<Result<Vec<_>>>()?;
    let fusion = FusionNode::new(stack.fusion.clone(), stack.heads.clone(), labels, stack.widths())?;
    Ok((nodes, fusion))
}

/// Reassembles the trained networks into a glued stack.
pub fn collect(nodes: &[EncoderNode], fusion: &FusionNode) -> Result<InlStack> {
    InlStack::from_parts(
        nodes.iter().map(|n| n.net.clone()).collect(),
        nodes.iter().map(|n| n.prior.clone()).collect(),
        fusion.net.clone(),
        fusion.heads.clone(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub s: f64,
    pub s_bits: u32,
    #[serde(default)]
    pub quantizer: Quantizer,
    /// Reparametrization samples per datum per step.
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl EpochConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.samples == 0 || self.s_bits == 0 {
            return Err(Error::Validation("batch size, sample count and s_bits must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.s.is_finite() || self.s < 0.0 {
            return Err(Error::Validation(format!("need lr > 0 and s ≥ 0, got lr={} s={}", self.lr, self.s)));
        }
        self.quantizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub loss: LossBreakdown,
    pub bits: u64,
}

/// Mini-batch index lists for one epoch, each repeated `samples` times.
pub fn batches(n: usize, cfg: &EpochConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(cfg.batch_size)
        .map(|chunk| {
            let mut idx = Vec::with_capacity(chunk.len() * cfg.samples);
            for _ in 0..cfg.samples {
                idx.extend_from_slice(chunk);
            }
            idx
        })
        .collect()
}

/// One synchronous training epoch over aligned shards.
pub fn train_epoch(
    nodes: &mut [EncoderNode],
    fusion: &mut FusionNode,
    cfg: &EpochConfig,
    epoch: usize,
    order_rng: &mut ChaCha8Rng,
    noise: &mut NoiseSource,
    log: &mut MessageLog,
) -> Result<EpochMetrics> {
    cfg.validate()?;
    if nodes.len() != fusion.widths().len() {
        return Err(Error::protocol(0, format!("{} nodes for {} slices", nodes.len(), fusion.widths().len())));
    }
    for (j, node) in nodes.iter().enumerate() {
        if node.id != j + 1 {
            return Err(Error::protocol(node.id, format!("expected node id {}", j + 1)));
        }
        if node.slice_width() != fusion.widths()[j] {
            return Err(Error::protocol(node.id, "slice width does not match the fusion input"));
        }
        if node.samples() != fusion.labels().len() {
            return Err(Error::protocol(node.id, "shard not aligned with fusion labels"));
        }
    }
    let bits_before = log.meter().total;
    let mut loss = LossBreakdown::default();
    let mut seen = 0;
    for (b, idx) in batches(fusion.labels().len(), cfg, order_rng).iter().enumerate() {
        let mut msgs = Vec::with_capacity(nodes.len());
        let mut rates = Vec::with_capacity(nodes.len());
        for (j, node) in nodes.iter_mut().enumerate() {
            let eps = noise.draw(j, idx, node.slice_width())?;
            let (msg, r) = node.forward(idx, &eps, &cfg.quantizer, cfg.s_bits)?;
            log.record(epoch, b, &msg);
            msgs.push(msg);
            rates.push(r);
        }
        let step = fusion.train_step(&msgs, idx, cfg.s, cfg.lr, cfg.s_bits)?;
        for (node, msg) in nodes.iter_mut().zip(&step.errors) {
            log.record(epoch, b, msg);
            node.receive_error(msg, cfg.s, cfg.lr)?;
        }
        let labels: Vec<usize> = idx.iter().map(|&i| fusion.labels()[i]).collect();
        let batch_loss = inl_loss(&step.joint, &step.marginals, &rates, &labels, cfg.s)?;
        if !batch_loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {b}")));
        }
        loss.merge(seen, &batch_loss, idx.len());
        seen += idx.len();
    }
    Ok(EpochMetrics {
        loss,
        bits: log.meter().total - bits_before,
    })
}

/// Joint soft prediction for one batch of observations, one view per node.
/// Inference traffic is appended to `log` under [`Phase::Inference`].
pub fn infer(
    nodes: &[EncoderNode],
    fusion: &FusionNode,
    views: &[Option<Tensor>],
    quantizer: &Quantizer,
    s_bits: u32,
    log: Option<&mut MessageLog>,
) -> Result<Message> {
    if views.len() != nodes.len() {
        return Err(Error::UnavailableView(views.len() + 1));
    }
    let msgs = nodes
        .iter()
        .zip(views)
        .map(|(node, x)| {
            let x = x.as_ref().ok_or(Error::UnavailableView(node.id))?;
            node.prediction_request(&x.as_batch(), quantizer, s_bits)
        })
        .collect::<Result<Vec<_>>>()?;
    let answer = fusion.infer(&msgs, s_bits)?;
    if let Some(log) = log {
        for m in msgs.iter().chain(std::iter::once(&answer)) {
            log.record(0, 0, m);
        }
    }
    Ok(answer)
}
