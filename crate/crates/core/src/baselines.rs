//! Federated averaging and split learning on the same dense networks, with
//! every parameter and activation transfer written to a [`MessageLog`].
//!
//! Client ids start at 1; id 0 is the parameter server (FL) or the server
//! half of the split model (SL).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Shard;
use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, Network};
use crate::protocol::{Direction, MessageLog};
use crate::tensor::Tensor;
use crate::vloss::{log_loss, logit_gradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Uniform,
    /// Weighted by shard size.
    Weighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub s_bits: u32,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "yes")]
    pub shuffle: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.local_epochs == 0 || self.s_bits == 0 {
            return Err(Error::Validation("batch size, local epochs and s_bits must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Validation(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Mean log-likelihood and transmitted bits of one round or epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundMetrics {
    pub log_likelihood: f64,
    pub bits: u64,
}

fn order(n: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(rng);
    }
    idx
}

fn batch_log_likelihood(pred: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut acc = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        acc -= log_loss(y, pred.row(r))?;
    }
    Ok(acc)
}

/// One cross-entropy SGD step on a softmax classifier; returns the batch's
/// summed log-likelihood.
pub fn classifier_step(net: &mut Network, x: &Tensor, labels: &[usize], lr: f64) -> Result<f64> {
    let trace = net.forward(x)?;
    let ll = batch_log_likelihood(trace.output(), labels)?;
    let back = net.backward_from_delta(&trace, logit_gradient(trace.output(), labels, 1.0))?;
    net.sgd_step(&trace, &back, lr)?;
    Ok(ll)
}

/// Uniform or weighted average of congruent parameter vectors.
pub fn fedavg(params: &[Vec<f64>], weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let first = params
        .first()
        .ok_or_else(|| Error::Validation("nothing to average".into()))?;
    if params.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Validation("parameter vectors differ in length".into()));
    }
    let uniform = vec![1.0; params.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != params.len() || w.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Validation("one non-negative weight per client".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Validation("weights sum to zero".into()));
    }
    let mut out = vec![0.0; first.len()];
    for (p, &wi) in params.iter().zip(w) {
        for (o, v) in out.iter_mut().zip(p) {
            *o += wi * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FlClient {
    pub id: usize,
    pub net: Network,
    pub shard: Shard,
}

impl FlClient {
    /// Local SGD from the current weights; returns summed log-likelihood.
    pub fn train_local(&mut self, cfg: &BaselineConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut ll = 0.0;
        for _ in 0..cfg.local_epochs {
            let idx = order(self.shard.labels.len(), cfg.shuffle, rng);
            for chunk in idx.chunks(cfg.batch_size) {
                let x = self.shard.features.select_rows(chunk);
                let y: Vec<usize> = chunk.iter().map(|&i| self.shard.labels[i]).collect();
                ll += classifier_step(&mut self.net, &x, &y, cfg.lr)?;
            }
        }
        Ok(ll)
    }
}

/// Builds one client per shard, each with a copy of `model`.
pub fn fl_clients(model: &Network, shards: Vec<Shard>) -> Result<Vec<FlClient>> {
    shards
        .into_iter()
        .enumerate()
        .map(|(j, shard)| {
            if shard.features.cols() != model.input_width() {
                return Err(Error::Validation(format!(
                    "client {} features have width {}, model expects {}",
                    j + 1,
                    shard.features.cols(),
                    model.input_width()
                )));
            }
            Ok(FlClient {
                id: j + 1,
                net: model.clone(),
                shard,
            })
        })
        .collect()
}

/// One FedAvg round: download, local training, upload, average.
/// Downloads are logged as `bwd`, uploads as `fwd`, `N` values each.
pub fn fl_round(
    clients: &mut [FlClient],
    server: &mut Network,
    cfg: &BaselineConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
    log: &mut MessageLog,
) -> Result<RoundMetrics> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::Validation("no clients".into()));
    }
    let global = server.params();
    let n = global.len() as u64;
    let bits_before = log.meter().total;
    let mut ll = 0.0;
    let mut seen = 0usize;
    let mut uploads = Vec::with_capacity(clients.len());
    let mut sizes = Vec::with_capacity(clients.len());
    for c in clients.iter_mut() {
        if !c.net.same_architecture(server) {
            return Err(Error::Validation(format!("client {} architecture differs from the server", c.id)));
        }
        log.record_transfer(round, c.id, Direction::Bwd, c.id, n, cfg.s_bits);
        c.net.set_params(&global)?;
        ll += c.train_local(cfg, rng)?;
        seen += c.shard.labels.len() * cfg.local_epochs;
        log.record_transfer(round, c.id, Direction::Fwd, c.id, n, cfg.s_bits);
        uploads.push(c.net.params());
        sizes.push(c.shard.labels.len() as f64);
    }
    let weights = match cfg.aggregation {
        Aggregation::Uniform => None,
        Aggregation::Weighted => Some(sizes.as_slice()),
    };
    server.set_params(&fedavg(&uploads, weights)?)?;
    let ll = ll / seen.max(1) as f64;
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("FL log-likelihood in round {round}")));
    }
    Ok(RoundMetrics {
        log_likelihood: ll,
        bits: log.meter().total - bits_before,
    })
}

#[derive(Debug, Clone)]
pub struct SlClient {
    pub id: usize,
    pub net: Network,
    pub shard: Shard,
}

/// Split learning: clients hold the lower layers and take turns training
/// with the server, handing their weights to the next client afterwards.
#[derive(Debug, Clone)]
pub struct SplitModel {
    pub clients: Vec<SlClient>,
    pub server: Network,
}

impl SplitModel {
    pub fn new(client_net: &Network, server: Network, shards: Vec<Shard>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::Validation("split learning needs at least one client".into()));
        }
        if client_net.output_width() != server.input_width() {
            return Err(Error::Dimension {
                layer: 0,
                expected: client_net.output_width(),
                got: server.input_width(),
            });
        }
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(j, shard)| {
                if shard.features.cols() != client_net.input_width() {
                    return Err(Error::Validation(format!("client {} feature width mismatch", j + 1)));
                }
                Ok(SlClient {
                    id: j + 1,
                    net: client_net.clone(),
                    shard,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clients, server })
    }

    /// Width of the cut layer, `p`.
    pub fn cut_width(&self) -> usize {
        self.server.input_width()
    }

    /// The most recently trained client-side weights.
    pub fn latest_client(&self) -> &Network {
        &self.clients[0].net
    }

    /// Client-side then server-side forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let cut = self.latest_client().forward(x)?;
        Ok(self.server.forward(cut.output())?.output().clone())
    }

    pub fn total_params(&self) -> usize {
        self.latest_client().param_count() + self.server.param_count()
    }

    /// One split step: activations up, errors down, both halves updated.
    fn step(client: &mut Network, server: &mut Network, x: &Tensor, labels: &[usize], lr: f64) -> Result<(f64, ForwardTrace)> {
        let ctrace = client.forward(x)?;
        let strace = server.forward(ctrace.output())?;
        let ll = batch_log_likelihood(strace.output(), labels)?;
        let sback = server.backward_from_delta(&strace, logit_gradient(strace.output(), labels, 1.0))?;
        server.sgd_step(&strace, &sback, lr)?;
        let cback = client.backward(&ctrace, &sback.input_error)?;
        client.sgd_step(&ctrace, &cback, lr)?;
        Ok((ll, ctrace))
    }
}

/// One SL epoch: each client in order trains one pass over its shard with the
/// server, then hands its client-side weights to the next (the last one hands
/// back to the first). Activations are logged `fwd`, errors `bwd`, weights
/// `handoff`, all at `s_bits` per value.
pub fn sl_epoch(
    model: &mut SplitModel,
    cfg: &BaselineConfig,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    log: &mut MessageLog,
) -> Result<RoundMetrics> {
    cfg.validate()?;
    let j = model.clients.len();
    if j == 0 {
        return Err(Error::Validation("split learning needs at least one client".into()));
    }
    let p = model.cut_width() as u64;
    let bits_before = log.meter().total;
    let mut ll = 0.0;
    let mut seen = 0usize;
    let mut batch = 0;
    for k in 0..j {
        let client = &mut model.clients[k];
        let idx = order(client.shard.labels.len(), cfg.shuffle, rng);
        for chunk in idx.chunks(cfg.batch_size) {
            let x = client.shard.features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| client.shard.labels[i]).collect();
            let (batch_ll, _) = SplitModel::step(&mut client.net, &mut model.server, &x, &y, cfg.lr)?;
            let values = chunk.len() as u64 * p;
            log.record_transfer(epoch, batch, Direction::Fwd, client.id, values, cfg.s_bits);
            log.record_transfer(epoch, batch, Direction::Bwd, client.id, values, cfg.s_bits);
            ll += batch_ll;
            seen += chunk.len();
            batch += 1;
        }
        let weights = client.net.clone();
        let next = (k + 1) % j;
        log.record_transfer(epoch, batch, Direction::Handoff, client.id, weights.param_count() as u64, cfg.s_bits);
        model.clients[next].net = weights;
    }
    let ll = ll / seen.max(1) as f64;
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("SL log-likelihood in epoch {epoch}")));
    }
    Ok(RoundMetrics {
        log_likelihood: ll,
        bits: log.meter().total - bits_before,
    })
}

/// Per-feature mean of several aligned views.
pub fn mean_view(views: &[Tensor]) -> Result<Tensor> {
    let first = views
        .first()
        .ok_or_else(|| Error::Validation("no views to average".into()))?;
    if views.iter().any(|v| v.shape() != first.shape()) {
        return Err(Error::Shape("views differ in shape".into()));
    }
    let mut out = Tensor::zeros(first.shape());
    for v in views {
        for (o, x) in out.data_mut().iter_mut().zip(v.data()) {
            *o += x;
        }
    }
    let n = views.len() as f64;
    out.data_mut().iter_mut().for_each(|o| *o /= n);
    Ok(out)
}
