//! Experiment configuration, runs and result bundles.
//!
//! A run writes into its output directory:
//!
//! - `metrics.csv`: one row per epoch,
//!   `epoch,scheme,loss_total,loss_joint,loss_marginal,loss_rate,test_acc,cum_bits`
//! - `messages.csv`: the training message log
//! - `config.json`: the configuration that produced the run
//! - `bundle.json`: summary, dataset hashes and closed-form cross-checks
//! - `checkpoint/*.innet`: final weights
//!
//! Loss columns are objective values (log-likelihoods, higher is better).
//! For the baselines `loss_total` and `loss_joint` hold the mean
//! log-likelihood and the other two columns are zero.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandwidth::CostModel;
use crate::baselines::{self, Aggregation, BaselineConfig, SplitModel};
use crate::datagen::{partition, DatasetParams, MultiViewDataset, Scheme};
use crate::error::{Error, Result};
use crate::nn::{Activation, Network};
use crate::protocol::{self, EpochConfig, MessageLog, Quantizer};
use crate::stack::{accuracy, InlStack, NoiseSource, StackShape};
use crate::tensor::Tensor;
use crate::vloss::{LossBreakdown, Prior};

pub const METRICS_HEADER: &str = "epoch,scheme,loss_total,loss_joint,loss_marginal,loss_rate,test_acc,cum_bits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Inl,
    Fl,
    Sl,
}

impl SchemeKind {
    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Inl => "inl",
            SchemeKind::Fl => "fl",
            SchemeKind::Sl => "sl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "inl" => Some(SchemeKind::Inl),
            "fl" => Some(SchemeKind::Fl),
            "sl" => Some(SchemeKind::Sl),
            _ => None,
        }
    }
}

/// How the baselines see the data. In-network learning always gives node
/// `j` view `j` of every sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Baseline clients hold all views of disjoint sample blocks.
    #[default]
    Exp1,
    /// Baseline client `j` holds view `j` of every sample; baselines are
    /// tested on the per-feature mean of the views.
    Exp2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub encoder_hidden: Vec<usize>,
    /// `d_u` per encoder.
    pub latent: usize,
    pub fusion_hidden: Vec<usize>,
    pub activation: Activation,
    #[serde(default)]
    pub prior: Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Lagrange weight of the per-node terms.
    pub s: f64,
    #[serde(default = "one")]
    pub samples: usize,
    #[serde(default = "one")]
    pub local_epochs: usize,
    #[serde(default)]
    pub aggregation: Aggregation,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostParams {
    pub s_bits: u32,
    #[serde(default)]
    pub quantizer: Quantizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scheme: SchemeKind,
    #[serde(default)]
    pub layout: Layout,
    /// Number of encoder nodes or clients; must equal the number of views.
    pub nodes: usize,
    pub dataset: DatasetParams,
    pub model: ModelParams,
    pub training: TrainParams,
    pub cost: CostParams,
    /// Seed for initialization, batching and reparametrization noise.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale presets `exp1-desk` and `exp2-desk`.
    pub fn preset(name: &str, scheme: SchemeKind) -> Result<Self> {
        let layout = match name {
            "exp1-desk" => Layout::Exp1,
            "exp2-desk" => Layout::Exp2,
            _ => {
                return Err(Error::Config {
                    line: None,
                    msg: format!("unknown preset {name:?} (expected exp1-desk or exp2-desk)"),
                })
            }
        };
        let dataset = DatasetParams::default();
        Ok(Self {
            scheme,
            layout,
            nodes: dataset.sigmas.len(),
            dataset,
            model: ModelParams {
                encoder_hidden: vec![32],
                latent: 2,
                fusion_hidden: vec![32],
                activation: Activation::Relu,
                prior: Prior::StandardNormal,
            },
            training: TrainParams {
                epochs: 50,
                batch_size: 32,
                lr: 0.05,
                s: 0.01,
                samples: 1,
                local_epochs: 1,
                aggregation: Aggregation::Uniform,
            },
            cost: CostParams {
                s_bits: 32,
                quantizer: Quantizer::Off,
            },
            seed: 7,
            output: None,
        })
    }

    /// Parses JSON; syntax and semantic errors carry the offending line.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config {
            line: Some(e.line()),
            msg: e.to_string(),
        })?;
        cfg.check().map_err(|(key, msg)| Error::Config {
            line: locate(text, key),
            msg,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, msg)| Error::Config { line: None, msg })
    }

    /// First failing field and a message.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let d = &self.dataset;
        if self.nodes == 0 {
            return Err(("nodes", "nodes must be positive".into()));
        }
        if d.sigmas.len() != self.nodes {
            return Err(("sigmas", format!("{} noise levels for {} nodes", d.sigmas.len(), self.nodes)));
        }
        if d.sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(("sigmas", "noise levels must be finite and ≥ 0".into()));
        }
        if d.q == 0 {
            return Err(("q", "q must be positive".into()));
        }
        if d.test_q == 0 {
            return Err(("test_q", "test_q must be positive".into()));
        }
        if d.classes < 2 || d.classes > d.d {
            return Err(("classes", format!("classes must be in [2, d={}], got {}", d.d, d.classes)));
        }
        if !(d.separation >= 0.0) || !d.separation.is_finite() {
            return Err(("separation", "separation must be finite and ≥ 0".into()));
        }
        if self.layout == Layout::Exp1 && self.scheme != SchemeKind::Inl && d.q < self.nodes {
            return Err(("q", format!("q={} cannot be split over {} clients", d.q, self.nodes)));
        }
        let m = &self.model;
        if m.latent == 0 {
            return Err(("latent", "latent width must be positive".into()));
        }
        if m.encoder_hidden.contains(&0) {
            return Err(("encoder_hidden", "hidden widths must be positive".into()));
        }
        if m.fusion_hidden.contains(&0) {
            return Err(("fusion_hidden", "hidden widths must be positive".into()));
        }
        if m.activation == Activation::Softmax {
            return Err(("activation", "softmax cannot be a hidden activation".into()));
        }
        let t = &self.training;
        if t.epochs == 0 {
            return Err(("epochs", "epochs must be positive".into()));
        }
        if t.batch_size == 0 {
            return Err(("batch_size", "batch_size must be positive".into()));
        }
        if !(t.lr > 0.0) || !t.lr.is_finite() {
            return Err(("lr", format!("lr must be positive, got {}", t.lr)));
        }
        if !(t.s >= 0.0) || !t.s.is_finite() {
            return Err(("\"s\"", format!("s must be finite and ≥ 0, got {}", t.s)));
        }
        if t.samples == 0 {
            return Err(("samples", "samples must be positive".into()));
        }
        if t.local_epochs == 0 {
            return Err(("local_epochs", "local_epochs must be positive".into()));
        }
        if self.cost.s_bits == 0 || self.cost.s_bits > 64 {
            return Err(("s_bits", format!("s_bits must be in 1..=64, got {}", self.cost.s_bits)));
        }
        self.cost
            .quantizer
            .validate()
            .map_err(|e| ("quantizer", e.to_string()))
    }

    pub fn stack_shape(&self) -> StackShape {
        StackShape {
            view_widths: vec![self.dataset.d; self.nodes],
            encoder_hidden: self.model.encoder_hidden.clone(),
            latent: self.model.latent,
            fusion_hidden: self.model.fusion_hidden.clone(),
            classes: self.dataset.classes,
            activation: self.model.activation,
        }
    }

    /// Baseline layer widths `(client side, server side)`, split at the cut
    /// layer of width `p = J·d_u`. In Exp1 the branches are merged into one
    /// dense net over the stacked views; in Exp2 each client runs a single
    /// branch on its own view.
    pub fn baseline_widths(&self) -> (Vec<usize>, Vec<usize>) {
        let j = self.nodes;
        let p = j * self.model.latent;
        let mut client = Vec::new();
        match self.layout {
            Layout::Exp1 => {
                client.push(j * self.dataset.d);
                client.extend(self.model.encoder_hidden.iter().map(|h| j * h));
            }
            Layout::Exp2 => {
                client.push(self.dataset.d);
                client.extend(&self.model.encoder_hidden);
            }
        }
        client.push(p);
        let mut server = vec![p];
        server.extend(&self.model.fusion_hidden);
        server.push(self.dataset.classes);
        (client, server)
    }

    fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            batch_size: self.training.batch_size,
            lr: self.training.lr,
            s_bits: self.cost.s_bits,
            local_epochs: self.training.local_epochs,
            aggregation: self.training.aggregation,
            shuffle: true,
        }
    }
}

/// Line of the first occurrence of a JSON key.
fn locate(text: &str, key: &str) -> Option<usize> {
    let needle = if key.starts_with('"') { key.to_string() } else { format!("\"{key}\"") };
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub scheme: String,
    pub loss_total: f64,
    pub loss_joint: f64,
    pub loss_marginal: f64,
    pub loss_rate: f64,
    pub test_acc: f64,
    pub cum_bits: u64,
}

impl MetricsRow {
    fn from_loss(epoch: usize, scheme: SchemeKind, loss: &LossBreakdown, acc: f64, cum_bits: u64) -> Self {
        Self {
            epoch,
            scheme: scheme.name().into(),
            loss_total: loss.total,
            loss_joint: loss.joint_ll,
            loss_marginal: loss.marginal_sum(),
            loss_rate: loss.rate_sum(),
            test_acc: acc,
            cum_bits,
        }
    }

    fn baseline(epoch: usize, scheme: SchemeKind, ll: f64, acc: f64, cum_bits: u64) -> Self {
        Self {
            epoch,
            scheme: scheme.name().into(),
            loss_total: ll,
            loss_joint: ll,
            loss_marginal: 0.0,
            loss_rate: 0.0,
            test_acc: acc,
            cum_bits,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.8},{:.8},{:.8},{:.8},{:.6},{}",
            self.epoch,
            self.scheme,
            self.loss_total,
            self.loss_joint,
            self.loss_marginal,
            self.loss_rate,
            self.test_acc,
            self.cum_bits
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format {
            what: "metrics row",
            msg: format!("{msg}: {line:?}"),
        };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
            scheme: f[1].to_string(),
            loss_total: num(f[2])?,
            loss_joint: num(f[3])?,
            loss_marginal: num(f[4])?,
            loss_rate: num(f[5])?,
            test_acc: num(f[6])?,
            cum_bits: f[7].parse().map_err(|_| bad("bad bit count"))?,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Format {
            what: "metrics csv",
            msg: "missing or unexpected header".into(),
        });
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse).collect()
}

/// Summary written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub scheme: SchemeKind,
    pub layout: Layout,
    pub epochs: usize,
    pub train_hash: String,
    pub test_hash: String,
    pub q: usize,
    /// Parameters of the full model (all nets of the scheme).
    pub params: usize,
    /// Cut or fusion-input width.
    pub p: usize,
    pub final_test_acc: f64,
    pub metered_bits: u64,
    /// Closed-form bits per epoch for the same configuration.
    pub formula_bits_per_epoch: f64,
}

/// Everything a run produced, kept in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub rows: Vec<MetricsRow>,
    pub log: MessageLog,
    pub bundle: Bundle,
    pub checkpoints: Vec<(String, Network)>,
}

impl RunResult {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.rows)
    }

    /// Writes the bundle files into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("checkpoint"))?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv())?;
        self.log.write_csv(BufWriter::new(fs::File::create(dir.join("messages.csv"))?))?;
        fs::write(dir.join("config.json"), self.config.to_json())?;
        fs::write(
            dir.join("bundle.json"),
            serde_json::to_string_pretty(&self.bundle)? + "\n",
        )?;
        for (name, net) in &self.checkpoints {
            let f = fs::File::create(dir.join("checkpoint").join(format!("{name}.innet")))?;
            net.write_checkpoint(BufWriter::new(f))?;
        }
        Ok(())
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = 0;
const ORDER_STREAM: u64 = 100;
const NOISE_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

/// Trains the configured scheme and returns all outputs. Aborts with
/// [`Error::NonFinite`] as soon as a loss is NaN or infinite.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.generate()?;
    match cfg.scheme {
        SchemeKind::Inl => run_inl(cfg, &train, &test),
        SchemeKind::Fl => run_fl(cfg, &train, &test),
        SchemeKind::Sl => run_sl(cfg, &train, &test),
    }
}

fn run_inl(cfg: &ExperimentConfig, train: &MultiViewDataset, test: &MultiViewDataset) -> Result<RunResult> {
    let shape = cfg.stack_shape();
    let mut init = rng_for(cfg.seed, INIT_STREAM);
    let mut stack = InlStack::new(&shape, &mut init)?;
    stack.priors = vec![cfg.model.prior.clone(); cfg.nodes];
    let (mut nodes, mut fusion) = protocol::deploy(&stack, train.views.clone(), train.labels.clone())?;
    let ecfg = EpochConfig {
        batch_size: cfg.training.batch_size,
        lr: cfg.training.lr,
        s: cfg.training.s,
        s_bits: cfg.cost.s_bits,
        quantizer: cfg.cost.quantizer,
        samples: cfg.training.samples,
        shuffle: true,
    };
    let mut order = rng_for(cfg.seed, ORDER_STREAM);
    let mut noise = NoiseSource::seeded(cfg.seed ^ NOISE_SEED_MIX, cfg.nodes);
    let mut log = MessageLog::new();
    let mut rows = Vec::with_capacity(cfg.training.epochs);
    let mut cum = 0;
    for epoch in 1..=cfg.training.epochs {
        let m = protocol::train_epoch(&mut nodes, &mut fusion, &ecfg, epoch, &mut order, &mut noise, &mut log)?;
        cum += m.bits;
        stack = protocol::collect(&nodes, &fusion)?;
        let acc = accuracy(&stack.predict(&test.views)?, &test.labels);
        rows.push(MetricsRow::from_loss(epoch, SchemeKind::Inl, &m.loss, acc, cum));
    }
    let p = shape.fusion_width();
    let q_total = (train.len() * cfg.nodes) as u64;
    let cost = CostModel {
        p: p as u64,
        q: q_total * cfg.training.samples as u64,
        j: cfg.nodes as u64,
        n: stack.param_count() as u64,
        s_bits: u64::from(cfg.cost.quantizer.width_bits(cfg.cost.s_bits)),
        eta_frac: 0.0,
    };
    let mut checkpoints: Vec<(String, Network)> = stack
        .encoders
        .iter()
        .enumerate()
        .map(|(j, n)| (format!("encoder_{}", j + 1), n.clone()))
        .collect();
    checkpoints.push(("fusion".into(), stack.fusion.clone()));
    checkpoints.extend(stack.heads.iter().enumerate().map(|(j, n)| (format!("head_{}", j + 1), n.clone())));
    finish(cfg, train, test, rows, log, checkpoints, stack.param_count(), p, cost.inl_bits())
}

fn baseline_inputs(cfg: &ExperimentConfig, test: &MultiViewDataset) -> Result<Tensor> {
    match cfg.layout {
        Layout::Exp1 => Tensor::concat_features(&test.views.iter().collect::<Vec<_>>()),
        Layout::Exp2 => baselines::mean_view(&test.views),
    }
}

fn baseline_scheme(cfg: &ExperimentConfig) -> Scheme {
    match (cfg.layout, cfg.scheme) {
        (Layout::Exp2, _) => Scheme::SharedExp2,
        (Layout::Exp1, SchemeKind::Sl) => Scheme::SlExp1,
        (Layout::Exp1, _) => Scheme::FlExp1,
    }
}

fn run_fl(cfg: &ExperimentConfig, train: &MultiViewDataset, test: &MultiViewDataset) -> Result<RunResult> {
    let (mut sizes, server) = cfg.baseline_widths();
    sizes.extend(&server[1..]);
    let mut init = rng_for(cfg.seed, INIT_STREAM);
    let model = Network::random(&sizes, cfg.model.activation, Activation::Softmax, &mut init)?;
    let part = partition(train, baseline_scheme(cfg))?;
    let q_used: usize = part.shards.iter().map(|s| s.labels.len()).sum();
    let mut clients = baselines::fl_clients(&model, part.shards)?;
    let mut server_net = model;
    let bcfg = cfg.baseline_config();
    let test_x = baseline_inputs(cfg, test)?;
    let mut order = rng_for(cfg.seed, ORDER_STREAM);
    let mut log = MessageLog::new();
    let mut rows = Vec::with_capacity(cfg.training.epochs);
    let mut cum = 0;
    for round in 1..=cfg.training.epochs {
        let m = baselines::fl_round(&mut clients, &mut server_net, &bcfg, round, &mut order, &mut log)?;
        cum += m.bits;
        let acc = accuracy(server_net.forward(&test_x)?.output(), &test.labels);
        rows.push(MetricsRow::baseline(round, SchemeKind::Fl, m.log_likelihood, acc, cum));
    }
    let n = server_net.param_count();
    let cost = CostModel {
        p: 0,
        q: q_used as u64,
        j: cfg.nodes as u64,
        n: n as u64,
        s_bits: u64::from(cfg.cost.s_bits),
        eta_frac: 0.0,
    };
    finish(cfg, train, test, rows, log, vec![("model".into(), server_net)], n, 0, cost.fl_bits())
}

fn run_sl(cfg: &ExperimentConfig, train: &MultiViewDataset, test: &MultiViewDataset) -> Result<RunResult> {
    let (client_w, server_w) = cfg.baseline_widths();
    let mut init = rng_for(cfg.seed, INIT_STREAM);
    let client = Network::random(&client_w, cfg.model.activation, cfg.model.activation, &mut init)?;
    let server = Network::random(&server_w, cfg.model.activation, Activation::Softmax, &mut init)?;
    let part = partition(train, baseline_scheme(cfg))?;
    let q_used: usize = part.shards.iter().map(|s| s.labels.len()).sum();
    let mut model = SplitModel::new(&client, server, part.shards)?;
    let bcfg = cfg.baseline_config();
    let test_x = baseline_inputs(cfg, test)?;
    let mut order = rng_for(cfg.seed, ORDER_STREAM);
    let mut log = MessageLog::new();
    let mut rows = Vec::with_capacity(cfg.training.epochs);
    let mut cum = 0;
    for epoch in 1..=cfg.training.epochs {
        let m = baselines::sl_epoch(&mut model, &bcfg, epoch, &mut order, &mut log)?;
        cum += m.bits;
        let acc = accuracy(&model.predict(&test_x)?, &test.labels);
        rows.push(MetricsRow::baseline(epoch, SchemeKind::Sl, m.log_likelihood, acc, cum));
    }
    let n = model.total_params();
    let p = model.cut_width();
    let cost = CostModel {
        p: p as u64,
        q: q_used as u64,
        j: cfg.nodes as u64,
        n: n as u64,
        s_bits: u64::from(cfg.cost.s_bits),
        eta_frac: model.latest_client().param_count() as f64 / n as f64,
    };
    let checkpoints = vec![
        ("client".to_string(), model.latest_client().clone()),
        ("server".to_string(), model.server.clone()),
    ];
    finish(cfg, train, test, rows, log, checkpoints, n, p, cost.sl_bits())
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &ExperimentConfig,
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    rows: Vec<MetricsRow>,
    log: MessageLog,
    checkpoints: Vec<(String, Network)>,
    params: usize,
    p: usize,
    formula_bits_per_epoch: f64,
) -> Result<RunResult> {
    let bundle = Bundle {
        scheme: cfg.scheme,
        layout: cfg.layout,
        epochs: rows.len(),
        train_hash: train.content_hash(),
        test_hash: test.content_hash(),
        q: train.len(),
        params,
        p,
        final_test_acc: rows.last().map_or(0.0, |r| r.test_acc),
        metered_bits: rows.last().map_or(0, |r| r.cum_bits),
        formula_bits_per_epoch,
    };
    Ok(RunResult {
        config: cfg.clone(),
        rows,
        log,
        bundle,
        checkpoints,
    })
}

/// A completed bundle read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub dir: PathBuf,
    pub bundle: Bundle,
    pub rows: Vec<MetricsRow>,
}

pub fn load_bundle(dir: &Path) -> Result<LoadedBundle> {
    let bundle: Bundle = serde_json::from_str(&fs::read_to_string(dir.join("bundle.json"))?)?;
    let rows = parse_metrics_csv(&fs::read_to_string(dir.join("metrics.csv"))?)?;
    Ok(LoadedBundle {
        dir: dir.to_path_buf(),
        bundle,
        rows,
    })
}

/// Merged metrics of bundles that share a test set.
pub fn compare(bundles: &[LoadedBundle]) -> Result<Vec<MetricsRow>> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Validation("nothing to compare".into()))?;
    for b in &bundles[1..] {
        if b.bundle.test_hash != first.bundle.test_hash {
            return Err(Error::Validation(format!(
                "test sets differ:\n  {}: {}\n  {}: {}",
                first.dir.display(),
                first.bundle.test_hash,
                b.dir.display(),
                b.bundle.test_hash
            )));
        }
    }
    Ok(bundles.iter().flat_map(|b| b.rows.iter().cloned()).collect())
}

/// Cumulative bits at the first epoch whose test accuracy reaches `level`.
pub fn bits_to_reach(rows: &[MetricsRow], level: f64) -> Option<u64> {
    rows.iter().find(|r| r.test_acc >= level).map(|r| r.cum_bits)
}

const SPARKS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];

/// One character per value on a `[lo, hi]` scale.
pub fn sparkline(values: &[f64], lo: f64, hi: f64) -> String {
    let span = (hi - lo).max(f64::EPSILON);
    values
        .iter()
        .map(|v| {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            SPARKS[((t * 7.0).round() as usize).min(7)]
        })
        .collect()
}

/// Text summary of merged rows: accuracy sparkline per scheme and the bits
/// each scheme needed to reach a ladder of accuracy levels.
pub fn summary(rows: &[MetricsRow]) -> String {
    let mut schemes: Vec<&str> = Vec::new();
    for r in rows {
        if !schemes.contains(&r.scheme.as_str()) {
            schemes.push(&r.scheme);
        }
    }
    let by = |s: &str| rows.iter().filter(|r| r.scheme == s).cloned().collect::<Vec<_>>();
    let mut out = String::new();
    let _ = writeln!(out, "test accuracy per epoch (scale 0..1)");
    for s in &schemes {
        let accs: Vec<f64> = by(s).iter().map(|r| r.test_acc).collect();
        let last = accs.last().copied().unwrap_or(0.0);
        let _ = writeln!(out, "  {s:<4} {} {last:.4}", sparkline(&accs, 0.0, 1.0));
    }
    let _ = writeln!(out, "cumulative bits to first reach accuracy");
    let _ = write!(out, "  {:<6}", "level");
    for s in &schemes {
        let _ = write!(out, " {s:>16}");
    }
    out.push('\n');
    for step in 0..8 {
        let level = 0.5 + 0.05 * step as f64;
        let _ = write!(out, "  {level:<6.2}");
        for s in &schemes {
            match bits_to_reach(&by(s), level) {
                Some(b) => {
                    let _ = write!(out, " {b:>16}");
                }
                None => {
                    let _ = write!(out, " {:>16}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
