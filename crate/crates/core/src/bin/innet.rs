use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use innet::bandwidth::{self, ReferenceModel, TableParams};
use innet::experiment::{self, ExperimentConfig, Layout, SchemeKind};
use innet::info;
use innet::nn::Activation;
use innet::Error;

#[derive(Parser)]
#[command(name = "innet", version, about = "In-network learning experiments and bandwidth accounting")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one scheme and write a result bundle.
    Run(RunArgs),
    /// Merge result bundles that share a test set.
    Compare(CompareArgs),
    /// Per-epoch communication cost of the reference models.
    Table1(TableArgs),
    /// Exact information quantities on small discrete laws.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Starting configuration: exp1-desk or exp2-desk.
    #[arg(long)]
    preset: Option<String>,
    /// JSON configuration file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// inl, fl or sl.
    #[arg(long)]
    scheme: Option<String>,
    /// exp1 or exp2.
    #[arg(long)]
    layout: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Lagrange weight of the per-node terms.
    #[arg(long)]
    s: Option<f64>,
    /// Reparametrization samples per datum.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    test_q: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    /// Comma-separated noise levels, one per node.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated hidden widths of each encoder.
    #[arg(long, value_delimiter = ',')]
    encoder_hidden: Option<Vec<usize>>,
    #[arg(long)]
    latent: Option<usize>,
    /// Comma-separated hidden widths of the fusion network.
    #[arg(long, value_delimiter = ',')]
    fusion_hidden: Option<Vec<usize>>,
    /// relu, tanh, sigmoid or identity.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    s_bits: Option<u32>,
    /// Bundle directory. Defaults to $INNET_OUT/<scheme>, or runs/<scheme>.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "INNET_OUT", hide_env_values = true)]
    out_root: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Bundle directories.
    #[arg(required = true)]
    bundles: Vec<PathBuf>,
    /// Write the merged CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the accuracy and bandwidth summary.
    #[arg(long)]
    summary: bool,
}

#[derive(Args)]
struct TableArgs {
    /// Exit non-zero unless every cell matches the published table.
    #[arg(long)]
    check: bool,
    /// Only rows with this many data points.
    #[arg(long)]
    q: Option<u64>,
    /// Only rows for vgg16 or resnet50.
    #[arg(long)]
    model: Option<String>,
    #[arg(long, default_value_t = 32)]
    s_bits: u64,
    #[arg(long, default_value_t = 500)]
    j: u64,
    #[arg(long, default_value_t = 25_088)]
    p: u64,
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1.0)]
    s: f64,
    /// Number of observations `J`.
    #[arg(long, default_value_t = 2)]
    j: usize,
    /// Alphabet size of every variable.
    #[arg(long, default_value_t = 2)]
    size: usize,
    /// Random instances to print.
    #[arg(long, default_value_t = 3)]
    instances: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.cmd {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Table1(a) => cmd_table(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match out {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn config_err(msg: String) -> Error {
    Error::Config { line: None, msg }
}

fn build_config(a: &RunArgs) -> innet::Result<ExperimentConfig> {
    let scheme = a
        .scheme
        .as_deref()
        .map(|s| SchemeKind::parse(s).ok_or_else(|| config_err(format!("unknown scheme {s:?}"))))
        .transpose()?;
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(p)) => ExperimentConfig::preset(p, scheme.unwrap_or(SchemeKind::Inl))?,
        (None, None) => return Err(config_err("give --preset or --config".into())),
    };
    if let Some(s) = scheme {
        cfg.scheme = s;
    }
    if let Some(l) = &a.layout {
        cfg.layout = match l.as_str() {
            "exp1" => Layout::Exp1,
            "exp2" => Layout::Exp2,
            _ => return Err(config_err(format!("unknown layout {l:?}"))),
        };
    }
    let t = &mut cfg.training;
    set(&mut t.epochs, a.epochs);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.lr, a.lr);
    set(&mut t.s, a.s);
    set(&mut t.samples, a.samples);
    set(&mut t.local_epochs, a.local_epochs);
    let d = &mut cfg.dataset;
    set(&mut d.q, a.q);
    set(&mut d.test_q, a.test_q);
    set(&mut d.d, a.d);
    set(&mut d.classes, a.classes);
    set(&mut d.separation, a.separation);
    set(&mut d.seed, a.data_seed);
    if let Some(s) = &a.sigmas {
        d.sigmas = s.clone();
        cfg.nodes = s.len();
    }
    set(&mut cfg.seed, a.seed);
    let m = &mut cfg.model;
    set(&mut m.encoder_hidden, a.encoder_hidden.clone());
    set(&mut m.latent, a.latent);
    set(&mut m.fusion_hidden, a.fusion_hidden.clone());
    if let Some(act) = &a.activation {
        m.activation = match act.as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "identity" => Activation::Identity,
            _ => return Err(config_err(format!("unknown activation {act:?}"))),
        };
    }
    set(&mut cfg.cost.s_bits, a.s_bits);
    if let Some(o) = &a.out {
        cfg.output = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn cmd_run(a: RunArgs) -> innet::Result<ExitCode> {
    let cfg = build_config(&a)?;
    let dir = cfg.output.clone().unwrap_or_else(|| {
        a.out_root
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(cfg.scheme.name())
    });
    let result = match experiment::run(&cfg) {
        Err(Error::NonFinite(what)) => {
            return Err(Error::NonFinite(format!(
                "{what}; aborting (try a smaller --lr or --s)"
            )))
        }
        other => other?,
    };
    if !a.quiet {
        for r in &result.rows {
            println!(
                "{} epoch {:>3}  objective {:>10.5}  test_acc {:.4}  cum_bits {}",
                r.scheme, r.epoch, r.loss_total, r.test_acc, r.cum_bits
            );
        }
    }
    result.write(&dir)?;
    println!("wrote {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(a: CompareArgs) -> innet::Result<ExitCode> {
    let bundles = a
        .bundles
        .iter()
        .map(|d| experiment::load_bundle(d))
        .collect::<innet::Result<Vec<_>>>()?;
    let rows = experiment::compare(&bundles)?;
    let csv = experiment::metrics_csv(&rows);
    match &a.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    if a.summary {
        eprint!("{}", experiment::summary(&rows));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_table(a: TableArgs) -> innet::Result<ExitCode> {
    let params = TableParams {
        j: a.j,
        p: a.p,
        s_bits: a.s_bits,
    };
    let model = a
        .model
        .as_deref()
        .map(|m| ReferenceModel::parse(m).ok_or_else(|| config_err(format!("unknown model {m:?}"))))
        .transpose()?;
    let rows: Vec<_> = bandwidth::table1(params)
        .into_iter()
        .filter(|r| model.is_none_or(|m| r.model == m) && a.q.is_none_or(|q| r.q == q))
        .collect();
    let rows = if rows.is_empty() {
        // off-table combinations are still computed
        match (model, a.q) {
            (Some(m), Some(q)) => vec![bandwidth::table_row(params, m, q)],
            _ => rows,
        }
    } else {
        rows
    };
    if a.csv {
        print!("{}", bandwidth::format_csv(&rows));
    } else {
        print!("{}", bandwidth::format_text(&rows));
    }
    if a.check {
        let bad = bandwidth::check_against_published(&bandwidth::table1(params));
        if !bad.is_empty() {
            for b in &bad {
                eprintln!("mismatch: {b}");
            }
            return Ok(ExitCode::FAILURE);
        }
        eprintln!("all 12 cells match the published values");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_oracle(a: OracleArgs) -> innet::Result<ExitCode> {
    let s = a.s;
    let copies = info::copies(a.j);
    println!(
        "copies J={}: L = {:.12} (−s·J·ln 2 = {:.12})",
        a.j,
        info::optimal_lagrangian(&copies, s)?,
        -s * a.j as f64 * std::f64::consts::LN_2
    );
    println!("{:>6} {:>12} {:>12} {:>12} {:>14}", "seed", "H(Y|U)", "ΣH(Y|Uj)", "ΣI(Uj;Xj)", "L");
    for k in 0..a.instances {
        let pmf = info::random_instance(a.seed + k, a.j, a.size);
        let t = info::lagrangian_terms(&pmf, s)?;
        println!(
            "{:>6} {:>12.6} {:>12.6} {:>12.6} {:>14.8}",
            a.seed + k,
            t.h_y_given_all,
            t.h_y_given_u.iter().sum::<f64>(),
            t.mi_u_x.iter().sum::<f64>(),
            t.value
        );
    }
    Ok(ExitCode::SUCCESS)
}
