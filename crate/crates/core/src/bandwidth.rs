//! Closed-form per-epoch communication cost of in-network, federated and
//! split learning.
//!
//! With `p` the fusion input width, `q` the number of data points, `J` nodes,
//! `N` parameters per full model, `s` bits per value and `η` the fraction of
//! the model held client-side in split learning:
//!
//! | scheme | bits per epoch |
//! |--------|----------------|
//! | in-network | `2·p·q·s / J` |
//! | federated  | `2·N·J·s` |
//! | split      | `(2·p·q + η·N·J)·s` |
//!
//! Gbits are decimal (`1e9` bits).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GBIT: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Fusion input-layer width.
    pub p: u64,
    /// Data points per epoch.
    pub q: u64,
    pub j: u64,
    /// Parameters per full model.
    pub n: u64,
    pub s_bits: u64,
    /// Client-side share of `n` in split learning, in `[0, 1]`.
    pub eta_frac: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta_frac) {
            return Err(Error::Validation(format!("eta_frac {} outside [0, 1]", self.eta_frac)));
        }
        Ok(())
    }

    pub fn inl_bits(&self) -> f64 {
        if self.j == 0 {
            return 0.0;
        }
        (2 * u128::from(self.p) * u128::from(self.q) * u128::from(self.s_bits)) as f64 / self.j as f64
    }

    pub fn fl_bits(&self) -> f64 {
        (2 * u128::from(self.n) * u128::from(self.j) * u128::from(self.s_bits)) as f64
    }

    pub fn sl_bits(&self) -> f64 {
        let activations = (2 * u128::from(self.p) * u128::from(self.q)) as f64;
        let handoff = self.eta_frac * self.n as f64 * self.j as f64;
        (activations + handoff) * self.s_bits as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceModel {
    Vgg16,
    Resnet50,
}

impl ReferenceModel {
    pub fn name(self) -> &'static str {
        match self {
            ReferenceModel::Vgg16 => "VGG16",
            ReferenceModel::Resnet50 => "ResNet50",
        }
    }

    pub fn params(self) -> u64 {
        match self {
            ReferenceModel::Vgg16 => 138_344_128,
            ReferenceModel::Resnet50 => 25_636_712,
        }
    }

    pub fn eta_frac(self) -> f64 {
        match self {
            ReferenceModel::Vgg16 => 0.11,
            ReferenceModel::Resnet50 => 0.88,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vgg16" | "vgg" => Some(ReferenceModel::Vgg16),
            "resnet50" | "resnet" => Some(ReferenceModel::Resnet50),
            _ => None,
        }
    }
}

/// Published values in Gbits as printed: `(fl, sl, inl)`.
fn published(model: ReferenceModel, q: u64) -> Option<[&'static str; 3]> {
    match (model, q) {
        (ReferenceModel::Vgg16, 50_000) => Some(["4427", "324", "0.16"]),
        (ReferenceModel::Resnet50, 50_000) => Some(["820", "441", "0.16"]),
        (ReferenceModel::Vgg16, 500_000) => Some(["4427", "1046", "1.6"]),
        (ReferenceModel::Resnet50, 500_000) => Some(["820", "1164", "1.6"]),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableParams {
    pub j: u64,
    pub p: u64,
    pub s_bits: u64,
}

impl Default for TableParams {
    fn default() -> Self {
        Self {
            j: 500,
            p: 25_088,
            s_bits: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub model: ReferenceModel,
    pub q: u64,
    pub fl_gbits: f64,
    pub sl_gbits: f64,
    pub inl_gbits: f64,
}

impl TableRow {
    pub fn cells(&self) -> [f64; 3] {
        [self.fl_gbits, self.sl_gbits, self.inl_gbits]
    }
}

pub fn table_row(params: TableParams, model: ReferenceModel, q: u64) -> TableRow {
    let m = CostModel {
        p: params.p,
        q,
        j: params.j,
        n: model.params(),
        s_bits: params.s_bits,
        eta_frac: model.eta_frac(),
    };
    TableRow {
        model,
        q,
        fl_gbits: m.fl_bits() / GBIT,
        sl_gbits: m.sl_bits() / GBIT,
        inl_gbits: m.inl_bits() / GBIT,
    }
}

/// The four reference rows, in published order.
pub fn table1(params: TableParams) -> Vec<TableRow> {
    [
        (ReferenceModel::Vgg16, 50_000),
        (ReferenceModel::Resnet50, 50_000),
        (ReferenceModel::Vgg16, 500_000),
        (ReferenceModel::Resnet50, 500_000),
    ]
    .into_iter()
    .map(|(m, q)| table_row(params, m, q))
    .collect()
}

/// Whether `value` agrees with a printed figure: rounding `value` to the
/// printed number of decimals reproduces it.
pub fn matches_printed(value: f64, printed: &str) -> bool {
    let decimals = printed.split_once('.').map_or(0, |(_, frac)| frac.len());
    let Ok(expected) = printed.parse::<f64>() else {
        return false;
    };
    let rounded = format!("{value:.decimals$}");
    rounded.parse::<f64>().ok() == Some(expected)
}

/// Cells that disagree with the published table, as human-readable lines.
/// Rows without a published counterpart are ignored.
pub fn check_against_published(rows: &[TableRow]) -> Vec<String> {
    let mut bad = Vec::new();
    for row in rows {
        let Some(expect) = published(row.model, row.q) else {
            continue;
        };
        for ((name, got), printed) in ["FL", "SL", "INL"].iter().zip(row.cells()).zip(expect) {
            if !matches_printed(got, printed) {
                bad.push(format!(
                    "{} q={} {name}: computed {got:.4} Gbits, published {printed}",
                    row.model.name(),
                    row.q
                ));
            }
        }
    }
    bad
}

pub fn format_text(rows: &[TableRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:>8} {:>14} {:>14} {:>14}",
        "model", "q", "FL [Gbit]", "SL [Gbit]", "INL [Gbit]"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:>8} {:>14.2} {:>14.2} {:>14.4}",
            r.model.name(),
            r.q,
            r.fl_gbits,
            r.sl_gbits,
            r.inl_gbits
        );
    }
    out
}

pub fn format_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("model,q,fl_gbits,sl_gbits,inl_gbits\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.model.name(),
            r.q,
            r.fl_gbits,
            r.sl_gbits,
            r.inl_gbits
        );
    }
    out
}
