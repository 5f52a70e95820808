use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::config_err;
use crate::Result;

/// Table header, in column order.
pub const COLUMNS: [&str; 13] = [
    "Layer",
    "Sublayer",
    "l1 coeff.",
    "% Explained var.",
    "Avg L0",
    "Avg CLS L0",
    "Cos sim",
    "Recon cos sim",
    "CE",
    "Recon CE",
    "Zero abl CE",
    "% CE recovered",
    "% Alive features",
];

/// Marker for undefined cells.
pub const NOT_AVAILABLE: &str = "n/a";

/// One evaluated coder, keyed by `(layer, sublayer)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub layer: Option<usize>,
    pub sublayer: String,
    pub l1_coeff: f32,
    pub explained_variance: f64,
    pub avg_l0: f64,
    pub avg_cls_l0: Option<f64>,
    pub cos_sim: Option<f64>,
    pub recon_cos_sim: Option<f64>,
    pub ce: f64,
    pub recon_ce: f64,
    pub zero_abl_ce: f64,
    pub pct_ce_recovered: Option<f64>,
    pub pct_alive: f64,
}

fn fixed(v: Option<f64>, places: usize) -> String {
    match v {
        Some(x) => alloc::format!("{x:.places$}"),
        None => NOT_AVAILABLE.into(),
    }
}

fn exact(v: Option<f64>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => NOT_AVAILABLE.into(),
    }
}

fn parse_opt(s: &str, col: &str) -> Result<Option<f64>> {
    if s == NOT_AVAILABLE {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| config_err!("column `{col}`: `{s}` is not a number"))
}

fn parse_req(s: &str, col: &str) -> Result<f64> {
    parse_opt(s, col)?.ok_or_else(|| config_err!("column `{col}` may not be {NOT_AVAILABLE}"))
}

impl EvalRow {
    /// Display cells: percentages and L0 with two decimals, cross-entropy
    /// with four, cosines with four.
    pub fn display_cells(&self) -> Vec<String> {
        alloc::vec![
            self.layer.map_or_else(|| "-".into(), |l| l.to_string()),
            self.sublayer.clone(),
            alloc::format!("{:e}", self.l1_coeff),
            fixed(Some(self.explained_variance), 2),
            fixed(Some(self.avg_l0), 2),
            fixed(self.avg_cls_l0, 2),
            fixed(self.cos_sim, 4),
            fixed(self.recon_cos_sim, 4),
            fixed(Some(self.ce), 4),
            fixed(Some(self.recon_ce), 4),
            fixed(Some(self.zero_abl_ce), 4),
            fixed(self.pct_ce_recovered, 2),
            fixed(Some(self.pct_alive), 2),
        ]
    }

    /// Lossless cells: shortest round-tripping decimal for every number.
    pub fn exact_cells(&self) -> Vec<String> {
        alloc::vec![
            self.layer.map_or_else(|| "-".into(), |l| l.to_string()),
            self.sublayer.clone(),
            self.l1_coeff.to_string(),
            exact(Some(self.explained_variance)),
            exact(Some(self.avg_l0)),
            exact(self.avg_cls_l0),
            exact(self.cos_sim),
            exact(self.recon_cos_sim),
            exact(Some(self.ce)),
            exact(Some(self.recon_ce)),
            exact(Some(self.zero_abl_ce)),
            exact(self.pct_ce_recovered),
            exact(Some(self.pct_alive)),
        ]
    }

    /// Inverse of [`EvalRow::exact_cells`].
    pub fn from_cells(cells: &[&str]) -> Result<Self> {
        if cells.len() != COLUMNS.len() {
            return Err(config_err!("expected {} columns, got {}", COLUMNS.len(), cells.len()));
        }
        let c = |i: usize| (cells[i], COLUMNS[i]);
        let layer = match cells[0] {
            "-" => None,
            s => Some(s.parse().map_err(|_| config_err!("bad layer `{s}`"))?),
        };
        Ok(Self {
            layer,
            sublayer: cells[1].into(),
            l1_coeff: cells[2]
                .parse()
                .map_err(|_| config_err!("bad l1 coefficient `{}`", cells[2]))?,
            explained_variance: parse_req(c(3).0, c(3).1)?,
            avg_l0: parse_req(c(4).0, c(4).1)?,
            avg_cls_l0: parse_opt(c(5).0, c(5).1)?,
            cos_sim: parse_opt(c(6).0, c(6).1)?,
            recon_cos_sim: parse_opt(c(7).0, c(7).1)?,
            ce: parse_req(c(8).0, c(8).1)?,
            recon_ce: parse_req(c(9).0, c(9).1)?,
            zero_abl_ce: parse_req(c(10).0, c(10).1)?,
            pct_ce_recovered: parse_opt(c(11).0, c(11).1)?,
            pct_alive: parse_req(c(12).0, c(12).1)?,
        })
    }
}

/// Rows ordered by layer (unlayered rows last), then sublayer.
pub fn sort_rows(rows: &mut [EvalRow]) {
    rows.sort_by(|a, b| {
        (a.layer.is_none(), a.layer, &a.sublayer).cmp(&(b.layer.is_none(), b.layer, &b.sublayer))
    });
}

/// GitHub-flavored Markdown table.
pub fn render_markdown(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", COLUMNS.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(COLUMNS.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.display_cells().join(" | "));
    }
    out
}
