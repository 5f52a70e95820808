//! Evaluation tables as CSV (lossless cells) and Markdown.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vitscope_core::eval::{render_markdown, CeTriplet, CoderEvaluation, EvalRow, COLUMNS};
use vitscope_core::vit::{HookPoint, TokenSelector};

use crate::checkpoint::read_json;
use crate::error::{Error, Result};

pub const EVAL_FILE: &str = "eval.json";

/// L0 split by token kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct L0Summary {
    pub mean_all: f64,
    pub mean_cls: Option<f64>,
    pub mean_spatial: Option<f64>,
    /// CLS L0 divided by the number of spatial patches.
    pub cls_per_patch: Option<f64>,
}

/// Contents of `eval.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub hook: HookPoint,
    pub tokens: TokenSelector,
    pub examples: usize,
    pub dictionary_size: usize,
    pub row: EvalRow,
    pub ce: CeTriplet,
    pub l0: L0Summary,
    pub alive_features: usize,
    /// Token pairs the cosine metrics skipped because of zero vectors.
    pub cos_skipped: u64,
}

impl EvalRecord {
    pub fn new(hook: HookPoint, tokens: TokenSelector, examples: usize, dictionary_size: usize, ev: &CoderEvaluation) -> Self {
        Self {
            hook,
            tokens,
            examples,
            dictionary_size,
            row: ev.row.clone(),
            ce: ev.ce,
            l0: L0Summary {
                mean_all: ev.l0.mean_all,
                mean_cls: ev.l0.mean_cls,
                mean_spatial: ev.l0.mean_spatial,
                cls_per_patch: ev.l0.cls_per_patch,
            },
            alive_features: ev.alive.alive_count(),
            cos_skipped: ev.cos_skipped,
        }
    }

    /// Reads `eval.json`, or `eval.json` inside a directory.
    pub fn read(path: &Path) -> Result<Self> {
        if path.is_dir() {
            read_json(&path.join(EVAL_FILE))
        } else {
            read_json(path)
        }
    }
}

pub fn rows_to_csv(rows: &[EvalRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Config(format!("CSV encoding failed: {e}"));
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.exact_cells()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("CSV of UTF-8 cells"))
}

pub fn rows_from_csv(text: &str, origin: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::format(origin, e.to_string()))?;
    if header.iter().ne(COLUMNS) {
        return Err(Error::format(origin, "CSV header does not match the report columns"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(origin, e.to_string()))?;
        let cells: Vec<&str> = rec.iter().collect();
        rows.push(EvalRow::from_cells(&cells).map_err(|e| Error::format(origin, e.to_string()))?);
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    fs::write(path, rows_to_csv(rows)?).map_err(Error::io(path))
}

pub fn read_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    rows_from_csv(&text, path)
}

pub fn write_markdown(path: &Path, rows: &[EvalRow]) -> Result<()> {
    fs::write(path, render_markdown(rows)).map_err(Error::io(path))
}
