//! Append-only metrics CSV.
//!
//! Columns (format version 1, never reordered):
//! `run_id,mode,seed,bits_w,bits_a,top1,recon,sharpness,rho,wall_s`.
//! Empty numeric cells mean "not measured"; a failed run has mode
//! `failed:<stage>` and empty metrics.

use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::format::write_atomic;

pub const HEADER: [&str; 10] =
    ["run_id", "mode", "seed", "bits_w", "bits_a", "top1", "recon", "sharpness", "rho", "wall_s"];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub bits_w: String,
    pub bits_a: String,
    pub top1: Option<f64>,
    pub recon: Option<f64>,
    pub sharpness: Option<f64>,
    pub rho: f64,
    pub wall_s: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str, col: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| HarnessError::Invalid(format!("metrics column {col}: {s:?} is not a number")))
}

impl MetricsRow {
    fn record(&self) -> [String; 10] {
        [
            self.run_id.clone(),
            self.mode.clone(),
            self.seed.to_string(),
            self.bits_w.clone(),
            self.bits_a.clone(),
            cell(self.top1),
            cell(self.recon),
            cell(self.sharpness),
            self.rho.to_string(),
            self.wall_s.to_string(),
        ]
    }

    fn from_record(r: &csv::StringRecord) -> Result<Self> {
        if r.len() != HEADER.len() {
            return Err(HarnessError::Invalid(format!("metrics row has {} cells", r.len())));
        }
        let required = |i: usize| {
            parse_cell(&r[i], HEADER[i])?.ok_or_else(|| HarnessError::Invalid(format!("empty {}", HEADER[i])))
        };
        Ok(Self {
            run_id: r[0].to_string(),
            mode: r[1].to_string(),
            seed: r[2].parse().map_err(|_| HarnessError::Invalid(format!("metrics seed {:?}", &r[2])))?,
            bits_w: r[3].to_string(),
            bits_a: r[4].to_string(),
            top1: parse_cell(&r[5], HEADER[5])?,
            recon: parse_cell(&r[6], HEADER[6])?,
            sharpness: parse_cell(&r[7], HEADER[7])?,
            rho: required(8)?,
            wall_s: required(9)?,
        })
    }

    /// Every column except the wall time.
    pub fn same_result(&self, other: &MetricsRow) -> bool {
        MetricsRow { wall_s: 0.0, ..self.clone() } == MetricsRow { wall_s: 0.0, ..other.clone() }
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(HarnessError::Invalid(format!(
            "{}: unexpected metrics header {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    reader.records().map(|r| MetricsRow::from_record(&r?)).collect()
}

/// Appends `row`, creating the file with its header if needed. The whole file
/// is rewritten through a temporary file and renamed into place.
pub fn append_row(path: &Path, row: &MetricsRow) -> Result<()> {
    let mut rows = if path.exists() { read_rows(path)? } else { Vec::new() };
    rows.push(row.clone());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for r in &rows {
        w.write_record(r.record())?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(format!("buffering metrics: {e}")))?;
    write_atomic(path, &bytes)?;
    Ok(())
}
