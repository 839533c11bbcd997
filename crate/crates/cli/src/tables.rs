//! CSV outputs. Floats use the shortest representation that parses back to
//! the same value.

use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, CliResult};
use crate::manifest::write_file;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub h: usize,
    pub parametrization: &'static str,
    pub trial: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub core_size: usize,
}

pub const SUMMARY_HEADER: &[&str] = &["h", "parametrization", "trial", "train_mse", "test_mse", "core_size"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramRow {
    pub h: usize,
    pub parametrization: &'static str,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
}

pub const HISTOGRAM_HEADER: &[&str] = &["h", "parametrization", "bin_lo", "bin_hi", "count"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    pub h: usize,
    pub trial: usize,
    pub n_lambda: usize,
    pub n_teacher: usize,
    pub delta_mse: f64,
}

pub const PRUNE_HEADER: &[&str] = &["h", "trial", "n_lambda", "n_teacher", "delta_mse"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathRow {
    pub network_id: String,
    pub frac_index: f64,
    pub gamma_value: f64,
}

pub const PATH_HEADER: &[&str] = &["network_id", "frac_index", "gamma_value"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    /// Empty on epochs without a test evaluation.
    pub test_mse: Option<f64>,
}

pub const HISTORY_HEADER: &[&str] = &["epoch", "train_loss", "test_mse"];

/// Renders `# comment` lines, the header and one line per row.
pub fn render<T: Serialize>(comments: &[String], header: &[&str], rows: &[T]) -> CliResult<Vec<u8>> {
    let mut buf = Vec::new();
    for c in comments {
        buf.extend_from_slice(format!("# {c}\n").as_bytes());
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(buf);
    let csv_err = |e: csv::Error| CliError::Validation(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| CliError::Validation(format!("csv: {e}")))
}

pub fn write<T: Serialize>(path: &Path, comments: &[String], header: &[&str], rows: &[T]) -> CliResult<()> {
    write_file(path, &render(comments, header, rows)?)
}
