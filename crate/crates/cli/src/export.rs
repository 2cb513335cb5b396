//! Run records: metrics, per-iteration diagnostics, manifest, palette.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use saflow::flow::IterationRecord;

/// Bumped whenever a field of [`Metrics`] changes.
pub const METRICS_SCHEMA: u32 = 1;

/// Label `l` is drawn with `PALETTE[l % 16]`. The first colors are
/// well separated so small label counts stay readable.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [0, 0, 128],
    [128, 128, 128],
];

pub fn palette_image(labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .flat_map(|&l| PALETTE[l % PALETTE.len()].map(|v| f64::from(v) / 255.0))
        .collect()
}

#[derive(Debug, Serialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub effective_labels: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_entropy: f64,
    /// `E_s` at the final iterate.
    pub objective: f64,
    pub trace_b: f64,
    pub pseudo_inverse: bool,
    pub sketch_cols: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disagreement: Option<usize>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_diagnostics(path: &Path, trace: &[IterationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["iter", "entropy", "trace_b", "min_mass", "max_mass", "pseudo_inverse"])?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            r.entropy.to_string(),
            r.trace_b.to_string(),
            r.min_mass().to_string(),
            r.max_mass().to_string(),
            u8::from(r.pseudo_inverse).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per label: the label, then the prototype values.
pub fn write_prototypes<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("writing {}", path.display()))?;
    for (label, row) in rows.into_iter().enumerate() {
        let mut record = vec![label.to_string()];
        record.extend(row.iter().map(f64::to_string));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Timings {
    pub load_ms: u128,
    pub run_ms: u128,
    pub export_ms: u128,
}

#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub argv: Vec<String>,
    pub input: PathBuf,
    pub config: C,
    pub n: usize,
    pub iterations: usize,
    pub effective_labels: usize,
    pub final_entropy: f64,
    pub converged: bool,
    pub timings: Timings,
    pub outputs: Vec<PathBuf>,
}

/// Old label to new label, in order of first occurrence along `labels`.
pub fn first_occurrence_map(labels: &[usize], count: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; count];
    let mut next = 0;
    for &l in labels {
        if map[l] == usize::MAX {
            map[l] = next;
            next += 1;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_occurrence() {
        assert_eq!(first_occurrence_map(&[2, 2, 0, 1, 0], 3), vec![1, 2, 0]);
    }

    #[test]
    fn palette_is_distinct() {
        for a in 0..16 {
            for b in a + 1..16 {
                assert_ne!(PALETTE[a], PALETTE[b]);
            }
        }
    }
}
