//! CSV and PGM emitters for run metrics and analysis grids.

use std::fs;
use std::path::Path;

use lorakit_core::analysis::SubspaceReport;
use lorakit_core::matrix::Matrix;

use crate::error::Result;

/// One per-epoch metrics row.
#[derive(Debug, Clone, Copy)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub trainable_params: usize,
    pub wall_ms: f64,
}

/// Writes `epoch,loss,trainable_params,wall_ms` rows.
pub fn write_epoch_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from("epoch,loss,trainable_params,wall_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.epoch, r.loss, r.trainable_params, r.wall_ms
        ));
    }
    write_text(path, &out)
}

/// Writes a similarity grid as a CSV matrix: header `j=1..j_max`, one row
/// per `i`.
pub fn write_grid_csv(path: &Path, report: &SubspaceReport) -> Result<()> {
    let mut out = String::from("i");
    for j in 1..=report.j_max {
        out.push_str(&format!(",j={j}"));
    }
    out.push('\n');
    for i in 0..report.i_max {
        out.push_str(&format!("{}", i + 1));
        for j in 0..report.j_max {
            out.push_str(&format!(",{}", report.grid.get(i, j)));
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Writes a `[0, 1]`-valued grid as a binary 8-bit PGM so similarity heat
/// maps can be inspected without a plotting stack.
pub fn write_grid_pgm(path: &Path, grid: &Matrix) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    for i in 0..grid.rows() {
        for j in 0..grid.cols() {
            let v = grid.get(i, j).clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}
