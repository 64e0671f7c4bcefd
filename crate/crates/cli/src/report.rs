use std::io::Write;

use fbfq_core::driver::LayerDims;
use fbfq_core::kernels::MatrixF32;
use fbfq_core::sim::CycleStats;
use fbfq_core::{Error, Result};
use serde::Serialize;

use crate::Engine;

/// Matrices up to this many values are printed in full.
pub const PRINT_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorStats {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// `|a - b| / (1 + |b|)`, the scaled error used by the kernel tolerance.
    pub max_rel: f64,
    pub mean_rel: f64,
}

impl ErrorStats {
    pub fn between(got: &MatrixF32, oracle: &MatrixF32) -> Self {
        let n = got.data().len().max(1) as f64;
        let (mut max_abs, mut sum_abs, mut max_rel, mut sum_rel) = (0f64, 0f64, 0f64, 0f64);
        for (a, b) in got.data().iter().zip(oracle.data()) {
            let abs = (*a as f64 - *b as f64).abs();
            let rel = abs / (1.0 + (*b as f64).abs());
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            sum_abs += abs;
            sum_rel += rel;
        }
        ErrorStats {
            max_abs,
            mean_abs: sum_abs / n,
            max_rel,
            mean_rel: sum_rel / n,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub engine: Engine,
    pub dims: LayerDims,
    pub weights: String,
    pub wall_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub errors: Option<ErrorStats>,
    /// Cycle-model estimate; only for the simulator engine.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycles: Option<CycleStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimated_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<Vec<Vec<f32>>>,
}

pub fn rows_of(m: &MatrixF32) -> Vec<Vec<f32>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn io(e: impl Into<std::io::Error>) -> Error {
    Error::Io(e.into())
}

pub fn write_rows(out: &mut impl Write, rows: &[Vec<f32>]) -> Result<()> {
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn cycles_text(out: &mut impl Write, stats: &CycleStats) -> Result<()> {
    for (k, v) in stats.fields() {
        writeln!(out, "{k}={v}")?;
    }
    writeln!(out, "macs_per_cycle={:.4}", stats.macs_per_cycle())?;
    Ok(())
}

impl RunReport {
    pub fn text(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "engine={}", engine_name(self.engine))?;
        writeln!(out, "dims={}", self.dims)?;
        writeln!(out, "weights={}", self.weights)?;
        writeln!(out, "wall_ms={:.3}", self.wall_ms)?;
        if let Some(e) = &self.errors {
            writeln!(out, "max_abs_err={:e}", e.max_abs)?;
            writeln!(out, "mean_abs_err={:e}", e.mean_abs)?;
            writeln!(out, "max_rel_err={:e}", e.max_rel)?;
            writeln!(out, "mean_rel_err={:e}", e.mean_rel)?;
        }
        if let Some(c) = &self.cycles {
            cycles_text(out, c)?;
        }
        if let Some(ms) = self.estimated_ms {
            writeln!(out, "estimated_ms={ms:.6}")?;
        }
        if let Some(rows) = &self.output {
            writeln!(out, "output:")?;
            write_rows(out, rows)?;
        }
        Ok(())
    }

    pub fn csv(&self, out: impl Write) -> Result<()> {
        let mut header = vec!["engine", "m", "k", "n", "weights", "wall_ms"];
        let mut row = vec![
            engine_name(self.engine).to_string(),
            self.dims.m.to_string(),
            self.dims.k.to_string(),
            self.dims.n.to_string(),
            self.weights.clone(),
            format!("{:.3}", self.wall_ms),
        ];
        if let Some(e) = &self.errors {
            header.extend(["max_abs_err", "mean_abs_err", "max_rel_err", "mean_rel_err"]);
            row.extend([e.max_abs, e.mean_abs, e.max_rel, e.mean_rel].map(|v| format!("{v:e}")));
        }
        if let Some(c) = &self.cycles {
            for (k, v) in c.fields() {
                header.push(k);
                row.push(v.to_string());
            }
        }
        if let Some(ms) = self.estimated_ms {
            header.push("estimated_ms");
            row.push(format!("{ms:.6}"));
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&header).map_err(io)?;
        w.write_record(&row).map_err(io)?;
        w.flush()?;
        Ok(())
    }
}

pub fn engine_name(e: Engine) -> &'static str {
    match e {
        Engine::Ref => "ref",
        Engine::Fused => "fused",
        Engine::Sim => "sim",
    }
}

pub fn json(out: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value).map_err(io)?;
    writeln!(out)?;
    Ok(())
}
