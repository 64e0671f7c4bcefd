//! First-order cycle model.
//!
//! Every instruction costs `⌈words / words_in_per_cycle⌉` stream cycles,
//! charged to the weight, input or control stream. SCHEDULE charges the
//! vector engine `16·⌈16/lanes⌉` and the scalar unit
//! `16·scalar_cycles_per_block` cycles per superblock pair. STORE_OUTPUT
//! drains `⌈m·n / words_out_per_cycle⌉`. Streaming and compute overlap:
//!
//! `total = max(load_w + load_x + control, vector + scalar) + store`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::SimConfig;
use crate::codec::{Variant, BLOCKS_PER_SB, BLOCK_LEN};
use crate::driver::{LayerDims, TilePlan};
use crate::error::{Error, Result};
use crate::isa::{sb_words, WeightType};

/// Cycle counters. All fields are additive across instructions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CycleStats {
    pub cycles_load_w: u64,
    pub cycles_load_x: u64,
    /// CONFIG, SCHEDULE and STORE_OUTPUT opcode words.
    pub cycles_control: u64,
    pub cycles_vector: u64,
    pub cycles_scalar: u64,
    pub cycles_store: u64,
    pub macs: u64,
}

impl CycleStats {
    pub fn cycles_compute(&self) -> u64 {
        self.cycles_vector + self.cycles_scalar
    }

    pub fn cycles_stream(&self) -> u64 {
        self.cycles_load_w + self.cycles_load_x + self.cycles_control
    }

    pub fn cycles_total(&self) -> u64 {
        self.cycles_stream().max(self.cycles_compute()) + self.cycles_store
    }

    pub fn seconds(&self, clock_mhz: f64) -> f64 {
        self.cycles_total() as f64 / (clock_mhz * 1e6)
    }

    pub fn macs_per_cycle(&self) -> f64 {
        match self.cycles_total() {
            0 => 0.0,
            t => self.macs as f64 / t as f64,
        }
    }

    pub(crate) fn stream(&mut self, bucket: Bucket, words: usize, config: &SimConfig) {
        let c = words.div_ceil(config.words_in_per_cycle) as u64;
        match bucket {
            Bucket::Weights => self.cycles_load_w += c,
            Bucket::Inputs => self.cycles_load_x += c,
            Bucket::Control => self.cycles_control += c,
        }
    }

    pub(crate) fn schedule(&mut self, pairs: usize, config: &SimConfig) {
        let pairs = pairs as u64;
        let blocks = BLOCKS_PER_SB as u64;
        self.cycles_vector += pairs * blocks * BLOCK_LEN.div_ceil(config.lanes) as u64;
        self.cycles_scalar += pairs * blocks * config.scalar_cycles_per_block as u64;
        self.macs += pairs * (BLOCKS_PER_SB * BLOCK_LEN) as u64;
    }

    pub(crate) fn store(&mut self, values: usize, config: &SimConfig) {
        self.cycles_store += values.div_ceil(config.words_out_per_cycle) as u64;
    }

    /// Every counter, derived totals included, in report order.
    pub fn fields(&self) -> [(&'static str, u64); 9] {
        [
            ("cycles_load_w", self.cycles_load_w),
            ("cycles_load_x", self.cycles_load_x),
            ("cycles_control", self.cycles_control),
            ("cycles_vector", self.cycles_vector),
            ("cycles_scalar", self.cycles_scalar),
            ("cycles_compute", self.cycles_compute()),
            ("cycles_store", self.cycles_store),
            ("cycles_total", self.cycles_total()),
            ("macs", self.macs),
        ]
    }

    /// Flat `key=value` lines.
    pub fn to_text(&self, clock_mhz: f64) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "seconds={:e}", self.seconds(clock_mhz));
        let _ = writeln!(s, "macs_per_cycle={:.4}", self.macs_per_cycle());
        s
    }

    pub fn csv_header() -> String {
        let mut cols: Vec<&str> = CycleStats::default().fields().iter().map(|f| f.0).collect();
        cols.extend(["seconds", "macs_per_cycle"]);
        cols.join(",")
    }

    pub fn to_csv_row(&self, clock_mhz: f64) -> String {
        let mut cols: Vec<String> = self.fields().iter().map(|f| f.1.to_string()).collect();
        cols.push(format!("{:e}", self.seconds(clock_mhz)));
        cols.push(format!("{:.4}", self.macs_per_cycle()));
        cols.join(",")
    }
}

impl std::ops::Sub for CycleStats {
    type Output = CycleStats;

    fn sub(self, rhs: CycleStats) -> CycleStats {
        CycleStats {
            cycles_load_w: self.cycles_load_w - rhs.cycles_load_w,
            cycles_load_x: self.cycles_load_x - rhs.cycles_load_x,
            cycles_control: self.cycles_control - rhs.cycles_control,
            cycles_vector: self.cycles_vector - rhs.cycles_vector,
            cycles_scalar: self.cycles_scalar - rhs.cycles_scalar,
            cycles_store: self.cycles_store - rhs.cycles_store,
            macs: self.macs - rhs.macs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bucket {
    Weights,
    Inputs,
    Control,
}

/// Closed-form cycle count of the program the driver builds for `plan`,
/// run on a freshly configured simulator.
pub fn estimate_cycles(
    plan: &TilePlan,
    dims: LayerDims,
    weights: Variant,
    config: &SimConfig,
) -> Result<CycleStats> {
    let mut stats = CycleStats::default();
    if plan.tiles.is_empty() {
        return Ok(stats);
    }
    dims.validate()?;
    config.validate()?;
    plan.check_shape(dims.m, dims.n, dims.k_sb())?;
    WeightType::from_variant(weights).map_err(|e| Error::Plan(e.to_string()))?;
    let w_words = sb_words(weights);
    let x_words = sb_words(Variant::Q8K);
    let mut last_shape = None;
    for (t, tile) in plan.tiles.iter().enumerate() {
        if last_shape != Some((tile.m_tile, tile.n_tile)) {
            stats.stream(Bucket::Control, 6, config);
            last_shape = Some((tile.m_tile, tile.n_tile));
        }
        if plan.fast_path && t == 0 {
            stats.stream(Bucket::Inputs, 2 + dims.n * plan.k_sb * x_words, config);
        }
        for k in plan.chunks() {
            if !plan.fast_path {
                stats.stream(Bucket::Inputs, 2 + tile.n_tile * k.len() * x_words, config);
            }
            stats.stream(Bucket::Weights, 2 + tile.m_tile * k.len() * w_words, config);
            stats.stream(Bucket::Control, 1, config);
            stats.schedule(tile.m_tile * tile.n_tile * k.len(), config);
        }
        stats.stream(Bucket::Control, 1, config);
        stats.store(tile.m_tile * tile.n_tile, config);
    }
    Ok(stats)
}
