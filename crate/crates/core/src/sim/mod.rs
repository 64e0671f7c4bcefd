//! Functional simulator of the accelerator with a first-order cycle model.
//!
//! The instruction decoder feeds a data loader that spreads superblocks
//! over `n_fifos` FIFOs round-robin by index; the FIFO reader drains them in
//! the same order into the bit-slicer, which fills the weight and input
//! caches. SCHEDULE runs the DSBP over the cached superblocks and adds into
//! the accumulator bank, which STORE_OUTPUT moves to the output queue and
//! clears.

mod cycles;
mod dsbp;
mod slicer;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

pub use cycles::{estimate_cycles, CycleStats};
pub use dsbp::sb_dot;
pub use slicer::{bit_slice_sb, CacheEntry, InputEntry, SbKind, WeightEntry};

use crate::codec::{Variant, BLOCK_LEN};
use crate::driver::AccelCaps;
use crate::error::{Error, Result};
use crate::isa::{ConfigPayload, Decoder, Instruction, SbBlob};
use cycles::Bucket;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub caps: AccelCaps,
    /// Integer MACs per cycle in the vector engine; must divide 16.
    pub lanes: usize,
    pub words_in_per_cycle: usize,
    pub words_out_per_cycle: usize,
    pub clock_mhz: f64,
    /// Scalar-unit cycles per 16-value block.
    pub scalar_cycles_per_block: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            caps: AccelCaps::default(),
            lanes: 16,
            words_in_per_cycle: 1,
            words_out_per_cycle: 1,
            clock_mhz: 200.0,
            scalar_cycles_per_block: 2,
        }
    }
}

impl SimConfig {
    pub fn with_caps(caps: AccelCaps) -> Self {
        SimConfig {
            caps,
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.caps.validate()?;
        if self.lanes == 0 || !BLOCK_LEN.is_multiple_of(self.lanes) {
            return Err(Error::InvalidInput(format!(
                "lanes = {} must divide {BLOCK_LEN}",
                self.lanes
            )));
        }
        if self.words_in_per_cycle == 0 || self.words_out_per_cycle == 0 {
            return Err(Error::InvalidInput("stream widths must be positive".into()));
        }
        if !(self.clock_mhz.is_finite() && self.clock_mhz > 0.0) {
            return Err(Error::InvalidInput(format!(
                "bad clock {} MHz",
                self.clock_mhz
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Idle,
    Loading,
    Computing,
    Draining,
}

#[derive(Debug, Clone, Default)]
struct WeightCache {
    rows: usize,
    depth: usize,
    entries: Vec<WeightEntry>,
}

#[derive(Debug, Clone, Default)]
struct InputCache {
    cols: usize,
    depth: usize,
    /// Depth position of the first cached superblock of each column.
    base_k: usize,
    entries: Vec<InputEntry>,
}

impl InputCache {
    fn covers(&self, k: std::ops::Range<usize>) -> bool {
        !self.entries.is_empty() && self.base_k <= k.start && k.end <= self.base_k + self.depth
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimConfig,
    decoder: Decoder,
    registers: Option<ConfigPayload>,
    fifos: Vec<VecDeque<Vec<u8>>>,
    weights: WeightCache,
    inputs: InputCache,
    acc: Vec<f32>,
    /// Superblocks of depth already accumulated for the live tile.
    k_pos: usize,
    output: VecDeque<f32>,
    status: Status,
    stats: CycleStats,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Simulator {
            config,
            decoder: Decoder::new(),
            registers: None,
            fifos: vec![VecDeque::new(); config.caps.n_fifos],
            weights: WeightCache::default(),
            inputs: InputCache::default(),
            acc: Vec::new(),
            k_pos: 0,
            output: VecDeque::new(),
            status: Status::Idle,
            stats: CycleStats::default(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn registers(&self) -> Option<&ConfigPayload> {
        self.registers.as_ref()
    }

    /// Cumulative cycle counters since creation or the last [`Simulator::reset_stats`].
    pub fn cycle_report(&self) -> CycleStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = CycleStats::default();
    }

    /// Return to the power-on state, keeping the configuration.
    pub fn reset(&mut self) {
        *self = Simulator::new(self.config).expect("config was validated at construction");
    }

    pub fn pending_output(&self) -> usize {
        self.output.len()
    }

    /// Drain every queued output value in STORE_OUTPUT order.
    pub fn read_output(&mut self) -> Result<Vec<f32>> {
        if self.output.is_empty() {
            return Err(Error::EmptyOutput);
        }
        self.status = Status::Idle;
        Ok(self.output.drain(..).collect())
    }

    /// Execute a word stream. On error the simulator keeps whatever state
    /// the failing instruction left; call [`Simulator::reset`] before reuse.
    pub fn ingest(&mut self, words: &[u32]) -> Result<()> {
        let mut pos = 0;
        while pos < words.len() {
            let (ins, next) = self.decoder.decode(words, pos)?;
            self.execute(ins, next - pos)?;
            pos = next;
        }
        Ok(())
    }

    fn execute(&mut self, ins: Instruction, words: usize) -> Result<()> {
        match ins {
            Instruction::Config(cfg) => {
                self.stats.stream(Bucket::Control, words, &self.config);
                self.configure(cfg)
            }
            Instruction::LoadWeights(blob) => {
                self.stats.stream(Bucket::Weights, words, &self.config);
                self.load_weights(blob)
            }
            Instruction::LoadInput(blob) => {
                self.stats.stream(Bucket::Inputs, words, &self.config);
                self.load_inputs(blob)
            }
            Instruction::Schedule => {
                self.stats.stream(Bucket::Control, words, &self.config);
                self.schedule()
            }
            Instruction::StoreOutput => {
                self.stats.stream(Bucket::Control, words, &self.config);
                self.store()
            }
        }
    }

    fn configure(&mut self, cfg: ConfigPayload) -> Result<()> {
        if self.k_pos != 0 {
            return Err(Error::protocol(format!(
                "CONFIG while a tile is {} superblocks into accumulation",
                self.k_pos
            )));
        }
        let cells = cfg.m_tile as usize * cfg.n_tile as usize;
        if cells > self.config.caps.out_buf_elems {
            return Err(Error::CapacityFault(format!(
                "{}x{} tile exceeds the {}-value accumulator bank",
                cfg.m_tile, cfg.n_tile, self.config.caps.out_buf_elems
            )));
        }
        self.registers = Some(cfg);
        self.acc = vec![0.0; cells];
        self.status = Status::Idle;
        Ok(())
    }

    fn require_config(&self, what: &str) -> Result<ConfigPayload> {
        self.registers
            .ok_or_else(|| Error::protocol(format!("{what} before any CONFIG")))
    }

    /// Data loader and FIFO reader: packets enter FIFO `idx % n_fifos` and
    /// leave round-robin, which restores their order.
    fn route(&mut self, blob: &SbBlob, capacity: usize, what: &str) -> Result<Vec<Vec<u8>>> {
        let count = blob.count()?;
        if count > capacity {
            return Err(Error::CapacityFault(format!(
                "{count} superblocks overflow the {capacity}-entry {what} cache"
            )));
        }
        self.status = Status::Loading;
        let n = self.fifos.len();
        for (i, sb) in blob.superblocks().enumerate() {
            self.fifos[i % n].push_back(sb.to_vec());
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            out.push(
                self.fifos[i % n]
                    .pop_front()
                    .expect("fifo holds routed packet"),
            );
        }
        Ok(out)
    }

    fn load_weights(&mut self, blob: SbBlob) -> Result<()> {
        let cfg = self.require_config("LOAD_WEIGHTS")?;
        let packets = self.route(&blob, self.config.caps.weight_cache_sb, "weight")?;
        let rows = cfg.m_tile as usize;
        if packets.len() % rows != 0 || packets.is_empty() {
            return Err(Error::protocol(format!(
                "{} weight superblocks do not split into {rows} rows",
                packets.len()
            )));
        }
        let mut entries = Vec::with_capacity(packets.len());
        for raw in &packets {
            match bit_slice_sb(raw, blob.variant, SbKind::Weight)? {
                CacheEntry::Weight(e) => entries.push(e),
                CacheEntry::Input(_) => unreachable!("weight packets slice to weight entries"),
            }
        }
        self.weights = WeightCache {
            rows,
            depth: packets.len() / rows,
            entries,
        };
        Ok(())
    }

    fn load_inputs(&mut self, blob: SbBlob) -> Result<()> {
        let cfg = self.require_config("LOAD_INPUT")?;
        let packets = self.route(&blob, self.config.caps.input_cache_sb, "input")?;
        let cols = cfg.n_tile as usize;
        if packets.len() % cols != 0 || packets.is_empty() {
            return Err(Error::protocol(format!(
                "{} input superblocks do not split into {cols} columns",
                packets.len()
            )));
        }
        let mut entries = Vec::with_capacity(packets.len());
        for raw in &packets {
            match bit_slice_sb(raw, Variant::Q8K, SbKind::Input)? {
                CacheEntry::Input(e) => entries.push(e),
                CacheEntry::Weight(_) => unreachable!("input packets slice to input entries"),
            }
        }
        self.inputs = InputCache {
            cols,
            depth: packets.len() / cols,
            base_k: self.k_pos,
            entries,
        };
        Ok(())
    }

    fn schedule(&mut self) -> Result<()> {
        let cfg = self.require_config("SCHEDULE")?;
        let (m, n) = (cfg.m_tile as usize, cfg.n_tile as usize);
        let w = std::mem::take(&mut self.weights);
        if w.entries.is_empty() {
            return Err(Error::protocol("SCHEDULE with an empty weight cache"));
        }
        let wanted = cfg.weight_type.variant();
        if let Some(e) = w.entries.iter().find(|e| e.variant() != wanted) {
            return Err(Error::protocol(format!(
                "weight_type is {wanted} but the cache holds {}",
                e.variant()
            )));
        }
        if w.rows != m || self.inputs.cols != n {
            return Err(Error::protocol(format!(
                "caches hold {}x{} but the tile is {m}x{n}",
                w.rows, self.inputs.cols
            )));
        }
        let k = self.k_pos..self.k_pos + w.depth;
        if k.end > cfg.k_sb as usize {
            return Err(Error::protocol(format!(
                "accumulating past the configured depth of {} superblocks",
                cfg.k_sb
            )));
        }
        if !self.inputs.covers(k.clone()) {
            return Err(Error::protocol(format!(
                "input cache does not hold superblocks {}..{}",
                k.start, k.end
            )));
        }
        self.status = Status::Computing;
        let x = &self.inputs;
        let skip = k.start - x.base_k;
        for r in 0..m {
            let w_row = &w.entries[r * w.depth..(r + 1) * w.depth];
            for c in 0..n {
                let x_col = &x.entries[c * x.depth + skip..c * x.depth + skip + w.depth];
                let acc = &mut self.acc[r * n + c];
                for (wb, xb) in w_row.iter().zip(x_col) {
                    *acc += sb_dot(wb, xb);
                }
            }
        }
        self.stats.schedule(m * n * w.depth, &self.config);
        self.k_pos = k.end;
        Ok(())
    }

    fn store(&mut self) -> Result<()> {
        let cfg = self.require_config("STORE_OUTPUT")?;
        if self.k_pos != cfg.k_sb as usize {
            return Err(Error::protocol(format!(
                "STORE_OUTPUT after {} of {} superblocks",
                self.k_pos, cfg.k_sb
            )));
        }
        self.status = Status::Draining;
        self.output.extend(self.acc.iter().copied());
        self.stats.store(self.acc.len(), &self.config);
        self.acc.iter_mut().for_each(|a| *a = 0.0);
        self.k_pos = 0;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SuperBlockFormat;
    use crate::isa::{encode_instruction, WeightType};
    use crate::kernels::{q3k_ones, q8k_ones};

    fn words(ins: &[Instruction]) -> Vec<u32> {
        ins.iter()
            .flat_map(|i| encode_instruction(i).unwrap())
            .collect()
    }

    fn config(m: u32, n: u32, k_sb: u32) -> Instruction {
        Instruction::Config(ConfigPayload {
            weight_type: WeightType::Q3K,
            m_tile: m,
            n_tile: n,
            k_sb,
            flags: 0,
        })
    }

    fn ones_program() -> Vec<u32> {
        words(&[
            config(1, 1, 1),
            Instruction::LoadInput(SbBlob::new(Variant::Q8K, q8k_ones().to_bytes()).unwrap()),
            Instruction::LoadWeights(SbBlob::new(Variant::Q3K, q3k_ones().to_bytes()).unwrap()),
            Instruction::Schedule,
            Instruction::StoreOutput,
        ])
    }

    #[test]
    fn config_sets_registers() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        sim.ingest(&words(&[config(2, 3, 4)])).unwrap();
        assert_eq!(sim.registers().unwrap().m_tile, 2);
        assert_eq!(sim.status(), Status::Idle);
    }

    #[test]
    fn schedule_before_config_or_with_empty_caches() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        assert!(matches!(sim.ingest(&[0x08]), Err(Error::ProtocolFault(_))));
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let prog = words(&[config(1, 1, 1), Instruction::Schedule]);
        assert!(matches!(sim.ingest(&prog), Err(Error::ProtocolFault(_))));
    }

    #[test]
    fn ones_case() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        sim.ingest(&ones_program()).unwrap();
        assert_eq!(sim.read_output().unwrap(), vec![256.0]);
        assert!(matches!(sim.read_output(), Err(Error::EmptyOutput)));
        sim.ingest(&ones_program()).unwrap();
        assert_eq!(sim.read_output().unwrap(), vec![256.0]);
        assert_eq!(sim.cycle_report().cycles_compute(), 2 * 48);
    }

    #[test]
    fn illegal_opcode_reports_index() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let mut prog = words(&[config(1, 1, 1)]);
        prog.push(0x20);
        assert!(matches!(
            sim.ingest(&prog),
            Err(Error::IllegalOpcode {
                word: 0x20,
                index: 6
            })
        ));
    }

    #[test]
    fn capacity_faults() {
        let caps = AccelCaps {
            weight_cache_sb: 1,
            input_cache_sb: 1,
            n_fifos: 1,
            out_buf_elems: 4,
        };
        let mut sim = Simulator::new(SimConfig::with_caps(caps)).unwrap();
        assert!(matches!(
            sim.ingest(&words(&[config(3, 2, 1)])),
            Err(Error::CapacityFault(_))
        ));
        let two = [q3k_ones().to_bytes(), q3k_ones().to_bytes()].concat();
        let prog = words(&[
            config(1, 1, 2),
            Instruction::LoadWeights(SbBlob::new(Variant::Q3K, two).unwrap()),
        ]);
        assert!(matches!(sim.ingest(&prog), Err(Error::CapacityFault(_))));
    }

    #[test]
    fn variant_mismatch_is_a_fault() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let mut prog = words(&[
            config(1, 1, 1),
            Instruction::LoadInput(SbBlob::new(Variant::Q8K, q8k_ones().to_bytes()).unwrap()),
            Instruction::LoadWeights(SbBlob::new(Variant::Q3K, q3k_ones().to_bytes()).unwrap()),
        ]);
        // switch the register to Q2_K without reloading the Q3_K weights
        prog.extend([0x01, 0, 1, 1, 1, 0, 0x08]);
        assert!(matches!(sim.ingest(&prog), Err(Error::ProtocolFault(_))));
    }

    #[test]
    fn store_before_full_depth_is_a_fault() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let prog = words(&[config(1, 1, 2), Instruction::StoreOutput]);
        assert!(matches!(sim.ingest(&prog), Err(Error::ProtocolFault(_))));
    }

    #[test]
    fn lanes_must_divide_block() {
        let bad = SimConfig {
            lanes: 3,
            ..SimConfig::default()
        };
        assert!(Simulator::new(bad).is_err());
    }
}
