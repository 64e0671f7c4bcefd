//! Host-side driver: output-stationary tiling, program generation and
//! output collection.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::codec::QK_K;
use crate::error::{Error, Result};
use crate::isa::{build_program, InstructionStream};
use crate::kernels::{quantize_input, MatrixF32, QuantMatrix, QuantizedInput};
use crate::sim::Simulator;

/// MatMul problem size: `M×K` weights times `K×N` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl LayerDims {
    pub fn new(m: usize, k: usize, n: usize) -> Result<Self> {
        let dims = LayerDims { m, k, n };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::shape(format!("dimensions must be positive: {self}")));
        }
        if !self.k.is_multiple_of(QK_K) {
            return Err(Error::shape(format!(
                "K = {} is not a multiple of {QK_K}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn k_sb(&self) -> usize {
        self.k / QK_K
    }
}

impl std::fmt::Display for LayerDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.k, self.n)
    }
}

impl std::str::FromStr for LayerDims {
    type Err = Error;

    /// `MxKxN`, e.g. `8x512x4`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidInput(format!("bad dims {s:?}, expected MxKxN")))?;
        match parts[..] {
            [m, k, n] => LayerDims::new(m, k, n),
            _ => Err(Error::InvalidInput(format!(
                "bad dims {s:?}, expected MxKxN"
            ))),
        }
    }
}

/// On-chip capacities, in superblocks for the caches and fp32 values for
/// the accumulator bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AccelCaps {
    pub weight_cache_sb: usize,
    pub input_cache_sb: usize,
    pub n_fifos: usize,
    pub out_buf_elems: usize,
}

impl Default for AccelCaps {
    fn default() -> Self {
        AccelCaps {
            weight_cache_sb: 8,
            input_cache_sb: 64,
            n_fifos: 4,
            out_buf_elems: 1024,
        }
    }
}

impl AccelCaps {
    pub fn validate(&self) -> Result<()> {
        if self.weight_cache_sb == 0
            || self.input_cache_sb == 0
            || self.n_fifos == 0
            || self.out_buf_elems == 0
        {
            return Err(Error::Capacity(format!(
                "all capacities must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for AccelCaps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}:{}:{}:{}",
            self.weight_cache_sb, self.input_cache_sb, self.n_fifos, self.out_buf_elems
        )
    }
}

impl std::str::FromStr for AccelCaps {
    type Err = Error;

    /// `weight_cache_sb:input_cache_sb:n_fifos:out_buf_elems`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidInput(format!("bad caps {s:?}, expected w:i:f:o")))?;
        match parts[..] {
            [w, i, f, o] => {
                let caps = AccelCaps {
                    weight_cache_sb: w,
                    input_cache_sb: i,
                    n_fifos: f,
                    out_buf_elems: o,
                };
                caps.validate()?;
                Ok(caps)
            }
            _ => Err(Error::InvalidInput(format!(
                "bad caps {s:?}, expected w:i:f:o"
            ))),
        }
    }
}

/// One output tile, `m_tile×n_tile` cells starting at `(m0, n0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub m0: usize,
    pub n0: usize,
    pub m_tile: usize,
    pub n_tile: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    /// Row-major tile order.
    pub tiles: Vec<Tile>,
    pub k_sb: usize,
    /// Superblocks per row handled by one SCHEDULE (the last chunk may be shorter).
    pub k_chunk: usize,
    /// The whole quantized input stays resident in the input cache.
    pub fast_path: bool,
}

impl TilePlan {
    /// Depth ranges, in superblocks, of the successive SCHEDULEs of a tile.
    pub fn chunks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let step = self.k_chunk.max(1);
        (0..self.k_sb)
            .step_by(step)
            .map(move |k0| k0..(k0 + step).min(self.k_sb))
    }

    pub fn num_chunks(&self) -> usize {
        self.k_sb.div_ceil(self.k_chunk.max(1))
    }

    /// Tiles exactly cover the `m×n` output and the depth matches.
    pub fn check_shape(&self, m: usize, n: usize, k_sb: usize) -> Result<()> {
        if self.k_sb != k_sb {
            return Err(Error::Plan(format!(
                "plan depth {} != layer depth {k_sb}",
                self.k_sb
            )));
        }
        if self.k_chunk == 0 || self.k_chunk > self.k_sb.max(1) {
            return Err(Error::Plan(format!("bad depth chunk {}", self.k_chunk)));
        }
        let mut seen = vec![false; m * n];
        for t in &self.tiles {
            if t.m_tile == 0 || t.n_tile == 0 || t.m0 + t.m_tile > m || t.n0 + t.n_tile > n {
                return Err(Error::Plan(format!("tile {t:?} outside {m}x{n}")));
            }
            for r in t.m0..t.m0 + t.m_tile {
                for c in t.n0..t.n0 + t.n_tile {
                    if std::mem::replace(&mut seen[r * n + c], true) {
                        return Err(Error::Plan(format!("cell ({r},{c}) covered twice")));
                    }
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Plan(format!(
                "cell ({},{}) not covered",
                i / n,
                i % n
            )));
        }
        Ok(())
    }

    /// Every tile and chunk fits the on-chip capacities.
    pub fn check_caps(&self, n: usize, caps: &AccelCaps) -> Result<()> {
        if self.fast_path && self.k_sb * n > caps.input_cache_sb {
            return Err(Error::Capacity(
                "fast-path input exceeds the input cache".into(),
            ));
        }
        for t in &self.tiles {
            if t.m_tile * t.n_tile > caps.out_buf_elems {
                return Err(Error::Capacity(format!(
                    "tile {t:?} exceeds the accumulator bank"
                )));
            }
            if t.m_tile * self.k_chunk > caps.weight_cache_sb {
                return Err(Error::Capacity(format!(
                    "tile {t:?} exceeds the weight cache"
                )));
            }
            if !self.fast_path && t.n_tile * self.k_chunk > caps.input_cache_sb {
                return Err(Error::Capacity(format!(
                    "tile {t:?} exceeds the input cache"
                )));
            }
        }
        Ok(())
    }
}

/// Plan output-stationary tiles for `dims` under `caps`.
///
/// The fast path applies when the whole quantized input fits the input
/// cache (`k_sb·N ≤ input_cache_sb`) and one row of outputs fits the
/// accumulator bank; tiles then span all N columns. Otherwise `n_tile` is
/// maximized first, then `m_tile`, and the depth is split into chunks that
/// fit both caches. Partial sums stay in the accumulator across chunks.
pub fn plan_tiles(dims: LayerDims, caps: AccelCaps) -> Result<TilePlan> {
    dims.validate()?;
    caps.validate()?;
    let k_sb = dims.k_sb();
    let fast_path = k_sb * dims.n <= caps.input_cache_sb && dims.n <= caps.out_buf_elems;
    let n_tile = if fast_path {
        dims.n
    } else {
        dims.n.min(caps.out_buf_elems).min(caps.input_cache_sb)
    };
    let m_tile = dims
        .m
        .min(caps.out_buf_elems / n_tile)
        .min(caps.weight_cache_sb);
    let mut k_chunk = k_sb.min(caps.weight_cache_sb / m_tile);
    if !fast_path {
        k_chunk = k_chunk.min(caps.input_cache_sb / n_tile);
    }
    if k_chunk == 0 {
        // unreachable while every capacity is at least 1
        return Err(Error::Capacity(format!("no depth chunk fits {caps:?}")));
    }
    let mut tiles = Vec::new();
    for m0 in (0..dims.m).step_by(m_tile) {
        for n0 in (0..dims.n).step_by(n_tile) {
            tiles.push(Tile {
                m0,
                n0,
                m_tile: m_tile.min(dims.m - m0),
                n_tile: n_tile.min(dims.n - n0),
            });
        }
    }
    Ok(TilePlan {
        tiles,
        k_sb,
        k_chunk,
        fast_path,
    })
}

/// Owns one simulator and runs whole MatMuls on it.
#[derive(Debug)]
pub struct Driver {
    sim: Simulator,
    last_program: Option<InstructionStream>,
    last_plan: Option<TilePlan>,
}

impl Driver {
    pub fn new(sim: Simulator) -> Self {
        Driver {
            sim,
            last_program: None,
            last_plan: None,
        }
    }

    pub fn caps(&self) -> AccelCaps {
        self.sim.config().caps
    }

    pub fn sim(&self) -> &Simulator {
        &self.sim
    }

    pub fn sim_mut(&mut self) -> &mut Simulator {
        &mut self.sim
    }

    pub fn into_sim(self) -> Simulator {
        self.sim
    }

    /// Program sent by the most recent run.
    pub fn last_program(&self) -> Option<&InstructionStream> {
        self.last_program.as_ref()
    }

    pub fn last_plan(&self) -> Option<&TilePlan> {
        self.last_plan.as_ref()
    }

    /// Quantize `x` to Q8_K, then run [`Driver::run_matmul_quantized`].
    pub fn run_matmul(&mut self, w: &QuantMatrix, x: &MatrixF32) -> Result<MatrixF32> {
        if x.rows() != w.row_len() {
            return Err(Error::shape(format!(
                "weights are {} deep, input is {}",
                w.row_len(),
                x.rows()
            )));
        }
        self.run_matmul_quantized(w, &quantize_input(x)?)
    }

    pub fn run_matmul_quantized(
        &mut self,
        w: &QuantMatrix,
        xq: &QuantizedInput,
    ) -> Result<MatrixF32> {
        let dims = LayerDims::new(w.rows(), w.row_len(), xq.cols())?;
        if xq.k() != dims.k {
            return Err(Error::shape(format!(
                "weights are {} deep, input is {}",
                dims.k,
                xq.k()
            )));
        }
        let plan = plan_tiles(dims, self.caps())?;
        let program = build_program(&plan, w, xq)?;
        self.sim.ingest(program.words())?;
        let values = self.sim.read_output()?;
        let out = assemble(&plan, dims, &values)?;
        self.last_program = Some(program);
        self.last_plan = Some(plan);
        Ok(out)
    }
}

/// Scatter tile-ordered STORE_OUTPUT values into the full output matrix.
pub fn assemble(plan: &TilePlan, dims: LayerDims, values: &[f32]) -> Result<MatrixF32> {
    let expected: usize = plan.tiles.iter().map(|t| t.m_tile * t.n_tile).sum();
    if values.len() != expected {
        return Err(Error::protocol(format!(
            "expected {expected} output values, accelerator returned {}",
            values.len()
        )));
    }
    let mut out = MatrixF32::zeros(dims.m, dims.n);
    let mut it = values.iter();
    for t in &plan.tiles {
        for r in t.m0..t.m0 + t.m_tile {
            for c in t.n0..t.n0 + t.n_tile {
                out.set(r, c, *it.next().unwrap());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_problem_is_one_fast_tile() {
        let plan = plan_tiles(LayerDims::new(4, 256, 4).unwrap(), AccelCaps::default()).unwrap();
        assert!(plan.fast_path);
        assert_eq!(
            plan.tiles,
            vec![Tile {
                m0: 0,
                n0: 0,
                m_tile: 4,
                n_tile: 4
            }]
        );
    }

    #[test]
    fn edge_tiles() {
        let caps = AccelCaps {
            weight_cache_sb: 4,
            input_cache_sb: 4,
            n_fifos: 2,
            out_buf_elems: 16,
        };
        let plan = plan_tiles(LayerDims::new(7, 256, 5).unwrap(), caps).unwrap();
        assert!(!plan.fast_path);
        let got: Vec<_> = plan
            .tiles
            .iter()
            .map(|t| (t.m0, t.n0, t.m_tile, t.n_tile))
            .collect();
        assert_eq!(
            got,
            vec![(0, 0, 4, 4), (0, 4, 4, 1), (4, 0, 3, 4), (4, 4, 3, 1)]
        );
        plan.check_shape(7, 5, 1).unwrap();
        plan.check_caps(5, &caps).unwrap();
    }

    #[test]
    fn depth_is_split_when_weights_overflow() {
        let caps = AccelCaps {
            weight_cache_sb: 4,
            input_cache_sb: 8,
            n_fifos: 1,
            out_buf_elems: 8,
        };
        let plan = plan_tiles(LayerDims::new(8, 2048, 4).unwrap(), caps).unwrap();
        assert!(!plan.fast_path);
        assert_eq!(plan.k_sb, 8);
        assert_eq!(plan.k_chunk, 2);
        assert_eq!(
            plan.chunks().collect::<Vec<_>>(),
            vec![0..2, 2..4, 4..6, 6..8]
        );
        assert_eq!(plan.tiles.len(), 4);
    }

    #[test]
    fn ragged_last_chunk() {
        let plan = TilePlan {
            tiles: vec![],
            k_sb: 5,
            k_chunk: 2,
            fast_path: false,
        };
        assert_eq!(plan.chunks().collect::<Vec<_>>(), vec![0..2, 2..4, 4..5]);
        assert_eq!(plan.num_chunks(), 3);
    }

    #[test]
    fn parsing() {
        assert_eq!(
            "8x512x4".parse::<LayerDims>().unwrap(),
            LayerDims { m: 8, k: 512, n: 4 }
        );
        assert!("8x500x4".parse::<LayerDims>().is_err());
        assert!("8x512".parse::<LayerDims>().is_err());
        assert_eq!(
            "8:64:4:1024".parse::<AccelCaps>().unwrap(),
            AccelCaps::default()
        );
        assert!("0:64:4:1024".parse::<AccelCaps>().is_err());
    }

    #[test]
    fn check_shape_catches_overlap_and_gaps() {
        let t = |m0, n0, m_tile, n_tile| Tile {
            m0,
            n0,
            m_tile,
            n_tile,
        };
        let plan = TilePlan {
            tiles: vec![t(0, 0, 2, 2), t(1, 1, 1, 1)],
            k_sb: 1,
            k_chunk: 1,
            fast_path: false,
        };
        assert!(matches!(plan.check_shape(2, 2, 1), Err(Error::Plan(_))));
        let plan = TilePlan {
            tiles: vec![t(0, 0, 1, 2)],
            ..plan
        };
        assert!(matches!(plan.check_shape(2, 2, 1), Err(Error::Plan(_))));
    }
}
