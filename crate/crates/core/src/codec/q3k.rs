use super::q2k::low2_position;
use super::{
    check_finite, check_len, read_fp16, squared_error, Fp16, SuperBlockFormat, Variant,
    BLOCKS_PER_SB, BLOCK_LEN, QK_K,
};
use crate::error::Result;

/// 3-bit superblock: `w = d·(sc6 − 32)·(q3 − 4)` per 16-value block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Q3KSuperBlock {
    pub hmask: [u8; 32],
    pub qs: [u8; 64],
    pub scales: [u8; 12],
    pub d: Fp16,
}

impl Default for Q3KSuperBlock {
    fn default() -> Self {
        Q3KSuperBlock {
            hmask: [0; 32],
            qs: [0; 64],
            scales: [0; 12],
            d: Fp16::ZERO,
        }
    }
}

impl Q3KSuperBlock {
    /// Raw 6-bit scale code of block `j` (0..=63, effective scale is `sc6 - 32`).
    pub fn sc6(&self, j: usize) -> u8 {
        let lo = (self.scales[j % 8] >> (4 * (j / 8))) & 0x0F;
        let hi = (self.scales[8 + j % 4] >> (2 * (j / 4))) & 0x03;
        lo | (hi << 4)
    }

    pub fn set_sc6(&mut self, j: usize, code: u8) {
        debug_assert!(code < 64);
        let lo_shift = 4 * (j / 8);
        let lo = &mut self.scales[j % 8];
        *lo = (*lo & !(0x0F << lo_shift)) | ((code & 0x0F) << lo_shift);
        let hi_shift = 2 * (j / 4);
        let hi = &mut self.scales[8 + j % 4];
        *hi = (*hi & !(0x03 << hi_shift)) | (((code >> 4) & 0x03) << hi_shift);
    }

    pub fn low2(&self, i: usize) -> u8 {
        let (byte, shift) = low2_position(i);
        (self.qs[byte] >> shift) & 0x3
    }

    pub fn hbit(&self, i: usize) -> u8 {
        (self.hmask[i % 32] >> (i / 32)) & 1
    }

    /// Unsigned 3-bit quant (0..=7); the signed weight is `q3 - 4`.
    pub fn q3(&self, i: usize) -> u8 {
        self.low2(i) | (self.hbit(i) << 2)
    }

    pub fn set_q3(&mut self, i: usize, q: u8) {
        debug_assert!(q < 8);
        let (byte, shift) = low2_position(i);
        self.qs[byte] = (self.qs[byte] & !(0x3 << shift)) | ((q & 0x3) << shift);
        let bit = 1u8 << (i / 32);
        if q & 0x4 != 0 {
            self.hmask[i % 32] |= bit;
        } else {
            self.hmask[i % 32] &= !bit;
        }
    }
}

impl SuperBlockFormat for Q3KSuperBlock {
    const VARIANT: Variant = Variant::Q3K;
    const BYTES: usize = 110;

    fn quantize(values: &[f32; QK_K]) -> Result<Self> {
        quantize_q3k(values)
    }

    fn dequantize(&self) -> [f32; QK_K] {
        dequantize_q3k(self)
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.hmask);
        out.extend_from_slice(&self.qs);
        out.extend_from_slice(&self.scales);
        out.extend_from_slice(&self.d.to_le_bytes());
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_len(bytes, Variant::Q3K)?;
        Ok(Q3KSuperBlock {
            hmask: bytes[0..32].try_into().unwrap(),
            qs: bytes[32..96].try_into().unwrap(),
            scales: bytes[96..108].try_into().unwrap(),
            d: read_fp16(bytes, 108, "d")?,
        })
    }
}

pub fn dequantize_q3k(sb: &Q3KSuperBlock) -> [f32; QK_K] {
    let d = sb.d.to_f32();
    let mut out = [0.0f32; QK_K];
    for (j, block) in out.chunks_exact_mut(BLOCK_LEN).enumerate() {
        let dl = d * (sb.sc6(j) as i32 - 32) as f32;
        for (k, v) in block.iter_mut().enumerate() {
            *v = dl * (sb.q3(j * BLOCK_LEN + k) as i32 - 4) as f32;
        }
    }
    out
}

/// Quantize 256 values to Q3_K.
///
/// The block step maps the largest-magnitude value onto -4 when it is
/// negative and onto +3 otherwise; steps are coded as 6-bit multiples of
/// `d = max_step / 31`. Least-squares re-fits of each step follow, repeated
/// while it lowers the squared error, then each block code is compared with
/// its immediate neighbours.
pub fn quantize_q3k(values: &[f32; QK_K]) -> Result<Q3KSuperBlock> {
    check_finite(values)?;
    let mut steps = [0.0f32; BLOCKS_PER_SB];
    for (j, block) in values.chunks_exact(BLOCK_LEN).enumerate() {
        let peak = block
            .iter()
            .copied()
            .fold(0.0f32, |acc, w| if w.abs() > acc.abs() { w } else { acc });
        steps[j] = if peak < 0.0 { -peak / 4.0 } else { peak / 3.0 };
    }
    let mut best = encode(values, &steps)?;
    let mut best_err = squared_error(&dequantize_q3k(&best), values);
    let mut current = best.clone();
    for _ in 0..REFINE_PASSES {
        current = encode(values, &refit(values, &current, &steps))?;
        let err = squared_error(&dequantize_q3k(&current), values);
        if err < best_err {
            best = current.clone();
            best_err = err;
        } else {
            break;
        }
    }
    polish_codes(values, &mut best);
    Ok(best)
}

const REFINE_PASSES: usize = 8;

/// Least-squares step per block given the quants assigned in `sb`.
fn refit(
    values: &[f32; QK_K],
    sb: &Q3KSuperBlock,
    steps: &[f32; BLOCKS_PER_SB],
) -> [f32; BLOCKS_PER_SB] {
    let mut out = *steps;
    for (j, block) in values.chunks_exact(BLOCK_LEN).enumerate() {
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (k, &w) in block.iter().enumerate() {
            let q = sb.q3(j * BLOCK_LEN + k) as i32 - 4;
            num += q as f64 * w as f64;
            den += (q * q) as f64;
        }
        if den > 0.0 {
            out[j] = ((num / den) as f32).max(0.0);
        }
    }
    out
}

/// Neighbouring scale codes with `d` held fixed.
fn polish_codes(values: &[f32; QK_K], sb: &mut Q3KSuperBlock) {
    let d = sb.d.to_f32();
    for (j, block) in values.chunks_exact(BLOCK_LEN).enumerate() {
        let c0 = sb.sc6(j) as i32;
        let mut best = (block_error(block, d * (c0 - 32) as f32), c0);
        for c in (c0 - 1).max(0)..=(c0 + 1).min(63) {
            let err = block_error(block, d * (c - 32) as f32);
            if err < best.0 {
                best = (err, c);
            }
        }
        if best.1 != c0 {
            sb.set_sc6(j, best.1 as u8);
            let dl = d * (best.1 - 32) as f32;
            for (k, &w) in block.iter().enumerate() {
                sb.set_q3(j * BLOCK_LEN + k, quant3(w, dl));
            }
        }
    }
}

/// Unsigned 3-bit code for `w` on a grid of step `dl`.
fn quant3(w: f32, dl: f32) -> u8 {
    let q = if dl != 0.0 {
        (w / dl).round().clamp(-4.0, 3.0) as i32
    } else {
        0
    };
    (q + 4) as u8
}

fn block_error(block: &[f32], dl: f32) -> f64 {
    block
        .iter()
        .map(|&w| {
            let e = (dl * (quant3(w, dl) as i32 - 4) as f32) as f64 - w as f64;
            e * e
        })
        .sum()
}

fn encode(values: &[f32; QK_K], steps: &[f32; BLOCKS_PER_SB]) -> Result<Q3KSuperBlock> {
    let max_step = steps.iter().copied().fold(0.0f32, f32::max);
    let mut sb = Q3KSuperBlock {
        d: Fp16::from_f32(max_step / 31.0)?,
        ..Default::default()
    };
    let d = sb.d.to_f32();
    for (j, &step) in steps.iter().enumerate() {
        let code = if d > 0.0 {
            ((step / d).round() + 32.0).clamp(0.0, 63.0) as u8
        } else {
            32
        };
        sb.set_sc6(j, code);
        let dl = d * (code as i32 - 32) as f32;
        for k in 0..BLOCK_LEN {
            let i = j * BLOCK_LEN + k;
            sb.set_q3(i, quant3(values[i], dl));
        }
    }
    Ok(sb)
}
