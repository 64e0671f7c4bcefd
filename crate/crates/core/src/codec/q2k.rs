use super::{
    check_finite, check_len, read_fp16, squared_error, Fp16, SuperBlockFormat, Variant,
    BLOCKS_PER_SB, BLOCK_LEN, QK_K,
};
use crate::error::Result;

/// 2-bit superblock: `w = d·scale4·q − dmin·min4` per 16-value block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Q2KSuperBlock {
    /// Low nibble: scale code, high nibble: min code.
    pub scales: [u8; 16],
    pub qs: [u8; 64],
    pub d: Fp16,
    pub dmin: Fp16,
}

impl Default for Q2KSuperBlock {
    fn default() -> Self {
        Q2KSuperBlock {
            scales: [0; 16],
            qs: [0; 64],
            d: Fp16::ZERO,
            dmin: Fp16::ZERO,
        }
    }
}

/// Byte and shift of the 2-bit field holding value `i`, shared with Q3_K.
#[inline]
pub(crate) fn low2_position(i: usize) -> (usize, u32) {
    (32 * (i / 128) + (i % 32), (2 * ((i % 128) / 32)) as u32)
}

impl Q2KSuperBlock {
    pub fn scale4(&self, block: usize) -> u8 {
        self.scales[block] & 0x0F
    }

    pub fn min4(&self, block: usize) -> u8 {
        self.scales[block] >> 4
    }

    pub fn q2(&self, i: usize) -> u8 {
        let (byte, shift) = low2_position(i);
        (self.qs[byte] >> shift) & 0x3
    }

    pub fn set_codes(&mut self, block: usize, scale4: u8, min4: u8) {
        debug_assert!(scale4 < 16 && min4 < 16);
        self.scales[block] = (scale4 & 0x0F) | (min4 << 4);
    }

    pub fn set_q2(&mut self, i: usize, q: u8) {
        debug_assert!(q < 4);
        let (byte, shift) = low2_position(i);
        self.qs[byte] = (self.qs[byte] & !(0x3 << shift)) | ((q & 0x3) << shift);
    }
}

impl SuperBlockFormat for Q2KSuperBlock {
    const VARIANT: Variant = Variant::Q2K;
    const BYTES: usize = 84;

    fn quantize(values: &[f32; QK_K]) -> Result<Self> {
        quantize_q2k(values)
    }

    fn dequantize(&self) -> [f32; QK_K] {
        dequantize_q2k(self)
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.scales);
        out.extend_from_slice(&self.qs);
        out.extend_from_slice(&self.d.to_le_bytes());
        out.extend_from_slice(&self.dmin.to_le_bytes());
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_len(bytes, Variant::Q2K)?;
        Ok(Q2KSuperBlock {
            scales: bytes[0..16].try_into().unwrap(),
            qs: bytes[16..80].try_into().unwrap(),
            d: read_fp16(bytes, 80, "d")?,
            dmin: read_fp16(bytes, 82, "dmin")?,
        })
    }
}

pub fn dequantize_q2k(sb: &Q2KSuperBlock) -> [f32; QK_K] {
    let d = sb.d.to_f32();
    let dmin = sb.dmin.to_f32();
    let mut out = [0.0f32; QK_K];
    for (j, block) in out.chunks_exact_mut(BLOCK_LEN).enumerate() {
        let dl = d * sb.scale4(j) as f32;
        let ml = dmin * sb.min4(j) as f32;
        for (k, v) in block.iter_mut().enumerate() {
            *v = dl * sb.q2(j * BLOCK_LEN + k) as f32 - ml;
        }
    }
    out
}

/// Quantize 256 values to Q2_K.
///
/// Per block the step is `(max + m) / 3` and the offset `m = max(0, -min)`;
/// both are coded as 4-bit multiples of the superblock scales. Joint
/// least-squares re-fits of step and offset against the chosen quants are
/// repeated while they lower the squared error, then each block's codes are
/// compared with their immediate neighbours.
pub fn quantize_q2k(values: &[f32; QK_K]) -> Result<Q2KSuperBlock> {
    check_finite(values)?;
    let mut steps = [0.0f32; BLOCKS_PER_SB];
    let mut offsets = [0.0f32; BLOCKS_PER_SB];
    for (j, block) in values.chunks_exact(BLOCK_LEN).enumerate() {
        let lo = block.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = block.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        offsets[j] = (-lo).max(0.0);
        steps[j] = ((hi + offsets[j]) / 3.0).max(0.0);
    }
    let mut best = encode(values, &steps, &offsets)?;
    let mut best_err = squared_error(&dequantize_q2k(&best), values);
    let mut current = best.clone();
    for _ in 0..REFINE_PASSES {
        let (refit_steps, refit_offsets) = refit(values, &current, &steps, &offsets);
        current = encode(values, &refit_steps, &refit_offsets)?;
        let err = squared_error(&dequantize_q2k(&current), values);
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

/// Try the neighbouring scale and min codes of every block with the
/// superblock scales held fixed; keep whichever lowers the block error.
fn polish_codes(values: &[f32; QK_K], sb: &mut Q2KSuperBlock) {
    let d = sb.d.to_f32();
    let dmin = sb.dmin.to_f32();
    for (j, block) in values.chunks_exact(BLOCK_LEN).enumerate() {
        let (sc0, mc0) = (sb.scale4(j) as i32, sb.min4(j) as i32);
        let mut best = (
            block_error(block, d * sc0 as f32, dmin * mc0 as f32),
            sc0,
            mc0,
        );
        for sc in (sc0 - 1).max(0)..=(sc0 + 1).min(15) {
            for mc in (mc0 - 1).max(0)..=(mc0 + 1).min(15) {
                let err = block_error(block, d * sc as f32, dmin * mc as f32);
                if err < best.0 {
                    best = (err, sc, mc);
                }
            }
        }
        let (_, sc, mc) = best;
        if (sc, mc) != (sc0, mc0) {
            sb.set_codes(j, sc as u8, mc as u8);
            let dl = d * sc as f32;
            let ml = dmin * mc as f32;
            for (k, &w) in block.iter().enumerate() {
                sb.set_q2(j * BLOCK_LEN + k, quant2(w, dl, ml));
            }
        }
    }
}

fn quant2(w: f32, dl: f32, ml: f32) -> u8 {
    if dl > 0.0 {
        ((w + ml) / dl).round().clamp(0.0, 3.0) as u8
    } else {
        0
    }
}

fn block_error(block: &[f32], dl: f32, ml: f32) -> f64 {
    block
        .iter()
        .map(|&w| {
            let e = (dl * quant2(w, dl, ml) as f32 - ml) as f64 - w as f64;
            e * e
        })
        .sum()
}

const REFINE_PASSES: usize = 8;

/// Joint least-squares fit of `w ≈ step·q − offset` per block, given the
/// quants currently assigned in `sb`.
fn refit(
    values: &[f32; QK_K],
    sb: &Q2KSuperBlock,
    steps: &[f32; BLOCKS_PER_SB],
    offsets: &[f32; BLOCKS_PER_SB],
) -> ([f32; BLOCKS_PER_SB], [f32; BLOCKS_PER_SB]) {
    let mut refit_steps = *steps;
    let mut refit_offsets = *offsets;
    for (j, block) in values.chunks_exact(BLOCK_LEN).enumerate() {
        let (mut sq, mut sw, mut sqq, mut sqw) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for (k, &w) in block.iter().enumerate() {
            let q = sb.q2(j * BLOCK_LEN + k) as f64;
            sq += q;
            sw += w as f64;
            sqq += q * q;
            sqw += q * w as f64;
        }
        let n = BLOCK_LEN as f64;
        let det = n * sqq - sq * sq;
        if det > 0.0 {
            let step = (n * sqw - sq * sw) / det;
            let offset = (step * sq - sw) / n;
            refit_steps[j] = (step as f32).max(0.0);
            refit_offsets[j] = (offset as f32).max(0.0);
        }
    }
    (refit_steps, refit_offsets)
}

fn code4(x: f32, unit: f32) -> u8 {
    if unit > 0.0 {
        (x / unit).round().clamp(0.0, 15.0) as u8
    } else {
        0
    }
}

fn encode(
    values: &[f32; QK_K],
    steps: &[f32; BLOCKS_PER_SB],
    offsets: &[f32; BLOCKS_PER_SB],
) -> Result<Q2KSuperBlock> {
    let max_step = steps.iter().copied().fold(0.0f32, f32::max);
    let max_off = offsets.iter().copied().fold(0.0f32, f32::max);
    let mut sb = Q2KSuperBlock {
        d: Fp16::from_f32(max_step / 15.0)?,
        dmin: Fp16::from_f32(max_off / 15.0)?,
        ..Default::default()
    };
    let d = sb.d.to_f32();
    let dmin = sb.dmin.to_f32();
    for j in 0..BLOCKS_PER_SB {
        let sc = code4(steps[j], d);
        let mc = code4(offsets[j], dmin);
        sb.set_codes(j, sc, mc);
        let dl = d * sc as f32;
        let ml = dmin * mc as f32;
        for k in 0..BLOCK_LEN {
            let i = j * BLOCK_LEN + k;
            sb.set_q2(i, quant2(values[i], dl, ml));
        }
    }
    Ok(sb)
}
