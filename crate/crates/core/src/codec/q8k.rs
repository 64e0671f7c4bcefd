use super::{
    check_finite, check_len, read_fp16, Fp16, SuperBlockFormat, Variant, BLOCKS_PER_SB, BLOCK_LEN,
    QK_K,
};
use crate::error::Result;

/// 8-bit input superblock with cached per-block sums.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Q8KSuperBlock {
    d: Fp16,
    qs: [i8; QK_K],
    bsums: [i32; BLOCKS_PER_SB],
}

impl Default for Q8KSuperBlock {
    fn default() -> Self {
        Q8KSuperBlock::new(Fp16::ZERO, [0; QK_K])
    }
}

impl Q8KSuperBlock {
    pub fn new(d: Fp16, qs: [i8; QK_K]) -> Self {
        let mut bsums = [0i32; BLOCKS_PER_SB];
        for (sum, block) in bsums.iter_mut().zip(qs.chunks_exact(BLOCK_LEN)) {
            *sum = block.iter().map(|&q| q as i32).sum();
        }
        Q8KSuperBlock { d, qs, bsums }
    }

    pub fn d(&self) -> Fp16 {
        self.d
    }

    pub fn qs(&self) -> &[i8; QK_K] {
        &self.qs
    }

    pub fn bsums(&self) -> &[i32; BLOCKS_PER_SB] {
        &self.bsums
    }

    /// Same quants with a different scale.
    pub fn with_scale(&self, d: Fp16) -> Self {
        Q8KSuperBlock { d, ..self.clone() }
    }
}

impl SuperBlockFormat for Q8KSuperBlock {
    const VARIANT: Variant = Variant::Q8K;
    const BYTES: usize = 258;

    fn quantize(values: &[f32; QK_K]) -> Result<Self> {
        quantize_q8k(values)
    }

    fn dequantize(&self) -> [f32; QK_K] {
        dequantize_q8k(self)
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.d.to_le_bytes());
        out.extend(self.qs.iter().map(|&q| q as u8));
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self> {
        check_len(bytes, Variant::Q8K)?;
        let d = read_fp16(bytes, 0, "d")?;
        let qs = std::array::from_fn(|i| bytes[2 + i] as i8);
        Ok(Q8KSuperBlock::new(d, qs))
    }
}

/// Symmetric 8-bit quantization with `d = fp16(amax / 127)`.
pub fn quantize_q8k(values: &[f32; QK_K]) -> Result<Q8KSuperBlock> {
    check_finite(values)?;
    let amax = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let d = Fp16::from_f32(amax / 127.0)?;
    let scale = d.to_f32();
    if scale == 0.0 {
        return Ok(Q8KSuperBlock::new(d, [0; QK_K]));
    }
    let qs = std::array::from_fn(|i| (values[i] / scale).round().clamp(-127.0, 127.0) as i8);
    Ok(Q8KSuperBlock::new(d, qs))
}

pub fn dequantize_q8k(sb: &Q8KSuperBlock) -> [f32; QK_K] {
    let d = sb.d.to_f32();
    std::array::from_fn(|i| d * sb.qs[i] as f32)
}
