//! Bit-slicer: splits raw superblock packets into the DSBP cache fields.

use crate::codec::{check_len, low2_position, read_fp16, Variant, BLOCKS_PER_SB, BLOCK_LEN, QK_K};
use crate::error::{Error, Result};

/// Which cache a packet is headed for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbKind {
    Weight,
    Input,
}

/// One sliced weight superblock as held in the weight cache.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum WeightEntry {
    Q2 {
        d: f32,
        dmin: f32,
        /// `(scale4, min4)` per block.
        scales: [(u8, u8); BLOCKS_PER_SB],
        low: [u8; QK_K],
    },
    Q3 {
        d: f32,
        /// Raw 6-bit codes; the effective scale is `sc6 - 32`.
        scales: [u8; BLOCKS_PER_SB],
        low: [u8; QK_K],
        high: [u8; QK_K],
    },
}

impl WeightEntry {
    pub fn variant(&self) -> Variant {
        match self {
            WeightEntry::Q2 { .. } => Variant::Q2K,
            WeightEntry::Q3 { .. } => Variant::Q3K,
        }
    }

    /// Decoded weights, for checking the slicer against the codec.
    pub fn dequantize(&self) -> [f32; QK_K] {
        let mut out = [0.0f32; QK_K];
        match self {
            WeightEntry::Q2 {
                d,
                dmin,
                scales,
                low,
            } => {
                for (i, v) in out.iter_mut().enumerate() {
                    let (sc, mc) = scales[i / BLOCK_LEN];
                    *v = (d * sc as f32) * low[i] as f32 - dmin * mc as f32;
                }
            }
            WeightEntry::Q3 {
                d,
                scales,
                low,
                high,
            } => {
                for (i, v) in out.iter_mut().enumerate() {
                    let sc = scales[i / BLOCK_LEN] as i32 - 32;
                    *v = (d * sc as f32) * ((low[i] | (high[i] << 2)) as i32 - 4) as f32;
                }
            }
        }
        out
    }
}

/// One sliced Q8_K superblock as held in the input cache.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEntry {
    pub d: f32,
    pub qs: [i8; QK_K],
    pub bsums: [i32; BLOCKS_PER_SB],
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum CacheEntry {
    Weight(WeightEntry),
    Input(InputEntry),
}

fn low2(qs: &[u8]) -> [u8; QK_K] {
    std::array::from_fn(|i| {
        let (byte, shift) = low2_position(i);
        (qs[byte] >> shift) & 0x3
    })
}

/// Slice one raw superblock packet.
pub fn bit_slice_sb(raw: &[u8], variant: Variant, kind: SbKind) -> Result<CacheEntry> {
    check_len(raw, variant)?;
    match (variant, kind) {
        (Variant::Q2K, SbKind::Weight) => {
            let scales = std::array::from_fn(|j| (raw[j] & 0x0F, raw[j] >> 4));
            Ok(CacheEntry::Weight(WeightEntry::Q2 {
                d: read_fp16(raw, 80, "d")?.to_f32(),
                dmin: read_fp16(raw, 82, "dmin")?.to_f32(),
                scales,
                low: low2(&raw[16..80]),
            }))
        }
        (Variant::Q3K, SbKind::Weight) => {
            let (hmask, rest) = raw.split_at(32);
            let (qs, rest) = rest.split_at(64);
            let sc = &rest[..12];
            let scales = std::array::from_fn(|j| {
                let lo = (sc[j % 8] >> (4 * (j / 8))) & 0x0F;
                let hi = (sc[8 + j % 4] >> (2 * (j / 4))) & 0x03;
                lo | (hi << 4)
            });
            Ok(CacheEntry::Weight(WeightEntry::Q3 {
                d: read_fp16(raw, 108, "d")?.to_f32(),
                scales,
                low: low2(qs),
                high: std::array::from_fn(|i| (hmask[i % 32] >> (i / 32)) & 1),
            }))
        }
        (Variant::Q8K, SbKind::Input) => {
            let qs: [i8; QK_K] = std::array::from_fn(|i| raw[2 + i] as i8);
            let bsums = std::array::from_fn(|j| {
                qs[j * BLOCK_LEN..(j + 1) * BLOCK_LEN]
                    .iter()
                    .map(|&q| q as i32)
                    .sum()
            });
            Ok(CacheEntry::Input(InputEntry {
                d: read_fp16(raw, 0, "d")?.to_f32(),
                qs,
                bsums,
            }))
        }
        (v, k) => Err(Error::format(format!(
            "{v} superblock cannot go to the {k:?} cache"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{Q2KSuperBlock, SuperBlockFormat};
    use crate::kernels::{q3k_ones, q8k_ones};

    #[test]
    fn q3k_ones_slices_to_ones() {
        let raw = q3k_ones().to_bytes();
        let CacheEntry::Weight(WeightEntry::Q3 {
            scales, low, high, ..
        }) = bit_slice_sb(&raw, Variant::Q3K, SbKind::Weight).unwrap()
        else {
            panic!("expected a Q3 weight entry")
        };
        assert!(scales.iter().all(|&s| s == 33));
        assert!(low.iter().all(|&l| l == 1));
        assert!(high.iter().all(|&h| h == 1));
    }

    #[test]
    fn q2k_zero_slices_to_zeros() {
        let raw = Q2KSuperBlock::default().to_bytes();
        let CacheEntry::Weight(WeightEntry::Q2 {
            d,
            dmin,
            scales,
            low,
        }) = bit_slice_sb(&raw, Variant::Q2K, SbKind::Weight).unwrap()
        else {
            panic!("expected a Q2 weight entry")
        };
        assert_eq!((d, dmin), (0.0, 0.0));
        assert!(scales.iter().all(|&s| s == (0, 0)));
        assert!(low.iter().all(|&l| l == 0));
    }

    #[test]
    fn input_bsums() {
        let raw = q8k_ones().to_bytes();
        let CacheEntry::Input(e) = bit_slice_sb(&raw, Variant::Q8K, SbKind::Input).unwrap() else {
            panic!("expected an input entry")
        };
        assert_eq!(e.d, 1.0);
        assert!(e.bsums.iter().all(|&s| s == 16));
    }

    #[test]
    fn rejects_wrong_kind_and_length() {
        let raw = q8k_ones().to_bytes();
        assert!(matches!(
            bit_slice_sb(&raw, Variant::Q8K, SbKind::Weight),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            bit_slice_sb(&raw[..100], Variant::Q2K, SbKind::Weight),
            Err(Error::Format(_))
        ));
    }
}
