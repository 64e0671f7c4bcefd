//! Dynamic Super Block Processor: a shared integer vector engine followed
//! by the Q2 or Q3 scalar unit.

use super::slicer::{InputEntry, WeightEntry};
use crate::codec::{BLOCKS_PER_SB, BLOCK_LEN};

/// Unsigned-weight integer dot product of each 16-value block.
///
/// Both variants feed the engine non-negative codes (Q2 low bits, or Q3
/// `low + 4·high`); signs and offsets are applied by the scalar units.
fn vector_engine(codes: impl Fn(usize) -> u8, x: &InputEntry) -> [i32; BLOCKS_PER_SB] {
    std::array::from_fn(|j| {
        let base = j * BLOCK_LEN;
        (base..base + BLOCK_LEN)
            .map(|i| codes(i) as i32 * x.qs[i] as i32)
            .sum()
    })
}

/// Scaled contribution of one weight superblock times one input superblock.
pub fn sb_dot(w: &WeightEntry, x: &InputEntry) -> f32 {
    match w {
        WeightEntry::Q2 {
            d,
            dmin,
            scales,
            low,
        } => {
            let dots = vector_engine(|i| low[i], x);
            let mut sum_scaled = 0i32;
            let mut sum_min = 0i32;
            for j in 0..BLOCKS_PER_SB {
                let (sc, mc) = scales[j];
                sum_scaled += sc as i32 * dots[j];
                sum_min += mc as i32 * x.bsums[j];
            }
            x.d * (d * sum_scaled as f32 - dmin * sum_min as f32)
        }
        WeightEntry::Q3 {
            d,
            scales,
            low,
            high,
        } => {
            let dots = vector_engine(|i| low[i] | (high[i] << 2), x);
            let mut sum = 0i32;
            for j in 0..BLOCKS_PER_SB {
                // Σ (q3 - 4)·x = Σ q3·x - 4·Σ x
                sum += (scales[j] as i32 - 32) * (dots[j] - 4 * x.bsums[j]);
            }
            x.d * d * sum as f32
        }
    }
}
