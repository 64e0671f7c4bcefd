//! Seeded generators and independent oracles shared by the integration tests.
#![allow(dead_code)]

use fbfq_core::codec::{QuantRow, Variant, QK_K};
use fbfq_core::driver::{AccelCaps, LayerDims};
use fbfq_core::kernels::{MatrixF32, QuantMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian values with a random per-superblock spread, occasionally with
/// a bias or an outlier.
pub fn values(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let sigma = 10f32.powf(rng.random_range(-3.0..1.0));
        let bias = if rng.random_bool(0.2) {
            rng.random_range(-1.0..1.0) * sigma
        } else {
            0.0
        };
        let normal = Normal::new(bias, sigma).unwrap();
        for _ in 0..QK_K.min(n - out.len()) {
            out.push(normal.sample(rng));
        }
        if rng.random_bool(0.1) {
            let i = rng.random_range(0..out.len());
            out[i] *= 8.0;
        }
    }
    out
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> MatrixF32 {
    MatrixF32::new(rows, cols, values(rng, rows * cols)).unwrap()
}

pub fn weights(rng: &mut impl Rng, m: usize, k: usize, variant: Variant) -> QuantMatrix {
    QuantMatrix::quantize(&matrix(rng, m, k), variant).unwrap()
}

/// Random finite binary16 pattern, biased towards ordinary magnitudes.
pub fn finite_fp16(rng: &mut impl Rng) -> u16 {
    loop {
        let bits: u16 = if rng.random_bool(0.8) {
            // exponents 5..=20: roughly 2^-10 .. 2^5
            let exp = rng.random_range(5u16..=20);
            (rng.random::<u16>() & 0x8000) | (exp << 10) | (rng.random::<u16>() & 0x03FF)
        } else {
            rng.random()
        };
        if bits & 0x7C00 != 0x7C00 {
            return bits;
        }
    }
}

/// Random raw superblock bytes with finite scales.
pub fn raw_sb(rng: &mut impl Rng, variant: Variant) -> Vec<u8> {
    let mut raw: Vec<u8> = (0..variant.sb_bytes()).map(|_| rng.random()).collect();
    let scale_at: &[usize] = match variant {
        Variant::Q2K => &[80, 82],
        Variant::Q3K => &[108],
        Variant::Q8K => &[0],
    };
    for &at in scale_at {
        raw[at..at + 2].copy_from_slice(&finite_fp16(rng).to_le_bytes());
    }
    raw
}

/// Bit-level binary16 decoder, written without reference to the codec.
pub fn fp16_bits_to_f32(h: u16) -> f32 {
    let sign = if h & 0x8000 != 0 { -1.0f64 } else { 1.0 };
    let exp = ((h >> 10) & 0x1F) as i32;
    let frac = (h & 0x03FF) as f64;
    let v = match exp {
        0 => frac * 2f64.powi(-24),
        0x1F if frac == 0.0 => f64::INFINITY,
        0x1F => f64::NAN,
        e => (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    };
    (sign * v) as f32
}

fn fp16_at(raw: &[u8], at: usize) -> f32 {
    fp16_bits_to_f32(u16::from_le_bytes([raw[at], raw[at + 1]]))
}

/// Two-bit field `i` of a 64-byte packed array: 128-value halves, each a
/// column of four 32-byte shifts.
fn two_bits(qs: &[u8], i: usize) -> u8 {
    let half = i / 128;
    let within = i % 128;
    (qs[32 * half + within % 32] >> (2 * (within / 32))) & 3
}

/// Decode raw superblock bytes straight from the layout tables.
pub fn naive_dequant(raw: &[u8], variant: Variant) -> Vec<f32> {
    assert_eq!(raw.len(), variant.sb_bytes());
    match variant {
        Variant::Q2K => {
            let (d, dmin) = (fp16_at(raw, 80), fp16_at(raw, 82));
            (0..QK_K)
                .map(|i| {
                    let packed = raw[i / 16];
                    let sc = (packed & 0xF) as f32;
                    let mn = (packed >> 4) as f32;
                    (d * sc) * two_bits(&raw[16..80], i) as f32 - dmin * mn
                })
                .collect()
        }
        Variant::Q3K => {
            let d = fp16_at(raw, 108);
            let scales = &raw[96..108];
            (0..QK_K)
                .map(|i| {
                    let j = i / 16;
                    let low4 = (scales[j % 8] >> (4 * (j / 8))) & 0xF;
                    let high2 = (scales[8 + j % 4] >> (2 * (j / 4))) & 3;
                    let sc = ((high2 << 4) | low4) as i32 - 32;
                    let hbit = (raw[i % 32] >> (i / 32)) & 1;
                    let q = (two_bits(&raw[32..96], i) | (hbit << 2)) as i32 - 4;
                    (d * sc as f32) * q as f32
                })
                .collect()
        }
        Variant::Q8K => {
            let d = fp16_at(raw, 0);
            raw[2..].iter().map(|&b| d * (b as i8) as f32).collect()
        }
    }
}

/// `Σ w_i·x_i` over decoded values, in f64.
pub fn dot_f64(w: &[f32], x: &[f32]) -> f64 {
    w.iter().zip(x).map(|(a, b)| *a as f64 * *b as f64).sum()
}

pub fn decoded_row(row: &QuantRow) -> Vec<f32> {
    let v = row.variant();
    row.to_bytes()
        .chunks_exact(v.sb_bytes())
        .flat_map(|sb| naive_dequant(sb, v))
        .collect()
}

pub fn random_dims(rng: &mut impl Rng, max_m: usize, max_n: usize, max_k_sb: usize) -> LayerDims {
    LayerDims::new(
        rng.random_range(1..=max_m),
        256 * rng.random_range(1..=max_k_sb),
        rng.random_range(1..=max_n),
    )
    .unwrap()
}

pub fn random_caps(rng: &mut impl Rng) -> AccelCaps {
    AccelCaps {
        weight_cache_sb: rng.random_range(1..=16),
        input_cache_sb: rng.random_range(1..=64),
        n_fifos: rng.random_range(1..=6),
        out_buf_elems: rng.random_range(1..=64),
    }
}

/// Every output cell covered exactly once.
pub fn covers_exactly(plan: &fbfq_core::driver::TilePlan, m: usize, n: usize) -> bool {
    let mut hits = vec![0u32; m * n];
    for t in &plan.tiles {
        for r in t.m0..t.m0 + t.m_tile {
            for c in t.n0..t.n0 + t.n_tile {
                if r >= m || c >= n {
                    return false;
                }
                hits[r * n + c] += 1;
            }
        }
    }
    hits.iter().all(|&h| h == 1)
}

pub fn bits(m: &MatrixF32) -> Vec<u32> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

use fbfq_core::isa::{ConfigPayload, Instruction, SbBlob, WeightType};

/// A random well-formed instruction together with the weight type a
/// decoder needs to read it back.
pub fn random_instruction(rng: &mut impl Rng) -> (Instruction, WeightType) {
    let wt = if rng.random_bool(0.5) {
        WeightType::Q2K
    } else {
        WeightType::Q3K
    };
    let ins = match rng.random_range(0..5) {
        0 => Instruction::Config(ConfigPayload {
            weight_type: wt,
            m_tile: rng.random_range(1..=u32::MAX),
            n_tile: rng.random_range(1..=u32::MAX),
            k_sb: rng.random_range(1..=u32::MAX),
            flags: 0,
        }),
        1 => Instruction::LoadWeights(random_blob(rng, wt.variant())),
        2 => Instruction::LoadInput(random_blob(rng, Variant::Q8K)),
        3 => Instruction::Schedule,
        _ => Instruction::StoreOutput,
    };
    (ins, wt)
}

fn random_blob(rng: &mut impl Rng, v: Variant) -> SbBlob {
    let n = rng.random_range(0..4usize);
    let data = (0..n).flat_map(|_| raw_sb(rng, v)).collect();
    SbBlob::new(v, data).unwrap()
}
