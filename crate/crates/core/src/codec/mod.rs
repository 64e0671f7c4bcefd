//! Bit-exact superblock codecs for the Q2_K, Q3_K and Q8_K formats.
//!
//! Every superblock (SB) covers [`QK_K`] = 256 values split into 16 blocks of
//! 16. Serialized layouts follow the GGUF k-quant convention, except that the
//! Q8_K scale is stored as binary16 and block sums are never serialized.

mod fp16;
mod q2k;
mod q3k;
mod q8k;

pub use fp16::{fp16_to_fp32, fp32_to_fp16, Fp16};
pub(crate) use q2k::low2_position;
pub use q2k::{dequantize_q2k, quantize_q2k, Q2KSuperBlock};
pub use q3k::{dequantize_q3k, quantize_q3k, Q3KSuperBlock};
pub use q8k::{dequantize_q8k, quantize_q8k, Q8KSuperBlock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

/// Values per superblock.
pub const QK_K: usize = 256;
/// Values per block inside a superblock.
pub const BLOCK_LEN: usize = 16;
/// Blocks per superblock.
pub const BLOCKS_PER_SB: usize = QK_K / BLOCK_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Q2K,
    Q3K,
    Q8K,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Q2K, Variant::Q3K, Variant::Q8K];

    /// Serialized bytes per superblock.
    pub const fn sb_bytes(self) -> usize {
        match self {
            Variant::Q2K => Q2KSuperBlock::BYTES,
            Variant::Q3K => Q3KSuperBlock::BYTES,
            Variant::Q8K => Q8KSuperBlock::BYTES,
        }
    }

    pub fn bits_per_weight(self) -> f64 {
        (self.sb_bytes() * 8) as f64 / QK_K as f64
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Q2K => "Q2_K",
            Variant::Q3K => "Q3_K",
            Variant::Q8K => "Q8_K",
        }
    }

    /// GGML tensor type code. Also used as the variant code of raw tensor files.
    pub const fn type_id(self) -> u32 {
        match self {
            Variant::Q2K => 10,
            Variant::Q3K => 11,
            Variant::Q8K => 15,
        }
    }

    pub fn from_type_id(id: u32) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.type_id() == id)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "").as_str() {
            "q2k" => Ok(Variant::Q2K),
            "q3k" => Ok(Variant::Q3K),
            "q8k" => Ok(Variant::Q8K),
            _ => Err(Error::InvalidInput(format!("unknown variant {s:?}"))),
        }
    }
}

/// Common surface of the three superblock formats.
pub trait SuperBlockFormat: Sized + Clone + Send + Sync {
    const VARIANT: Variant;
    const BYTES: usize;

    fn quantize(values: &[f32; QK_K]) -> Result<Self>;
    fn dequantize(&self) -> [f32; QK_K];
    fn write_bytes(&self, out: &mut Vec<u8>);
    fn from_bytes(bytes: &[u8]) -> Result<Self>;

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTES);
        self.write_bytes(&mut out);
        out
    }
}

/// A superblock of any supported variant.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SuperBlock {
    Q2K(Q2KSuperBlock),
    Q3K(Q3KSuperBlock),
    Q8K(Q8KSuperBlock),
}

impl SuperBlock {
    pub fn variant(&self) -> Variant {
        match self {
            SuperBlock::Q2K(_) => Variant::Q2K,
            SuperBlock::Q3K(_) => Variant::Q3K,
            SuperBlock::Q8K(_) => Variant::Q8K,
        }
    }

    pub fn dequantize(&self) -> [f32; QK_K] {
        match self {
            SuperBlock::Q2K(sb) => sb.dequantize(),
            SuperBlock::Q3K(sb) => sb.dequantize(),
            SuperBlock::Q8K(sb) => sb.dequantize(),
        }
    }
}

pub fn serialize_sb(sb: &SuperBlock) -> Vec<u8> {
    match sb {
        SuperBlock::Q2K(b) => b.to_bytes(),
        SuperBlock::Q3K(b) => b.to_bytes(),
        SuperBlock::Q8K(b) => b.to_bytes(),
    }
}

pub fn deserialize_sb(bytes: &[u8], variant: Variant) -> Result<SuperBlock> {
    Ok(match variant {
        Variant::Q2K => SuperBlock::Q2K(Q2KSuperBlock::from_bytes(bytes)?),
        Variant::Q3K => SuperBlock::Q3K(Q3KSuperBlock::from_bytes(bytes)?),
        Variant::Q8K => SuperBlock::Q8K(Q8KSuperBlock::from_bytes(bytes)?),
    })
}

/// A row of superblocks of a single variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantRow {
    Q2K(Vec<Q2KSuperBlock>),
    Q3K(Vec<Q3KSuperBlock>),
    Q8K(Vec<Q8KSuperBlock>),
}

impl QuantRow {
    pub fn variant(&self) -> Variant {
        match self {
            QuantRow::Q2K(_) => Variant::Q2K,
            QuantRow::Q3K(_) => Variant::Q3K,
            QuantRow::Q8K(_) => Variant::Q8K,
        }
    }

    pub fn num_blocks(&self) -> usize {
        match self {
            QuantRow::Q2K(b) => b.len(),
            QuantRow::Q3K(b) => b.len(),
            QuantRow::Q8K(b) => b.len(),
        }
    }

    /// Element count.
    pub fn len(&self) -> usize {
        self.num_blocks() * QK_K
    }

    pub fn is_empty(&self) -> bool {
        self.num_blocks() == 0
    }

    pub fn block(&self, idx: usize) -> Option<SuperBlock> {
        match self {
            QuantRow::Q2K(b) => b.get(idx).cloned().map(SuperBlock::Q2K),
            QuantRow::Q3K(b) => b.get(idx).cloned().map(SuperBlock::Q3K),
            QuantRow::Q8K(b) => b.get(idx).cloned().map(SuperBlock::Q8K),
        }
    }

    /// Serialized bytes of all superblocks, back to back.
    pub fn to_bytes(&self) -> Vec<u8> {
        fn write_all<B: SuperBlockFormat>(blocks: &[B]) -> Vec<u8> {
            let mut out = Vec::with_capacity(blocks.len() * B::BYTES);
            for b in blocks {
                b.write_bytes(&mut out);
            }
            out
        }
        match self {
            QuantRow::Q2K(b) => write_all(b),
            QuantRow::Q3K(b) => write_all(b),
            QuantRow::Q8K(b) => write_all(b),
        }
    }

    pub fn from_bytes(bytes: &[u8], variant: Variant) -> Result<Self> {
        fn read_all<B: SuperBlockFormat>(bytes: &[u8]) -> Result<Vec<B>> {
            if !bytes.len().is_multiple_of(B::BYTES) {
                return Err(Error::format(format!(
                    "{} bytes is not a whole number of {} superblocks",
                    bytes.len(),
                    B::VARIANT
                )));
            }
            bytes.chunks_exact(B::BYTES).map(B::from_bytes).collect()
        }
        Ok(match variant {
            Variant::Q2K => QuantRow::Q2K(read_all(bytes)?),
            Variant::Q3K => QuantRow::Q3K(read_all(bytes)?),
            Variant::Q8K => QuantRow::Q8K(read_all(bytes)?),
        })
    }
}

fn sb_chunks(values: &[f32]) -> Result<Vec<&[f32; QK_K]>> {
    if !values.len().is_multiple_of(QK_K) {
        return Err(Error::shape(format!(
            "row length {} is not a multiple of {QK_K}",
            values.len()
        )));
    }
    Ok(values
        .chunks_exact(QK_K)
        .map(|c| c.try_into().expect("exact chunk"))
        .collect())
}

fn quantize_blocks<B: SuperBlockFormat>(values: &[f32], exec: Exec) -> Result<Vec<B>> {
    let chunks = sb_chunks(values)?;
    exec.try_map(chunks.len(), |i| B::quantize(chunks[i]))
}

pub fn quantize_row(values: &[f32], variant: Variant) -> Result<QuantRow> {
    quantize_row_with(values, variant, Exec::default())
}

pub fn quantize_row_with(values: &[f32], variant: Variant, exec: Exec) -> Result<QuantRow> {
    Ok(match variant {
        Variant::Q2K => QuantRow::Q2K(quantize_blocks(values, exec)?),
        Variant::Q3K => QuantRow::Q3K(quantize_blocks(values, exec)?),
        Variant::Q8K => QuantRow::Q8K(quantize_blocks(values, exec)?),
    })
}

pub fn dequantize_row(row: &QuantRow) -> Vec<f32> {
    fn flat<B: SuperBlockFormat>(blocks: &[B]) -> Vec<f32> {
        blocks.iter().flat_map(|b| b.dequantize()).collect()
    }
    match row {
        QuantRow::Q2K(b) => flat(b),
        QuantRow::Q3K(b) => flat(b),
        QuantRow::Q8K(b) => flat(b),
    }
}

pub(crate) fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

pub(crate) fn read_fp16(bytes: &[u8], at: usize, what: &str) -> Result<Fp16> {
    let h = Fp16::from_le_bytes([bytes[at], bytes[at + 1]]);
    if !h.is_finite() {
        return Err(Error::format(format!(
            "non-finite {what} scale {:#06x}",
            h.0
        )));
    }
    Ok(h)
}

pub(crate) fn check_len(bytes: &[u8], variant: Variant) -> Result<()> {
    if bytes.len() != variant.sb_bytes() {
        return Err(Error::format(format!(
            "{variant} superblock needs {} bytes, got {}",
            variant.sb_bytes(),
            bytes.len()
        )));
    }
    Ok(())
}

/// Squared error between a superblock's decoded values and the source.
pub(crate) fn squared_error(decoded: &[f32; QK_K], source: &[f32; QK_K]) -> f64 {
    decoded
        .iter()
        .zip(source)
        .map(|(a, b)| {
            let e = (*a as f64) - (*b as f64);
            e * e
        })
        .sum()
}

/// Root-mean-square error between two equal-length slices.
pub fn rmse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let se: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let e = *x as f64 - *y as f64;
            e * e
        })
        .sum();
    (se / a.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_law() {
        assert_eq!(Variant::Q2K.sb_bytes(), 84);
        assert_eq!(Variant::Q3K.sb_bytes(), 110);
        assert_eq!(Variant::Q8K.sb_bytes(), 258);
        assert_eq!(Variant::Q2K.bits_per_weight(), 2.625);
        assert_eq!(Variant::Q3K.bits_per_weight(), 3.4375);
        assert_eq!(Variant::Q8K.bits_per_weight(), 8.0625);
    }

    #[test]
    fn row_shape_errors() {
        let v = vec![0.0f32; 300];
        for variant in Variant::ALL {
            assert!(matches!(quantize_row(&v, variant), Err(Error::Shape(_))));
        }
    }

    #[test]
    fn zero_rows() {
        let v = vec![0.0f32; 512];
        let row = quantize_row(&v, Variant::Q3K).unwrap();
        assert_eq!(row.num_blocks(), 2);
        assert_eq!(row.len(), 512);
        assert!(dequantize_row(&row).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_sb_row_matches_block_op() {
        let v: Vec<f32> = (0..256)
            .map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0)
            .collect();
        let arr: &[f32; 256] = v.as_slice().try_into().unwrap();
        match quantize_row(&v, Variant::Q2K).unwrap() {
            QuantRow::Q2K(b) => assert_eq!(b, vec![quantize_q2k(arr).unwrap()]),
            _ => unreachable!(),
        }
    }

    #[test]
    fn row_bytes_reject_partial_blocks() {
        assert!(matches!(
            QuantRow::from_bytes(&[0u8; 85], Variant::Q2K),
            Err(Error::Format(_))
        ));
        let row = QuantRow::from_bytes(&[0u8; 220], Variant::Q3K).unwrap();
        assert_eq!(row.num_blocks(), 2);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("q2k".parse::<Variant>().unwrap(), Variant::Q2K);
        assert_eq!("Q3_K".parse::<Variant>().unwrap(), Variant::Q3K);
        assert!("q4k".parse::<Variant>().is_err());
        for v in Variant::ALL {
            assert_eq!(Variant::from_type_id(v.type_id()), Some(v));
        }
    }
}
