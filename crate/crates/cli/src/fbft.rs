//! FBFT tensor files: a 16-byte header (`"FBFT"`, variant code, rows, cols,
//! all u32 little-endian) followed by the payload.
//!
//! Code 0 is row-major fp32. Codes 10, 11 and 15 are Q2_K, Q3_K and Q8_K:
//! each row of `cols` values is stored as `cols / 256` superblock records.
//! A quantized input (Q8_K) file holds one row per column of the input
//! matrix, so `rows = N` and `cols = K`.

use std::path::Path;

use fbfq_core::codec::{QuantRow, Variant};
use fbfq_core::kernels::{MatrixF32, QuantMatrix, QuantizedInput};
use fbfq_core::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FBFT";
pub const HEADER_LEN: usize = 16;
pub const CODE_F32: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(MatrixF32),
    Quant(QuantMatrix),
}

impl Tensor {
    pub fn code(&self) -> u32 {
        match self {
            Tensor::F32(_) => CODE_F32,
            Tensor::Quant(q) => q.variant().type_id(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::F32(m) => (m.rows(), m.cols()),
            Tensor::Quant(q) => (q.rows(), q.row_len()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.shape();
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(&MAGIC);
        for v in [self.code(), rows as u32, cols as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match self {
            Tensor::F32(m) => out.extend(m.data().iter().flat_map(|v| v.to_le_bytes())),
            Tensor::Quant(q) => {
                for row in q.rows_data() {
                    out.extend(row.to_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!(
                "{}-byte FBFT header",
                bytes.len()
            )));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
        let (code, rows, cols) = (word(1), word(2) as usize, word(3) as usize);
        let body = &bytes[HEADER_LEN..];
        if code == CODE_F32 {
            let want = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
            if want != Some(body.len()) {
                return Err(Error::Truncated(format!(
                    "{rows}x{cols} fp32 payload needs {} bytes, got {}",
                    rows.saturating_mul(cols).saturating_mul(4),
                    body.len()
                )));
            }
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            return Ok(Tensor::F32(MatrixF32::new(rows, cols, data)?));
        }
        let variant = Variant::from_type_id(code)
            .ok_or_else(|| Error::UnsupportedType(format!("FBFT variant code {code}")))?;
        if rows == 0 || cols == 0 || cols % 256 != 0 {
            return Err(Error::Shape(format!(
                "quantized tensor must be non-empty with rows a multiple of 256 long, got {rows}x{cols}"
            )));
        }
        let row_bytes = cols / 256 * variant.sb_bytes();
        if rows.checked_mul(row_bytes) != Some(body.len()) {
            return Err(Error::Truncated(format!(
                "{rows}x{cols} {variant} payload needs {} bytes, got {}",
                rows.saturating_mul(row_bytes),
                body.len()
            )));
        }
        let rows = body
            .chunks_exact(row_bytes)
            .map(|r| QuantRow::from_bytes(r, variant))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::Quant(QuantMatrix::new(rows)?))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Quantized input with one Q8_K row per input column.
pub fn input_to_tensor(x: &QuantizedInput) -> Result<Tensor> {
    let rows = (0..x.cols())
        .map(|c| QuantRow::Q8K(x.column(c).to_vec()))
        .collect();
    Ok(Tensor::Quant(QuantMatrix::new(rows)?))
}

pub fn tensor_to_input(q: &QuantMatrix) -> Result<QuantizedInput> {
    let columns = q
        .rows_data()
        .iter()
        .map(|r| match r {
            QuantRow::Q8K(sbs) => Ok(sbs.clone()),
            _ => Err(Error::InvalidInput(format!(
                "quantized inputs must be Q8_K, file holds {}",
                r.variant()
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    QuantizedInput::new(q.row_len(), columns)
}
