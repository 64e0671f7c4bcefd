//! Minimal GGUF container reader and writer (versions 2 and 3,
//! little-endian).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::codec::{QuantRow, Variant, QK_K};
use crate::error::{Error, Result};
use crate::kernels::QuantMatrix;

pub const GGUF_MAGIC: [u8; 4] = *b"GGUF";
pub const DEFAULT_ALIGNMENT: u64 = 32;
pub const ALIGNMENT_KEY: &str = "general.alignment";

pub const TYPE_F32: u32 = 0;
pub const TYPE_F16: u32 = 1;
pub const TYPE_Q2_K: u32 = 10;
pub const TYPE_Q3_K: u32 = 11;

/// `(name, elements per block, bytes per block)` for the tensor types whose
/// storage size is known.
pub fn type_layout(type_id: u32) -> Option<(&'static str, u64, u64)> {
    Some(match type_id {
        0 => ("F32", 1, 4),
        1 => ("F16", 1, 2),
        2 => ("Q4_0", 32, 18),
        3 => ("Q4_1", 32, 20),
        6 => ("Q5_0", 32, 22),
        7 => ("Q5_1", 32, 24),
        8 => ("Q8_0", 32, 34),
        9 => ("Q8_1", 32, 36),
        10 => ("Q2_K", 256, 84),
        11 => ("Q3_K", 256, 110),
        12 => ("Q4_K", 256, 144),
        13 => ("Q5_K", 256, 176),
        14 => ("Q6_K", 256, 210),
        15 => ("Q8_K", 256, 292),
        24 => ("I8", 1, 1),
        25 => ("I16", 1, 2),
        26 => ("I32", 1, 4),
        27 => ("I64", 1, 8),
        28 => ("F64", 1, 8),
        30 => ("BF16", 1, 2),
        _ => return None,
    })
}

pub fn type_name(type_id: u32) -> String {
    type_layout(type_id)
        .map(|l| l.0.to_string())
        .unwrap_or_else(|| format!("type{type_id}"))
}

/// Stored byte length of a tensor, when its type is known.
pub fn tensor_bytes(type_id: u32, elements: u64) -> Option<u64> {
    let (_, block, bytes) = type_layout(type_id)?;
    elements
        .is_multiple_of(block)
        .then(|| elements / block * bytes)
}

/// A metadata value, kept verbatim.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Value {
    U8(u8),
    I8(i8),
    U16(u16),
    I16(i16),
    U32(u32),
    I32(i32),
    F32(f32),
    Bool(bool),
    String(String),
    Array(Array),
    U64(u64),
    I64(i64),
    F64(f64),
}

/// Homogeneous array; the element type is kept so empty arrays roundtrip.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Array {
    pub elem_type: u32,
    pub values: Vec<Value>,
}

impl Value {
    pub fn type_id(&self) -> u32 {
        match self {
            Value::U8(_) => 0,
            Value::I8(_) => 1,
            Value::U16(_) => 2,
            Value::I16(_) => 3,
            Value::U32(_) => 4,
            Value::I32(_) => 5,
            Value::F32(_) => 6,
            Value::Bool(_) => 7,
            Value::String(_) => 8,
            Value::Array(_) => 9,
            Value::U64(_) => 10,
            Value::I64(_) => 11,
            Value::F64(_) => 12,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            Value::U8(v) => Some(v.into()),
            Value::U16(v) => Some(v.into()),
            Value::U32(v) => Some(v.into()),
            Value::U64(v) => Some(v),
            Value::I8(v) => u64::try_from(v).ok(),
            Value::I16(v) => u64::try_from(v).ok(),
            Value::I32(v) => u64::try_from(v).ok(),
            Value::I64(v) => u64::try_from(v).ok(),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::String(s) => Some(s),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    /// Innermost extent first.
    pub dims: Vec<u64>,
    pub type_id: u32,
    /// Relative to the start of the data section.
    pub offset: u64,
}

impl TensorInfo {
    pub fn elements(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn type_name(&self) -> String {
        type_name(self.type_id)
    }

    pub fn byte_len(&self) -> Option<u64> {
        tensor_bytes(self.type_id, self.elements())
    }
}

/// Tensor to be written: descriptor plus raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorData {
    pub name: String,
    pub dims: Vec<u64>,
    pub type_id: u32,
    pub data: Vec<u8>,
}

impl TensorData {
    /// One tensor per quantized matrix, shaped `[row_len, rows]`.
    pub fn from_quant_matrix(name: impl Into<String>, m: &QuantMatrix) -> Self {
        TensorData {
            name: name.into(),
            dims: vec![m.row_len() as u64, m.rows() as u64],
            type_id: m.variant().type_id(),
            data: m.rows_data().iter().flat_map(|r| r.to_bytes()).collect(),
        }
    }

    pub fn f32(name: impl Into<String>, dims: Vec<u64>, values: &[f32]) -> Self {
        TensorData {
            name: name.into(),
            dims,
            type_id: TYPE_F32,
            data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }
}

/// A parsed container holding the whole file in memory.
#[derive(Debug, Clone)]
pub struct GgufFile {
    pub version: u32,
    pub metadata: Vec<(String, Value)>,
    pub tensors: Vec<TensorInfo>,
    pub alignment: u64,
    /// Absolute byte offset of the data section.
    pub data_offset: u64,
    bytes: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Truncated(format!("{what} at byte {} needs {n} bytes", self.pos))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n).map_err(|_| Error::Truncated(format!("{what} length {n}")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::format(format!("{what} is not valid UTF-8")))
    }

    fn value(&mut self, type_id: u32, depth: usize) -> Result<Value> {
        Ok(match type_id {
            0 => Value::U8(self.array::<1>("u8")?[0]),
            1 => Value::I8(self.array::<1>("i8")?[0] as i8),
            2 => Value::U16(u16::from_le_bytes(self.array("u16")?)),
            3 => Value::I16(i16::from_le_bytes(self.array("i16")?)),
            4 => Value::U32(self.u32("u32")?),
            5 => Value::I32(i32::from_le_bytes(self.array("i32")?)),
            6 => Value::F32(f32::from_le_bytes(self.array("f32")?)),
            7 => match self.array::<1>("bool")?[0] {
                0 => Value::Bool(false),
                1 => Value::Bool(true),
                b => return Err(Error::format(format!("bool byte {b}"))),
            },
            8 => Value::String(self.string("string")?),
            9 => {
                if depth > 8 {
                    return Err(Error::format("arrays nested too deeply"));
                }
                let elem_type = self.u32("array type")?;
                let n = self.len("array")?;
                // every element takes at least one byte
                let mut values = Vec::with_capacity(n.min(self.bytes.len() - self.pos));
                for _ in 0..n {
                    values.push(self.value(elem_type, depth + 1)?);
                }
                Value::Array(Array { elem_type, values })
            }
            10 => Value::U64(self.u64("u64")?),
            11 => Value::I64(i64::from_le_bytes(self.array("i64")?)),
            12 => Value::F64(f64::from_le_bytes(self.array("f64")?)),
            t => return Err(Error::format(format!("unknown metadata value type {t}"))),
        })
    }
}

fn align_up(x: u64, alignment: u64) -> u64 {
    x.div_ceil(alignment) * alignment
}

fn alignment_of(metadata: &[(String, Value)]) -> Result<u64> {
    match metadata.iter().find(|(k, _)| k == ALIGNMENT_KEY) {
        None => Ok(DEFAULT_ALIGNMENT),
        Some((_, v)) => match v.as_u64() {
            Some(a) if a > 0 => Ok(a),
            _ => Err(Error::format(format!("bad {ALIGNMENT_KEY} value {v:?}"))),
        },
    }
}

impl GgufFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let mut c = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        let magic = c.array::<4>("magic")?;
        if magic != GGUF_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = c.u32("version")?;
        if !(2..=3).contains(&version) {
            return Err(Error::UnsupportedVersion(version));
        }
        let n_tensors = c.len("tensor count")?;
        let n_kv = c.len("metadata count")?;
        let mut metadata = Vec::with_capacity(n_kv.min(bytes.len()));
        for _ in 0..n_kv {
            let key = c.string("metadata key")?;
            let t = c.u32("metadata type")?;
            metadata.push((key, c.value(t, 0)?));
        }
        let alignment = alignment_of(&metadata)?;
        let mut tensors = Vec::with_capacity(n_tensors.min(bytes.len()));
        for _ in 0..n_tensors {
            let name = c.string("tensor name")?;
            let n_dims = c.u32("tensor rank")? as usize;
            if n_dims > 8 {
                return Err(Error::format(format!("tensor {name:?} has rank {n_dims}")));
            }
            let dims = (0..n_dims)
                .map(|_| c.u64("tensor extent"))
                .collect::<Result<Vec<_>>>()?;
            let type_id = c.u32("tensor type")?;
            let offset = c.u64("tensor offset")?;
            if offset % alignment != 0 {
                return Err(Error::format(format!(
                    "tensor {name:?} offset {offset} is not {alignment}-aligned"
                )));
            }
            tensors.push(TensorInfo {
                name,
                dims,
                type_id,
                offset,
            });
        }
        let data_offset = align_up(c.pos as u64, alignment);
        Ok(GgufFile {
            version,
            metadata,
            tensors,
            alignment,
            data_offset,
            bytes,
        })
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Raw stored bytes of a tensor of known type.
    pub fn tensor_data(&self, info: &TensorInfo) -> Result<&[u8]> {
        let len = info.byte_len().ok_or_else(|| {
            Error::UnsupportedType(format!("{} ({})", info.type_name(), info.name))
        })?;
        let start = self.data_offset.checked_add(info.offset);
        let end = start.and_then(|s| s.checked_add(len));
        match (start, end) {
            (Some(s), Some(e)) if e <= self.bytes.len() as u64 => {
                Ok(&self.bytes[s as usize..e as usize])
            }
            _ => Err(Error::Truncated(format!(
                "tensor {:?} ({len} bytes at {}) runs past the end of the file",
                info.name, info.offset
            ))),
        }
    }

    /// Load a Q2_K or Q3_K tensor as a matrix with one row per
    /// innermost-dimension run.
    pub fn load_quant_tensor(&self, info: &TensorInfo) -> Result<QuantMatrix> {
        let variant = match info.type_id {
            TYPE_Q2_K => Variant::Q2K,
            TYPE_Q3_K => Variant::Q3K,
            _ => {
                return Err(Error::UnsupportedType(format!(
                    "{} ({}); only Q2_K and Q3_K load as weights",
                    info.type_name(),
                    info.name
                )))
            }
        };
        let row_len = *info
            .dims
            .first()
            .ok_or_else(|| Error::shape(format!("tensor {:?} has no dimensions", info.name)))?;
        if row_len == 0 || row_len % QK_K as u64 != 0 {
            return Err(Error::shape(format!(
                "tensor {:?} rows are {row_len} long, not a multiple of {QK_K}",
                info.name
            )));
        }
        let data = self.tensor_data(info)?;
        // the type id is trusted only if the stored size agrees with the codec
        let expected = info.elements() / QK_K as u64 * variant.sb_bytes() as u64;
        if data.len() as u64 != expected {
            return Err(Error::format(format!(
                "tensor {:?} holds {} bytes, {variant} needs {expected}",
                info.name,
                data.len()
            )));
        }
        let row_bytes = (row_len / QK_K as u64) as usize * variant.sb_bytes();
        let rows = data
            .chunks_exact(row_bytes)
            .map(|r| QuantRow::from_bytes(r, variant))
            .collect::<Result<Vec<_>>>()?;
        QuantMatrix::new(rows)
    }

    /// Per-type share of all tensor elements.
    pub fn type_histogram(&self) -> TypeHistogram {
        TypeHistogram::from_tensors(&self.tensors)
    }

    /// 2-D Q2_K / Q3_K tensors used as MatMul weights (embedding tables
    /// excluded), counted per type id.
    pub fn matmul_weight_counts(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for t in &self.tensors {
            let is_embedding = t.name.contains("token_embd") || t.name.contains("position_embd");
            if t.dims.len() == 2 && !is_embedding && matches!(t.type_id, TYPE_Q2_K | TYPE_Q3_K) {
                *out.entry(t.type_id).or_default() += 1;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeCount {
    pub type_id: u32,
    pub name: String,
    pub tensors: usize,
    pub elements: u64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TypeHistogram {
    /// Sorted by type id.
    pub types: Vec<TypeCount>,
    pub total_elements: u64,
}

impl TypeHistogram {
    pub fn from_tensors(tensors: &[TensorInfo]) -> Self {
        let mut by_type: BTreeMap<u32, (usize, u64)> = BTreeMap::new();
        for t in tensors {
            let e = by_type.entry(t.type_id).or_default();
            e.0 += 1;
            e.1 += t.elements();
        }
        let total: u64 = by_type.values().map(|v| v.1).sum();
        let types = by_type
            .into_iter()
            .map(|(type_id, (tensors, elements))| TypeCount {
                type_id,
                name: type_name(type_id),
                tensors,
                elements,
                percent: if total == 0 {
                    0.0
                } else {
                    100.0 * elements as f64 / total as f64
                },
            })
            .collect();
        TypeHistogram {
            types,
            total_elements: total,
        }
    }

    pub fn get(&self, type_id: u32) -> Option<&TypeCount> {
        self.types.iter().find(|t| t.type_id == type_id)
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_value(out: &mut Vec<u8>, v: &Value) -> Result<()> {
    match v {
        Value::U8(x) => out.push(*x),
        Value::I8(x) => out.push(*x as u8),
        Value::U16(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::I16(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::U32(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::I32(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::F32(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::Bool(x) => out.push(*x as u8),
        Value::String(s) => put_string(out, s),
        Value::Array(a) => {
            out.extend_from_slice(&a.elem_type.to_le_bytes());
            out.extend_from_slice(&(a.values.len() as u64).to_le_bytes());
            for e in &a.values {
                if e.type_id() != a.elem_type {
                    return Err(Error::format(format!(
                        "array of type {} holds a value of type {}",
                        a.elem_type,
                        e.type_id()
                    )));
                }
                put_value(out, e)?;
            }
        }
        Value::U64(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::I64(x) => out.extend_from_slice(&x.to_le_bytes()),
        Value::F64(x) => out.extend_from_slice(&x.to_le_bytes()),
    }
    Ok(())
}

/// Serialize a version-3 container. Tensor data is laid out in the given
/// order, each tensor aligned per `general.alignment` (default 32).
pub fn write_container(metadata: &[(String, Value)], tensors: &[TensorData]) -> Result<Vec<u8>> {
    let alignment = alignment_of(metadata)?;
    let mut out = Vec::new();
    out.extend_from_slice(&GGUF_MAGIC);
    out.extend_from_slice(&3u32.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    out.extend_from_slice(&(metadata.len() as u64).to_le_bytes());
    for (k, v) in metadata {
        put_string(&mut out, k);
        out.extend_from_slice(&v.type_id().to_le_bytes());
        put_value(&mut out, v)?;
    }
    let mut offset = 0u64;
    for t in tensors {
        let elements: u64 = t.dims.iter().product();
        if let Some(len) = tensor_bytes(t.type_id, elements) {
            if len != t.data.len() as u64 {
                return Err(Error::shape(format!(
                    "tensor {:?}: {} elements of {} need {len} bytes, got {}",
                    t.name,
                    elements,
                    type_name(t.type_id),
                    t.data.len()
                )));
            }
        }
        put_string(&mut out, &t.name);
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&t.type_id.to_le_bytes());
        out.extend_from_slice(&offset.to_le_bytes());
        offset = align_up(offset + t.data.len() as u64, alignment);
    }
    for t in tensors {
        out.resize(align_up(out.len() as u64, alignment) as usize, 0);
        out.extend_from_slice(&t.data);
    }
    Ok(out)
}

pub fn write_file(
    path: impl AsRef<Path>,
    metadata: &[(String, Value)],
    tensors: &[TensorData],
) -> Result<()> {
    std::fs::write(path, write_container(metadata, tensors)?)?;
    Ok(())
}
