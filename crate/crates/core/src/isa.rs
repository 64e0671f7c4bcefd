//! Micro-ISA instruction stream.
//!
//! The stream is a sequence of 32-bit little-endian words. The first word of
//! every instruction is the opcode itself; operands follow immediately:
//!
//! | opcode | payload |
//! |--------|---------|
//! | `0x01` CONFIG       | weight_type, m_tile, n_tile, k_sb, flags |
//! | `0x02` LOAD_WEIGHTS | SB count, then each SB zero-padded to a word boundary |
//! | `0x04` LOAD_INPUT   | SB count, then each Q8_K SB zero-padded |
//! | `0x08` SCHEDULE     | none |
//! | `0x10` STORE_OUTPUT | none |
//!
//! LOAD_WEIGHTS carries no variant tag: its superblock size follows the
//! `weight_type` register set by the most recent CONFIG, so decoding is
//! stateful (see [`Decoder`]).

use std::path::Path;

use crate::codec::{SuperBlockFormat, Variant};
use crate::driver::TilePlan;
use crate::error::{Error, Result};
use crate::kernels::{QuantMatrix, QuantizedInput};

#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Config = 0x01,
    LoadWeights = 0x02,
    LoadInput = 0x04,
    Schedule = 0x08,
    StoreOutput = 0x10,
}

impl Opcode {
    pub const ALL: [Opcode; 5] = [
        Opcode::Config,
        Opcode::LoadWeights,
        Opcode::LoadInput,
        Opcode::Schedule,
        Opcode::StoreOutput,
    ];

    pub fn from_word(word: u32) -> Option<Self> {
        Opcode::ALL.into_iter().find(|op| *op as u32 == word)
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::Config => "CONFIG",
            Opcode::LoadWeights => "LOAD_WEIGHTS",
            Opcode::LoadInput => "LOAD_INPUT",
            Opcode::Schedule => "SCHEDULE",
            Opcode::StoreOutput => "STORE_OUTPUT",
        }
    }
}

/// Value of the `weight_type` control register.
#[repr(u32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightType {
    Q2K = 0,
    Q3K = 1,
}

impl WeightType {
    pub fn variant(self) -> Variant {
        match self {
            WeightType::Q2K => Variant::Q2K,
            WeightType::Q3K => Variant::Q3K,
        }
    }

    pub fn from_variant(v: Variant) -> Result<Self> {
        match v {
            Variant::Q2K => Ok(WeightType::Q2K),
            Variant::Q3K => Ok(WeightType::Q3K),
            Variant::Q8K => Err(Error::InvalidInput("Q8_K is not a weight type".into())),
        }
    }

    fn from_word(w: u32) -> Result<Self> {
        match w {
            0 => Ok(WeightType::Q2K),
            1 => Ok(WeightType::Q3K),
            _ => Err(Error::format(format!("weight_type {w} is not 0 or 1"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigPayload {
    pub weight_type: WeightType,
    pub m_tile: u32,
    pub n_tile: u32,
    /// Superblocks along the depth of one output tile.
    pub k_sb: u32,
    pub flags: u32,
}

impl ConfigPayload {
    fn validate(&self) -> Result<()> {
        if self.m_tile == 0 || self.n_tile == 0 || self.k_sb == 0 {
            return Err(Error::format(format!(
                "CONFIG dimensions must be positive: {}x{}x{}",
                self.m_tile, self.n_tile, self.k_sb
            )));
        }
        if self.flags != 0 {
            return Err(Error::format(format!(
                "reserved CONFIG flags set: {:#x}",
                self.flags
            )));
        }
        Ok(())
    }
}

/// Serialized superblocks of one variant, concatenated without padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SbBlob {
    pub variant: Variant,
    pub data: Vec<u8>,
}

impl SbBlob {
    pub fn new(variant: Variant, data: Vec<u8>) -> Result<Self> {
        let blob = SbBlob { variant, data };
        blob.count()?;
        Ok(blob)
    }

    pub fn count(&self) -> Result<usize> {
        let size = self.variant.sb_bytes();
        if !self.data.len().is_multiple_of(size) {
            return Err(Error::format(format!(
                "blob of {} bytes is not a whole number of {} superblocks",
                self.data.len(),
                self.variant
            )));
        }
        Ok(self.data.len() / size)
    }

    pub fn superblocks(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.variant.sb_bytes())
    }
}

/// Words occupied by one zero-padded superblock of `variant`.
pub const fn sb_words(variant: Variant) -> usize {
    variant.sb_bytes().div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    Config(ConfigPayload),
    LoadWeights(SbBlob),
    LoadInput(SbBlob),
    Schedule,
    StoreOutput,
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::Config(_) => Opcode::Config,
            Instruction::LoadWeights(_) => Opcode::LoadWeights,
            Instruction::LoadInput(_) => Opcode::LoadInput,
            Instruction::Schedule => Opcode::Schedule,
            Instruction::StoreOutput => Opcode::StoreOutput,
        }
    }

    /// Encoded length in words.
    pub fn word_len(&self) -> Result<usize> {
        Ok(match self {
            Instruction::Config(_) => 6,
            Instruction::LoadWeights(b) | Instruction::LoadInput(b) => {
                2 + b.count()? * sb_words(b.variant)
            }
            Instruction::Schedule | Instruction::StoreOutput => 1,
        })
    }
}

pub fn encode_instruction(ins: &Instruction) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(ins.word_len()?);
    encode_into(ins, &mut out)?;
    Ok(out)
}

fn encode_into(ins: &Instruction, out: &mut Vec<u32>) -> Result<()> {
    out.push(ins.opcode() as u32);
    match ins {
        Instruction::Config(cfg) => {
            cfg.validate()?;
            out.extend([
                cfg.weight_type as u32,
                cfg.m_tile,
                cfg.n_tile,
                cfg.k_sb,
                cfg.flags,
            ]);
        }
        Instruction::LoadWeights(blob) | Instruction::LoadInput(blob) => {
            let input = matches!(ins, Instruction::LoadInput(_));
            if input != (blob.variant == Variant::Q8K) {
                return Err(Error::format(format!(
                    "{} cannot carry {} superblocks",
                    ins.opcode().mnemonic(),
                    blob.variant
                )));
            }
            let count = blob.count()?;
            out.push(u32::try_from(count).map_err(|_| Error::format("too many superblocks"))?);
            for sb in blob.superblocks() {
                let mut chunks = sb.chunks_exact(4);
                for c in &mut chunks {
                    out.push(u32::from_le_bytes(c.try_into().unwrap()));
                }
                let rest = chunks.remainder();
                if !rest.is_empty() {
                    let mut last = [0u8; 4];
                    last[..rest.len()].copy_from_slice(rest);
                    out.push(u32::from_le_bytes(last));
                }
            }
        }
        Instruction::Schedule | Instruction::StoreOutput => {}
    }
    Ok(())
}

/// Stateful decoder: tracks the `weight_type` register so LOAD_WEIGHTS
/// payloads can be sized.
#[derive(Debug, Clone, Default)]
pub struct Decoder {
    weight_type: Option<WeightType>,
}

impl Decoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decoder that already knows the weight type, for decoding a
    /// LOAD_WEIGHTS out of program context.
    pub fn with_weight_type(weight_type: WeightType) -> Self {
        Decoder {
            weight_type: Some(weight_type),
        }
    }

    pub fn weight_type(&self) -> Option<WeightType> {
        self.weight_type
    }

    /// Decode the instruction starting at `words[pos]`, returning it and the
    /// position just past it.
    pub fn decode(&mut self, words: &[u32], pos: usize) -> Result<(Instruction, usize)> {
        let word = *words
            .get(pos)
            .ok_or_else(|| Error::Truncated(format!("no opcode at word {pos}")))?;
        let op = Opcode::from_word(word).ok_or(Error::IllegalOpcode { word, index: pos })?;
        let need = |n: usize| -> Result<&[u32]> {
            words.get(pos + 1..pos + 1 + n).ok_or_else(|| {
                Error::Truncated(format!(
                    "{} at word {pos} needs {n} operand words, {} available",
                    op.mnemonic(),
                    words.len().saturating_sub(pos + 1)
                ))
            })
        };
        match op {
            Opcode::Config => {
                let p = need(5)?;
                let cfg = ConfigPayload {
                    weight_type: WeightType::from_word(p[0])?,
                    m_tile: p[1],
                    n_tile: p[2],
                    k_sb: p[3],
                    flags: p[4],
                };
                cfg.validate()?;
                self.weight_type = Some(cfg.weight_type);
                Ok((Instruction::Config(cfg), pos + 6))
            }
            Opcode::LoadWeights | Opcode::LoadInput => {
                let variant = if op == Opcode::LoadInput {
                    Variant::Q8K
                } else {
                    self.weight_type
                        .ok_or_else(|| Error::protocol("LOAD_WEIGHTS before any CONFIG"))?
                        .variant()
                };
                let count = need(1)?[0] as usize;
                let per_sb = sb_words(variant);
                let total = count
                    .checked_mul(per_sb)
                    .ok_or_else(|| Error::format("superblock count overflows"))?;
                let payload = words.get(pos + 2..pos + 2 + total).ok_or_else(|| {
                    Error::Truncated(format!(
                        "{} at word {pos} announces {count} superblocks ({total} words), {} available",
                        op.mnemonic(),
                        words.len().saturating_sub(pos + 2)
                    ))
                })?;
                let size = variant.sb_bytes();
                let mut data = Vec::with_capacity(count * size);
                for sb in payload.chunks_exact(per_sb) {
                    let bytes: Vec<u8> = sb.iter().flat_map(|w| w.to_le_bytes()).collect();
                    if bytes[size..].iter().any(|b| *b != 0) {
                        return Err(Error::format("non-zero superblock padding"));
                    }
                    data.extend_from_slice(&bytes[..size]);
                }
                let blob = SbBlob { variant, data };
                let ins = if op == Opcode::LoadInput {
                    Instruction::LoadInput(blob)
                } else {
                    Instruction::LoadWeights(blob)
                };
                Ok((ins, pos + 2 + total))
            }
            Opcode::Schedule => Ok((Instruction::Schedule, pos + 1)),
            Opcode::StoreOutput => Ok((Instruction::StoreOutput, pos + 1)),
        }
    }
}

/// Decode one instruction with a fresh decoder.
pub fn decode_instruction(words: &[u32], pos: usize) -> Result<(Instruction, usize)> {
    Decoder::new().decode(words, pos)
}

pub const FBFQ_MAGIC: [u8; 4] = *b"FBFQ";
pub const FBFQ_VERSION: u32 = 1;

/// A flat program: the exact words sent to the accelerator.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InstructionStream {
    words: Vec<u32>,
}

impl InstructionStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words(words: Vec<u32>) -> Self {
        InstructionStream { words }
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn push(&mut self, ins: &Instruction) -> Result<()> {
        encode_into(ins, &mut self.words)
    }

    /// Parse the whole stream; trailing words that do not form an
    /// instruction are an error.
    pub fn parse(&self) -> Result<Vec<Instruction>> {
        let mut decoder = Decoder::new();
        let mut pos = 0;
        let mut out = Vec::new();
        while pos < self.words.len() {
            let (ins, next) = decoder.decode(&self.words, pos)?;
            out.push(ins);
            pos = next;
        }
        Ok(out)
    }

    /// `.fbfq` replay image: magic, version word, word count, words.
    pub fn to_fbfq_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.words.len());
        out.extend_from_slice(&FBFQ_MAGIC);
        out.extend_from_slice(&FBFQ_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.words.len() as u32).to_le_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_fbfq_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated(format!(
                "{}-byte fbfq header",
                bytes.len()
            )));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != FBFQ_MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FBFQ_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != count * 4 {
            return Err(Error::Truncated(format!(
                "fbfq announces {count} words, carries {} bytes",
                body.len()
            )));
        }
        let words = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(InstructionStream { words })
    }

    pub fn write_fbfq(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_fbfq_bytes())?;
        Ok(())
    }

    pub fn read_fbfq(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_fbfq_bytes(&std::fs::read(path)?)
    }
}

fn weight_blob(w: &QuantMatrix, rows: std::ops::Range<usize>, k: std::ops::Range<usize>) -> SbBlob {
    let size = w.variant().sb_bytes();
    let mut data = Vec::with_capacity(rows.len() * k.len() * size);
    for r in rows {
        let row = w.row(r).to_bytes();
        data.extend_from_slice(&row[k.start * size..k.end * size]);
    }
    SbBlob {
        variant: w.variant(),
        data,
    }
}

fn input_blob(
    x: &QuantizedInput,
    cols: std::ops::Range<usize>,
    k: std::ops::Range<usize>,
) -> SbBlob {
    let mut data = Vec::with_capacity(cols.len() * k.len() * Variant::Q8K.sb_bytes());
    for c in cols {
        for sb in &x.column(c)[k.clone()] {
            sb.write_bytes(&mut data);
        }
    }
    SbBlob {
        variant: Variant::Q8K,
        data,
    }
}

/// Generate the accelerator program for `w · x` under `plan`.
///
/// CONFIG goes first and is re-sent whenever the tile shape changes. On the
/// fast path the whole input is loaded once; otherwise every depth chunk of
/// every tile sends its input slice, then its weight slice, then SCHEDULE.
/// STORE_OUTPUT follows the last chunk of each tile.
pub fn build_program(
    plan: &TilePlan,
    w: &QuantMatrix,
    x: &QuantizedInput,
) -> Result<InstructionStream> {
    plan.check_shape(w.rows(), x.cols(), w.k_sb())
        .map_err(|e| Error::Plan(e.to_string()))?;
    if x.k() != w.row_len() {
        return Err(Error::Plan(format!(
            "weights are {} deep, input is {}",
            w.row_len(),
            x.k()
        )));
    }
    let weight_type = WeightType::from_variant(w.variant())?;
    let k_sb = plan.k_sb;
    let mut stream = InstructionStream::new();
    let mut last_config = None;
    for (t, tile) in plan.tiles.iter().enumerate() {
        let cfg = ConfigPayload {
            weight_type,
            m_tile: tile.m_tile as u32,
            n_tile: tile.n_tile as u32,
            k_sb: k_sb as u32,
            flags: 0,
        };
        if last_config != Some(cfg) {
            stream.push(&Instruction::Config(cfg))?;
            last_config = Some(cfg);
        }
        if plan.fast_path && t == 0 {
            stream.push(&Instruction::LoadInput(input_blob(x, 0..x.cols(), 0..k_sb)))?;
        }
        let rows = tile.m0..tile.m0 + tile.m_tile;
        let cols = tile.n0..tile.n0 + tile.n_tile;
        for k in plan.chunks() {
            if !plan.fast_path {
                stream.push(&Instruction::LoadInput(input_blob(
                    x,
                    cols.clone(),
                    k.clone(),
                )))?;
            }
            stream.push(&Instruction::LoadWeights(weight_blob(w, rows.clone(), k)))?;
            stream.push(&Instruction::Schedule)?;
        }
        stream.push(&Instruction::StoreOutput)?;
    }
    Ok(stream)
}
