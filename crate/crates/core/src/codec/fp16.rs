use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IEEE-754 binary16 bit pattern used for superblock scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Fp16(pub u16);

impl Fp16 {
    pub const ZERO: Fp16 = Fp16(0);
    pub const ONE: Fp16 = Fp16(0x3C00);

    pub fn from_bits(bits: u16) -> Self {
        Fp16(bits)
    }

    pub fn to_bits(self) -> u16 {
        self.0
    }

    pub fn to_f32(self) -> f32 {
        f16::from_bits(self.0).to_f32()
    }

    /// Round-to-nearest-even conversion. NaN, infinities and values that
    /// overflow the binary16 range are rejected.
    pub fn from_f32(x: f32) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::EncodeRange(x));
        }
        let h = f16::from_f32(x);
        if h.is_infinite() {
            return Err(Error::EncodeRange(x));
        }
        Ok(Fp16(h.to_bits()))
    }

    pub fn is_finite(self) -> bool {
        f16::from_bits(self.0).is_finite()
    }

    pub fn to_le_bytes(self) -> [u8; 2] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(b: [u8; 2]) -> Self {
        Fp16(u16::from_le_bytes(b))
    }
}

pub fn fp16_to_fp32(bits: Fp16) -> f32 {
    bits.to_f32()
}

pub fn fp32_to_fp16(x: f32) -> Result<Fp16> {
    Fp16::from_f32(x)
}
