//! Software IEEE 754 binary16.
//!
//! Conversion from `f32` rounds to nearest, ties to even. Magnitudes that
//! round above the largest finite half (65504) become signed infinity, and
//! subnormal halves are produced and decoded exactly.

use std::fmt;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0x0000);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    /// Largest finite value, 65504.
    pub const MAX: Half = Half(0x7BFF);

    pub const fn from_bits(bits: u16) -> Half {
        Half(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn from_f32(x: f32) -> Half {
        to_half(x)
    }

    pub fn to_f32(self) -> f32 {
        from_half(self)
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7C00 == 0x7C00 && self.0 & 0x03FF != 0
    }

    pub fn is_infinite(self) -> bool {
        self.0 & 0x7FFF == 0x7C00
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f32())
    }
}

impl From<Half> for f32 {
    fn from(h: Half) -> f32 {
        from_half(h)
    }
}

pub fn to_half(x: f32) -> Half {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        if man == 0 {
            return Half(sign | 0x7C00);
        }
        // Quiet NaN, keep the top payload bits.
        return Half(sign | 0x7E00 | (man >> 13) as u16);
    }

    let e = exp - 127 + 15;
    if e >= 0x1F {
        return Half(sign | 0x7C00);
    }

    if e <= 0 {
        // Result is subnormal or zero: value = m16 * 2^-24.
        let shift = (14 - e) as u32;
        if shift > 24 {
            return Half(sign);
        }
        let m = man | 0x0080_0000;
        let mut out = m >> shift;
        let rem = m & ((1u32 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        if rem > halfway || (rem == halfway && out & 1 == 1) {
            // A carry into bit 10 yields the smallest normal, which is correct.
            out += 1;
        }
        return Half(sign | out as u16);
    }

    let mut out = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1FFF;
    if rem > 0x1000 || (rem == 0x1000 && out & 1 == 1) {
        // May carry into the exponent and up to infinity.
        out += 1;
    }
    Half(sign | out as u16)
}

pub fn from_half(h: Half) -> f32 {
    let bits = h.0 as u32;
    let sign = (bits & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1F;
    let man = bits & 0x03FF;

    match exp {
        0 => {
            let magnitude = man as f32 * f32::from_bits(0x3380_0000); // 2^-24
            if sign != 0 {
                -magnitude
            } else {
                magnitude
            }
        }
        0x1F => f32::from_bits(sign | 0x7F80_0000 | (man << 13)),
        _ => f32::from_bits(sign | ((exp + 112) << 23) | (man << 13)),
    }
}

/// Round-trips `x` through binary16.
#[inline]
pub fn quantize(x: f32) -> f32 {
    from_half(to_half(x))
}

pub fn quantize_slice(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&v| quantize(v)).collect()
}
