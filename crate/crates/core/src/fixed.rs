//! Two's-complement fixed-point codes and the rounding primitives shared by
//! the fake-quant and integer execution paths.
//!
//! All rounding is half-away-from-zero, both for reals (`f64::round`) and for
//! arithmetic right shifts of integers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FixedPointError {
    #[error("fixed-point format ({int_bits}, {frac_bits}) outside int 1..=24, frac 0..={max_frac}", max_frac = MAX_FRAC_BITS)]
    Format { int_bits: u8, frac_bits: u8 },
    #[error("value {value} needs code {code}, outside the ({int_bits}, {frac_bits}) range ±2^{width}", width = *int_bits as u32 + *frac_bits as u32 - 1)]
    Overflow {
        value: f64,
        code: i128,
        int_bits: u8,
        frac_bits: u8,
    },
    #[error("non-finite value {0} cannot be encoded")]
    NonFinite(f64),
}

/// Largest fraction width accepted for a code. User formats stay within 24
/// fraction bits; multipliers normalised by [`FixedPointCode::encode_aligned`]
/// may extend the fraction further.
pub const MAX_FRAC_BITS: u8 = 48;

/// Declared (integer bits, fraction bits) split of a fixed-point word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointSpec {
    pub int_bits: u8,
    pub frac_bits: u8,
}

impl FixedPointSpec {
    pub fn new(int_bits: u8, frac_bits: u8) -> Result<Self, FixedPointError> {
        if !(1..=24).contains(&int_bits) || frac_bits > 24 {
            return Err(FixedPointError::Format {
                int_bits,
                frac_bits,
            });
        }
        Ok(FixedPointSpec {
            int_bits,
            frac_bits,
        })
    }

    /// 16-bit word with 4 integer and 12 fraction bits.
    pub const INT16_Q12: FixedPointSpec = FixedPointSpec {
        int_bits: 4,
        frac_bits: 12,
    };

    pub fn width(&self) -> u32 {
        self.int_bits as u32 + self.frac_bits as u32
    }
}

impl Default for FixedPointSpec {
    fn default() -> Self {
        FixedPointSpec::INT16_Q12
    }
}

/// An integer `code` standing for `code / 2^frac_bits`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedPointCode {
    pub code: i64,
    pub int_bits: u8,
    pub frac_bits: u8,
}

impl FixedPointCode {
    /// `round(value · 2^frac)`, rejecting codes outside the signed
    /// `int_bits + frac_bits` word.
    pub fn encode(value: f64, spec: FixedPointSpec) -> Result<Self, FixedPointError> {
        Self::encode_raw(value, spec.int_bits, spec.frac_bits)
    }

    pub fn encode_raw(value: f64, int_bits: u8, frac_bits: u8) -> Result<Self, FixedPointError> {
        if !value.is_finite() {
            return Err(FixedPointError::NonFinite(value));
        }
        if int_bits == 0 || frac_bits > MAX_FRAC_BITS {
            return Err(FixedPointError::Format {
                int_bits,
                frac_bits,
            });
        }
        let width = int_bits as u32 + frac_bits as u32;
        let scaled = value * 2f64.powi(frac_bits as i32);
        let code = scaled.round();
        let limit = 2f64.powi(width as i32 - 1);
        if code >= limit || code < -limit {
            return Err(FixedPointError::Overflow {
                value,
                code: code as i128,
                int_bits,
                frac_bits,
            });
        }
        Ok(FixedPointCode {
            code: code as i64,
            int_bits,
            frac_bits,
        })
    }

    /// Encodes a multiplier after normalising it by a power of two: for
    /// `|value| < 1` the fraction is widened by `k` bits, where
    /// `|value| · 2^k ∈ (0.5, 1]`, so `spec.frac_bits` counts significant
    /// bits below the leading one. Values `≥ 1` use the plain format.
    pub fn encode_aligned(value: f64, spec: FixedPointSpec) -> Result<Self, FixedPointError> {
        if !value.is_finite() {
            return Err(FixedPointError::NonFinite(value));
        }
        let extra = alignment_shift(value.abs(), spec.frac_bits);
        Self::encode_raw(value, spec.int_bits, spec.frac_bits + extra)
    }

    pub fn decode(&self) -> f64 {
        self.code as f64 / 2f64.powi(self.frac_bits as i32)
    }
}

/// Extra fraction bits `k ≥ 0` that bring `magnitude · 2^k` into `(0.5, 1]`,
/// capped so the total fraction stays within [`MAX_FRAC_BITS`].
pub fn alignment_shift(magnitude: f64, base_frac: u8) -> u8 {
    if magnitude >= 1.0 || magnitude <= 0.0 {
        return 0;
    }
    let k = (-magnitude.log2()).floor().max(0.0) as u32;
    // log2 may land a hair off at exact powers of two
    let mut k = k.min((MAX_FRAC_BITS - base_frac) as u32);
    while k > 0 && magnitude * 2f64.powi(k as i32) > 1.0 {
        k -= 1;
    }
    k as u8
}

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// `round_half_away(v / 2^shift)` in exact integer arithmetic.
pub fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let half = 1i128 << (shift - 1);
    if v >= 0 {
        (v + half) >> shift
    } else {
        -((-v + half) >> shift)
    }
}

/// `round_half_away(num / den)` for a positive denominator.
pub fn round_div(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    if num >= 0 {
        (2 * num + den) / (2 * den)
    } else {
        -((-2 * num + den) / (2 * den))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_examples() {
        let s = FixedPointSpec::new(8, 8).unwrap();
        assert_eq!(FixedPointCode::encode(0.05, s).unwrap().code, 13);
        let s = FixedPointSpec::new(12, 4).unwrap();
        assert_eq!(FixedPointCode::encode(1.0, s).unwrap().code, 16);
    }

    #[test]
    fn overflow_is_an_error() {
        let s = FixedPointSpec::new(2, 4).unwrap();
        // range is [-32, 31] codes, i.e. [-2, 1.9375]
        assert!(FixedPointCode::encode(1.9375, s).is_ok());
        assert!(matches!(
            FixedPointCode::encode(2.0, s),
            Err(FixedPointError::Overflow { .. })
        ));
        assert!(FixedPointCode::encode(-2.0, s).is_ok());
    }

    #[test]
    fn aligned_keeps_relative_precision() {
        let spec = FixedPointSpec::INT16_Q12;
        let m = 0.0031;
        let c = FixedPointCode::encode_aligned(m, spec).unwrap();
        assert!(c.frac_bits > 12);
        assert!((c.decode() - m).abs() / m <= 2f64.powi(-12));
        // leading one sits at bit frac_bits - k ... i.e. code in (2^11, 2^12]
        assert!(c.code > 1 << 11 && c.code <= 1 << 12);
        // exact power of two stays representable
        let c = FixedPointCode::encode_aligned(0.25, spec).unwrap();
        assert_eq!(c.decode(), 0.25);
        assert_eq!(c.code, 1 << 12);
    }

    #[test]
    fn shift_rounding_is_half_away() {
        assert_eq!(round_shift(3000, 8), 12);
        assert_eq!(round_shift(-3000, 8), -12);
        assert_eq!(round_shift(128, 8), 1);
        assert_eq!(round_shift(-128, 8), -1);
        assert_eq!(round_shift(127, 8), 0);
        assert_eq!(round_div(5, 2), 3);
        assert_eq!(round_div(-5, 2), -3);
        assert_eq!(round_div(7, 3), 2);
    }
}
