//! Bit-exact bfloat16 conversion and the quantization-step model.
//!
//! A BF16 value has 1 sign bit, 8 exponent bits (bias 127) and 7 fraction
//! bits; a normalized value decodes as `(-1)^S * 2^(E-127) * (1.F)_2`.
//! Conversion from `f64` rounds directly on the 52-bit mantissa (no detour
//! through `f32`, which would double-round) to nearest, ties to even.
//!
//! Only zero and normalized magnitudes are produced. Results that would be
//! subnormal, infinite or NaN are rejected with [`Error::Domain`].

use std::fmt;

use crate::error::{Error, Result};

const F64_MANTISSA_BITS: u32 = 52;
const BF16_FRACTION_BITS: u32 = 7;
const DROPPED_BITS: u32 = F64_MANTISSA_BITS - BF16_FRACTION_BITS;
const BF16_BIAS: i32 = 127;
const MIN_NORMAL_EXP: i32 = -126;
const MAX_EXP: i32 = 127;

/// A BF16 encoding. The raw 16 bits are the canonical representation.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bf16(u16);

impl Bf16 {
    pub const ZERO: Bf16 = Bf16(0);
    pub const ONE: Bf16 = Bf16(0x3f80);

    pub const fn from_bits(bits: u16) -> Self {
        Bf16(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    pub fn sign_bit(self) -> bool {
        self.0 >> 15 == 1
    }

    /// Biased 8-bit exponent field.
    pub fn exponent(self) -> u8 {
        ((self.0 >> 7) & 0xff) as u8
    }

    /// 7-bit fraction field.
    pub fn fraction(self) -> u8 {
        (self.0 & 0x7f) as u8
    }

    pub fn is_finite(self) -> bool {
        self.exponent() != 0xff
    }

    /// Exact value of the encoding. Subnormals, infinities and NaN are
    /// decoded too, so the full 2^16 space can be enumerated.
    pub fn to_f64(self) -> f64 {
        let sign = if self.sign_bit() { -1.0 } else { 1.0 };
        let exp = self.exponent() as i32;
        let frac = self.fraction() as f64;
        match exp {
            0 => sign * frac * 2f64.powi(MIN_NORMAL_EXP - BF16_FRACTION_BITS as i32),
            0xff if frac == 0.0 => sign * f64::INFINITY,
            0xff => f64::NAN,
            _ => sign * (1.0 + frac / 128.0) * 2f64.powi(exp - BF16_BIAS),
        }
    }
}

impl fmt::Debug for Bf16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bf16({:#06x} = {})", self.0, self.to_f64())
    }
}

/// Nearest BF16 value to `x`, ties to even.
pub fn round_to_bf16(x: f64) -> Result<Bf16> {
    if !x.is_finite() {
        return Err(Error::domain(format!(
            "cannot convert non-finite {x} to bf16"
        )));
    }
    let bits = x.to_bits();
    let sign = ((bits >> 63) as u16) << 15;
    if x == 0.0 {
        return Ok(Bf16(sign));
    }
    let biased = ((bits >> F64_MANTISSA_BITS) & 0x7ff) as i32;
    if biased == 0 {
        return Err(Error::domain(format!(
            "{x:e} is far below the bf16 normal range"
        )));
    }
    let mut exp = biased - 1023;
    // 53-bit significand with the implicit leading one.
    let significand = (bits & ((1u64 << F64_MANTISSA_BITS) - 1)) | (1u64 << F64_MANTISSA_BITS);
    let mut kept = significand >> DROPPED_BITS;
    let rest = significand & ((1u64 << DROPPED_BITS) - 1);
    let half = 1u64 << (DROPPED_BITS - 1);
    if rest > half || (rest == half && kept & 1 == 1) {
        kept += 1;
        if kept == 1 << (BF16_FRACTION_BITS + 1) {
            kept >>= 1;
            exp += 1;
        }
    }
    if exp < MIN_NORMAL_EXP {
        return Err(Error::domain(format!(
            "{x:e} rounds into the bf16 subnormal range"
        )));
    }
    if exp > MAX_EXP {
        return Err(Error::domain(format!("{x:e} overflows bf16")));
    }
    let exp_field = ((exp + BF16_BIAS) as u16) << BF16_FRACTION_BITS;
    let frac_field = (kept as u16) & 0x7f;
    Ok(Bf16(sign | exp_field | frac_field))
}

/// `decode(round_to_bf16(x))`.
pub fn quantize(x: f64) -> Result<f64> {
    round_to_bf16(x).map(Bf16::to_f64)
}

/// BF16 grid spacing in the binade containing `x`: `2^(e - 7)` with
/// `e = floor(log2 |x|)`.
pub fn ulp_at(x: f64) -> Result<f64> {
    if !x.is_finite() || x == 0.0 {
        return Err(Error::domain(format!("ulp undefined at {x}")));
    }
    let biased = ((x.to_bits() >> F64_MANTISSA_BITS) & 0x7ff) as i32;
    let exp = biased - 1023;
    if biased == 0 || exp < MIN_NORMAL_EXP {
        return Err(Error::domain(format!(
            "{x:e} is outside the bf16 normal range"
        )));
    }
    if exp > MAX_EXP {
        return Err(Error::domain(format!("{x:e} overflows bf16")));
    }
    Ok(2f64.powi(exp - BF16_FRACTION_BITS as i32))
}

/// `|x - quantize(x)|` for `|x| <= 1`.
pub fn measured_roundtrip_error(x: f64) -> Result<f64> {
    if !(x.abs() <= 1.0) {
        return Err(Error::domain(format!("{x} is outside [-1, 1]")));
    }
    Ok((x - quantize(x)?).abs())
}

/// Size of one quantization step in the normalized `[-1, 1]` label space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepModel {
    delta_v: f64,
}

impl StepModel {
    /// Worst-case BF16 spacing over `[-1, 1]`, reached in the `[0.5, 1)` binade.
    pub const WORST_CASE: StepModel = StepModel {
        delta_v: 1.0 / 256.0,
    };

    /// Half spacing: the largest error round-to-nearest can make in `[0.5, 1]`.
    pub const ROUND_TO_NEAREST: StepModel = StepModel {
        delta_v: 1.0 / 512.0,
    };

    pub fn new(delta_v: f64) -> Result<Self> {
        if !(delta_v > 0.0 && delta_v <= 1.0 / 128.0) {
            return Err(Error::domain(format!(
                "quantization step {delta_v} must lie in (0, 2^-7]"
            )));
        }
        Ok(Self { delta_v })
    }

    pub fn delta_v(self) -> f64 {
        self.delta_v
    }
}

impl Default for StepModel {
    fn default() -> Self {
        Self::WORST_CASE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values_survive() {
        assert_eq!(round_to_bf16(1.0).unwrap(), Bf16::ONE);
        assert_eq!(quantize(-0.75).unwrap(), -0.75);
        assert_eq!(quantize(0.0).unwrap(), 0.0);
        assert!(round_to_bf16(-0.0).unwrap().sign_bit());
    }

    #[test]
    fn tie_goes_to_even_mantissa() {
        // 0.5 has fraction 0 (even); 0.50390625 has fraction 1.
        assert_eq!(quantize(0.501953125).unwrap(), 0.5);
        // 0.505859375 sits between fraction 1 and 2; even wins upward.
        assert_eq!(quantize(0.505859375).unwrap(), 0.5078125);
    }

    #[test]
    fn fraction_overflow_carries_into_exponent() {
        let just_below_one = 1.0 - 2f64.powi(-10);
        assert_eq!(quantize(just_below_one).unwrap(), 1.0);
    }

    #[test]
    fn field_layout() {
        let v = round_to_bf16(-1.5).unwrap();
        assert!(v.sign_bit());
        assert_eq!(v.exponent(), 127);
        assert_eq!(v.fraction(), 0x40);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(round_to_bf16(f64::NAN), Err(Error::Domain(_))));
        assert!(matches!(
            round_to_bf16(f64::INFINITY),
            Err(Error::Domain(_))
        ));
        assert!(matches!(round_to_bf16(1e-40), Err(Error::Domain(_))));
        assert!(matches!(round_to_bf16(1e39), Err(Error::Domain(_))));
        assert!(ulp_at(0.0).is_err());
        assert!(measured_roundtrip_error(1.5).is_err());
    }

    #[test]
    fn ulp_per_binade() {
        assert_eq!(ulp_at(0.75).unwrap(), 1.0 / 256.0);
        assert_eq!(ulp_at(0.25).unwrap(), 1.0 / 512.0);
        assert_eq!(ulp_at(1.5).unwrap(), 1.0 / 128.0);
        assert_eq!(ulp_at(-0.5).unwrap(), 1.0 / 256.0);
    }

    #[test]
    fn step_model_bounds() {
        assert!(StepModel::new(0.0).is_err());
        assert!(StepModel::new(1.0 / 64.0).is_err());
        assert_eq!(StepModel::new(1.0 / 128.0).unwrap().delta_v(), 1.0 / 128.0);
        assert_eq!(StepModel::default().delta_v(), 1.0 / 256.0);
    }
}
