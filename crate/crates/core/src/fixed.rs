//! Signed two's-complement Q-format arithmetic.
//!
//! Raw values are carried in `i128`, so any format up to 128 bits is
//! representable. Rounding is round-to-nearest with ties away from zero and
//! overflow always saturates.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Widest word the `i128` carrier can hold.
pub const MAX_WORD_LENGTH: u32 = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("word length {0} out of range 2..={MAX_WORD_LENGTH}")]
    WordLength(u32),
    #[error("fraction length {frac} must be below word length {word}")]
    FracLength { word: u32, frac: u32 },
}

/// Signed fixed-point format: `word_length` total bits, `frac_length` of them
/// after the binary point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawFormat", into = "RawFormat")]
pub struct FixedPointFormat {
    word_length: u32,
    frac_length: u32,
}

#[derive(Serialize, Deserialize)]
struct RawFormat {
    word: u32,
    frac: u32,
}

impl TryFrom<RawFormat> for FixedPointFormat {
    type Error = FormatError;
    fn try_from(r: RawFormat) -> Result<Self, FormatError> {
        FixedPointFormat::new(r.word, r.frac)
    }
}

impl From<FixedPointFormat> for RawFormat {
    fn from(f: FixedPointFormat) -> Self {
        RawFormat { word: f.word_length, frac: f.frac_length }
    }
}

impl FixedPointFormat {
    pub fn new(word_length: u32, frac_length: u32) -> Result<Self, FormatError> {
        if !(2..=MAX_WORD_LENGTH).contains(&word_length) {
            return Err(FormatError::WordLength(word_length));
        }
        if frac_length >= word_length {
            return Err(FormatError::FracLength { word: word_length, frac: frac_length });
        }
        Ok(Self { word_length, frac_length })
    }

    /// Word length clamped to the carrier; used for derived (widened) formats.
    pub(crate) fn widened(word_length: u32, frac_length: u32) -> Self {
        let word_length = word_length.clamp(2, MAX_WORD_LENGTH);
        let frac_length = frac_length.min(word_length - 1);
        Self { word_length, frac_length }
    }

    pub fn word_length(&self) -> u32 {
        self.word_length
    }

    pub fn frac_length(&self) -> u32 {
        self.frac_length
    }

    pub fn integer_bits(&self) -> u32 {
        self.word_length - self.frac_length
    }

    pub fn max_raw(&self) -> i128 {
        if self.word_length == 128 {
            i128::MAX
        } else {
            (1i128 << (self.word_length - 1)) - 1
        }
    }

    pub fn min_raw(&self) -> i128 {
        if self.word_length == 128 {
            i128::MIN
        } else {
            -(1i128 << (self.word_length - 1))
        }
    }

    /// One unit in the last place.
    pub fn resolution(&self) -> f64 {
        (-(self.frac_length as f64)).exp2()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.resolution()
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.resolution()
    }

    pub fn saturate(&self, raw: i128) -> i128 {
        raw.clamp(self.min_raw(), self.max_raw())
    }

    pub fn contains_raw(&self, raw: i128) -> bool {
        raw >= self.min_raw() && raw <= self.max_raw()
    }

    /// Exact product format of `self × other`.
    pub fn product(&self, other: &FixedPointFormat) -> FixedPointFormat {
        Self::widened(
            self.word_length + other.word_length,
            self.frac_length + other.frac_length,
        )
    }
}

impl fmt::Display for FixedPointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q(w{}, n{})", self.word_length, self.frac_length)
    }
}

/// A raw two's-complement integer tagged with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FpValue {
    raw: i128,
    format: FixedPointFormat,
}

impl FpValue {
    /// Builds a value from a raw integer, saturating into the format range.
    pub fn from_raw(raw: i128, format: FixedPointFormat) -> Self {
        Self { raw: format.saturate(raw), format }
    }

    pub fn zero(format: FixedPointFormat) -> Self {
        Self { raw: 0, format }
    }

    pub fn raw(&self) -> i128 {
        self.raw
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn to_f64(&self) -> f64 {
        raw_to_f64(self.raw, self.format.frac_length)
    }
}

impl fmt::Display for FpValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} in {})", self.to_f64(), self.raw, self.format)
    }
}

pub(crate) fn raw_to_f64(raw: i128, frac: u32) -> f64 {
    raw as f64 * (-(frac as f64)).exp2()
}

/// Rounds `value · 2^frac` to the nearest integer (ties away from zero) and
/// saturates into `fmt`.
pub fn quantize(value: f64, fmt: FixedPointFormat) -> FpValue {
    FpValue { raw: quantize_raw(value, fmt), format: fmt }
}

pub(crate) fn quantize_raw(value: f64, fmt: FixedPointFormat) -> i128 {
    if value.is_nan() {
        return 0;
    }
    let scaled = (value * (fmt.frac_length as f64).exp2()).round();
    // i128::MAX as f64 rounds up to 2^127, so compare before casting
    if scaled >= fmt.max_raw() as f64 {
        fmt.max_raw()
    } else if scaled <= fmt.min_raw() as f64 {
        fmt.min_raw()
    } else {
        scaled as i128
    }
}

/// Exact product; the result format is the sum of both word and fraction
/// lengths.
pub fn fp_mul(a: FpValue, b: FpValue) -> FpValue {
    let format = a.format.product(&b.format);
    let raw = a.raw.checked_mul(b.raw).unwrap_or_else(|| {
        if (a.raw < 0) == (b.raw < 0) {
            i128::MAX
        } else {
            i128::MIN
        }
    });
    FpValue::from_raw(raw, format)
}

/// Aligns both operands to `out_fmt`, adds exactly, then saturates.
pub fn fp_add(a: FpValue, b: FpValue, out_fmt: FixedPointFormat) -> FpValue {
    let ra = rescale_raw(a.raw, a.format.frac_length, out_fmt.frac_length);
    let rb = rescale_raw(b.raw, b.format.frac_length, out_fmt.frac_length);
    FpValue::from_raw(ra.saturating_add(rb), out_fmt)
}

/// Re-expresses `v` in `fmt`: round to nearest (ties away) when dropping
/// fraction bits, saturate when the integer part does not fit.
pub fn requantize(v: FpValue, fmt: FixedPointFormat) -> FpValue {
    requantize_raw(v.raw, v.format.frac_length, fmt)
}

pub(crate) fn requantize_raw(raw: i128, from_frac: u32, fmt: FixedPointFormat) -> FpValue {
    FpValue::from_raw(rescale_raw(raw, from_frac, fmt.frac_length), fmt)
}

/// Moves `raw` from `from_frac` to `to_frac` fraction bits. Left shifts
/// saturate on the carrier; right shifts round half away from zero.
pub(crate) fn rescale_raw(raw: i128, from_frac: u32, to_frac: u32) -> i128 {
    use std::cmp::Ordering;
    match to_frac.cmp(&from_frac) {
        Ordering::Equal => raw,
        Ordering::Greater => shl_saturating(raw, to_frac - from_frac),
        Ordering::Less => round_shr(raw, from_frac - to_frac),
    }
}

pub(crate) fn shl_saturating(raw: i128, shift: u32) -> i128 {
    if raw == 0 {
        return 0;
    }
    if shift >= 127 {
        return if raw > 0 { i128::MAX } else { i128::MIN };
    }
    let limit = i128::MAX >> shift;
    if raw > limit {
        i128::MAX
    } else if raw < -limit - 1 {
        i128::MIN
    } else {
        raw << shift
    }
}

pub(crate) fn round_shr(raw: i128, shift: u32) -> i128 {
    if shift == 0 {
        return raw;
    }
    if shift >= 127 {
        return 0;
    }
    let half = 1u128 << (shift - 1);
    let mag = raw.unsigned_abs();
    let q = (mag >> shift) + u128::from(mag & ((1u128 << shift) - 1) >= half);
    // q ≤ 2^(127 - shift) + 1, always fits
    if raw < 0 {
        -(q as i128)
    } else {
        q as i128
    }
}

pub(crate) fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}
