//! Activation look-up tables.
//!
//! The input range `[lo, hi)` is split into `2^addr_bits` equal bins. An input
//! is clamped into the range and the bin index is the integer part of its
//! offset from `lo` in bin widths, which in hardware is a subtraction followed
//! by a bit slice. Each entry holds `f(left edge)` quantized to the output
//! format.
//!
//! Optionally each bin also stores Taylor coefficients about its left edge so
//! the table can be refined with the in-bin residual (Horner evaluation in
//! fixed point). Degree 0 is the plain table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::{quantize_raw, rescale_raw, FixedPointFormat, FpValue};
use crate::model::ActivationKind;

pub const DEFAULT_ADDR_BITS: u32 = 10;
pub const DEFAULT_RANGE: (f64, f64) = (-4.0, 4.0);
/// Extra fraction bits carried by interpolation coefficients and the Horner
/// accumulator.
pub const COEF_GUARD_BITS: u32 = 4;
pub const MAX_INTERP_DEGREE: u32 = 6;
const MAX_ADDR_BITS: u32 = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LutError {
    #[error("degenerate input range [{0}, {1})")]
    DegenerateRange(f64, f64),
    #[error("input range width {0} is not a power of two")]
    RangeNotPowerOfTwo(f64),
    #[error("range start {0} is not on the bin grid")]
    RangeOffGrid(f64),
    #[error("address width {0} out of range 1..={MAX_ADDR_BITS}")]
    AddrBits(u32),
    #[error("interpolation degree {0} exceeds {MAX_INTERP_DEGREE}")]
    Degree(u32),
}

/// How much in-bin refinement to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    None,
    Degree(u32),
    /// Smallest degree whose truncation bound is below half an output ulp.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutConfig {
    pub addr_bits: u32,
    pub range: (f64, f64),
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Default for LutConfig {
    fn default() -> Self {
        Self { addr_bits: DEFAULT_ADDR_BITS, range: DEFAULT_RANGE, interpolation: Interpolation::None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LutRom {
    kind: ActivationKind,
    lo: f64,
    hi: f64,
    addr_bits: u32,
    in_fmt: FixedPointFormat,
    out_fmt: FixedPointFormat,
    entries: Vec<i128>,
    /// `coeffs[k-1][a]` is the k-th Taylor coefficient of bin `a`.
    coeffs: Vec<Vec<i128>>,
    coef_fmt: FixedPointFormat,
    grid: Grid,
}

/// Integer view of the input domain, in units of `2^-frac`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub frac: u32,
    pub lo: i128,
    /// log2 of the bin width in grid units.
    pub bin_shift: u32,
}

impl LutRom {
    pub fn kind(&self) -> ActivationKind {
        self.kind
    }
    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
    pub fn addr_bits(&self) -> u32 {
        self.addr_bits
    }
    pub fn in_fmt(&self) -> FixedPointFormat {
        self.in_fmt
    }
    pub fn out_fmt(&self) -> FixedPointFormat {
        self.out_fmt
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn entries(&self) -> &[i128] {
        &self.entries
    }
    pub fn entry(&self, addr: usize) -> FpValue {
        FpValue::from_raw(self.entries[addr], self.out_fmt)
    }
    pub fn degree(&self) -> u32 {
        self.coeffs.len() as u32
    }
    pub fn coeffs(&self) -> &[Vec<i128>] {
        &self.coeffs
    }
    pub fn coef_fmt(&self) -> FixedPointFormat {
        self.coef_fmt
    }
    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Left edge of bin `addr`.
    pub fn bin_edge(&self, addr: usize) -> f64 {
        self.lo + addr as f64 * (self.hi - self.lo) / (1u64 << self.addr_bits) as f64
    }

    /// Overwrites one table entry; used for fault injection.
    pub fn set_entry(&mut self, addr: usize, raw: i128) {
        self.entries[addr] = self.out_fmt.saturate(raw);
    }

    /// Bin address and in-bin residual (grid units) of a raw input.
    pub fn address(&self, raw: i128) -> (usize, i128) {
        let g = self.grid;
        let x = raw << (g.frac - self.in_fmt.frac_length());
        let span = 1i128 << (self.addr_bits + g.bin_shift);
        let off = (x - g.lo).clamp(0, span - 1);
        ((off >> g.bin_shift) as usize, off & ((1i128 << g.bin_shift) - 1))
    }
}

/// Plain table (no interpolation).
pub fn gen_activation_lut(
    kind: ActivationKind,
    in_fmt: FixedPointFormat,
    out_fmt: FixedPointFormat,
    addr_bits: u32,
    input_range: (f64, f64),
) -> Result<LutRom, LutError> {
    let cfg = LutConfig { addr_bits, range: input_range, interpolation: Interpolation::None };
    gen_activation_lut_with(kind, in_fmt, out_fmt, &cfg)
}

pub fn gen_activation_lut_with(
    kind: ActivationKind,
    in_fmt: FixedPointFormat,
    out_fmt: FixedPointFormat,
    cfg: &LutConfig,
) -> Result<LutRom, LutError> {
    let (lo, hi) = cfg.range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(LutError::DegenerateRange(lo, hi));
    }
    if !(1..=MAX_ADDR_BITS).contains(&cfg.addr_bits) {
        return Err(LutError::AddrBits(cfg.addr_bits));
    }
    let width = hi - lo;
    let width_log2 = width.log2();
    if width_log2.fract() != 0.0 {
        return Err(LutError::RangeNotPowerOfTwo(width));
    }
    // bins are 2^-bin_frac wide
    let bin_frac = cfg.addr_bits as i64 - width_log2 as i64;
    let bin_width = (-(bin_frac as f64)).exp2();
    if (lo / bin_width).fract() != 0.0 {
        return Err(LutError::RangeOffGrid(lo));
    }
    let frac = (in_fmt.frac_length() as i64).max(bin_frac).max(0) as u32;
    let grid = Grid {
        frac,
        lo: (lo * (frac as f64).exp2()) as i128,
        bin_shift: (frac as i64 - bin_frac) as u32,
    };

    let degree = match cfg.interpolation {
        Interpolation::None => 0,
        Interpolation::Degree(d) if d > MAX_INTERP_DEGREE => return Err(LutError::Degree(d)),
        Interpolation::Degree(d) => d,
        Interpolation::Auto => auto_degree(kind, bin_width, out_fmt.frac_length()),
    };
    let coef_fmt = FixedPointFormat::widened(
        out_fmt.frac_length() + COEF_GUARD_BITS + 3,
        out_fmt.frac_length() + COEF_GUARD_BITS,
    );

    let n = 1usize << cfg.addr_bits;
    let edge = |a: usize| lo + a as f64 * bin_width;
    let entries = (0..n).map(|a| quantize_raw(kind.eval(edge(a)), out_fmt)).collect();
    let derivs = derivative_polys(kind, degree as usize);
    let mut coeffs = vec![Vec::with_capacity(n); degree as usize];
    let mut factorial = 1.0;
    for (k, col) in coeffs.iter_mut().enumerate() {
        factorial *= (k + 1) as f64;
        for a in 0..n {
            let c = eval_derivative(kind, &derivs[k + 1], edge(a)) / factorial;
            col.push(quantize_raw(c, coef_fmt));
        }
    }
    Ok(LutRom {
        kind,
        lo,
        hi,
        addr_bits: cfg.addr_bits,
        in_fmt,
        out_fmt,
        entries,
        coeffs,
        coef_fmt,
        grid,
    })
}

/// Looks up `x` (clamped into the table range). The value is read in the
/// table's input format, so callers requantize first when formats differ.
pub fn lut_eval(lut: &LutRom, x: FpValue) -> FpValue {
    let raw = rescale_raw(x.raw(), x.format().frac_length(), lut.in_fmt.frac_length());
    lut_eval_raw(lut, lut.in_fmt.saturate(raw))
}

pub(crate) fn lut_eval_raw(lut: &LutRom, raw: i128) -> FpValue {
    let (addr, resid) = lut.address(raw);
    if lut.coeffs.is_empty() {
        return FpValue::from_raw(lut.entries[addr], lut.out_fmt);
    }
    let cf = lut.coef_fmt.frac_length();
    let g = lut.grid.frac;
    let mut h: i128 = 0;
    for col in lut.coeffs.iter().rev() {
        h = h.saturating_add(col[addr]);
        h = rescale_raw(h.saturating_mul(resid), cf + g, cf);
    }
    let base = rescale_raw(lut.entries[addr], lut.out_fmt.frac_length(), cf);
    let total = base.saturating_add(h);
    FpValue::from_raw(rescale_raw(total, cf, lut.out_fmt.frac_length()), lut.out_fmt)
}

/// `d^k/dx^k tanh(x)` as a polynomial in `t = tanh(x)` (ascending powers).
fn tanh_derivative_polys(max_order: usize) -> Vec<Vec<f64>> {
    let mut polys = vec![vec![0.0, 1.0]];
    for _ in 0..max_order {
        let p = polys.last().unwrap();
        // d/dx P(t) = P'(t) · (1 - t²)
        let dp: Vec<f64> = p.iter().enumerate().skip(1).map(|(i, c)| c * i as f64).collect();
        let mut next = vec![0.0; dp.len() + 2];
        for (i, c) in dp.iter().enumerate() {
            next[i] += c;
            next[i + 2] -= c;
        }
        polys.push(next);
    }
    polys
}

fn derivative_polys(kind: ActivationKind, max_order: usize) -> Vec<Vec<f64>> {
    match kind {
        ActivationKind::Tanh => tanh_derivative_polys(max_order),
        // x, 1, 0, 0, …
        ActivationKind::Identity => (0..=max_order)
            .map(|k| match k {
                0 => vec![0.0, 1.0],
                1 => vec![1.0],
                _ => vec![0.0],
            })
            .collect(),
    }
}

fn eval_derivative(kind: ActivationKind, poly: &[f64], x: f64) -> f64 {
    // tanh derivatives are polynomials in tanh(x); identity's are in x
    let t = match kind {
        ActivationKind::Tanh => x.tanh(),
        ActivationKind::Identity => x,
    };
    poly.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

/// Upper bound of `|f^(k)|` over the real line.
fn derivative_sup(kind: ActivationKind, k: usize) -> f64 {
    match kind {
        ActivationKind::Identity => {
            if k <= 1 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Tanh => {
            let polys = tanh_derivative_polys(k);
            let p = &polys[k];
            let grid = 4000;
            let max = (0..=grid)
                .map(|i| {
                    let t = -1.0 + 2.0 * i as f64 / grid as f64;
                    p.iter().rev().fold(0.0, |acc, c| acc * t + c).abs()
                })
                .fold(0.0, f64::max);
            max * 1.01
        }
    }
}

/// Truncation bound of a degree-`d` expansion over one bin.
pub fn truncation_bound(kind: ActivationKind, bin_width: f64, degree: u32) -> f64 {
    let k = degree as usize + 1;
    let fact: f64 = (1..=k).map(|i| i as f64).product();
    bin_width.powi(k as i32) / fact * derivative_sup(kind, k)
}

fn auto_degree(kind: ActivationKind, bin_width: f64, out_frac: u32) -> u32 {
    let target = (-(out_frac as f64) - 1.0).exp2();
    (0..=MAX_INTERP_DEGREE)
        .find(|&d| truncation_bound(kind, bin_width, d) <= target)
        .unwrap_or(MAX_INTERP_DEGREE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixed::quantize;
    use proptest::prelude::*;

    fn q(w: u32, n: u32) -> FixedPointFormat {
        FixedPointFormat::new(w, n).unwrap()
    }

    fn tanh_lut(in_fmt: FixedPointFormat, out_fmt: FixedPointFormat) -> LutRom {
        gen_activation_lut(ActivationKind::Tanh, in_fmt, out_fmt, 10, DEFAULT_RANGE).unwrap()
    }

    #[test]
    fn zero_maps_to_zero() {
        let lut = tanh_lut(q(16, 12), q(16, 14));
        let (addr, _) = lut.address(0);
        assert_eq!(addr, 512);
        assert_eq!(lut.entries()[512], 0);
        assert_eq!(lut_eval(&lut, FpValue::zero(q(16, 12))).raw(), 0);
    }

    #[test]
    fn top_entry() {
        let out = q(16, 14);
        let lut = tanh_lut(q(16, 12), out);
        assert_eq!(lut.bin_edge(1023), 3.9921875);
        let expect = quantize(3.9921875f64.tanh(), out).raw();
        assert_eq!(lut.entries()[1023], expect);
        assert!((3.9921875f64.tanh() - 0.99932).abs() < 1e-5);
        // beyond the range clamps to the top entry
        assert_eq!(lut_eval(&lut, quantize(7.5, q(16, 12))).raw(), expect);
        assert_eq!(lut_eval(&lut, quantize(-7.5, q(16, 12))).raw(), lut.entries()[0]);
    }

    #[test]
    fn one_lands_on_its_bin_edge() {
        let out = q(16, 14);
        let lut = tanh_lut(q(16, 12), out);
        // (1 + 4) * 1024 / 8 = 640 exactly
        let (addr, resid) = lut.address(quantize(1.0, q(16, 12)).raw());
        assert_eq!((addr, resid), (640, 0));
        assert_eq!(lut_eval(&lut, quantize(1.0, q(16, 12))).raw(), quantize(1.0f64.tanh(), out).raw());
        // just below 1.0 falls into bin 639
        let below = FpValue::from_raw(4095, q(16, 12));
        assert_eq!(lut_eval(&lut, below).raw(), quantize((1.0 - 1.0 / 128.0f64).tanh(), out).raw());
    }

    #[test]
    fn identity_entries_are_quantized_edges() {
        let out = q(16, 10);
        let lut = gen_activation_lut(ActivationKind::Identity, q(16, 10), out, 10, DEFAULT_RANGE).unwrap();
        for a in 0..lut.len() {
            assert_eq!(lut.entries()[a], quantize(lut.bin_edge(a), out).raw());
        }
    }

    #[test]
    fn coarse_input_grid_uses_sparse_addresses() {
        // 4 fraction bits: every input is a bin edge, 8 bins apart
        let lut = tanh_lut(q(8, 4), q(8, 4));
        assert_eq!(lut.address(1), (520, 0));
        assert_eq!(lut.address(-64), (0, 0));
        assert_eq!(lut.address(127), (1023, 0));
    }

    #[test]
    fn tanh_table_monotone_and_odd() {
        let lut = tanh_lut(q(16, 12), q(16, 14));
        let e = lut.entries();
        assert!(e.windows(2).all(|w| w[0] <= w[1]));
        for j in 1..512 {
            assert!((e[512 + j] + e[512 - j]).abs() <= 1, "bin {j}");
        }
    }

    #[test]
    fn range_errors() {
        let f = q(16, 12);
        let t = ActivationKind::Tanh;
        assert_eq!(gen_activation_lut(t, f, f, 10, (1.0, 1.0)), Err(LutError::DegenerateRange(1.0, 1.0)));
        assert_eq!(gen_activation_lut(t, f, f, 10, (2.0, -2.0)), Err(LutError::DegenerateRange(2.0, -2.0)));
        assert!(matches!(gen_activation_lut(t, f, f, 10, (-3.0, 3.0)), Err(LutError::RangeNotPowerOfTwo(_))));
        assert!(matches!(gen_activation_lut(t, f, f, 0, DEFAULT_RANGE), Err(LutError::AddrBits(0))));
        assert!(gen_activation_lut(t, f, f, 10, (-8.0, 8.0)).is_ok());
    }

    #[test]
    fn tanh_derivative_polynomials() {
        let p = tanh_derivative_polys(3);
        // tanh' = 1 - t², tanh'' = -2t + 2t³
        assert_eq!(p[1], vec![1.0, 0.0, -1.0]);
        assert_eq!(p[2], vec![0.0, -2.0, 0.0, 2.0]);
        // finite-difference check of the third derivative at x = 0.4
        let h = 1e-3;
        let f2 = |x: f64| eval_derivative(ActivationKind::Tanh, &p[2], x);
        let fd = (f2(0.4 + h) - f2(0.4 - h)) / (2.0 * h);
        assert!((fd - eval_derivative(ActivationKind::Tanh, &p[3], 0.4)).abs() < 1e-5);
        assert!((derivative_sup(ActivationKind::Tanh, 2) - 0.7698).abs() < 0.01);
    }

    #[test]
    fn auto_degree_grows_with_precision() {
        let bw = 1.0 / 128.0;
        let d8 = auto_degree(ActivationKind::Tanh, bw, 4);
        let d16 = auto_degree(ActivationKind::Tanh, bw, 12);
        let d32 = auto_degree(ActivationKind::Tanh, bw, 28);
        let d64 = auto_degree(ActivationKind::Tanh, bw, 60);
        assert_eq!(d8, 0);
        assert!(d8 < d16 && d16 < d32 && d32 <= d64, "{d8} {d16} {d32} {d64}");
    }

    #[test]
    fn interpolated_wide_table_tracks_tanh() {
        let f = q(64, 60);
        let cfg = LutConfig { interpolation: Interpolation::Auto, ..LutConfig::default() };
        let lut = gen_activation_lut_with(ActivationKind::Tanh, f, f, &cfg).unwrap();
        assert!(lut.degree() >= 5);
        let mut worst: f64 = 0.0;
        for i in 0..20_000 {
            let x = -3.999 + 7.998 * i as f64 / 20_000.0;
            let y = lut_eval(&lut, quantize(x, f)).to_f64();
            worst = worst.max((y - quantize(x, f).to_f64().tanh()).abs());
        }
        assert!(worst < 1e-14, "worst {worst:e}");
    }

    #[test]
    fn interpolation_keeps_entries_plain() {
        let f = q(24, 20);
        let cfg = LutConfig { interpolation: Interpolation::Degree(2), ..LutConfig::default() };
        let plain = tanh_lut(f, f);
        let interp = gen_activation_lut_with(ActivationKind::Tanh, f, f, &cfg).unwrap();
        assert_eq!(plain.entries(), interp.entries());
        assert_eq!(interp.degree(), 2);
    }

    proptest! {
        #[test]
        fn plain_error_bound(addr_bits in 6u32..=12, out_frac in 8u32..=20, x in -3.99f64..3.99) {
            let in_fmt = q(40, 32);
            let out = q(out_frac + 2, out_frac);
            let lut = gen_activation_lut(ActivationKind::Tanh, in_fmt, out, addr_bits, DEFAULT_RANGE).unwrap();
            let xq = quantize(x, in_fmt);
            let err = (lut_eval(&lut, xq).to_f64() - x.tanh()).abs();
            let bound = 8.0 / (1u64 << addr_bits) as f64 + (-(out_frac as f64) - 1.0).exp2();
            prop_assert!(err <= bound + 1e-9, "err {} bound {}", err, bound);
        }

        #[test]
        fn lut_eval_is_monotone(a in -6.0f64..6.0, b in -6.0f64..6.0) {
            let f = q(20, 14);
            let lut = tanh_lut(f, f);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(lut_eval(&lut, quantize(lo, f)).raw() <= lut_eval(&lut, quantize(hi, f)).raw());
        }
    }
}
