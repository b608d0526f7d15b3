//! Output SNR of the fixed-point datapath against the double-precision
//! reference, and sweeps of it over word lengths.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fixed::FixedPointFormat;
use crate::model::StateSpaceModel;

use super::fixed::{FixedProgram, FormatAssignment};
use super::lut::{gen_activation_lut_with, Interpolation, LutConfig};
use super::reference::simulate_reference;
use super::SimError;

/// Reported when the error energy is exactly zero.
pub const SNR_CAP_DB: f64 = 300.0;

/// Per-output SNR in dB over a series of samples (`[sample][output]`).
pub fn snr(reference: &[Vec<f64>], test: &[Vec<f64>]) -> Result<Vec<f64>, SimError> {
    if reference.is_empty() || reference.len() != test.len() {
        return Err(SimError::Snr(format!(
            "series lengths {} and {} must match and be nonzero",
            reference.len(),
            test.len()
        )));
    }
    let outputs = reference[0].len();
    if reference.iter().chain(test).any(|s| s.len() != outputs) {
        return Err(SimError::Snr("samples have differing output counts".into()));
    }
    (0..outputs)
        .map(|o| {
            let (sig, err) = reference.iter().zip(test).fold((0.0, 0.0), |(s, e), (r, t)| {
                let d = r[o] - t[o];
                (s + r[o] * r[o], e + d * d)
            });
            if sig == 0.0 {
                return Err(SimError::Snr(format!("output {o} has zero reference energy")));
            }
            if err == 0.0 {
                return Ok(SNR_CAP_DB);
            }
            Ok((10.0 * (sig / err).log10()).min(SNR_CAP_DB))
        })
        .collect()
}

/// How a word length is split into integer and fraction bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FracPolicy {
    /// `frac = word - n`.
    IntegerBits(u32),
    /// Fixed fraction length.
    Frac(u32),
}

impl Default for FracPolicy {
    fn default() -> Self {
        FracPolicy::IntegerBits(4)
    }
}

impl FracPolicy {
    pub fn format(&self, word: u32) -> Result<FixedPointFormat, SimError> {
        let frac = match *self {
            FracPolicy::IntegerBits(i) => word.checked_sub(i).ok_or_else(|| {
                SimError::FormatMismatch(format!("word length {word} leaves no room for {i} integer bits"))
            })?,
            FracPolicy::Frac(n) => n,
        };
        FixedPointFormat::new(word, frac).map_err(|e| SimError::FormatMismatch(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub frac_policy: FracPolicy,
    pub lut: LutConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            frac_policy: FracPolicy::default(),
            lut: LutConfig { interpolation: Interpolation::Auto, ..LutConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub bits: u32,
    pub snr_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub model: String,
    pub seed: Option<u64>,
    pub samples: usize,
    pub rows: Vec<SnrRow>,
}

impl SnrReport {
    /// `bits,output_index,snr_db`, one line per (width, output).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bits,output_index,snr_db\n");
        for row in &self.rows {
            for (o, v) in row.snr_db.iter().enumerate() {
                let _ = writeln!(s, "{},{},{}", row.bits, o, v);
            }
        }
        s
    }

    pub fn mean_snr(&self) -> Vec<(u32, f64)> {
        self.rows
            .iter()
            .map(|r| (r.bits, r.snr_db.iter().sum::<f64>() / r.snr_db.len() as f64))
            .collect()
    }
}

/// Fixed-point outputs (as reals) of every sample at one word length.
pub fn fixed_outputs(
    m: &StateSpaceModel,
    inputs: &[Vec<f64>],
    bits: u32,
    cfg: &SweepConfig,
) -> Result<Vec<Vec<f64>>, SimError> {
    let fmt = cfg.frac_policy.format(bits)?;
    let lut = gen_activation_lut_with(crate::model::ActivationKind::Tanh, fmt, fmt, &cfg.lut)?;
    let prog = FixedProgram::new(m, &FormatAssignment::uniform(fmt), Some(&lut))?;
    inputs
        .par_iter()
        .map(|u| prog.run(u).map(|y| y.iter().map(|v| v.to_f64()).collect()))
        .collect()
}

/// SNR at each word length over the given input samples.
pub fn bit_sweep(
    m: &StateSpaceModel,
    inputs: &[Vec<f64>],
    widths: &[u32],
    cfg: &SweepConfig,
) -> Result<SnrReport, SimError> {
    if widths.is_empty() || inputs.is_empty() {
        return Err(SimError::Snr("sweep needs at least one width and one sample".into()));
    }
    let reference = inputs
        .par_iter()
        .map(|u| simulate_reference(m, u))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = widths
        .par_iter()
        .map(|&bits| {
            let test = fixed_outputs(m, inputs, bits, cfg)?;
            Ok(SnrRow { bits, snr_db: snr(&reference, &test)? })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(SnrReport { model: m.name.clone(), seed: None, samples: inputs.len(), rows })
}
