//! Software simulation and fixed-point analysis.

pub mod fixed;
pub mod lut;
pub mod reference;
pub mod snr;

use thiserror::Error;

pub use fixed::{simulate_fixed, FixedProgram, FormatAssignment, ResolvedFormats};
pub use lut::{gen_activation_lut, gen_activation_lut_with, lut_eval, Interpolation, LutConfig, LutError, LutRom};
pub use reference::{reference_trajectory, simulate_reference};
pub use snr::{bit_sweep, snr, FracPolicy, SnrReport, SnrRow, SweepConfig, SNR_CAP_DB};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("input has {found} entries, model expects {expected}")]
    InputDimension { expected: usize, found: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("no format assigned to the {0} class")]
    MissingFormat(&'static str),
    #[error("format mismatch: {0}")]
    FormatMismatch(String),
    #[error("activation table mismatch: {0}")]
    LutMismatch(String),
    #[error(transparent)]
    Lut(#[from] LutError),
    #[error("snr: {0}")]
    Snr(String),
}
