//! Simulation and analysis toolkit for single-stage quantum frequency
//! conversion (QFC) between the telecom O-band and the 369.5 nm Yb⁺ line.
//!
//! The crate is organised bottom-up:
//!
//! - [`fock`]: three-mode truncated Fock-space engine for the conversion
//!   and pair-generation Hamiltonians.
//! - [`spectral`]: wavelength bookkeeping, phase matching, conversion
//!   efficiency, filter curves and noise-rate laws.
//! - [`montecarlo`]: seeded time-tag stream generation for the signal,
//!   idler and UV detectors.
//! - [`tagcorr`]: coincidence histograms, g² estimation, Cauchy–Schwarz
//!   testing, rate metrics and power-law fits.
//! - [`harness`]: scenario manifests, calibration and the verification
//!   runner used by the `qfc` binary.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod fock;
pub mod harness;
pub mod montecarlo;
pub mod spectral;
pub mod tagcorr;
pub mod tagio;

pub use error::{Error, Result};

/// Tool version embedded in every emitted artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
