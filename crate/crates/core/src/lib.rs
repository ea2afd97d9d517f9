//! Delta-axis spectroscopy (DAXS) of double quantum dots.
//!
//! The crate has two halves. The forward half builds the 15-level block
//! Hamiltonian of a (1,3)-(0,4) double dot, diagonalizes it, and renders
//! synthetic DAXS images, reservoir sweeps and magnetospectroscopy maps.
//! The inverse half smooths images, fits Lorentzian peaks column by column
//! along operator-drawn seed curves, threads the centers into tracks and
//! fits the Hamiltonian eigenvalue branches back to those tracks, with
//! sign-class comparison and a scan-to-scan error budget.
//!
//! All energies are in GHz unless a name says otherwise.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod error;
pub mod exec;
pub mod fit;
pub mod image;
pub mod lsq;
pub mod model;
pub mod peaks;
pub mod registration;
pub mod savgol;
pub mod sim;
pub mod tracks;

pub use error::{DaxsError, Result};
pub use exec::Execution;
pub use image::{Axis, MaskedImage, SpectralImage};
pub use model::{BranchLabel, CouplingName, LevelOffsets, ModelParams, Sector, TunnelCouplings};
