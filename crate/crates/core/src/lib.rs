//! Neural Fourier Modelling: time-series models that operate on half-spectra.
//!
//! The crate is organized bottom-up:
//!
//! - [`spectral`]: real FFT on half-spectra plus a direct DFT reference
//! - [`manip`]: Fourier-domain extension, sinc resampling, decimation
//! - [`autodiff`]: tape-based reverse-mode differentiation, Adam, schedules
//! - [`inr`]: Fourier-feature SIREN used for frequency tokens and filters
//! - [`layers`]: input projection, frequency tokens, implicit Fourier filter,
//!   mixer blocks and the full model
//! - [`tasks`]: losses, normalization, heads and anomaly scoring
//! - [`data`]: synthetic generators, CSV ingestion and windowing

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod manip;
pub mod inr;
pub mod layers;
pub mod spectral;
pub mod tasks;

pub use error::{NfmError, Result};
pub use manip::{decimate, extend_spectrum, sinc_resample, ExtensionFactors, Rational};
pub use spectral::{irfft, naive_dft, rfft, Complex, SeriesBatch, Spectrum};
