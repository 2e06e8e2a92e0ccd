//! Multitemporal hyperspectral unmixing under a state-space formulation.
//!
//! The crate is organised around the two halves of a state-space model:
//! endmember spectra evolve under a dynamical operator (`model`), and images
//! are linear mixtures of those spectra with constant abundances. On top of
//! that sit a synthetic data generator (`simulate`), classical per-frame
//! unmixing baselines (`unmix`), variational trajectory estimation with a
//! known model (`assimilate`) and learned dynamics (`learndyn`).
//!
//! All numerical code is generic over [`Real`]; `f64` aliases are provided
//! at the crate root for the common case.

pub mod assimilate;
pub mod error;
pub mod learndyn;
pub mod model;
pub mod scalar;
pub mod simulate;
pub mod unmix;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision spectrum.
pub type Spectrum64 = model::Spectrum<f64>;
/// Double-precision endmember matrix.
pub type EndmemberMatrix64 = model::EndmemberMatrix<f64>;
/// Double-precision endmember time series.
pub type SpectralSeries64 = model::SpectralSeries<f64>;
/// Double-precision abundance matrix.
pub type AbundanceMatrix64 = model::AbundanceMatrix<f64>;
/// Double-precision image time series.
pub type ImageSequence64 = model::ImageSequence<f64>;
/// Double-precision augmented (position, velocity) state.
pub type AugmentedState64 = model::AugmentedState<f64>;
/// Single-precision spectrum.
pub type Spectrum32 = model::Spectrum<f32>;
/// Single-precision augmented state.
pub type AugmentedState32 = model::AugmentedState<f32>;
