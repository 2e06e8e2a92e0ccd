//! Learned dynamics for endmember time series.
//!
//! Three architectures share one interface: an LSTM baseline and two
//! integrator networks (explicit Euler and classical RK4) wrapped around an
//! MLP vector field. Data are lists of `L x batch` frames; frame `t + 1` is
//! the target for frame `t`.

pub mod checkpoint;
pub mod integrators;
pub mod lstm;
pub mod mlp;
pub mod train;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SpectralSeries;
use crate::scalar::{lit, Real};

pub use checkpoint::{read_checkpoint, write_checkpoint, Header};
pub use integrators::{euler_step, rk4_step, EulerNet, Rk4Net};
pub use lstm::LstmNet;
pub use mlp::{mlp_forward, MlpBlock};
pub use train::{backprop, loss, predict_test, rollout, train, Adam, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Lstm,
    Euler,
    Rk4,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Lstm, Architecture::Euler, Architecture::Rk4];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Lstm => "lstm",
            Architecture::Euler => "euler",
            Architecture::Rk4 => "rk4",
        }
    }
}

/// Common interface of the trainable models.
pub trait LearnedDynamics<T: Real> {
    fn architecture(&self) -> Architecture;
    fn bands(&self) -> usize;
    fn num_params(&self) -> usize;
    /// Flat parameter vector.
    fn params(&self) -> Vec<T>;
    fn set_params(&mut self, params: &[T]) -> Result<()>;
    /// `(name, rows, cols)` of each parameter block, in [`Self::params`] order.
    fn param_layout(&self) -> Vec<(String, usize, usize)>;
    /// One-step predictions of `frames[1..]` from the true preceding frames.
    fn teacher_forced(&self, frames: &[DMatrix<T>]) -> Result<Vec<DMatrix<T>>>;
    /// Sum of squared one-step errors over all frames and columns, and its
    /// parameter gradient.
    fn loss_and_gradient(&self, frames: &[DMatrix<T>]) -> Result<(T, Vec<T>)>;
    /// Free-running predictions of the `n` frames following `history`.
    fn forecast(&self, history: &[DMatrix<T>], n: usize) -> Result<Vec<DMatrix<T>>>;
    fn header(&self) -> Header;
}

/// Layer sizes and step length of the three architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Hidden widths of the vector-field MLP.
    pub hidden: Vec<usize>,
    pub h: f64,
    pub lstm_dense: usize,
    pub lstm_units: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            h: 1.0,
            lstm_dense: 210,
            lstm_units: 10,
        }
    }
}

impl NetworkConfig {
    pub fn mlp_sizes(&self, bands: usize) -> Vec<usize> {
        let mut sizes = vec![bands];
        sizes.extend(&self.hidden);
        sizes.push(bands);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network<T: Real> {
    Lstm(LstmNet<T>),
    Euler(EulerNet<T>),
    Rk4(Rk4Net<T>),
}

impl<T: Real> Network<T> {
    pub fn new<R: Rng + ?Sized>(
        arch: Architecture,
        bands: usize,
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match arch {
            Architecture::Lstm => Network::Lstm(LstmNet::new(bands, cfg.lstm_dense, cfg.lstm_units, rng)?),
            Architecture::Euler => {
                Network::Euler(EulerNet::new(MlpBlock::new(&cfg.mlp_sizes(bands), rng)?, lit(cfg.h))?)
            }
            Architecture::Rk4 => {
                Network::Rk4(Rk4Net::new(MlpBlock::new(&cfg.mlp_sizes(bands), rng)?, lit(cfg.h))?)
            }
        })
    }

    fn inner(&self) -> &dyn LearnedDynamics<T> {
        match self {
            Network::Lstm(n) => n,
            Network::Euler(n) => n,
            Network::Rk4(n) => n,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn LearnedDynamics<T> {
        match self {
            Network::Lstm(n) => n,
            Network::Euler(n) => n,
            Network::Rk4(n) => n,
        }
    }
}

impl<T: Real> LearnedDynamics<T> for Network<T> {
    fn architecture(&self) -> Architecture {
        self.inner().architecture()
    }
    fn bands(&self) -> usize {
        self.inner().bands()
    }
    fn num_params(&self) -> usize {
        self.inner().num_params()
    }
    fn params(&self) -> Vec<T> {
        self.inner().params()
    }
    fn set_params(&mut self, params: &[T]) -> Result<()> {
        self.inner_mut().set_params(params)
    }
    fn param_layout(&self) -> Vec<(String, usize, usize)> {
        self.inner().param_layout()
    }
    fn teacher_forced(&self, frames: &[DMatrix<T>]) -> Result<Vec<DMatrix<T>>> {
        self.inner().teacher_forced(frames)
    }
    fn loss_and_gradient(&self, frames: &[DMatrix<T>]) -> Result<(T, Vec<T>)> {
        self.inner().loss_and_gradient(frames)
    }
    fn forecast(&self, history: &[DMatrix<T>], n: usize) -> Result<Vec<DMatrix<T>>> {
        self.inner().forecast(history, n)
    }
    fn header(&self) -> Header {
        self.inner().header()
    }
}

/// Endmember frames of a series as `L x P` matrices.
pub fn series_frames<T: Real>(series: &SpectralSeries<T>) -> Vec<DMatrix<T>> {
    series.frames().iter().map(|f| f.matrix().clone()).collect()
}

pub(crate) fn check_frames<T: Real>(frames: &[DMatrix<T>], bands: usize, min_len: usize) -> Result<()> {
    if frames.len() < min_len {
        return Err(Error::Shape(format!("need at least {min_len} frames, got {}", frames.len())));
    }
    let width = frames[0].ncols();
    for (t, f) in frames.iter().enumerate() {
        if f.nrows() != bands || f.ncols() != width || width == 0 {
            return Err(Error::Shape(format!(
                "frame {t} is {}x{}, expected {bands}x{width}",
                f.nrows(),
                f.ncols()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("frame {t}")));
        }
    }
    Ok(())
}

pub(crate) fn hstack<T: Real>(frames: &[DMatrix<T>]) -> DMatrix<T> {
    let (rows, width) = frames[0].shape();
    let mut out = DMatrix::zeros(rows, width * frames.len());
    for (t, f) in frames.iter().enumerate() {
        out.columns_mut(t * width, width).copy_from(f);
    }
    out
}

pub(crate) fn split_columns<T: Real>(m: &DMatrix<T>, width: usize) -> Vec<DMatrix<T>> {
    (0..m.ncols() / width)
        .map(|t| m.columns(t * width, width).into_owned())
        .collect()
}
