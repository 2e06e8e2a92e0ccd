//! Per-frame unmixing baselines and evaluation metrics.

mod align;
mod fcls;
mod vca;

pub use align::{align_endmembers, angle_cost, hungarian, AlignmentMap};
pub use fcls::{fcls_abundances, FclsSolver};
pub use vca::{vca, vca_extract, Projection, VcaOutput};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::{vector_rmse, SpectralSeries};
use crate::scalar::Real;

/// Per-frame RMSE of endmember `p`. With `mean`, both spectra have it
/// subtracted first so the error is that of the variable part.
pub fn trajectory_rmse<T: Real>(
    estimate: &SpectralSeries<T>,
    truth: &SpectralSeries<T>,
    p: usize,
    mean: Option<&DVector<T>>,
) -> Result<Vec<T>> {
    if estimate.len() != truth.len()
        || estimate.bands() != truth.bands()
        || estimate.endmembers() != truth.endmembers()
    {
        return Err(Error::Shape(format!(
            "estimate {}x{}x{} vs truth {}x{}x{}",
            estimate.len(),
            estimate.bands(),
            estimate.endmembers(),
            truth.len(),
            truth.bands(),
            truth.endmembers()
        )));
    }
    if p >= truth.endmembers() {
        return Err(Error::Shape(format!("endmember {p} out of range")));
    }
    if let Some(m) = mean {
        if m.len() != truth.bands() {
            return Err(Error::Shape("mean spectrum length differs from band count".into()));
        }
    }
    estimate
        .trajectory(p)
        .iter()
        .zip(truth.trajectory(p))
        .map(|(e, t)| match mean {
            Some(m) => vector_rmse(&(e - m), &(t - m)),
            None => vector_rmse(e, &t),
        })
        .collect()
}
