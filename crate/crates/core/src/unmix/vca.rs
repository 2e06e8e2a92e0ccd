//! Vertex component analysis.
//!
//! Pixels are projected onto a signal subspace (projectively when the
//! estimated SNR is high, affinely through the mean otherwise), then extreme
//! pixels are found one at a time by maximising a random direction orthogonal
//! to the endmembers already selected.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::EndmemberMatrix;
use crate::scalar::{lit, to_f64, Real};

/// Which subspace projection the SNR rule selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Projection {
    /// `P`-dimensional projective projection (high SNR).
    Projective,
    /// `P-1`-dimensional affine projection through the data mean (low SNR).
    Affine,
}

/// Selected pixels and diagnostics of one VCA run.
#[derive(Debug, Clone)]
pub struct VcaOutput<T: Real> {
    pub endmembers: EndmemberMatrix<T>,
    /// Column indices of the selected pixels.
    pub indices: Vec<usize>,
    pub snr_estimate_db: f64,
    pub projection: Projection,
}

/// Eigenvectors of a symmetric matrix sorted by decreasing eigenvalue.
fn sorted_eigen<T: Real>(m: DMatrix<T>) -> (Vec<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// Removes from `w` its component in the span of `basis` (modified Gram-Schmidt).
fn project_out<T: Real>(w: &DVector<T>, basis: &[DVector<T>]) -> DVector<T> {
    let mut ortho: Vec<DVector<T>> = Vec::with_capacity(basis.len());
    for b in basis {
        let mut q = b.clone();
        for o in &ortho {
            let c = o.dot(&q);
            q -= o * c;
        }
        let n = q.norm();
        if n > lit::<T>(1e-12) * b.norm().max(T::one()) {
            ortho.push(q / n);
        }
    }
    let mut f = w.clone();
    for o in &ortho {
        let c = o.dot(&f);
        f -= o * c;
    }
    f
}

/// Extracts `p` endmembers from an `L x N` frame. Returned columns are pixels of the frame.
pub fn vca_extract<T: Real, R: Rng + ?Sized>(
    frame: &DMatrix<T>,
    p: usize,
    rng: &mut R,
) -> Result<EndmemberMatrix<T>> {
    Ok(vca(frame, p, rng)?.endmembers)
}

/// [`vca_extract`] with the selected indices and SNR diagnostics.
pub fn vca<T: Real, R: Rng + ?Sized>(
    frame: &DMatrix<T>,
    p: usize,
    rng: &mut R,
) -> Result<VcaOutput<T>> {
    let (l, n) = frame.shape();
    if p == 0 {
        return Err(Error::InvalidParameter("VCA needs at least one endmember".into()));
    }
    if n < p {
        return Err(Error::Shape(format!("{n} pixels cannot hold {p} endmembers")));
    }
    if p > l {
        return Err(Error::Shape(format!("{p} endmembers exceed {l} bands")));
    }
    if frame.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("VCA input frame".into()));
    }
    let inv_n: T = lit(1.0 / n as f64);

    let mean = frame.column_mean();
    let centered = DMatrix::from_fn(l, n, |i, j| frame[(i, j)] - mean[i]);
    let (cov_vals, cov_vecs) = sorted_eigen(&centered * centered.transpose() * inv_n);
    let top = cov_vals[0].max(T::zero());
    let rank = cov_vals
        .iter()
        .filter(|v| **v > top * lit(1e-10) && **v > T::zero())
        .count();
    if rank + 1 < p {
        return Err(Error::Degenerate(format!(
            "data spans an affine subspace of dimension {rank}, {p} endmembers need {}",
            p - 1
        )));
    }

    // SNR estimate from the (p)-dimensional centred projection.
    let ud = cov_vecs.columns(0, p).into_owned();
    let xp = ud.transpose() * &centered;
    let py = to_f64(frame.norm_squared() * inv_n);
    let px = to_f64(xp.norm_squared() * inv_n + mean.norm_squared());
    let num = px - p as f64 / l as f64 * py;
    let den = py - px;
    let snr_estimate_db = if den <= 0.0 {
        f64::INFINITY
    } else if num <= 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * (num / den).log10()
    };
    let snr_threshold = 15.0 + 10.0 * (p as f64).log10();

    if p == 1 {
        let (_, vecs) = sorted_eigen(frame * frame.transpose() * inv_n);
        let proj = vecs.column(0).transpose() * frame;
        let k = argmax_abs(proj.iter().copied());
        return Ok(VcaOutput {
            endmembers: EndmemberMatrix::new(frame.columns(k, 1).into_owned())?,
            indices: vec![k],
            snr_estimate_db,
            projection: Projection::Projective,
        });
    }

    let (y, projection) = if snr_estimate_db > snr_threshold {
        let (_, vecs) = sorted_eigen(frame * frame.transpose() * inv_n);
        let ud = vecs.columns(0, p).into_owned();
        let x = ud.transpose() * frame;
        let u = x.column_mean();
        let scale = u.transpose() * &x;
        let mut y = x;
        for (j, mut col) in y.column_iter_mut().enumerate() {
            let s = scale[j];
            if s != T::zero() {
                col /= s;
            }
        }
        (y, Projection::Projective)
    } else {
        let ud = cov_vecs.columns(0, p - 1).into_owned();
        let x = ud.transpose() * &centered;
        let c = x
            .column_iter()
            .map(|col| col.norm())
            .fold(T::zero(), |a, b| a.max(b));
        let y = DMatrix::from_fn(p, n, |i, j| if i < p - 1 { x[(i, j)] } else { c });
        (y, Projection::Affine)
    };

    let mut e_last = DVector::zeros(p);
    e_last[p - 1] = T::one();
    let mut selected: Vec<DVector<T>> = vec![e_last];
    let mut indices = Vec::with_capacity(p);
    for i in 0..p {
        let basis: &[DVector<T>] = if i == 0 { &selected[..1] } else { &selected[1..] };
        let mut f = DVector::zeros(p);
        for _ in 0..16 {
            let w = DVector::from_fn(p, |_, _| {
                lit::<T>(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            });
            f = project_out(&w, basis);
            if f.norm() > lit(1e-12) {
                break;
            }
        }
        let norm = f.norm();
        if norm == T::zero() {
            return Err(Error::Degenerate("no direction orthogonal to selected endmembers".into()));
        }
        f /= norm;
        let v = f.transpose() * &y;
        let k = argmax_abs(v.iter().copied());
        indices.push(k);
        selected.push(y.column(k).into_owned());
    }

    let endmembers = DMatrix::from_fn(l, p, |r, c| frame[(r, indices[c])]);
    Ok(VcaOutput {
        endmembers: EndmemberMatrix::new(endmembers)?,
        indices,
        snr_estimate_db,
        projection,
    })
}

fn argmax_abs<T: Real>(values: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = -T::one();
    for (i, v) in values.enumerate() {
        if v.abs() > best_v {
            best = i;
            best_v = v.abs();
        }
    }
    best
}
