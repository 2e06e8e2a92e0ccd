//! Fully constrained least squares: `min |y - S a|^2` s.t. `a >= 0`, `sum(a) = 1`.
//!
//! Primal active-set method on the normal equations with the sum-to-one
//! constraint kept as an equality in every subproblem. Pixels are solved
//! independently and in parallel.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{AbundanceMatrix, EndmemberMatrix};
use crate::scalar::{lit, to_f64, Real};

/// Precomputed Gram matrix for repeated per-pixel solves against one endmember set.
#[derive(Debug, Clone)]
pub struct FclsSolver<T: Real> {
    endmembers: DMatrix<T>,
    gram: DMatrix<T>,
    tol: T,
    max_iter: usize,
}

impl<T: Real> FclsSolver<T> {
    pub fn new(endmembers: &EndmemberMatrix<T>) -> Result<Self> {
        let s = endmembers.matrix();
        let p = s.ncols();
        if p > s.nrows() {
            return Err(Error::RankDeficient {
                condition: f64::INFINITY,
            });
        }
        let sv = s.clone().singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let condition = if smin > T::zero() {
            to_f64(smax / smin)
        } else {
            f64::INFINITY
        };
        let limit = 1.0 / (1e3 * to_f64(T::default_epsilon()));
        if !(condition < limit) {
            return Err(Error::RankDeficient { condition });
        }
        let gram = s.transpose() * s;
        let tol = lit::<T>(1e-12) * gram.amax().max(T::one());
        Ok(Self {
            endmembers: s.clone(),
            gram,
            tol,
            max_iter: 10 * p,
        })
    }

    pub fn endmembers(&self) -> usize {
        self.gram.nrows()
    }

    /// Abundances of a single pixel.
    pub fn solve_pixel(&self, y: &DVector<T>) -> DVector<T> {
        let g = self.endmembers.transpose() * y;
        solve_simplex_qp(&self.gram, &g, self.tol, self.max_iter)
    }

    /// Abundances of every column of `frame`.
    pub fn solve(&self, frame: &DMatrix<T>) -> Result<AbundanceMatrix<T>> {
        if frame.nrows() != self.endmembers.nrows() {
            return Err(Error::Shape(format!(
                "frame has {} bands, endmembers {}",
                frame.nrows(),
                self.endmembers.nrows()
            )));
        }
        let p = self.endmembers();
        let g_all = self.endmembers.transpose() * frame;
        let cols: Vec<DVector<T>> = (0..frame.ncols())
            .into_par_iter()
            .map(|j| {
                let g = g_all.column(j).into_owned();
                solve_simplex_qp(&self.gram, &g, self.tol, self.max_iter)
            })
            .collect();
        let m = DMatrix::from_fn(p, cols.len(), |i, j| cols[j][i]);
        AbundanceMatrix::new(m)
    }
}

/// Per-pixel fully constrained abundances of `frame` given endmembers `s`.
pub fn fcls_abundances<T: Real>(
    frame: &DMatrix<T>,
    s: &EndmemberMatrix<T>,
) -> Result<AbundanceMatrix<T>> {
    FclsSolver::new(s)?.solve(frame)
}

/// Solves the equality-constrained subproblem on `free`; returns the full
/// vector (zeros off `free`) and the multiplier of the sum constraint.
fn solve_on_support<T: Real>(h: &DMatrix<T>, g: &DVector<T>, free: &[usize]) -> Option<(DVector<T>, T)> {
    let k = free.len();
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = h[(i, j)];
        }
        kkt[(a, k)] = T::one();
        kkt[(k, a)] = T::one();
        rhs[a] = g[i];
    }
    rhs[k] = T::one();
    let sol = kkt.lu().solve(&rhs)?;
    let mut full = DVector::zeros(h.nrows());
    for (a, &i) in free.iter().enumerate() {
        full[i] = sol[a];
    }
    Some((full, sol[k]))
}

/// `min 1/2 a'Ha - g'a` over the probability simplex.
pub(crate) fn solve_simplex_qp<T: Real>(
    h: &DMatrix<T>,
    g: &DVector<T>,
    tol: T,
    max_iter: usize,
) -> DVector<T> {
    let p = h.nrows();
    let mut a = DVector::from_element(p, T::one() / lit(p as f64));
    let mut free: Vec<usize> = (0..p).collect();
    for _ in 0..max_iter.max(1) {
        let Some((z, nu)) = solve_on_support(h, g, &free) else {
            break;
        };
        let blocking = free
            .iter()
            .copied()
            .filter(|&i| z[i] < T::zero())
            .map(|i| (i, a[i] / (a[i] - z[i])))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal));
        match blocking {
            None => {
                a = z;
                let grad = h * &a - g;
                let worst = (0..p)
                    .filter(|i| !free.contains(i))
                    .map(|i| (i, grad[i] + nu))
                    .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(std::cmp::Ordering::Equal));
                match worst {
                    Some((i, mult)) if mult < -tol => {
                        free.push(i);
                        free.sort_unstable();
                    }
                    _ => break,
                }
            }
            Some((i, step)) => {
                a = &a + (&z - &a) * step;
                a[i] = T::zero();
                free.retain(|&j| j != i);
                for &j in &free {
                    if a[j] < T::zero() {
                        a[j] = T::zero();
                    }
                }
            }
        }
    }
    for v in a.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let s = a.sum();
    a / s
}
