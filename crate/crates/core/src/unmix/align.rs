//! Cross-frame endmember alignment by minimum-cost assignment.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::model::{spectral_angle, SpectralSeries};
use crate::scalar::{to_f64, Real};

/// Per-frame column permutations: aligned column `i` of frame `t` is original
/// column `perms[t][i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentMap {
    pub perms: Vec<Vec<usize>>,
}

impl AlignmentMap {
    pub fn is_identity(&self) -> bool {
        self.perms
            .iter()
            .all(|p| p.iter().enumerate().all(|(i, &j)| i == j))
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian method
/// with row/column potentials, `O(n^3)`). Returns `assignment[row] = col`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials; column 0 is a virtual sink.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Spectral-angle cost between the columns of two endmember matrices.
pub fn angle_cost<T: Real>(reference: &DMatrix<T>, candidate: &DMatrix<T>) -> DMatrix<f64> {
    DMatrix::from_fn(reference.ncols(), candidate.ncols(), |i, j| {
        to_f64(spectral_angle(
            &reference.column(i).into_owned(),
            &candidate.column(j).into_owned(),
        ))
    })
}

/// Aligns every frame to the previously aligned one, starting from frame 0.
pub fn align_endmembers<T: Real>(
    series: &SpectralSeries<T>,
) -> Result<(SpectralSeries<T>, AlignmentMap)> {
    let p = series.endmembers();
    let mut frames = Vec::with_capacity(series.len());
    let mut perms = Vec::with_capacity(series.len());
    for (t, frame) in series.frames().iter().enumerate() {
        if t == 0 {
            frames.push(frame.clone());
            perms.push((0..p).collect());
            continue;
        }
        let prev: &crate::model::EndmemberMatrix<T> = &frames[t - 1];
        let perm = hungarian(&angle_cost(prev.matrix(), frame.matrix()));
        frames.push(frame.permuted(&perm));
        perms.push(perm);
    }
    Ok((
        SpectralSeries::new(frames, series.timestamps().to_vec())?,
        AlignmentMap { perms },
    ))
}
