//! Domain types and the dynamical-system interface.
//!
//! Endmember spectra are the state of the system. A [`Dynamics`] value is the
//! discrete flow over one frame interval together with its adjoint, exposed
//! as a vector-Jacobian product so that trajectories over hundreds of bands
//! never materialise a Jacobian.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

fn check_finite<'a, T: Real>(values: impl IntoIterator<Item = &'a T>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Reflectance spectrum of one material, one value per band.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T: Real> {
    values: DVector<T>,
}

impl<T: Real> Spectrum<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        Self::from_vector(DVector::from_vec(values))
    }

    pub fn from_vector(values: DVector<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("spectrum must have at least one band".into()));
        }
        check_finite(values.iter(), "spectrum")?;
        Ok(Self { values })
    }

    pub fn values(&self) -> &DVector<T> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_inner(self) -> DVector<T> {
        self.values
    }
}

/// Endmember signatures of one frame, stored column-wise (`L x P`).
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberMatrix<T: Real> {
    matrix: DMatrix<T>,
}

impl<T: Real> EndmemberMatrix<T> {
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        if matrix.nrows() == 0 || matrix.ncols() == 0 {
            return Err(Error::Shape(format!(
                "endmember matrix must be non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        check_finite(matrix.iter(), "endmember matrix")?;
        Ok(Self { matrix })
    }

    pub fn from_spectra(spectra: &[Spectrum<T>]) -> Result<Self> {
        let first = spectra
            .first()
            .ok_or_else(|| Error::Shape("no spectra supplied".into()))?;
        let bands = first.len();
        if let Some(bad) = spectra.iter().find(|s| s.len() != bands) {
            return Err(Error::Shape(format!(
                "spectrum with {} bands among spectra with {bands}",
                bad.len()
            )));
        }
        let matrix = DMatrix::from_fn(bands, spectra.len(), |l, p| spectra[p].values[l]);
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn into_inner(self) -> DMatrix<T> {
        self.matrix
    }

    pub fn bands(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn endmembers(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn column(&self, p: usize) -> Spectrum<T> {
        Spectrum {
            values: self.matrix.column(p).into_owned(),
        }
    }

    /// Returns a copy with columns reordered so that new column `i` is old column `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let matrix = DMatrix::from_fn(self.bands(), perm.len(), |l, i| self.matrix[(l, perm[i])]);
        Self { matrix }
    }
}

/// Time-indexed sequence of endmember matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSeries<T: Real> {
    frames: Vec<EndmemberMatrix<T>>,
    timestamps: Vec<T>,
}

impl<T: Real> SpectralSeries<T> {
    pub fn new(frames: Vec<EndmemberMatrix<T>>, timestamps: Vec<T>) -> Result<Self> {
        if frames.len() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if let Some(first) = frames.first() {
            let shape = (first.bands(), first.endmembers());
            if let Some(t) = frames
                .iter()
                .position(|f| (f.bands(), f.endmembers()) != shape)
            {
                return Err(Error::Shape(format!("frame {t} differs in shape from frame 0")));
            }
        }
        check_finite(timestamps.iter(), "timestamps")?;
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParameter(
                "timestamps must be strictly increasing".into(),
            ));
        }
        Ok(Self { frames, timestamps })
    }

    /// Series sampled at integer frame indices `0..frames.len()`.
    pub fn with_frame_index(frames: Vec<EndmemberMatrix<T>>) -> Result<Self> {
        let ts = (0..frames.len()).map(|t| lit::<T>(t as f64)).collect();
        Self::new(frames, ts)
    }

    pub fn frames(&self) -> &[EndmemberMatrix<T>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &EndmemberMatrix<T> {
        &self.frames[t]
    }

    pub fn timestamps(&self) -> &[T] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.frames.first().map_or(0, |f| f.bands())
    }

    pub fn endmembers(&self) -> usize {
        self.frames.first().map_or(0, |f| f.endmembers())
    }

    /// Spectra of endmember `p` over time.
    pub fn trajectory(&self, p: usize) -> Vec<DVector<T>> {
        self.frames
            .iter()
            .map(|f| f.matrix.column(p).into_owned())
            .collect()
    }

    /// Frames `range` as a new series.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            frames: self.frames[range.clone()].to_vec(),
            timestamps: self.timestamps[range].to_vec(),
        }
    }
}

/// Abundance proportions, `P x N`, each column on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix<T: Real> {
    matrix: DMatrix<T>,
}

impl<T: Real> AbundanceMatrix<T> {
    /// Validates nonnegativity (down to `-1e-12`) and unit column sums.
    pub fn new(matrix: DMatrix<T>) -> Result<Self> {
        if matrix.nrows() == 0 {
            return Err(Error::Shape("abundance matrix needs at least one endmember".into()));
        }
        check_finite(matrix.iter(), "abundance matrix")?;
        let neg_floor = -lit::<T>(1e-12);
        let tol = T::simplex_tol();
        for (j, col) in matrix.column_iter().enumerate() {
            if let Some(v) = col.iter().find(|v| **v < neg_floor) {
                return Err(Error::Simplex {
                    column: j,
                    reason: format!("negative entry {v}"),
                });
            }
            let sum = col.sum();
            if (sum - T::one()).abs() > tol {
                return Err(Error::Simplex {
                    column: j,
                    reason: format!("column sums to {sum}"),
                });
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn endmembers(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.matrix.ncols()
    }

    /// Reorders rows so that new row `i` is old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let matrix = DMatrix::from_fn(perm.len(), self.pixels(), |i, n| self.matrix[(perm[i], n)]);
        Self { matrix }
    }
}

/// Observed image time series: `T` frames of `L x N` reflectance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence<T: Real> {
    frames: Vec<DMatrix<T>>,
    noise_sigma: Vec<T>,
    timestamps: Vec<T>,
}

impl<T: Real> ImageSequence<T> {
    pub fn new(frames: Vec<DMatrix<T>>, noise_sigma: Vec<T>, timestamps: Vec<T>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Shape("image sequence needs at least one frame".into()));
        }
        if frames.len() != noise_sigma.len() || frames.len() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} frames, {} noise levels, {} timestamps",
                frames.len(),
                noise_sigma.len(),
                timestamps.len()
            )));
        }
        let shape = frames[0].shape();
        if let Some(t) = frames.iter().position(|f| f.shape() != shape) {
            return Err(Error::Shape(format!("frame {t} differs in shape from frame 0")));
        }
        for f in &frames {
            check_finite(f.iter(), "image frame")?;
        }
        Ok(Self {
            frames,
            noise_sigma,
            timestamps,
        })
    }

    pub fn frames(&self) -> &[DMatrix<T>] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &DMatrix<T> {
        &self.frames[t]
    }

    pub fn noise_sigma(&self) -> &[T] {
        &self.noise_sigma
    }

    pub fn timestamps(&self) -> &[T] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn bands(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn pixels(&self) -> usize {
        self.frames[0].ncols()
    }
}

/// Position and velocity of one endmember spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState<T: Real> {
    pub position: DVector<T>,
    pub velocity: DVector<T>,
}

impl<T: Real> AugmentedState<T> {
    pub fn new(position: DVector<T>, velocity: DVector<T>) -> Result<Self> {
        if position.len() != velocity.len() {
            return Err(Error::Shape(format!(
                "position has {} bands, velocity {}",
                position.len(),
                velocity.len()
            )));
        }
        Ok(Self { position, velocity })
    }

    pub fn at_rest(position: DVector<T>) -> Self {
        let velocity = DVector::zeros(position.len());
        Self { position, velocity }
    }

    pub fn bands(&self) -> usize {
        self.position.len()
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().chain(self.velocity.iter()).all(|v| v.is_finite())
    }

    /// Flat `[position; velocity]` layout used by [`Dynamics`].
    pub fn to_vector(&self) -> DVector<T> {
        let l = self.bands();
        DVector::from_fn(2 * l, |i, _| {
            if i < l {
                self.position[i]
            } else {
                self.velocity[i - l]
            }
        })
    }

    pub fn from_vector(v: &DVector<T>) -> Result<Self> {
        if v.len() % 2 != 0 {
            return Err(Error::Shape(format!("augmented state of odd length {}", v.len())));
        }
        let l = v.len() / 2;
        Ok(Self {
            position: v.rows(0, l).into_owned(),
            velocity: v.rows(l, l).into_owned(),
        })
    }
}

/// Discrete flow over one frame interval, with its adjoint.
///
/// States are flat vectors whose first `bands` entries are the observed
/// spectrum; any remaining entries are unobserved (e.g. velocities).
pub trait Dynamics<T: Real> {
    /// Length of the state vector for a spectrum with `bands` bands.
    fn state_len(&self, bands: usize) -> usize;

    fn step(&self, state: &DVector<T>) -> Result<DVector<T>>;

    /// `J(state)^T cotangent`, with `J` the Jacobian of [`Dynamics::step`].
    fn jacobian_transpose_apply(&self, state: &DVector<T>, cotangent: &DVector<T>)
        -> Result<DVector<T>>;

    fn descriptor(&self) -> String;
}

/// Dynamics that act linearly and identically on every band: the state is
/// laid out as `components` blocks of `bands` entries and each band evolves
/// by the same small matrix.
pub trait BandwiseLinear<T: Real>: Dynamics<T> {
    fn components(&self) -> usize;

    /// `components x components` one-step matrix.
    fn band_matrix(&self) -> DMatrix<T>;
}

fn apply_bandwise<T: Real>(m: &DMatrix<T>, state: &DVector<T>) -> Result<DVector<T>> {
    let d = m.nrows();
    if state.len() % d != 0 {
        return Err(Error::Shape(format!(
            "state length {} is not a multiple of {d} components",
            state.len()
        )));
    }
    check_finite(state.iter(), "dynamics state")?;
    let l = state.len() / d;
    let mut out = DVector::zeros(state.len());
    for band in 0..l {
        for i in 0..d {
            let mut acc = T::zero();
            for j in 0..d {
                acc += m[(i, j)] * state[j * l + band];
            }
            out[i * l + band] = acc;
        }
    }
    Ok(out)
}

/// Second-order linear dynamics `d/dt [s, s'] = [[0, 1], [beta, 0]] [s, s']`
/// integrated exactly over `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSecondOrder<T: Real> {
    pub beta: T,
    pub dt: T,
}

impl<T: Real> LinearSecondOrder<T> {
    pub fn new(beta: T, dt: T) -> Result<Self> {
        if !beta.is_finite() || !dt.is_finite() || dt < T::zero() {
            return Err(Error::InvalidParameter(format!(
                "second-order dynamics needs finite beta and dt >= 0 (beta={beta}, dt={dt})"
            )));
        }
        Ok(Self { beta, dt })
    }

    /// `exp(dt * [[0, 1], [beta, 0]])` as `[[a, b], [c, d]]`.
    pub fn propagator(&self) -> [[T; 2]; 2] {
        propagator(self.beta, self.dt)
    }
}

fn propagator<T: Real>(beta: T, dt: T) -> [[T; 2]; 2] {
    if beta < T::zero() {
        let w = (-beta).sqrt();
        let (s, c) = (w * dt).sin_cos();
        [[c, s / w], [-w * s, c]]
    } else if beta > T::zero() {
        let w = beta.sqrt();
        let (sh, ch) = ((w * dt).sinh(), (w * dt).cosh());
        [[ch, sh / w], [w * sh, ch]]
    } else {
        [[T::one(), dt], [T::zero(), T::one()]]
    }
}

impl<T: Real> Dynamics<T> for LinearSecondOrder<T> {
    fn state_len(&self, bands: usize) -> usize {
        2 * bands
    }

    fn step(&self, state: &DVector<T>) -> Result<DVector<T>> {
        apply_bandwise(&self.band_matrix(), state)
    }

    fn jacobian_transpose_apply(
        &self,
        state: &DVector<T>,
        cotangent: &DVector<T>,
    ) -> Result<DVector<T>> {
        if state.len() != cotangent.len() {
            return Err(Error::Shape("cotangent length differs from state".into()));
        }
        apply_bandwise(&self.band_matrix().transpose(), cotangent)
    }

    fn descriptor(&self) -> String {
        format!("linear-second-order(beta={}, dt={})", self.beta, self.dt)
    }
}

impl<T: Real> BandwiseLinear<T> for LinearSecondOrder<T> {
    fn components(&self) -> usize {
        2
    }

    fn band_matrix(&self) -> DMatrix<T> {
        let m = self.propagator();
        DMatrix::from_row_slice(2, 2, &[m[0][0], m[0][1], m[1][0], m[1][1]])
    }
}

/// The identity flow: spectra do not change between frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentityDynamics;

impl<T: Real> Dynamics<T> for IdentityDynamics {
    fn state_len(&self, bands: usize) -> usize {
        bands
    }

    fn step(&self, state: &DVector<T>) -> Result<DVector<T>> {
        check_finite(state.iter(), "dynamics state")?;
        Ok(state.clone())
    }

    fn jacobian_transpose_apply(
        &self,
        _state: &DVector<T>,
        cotangent: &DVector<T>,
    ) -> Result<DVector<T>> {
        Ok(cotangent.clone())
    }

    fn descriptor(&self) -> String {
        "identity".into()
    }
}

impl<T: Real> BandwiseLinear<T> for IdentityDynamics {
    fn components(&self) -> usize {
        1
    }

    fn band_matrix(&self) -> DMatrix<T> {
        DMatrix::identity(1, 1)
    }
}

/// Advances `state` by `dt` under `d/dt [s, s'] = [[0, 1], [beta, 0]] [s, s']`,
/// independently in every band.
pub fn linear_second_order_step<T: Real>(
    state: &AugmentedState<T>,
    beta: T,
    dt: T,
) -> Result<AugmentedState<T>> {
    if !state.is_finite() {
        return Err(Error::NonFinite("augmented state".into()));
    }
    let dyn_ = LinearSecondOrder::new(beta, dt)?;
    let m = dyn_.propagator();
    let position = &state.position * m[0][0] + &state.velocity * m[0][1];
    let velocity = &state.position * m[1][0] + &state.velocity * m[1][1];
    AugmentedState::new(position, velocity)
}

/// Band-averaged root mean squared error, `|estimate - truth|_2 / sqrt(L)`.
pub fn spectral_rmse<T: Real>(estimate: &Spectrum<T>, truth: &Spectrum<T>) -> Result<T> {
    vector_rmse(estimate.values(), truth.values())
}

/// Root-mean-square difference of two equal-length vectors.
pub fn vector_rmse<T: Real>(a: &DVector<T>, b: &DVector<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "spectra of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let l: T = lit(a.len() as f64);
    Ok((a - b).norm() / l.sqrt())
}

/// Angle between two spectra in radians; brightness invariant.
pub fn spectral_angle<T: Real>(a: &DVector<T>, b: &DVector<T>) -> T {
    let denom = a.norm() * b.norm();
    if denom == T::zero() {
        return T::frac_pi_2();
    }
    let c = a.dot(b) / denom;
    let c = if c > T::one() {
        T::one()
    } else if c < -T::one() {
        -T::one()
    } else {
        c
    };
    c.acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn state(p: &[f64], v: &[f64]) -> AugmentedState<f64> {
        AugmentedState::new(DVector::from_row_slice(p), DVector::from_row_slice(v)).unwrap()
    }

    /// Fine explicit Euler on the first-order system, independent of the closed form.
    fn euler_oracle(p: f64, v: f64, beta: f64, dt: f64, h: f64) -> (f64, f64) {
        let n = (dt / h).round() as usize;
        let h = dt / n as f64;
        let (mut x, mut y) = (p, v);
        for _ in 0..n {
            let (nx, ny) = (x + h * y, y + h * beta * x);
            x = nx;
            y = ny;
        }
        (x, y)
    }

    #[test]
    fn quarter_period_rotation() {
        let out = linear_second_order_step(
            &state(&[1.0], &[0.0]),
            -1.0,
            std::f64::consts::FRAC_PI_2,
        )
        .unwrap();
        assert_abs_diff_eq!(out.position[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.velocity[0], -1.0, epsilon = 1e-12);
        let (x, y) = euler_oracle(1.0, 0.0, -1.0, std::f64::consts::FRAC_PI_2, 1e-5);
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-4);
        assert_abs_diff_eq!(y, -1.0, epsilon = 1e-4);
    }

    #[test]
    fn zero_dt_is_identity() {
        for beta in [-3.0, -0.1, 0.0, 2.0] {
            let s = state(&[0.3, -1.2], &[0.7, 0.1]);
            assert_eq!(linear_second_order_step(&s, beta, 0.0).unwrap(), s);
        }
    }

    #[test]
    fn default_beta_unit_step() {
        let out = linear_second_order_step(&state(&[1.0], &[0.0]), -0.1, 1.0).unwrap();
        let w = 0.1f64.sqrt();
        assert_abs_diff_eq!(out.position[0], w.cos(), epsilon = 1e-15);
        assert_abs_diff_eq!(out.position[0], 0.950415, epsilon = 1e-6);
        assert_abs_diff_eq!(out.velocity[0], -w * w.sin(), epsilon = 1e-15);
        let (x, y) = euler_oracle(1.0, 0.0, -0.1, 1.0, 1e-5);
        assert_abs_diff_eq!(out.position[0], x, epsilon = 1e-5);
        assert_abs_diff_eq!(out.velocity[0], y, epsilon = 1e-5);
    }

    #[test]
    fn zero_beta_is_ballistic() {
        let out = linear_second_order_step(&state(&[1.0, 2.0], &[0.5, -1.0]), 0.0, 2.0).unwrap();
        assert_eq!(out.position.as_slice(), &[2.0, 0.0]);
        assert_eq!(out.velocity.as_slice(), &[0.5, -1.0]);
        // Continuity from both sides of beta = 0.
        for beta in [-1e-10, 1e-10] {
            let near = linear_second_order_step(&state(&[1.0], &[0.5]), beta, 2.0).unwrap();
            assert_abs_diff_eq!(near.position[0], 2.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn positive_beta_matches_euler_oracle() {
        let out = linear_second_order_step(&state(&[0.4], &[-0.2]), 0.5, 0.8).unwrap();
        let (x, y) = euler_oracle(0.4, -0.2, 0.5, 0.8, 1e-6);
        assert_abs_diff_eq!(out.position[0], x, epsilon = 1e-5);
        assert_abs_diff_eq!(out.velocity[0], y, epsilon = 1e-5);
    }

    #[test]
    fn non_finite_state_rejected() {
        let s = state(&[f64::NAN], &[0.0]);
        assert!(linear_second_order_step(&s, -0.1, 1.0).is_err());
        assert!(AugmentedState::new(DVector::zeros(2), DVector::<f64>::zeros(3)).is_err());
    }

    #[test]
    fn single_precision_step() {
        let s = AugmentedState::<f32>::new(DVector::from_row_slice(&[1.0]), DVector::from_row_slice(&[0.0]))
            .unwrap();
        let out = linear_second_order_step(&s, -0.1f32, 1.0).unwrap();
        assert!((out.position[0] - 0.1f32.sqrt().cos()).abs() < 1e-6);
    }

    #[test]
    fn rmse_examples() {
        let z = Spectrum::new(vec![0.0; 7]).unwrap();
        let o = Spectrum::new(vec![1.0; 7]).unwrap();
        assert_eq!(spectral_rmse(&z, &z).unwrap(), 0.0);
        assert_abs_diff_eq!(spectral_rmse(&o, &z).unwrap(), 1.0, epsilon = 1e-15);
        let a = Spectrum::new(vec![3.0, 4.0]).unwrap();
        let b = Spectrum::new(vec![0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(spectral_rmse(&a, &b).unwrap(), 5.0 / 2f64.sqrt(), epsilon = 1e-14);
        assert_abs_diff_eq!(spectral_rmse(&a, &b).unwrap(), 3.5355, epsilon = 1e-4);
        assert!(spectral_rmse(&a, &z).is_err());
    }

    #[test]
    fn spectrum_rejects_non_finite() {
        assert!(Spectrum::new(vec![1.0, f64::INFINITY]).is_err());
        assert!(Spectrum::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn abundance_validation() {
        let ok = DMatrix::from_row_slice(2, 2, &[0.25, 1.0, 0.75, 0.0]);
        assert!(AbundanceMatrix::new(ok).is_ok());
        let off = DMatrix::from_row_slice(2, 1, &[0.5, 0.5 + 2e-9]);
        assert!(matches!(
            AbundanceMatrix::new(off),
            Err(Error::Simplex { column: 0, .. })
        ));
        let within = DMatrix::from_row_slice(2, 1, &[0.5, 0.5 + 5e-10]);
        assert!(AbundanceMatrix::new(within).is_ok());
        let neg = DMatrix::from_row_slice(2, 1, &[-1e-11, 1.0 + 1e-11]);
        assert!(AbundanceMatrix::new(neg).is_err());
        let tiny_neg = DMatrix::from_row_slice(2, 1, &[-1e-13, 1.0]);
        assert!(AbundanceMatrix::new(tiny_neg).is_ok());
    }

    #[test]
    fn series_invariants() {
        let f = EndmemberMatrix::new(DMatrix::<f64>::zeros(3, 2)).unwrap();
        let g = EndmemberMatrix::new(DMatrix::<f64>::zeros(3, 1)).unwrap();
        assert!(SpectralSeries::new(vec![f.clone(), g], vec![0.0, 1.0]).is_err());
        assert!(SpectralSeries::new(vec![f.clone(), f.clone()], vec![1.0, 1.0]).is_err());
        assert!(SpectralSeries::new(vec![f.clone(), f], vec![0.0, 0.5]).is_ok());
    }

    #[test]
    fn spectral_angle_is_brightness_invariant() {
        let a = DVector::from_row_slice(&[0.1, 0.4, 0.3]);
        assert_abs_diff_eq!(spectral_angle(&a, &(&a * 3.0)), 0.0, epsilon = 1e-7);
        let b = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        let c = DVector::from_row_slice(&[0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(spectral_angle(&b, &c), std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
    }

    fn adjoint_gap<D: Dynamics<f64>>(d: &D, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        // Jv by central differences; step is linear so this is exact up to rounding.
        let eps = 1e-3;
        let jv = (d.step(&(x + v * eps)).unwrap() - d.step(&(x - v * eps)).unwrap()) / (2.0 * eps);
        let jtu = d.jacobian_transpose_apply(x, u).unwrap();
        let lhs = u.dot(&jv);
        let rhs = jtu.dot(v);
        (lhs - rhs).abs() / (u.norm() * jv.norm()).max(1e-300)
    }

    proptest! {
        #[test]
        fn step_composes(beta in -2.0f64..2.0, dt1 in 0.0f64..3.0, dt2 in 0.0f64..3.0,
                         p in -1.0f64..1.0, v in -1.0f64..1.0) {
            let s = state(&[p], &[v]);
            let two = linear_second_order_step(
                &linear_second_order_step(&s, beta, dt1).unwrap(), beta, dt2).unwrap();
            let one = linear_second_order_step(&s, beta, dt1 + dt2).unwrap();
            let scale = 1.0 + one.position.amax().max(one.velocity.amax());
            prop_assert!((two.position[0] - one.position[0]).abs() < 1e-10 * scale);
            prop_assert!((two.velocity[0] - one.velocity[0]).abs() < 1e-10 * scale);
        }

        #[test]
        fn second_order_adjoint(beta in -1.0f64..1.0, dt in 0.1f64..2.0,
                                seed in prop::collection::vec(-1.0f64..1.0, 18)) {
            let d = LinearSecondOrder::new(beta, dt).unwrap();
            let x = DVector::from_row_slice(&seed[0..6]);
            let u = DVector::from_row_slice(&seed[6..12]);
            let v = DVector::from_row_slice(&seed[12..18]);
            prop_assert!(adjoint_gap(&d, &x, &u, &v) < 1e-8);
        }

        #[test]
        fn identity_adjoint(seed in prop::collection::vec(-1.0f64..1.0, 12)) {
            let x = DVector::from_row_slice(&seed[0..4]);
            let u = DVector::from_row_slice(&seed[4..8]);
            let v = DVector::from_row_slice(&seed[8..12]);
            prop_assert!(adjoint_gap(&IdentityDynamics, &x, &u, &v) < 1e-8);
        }
    }
}
