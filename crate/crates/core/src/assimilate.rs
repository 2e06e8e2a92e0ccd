//! Variational estimation of endmember trajectories with a known model.
//!
//! The criterion is
//!
//! ```text
//! J = 1/2 sum_t |Y_t - S_t A|_F^2 + lambda/2 sum_{t>=1} |X_t - Phi(X_{t-1})|^2
//! ```
//!
//! where `X_t` are (possibly augmented) states of the assimilated endmembers
//! and `S_t` holds their positions next to the fixed endmembers. In strong
//! constraint mode only `X_0` is free and the trajectory is generated by the
//! model, so the second sum vanishes identically; in weak constraint mode
//! every `X_t` is free and the model enters as a penalty.
//!
//! Gradients come from a reverse sweep through
//! [`Dynamics::jacobian_transpose_apply`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    AbundanceMatrix, BandwiseLinear, Dynamics, EndmemberMatrix, ImageSequence, SpectralSeries,
};
use crate::scalar::{lit, to_f64, Real};
use crate::unmix::{angle_cost, fcls_abundances, hungarian, vca};

/// Whether the model is enforced exactly or penalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Optimise the initial state only; `X_t = Phi(X_{t-1})`.
    #[default]
    Strong,
    /// Optimise every `X_t` with the model misfit weighted by `lambda`.
    Weak,
}

/// Free variables of the criterion: one `n x k` state matrix (strong mode)
/// or one per frame (weak mode). Column `j` is the state of the `j`-th
/// assimilated endmember.
#[derive(Debug, Clone, PartialEq)]
pub struct Control<T: Real> {
    pub states: Vec<DMatrix<T>>,
}

impl<T: Real> Control<T> {
    fn flatten(&self) -> DVector<T> {
        let total: usize = self.states.iter().map(|s| s.len()).sum();
        let mut v = DVector::zeros(total);
        let mut off = 0;
        for s in &self.states {
            v.rows_mut(off, s.len()).copy_from_slice(s.as_slice());
            off += s.len();
        }
        v
    }

    fn unflatten_like(&self, v: &DVector<T>) -> Self {
        let mut off = 0;
        let states = self
            .states
            .iter()
            .map(|s| {
                let m = DMatrix::from_column_slice(s.nrows(), s.ncols(), &v.as_slice()[off..off + s.len()]);
                off += s.len();
                m
            })
            .collect();
        Self { states }
    }

    fn is_finite(&self) -> bool {
        self.states.iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// Stopping rules of the iterative solver.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub armijo_c: f64,
    /// Curvature pairs kept by the quasi-Newton direction; 0 gives steepest descent.
    pub memory: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            rel_tol: 1e-10,
            grad_tol: 1e-8,
            armijo_c: 1e-4,
            memory: 10,
        }
    }
}

/// Observations, abundances and model defining one criterion.
pub struct AssimilationProblem<'a, T: Real, D: Dynamics<T>> {
    observations: &'a ImageSequence<T>,
    abundances: AbundanceMatrix<T>,
    dynamics: D,
    lambda: T,
    mode: Mode,
    variable: Vec<usize>,
    fixed: EndmemberMatrix<T>,
    anchor: DMatrix<T>,
    // Derived: A restricted to assimilated rows, the fixed contribution to
    // every pixel, and the per-frame reductions of the data term.
    a_var: DMatrix<T>,
    constant: DMatrix<T>,
    gram: DMatrix<T>,
    cross: Vec<DMatrix<T>>,
}

impl<'a, T: Real, D: Dynamics<T>> AssimilationProblem<'a, T, D> {
    /// `fixed` supplies every endmember; the columns listed in `variable` are
    /// replaced by the assimilated trajectories.
    pub fn new(
        observations: &'a ImageSequence<T>,
        abundances: AbundanceMatrix<T>,
        dynamics: D,
        fixed: EndmemberMatrix<T>,
        variable: Vec<usize>,
    ) -> Result<Self> {
        let (l, n, p) = (observations.bands(), observations.pixels(), abundances.endmembers());
        if abundances.pixels() != n {
            return Err(Error::Shape(format!(
                "abundances cover {} pixels, images {n}",
                abundances.pixels()
            )));
        }
        if fixed.bands() != l || fixed.endmembers() != p {
            return Err(Error::Shape(format!(
                "fixed endmembers {}x{}, expected {l}x{p}",
                fixed.bands(),
                fixed.endmembers()
            )));
        }
        if variable.is_empty() {
            return Err(Error::InvalidParameter("no endmember selected for assimilation".into()));
        }
        let mut seen = vec![false; p];
        for &j in &variable {
            if j >= p || seen[j] {
                return Err(Error::InvalidParameter(format!(
                    "assimilated endmember index {j} invalid or repeated"
                )));
            }
            seen[j] = true;
        }
        let a = abundances.matrix();
        let a_var = DMatrix::from_fn(variable.len(), n, |i, c| a[(variable[i], c)]);
        let mut s_const = fixed.matrix().clone();
        for &j in &variable {
            s_const.column_mut(j).fill(T::zero());
        }
        let constant = &s_const * a;
        let gram = &a_var * a_var.transpose();
        let a_var_t = a_var.transpose();
        let cross = observations
            .frames()
            .iter()
            .map(|y| (y - &constant) * &a_var_t)
            .collect();
        let k = variable.len();
        Ok(Self {
            observations,
            abundances,
            dynamics,
            lambda: T::one(),
            mode: Mode::Strong,
            variable,
            fixed,
            anchor: DMatrix::zeros(l, k),
            a_var,
            constant,
            gram,
            cross,
        })
    }

    pub fn with_lambda(mut self, lambda: T) -> Result<Self> {
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda}")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Offsets added to the assimilated positions (e.g. a known mean spectrum),
    /// one column per assimilated endmember.
    pub fn with_anchor(mut self, anchor: DMatrix<T>) -> Result<Self> {
        if anchor.shape() != (self.bands(), self.variable.len()) {
            return Err(Error::Shape(format!(
                "anchor {:?}, expected {:?}",
                anchor.shape(),
                (self.bands(), self.variable.len())
            )));
        }
        self.anchor = anchor;
        Ok(self)
    }

    pub fn bands(&self) -> usize {
        self.observations.bands()
    }

    pub fn frames(&self) -> usize {
        self.observations.len()
    }

    pub fn state_len(&self) -> usize {
        self.dynamics.state_len(self.bands())
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn variable(&self) -> &[usize] {
        &self.variable
    }

    pub fn dynamics(&self) -> &D {
        &self.dynamics
    }

    pub fn abundances(&self) -> &AbundanceMatrix<T> {
        &self.abundances
    }

    fn check_initial(&self, initial: &DMatrix<T>) -> Result<()> {
        let want = (self.state_len(), self.variable.len());
        if initial.shape() != want {
            return Err(Error::Shape(format!(
                "initial state {:?}, expected {want:?}",
                initial.shape()
            )));
        }
        Ok(())
    }

    /// The control corresponding to `initial` in the current mode; in weak
    /// mode the remaining frames are filled by propagating the model.
    pub fn control_from_initial(&self, initial: &DMatrix<T>) -> Result<Control<T>> {
        self.check_initial(initial)?;
        let states = match self.mode {
            Mode::Strong => vec![initial.clone()],
            Mode::Weak => propagate_states(initial, &self.dynamics, self.frames())?,
        };
        Ok(Control { states })
    }

    fn check_control(&self, control: &Control<T>) -> Result<()> {
        let want = match self.mode {
            Mode::Strong => 1,
            Mode::Weak => self.frames(),
        };
        if control.states.len() != want {
            return Err(Error::Shape(format!(
                "control has {} state frames, mode needs {want}",
                control.states.len()
            )));
        }
        for s in &control.states {
            self.check_initial(s)?;
        }
        Ok(())
    }

    /// States of every frame implied by `control`.
    fn trajectory_states(&self, control: &Control<T>) -> Result<Vec<DMatrix<T>>> {
        match self.mode {
            Mode::Strong => propagate_states(&control.states[0], &self.dynamics, self.frames()),
            Mode::Weak => Ok(control.states.clone()),
        }
    }

    fn positions(&self, states: &[DMatrix<T>]) -> Vec<DMatrix<T>> {
        let l = self.bands();
        states
            .iter()
            .map(|x| x.rows(0, l) + &self.anchor)
            .collect()
    }

    /// Model-misfit residuals `X_t - Phi(X_{t-1})`, `t >= 1` (weak mode only).
    fn model_residuals(&self, states: &[DMatrix<T>]) -> Result<Vec<DMatrix<T>>> {
        (1..states.len())
            .map(|t| Ok(&states[t] - step_columns(&self.dynamics, &states[t - 1])?))
            .collect()
    }

    fn model_term(&self, residuals: &[DMatrix<T>]) -> T {
        let half: T = lit(0.5);
        half * self.lambda * residuals.iter().fold(T::zero(), |acc, r| acc + r.norm_squared())
    }

    /// Criterion value, evaluated directly from the pixel residuals.
    pub fn objective(&self, control: &Control<T>) -> Result<T> {
        self.check_control(control)?;
        let states = self.trajectory_states(control)?;
        let half: T = lit(0.5);
        let mut data = T::zero();
        for (t, s) in self.positions(&states).iter().enumerate() {
            let r = self.observations.frame(t) - &self.constant - s * &self.a_var;
            data += r.norm_squared();
        }
        let model = match self.mode {
            Mode::Strong => T::zero(),
            Mode::Weak => self.model_term(&self.model_residuals(&states)?),
        };
        Ok(half * data + model)
    }

    /// Criterion at an initial state (strong mode) or its propagation (weak mode).
    pub fn objective_at(&self, initial: &DMatrix<T>) -> Result<T> {
        self.objective(&self.control_from_initial(initial)?)
    }

    /// `dJ/dS_t` restricted to the assimilated columns: `(S_t A - Y_t) A_v^T`.
    fn position_cotangents(&self, positions: &[DMatrix<T>]) -> Vec<DMatrix<T>> {
        positions
            .iter()
            .zip(&self.cross)
            .map(|(s, b)| s * &self.gram - b)
            .collect()
    }

    fn embed(&self, pos_cot: &DMatrix<T>) -> DMatrix<T> {
        let mut out = DMatrix::zeros(self.state_len(), self.variable.len());
        out.rows_mut(0, self.bands()).copy_from(pos_cot);
        out
    }

    /// Exact gradient of [`Self::objective`] with respect to `control`.
    pub fn gradient(&self, control: &Control<T>) -> Result<Control<T>> {
        self.check_control(control)?;
        let states = self.trajectory_states(control)?;
        self.gradient_from_states(&states)
    }

    fn gradient_from_states(&self, states: &[DMatrix<T>]) -> Result<Control<T>> {
        let cot = self.position_cotangents(&self.positions(states));
        let frames = states.len();
        match self.mode {
            Mode::Strong => {
                let mut adj = self.embed(&cot[frames - 1]);
                for t in (0..frames - 1).rev() {
                    adj = self.embed(&cot[t]) + vjp_columns(&self.dynamics, &states[t], &adj)?;
                }
                Ok(Control { states: vec![adj] })
            }
            Mode::Weak => {
                let res = self.model_residuals(states)?;
                let mut grads = Vec::with_capacity(frames);
                for t in 0..frames {
                    let mut g = self.embed(&cot[t]);
                    if t >= 1 {
                        g += &res[t - 1] * self.lambda;
                    }
                    if t + 1 < frames {
                        g -= vjp_columns(&self.dynamics, &states[t], &res[t])? * self.lambda;
                    }
                    grads.push(g);
                }
                Ok(Control { states: grads })
            }
        }
    }

    /// Full `L x P` endmember series: fixed columns plus assimilated positions.
    pub fn assemble(&self, states: &[DMatrix<T>]) -> Result<SpectralSeries<T>> {
        let frames = self
            .positions(states)
            .into_iter()
            .map(|s| {
                let mut m = self.fixed.matrix().clone();
                for (i, &j) in self.variable.iter().enumerate() {
                    m.set_column(j, &s.column(i));
                }
                EndmemberMatrix::new(m)
            })
            .collect::<Result<Vec<_>>>()?;
        SpectralSeries::new(frames, self.observations.timestamps().to_vec())
    }

    /// Change in the data term between position sequences `s` and `s + ds`,
    /// evaluated without the large constant so it stays accurate near the optimum.
    fn data_delta(&self, cot: &[DMatrix<T>], ds: &[DMatrix<T>]) -> T {
        let half: T = lit(0.5);
        cot.iter().zip(ds).fold(T::zero(), |acc, (c, d)| {
            acc + c.dot(d) + half * (d * &self.gram).dot(d)
        })
    }
}

/// Applies `step` to every column of `states`.
fn step_columns<T: Real, D: Dynamics<T>>(d: &D, states: &DMatrix<T>) -> Result<DMatrix<T>> {
    let mut out = DMatrix::zeros(states.nrows(), states.ncols());
    for (j, col) in states.column_iter().enumerate() {
        let next = d.step(&col.into_owned())?;
        if next.len() != states.nrows() {
            return Err(Error::Shape("dynamics changed the state length".into()));
        }
        out.set_column(j, &next);
    }
    Ok(out)
}

fn vjp_columns<T: Real, D: Dynamics<T>>(
    d: &D,
    states: &DMatrix<T>,
    cot: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let mut out = DMatrix::zeros(states.nrows(), states.ncols());
    for j in 0..states.ncols() {
        let v = d.jacobian_transpose_apply(&states.column(j).into_owned(), &cot.column(j).into_owned())?;
        out.set_column(j, &v);
    }
    Ok(out)
}

fn propagate_states<T: Real, D: Dynamics<T>>(
    initial: &DMatrix<T>,
    dynamics: &D,
    frames: usize,
) -> Result<Vec<DMatrix<T>>> {
    let mut states = Vec::with_capacity(frames);
    states.push(initial.clone());
    for t in 1..frames {
        let next = step_columns(dynamics, &states[t - 1])?;
        states.push(next);
    }
    Ok(states)
}

/// Propagates each initial state (one per endmember) for `frames` frames and
/// returns the observed positions as an `L x k` series.
pub fn forward_propagate<T: Real, D: Dynamics<T>>(
    initial: &[DVector<T>],
    dynamics: &D,
    bands: usize,
    frames: usize,
) -> Result<SpectralSeries<T>> {
    if frames == 0 {
        return Err(Error::InvalidParameter("need at least one frame".into()));
    }
    if initial.is_empty() {
        return Err(Error::Shape("no initial states".into()));
    }
    let n = dynamics.state_len(bands);
    if let Some(bad) = initial.iter().find(|x| x.len() != n) {
        return Err(Error::Shape(format!("state of length {}, expected {n}", bad.len())));
    }
    let init = DMatrix::from_fn(n, initial.len(), |i, j| initial[j][i]);
    let states = propagate_states(&init, dynamics, frames)?;
    let frames = states
        .iter()
        .map(|x| EndmemberMatrix::new(x.rows(0, bands).into_owned()))
        .collect::<Result<Vec<_>>>()?;
    SpectralSeries::with_frame_index(frames)
}

/// Outcome of a solve.
#[derive(Debug, Clone)]
pub struct AssimilationResult<T: Real> {
    /// Initial states, one column per assimilated endmember.
    pub initial_state: DMatrix<T>,
    /// Optimised control (equals `[initial_state]` in strong mode).
    pub control: Control<T>,
    /// Full endmember series including fixed endmembers.
    pub trajectory: SpectralSeries<T>,
    pub objective_history: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
}

/// Two-loop recursion: `-H g` for the inverse-Hessian estimate built from `pairs`.
fn lbfgs_direction<T: Real>(
    g: &DVector<T>,
    pairs: &std::collections::VecDeque<(DVector<T>, DVector<T>, T)>,
) -> DVector<T> {
    let mut q = g.clone();
    let mut a = Vec::with_capacity(pairs.len());
    for (sv, yv, rho) in pairs.iter().rev() {
        let ai = *rho * sv.dot(&q);
        q.axpy(-ai, yv, T::one());
        a.push(ai);
    }
    if let Some((sv, yv, _)) = pairs.back() {
        q *= sv.dot(yv) / yv.norm_squared();
    }
    for ((sv, yv, rho), ai) in pairs.iter().zip(a.iter().rev()) {
        let b = *rho * yv.dot(&q);
        q.axpy(*ai - b, sv, T::one());
    }
    -q
}

/// Limited-memory BFGS with Armijo backtracking from `guess`.
pub fn solve<T: Real, D: Dynamics<T>>(
    problem: &AssimilationProblem<'_, T, D>,
    guess: &DMatrix<T>,
    settings: &SolverSettings,
) -> Result<AssimilationResult<T>> {
    solve_control(problem, problem.control_from_initial(guess)?, settings)
}

/// [`solve`] starting from an explicit control (weak mode trajectories).
pub fn solve_control<T: Real, D: Dynamics<T>>(
    problem: &AssimilationProblem<'_, T, D>,
    guess: Control<T>,
    settings: &SolverSettings,
) -> Result<AssimilationResult<T>> {
    problem.check_control(&guess)?;
    if !guess.is_finite() {
        return Err(Error::NonFinite("initial guess".into()));
    }
    let mut f = problem.objective(&guess)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("objective at initial guess".into()));
    }
    let c = lit::<T>(settings.armijo_c);
    let mut control = guess;
    let mut states = problem.trajectory_states(&control)?;
    let mut positions = problem.positions(&states);
    let mut model = match problem.mode {
        Mode::Strong => T::zero(),
        Mode::Weak => problem.model_term(&problem.model_residuals(&states)?),
    };
    let mut history = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    let mut sd_alpha = T::one();
    let mut x = control.flatten();
    let mut pairs: std::collections::VecDeque<(DVector<T>, DVector<T>, T)> = Default::default();
    let mut g = problem.gradient_from_states(&states)?.flatten();

    while iterations < settings.max_iter {
        if to_f64(g.norm()) < settings.grad_tol {
            converged = true;
            break;
        }
        let (mut dir, mut quasi) = (lbfgs_direction(&g, &pairs), !pairs.is_empty());
        let mut slope = g.dot(&dir);
        if !(slope < T::zero()) {
            pairs.clear();
            dir = -&g;
            slope = -g.norm_squared();
            quasi = false;
        }
        let cot = problem.position_cotangents(&positions);
        let mut alpha = if quasi { T::one() } else { sd_alpha * lit(2.0) };
        let mut accepted = None;
        for _ in 0..80 {
            let trial_x = &x + &dir * alpha;
            let trial = control.unflatten_like(&trial_x);
            let trial_states = problem.trajectory_states(&trial)?;
            let trial_pos = problem.positions(&trial_states);
            let ds: Vec<DMatrix<T>> = trial_pos.iter().zip(&positions).map(|(a, b)| a - b).collect();
            let trial_model = match problem.mode {
                Mode::Strong => T::zero(),
                Mode::Weak => problem.model_term(&problem.model_residuals(&trial_states)?),
            };
            let delta = problem.data_delta(&cot, &ds) + trial_model - model;
            if delta.is_finite() && delta <= c * alpha * slope {
                accepted = Some((trial_x, trial, trial_states, trial_pos, trial_model, delta));
                break;
            }
            alpha *= lit(0.5);
        }
        let Some((nx, ncontrol, nstates, npos, nmodel, delta)) = accepted else {
            if quasi {
                // Retry along the plain gradient before giving up.
                pairs.clear();
                continue;
            }
            // No representable decrease along the gradient: stationary to rounding.
            converged = true;
            break;
        };
        if !quasi {
            sd_alpha = alpha;
        }
        let ng = problem.gradient_from_states(&nstates)?.flatten();
        if settings.memory > 0 {
            let sv = &nx - &x;
            let yv = &ng - &g;
            let sy = sv.dot(&yv);
            if sy > lit::<T>(1e-12) * sv.norm() * yv.norm() {
                if pairs.len() == settings.memory {
                    pairs.pop_front();
                }
                pairs.push_back((sv, yv, T::one() / sy));
            }
        }
        g = ng;
        iterations += 1;
        let f_new = f + delta;
        let rel = if f.abs() > T::zero() { -delta / f.abs() } else { T::zero() };
        x = nx;
        control = ncontrol;
        states = nstates;
        positions = npos;
        model = nmodel;
        f = f_new;
        history.push(f);
        if to_f64(rel) < settings.rel_tol {
            converged = true;
            break;
        }
    }

    let trajectory = problem.assemble(&states)?;
    Ok(AssimilationResult {
        initial_state: states[0].clone(),
        control,
        trajectory,
        objective_history: history,
        converged,
        iterations,
    })
}

/// Exact minimiser of the strong-constraint criterion for bandwise-linear models.
///
/// Positions depend linearly on the initial state, so the criterion is a
/// least-squares problem whose normal matrix is shared by all bands.
pub fn solve_linear_closed_form<T: Real, D: BandwiseLinear<T>>(
    problem: &AssimilationProblem<'_, T, D>,
) -> Result<AssimilationResult<T>> {
    if problem.mode != Mode::Strong {
        return Err(Error::InvalidParameter(
            "closed form applies to strong-constraint problems".into(),
        ));
    }
    let d = problem.dynamics.components();
    let m = problem.dynamics.band_matrix();
    let (l, k, frames) = (problem.bands(), problem.variable.len(), problem.frames());
    if problem.state_len() != d * l {
        return Err(Error::Shape("state layout does not match band components".into()));
    }
    // Row 0 of M^t: how the initial components reach the observed position.
    let mut power = DMatrix::<T>::identity(d, d);
    let mut rows = Vec::with_capacity(frames);
    for _ in 0..frames {
        rows.push(power.row(0).transpose());
        power = &m * power;
    }
    let dk = d * k;
    let mut normal = DMatrix::<T>::zeros(dk, dk);
    for mt in &rows {
        let outer = mt * mt.transpose();
        for j in 0..k {
            for jj in 0..k {
                let g = problem.gram[(j, jj)];
                for c in 0..d {
                    for cc in 0..d {
                        normal[(j * d + c, jj * d + cc)] += g * outer[(c, cc)];
                    }
                }
            }
        }
    }
    let eig = normal.clone().symmetric_eigenvalues();
    let (emin, emax) = (eig.min(), eig.max());
    let condition = if emin > T::zero() {
        to_f64(emax / emin)
    } else {
        f64::INFINITY
    };
    if !(condition < 1.0 / (100.0 * to_f64(T::default_epsilon()))) {
        return Err(Error::Singular { condition });
    }
    let chol = normal.cholesky().ok_or(Error::Singular { condition })?;

    let anchor_gram = &problem.anchor * &problem.gram;
    let mut rhs = DMatrix::<T>::zeros(dk, l);
    for (b, mt) in problem.cross.iter().zip(&rows) {
        let target = b - &anchor_gram;
        for band in 0..l {
            for j in 0..k {
                let v = target[(band, j)];
                for c in 0..d {
                    rhs[(j * d + c, band)] += v * mt[c];
                }
            }
        }
    }
    let z = chol.solve(&rhs);
    let mut initial = DMatrix::<T>::zeros(d * l, k);
    for band in 0..l {
        for j in 0..k {
            for c in 0..d {
                initial[(c * l + band, j)] = z[(j * d + c, band)];
            }
        }
    }
    let states = propagate_states(&initial, &problem.dynamics, frames)?;
    let control = Control {
        states: vec![initial.clone()],
    };
    let f = problem.objective(&control)?;
    Ok(AssimilationResult {
        initial_state: initial,
        control,
        trajectory: problem.assemble(&states)?,
        objective_history: vec![f],
        converged: true,
        iterations: 0,
    })
}

/// Frame-0 endmember and abundance estimates used to start assimilation.
#[derive(Debug, Clone)]
pub struct VcaInit<T: Real> {
    pub endmembers: EndmemberMatrix<T>,
    pub abundances: AbundanceMatrix<T>,
    /// Initial velocity per endmember (`L x P`).
    pub velocities: DMatrix<T>,
}

impl<T: Real> VcaInit<T> {
    /// `[position - anchor; velocity]` states of the listed endmembers.
    pub fn augmented_guess(&self, variable: &[usize], anchor: &DMatrix<T>) -> Result<DMatrix<T>> {
        let l = self.endmembers.bands();
        if anchor.shape() != (l, variable.len()) {
            return Err(Error::Shape("anchor shape does not match selection".into()));
        }
        let mut out = DMatrix::zeros(2 * l, variable.len());
        for (i, &j) in variable.iter().enumerate() {
            let pos = self.endmembers.matrix().column(j) - anchor.column(i);
            out.view_mut((0, i), (l, 1)).copy_from(&pos);
            out.view_mut((l, i), (l, 1))
                .copy_from(&self.velocities.column(j));
        }
        Ok(out)
    }

    /// Position-only states (`position - anchor`) of the listed endmembers.
    pub fn position_guess(&self, variable: &[usize], anchor: &DMatrix<T>) -> Result<DMatrix<T>> {
        let l = self.endmembers.bands();
        if anchor.shape() != (l, variable.len()) {
            return Err(Error::Shape("anchor shape does not match selection".into()));
        }
        Ok(DMatrix::from_fn(l, variable.len(), |r, i| {
            self.endmembers.matrix()[(r, variable[i])] - anchor[(r, i)]
        }))
    }
}

/// VCA and FCLS on the first frame. Velocities are zero when `frame0_only`,
/// otherwise a finite difference against the aligned VCA result of frame 1.
pub fn initialize_from_vca<T: Real, R: Rng + ?Sized>(
    observations: &ImageSequence<T>,
    p: usize,
    frame0_only: bool,
    rng: &mut R,
) -> Result<VcaInit<T>> {
    let first = vca(observations.frame(0), p, rng)?;
    let abundances = fcls_abundances(observations.frame(0), &first.endmembers)?;
    let l = observations.bands();
    let velocities = if frame0_only || observations.len() < 2 {
        DMatrix::zeros(l, p)
    } else {
        let second = vca(observations.frame(1), p, rng)?;
        let perm = hungarian(&angle_cost(first.endmembers.matrix(), second.endmembers.matrix()));
        let aligned = second.endmembers.permuted(&perm);
        let ts = observations.timestamps();
        let dt = ts[1] - ts[0];
        (aligned.matrix() - first.endmembers.matrix()) / dt
    };
    Ok(VcaInit {
        endmembers: first.endmembers,
        abundances,
        velocities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IdentityDynamics, LinearSecondOrder};
    use crate::simulate::{generate_scenario_a, ScenarioA, ScenarioAConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(snr: f64, l: usize, n: usize, seed: u64) -> ScenarioA<f64> {
        generate_scenario_a(&ScenarioAConfig {
            bands: l,
            pixels: n,
            snr_db: snr,
            rng_seed: seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn true_problem(sc: &ScenarioA<f64>) -> AssimilationProblem<'_, f64, LinearSecondOrder<f64>> {
        let l = sc.images.bands();
        AssimilationProblem::new(
            &sc.images,
            sc.abundances.clone(),
            LinearSecondOrder::new(-0.1, 1.0).unwrap(),
            sc.truth.frame(0).clone(),
            vec![0],
        )
        .unwrap()
        .with_anchor(DMatrix::from_column_slice(l, 1, sc.mean.values().as_slice()))
        .unwrap()
    }

    fn truth_state(sc: &ScenarioA<f64>) -> DMatrix<f64> {
        let v = sc.initial.to_vector();
        DMatrix::from_column_slice(v.len(), 1, v.as_slice())
    }

    /// Central finite differences of the objective along every coordinate.
    fn fd_gradient<D: Dynamics<f64>>(
        problem: &AssimilationProblem<'_, f64, D>,
        control: &Control<f64>,
        h: f64,
    ) -> DVector<f64> {
        let x = control.flatten();
        DVector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = problem.objective(&control.unflatten_like(&xp)).unwrap();
            let fm = problem.objective(&control.unflatten_like(&xm)).unwrap();
            (fp - fm) / (2.0 * h)
        })
    }

    #[test]
    fn forward_propagate_examples() {
        let x0 = DVector::from_row_slice(&[0.3, -0.2, 0.1, 0.05]);
        let id = forward_propagate(&[x0.clone()], &IdentityDynamics, 4, 5).unwrap();
        assert!(id.frames().iter().all(|f| f == id.frame(0)));
        let one = forward_propagate(&[x0.clone()], &IdentityDynamics, 4, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.frame(0).matrix().column(0), x0);

        let d = LinearSecondOrder::new(-0.1, 1.0).unwrap();
        let s = forward_propagate(&[x0.clone()], &d, 2, 12).unwrap();
        let w = 0.1f64.sqrt();
        for t in 0..12 {
            let tt = t as f64;
            for b in 0..2 {
                let expect = x0[b] * (w * tt).cos() + x0[2 + b] * (w * tt).sin() / w;
                assert!((s.frame(t).matrix()[(b, 0)] - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn objective_vanishes_at_noiseless_truth() {
        let sc = scenario(f64::INFINITY, 40, 60, 1);
        let pb = true_problem(&sc);
        let x = truth_state(&sc);
        let f = pb.objective_at(&x).unwrap();
        let y2: f64 = sc.images.frames().iter().map(|y| y.norm_squared()).sum();
        assert!(f < 1e-16 * y2, "{f} vs {y2}");
        // Perturbing any band increases it.
        for band in [0, 7, 39] {
            for delta in [-1e-3, 1e-3, 1e-2] {
                let mut xp = x.clone();
                xp[(band, 0)] += delta;
                assert!(pb.objective_at(&xp).unwrap() > f);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sc = scenario(20.0, 6, 40, 2);
        let pb = true_problem(&sc);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(12, 1, |_, _| rng.random_range(-0.1..0.1));
        let control = pb.control_from_initial(&x).unwrap();
        let g = pb.gradient(&control).unwrap().flatten();
        let fd = fd_gradient(&pb, &control, 1e-6);
        assert!((&g - &fd).norm() / fd.norm() < 1e-5);
        // The unobserved velocity block still receives gradient.
        assert!(g.rows(6, 6).norm() > 1e-3 * g.norm());
    }

    #[test]
    fn weak_mode_gradient_matches_finite_differences() {
        let sc = scenario(20.0, 5, 30, 4);
        let pb = true_problem(&sc).with_mode(Mode::Weak).with_lambda(0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let control = Control {
            states: (0..pb.frames())
                .map(|_| DMatrix::from_fn(10, 1, |_, _| rng.random_range(-0.1..0.1)))
                .collect(),
        };
        let g = pb.gradient(&control).unwrap().flatten();
        let fd = fd_gradient(&pb, &control, 1e-6);
        assert!((&g - &fd).norm() / fd.norm() < 1e-5);
    }

    #[test]
    fn gradient_vanishes_at_noiseless_optimum() {
        let sc = scenario(f64::INFINITY, 30, 50, 6);
        let pb = true_problem(&sc);
        let g = pb.gradient(&pb.control_from_initial(&truth_state(&sc)).unwrap()).unwrap();
        assert!(g.flatten().norm() < 1e-10);
    }

    #[test]
    fn iterative_and_closed_form_recover_noiseless_truth() {
        let sc = scenario(f64::INFINITY, 50, 120, 7);
        let pb = true_problem(&sc);
        let guess = DMatrix::zeros(100, 1);
        let it = solve(&pb, &guess, &SolverSettings::default()).unwrap();
        assert!(it.converged);
        assert!(it
            .objective_history
            .windows(2)
            .all(|w| w[1] <= w[0]));
        let cf = solve_linear_closed_form(&pb).unwrap();
        let truth = truth_state(&sc);
        assert!((&cf.initial_state - &truth).amax() < 1e-10);
        assert!((&it.initial_state - &truth).amax() < 1e-6);
        let rmse = crate::unmix::trajectory_rmse(&it.trajectory, &sc.truth, 0, None).unwrap();
        assert!(rmse.iter().all(|r| *r < 1e-6));
    }

    #[test]
    fn solvers_agree_on_noisy_instances() {
        for seed in 0..3 {
            let sc = scenario(15.0, 20, 80, 10 + seed);
            let pb = true_problem(&sc);
            let cf = solve_linear_closed_form(&pb).unwrap();
            let it = solve(&pb, &DMatrix::zeros(40, 1), &SolverSettings::default()).unwrap();
            assert!((&cf.initial_state - &it.initial_state).amax() < 1e-5);
            assert!(it.objective_history.last().unwrap() >= &(cf.objective_history[0] - 1e-9));
        }
    }

    #[test]
    fn guess_at_optimum_returns_immediately() {
        let sc = scenario(20.0, 15, 60, 8);
        let pb = true_problem(&sc);
        let cf = solve_linear_closed_form(&pb).unwrap();
        let again = solve(&pb, &cf.initial_state, &SolverSettings::default()).unwrap();
        assert!(again.converged);
        assert!(again.iterations <= 1);
        assert!((&again.initial_state - &cf.initial_state).amax() < 1e-9);
    }

    #[test]
    fn strong_mode_ignores_lambda() {
        let sc = scenario(20.0, 10, 40, 9);
        let x = DMatrix::from_element(20, 1, 0.01);
        let a = true_problem(&sc).with_lambda(0.0).unwrap().objective_at(&x).unwrap();
        let b = true_problem(&sc).with_lambda(37.0).unwrap().objective_at(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn weak_mode_without_penalty_is_per_frame_least_squares() {
        let sc = scenario(20.0, 8, 50, 12);
        let pb = true_problem(&sc).with_mode(Mode::Weak).with_lambda(0.0).unwrap();
        let res = solve(&pb, &DMatrix::zeros(16, 1), &SolverSettings::default()).unwrap();
        // Oracle: decoupled normal equations s_t = s_bar + B_t / G per frame.
        let a_p = sc.abundances.matrix().row(0).transpose();
        let g = a_p.norm_squared();
        let mut s_const = sc.truth.frame(0).matrix().clone();
        s_const.column_mut(0).fill(0.0);
        let c = &s_const * sc.abundances.matrix();
        for t in 0..pb.frames() {
            let b = (sc.images.frame(t) - &c) * &a_p;
            let est = res.trajectory.frame(t).matrix().column(0).into_owned();
            assert!((est - &b / g).amax() < 1e-6, "frame {t}");
        }
    }

    #[test]
    fn identity_closed_form_equals_single_frame_fit() {
        let sc = scenario(20.0, 12, 40, 13);
        let frame = sc.images.frame(0).clone();
        let repeated = ImageSequence::new(vec![frame.clone(); 5], vec![0.0; 5], (0..5).map(|t| t as f64).collect()).unwrap();
        let single = ImageSequence::new(vec![frame], vec![0.0], vec![0.0]).unwrap();
        let make = |obs| {
            AssimilationProblem::new(
                obs,
                sc.abundances.clone(),
                IdentityDynamics,
                sc.truth.frame(0).clone(),
                vec![0, 2],
            )
            .unwrap()
        };
        let many = solve_linear_closed_form(&make(&repeated)).unwrap();
        let one = solve_linear_closed_form(&make(&single)).unwrap();
        assert!((&many.initial_state - &one.initial_state).amax() < 1e-12);
    }

    #[test]
    fn singular_normal_matrix_reported() {
        let sc = scenario(20.0, 5, 10, 14);
        let mut a = sc.abundances.matrix().clone();
        a.row_mut(0).fill(0.0);
        a.row_mut(1).fill(0.5);
        a.row_mut(2).fill(0.5);
        let pb = AssimilationProblem::new(
            &sc.images,
            AbundanceMatrix::new(a).unwrap(),
            LinearSecondOrder::new(-0.1, 1.0).unwrap(),
            sc.truth.frame(0).clone(),
            vec![0],
        )
        .unwrap();
        assert!(matches!(solve_linear_closed_form(&pb), Err(Error::Singular { .. })));
    }

    #[test]
    fn vca_initialisation() {
        let sc = scenario(f64::INFINITY, 30, 200, 15);
        // Force pure pixels so frame 0 contains every vertex.
        let mut a = sc.abundances.matrix().clone();
        for j in 0..3 {
            a.set_column(j, &DVector::from_fn(3, |i, _| if i == j { 1.0 } else { 0.0 }));
        }
        let y: Vec<DMatrix<f64>> = sc.truth.frames().iter().map(|s| s.matrix() * &a).collect();
        let obs = ImageSequence::new(y, vec![0.0; 20], sc.images.timestamps().to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let init = initialize_from_vca(&obs, 3, true, &mut rng).unwrap();
        assert!(init.velocities.iter().all(|v| *v == 0.0));
        for col in init.abundances.matrix().column_iter() {
            assert!((col.sum() - 1.0).abs() < 1e-9 && col.iter().all(|v| *v >= 0.0));
        }
        let cost = angle_cost(sc.truth.frame(0).matrix(), init.endmembers.matrix());
        let perm = hungarian(&cost);
        for (i, &j) in perm.iter().enumerate() {
            assert!(cost[(i, j)] < 1e-6);
        }
        let anchor = DMatrix::from_column_slice(30, 1, sc.mean.values().as_slice());
        let g = init.augmented_guess(&[perm[0]], &anchor).unwrap();
        assert!(g.rows(30, 30).iter().all(|v| *v == 0.0));
        assert!((g.rows(0, 30) - &sc.initial.position).amax() < 1e-12);

        let fd = initialize_from_vca(&obs, 3, false, &mut rng).unwrap();
        assert!(fd.velocities.iter().any(|v| *v != 0.0));
    }
}
