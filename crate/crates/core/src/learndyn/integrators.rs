//! Networks whose recurrence is a fixed explicit integration scheme around a
//! learned vector field.

use nalgebra::{DMatrix, DVector};

use super::checkpoint::Header;
use super::mlp::{MlpBlock, MlpTape};
use super::{check_frames, hstack, split_columns, Architecture, LearnedDynamics};
use crate::error::{Error, Result};
use crate::model::{Dynamics, Spectrum};
use crate::scalar::{lit, to_f64, Real};

fn check_block<T: Real>(block: &MlpBlock<T>, h: T) -> Result<()> {
    if block.input_len() != block.output_len() {
        return Err(Error::Shape(format!(
            "vector field maps {} to {} values",
            block.input_len(),
            block.output_len()
        )));
    }
    if !(h >= T::zero()) || !h.is_finite() {
        return Err(Error::InvalidParameter(format!("integration step must be >= 0, got {h}")));
    }
    Ok(())
}

/// Residual network `s' = s + h F(s)`: one explicit Euler step of a learned field.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerNet<T: Real> {
    pub block: MlpBlock<T>,
    pub h: T,
}

impl<T: Real> EulerNet<T> {
    pub fn new(block: MlpBlock<T>, h: T) -> Result<Self> {
        check_block(&block, h)?;
        Ok(Self { block, h })
    }

    /// One step applied to every column of `x`.
    pub fn step(&self, x: &DMatrix<T>) -> DMatrix<T> {
        x + self.block.forward_batch(x) * self.h
    }

    fn step_tape(&self, x: &DMatrix<T>) -> (DMatrix<T>, MlpTape<T>) {
        let (f, tape) = self.block.forward_tape(x);
        (x + f * self.h, tape)
    }

    fn step_backward(&self, tape: &MlpTape<T>, gy: &DMatrix<T>, grad: Option<&mut [T]>) -> DMatrix<T> {
        gy + self.block.backward(tape, &(gy * self.h), grad)
    }
}

/// `s + h F(s)` for one spectrum.
pub fn euler_step<T: Real>(net: &EulerNet<T>, s: &Spectrum<T>) -> Result<Spectrum<T>> {
    if s.len() != net.block.input_len() {
        return Err(Error::Shape(format!(
            "net expects {} bands, got {}",
            net.block.input_len(),
            s.len()
        )));
    }
    let x = DMatrix::from_column_slice(s.len(), 1, s.values().as_slice());
    Spectrum::from_vector(net.step(&x).column(0).into_owned())
}

/// Classical fourth-order Runge-Kutta around a learned field:
/// `k_i = h F(s + b_i k_{i-1})`, `s' = s + sum a_i k_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rk4Net<T: Real> {
    pub block: MlpBlock<T>,
    pub h: T,
    alpha: [T; 4],
    beta: [T; 4],
}

struct Rk4Tape<T: Real> {
    tapes: Vec<MlpTape<T>>,
}

impl<T: Real> Rk4Net<T> {
    pub fn new(block: MlpBlock<T>, h: T) -> Result<Self> {
        check_block(&block, h)?;
        let (sixth, third, half) = (lit(1.0 / 6.0), lit(1.0 / 3.0), lit(0.5));
        Ok(Self {
            block,
            h,
            alpha: [sixth, third, third, sixth],
            beta: [T::zero(), half, half, T::one()],
        })
    }

    pub fn alpha(&self) -> [T; 4] {
        self.alpha
    }

    pub fn beta(&self) -> [T; 4] {
        self.beta
    }

    pub fn step(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut out = x.clone();
        let mut k = DMatrix::zeros(x.nrows(), x.ncols());
        for i in 0..4 {
            let u = x + &k * self.beta[i];
            k = self.block.forward_batch(&u) * self.h;
            out += &k * self.alpha[i];
        }
        out
    }

    fn step_tape(&self, x: &DMatrix<T>) -> (DMatrix<T>, Rk4Tape<T>) {
        let mut out = x.clone();
        let mut k = DMatrix::zeros(x.nrows(), x.ncols());
        let mut tapes = Vec::with_capacity(4);
        for i in 0..4 {
            let u = x + &k * self.beta[i];
            let (f, tape) = self.block.forward_tape(&u);
            k = f * self.h;
            out += &k * self.alpha[i];
            tapes.push(tape);
        }
        (out, Rk4Tape { tapes })
    }

    fn step_backward(&self, tape: &Rk4Tape<T>, gy: &DMatrix<T>, mut grad: Option<&mut [T]>) -> DMatrix<T> {
        let mut gx = gy.clone();
        // Gradient flowing into k_i from later stages.
        let mut gk_carry = DMatrix::zeros(gy.nrows(), gy.ncols());
        for i in (0..4).rev() {
            let gk = gy * self.alpha[i] + &gk_carry;
            let gu = self
                .block
                .backward(&tape.tapes[i], &(gk * self.h), grad.as_deref_mut());
            gx += &gu;
            gk_carry = gu * self.beta[i];
        }
        gx
    }
}

/// One classical RK4 step of the learned field for one spectrum.
pub fn rk4_step<T: Real>(net: &Rk4Net<T>, s: &Spectrum<T>) -> Result<Spectrum<T>> {
    if s.len() != net.block.input_len() {
        return Err(Error::Shape(format!(
            "net expects {} bands, got {}",
            net.block.input_len(),
            s.len()
        )));
    }
    let x = DMatrix::from_column_slice(s.len(), 1, s.values().as_slice());
    Spectrum::from_vector(net.step(&x).column(0).into_owned())
}

macro_rules! integrator_impls {
    ($net:ident, $arch:expr) => {
        impl<T: Real> LearnedDynamics<T> for $net<T> {
            fn architecture(&self) -> Architecture {
                $arch
            }

            fn bands(&self) -> usize {
                self.block.input_len()
            }

            fn num_params(&self) -> usize {
                self.block.num_params()
            }

            fn params(&self) -> Vec<T> {
                let mut out = Vec::with_capacity(self.num_params());
                self.block.write_params(&mut out);
                out
            }

            fn set_params(&mut self, params: &[T]) -> Result<()> {
                if params.len() != self.num_params() {
                    return Err(Error::Shape(format!(
                        "{} parameters for a net with {}",
                        params.len(),
                        self.num_params()
                    )));
                }
                self.block.read_params(params);
                Ok(())
            }

            fn param_layout(&self) -> Vec<(String, usize, usize)> {
                self.block.layout("field")
            }

            fn teacher_forced(&self, frames: &[DMatrix<T>]) -> Result<Vec<DMatrix<T>>> {
                check_frames(frames, self.bands(), 2)?;
                let x = hstack(&frames[..frames.len() - 1]);
                Ok(split_columns(&self.step(&x), frames[0].ncols()))
            }

            fn loss_and_gradient(&self, frames: &[DMatrix<T>]) -> Result<(T, Vec<T>)> {
                check_frames(frames, self.bands(), 2)?;
                let x = hstack(&frames[..frames.len() - 1]);
                let target = hstack(&frames[1..]);
                let (pred, tape) = self.step_tape(&x);
                let diff = pred - target;
                let loss = diff.norm_squared();
                let mut grad = vec![T::zero(); self.num_params()];
                self.step_backward(&tape, &(diff * lit::<T>(2.0)), Some(&mut grad));
                Ok((loss, grad))
            }

            fn forecast(&self, history: &[DMatrix<T>], n: usize) -> Result<Vec<DMatrix<T>>> {
                check_frames(history, self.bands(), 1)?;
                let mut x = history.last().unwrap().clone();
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    x = self.step(&x);
                    out.push(x.clone());
                }
                Ok(out)
            }

            fn header(&self) -> Header {
                let (alpha, beta) = self.coefficients();
                Header::new(
                    $arch,
                    self.bands(),
                    self.block.sizes().to_vec(),
                    self.param_layout(),
                )
                .with_integrator(to_f64(self.h), alpha, beta)
            }
        }

        impl<T: Real> Dynamics<T> for $net<T> {
            fn state_len(&self, bands: usize) -> usize {
                bands
            }

            fn step(&self, state: &DVector<T>) -> Result<DVector<T>> {
                if state.len() != self.bands() {
                    return Err(Error::Shape(format!(
                        "state of length {}, net has {} bands",
                        state.len(),
                        self.bands()
                    )));
                }
                let x = DMatrix::from_column_slice(state.len(), 1, state.as_slice());
                Ok($net::step(self, &x).column(0).into_owned())
            }

            fn jacobian_transpose_apply(
                &self,
                state: &DVector<T>,
                cotangent: &DVector<T>,
            ) -> Result<DVector<T>> {
                if state.len() != self.bands() || cotangent.len() != self.bands() {
                    return Err(Error::Shape("state/cotangent length mismatch".into()));
                }
                let x = DMatrix::from_column_slice(state.len(), 1, state.as_slice());
                let g = DMatrix::from_column_slice(state.len(), 1, cotangent.as_slice());
                let (_, tape) = self.step_tape(&x);
                Ok(self.step_backward(&tape, &g, None).column(0).into_owned())
            }

            fn descriptor(&self) -> String {
                format!("{}(layers={:?}, h={})", $arch.name(), self.block.sizes(), self.h)
            }
        }
    };
}

integrator_impls!(EulerNet, Architecture::Euler);
integrator_impls!(Rk4Net, Architecture::Rk4);

impl<T: Real> EulerNet<T> {
    fn coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![1.0], vec![0.0])
    }
}

impl<T: Real> Rk4Net<T> {
    fn coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.alpha.iter().map(|v| to_f64(*v)).collect(),
            self.beta.iter().map(|v| to_f64(*v)).collect(),
        )
    }
}
