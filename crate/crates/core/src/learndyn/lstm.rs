//! Recurrent baseline: dense rectifier layer, one LSTM cell, linear readout.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::checkpoint::Header;
use super::mlp::{add_bias, glorot, row_sums};
use super::{check_frames, Architecture, LearnedDynamics};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmNet<T: Real> {
    bands: usize,
    dense: usize,
    units: usize,
    w_in: DMatrix<T>,
    b_in: DVector<T>,
    /// Input kernel, gates stacked as input, forget, cell, output.
    kernel: DMatrix<T>,
    recurrent: DMatrix<T>,
    bias: DVector<T>,
    w_out: DMatrix<T>,
    b_out: DVector<T>,
}

struct StepTape<T: Real> {
    x: DMatrix<T>,
    z: DMatrix<T>,
    h_prev: DMatrix<T>,
    c_prev: DMatrix<T>,
    gates: DMatrix<T>,
    tanh_c: DMatrix<T>,
    h: DMatrix<T>,
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Real> LstmNet<T> {
    pub fn new<R: Rng + ?Sized>(bands: usize, dense: usize, units: usize, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(bands, dense, units)?;
        net.w_in = glorot(dense, bands, rng);
        net.kernel = glorot(4 * units, dense, rng);
        net.recurrent = glorot(4 * units, units, rng);
        net.w_out = glorot(bands, units, rng);
        // Unit forget-gate bias.
        net.bias.rows_mut(units, units).fill(T::one());
        Ok(net)
    }

    pub fn zeros(bands: usize, dense: usize, units: usize) -> Result<Self> {
        if bands == 0 || dense == 0 || units == 0 {
            return Err(Error::InvalidParameter(format!(
                "LSTM sizes must be positive: bands={bands}, dense={dense}, units={units}"
            )));
        }
        Ok(Self {
            bands,
            dense,
            units,
            w_in: DMatrix::zeros(dense, bands),
            b_in: DVector::zeros(dense),
            kernel: DMatrix::zeros(4 * units, dense),
            recurrent: DMatrix::zeros(4 * units, units),
            bias: DVector::zeros(4 * units),
            w_out: DMatrix::zeros(bands, units),
            b_out: DVector::zeros(bands),
        })
    }

    pub fn dense(&self) -> usize {
        self.dense
    }

    pub fn units(&self) -> usize {
        self.units
    }

    fn step_tape(&self, x: &DMatrix<T>, h_prev: DMatrix<T>, c_prev: DMatrix<T>) -> (DMatrix<T>, StepTape<T>) {
        let hu = self.units;
        let mut z = &self.w_in * x;
        add_bias(&mut z, &self.b_in);
        z.apply(|v| *v = v.max(T::zero()));
        let mut gates = &self.kernel * &z + &self.recurrent * &h_prev;
        add_bias(&mut gates, &self.bias);
        for (r, mut row) in gates.row_iter_mut().enumerate() {
            let cell = r / hu == 2;
            row.apply(|v| *v = if cell { v.tanh() } else { sigmoid(*v) });
        }
        let i = gates.rows(0, hu);
        let f = gates.rows(hu, hu);
        let g = gates.rows(2 * hu, hu);
        let o = gates.rows(3 * hu, hu);
        let c = f.component_mul(&c_prev) + i.component_mul(&g);
        let tanh_c = c.map(|v| v.tanh());
        let h = o.component_mul(&tanh_c);
        let mut y = &self.w_out * &h;
        add_bias(&mut y, &self.b_out);
        (
            y,
            StepTape {
                x: x.clone(),
                z,
                h_prev,
                c_prev,
                gates,
                tanh_c,
                h,
            },
        )
    }

    fn c_of(tape: &StepTape<T>, hu: usize) -> DMatrix<T> {
        let i = tape.gates.rows(0, hu);
        let f = tape.gates.rows(hu, hu);
        let g = tape.gates.rows(2 * hu, hu);
        f.component_mul(&tape.c_prev) + i.component_mul(&g)
    }

    /// Outputs after consuming each input, plus the final state.
    fn run(&self, inputs: &[DMatrix<T>]) -> (Vec<DMatrix<T>>, Vec<StepTape<T>>) {
        let b = inputs[0].ncols();
        let mut h = DMatrix::zeros(self.units, b);
        let mut c = DMatrix::zeros(self.units, b);
        let mut outs = Vec::with_capacity(inputs.len());
        let mut tapes = Vec::with_capacity(inputs.len());
        for x in inputs {
            let (y, tape) = self.step_tape(x, h, c);
            c = Self::c_of(&tape, self.units);
            h = tape.h.clone();
            outs.push(y);
            tapes.push(tape);
        }
        (outs, tapes)
    }

    fn offsets(&self) -> [usize; 7] {
        let sizes = [
            self.w_in.len(),
            self.b_in.len(),
            self.kernel.len(),
            self.recurrent.len(),
            self.bias.len(),
            self.w_out.len(),
            self.b_out.len(),
        ];
        let mut off = [0; 7];
        for k in 1..7 {
            off[k] = off[k - 1] + sizes[k - 1];
        }
        off
    }

    fn backward(&self, tapes: &[StepTape<T>], gys: &[DMatrix<T>], grad: &mut [T]) {
        let hu = self.units;
        let off = self.offsets();
        let acc = |grad: &mut [T], start: usize, m: &DMatrix<T>| {
            for (dst, src) in grad[start..start + m.len()].iter_mut().zip(m.iter()) {
                *dst += *src;
            }
        };
        let b = gys[0].ncols();
        let mut dh_next = DMatrix::zeros(hu, b);
        let mut dc_next = DMatrix::zeros(hu, b);
        for (tape, gy) in tapes.iter().zip(gys).rev() {
            acc(grad, off[5], &(gy * tape.h.transpose()));
            acc(grad, off[6], &DMatrix::from_column_slice(self.bands, 1, row_sums(gy).as_slice()));
            let dh = self.w_out.transpose() * gy + &dh_next;
            let i = tape.gates.rows(0, hu);
            let f = tape.gates.rows(hu, hu);
            let g = tape.gates.rows(2 * hu, hu);
            let o = tape.gates.rows(3 * hu, hu);
            let one = T::one();
            let dc = dh.component_mul(&o).zip_map(&tape.tanh_c, |v, t| v * (one - t * t)) + &dc_next;
            let mut dpre = DMatrix::zeros(4 * hu, b);
            for r in 0..hu {
                for col in 0..b {
                    let (iv, fv, gv, ov) = (i[(r, col)], f[(r, col)], g[(r, col)], o[(r, col)]);
                    let dcv = dc[(r, col)];
                    dpre[(r, col)] = dcv * gv * iv * (one - iv);
                    dpre[(hu + r, col)] = dcv * tape.c_prev[(r, col)] * fv * (one - fv);
                    dpre[(2 * hu + r, col)] = dcv * iv * (one - gv * gv);
                    dpre[(3 * hu + r, col)] = dh[(r, col)] * tape.tanh_c[(r, col)] * ov * (one - ov);
                }
            }
            dc_next = dc.component_mul(&f);
            acc(grad, off[2], &(&dpre * tape.z.transpose()));
            acc(grad, off[3], &(&dpre * tape.h_prev.transpose()));
            acc(grad, off[4], &DMatrix::from_column_slice(4 * hu, 1, row_sums(&dpre).as_slice()));
            dh_next = self.recurrent.transpose() * &dpre;
            let mut dz = self.kernel.transpose() * &dpre;
            dz.zip_apply(&tape.z, |d, z| {
                if z <= T::zero() {
                    *d = T::zero();
                }
            });
            acc(grad, off[0], &(&dz * tape.x.transpose()));
            acc(grad, off[1], &DMatrix::from_column_slice(self.dense, 1, row_sums(&dz).as_slice()));
        }
    }
}

impl<T: Real> LearnedDynamics<T> for LstmNet<T> {
    fn architecture(&self) -> Architecture {
        Architecture::Lstm
    }

    fn bands(&self) -> usize {
        self.bands
    }

    fn num_params(&self) -> usize {
        let off = self.offsets();
        off[6] + self.b_out.len()
    }

    fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for s in [
            self.w_in.as_slice(),
            self.b_in.as_slice(),
            self.kernel.as_slice(),
            self.recurrent.as_slice(),
            self.bias.as_slice(),
            self.w_out.as_slice(),
            self.b_out.as_slice(),
        ] {
            out.extend_from_slice(s);
        }
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
        let mut off = 0;
        for dst in [
            self.w_in.as_mut_slice(),
            self.b_in.as_mut_slice(),
            self.kernel.as_mut_slice(),
            self.recurrent.as_mut_slice(),
            self.bias.as_mut_slice(),
            self.w_out.as_mut_slice(),
            self.b_out.as_mut_slice(),
        ] {
            let n = dst.len();
            dst.copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn param_layout(&self) -> Vec<(String, usize, usize)> {
        let (l, d, u) = (self.bands, self.dense, self.units);
        vec![
            ("input.weight".into(), d, l),
            ("input.bias".into(), d, 1),
            ("lstm.kernel".into(), 4 * u, d),
            ("lstm.recurrent".into(), 4 * u, u),
            ("lstm.bias".into(), 4 * u, 1),
            ("readout.weight".into(), l, u),
            ("readout.bias".into(), l, 1),
        ]
    }

    fn teacher_forced(&self, frames: &[DMatrix<T>]) -> Result<Vec<DMatrix<T>>> {
        check_frames(frames, self.bands, 2)?;
        Ok(self.run(&frames[..frames.len() - 1]).0)
    }

    fn loss_and_gradient(&self, frames: &[DMatrix<T>]) -> Result<(T, Vec<T>)> {
        check_frames(frames, self.bands, 2)?;
        let (outs, tapes) = self.run(&frames[..frames.len() - 1]);
        let two = T::one() + T::one();
        let mut loss = T::zero();
        let gys: Vec<DMatrix<T>> = outs
            .iter()
            .zip(&frames[1..])
            .map(|(y, target)| {
                let d = y - target;
                loss += d.norm_squared();
                d * two
            })
            .collect();
        let mut grad = vec![T::zero(); self.num_params()];
        self.backward(&tapes, &gys, &mut grad);
        Ok((loss, grad))
    }

    fn forecast(&self, history: &[DMatrix<T>], n: usize) -> Result<Vec<DMatrix<T>>> {
        check_frames(history, self.bands, 1)?;
        let (outs, tapes) = self.run(history);
        let last = tapes.last().unwrap();
        let mut c = Self::c_of(last, self.units);
        let mut h = last.h.clone();
        let mut y = outs.last().unwrap().clone();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            out.push(y.clone());
            if k + 1 < n {
                let (next, tape) = self.step_tape(&y, h, c);
                c = Self::c_of(&tape, self.units);
                h = tape.h;
                y = next;
            }
        }
        Ok(out)
    }

    fn header(&self) -> Header {
        Header::new(
            Architecture::Lstm,
            self.bands,
            vec![self.bands, self.dense, self.units, self.bands],
            self.param_layout(),
        )
        .with_lstm(self.dense, self.units)
    }
}
