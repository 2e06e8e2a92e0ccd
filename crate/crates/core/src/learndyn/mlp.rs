use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Spectrum;
use crate::scalar::{lit, Real};

/// Glorot-uniform `rows x cols` matrix.
pub(crate) fn glorot<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<T> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| lit(rng.random_range(-limit..=limit)))
}

pub(crate) fn add_bias<T: Real>(m: &mut DMatrix<T>, b: &DVector<T>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

pub(crate) fn row_sums<T: Real>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_fn(m.nrows(), |i, _| m.row(i).sum())
}

/// Fully connected network: rectifier on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock<T: Real> {
    sizes: Vec<usize>,
    weights: Vec<DMatrix<T>>,
    biases: Vec<DVector<T>>,
}

/// Activations kept for the backward pass.
pub(crate) struct MlpTape<T: Real> {
    inputs: Vec<DMatrix<T>>,
}

impl<T: Real> MlpBlock<T> {
    /// Random Glorot weights, zero biases. `sizes = [input, hidden.., output]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut block = Self::zeros(sizes)?;
        for (w, pair) in block.weights.iter_mut().zip(sizes.windows(2)) {
            *w = glorot(pair[1], pair[0], rng);
        }
        Ok(block)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|p| DMatrix::zeros(p[1], p[0])).collect(),
            biases: sizes[1..].iter().map(|&n| DVector::zeros(n)).collect(),
        })
    }

    pub fn from_layers(weights: Vec<DMatrix<T>>, biases: Vec<DVector<T>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Shape("one bias per weight matrix required".into()));
        }
        let mut sizes = vec![weights[0].ncols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.ncols() != *sizes.last().unwrap() || w.nrows() != b.len() {
                return Err(Error::Shape(format!("layer {i} does not chain")));
            }
            sizes.push(w.nrows());
        }
        Ok(Self {
            sizes,
            weights,
            biases,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|p| p[1] * p[0] + p[1]).sum()
    }

    pub(crate) fn layout(&self, prefix: &str) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        for (i, p) in self.sizes.windows(2).enumerate() {
            out.push((format!("{prefix}.layer{i}.weight"), p[1], p[0]));
            out.push((format!("{prefix}.layer{i}.bias"), p[1], 1));
        }
        out
    }

    pub(crate) fn write_params(&self, out: &mut Vec<T>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
    }

    /// Reads parameters from the front of `src`; returns the number consumed.
    pub(crate) fn read_params(&mut self, src: &[T]) -> usize {
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&src[off..off + n]);
            off += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&src[off..off + n]);
            off += n;
        }
        off
    }

    /// Evaluates the block on one spectrum.
    pub fn forward(&self, x: &Spectrum<T>) -> Result<Spectrum<T>> {
        if x.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "block expects {} inputs, got {}",
                self.input_len(),
                x.len()
            )));
        }
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x.values().as_slice()));
        Spectrum::from_vector(out.column(0).into_owned())
    }

    /// Evaluates the block on every column of `x`.
    pub fn forward_batch(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            add_bias(&mut z, b);
            if i < last {
                z.apply(|v| *v = v.max(T::zero()));
            }
            a = z;
        }
        a
    }

    pub(crate) fn forward_tape(&self, x: &DMatrix<T>) -> (DMatrix<T>, MlpTape<T>) {
        let last = self.weights.len() - 1;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut a = x.clone();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            add_bias(&mut z, b);
            if i < last {
                z.apply(|v| *v = v.max(T::zero()));
            }
            inputs.push(std::mem::replace(&mut a, z));
        }
        (a, MlpTape { inputs })
    }

    /// Back-propagates `gy` (gradient w.r.t. the output); accumulates parameter
    /// gradients into `grad` in [`Self::write_params`] order when given and
    /// returns the gradient w.r.t. the input.
    pub(crate) fn backward(
        &self,
        tape: &MlpTape<T>,
        gy: &DMatrix<T>,
        mut grad: Option<&mut [T]>,
    ) -> DMatrix<T> {
        let n_layers = self.weights.len();
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for w in &self.weights {
            offsets.push(off);
            off += w.len() + w.nrows();
        }
        let mut g = gy.clone();
        for i in (0..n_layers).rev() {
            let input = &tape.inputs[i];
            if let Some(buf) = grad.as_deref_mut() {
                let w = &self.weights[i];
                let gw = &g * input.transpose();
                let start = offsets[i];
                for (dst, src) in buf[start..start + w.len()].iter_mut().zip(gw.iter()) {
                    *dst += *src;
                }
                let gb = row_sums(&g);
                let bstart = start + w.len();
                for (dst, src) in buf[bstart..bstart + gb.len()].iter_mut().zip(gb.iter()) {
                    *dst += *src;
                }
            }
            let mut gin = self.weights[i].transpose() * &g;
            if i > 0 {
                // `input` is the rectified output of layer i-1.
                gin.zip_apply(input, |gv, a| {
                    if a <= T::zero() {
                        *gv = T::zero();
                    }
                });
            }
            g = gin;
        }
        g
    }
}

/// Evaluates `block` on one spectrum.
pub fn mlp_forward<T: Real>(block: &MlpBlock<T>, x: &Spectrum<T>) -> Result<Spectrum<T>> {
    block.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_block_outputs_zero() {
        let b = MlpBlock::<f64>::zeros(&[4, 8, 4]).unwrap();
        let x = Spectrum::new(vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        assert!(b.forward(&x).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_passes_through() {
        let b = MlpBlock::from_layers(vec![DMatrix::<f64>::identity(3, 3)], vec![DVector::zeros(3)]).unwrap();
        let x = Spectrum::new(vec![0.3, -1.0, 2.0]).unwrap();
        assert_eq!(b.forward(&x).unwrap(), x);
    }

    #[test]
    fn matches_hand_rolled_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = MlpBlock::<f64>::new(&[5, 7, 6, 5], &mut rng).unwrap();
        let mut params = Vec::new();
        b.write_params(&mut params);
        // Give biases nonzero values too.
        let params: Vec<f64> = params.iter().enumerate().map(|(i, v)| v + 0.01 * ((i % 7) as f64 - 3.0)).collect();
        let mut b = b;
        b.read_params(&params);
        let x = [0.2, -0.4, 0.9, 0.1, -0.7];
        // Explicit loops over the flat column-major layout.
        let sizes = [5usize, 7, 6, 5];
        let mut act = x.to_vec();
        let mut off = 0;
        for layer in 0..3 {
            let (nin, nout) = (sizes[layer], sizes[layer + 1]);
            let w = &params[off..off + nin * nout];
            let bias = &params[off + nin * nout..off + nin * nout + nout];
            off += nin * nout + nout;
            let mut next = vec![0.0; nout];
            for r in 0..nout {
                let mut acc = bias[r];
                for c in 0..nin {
                    acc += w[c * nout + r] * act[c];
                }
                next[r] = if layer < 2 { acc.max(0.0) } else { acc };
            }
            act = next;
        }
        let got = b.forward(&Spectrum::new(x.to_vec()).unwrap()).unwrap();
        for (g, e) in got.values().iter().zip(&act) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let b = MlpBlock::<f64>::zeros(&[3, 2]).unwrap();
        assert!(b.forward(&Spectrum::new(vec![1.0, 2.0]).unwrap()).is_err());
        assert!(MlpBlock::<f64>::zeros(&[3]).is_err());
        assert!(MlpBlock::<f64>::zeros(&[3, 0, 2]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = MlpBlock::<f64>::new(&[4, 6, 3], &mut rng).unwrap();
        let x = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let gy = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let (_, tape) = b.forward_tape(&x);
        let mut grad = vec![0.0; b.num_params()];
        let gx = b.backward(&tape, &gy, Some(&mut grad));
        let f = |blk: &MlpBlock<f64>, x: &DMatrix<f64>| blk.forward_batch(x).dot(&gy);
        let mut params = Vec::new();
        b.write_params(&mut params);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut bp = b.clone();
            let mut pp = params.clone();
            pp[i] += h;
            bp.read_params(&pp);
            let mut bm = b.clone();
            pp[i] -= 2.0 * h;
            bm.read_params(&pp);
            let fd = (f(&bp, &x) - f(&bm, &x)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6, "param {i}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f(&b, &xp) - f(&b, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-6);
        }
    }
}
