use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::LearnedDynamics;
use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

/// Full-batch ADAM settings. One optimiser step per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    /// Reduced budget for quick runs.
    pub fn desk() -> Self {
        Self {
            epochs: 5_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid training settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: &TrainConfig, num_params: usize) -> Self {
        Self {
            lr: lit(cfg.learning_rate),
            beta1: lit(cfg.beta1),
            beta2: lit(cfg.beta2),
            eps: lit(cfg.epsilon),
            m: vec![T::zero(); num_params],
            v: vec![T::zero(); num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * *g;
            *v = self.beta2 * *v + (one - self.beta2) * *g * *g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Training loss before each optimiser step.
    pub loss_history: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }
}

/// Teacher-forced loss: squared one-step errors summed over frames and columns.
pub fn loss<T: Real, N: LearnedDynamics<T> + ?Sized>(net: &N, frames: &[DMatrix<T>]) -> Result<T> {
    Ok(net.loss_and_gradient(frames)?.0)
}

/// Gradient of [`loss`] with respect to the flat parameter vector.
pub fn backprop<T: Real, N: LearnedDynamics<T> + ?Sized>(net: &N, frames: &[DMatrix<T>]) -> Result<Vec<T>> {
    Ok(net.loss_and_gradient(frames)?.1)
}

/// Trains `net` on consecutive pairs of `frames` (each `L x batch`).
pub fn train<T: Real, N: LearnedDynamics<T> + ?Sized>(
    net: &mut N,
    frames: &[DMatrix<T>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut params = net.params();
    let mut adam = Adam::new(cfg, params.len());
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = net.loss_and_gradient(frames)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        loss_history.push(to_f64(loss));
        adam.step(&mut params, &grad);
        net.set_params(&params)?;
    }
    Ok(TrainReport { loss_history })
}

/// `[s0, s1, .., sn]` with every step taken by the network.
pub fn rollout<T: Real, N: LearnedDynamics<T> + ?Sized>(
    net: &N,
    s0: &DMatrix<T>,
    n: usize,
) -> Result<Vec<DMatrix<T>>> {
    let mut out = vec![s0.clone()];
    out.extend(net.forecast(std::slice::from_ref(s0), n)?);
    Ok(out)
}

/// Forecasts the `n` frames following `history`. Recurrent nets use the whole
/// history as warm-up; integrator nets only its last frame.
pub fn predict_test<T: Real, N: LearnedDynamics<T> + ?Sized>(
    net: &N,
    history: &[DMatrix<T>],
    n: usize,
) -> Result<Vec<DMatrix<T>>> {
    net.forecast(history, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learndyn::{Architecture, Network, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frames(seed: u64) -> Vec<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DMatrix::from_fn(5, 3, |_, _| rng.random_range(0.2..0.8));
        (0..6).map(|t| &base * (1.0 - 0.05 * t as f64)).collect()
    }

    fn small(arch: Architecture, seed: u64) -> Network<f64> {
        let cfg = NetworkConfig {
            hidden: vec![8],
            lstm_dense: 8,
            lstm_units: 3,
            ..NetworkConfig::default()
        };
        Network::new(arch, 5, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.3, -1.2, 4.0];
        let mut adam = Adam::<f64>::new(&cfg, 3);
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
    }

    #[test]
    fn first_adam_step_has_learning_rate_size() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.0, 1.0];
        Adam::<f64>::new(&cfg, 2).step(&mut p, &[3.0, -0.5]);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let data = frames(0);
        for arch in [Architecture::Lstm, Architecture::Euler, Architecture::Rk4] {
            let mut net = small(arch, 1);
            let before = net.params();
            let cfg = TrainConfig {
                epochs: 5,
                learning_rate: 0.0,
                ..TrainConfig::default()
            };
            train(&mut net, &data, &cfg).unwrap();
            assert_eq!(net.params(), before);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = frames(2);
        for arch in [Architecture::Lstm, Architecture::Euler, Architecture::Rk4] {
            let cfg = TrainConfig {
                epochs: 200,
                ..TrainConfig::default()
            };
            let mut a = small(arch, 3);
            let ra = train(&mut a, &data, &cfg).unwrap();
            let mut b = small(arch, 3);
            let rb = train(&mut b, &data, &cfg).unwrap();
            assert_eq!(ra, rb);
            assert_eq!(a.params(), b.params());
            assert!(ra.final_loss().unwrap() < ra.loss_history[0], "{arch:?}");
        }
    }

    #[test]
    fn rollout_starts_at_initial_state() {
        let net = small(Architecture::Rk4, 0);
        let s0 = frames(1)[0].clone();
        let traj = rollout(&net, &s0, 3).unwrap();
        assert_eq!(traj.len(), 4);
        assert_eq!(traj[0], s0);
        assert_eq!(traj[1], net.teacher_forced(&[s0.clone(), s0.clone()]).unwrap()[0]);
    }

    #[test]
    fn divergence_reported() {
        let mut net = small(Architecture::Euler, 0);
        let mut data = frames(0);
        data[2][(0, 0)] = f64::NAN;
        assert!(matches!(
            train(&mut net, &data, &TrainConfig::default()),
            Err(Error::NonFinite(_)) | Err(Error::Diverged { epoch: 0 })
        ));
    }
}
