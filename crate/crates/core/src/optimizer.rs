//! Base optimizers consuming the composed gradient. The adaptive optimizer
//! exposes its second-moment state so a metric snapshot can be taken from it.

use crate::error::{check_dim, check_finite, GuError, Result};
use crate::metric::{DiagonalMetric, DEFAULT_EPSILON};

pub fn sgd_step(theta: &[f64], gradient: &[f64], learning_rate: f64) -> Result<Vec<f64>> {
    check_dim(theta.len(), gradient.len())?;
    if !(learning_rate > 0.0) {
        return Err(GuError::InvalidInput(format!("learning rate must be positive, got {learning_rate}")));
    }
    Ok(theta.iter().zip(gradient).map(|(t, g)| t - learning_rate * g).collect())
}

/// Adam-style state: EMA of gradients and squared gradients with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub epsilon: f64,
    /// Feed the bias-corrected `v̂` to the metric (otherwise the raw accumulator).
    pub bias_corrected_metric: bool,
}

impl AdaptiveState {
    pub fn new(dim: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            learning_rate,
            epsilon: DEFAULT_EPSILON,
            bias_corrected_metric: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GuError::InvalidInput(format!(
                "decay rates must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GuError::InvalidInput(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(GuError::InvalidInput(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        check_dim(self.first_moment.len(), self.second_moment.len())
    }

    pub fn dim(&self) -> usize {
        self.first_moment.len()
    }

    /// Updates both moments and the step counter without touching parameters.
    pub fn accumulate(&mut self, gradient: &[f64]) -> Result<()> {
        check_dim(self.dim(), gradient.len())?;
        check_finite(gradient, "gradient")?;
        let (b1, b2) = (self.beta1, self.beta2);
        for ((m, v), g) in self.first_moment.iter_mut().zip(self.second_moment.iter_mut()).zip(gradient) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
        self.step_count += 1;
        Ok(())
    }

    fn correction(beta: f64, t: u64) -> f64 {
        1.0 - beta.powi(t.min(i32::MAX as u64) as i32)
    }

    /// Bias-corrected second moment (zeros before the first step).
    pub fn second_moment_hat(&self) -> Vec<f64> {
        if self.step_count == 0 {
            return self.second_moment.clone();
        }
        let c = Self::correction(self.beta2, self.step_count);
        self.second_moment.iter().map(|v| v / c).collect()
    }

    /// One Adam step in place; on a non-finite gradient nothing changes.
    pub fn step(&mut self, theta: &[f64], gradient: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        self.accumulate(gradient)?;
        let c1 = Self::correction(self.beta1, self.step_count);
        let c2 = Self::correction(self.beta2, self.step_count);
        Ok(theta
            .iter()
            .zip(&self.first_moment)
            .zip(&self.second_moment)
            .map(|((t, m), v)| t - self.learning_rate * (m / c1) / ((v / c2).sqrt() + self.epsilon))
            .collect())
    }

    /// Frozen metric built from the current second moment.
    pub fn snapshot_metric(&self) -> DiagonalMetric {
        let v = if self.bias_corrected_metric { self.second_moment_hat() } else { self.second_moment.clone() };
        DiagonalMetric::from_second_moments(&v, self.epsilon)
            .expect("second moments are finite and nonnegative by construction")
    }
}

/// Functional form of [`AdaptiveState::step`].
pub fn adaptive_step(state: &AdaptiveState, theta: &[f64], gradient: &[f64]) -> Result<(Vec<f64>, AdaptiveState)> {
    let mut next = state.clone();
    let theta = next.step(theta, gradient)?;
    Ok((theta, next))
}

pub fn snapshot_metric(state: &AdaptiveState) -> DiagonalMetric {
    state.snapshot_metric()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd { learning_rate: f64 },
    Adaptive(AdaptiveState),
}

impl Optimizer {
    pub fn step(&mut self, theta: &[f64], gradient: &[f64]) -> Result<Vec<f64>> {
        check_finite(gradient, "gradient")?;
        match self {
            Optimizer::Sgd { learning_rate } => sgd_step(theta, gradient, *learning_rate),
            Optimizer::Adaptive(s) => s.step(theta, gradient),
        }
    }

    /// Moments only; a no-op for SGD.
    pub fn accumulate(&mut self, gradient: &[f64]) -> Result<()> {
        match self {
            Optimizer::Sgd { .. } => check_finite(gradient, "gradient"),
            Optimizer::Adaptive(s) => s.accumulate(gradient),
        }
    }

    /// The preconditioner's metric; identity for SGD.
    pub fn snapshot_metric(&self, dim: usize) -> DiagonalMetric {
        match self {
            Optimizer::Sgd { .. } => DiagonalMetric::identity(dim),
            Optimizer::Adaptive(s) => s.snapshot_metric(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_step(&[1.0, 2.0], &[0.0, 0.0], 0.1).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sgd_step(&[1.0], &[2.0], 0.5).unwrap(), vec![0.0]);
        assert!(sgd_step(&[1.0], &[2.0, 1.0], 0.5).is_err());
        assert!(sgd_step(&[1.0], &[2.0], 0.0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = sgd_step(&t, &g, 0.3).unwrap();
        for i in 0..7 {
            assert_eq!(out[i], t[i] - 0.3 * g[i]);
        }
    }

    #[test]
    fn first_adaptive_step_is_sign_like() {
        let mut s = AdaptiveState::new(3, 0.1);
        let g = [2.0, -0.5, 1e-3];
        let theta = s.step(&[0.0; 3], &g).unwrap();
        for (t, gi) in theta.iter().zip(&g) {
            let expect = -0.1 * gi / (gi.abs() + s.epsilon);
            assert!((t - expect).abs() < 1e-15);
        }
        assert_eq!(s.step_count, 1);
        let vh = s.second_moment_hat();
        for (v, gi) in vh.iter().zip(&g) {
            assert!((v - gi * gi).abs() <= 1e-15 * gi * gi);
        }
    }

    #[test]
    fn zero_gradient_stream_keeps_theta_and_decays_moments() {
        let mut s = AdaptiveState::new(2, 0.1);
        let mut theta = s.step(&[1.0, 1.0], &[1.0, -1.0]).unwrap();
        let m0 = s.second_moment.clone();
        for _ in 0..20 {
            theta = s.step(&theta, &[0.0, 0.0]).unwrap();
        }
        assert!(theta.iter().all(|x| x.is_finite()));
        assert!(s.second_moment.iter().zip(&m0).all(|(a, b)| a < b));
        let mut fresh = AdaptiveState::new(2, 0.1);
        let theta = fresh.step(&[0.5, 0.5], &[0.0, 0.0]).unwrap();
        assert_eq!(theta, vec![0.5, 0.5]);
    }

    #[test]
    fn non_finite_gradient_leaves_state_unchanged() {
        let mut s = AdaptiveState::new(2, 0.1);
        s.step(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let before = s.clone();
        assert!(s.step(&[0.0, 0.0], &[f64::NAN, 1.0]).is_err());
        assert_eq!(s, before);
    }

    /// Independent re-statement of the recurrences, written in the
    /// textbook per-coordinate form.
    fn reference_adam(theta0: &[f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) -> Vec<f64> {
        let mut theta = theta0.to_vec();
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        for (k, g) in grads.iter().enumerate() {
            let t = (k + 1) as f64;
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1.powf(t));
                let vh = v[i] / (1.0 - b2.powf(t));
                theta[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        theta
    }

    #[test]
    fn matches_reference_recurrences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let grads: Vec<Vec<f64>> = (0..100).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let theta0: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = AdaptiveState::new(6, 0.01);
        let mut theta = theta0.clone();
        for g in &grads {
            theta = s.step(&theta, g).unwrap();
        }
        let reference = reference_adam(&theta0, &grads, 0.01, 0.9, 0.999, 1e-8);
        for (a, b) in theta.iter().zip(&reference) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn snapshot_metric_cases() {
        let s = AdaptiveState::new(3, 0.1);
        let m = s.snapshot_metric();
        assert!(m.diag_h().iter().all(|h| (h - 1.0 / s.epsilon).abs() <= 1e-8 / s.epsilon));

        let mut s = AdaptiveState::new(2, 0.1);
        let g = [0.5, -2.0];
        let mut theta = vec![0.0, 0.0];
        for _ in 0..5000 {
            theta = s.step(&theta, &g).unwrap();
        }
        let m = s.snapshot_metric();
        for (h, gi) in m.diag_h().iter().zip(&g) {
            let expect = 1.0 / (gi * gi + s.epsilon);
            assert!((h - expect).abs() <= 1e-9 * expect);
        }

        let snap = s.snapshot_metric();
        s.step(&theta, &[10.0, 10.0]).unwrap();
        assert_ne!(s.snapshot_metric(), snap);
        assert!((snap.diag_h()[0] - 1.0 / (0.25 + s.epsilon)).abs() < 1e-6);
    }

    #[test]
    fn raw_accumulator_metric_mode() {
        let mut s = AdaptiveState::new(1, 0.1);
        s.bias_corrected_metric = false;
        s.accumulate(&[2.0]).unwrap();
        let m = s.snapshot_metric();
        let expect = 1.0 / (0.001 * 4.0 + s.epsilon);
        assert!((m.diag_h()[0] - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn degenerates_to_scaled_sgd_with_large_epsilon() {
        // β₁ = β₂ = 0 and ε ≫ |g|: update ≈ (lr/ε)·g.
        let q = crate::models::QuadraticObjective::new(vec![1.0, -1.0], vec![2.0, 0.5]).unwrap();
        use crate::models::Objective;
        let mut s = AdaptiveState::new(2, 1e4);
        s.beta1 = 0.0;
        s.beta2 = 0.0;
        s.epsilon = 1e6;
        let sgd_lr = s.learning_rate / s.epsilon;
        let mut a = vec![0.0, 0.0];
        let mut b = vec![0.0, 0.0];
        for _ in 0..50 {
            a = s.step(&a, &q.gradient(&a).unwrap()).unwrap();
            b = sgd_step(&b, &q.gradient(&b).unwrap(), sgd_lr).unwrap();
        }
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-4 * y.abs().max(1e-6));
        }
    }
}
