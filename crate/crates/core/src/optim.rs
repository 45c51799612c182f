//! Adam over named parameter groups and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a fixed list of parameter groups, each with its own learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    pub learning_rates: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Outcome of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients contained NaN or infinity; parameters and moments were left untouched.
    SkippedNonFinite,
}

impl OptState {
    pub fn new(group_sizes: &[usize], learning_rates: &[f64]) -> Self {
        assert_eq!(group_sizes.len(), learning_rates.len());
        Self {
            step: 0,
            learning_rates: learning_rates.to_vec(),
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected Adam update of every group.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> StepOutcome {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len());
            assert_eq!(p.len(), self.m[gi].len());
            let lr = self.learning_rates[gi];
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            for i in 0..p.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        StepOutcome::Applied
    }
}

/// Global L2 norm over all groups.
pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all groups jointly so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut opt = OptState::new(&[3], &[0.1]);
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![0.0; 3];
        assert_eq!(opt.step(&mut [&mut p], &[&g]), StepOutcome::Applied);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_is_sign_like() {
        let mut opt = OptState::new(&[3], &[0.01]);
        let mut p = vec![0.0; 3];
        let g = vec![2.0, -0.5, 1e-3];
        opt.step(&mut [&mut p], &[&g]);
        for i in 0..3 {
            let expected = -0.01 * g[i] / (g[i].abs() + ADAM_EPS);
            assert!((p[i] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_decreases_monotonically() {
        let mut opt = OptState::new(&[1], &[1e-3]);
        let mut p = vec![0.0];
        let mut prev = p[0];
        for _ in 0..1000 {
            opt.step(&mut [&mut p], &[&[1.0]]);
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn non_finite_gradient_skips() {
        let mut opt = OptState::new(&[2], &[0.1]);
        let mut p = vec![1.0, 1.0];
        let out = opt.step(&mut [&mut p], &[&[f64::NAN, 0.0]]);
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn groups_use_their_own_learning_rate() {
        let mut opt = OptState::new(&[1, 1], &[0.1, 0.001]);
        let (mut a, mut b) = (vec![0.0], vec![0.0]);
        opt.step(&mut [&mut a, &mut b], &[&[1.0], &[1.0]]);
        assert!((a[0] + 0.1).abs() < 1e-6);
        assert!((b[0] + 0.001).abs() < 1e-8);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.3, 0.4];
        assert_eq!(clip_global(&mut [&mut g], 1.0), 0.5);
        assert_eq!(g, vec![0.3, 0.4]);
        let mut g = vec![3.0, 4.0];
        clip_global(&mut [&mut g], 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(a in proptest::collection::vec(-1e3f64..1e3, 1..20),
                                   b in proptest::collection::vec(-1e3f64..1e3, 0..20)) {
            let (mut a, mut b) = (a, b);
            clip_global(&mut [&mut a, &mut b], 1.0);
            prop_assert!(global_norm(&[&a, &b]) <= 1.0 + 1e-12);
        }
    }
}
