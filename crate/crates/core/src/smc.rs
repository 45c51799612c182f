//! Effective sample size, adaptive resampling and HMC refinement.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annealing::AnnealingPath;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleScheme {
    #[default]
    Multinomial,
    Systematic,
}

/// Weighted particles. Log-weights are kept normalized (`logsumexp = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Array2<f64>,
    pub log_weights: Vec<f64>,
    pub ancestry: Vec<usize>,
    /// Subtrajectory index of the last resampling event (0 = prior time).
    pub last_resample_subtraj: usize,
}

impl ParticleEnsemble {
    pub fn uniform(positions: Array2<f64>) -> Self {
        let k = positions.nrows();
        Self {
            positions,
            log_weights: vec![-(k as f64).ln(); k],
            ancestry: (0..k).collect(),
            last_resample_subtraj: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }
}

/// `(Σw)²/Σw²` computed from log-weights.
pub fn ess(log_weights: &[f64]) -> Result<f64> {
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let sum_sq: f64 = log_weights.iter().map(|lw| (2.0 * (lw - lse)).exp()).sum();
    Ok(1.0 / sum_sq)
}

/// Draws `count` ancestor indices with probabilities proportional to `exp(log_weights)`.
pub fn resample_indices<R: Rng + ?Sized>(log_weights: &[f64], count: usize, scheme: ResampleScheme, rng: &mut R) -> Result<Vec<usize>> {
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut cdf = Vec::with_capacity(log_weights.len());
    let mut acc = 0.0;
    for lw in log_weights {
        acc += (lw - lse).exp();
        cdf.push(acc);
    }
    let last = log_weights.len() - 1;
    let pick = |u: f64| cdf.partition_point(|&c| c <= u * acc).min(last);
    Ok(match scheme {
        ResampleScheme::Multinomial => (0..count).map(|_| pick(rng.random::<f64>())).collect(),
        ResampleScheme::Systematic => {
            let offset: f64 = rng.random();
            (0..count).map(|i| pick((i as f64 + offset) / count as f64)).collect()
        }
    })
}

/// Resamples when `ESS < alpha·K`. Returns the ancestor indices if the gate fired.
pub fn adaptive_resample<R: Rng + ?Sized>(
    ensemble: &mut ParticleEnsemble,
    alpha: f64,
    scheme: ResampleScheme,
    subtraj: usize,
    rng: &mut R,
) -> Result<Option<Vec<usize>>> {
    let k = ensemble.len();
    if ess(&ensemble.log_weights)? >= alpha * k as f64 {
        return Ok(None);
    }
    let idx = resample_indices(&ensemble.log_weights, k, scheme, rng)?;
    ensemble.positions = ensemble.positions.select(Axis(0), &idx);
    ensemble.log_weights = vec![-(k as f64).ln(); k];
    ensemble.ancestry = idx.clone();
    ensemble.last_resample_subtraj = subtraj;
    Ok(Some(idx))
}

/// `n` leapfrog steps of size `eps` with identity mass for the potential
/// `−log π`; `grad` writes `∇log π(x)` and returns `log π(x)`.
pub fn leapfrog<G>(x: &mut [f64], p: &mut [f64], eps: f64, n: usize, grad: &mut G) -> f64
where
    G: FnMut(&[f64], &mut [f64]) -> f64,
{
    let d = x.len();
    let mut g = vec![0.0; d];
    let mut lp = grad(x, &mut g);
    for _ in 0..n {
        for k in 0..d {
            p[k] += 0.5 * eps * g[k];
            x[k] += eps * p[k];
        }
        lp = grad(x, &mut g);
        for k in 0..d {
            p[k] += 0.5 * eps * g[k];
        }
    }
    lp
}

/// One Metropolis-adjusted HMC step per row of `positions`, invariant for
/// `π(·, step)`. Returns the acceptance rate.
pub fn hmc_refine<R: Rng + ?Sized>(
    positions: &mut Array2<f64>,
    path: &AnnealingPath,
    step: usize,
    eps: f64,
    n_leapfrog: usize,
    rng: &mut R,
) -> Result<f64> {
    path.grid.check_step(step)?;
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("HMC step size must be non-negative, got {eps}")));
    }
    let d = positions.ncols();
    let (mut gp, mut gt) = (vec![0.0; d], vec![0.0; d]);
    let mut grad = |x: &[f64], g: &mut [f64]| path.eval_into(x, step, g, &mut gp, &mut gt).log_pi;
    let mut accepted = 0usize;
    let mut scratch = vec![0.0; d];
    for mut row in positions.rows_mut() {
        let x0 = row.as_slice_mut().ok_or_else(|| Error::Shape("positions must be row-major".into()))?;
        let p0: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        let u: f64 = rng.random();
        let lp0 = grad(x0, &mut scratch);
        let mut x = x0.to_vec();
        let mut p = p0.clone();
        let lp1 = leapfrog(&mut x, &mut p, eps, n_leapfrog, &mut grad);
        let k0: f64 = 0.5 * p0.iter().map(|v| v * v).sum::<f64>();
        let k1: f64 = 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let delta_h = (k1 - lp1) - (k0 - lp0);
        if delta_h.is_finite() && x.iter().all(|v| v.is_finite()) && u.ln() < -delta_h {
            x0.copy_from_slice(&x);
            accepted += 1;
        }
    }
    Ok(if positions.nrows() == 0 {
        0.0
    } else {
        accepted as f64 / positions.nrows() as f64
    })
}
