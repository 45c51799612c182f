//! The geometric annealing path between a learned diagonal Gaussian prior and
//! the target, with a learnable monotone schedule on the fine time grid.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{all_finite, sigmoid, softplus, softplus_inv, standard_normal, LN_2PI};
use crate::optim::{clip_global, OptState, StepOutcome};
use crate::target::Target;

/// Time discretization: `n_sub` subtrajectories of `inner` Euler–Maruyama steps
/// each over `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_sub: usize,
    pub inner: usize,
    pub horizon: f64,
}

impl Grid {
    pub fn new(n_sub: usize, inner: usize) -> Result<Self> {
        if n_sub == 0 || inner == 0 {
            return Err(Error::Config("N and L must be positive".into()));
        }
        Ok(Self {
            n_sub,
            inner,
            horizon: 1.0,
        })
    }

    /// Total number of fine steps `N·L`.
    pub fn total(&self) -> usize {
        self.n_sub * self.inner
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.total() as f64
    }

    pub fn time(&self, step: usize) -> f64 {
        self.horizon * step as f64 / self.total() as f64
    }

    /// Fine step index of the start of subtrajectory `n` (1-based).
    pub fn sub_start(&self, n: usize) -> usize {
        (n - 1) * self.inner
    }

    pub fn check_step(&self, step: usize) -> Result<()> {
        if step > self.total() {
            return Err(Error::StepOutOfRange {
                step,
                max: self.total(),
            });
        }
        Ok(())
    }
}

/// `N(mu, diag(exp(2·log_std)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl PriorParams {
    pub fn isotropic(dim: usize, scale: f64) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_std: vec![scale.ln(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Normalized log-density; writes the score into `grad`.
    pub fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for k in 0..x.len() {
            let inv_var = (-2.0 * self.log_std[k]).exp();
            let z = x[k] - self.mu[k];
            lp += -0.5 * LN_2PI - self.log_std[k] - 0.5 * z * z * inv_var;
            grad[k] = -z * inv_var;
        }
        lp
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.eval(x, &mut g)
    }

    /// Reparametrized draw `x = mu + exp(log_std) ⊙ ξ`; returns `(x, ξ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> (Array2<f64>, Array2<f64>) {
        let d = self.dim();
        let xi = Array2::from_shape_fn((count, d), |_| standard_normal(rng));
        let x = self.transform(&xi);
        (x, xi)
    }

    pub fn transform(&self, xi: &Array2<f64>) -> Array2<f64> {
        let mut x = xi.clone();
        for mut row in x.rows_mut() {
            for k in 0..row.len() {
                row[k] = self.mu[k] + self.log_std[k].exp() * row[k];
            }
        }
        x
    }

    /// Pulls a cotangent on reparametrized samples back to `(d mu, d log_std)`.
    pub fn sample_vjp(&self, xi: &Array2<f64>, cot: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut d_mu = vec![0.0; d];
        let mut d_ls = vec![0.0; d];
        for (xr, cr) in xi.rows().into_iter().zip(cot.rows()) {
            for k in 0..d {
                d_mu[k] += cr[k];
                d_ls[k] += cr[k] * self.log_std[k].exp() * xr[k];
            }
        }
        (d_mu, d_ls)
    }
}

/// Pre-softplus increments `θ_1..θ_{NL}` of the annealing schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub theta: Vec<f64>,
}

impl ScheduleParams {
    /// Equal increments, giving `β_j = j/(NL)`.
    pub fn linear(total: usize) -> Self {
        Self {
            theta: vec![softplus_inv(1.0); total],
        }
    }

    /// `β_0..β_{NL}`; endpoints are exactly 0 and 1.
    pub fn betas(&self) -> Vec<f64> {
        let total = self.theta.len();
        let mut cum = Vec::with_capacity(total + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for &t in &self.theta {
            acc += softplus(t);
            cum.push(acc);
        }
        let mut betas: Vec<f64> = cum.iter().map(|c| c / acc).collect();
        betas[total] = 1.0;
        betas
    }

    /// Pulls `∂L/∂β_j` (for j = 0..NL) back to `∂L/∂θ`.
    pub fn vjp(&self, betas: &[f64], d_beta: &[f64]) -> Vec<f64> {
        let total: f64 = self.theta.iter().map(|&t| softplus(t)).sum();
        let weighted: f64 = d_beta.iter().zip(betas).map(|(c, b)| c * b).sum();
        let mut tail = 0.0;
        let mut out = vec![0.0; self.theta.len()];
        for m in (1..=self.theta.len()).rev() {
            tail += d_beta[m];
            out[m - 1] = sigmoid(self.theta[m - 1]) / total * (tail - weighted);
        }
        out
    }
}

/// Per-point evaluation of the path at one step.
#[derive(Debug, Clone, Copy)]
pub struct PathTerms {
    pub log_prior: f64,
    pub log_target: f64,
    pub log_pi: f64,
}

/// `π(x, j) ∝ p_prior(x)^{1−β_j} ρ_target(x)^{β_j}`.
#[derive(Debug, Clone)]
pub struct AnnealingPath {
    pub prior: PriorParams,
    pub schedule: ScheduleParams,
    pub target: Arc<Target>,
    pub grid: Grid,
    betas: Vec<f64>,
}

impl AnnealingPath {
    pub fn new(prior: PriorParams, schedule: ScheduleParams, target: Arc<Target>, grid: Grid) -> Result<Self> {
        if prior.dim() != target.dim() || prior.log_std.len() != target.dim() {
            return Err(Error::Shape(format!(
                "prior dimension {} does not match target dimension {}",
                prior.dim(),
                target.dim()
            )));
        }
        if schedule.theta.len() != grid.total() {
            return Err(Error::Shape(format!(
                "schedule has {} increments but the grid has {} steps",
                schedule.theta.len(),
                grid.total()
            )));
        }
        let betas = schedule.betas();
        Ok(Self {
            prior,
            schedule,
            target,
            grid,
            betas,
        })
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// Must be called after the schedule parameters change.
    pub fn refresh(&mut self) {
        self.betas = self.schedule.betas();
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn beta(&self, step: usize) -> Result<f64> {
        self.grid.check_step(step)?;
        Ok(self.betas[step])
    }

    /// Evaluates `log π` and writes `∇log π` into `grad`; `prior_grad` and
    /// `target_grad` receive the two endpoint scores. No input validation.
    pub fn eval_into(
        &self,
        x: &[f64],
        step: usize,
        grad: &mut [f64],
        prior_grad: &mut [f64],
        target_grad: &mut [f64],
    ) -> PathTerms {
        let beta = self.betas[step];
        let log_prior = self.prior.eval(x, prior_grad);
        let log_target = self.target.eval(x, target_grad);
        for k in 0..x.len() {
            grad[k] = (1.0 - beta) * prior_grad[k] + beta * target_grad[k];
        }
        let log_pi = if step == self.grid.total() {
            log_target
        } else {
            (1.0 - beta) * log_prior + beta * log_target
        };
        PathTerms {
            log_prior,
            log_target,
            log_pi,
        }
    }

    fn check_point(&self, x: &[f64], step: usize) -> Result<()> {
        self.grid.check_step(step)?;
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("point of dimension {}", x.len())));
        }
        if !all_finite(x) {
            return Err(Error::NonFinite("path input"));
        }
        Ok(())
    }

    pub fn log_pi(&self, x: &[f64], step: usize) -> Result<f64> {
        self.check_point(x, step)?;
        let d = self.dim();
        let (mut g, mut gp, mut gt) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        Ok(self.eval_into(x, step, &mut g, &mut gp, &mut gt).log_pi)
    }

    pub fn grad_log_pi(&self, x: &[f64], step: usize) -> Result<Vec<f64>> {
        self.check_point(x, step)?;
        let d = self.dim();
        let (mut g, mut gp, mut gt) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        self.eval_into(x, step, &mut g, &mut gp, &mut gt);
        Ok(g)
    }
}

/// Fits a diagonal Gaussian to the target by reparametrized ELBO ascent,
/// starting from `init`, with Adam and global-norm clipping to 1.
pub fn fit_prior_mfvi<R: Rng + ?Sized>(
    target: &Target,
    init: PriorParams,
    iters: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) -> Result<PriorParams> {
    let d = target.dim();
    let mut prior = init;
    let mut opt = OptState::new(&[d, d], &[lr, lr]);
    let mut grad = vec![0.0; d];
    for it in 0..iters {
        let (x, xi) = prior.sample(rng, batch);
        let mut cot = Array2::zeros((batch, d));
        let mut mean_log_target = 0.0;
        for (r, row) in x.rows().into_iter().enumerate() {
            let lt = target.eval(row.as_slice().expect("contiguous"), &mut grad);
            mean_log_target += lt / batch as f64;
            for k in 0..d {
                // Descent direction on the negative ELBO.
                cot[[r, k]] = -grad[k] / batch as f64;
            }
        }
        let entropy: f64 = prior.log_std.iter().sum();
        let elbo = mean_log_target + entropy;
        if !elbo.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                elbo,
            });
        }
        let (mut g_mu, mut g_ls) = prior.sample_vjp(&xi, &cot);
        g_ls.iter_mut().for_each(|g| *g -= 1.0);
        clip_global(&mut [&mut g_mu, &mut g_ls], 1.0);
        let PriorParams { mu, log_std } = &mut prior;
        if opt.step(&mut [mu, log_std], &[&g_mu, &g_ls]) == StepOutcome::SkippedNonFinite {
            return Err(Error::Diverged {
                iteration: it,
                elbo,
            });
        }
    }
    Ok(prior)
}

/// Monte Carlo ELBO of a diagonal Gaussian against the target.
pub fn mfvi_elbo<R: Rng + ?Sized>(target: &Target, prior: &PriorParams, samples: usize, rng: &mut R) -> f64 {
    let (x, _) = prior.sample(rng, samples);
    let mut g = vec![0.0; prior.dim()];
    let mut acc = 0.0;
    for row in x.rows() {
        let row = row.as_slice().expect("contiguous");
        acc += target.eval(row, &mut g) - prior.log_pdf(row);
    }
    acc / samples as f64
}
