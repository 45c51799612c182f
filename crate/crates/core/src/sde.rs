//! Noise schedules, the control `u = σ²ũ + (σ²/2)∇log π`, Euler–Maruyama
//! stepping and the discrete forward/backward transition kernels.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annealing::AnnealingPath;
use crate::error::{Error, Result};
use crate::net::{Mlp, Tape, TimeContext};
use crate::numerics::{all_finite, isotropic_normal_log_pdf, standard_normal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        if !(sigma_min > 0.0) || !(sigma_max >= sigma_min) || !sigma_max.is_finite() {
            return Err(Error::Config(format!(
                "noise schedule needs 0 < sigma_min ≤ sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        Ok(Self {
            kind,
            sigma_min,
            sigma_max,
        })
    }

    /// `σ` at normalized time `s = t/T ∈ [0, 1]`.
    pub fn sigma_at_time(&self, s: f64) -> f64 {
        let v = match self.kind {
            ScheduleKind::Constant => self.sigma_max,
            ScheduleKind::Linear => self.sigma_max + (self.sigma_min - self.sigma_max) * s,
            ScheduleKind::Cosine => {
                let c = (0.5 * std::f64::consts::PI * s).cos();
                self.sigma_min + (self.sigma_max - self.sigma_min) * c * c
            }
        };
        v.clamp(self.sigma_min, self.sigma_max)
    }

    pub fn sigma(&self, step: usize, total: usize) -> Result<f64> {
        if step > total {
            return Err(Error::StepOutOfRange { step, max: total });
        }
        Ok(self.sigma_at_time(step as f64 / total as f64))
    }
}

/// The learnable (or fixed) part `ũ` of the control.
#[derive(Debug, Clone)]
pub enum Correction {
    Zero,
    Net { mlp: Mlp, contexts: Vec<TimeContext> },
    /// `ũ(x, j) = coef_j · x`.
    Linear { coef: Vec<f64> },
}

impl Correction {
    pub fn net(mlp: Mlp, total: usize) -> Self {
        let contexts = mlp.contexts(total);
        Correction::Net { mlp, contexts }
    }

    /// Recomputes cached per-step network quantities after a parameter update.
    pub fn refresh(&mut self) {
        if let Correction::Net { mlp, contexts } = self {
            let total = contexts.len() - 1;
            *contexts = mlp.contexts(total);
        }
    }

    pub fn mlp(&self) -> Option<&Mlp> {
        match self {
            Correction::Net { mlp, .. } => Some(mlp),
            _ => None,
        }
    }

    pub fn mlp_mut(&mut self) -> Option<&mut Mlp> {
        match self {
            Correction::Net { mlp, .. } => Some(mlp),
            _ => None,
        }
    }

    fn eval(&self, x: ArrayView2<f64>, score: ArrayView2<f64>, step: usize, keep: bool) -> Result<(Array2<f64>, Option<Tape>)> {
        match self {
            Correction::Zero => Ok((Array2::zeros(x.raw_dim()), None)),
            Correction::Linear { coef } => Ok((x.mapv(|v| coef[step] * v), None)),
            Correction::Net { mlp, contexts } => {
                if keep {
                    let (out, tape) = mlp.forward_tape(&contexts[step], x, score)?;
                    Ok((out, Some(tape)))
                } else {
                    Ok((mlp.forward(&contexts[step], x, score)?, None))
                }
            }
        }
    }
}

/// Correction plus the noise schedule, with per-step `σ` cached for a grid.
#[derive(Debug, Clone)]
pub struct ControlPolicy {
    pub correction: Correction,
    pub noise: NoiseSchedule,
    sigmas: Vec<f64>,
}

impl ControlPolicy {
    pub fn new(correction: Correction, noise: NoiseSchedule, total: usize) -> Self {
        let sigmas = (0..=total).map(|j| noise.sigma_at_time(j as f64 / total as f64)).collect();
        Self {
            correction,
            noise,
            sigmas,
        }
    }

    pub fn sigma(&self, step: usize) -> f64 {
        self.sigmas[step]
    }

    pub fn total_steps(&self) -> usize {
        self.sigmas.len() - 1
    }
}

/// Everything the sampler needs about a batch of points at one step.
#[derive(Debug, Clone)]
pub struct StepEval {
    pub step: usize,
    pub log_pi: Array1<f64>,
    pub log_prior: Array1<f64>,
    pub log_target: Array1<f64>,
    /// `∇log π`.
    pub grad: Array2<f64>,
    pub prior_grad: Array2<f64>,
    pub target_grad: Array2<f64>,
    /// `ũ`.
    pub correction: Array2<f64>,
    /// `u = σ²ũ + (σ²/2)∇log π`.
    pub u: Array2<f64>,
}

impl StepEval {
    /// Rows gathered by `indices` (used after resampling).
    pub fn gather(&self, indices: &[usize]) -> StepEval {
        let sel2 = |a: &Array2<f64>| a.select(ndarray::Axis(0), indices);
        let sel1 = |a: &Array1<f64>| a.select(ndarray::Axis(0), indices);
        StepEval {
            step: self.step,
            log_pi: sel1(&self.log_pi),
            log_prior: sel1(&self.log_prior),
            log_target: sel1(&self.log_target),
            grad: sel2(&self.grad),
            prior_grad: sel2(&self.prior_grad),
            target_grad: sel2(&self.target_grad),
            correction: sel2(&self.correction),
            u: sel2(&self.u),
        }
    }

    /// Backward drift `σ²∇log π − u` of row `r`, coordinate `k`.
    #[inline]
    pub fn backward_drift(&self, sigma2: f64, r: usize, k: usize) -> f64 {
        sigma2 * self.grad[[r, k]] - self.u[[r, k]]
    }
}

/// Path and control evaluation over rows of `x` at `step`. With `keep`, the
/// network tape is returned for a later reverse pass.
pub fn evaluate(path: &AnnealingPath, policy: &ControlPolicy, x: ArrayView2<f64>, step: usize, keep: bool) -> Result<(StepEval, Option<Tape>)> {
    let (b, d) = x.dim();
    let mut log_pi = Array1::zeros(b);
    let mut log_prior = Array1::zeros(b);
    let mut log_target = Array1::zeros(b);
    let mut grad = Array2::zeros((b, d));
    let mut prior_grad = Array2::zeros((b, d));
    let mut target_grad = Array2::zeros((b, d));
    for r in 0..b {
        let xr = x.row(r);
        let xs = xr.as_slice().ok_or_else(|| Error::Shape("positions must be row-major".into()))?;
        let terms = path.eval_into(
            xs,
            step,
            grad.row_mut(r).into_slice().expect("owned"),
            prior_grad.row_mut(r).into_slice().expect("owned"),
            target_grad.row_mut(r).into_slice().expect("owned"),
        );
        log_pi[r] = terms.log_pi;
        log_prior[r] = terms.log_prior;
        log_target[r] = terms.log_target;
    }
    let (correction, tape) = policy.correction.eval(x, grad.view(), step, keep)?;
    let s2 = policy.sigma(step).powi(2);
    let mut u = Array2::zeros((b, d));
    Zip::from(&mut u)
        .and(&correction)
        .and(&grad)
        .for_each(|u, &c, &g| *u = s2 * c + 0.5 * s2 * g);
    Ok((
        StepEval {
            step,
            log_pi,
            log_prior,
            log_target,
            grad,
            prior_grad,
            target_grad,
            correction,
            u,
        },
        tape,
    ))
}

fn point_eval(path: &AnnealingPath, policy: &ControlPolicy, x: &[f64], step: usize) -> Result<StepEval> {
    path.grid.check_step(step)?;
    if x.len() != path.dim() {
        return Err(Error::Shape(format!("point of dimension {}", x.len())));
    }
    if !all_finite(x) {
        return Err(Error::NonFinite("control input"));
    }
    let xa = ArrayView2::from_shape((1, x.len()), x).expect("shape");
    Ok(evaluate(path, policy, xa, step, false)?.0)
}

/// `u(x, j)` for a single point.
pub fn control_u(path: &AnnealingPath, policy: &ControlPolicy, x: &[f64], step: usize) -> Result<Vec<f64>> {
    Ok(point_eval(path, policy, x, step)?.u.row(0).to_vec())
}

/// One Euler–Maruyama step `x + u h + σ_j √h ξ`; returns the new point and `ξ`.
pub fn em_step<R: Rng + ?Sized>(path: &AnnealingPath, policy: &ControlPolicy, x: &[f64], step: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = path.grid.h();
    if step >= path.grid.total() {
        return Err(Error::StepOutOfRange {
            step,
            max: path.grid.total() - 1,
        });
    }
    let ev = point_eval(path, policy, x, step)?;
    let sd = policy.sigma(step) * h.sqrt();
    let xi: Vec<f64> = (0..x.len()).map(|_| standard_normal(rng)).collect();
    let next: Vec<f64> = (0..x.len()).map(|k| x[k] + ev.u[[0, k]] * h + sd * xi[k]).collect();
    if !all_finite(&next) {
        return Err(Error::NonFinite("Euler–Maruyama state"));
    }
    Ok((next, xi))
}

/// `log N(x_next; x + u(x, j) h, σ_j² h I)`.
pub fn forward_kernel_logpdf(path: &AnnealingPath, policy: &ControlPolicy, x_next: &[f64], x: &[f64], step: usize) -> Result<f64> {
    let h = path.grid.h();
    let ev = point_eval(path, policy, x, step)?;
    let mean: Vec<f64> = (0..x.len()).map(|k| x[k] + ev.u[[0, k]] * h).collect();
    Ok(isotropic_normal_log_pdf(x_next, &mean, policy.sigma(step).powi(2) * h))
}

/// `log N(x_prev; x_next + (σ²∇log π − u)(x_next, j+1) h, σ_{j+1}² h I)`.
pub fn backward_kernel_logpdf(path: &AnnealingPath, policy: &ControlPolicy, x_prev: &[f64], x_next: &[f64], step: usize) -> Result<f64> {
    let h = path.grid.h();
    let ev = point_eval(path, policy, x_next, step + 1)?;
    let s2 = policy.sigma(step + 1).powi(2);
    let mean: Vec<f64> = (0..x_next.len())
        .map(|k| x_next[k] + ev.backward_drift(s2, 0, k) * h)
        .collect();
    Ok(isotropic_normal_log_pdf(x_prev, &mean, s2 * h))
}
