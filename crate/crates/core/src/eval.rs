//! Sampler metrics: importance expectations, Sinkhorn distance, mode coverage,
//! the Gaussian bridge oracle and the per-evaluation record.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::annealing::{AnnealingPath, Grid, PriorParams, ScheduleParams};
use crate::error::{Error, Result};
use crate::losses::lv_term;
use crate::numerics::{log_sum_exp, median};
use crate::sde::{ControlPolicy, Correction, NoiseSchedule, ScheduleKind};
use crate::smc::{resample_indices, ResampleScheme};
use crate::target::{Target, TargetSpec};
use crate::trainer::{forward_pass, ForwardPassOutput, PassFlags, Sampler, SmcSettings, Streams};

/// Self-normalized `Σ_k W_k φ(x_k)`.
pub fn importance_expectation<F: Fn(&[f64]) -> f64>(samples: ArrayView2<f64>, log_weights: &[f64], phi: F) -> Result<f64> {
    if samples.nrows() != log_weights.len() {
        return Err(Error::Shape("one weight per sample is required".into()));
    }
    let lse = log_sum_exp(log_weights);
    if !lse.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut acc = 0.0;
    for (row, lw) in samples.rows().into_iter().zip(log_weights) {
        let w = (lw - lse).exp();
        if w > 0.0 {
            acc += w * phi(&row.to_vec());
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornResult {
    /// `⟨P, C⟩` for the entropic plan `P`, without the entropy term.
    pub cost: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row(a: &ArrayView2<f64>, i: usize) -> Vec<f64> {
    a.row(i).to_vec()
}

/// Mean squared distance over all distinct pairs of the joined point sets.
pub fn mean_pairwise_sq_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let joined = ndarray::concatenate(Axis(0), &[a, b]).expect("equal widths");
    let n = joined.nrows();
    if n < 2 {
        return 0.0;
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|i| row(&joined.view(), i)).collect();
    let mut acc = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            acc += sq_dist(&rows[i], &rows[j]);
        }
    }
    acc / (n * (n - 1) / 2) as f64
}

/// The default regularization: `factor ×` the mean pairwise squared distance.
pub fn default_sinkhorn_epsilon(a: ArrayView2<f64>, b: ArrayView2<f64>, factor: f64) -> f64 {
    let m = mean_pairwise_sq_distance(a, b);
    if m > 0.0 {
        factor * m
    } else {
        factor
    }
}

/// Entropic optimal transport between uniform empirical measures with
/// squared-Euclidean cost. Alternating scaling runs until the column-marginal
/// L1 error drops below `tol`; the kernel is used directly unless some row or
/// column underflows, in which case the iterations run on log potentials.
pub fn sinkhorn_distance(a: ArrayView2<f64>, b: ArrayView2<f64>, epsilon: f64, max_iter: usize, tol: f64) -> Result<SinkhornResult> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 || a.ncols() != b.ncols() {
        return Err(Error::Shape("sinkhorn needs two non-empty point sets of equal dimension".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("sinkhorn epsilon must be positive, got {epsilon}")));
    }
    let ra: Vec<Vec<f64>> = (0..n).map(|i| row(&a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..m).map(|j| row(&b, j)).collect();
    let cost = Array2::from_shape_fn((n, m), |(i, j)| sq_dist(&ra[i], &rb[j]));
    let kernel = cost.mapv(|c| (-c / epsilon).exp());
    let underflow = kernel.rows().into_iter().any(|r| r.iter().all(|&k| k == 0.0))
        || kernel.columns().into_iter().any(|c| c.iter().all(|&k| k == 0.0));
    let (plan, iterations, converged) = if underflow {
        sinkhorn_log(&cost, epsilon, max_iter, tol)
    } else {
        sinkhorn_linear(&kernel, max_iter, tol)
    };
    let total = plan.iter().zip(cost.iter()).map(|(p, c)| p * c).sum();
    Ok(SinkhornResult {
        cost: total,
        epsilon,
        iterations,
        converged,
    })
}

fn kernel_dot(kernel: &Array2<f64>, v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(kernel.rows()) {
        *o = row.iter().zip(v).map(|(k, x)| k * x).sum();
    }
}

fn kernel_t_dot(kernel: &Array2<f64>, u: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for (ui, row) in u.iter().zip(kernel.rows()) {
        for (o, k) in out.iter_mut().zip(row) {
            *o += ui * k;
        }
    }
}

fn sinkhorn_linear(kernel: &Array2<f64>, max_iter: usize, tol: f64) -> (Array2<f64>, usize, bool) {
    let (n, m) = kernel.dim();
    let (wa, wb) = (1.0 / n as f64, 1.0 / m as f64);
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let mut kv = vec![0.0; n];
    let mut ktu = vec![0.0; m];
    kernel_t_dot(kernel, &u, &mut ktu);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        for (vj, k) in v.iter_mut().zip(&ktu) {
            *vj = wb / k;
        }
        kernel_dot(kernel, &v, &mut kv);
        for (ui, k) in u.iter_mut().zip(&kv) {
            *ui = wa / k;
        }
        kernel_t_dot(kernel, &u, &mut ktu);
        let err: f64 = ktu.iter().zip(&v).map(|(c, vj)| (c * vj - wb).abs()).sum();
        if err < tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| u[i] * kernel[[i, j]] * v[j]);
    (plan, iterations, converged)
}

fn sinkhorn_log(cost: &Array2<f64>, epsilon: f64, max_iter: usize, tol: f64) -> (Array2<f64>, usize, bool) {
    let (n, m) = cost.dim();
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let mut col = vec![0.0; n];
    let mut line = vec![0.0; m];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        for j in 0..m {
            for i in 0..n {
                col[i] = (f[i] - cost[[i, j]]) / epsilon + log_a;
            }
            g[j] = -epsilon * log_sum_exp(&col);
        }
        for i in 0..n {
            for j in 0..m {
                line[j] = (g[j] - cost[[i, j]]) / epsilon + log_b;
            }
            f[i] = -epsilon * log_sum_exp(&line);
        }
        let mut err = 0.0;
        for j in 0..m {
            for i in 0..n {
                col[i] = (f[i] + g[j] - cost[[i, j]]) / epsilon + log_a + log_b;
            }
            err += (log_sum_exp(&col).exp() - log_b.exp()).abs();
        }
        if err < tol {
            converged = true;
            break;
        }
    }
    let plan = Array2::from_shape_fn((n, m), |(i, j)| ((f[i] + g[j] - cost[[i, j]]) / epsilon + log_a + log_b).exp());
    (plan, iterations, converged)
}

/// Number of modes with at least one sample within `radius`, and the fraction
/// of samples that lie within `radius` of some mode.
pub fn mode_coverage(samples: ArrayView2<f64>, centers: &[Vec<f64>], radius: f64) -> (usize, f64) {
    let r2 = radius * radius;
    let mut covered = vec![false; centers.len()];
    let mut near = 0usize;
    for s in samples.rows() {
        let s = s.to_vec();
        let mut any = false;
        for (c, hit) in centers.iter().zip(covered.iter_mut()) {
            if sq_dist(&s, c) <= r2 {
                *hit = true;
                any = true;
            }
        }
        near += usize::from(any);
    }
    let frac = if samples.nrows() == 0 {
        0.0
    } else {
        near as f64 / samples.nrows() as f64
    };
    (covered.iter().filter(|c| **c).count(), frac)
}

/// Closed-form optimal drift `u*(x, t) = a(t)·x` transporting `N(0, v0)` to
/// `N(0, v1)` along the geometric path `1/v = (1−β)/v0 + β/v1`.
#[derive(Debug, Clone)]
pub struct GaussianBridge {
    pub v0: f64,
    pub v1: f64,
    /// `β` on the fine grid, interpolated linearly in between.
    pub betas: Vec<f64>,
    pub noise: NoiseSchedule,
    pub horizon: f64,
}

impl GaussianBridge {
    pub fn new(v0: f64, v1: f64, betas: Vec<f64>, noise: NoiseSchedule, horizon: f64) -> Result<Self> {
        if !(v0 > 0.0 && v1 > 0.0) {
            return Err(Error::Config("bridge variances must be positive".into()));
        }
        if betas.len() < 2 {
            return Err(Error::Config("bridge needs at least two schedule points".into()));
        }
        Ok(Self {
            v0,
            v1,
            betas,
            noise,
            horizon,
        })
    }

    fn segments(&self) -> usize {
        self.betas.len() - 1
    }

    fn beta_and_rate(&self, t: f64) -> (f64, f64) {
        let s = self.segments() as f64;
        let pos = (t / self.horizon * s).clamp(0.0, s);
        let slope = |i: usize| (self.betas[i + 1] - self.betas[i]) * s / self.horizon;
        let i = (pos.floor() as usize).min(self.segments() - 1);
        let frac = pos - i as f64;
        let beta = self.betas[i] + frac * (self.betas[i + 1] - self.betas[i]);
        // At interior grid points the slope is the average of both sides.
        let rate = if frac == 0.0 && i > 0 {
            0.5 * (slope(i - 1) + slope(i))
        } else {
            slope(i)
        };
        (beta, rate)
    }

    pub fn variance(&self, t: f64) -> f64 {
        let (beta, _) = self.beta_and_rate(t);
        1.0 / ((1.0 - beta) / self.v0 + beta / self.v1)
    }

    pub fn variance_rate(&self, t: f64) -> f64 {
        let (_, rate) = self.beta_and_rate(t);
        let v = self.variance(t);
        -v * v * rate * (1.0 / self.v1 - 1.0 / self.v0)
    }

    /// `a(t) = (v̇ − σ²)/(2v)`.
    pub fn drift_coefficient(&self, t: f64) -> f64 {
        let sigma = self.noise.sigma_at_time(t / self.horizon);
        (self.variance_rate(t) - sigma * sigma) / (2.0 * self.variance(t))
    }

    /// The correction `ũ = c_j x` that makes `u = σ²ũ + (σ²/2)∇log π` equal `a(t_j)x`.
    pub fn correction(&self, grid: &Grid) -> Correction {
        let coef = (0..=grid.total())
            .map(|j| {
                let t = grid.time(j);
                let s2 = self.noise.sigma_at_time(t / self.horizon).powi(2);
                (self.drift_coefficient(t) + 0.5 * s2 / self.variance(t)) / s2
            })
            .collect();
        Correction::Linear { coef }
    }
}

/// One evaluation event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub wall_seconds: f64,
    pub elbo: f64,
    pub log_z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_z_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinkhorn: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinkhorn_converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes_covered: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_fraction: Option<f64>,
    pub ess: Vec<f64>,
    pub resample_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hmc_acceptance: Option<f64>,
}

/// What to compute at an evaluation.
#[derive(Debug, Clone)]
pub struct EvalRequest<'a> {
    pub particles: usize,
    pub flags: PassFlags,
    pub smc: SmcSettings,
    pub true_log_z: Option<f64>,
    pub ground_truth: Option<ArrayView2<'a, f64>>,
    pub sinkhorn_epsilon_factor: f64,
    pub sinkhorn_max_iter: usize,
    pub modes: Option<&'a [Vec<f64>]>,
    pub coverage_radius: f64,
}

/// Equally weighted samples from a forward pass, resampling when the final weights are not uniform.
pub fn equally_weighted_samples<R: Rng + ?Sized>(out: &ForwardPassOutput, rng: &mut R) -> Result<Array2<f64>> {
    let lw = out.final_log_weights();
    let first = lw[0];
    if lw.iter().all(|&w| w == first) {
        return Ok(out.positions.clone());
    }
    let idx = resample_indices(&lw, lw.len(), ResampleScheme::Multinomial, rng)?;
    Ok(out.positions.select(Axis(0), &idx))
}

/// One forward pass under the evaluation flags and all requested metrics.
pub fn evaluate(sampler: &Sampler, request: &EvalRequest, iteration: u64, streams: &mut Streams) -> Result<(MetricsRecord, Array2<f64>)> {
    let out = forward_pass(sampler, request.particles, request.flags, &request.smc, streams)?;
    let samples = equally_weighted_samples(&out, &mut streams.resample)?;
    let (sinkhorn, sinkhorn_converged) = match request.ground_truth {
        Some(gt) => {
            let eps = default_sinkhorn_epsilon(samples.view(), gt, request.sinkhorn_epsilon_factor);
            let r = sinkhorn_distance(samples.view(), gt, eps, request.sinkhorn_max_iter, 1e-6)?;
            (Some(r.cost), Some(r.converged))
        }
        None => (None, None),
    };
    let (modes_covered, mode_fraction) = match request.modes {
        Some(c) => {
            let (n, f) = mode_coverage(samples.view(), c, request.coverage_radius);
            (Some(n), Some(f))
        }
        None => (None, None),
    };
    let record = MetricsRecord {
        iteration,
        wall_seconds: 0.0,
        elbo: out.elbo,
        log_z: out.log_z,
        log_z_error: request.true_log_z.map(|z| (out.log_z - z).abs()),
        sinkhorn,
        sinkhorn_converged,
        modes_covered,
        mode_fraction,
        ess: out.min_ess(),
        resample_count: out.resample_count(),
        hmc_acceptance: out.mean_acceptance(),
    };
    Ok((record, samples))
}

/// Trailing moving average with the given window (shorter at the start).
pub fn running_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Base problem for the KL-versus-LV dimension sweep: the isotropic path
/// `N(0, v0·I) → N(0, v1·I)` with zero correction, constant noise and two
/// subtrajectories, simulated without resampling so the second subtrajectory
/// starts from importance-weighted particles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingSetup {
    pub v0: f64,
    pub v1: f64,
    pub inner: usize,
    pub sigma: f64,
    pub particles: usize,
    /// Particles for the one-dimensional reference values.
    pub reference_particles: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub dim: usize,
    /// Median over seeds of `|D̂ − D| / D` for the importance-weighted KL estimator.
    pub kl_relative_error: f64,
    /// Same for the log-variance estimator.
    pub lv_relative_error: f64,
    pub kl_reference: f64,
    pub lv_reference: f64,
}

fn scaling_sampler(setup: &ScalingSetup, dim: usize) -> Result<Sampler> {
    let target = Target::build(
        &TargetSpec::Gaussian {
            dim,
            mean: 0.0,
            variance: setup.v1,
            log_z: 0.0,
        },
        0,
    )?;
    let grid = Grid::new(2, setup.inner)?;
    let total = grid.total();
    let path = AnnealingPath::new(
        PriorParams::isotropic(dim, setup.v0.sqrt()),
        ScheduleParams::linear(total),
        Arc::new(target),
        grid,
    )?;
    let noise = NoiseSchedule::new(ScheduleKind::Constant, setup.sigma, setup.sigma)?;
    Ok(Sampler {
        path,
        policy: ControlPolicy::new(Correction::Zero, noise, total),
    })
}

/// `log ∫ N(x; 0, v0)^{1−β} N(x; 0, v1)^β dx` in `dim` dimensions.
fn gaussian_path_log_normalizer(v0: f64, v1: f64, beta: f64, dim: usize) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    let vb = 1.0 / ((1.0 - beta) / v0 + beta / v1);
    dim as f64 * (-0.5 * (1.0 - beta) * (tau * v0).ln() - 0.5 * beta * (tau * v1).ln() + 0.5 * (tau * vb).ln())
}

/// KL divergence estimate on the second subtrajectory with unit-mean
/// importance weights from the first, and the LV estimate on the same particles.
fn scaling_estimates(sampler: &Sampler, setup: &ScalingSetup, k: usize, streams: &mut Streams) -> Result<(f64, f64)> {
    let flags = PassFlags {
        resample: false,
        mcmc: false,
        store_trajectories: false,
    };
    let out = forward_pass(sampler, k, flags, &SmcSettings::default(), streams)?;
    let (dim, l) = (sampler.path.dim(), sampler.path.grid.inner);
    let betas = sampler.path.betas();
    let log_z1 = gaussian_path_log_normalizer(setup.v0, setup.v1, betas[l], dim);
    let log_z2 = gaussian_path_log_normalizer(setup.v0, setup.v1, betas[2 * l], dim);
    let lw1 = out.log_rnds.row(0);
    let lw2 = out.log_rnds.row(1).to_vec();
    let cross = lw1.iter().zip(&lw2).map(|(a, b)| (a - log_z1).exp() * b).sum::<f64>() / k as f64;
    let kl = log_z2 - log_z1 - cross;
    let lv = lv_term(&lw2)?.0;
    Ok((kl, lv))
}

/// Relative errors of the KL and LV estimators on `I`-fold products of the
/// base problem. The references are `I` times the one-dimensional values.
pub fn kl_lv_scaling_diagnostic(dims: &[usize], setup: &ScalingSetup, seeds: u64) -> Result<Vec<ScalingRow>> {
    let base = scaling_sampler(setup, 1)?;
    let (kl1, lv1) = scaling_estimates(&base, setup, setup.reference_particles, &mut Streams::new(u64::MAX, &[]))?;
    let mut rows = Vec::with_capacity(dims.len());
    for &dim in dims {
        let sampler = scaling_sampler(setup, dim)?;
        let (kl_ref, lv_ref) = (dim as f64 * kl1, dim as f64 * lv1);
        let mut kl_err = Vec::with_capacity(seeds as usize);
        let mut lv_err = Vec::with_capacity(seeds as usize);
        for seed in 0..seeds {
            let (kl, lv) = scaling_estimates(&sampler, setup, setup.particles, &mut Streams::new(seed, &[dim as u64]))?;
            kl_err.push(((kl - kl_ref) / kl_ref).abs());
            lv_err.push(((lv - lv_ref) / lv_ref).abs());
        }
        rows.push(ScalingRow {
            dim,
            kl_relative_error: median(&kl_err),
            lv_relative_error: median(&lv_err),
            kl_reference: kl_ref,
            lv_reference: lv_ref,
        });
    }
    Ok(rows)
}
