//! The sequential forward pass (simulate, reweight, resample, refine) and the
//! on-policy and replay-buffer training steps.

use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::seq::index::sample as sample_without_replacement;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annealing::{AnnealingPath, Grid};
use crate::buffer::ReplayBuffer;
use crate::error::{Error, Result};
use crate::losses::{loss_and_grad, LossBatch, LossKind, SubBatch};
use crate::numerics::{log_sum_exp, rng_stream, standard_normal};
use crate::optim::{clip_global, OptState, StepOutcome};
use crate::sde::{evaluate, ControlPolicy};
use crate::smc::{adaptive_resample, ess, hmc_refine, ParticleEnsemble, ResampleScheme};
use crate::weights::accumulate_kernel_ratio;

/// Learned path plus control.
#[derive(Debug, Clone)]
pub struct Sampler {
    pub path: AnnealingPath,
    pub policy: ControlPolicy,
}

impl Sampler {
    /// The same parameters on a different subtrajectory partition of the same fine grid.
    pub fn with_partition(&self, n_sub: usize) -> Result<Sampler> {
        let total = self.path.grid.total();
        if n_sub == 0 || total % n_sub != 0 {
            return Err(Error::Config(format!("N = {n_sub} does not divide the {total} fine steps")));
        }
        let mut out = self.clone();
        out.path.grid = Grid {
            n_sub,
            inner: total / n_sub,
            horizon: self.path.grid.horizon,
        };
        Ok(out)
    }

    /// Re-derives cached quantities after a parameter change.
    pub fn refresh(&mut self) {
        self.path.refresh();
        self.policy.correction.refresh();
    }
}

/// Toggles for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassFlags {
    pub resample: bool,
    pub mcmc: bool,
    pub store_trajectories: bool,
}

/// Resampling and MCMC settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmcSettings {
    pub ess_threshold: f64,
    pub scheme: ResampleScheme,
    /// Step sizes for `t < T/2` and `t ≥ T/2`.
    pub hmc_step_sizes: [f64; 2],
    pub leapfrog_steps: usize,
}

impl Default for SmcSettings {
    fn default() -> Self {
        Self {
            ess_threshold: 0.3,
            scheme: ResampleScheme::Multinomial,
            hmc_step_sizes: [0.1, 0.1],
            leapfrog_steps: 10,
        }
    }
}

/// Independent random streams for simulation, resampling and MCMC.
pub struct Streams {
    pub sim: ChaCha8Rng,
    pub resample: ChaCha8Rng,
    pub mcmc: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64, tags: &[u64]) -> Self {
        let with = |t: u64| {
            let mut v = tags.to_vec();
            v.push(t);
            rng_stream(seed, &v)
        };
        Self {
            sim: with(0),
            resample: with(1),
            mcmc: with(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtrajectoryEvent {
    pub n: usize,
    /// ESS after reweighting and before any resampling.
    pub ess: f64,
    pub resampled: bool,
    pub acceptance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardPassOutput {
    /// `[N, K]` per-subtrajectory log-RNDs.
    pub log_rnds: Array2<f64>,
    /// `[N+1, K]` normalized log-weights; row `n` is the state carried into subtrajectory `n+1`.
    pub log_weights: Array2<f64>,
    /// Per subtrajectory `[K, L+1, d]`, when requested.
    pub trajectories: Option<Vec<Array3<f64>>>,
    pub log_z: f64,
    pub elbo: f64,
    pub positions: Array2<f64>,
    pub events: Vec<SubtrajectoryEvent>,
    pub last_resample_subtraj: usize,
}

impl ForwardPassOutput {
    pub fn final_log_weights(&self) -> Vec<f64> {
        self.log_weights.row(self.log_weights.nrows() - 1).to_vec()
    }

    pub fn resample_count(&self) -> usize {
        self.events.iter().filter(|e| e.resampled).count()
    }

    pub fn min_ess(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.ess).collect()
    }

    pub fn mean_acceptance(&self) -> Option<f64> {
        let acc: Vec<f64> = self.events.iter().filter_map(|e| e.acceptance).collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }
}

fn hmc_step_size(settings: &SmcSettings, step: usize, total: usize) -> f64 {
    if 2 * step < total {
        settings.hmc_step_sizes[0]
    } else {
        settings.hmc_step_sizes[1]
    }
}

/// Runs the sampler with `k` particles.
pub fn forward_pass(sampler: &Sampler, k: usize, flags: PassFlags, settings: &SmcSettings, streams: &mut Streams) -> Result<ForwardPassOutput> {
    if k == 0 {
        return Err(Error::Config("at least one particle is required".into()));
    }
    let path = &sampler.path;
    let policy = &sampler.policy;
    let grid = path.grid;
    let (n_sub, l, total, h) = (grid.n_sub, grid.inner, grid.total(), grid.h());
    let d = path.dim();

    let (x0, _) = path.prior.sample(&mut streams.sim, k);
    let mut ens = ParticleEnsemble::uniform(x0);
    let (mut ev, _) = evaluate(path, policy, ens.positions.view(), 0, false)?;
    let mut log_rnds = Array2::zeros((n_sub, k));
    let mut log_weights = Array2::zeros((n_sub + 1, k));
    log_weights.row_mut(0).assign(&Array1::from(ens.log_weights.clone()));
    let mut trajectories = flags.store_trajectories.then(|| Vec::with_capacity(n_sub));
    let mut events = Vec::with_capacity(n_sub);
    let (mut log_z, mut elbo) = (0.0, 0.0);

    for n in 1..=n_sub {
        let j0 = grid.sub_start(n);
        let mut traj = flags.store_trajectories.then(|| Array3::zeros((k, l + 1, d)));
        if let Some(t) = traj.as_mut() {
            t.index_axis_mut(Axis(1), 0).assign(&ens.positions);
        }
        let mut lrnd = -&ev.log_pi;
        for i in 1..=l {
            let j = j0 + i - 1;
            let sd = policy.sigma(j) * h.sqrt();
            let noise = Array2::from_shape_fn((k, d), |_| standard_normal(&mut streams.sim));
            let mut next = ens.positions.clone();
            Zip::from(&mut next)
                .and(&ev.u)
                .and(&noise)
                .for_each(|x, &u, &xi| *x += u * h + sd * xi);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteWeight {
                    subtrajectory: n,
                    step: j + 1,
                });
            }
            let (ev_next, _) = evaluate(path, policy, next.view(), j + 1, false)?;
            accumulate_kernel_ratio(
                ens.positions.view(),
                next.view(),
                &ev,
                &ev_next,
                policy.sigma(j).powi(2),
                policy.sigma(j + 1).powi(2),
                h,
                &mut lrnd,
            );
            ens.positions = next;
            ev = ev_next;
            if let Some(t) = traj.as_mut() {
                t.index_axis_mut(Axis(1), i).assign(&ens.positions);
            }
        }
        lrnd += &ev.log_pi;
        if lrnd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteWeight {
                subtrajectory: n,
                step: j0 + l,
            });
        }

        let mut combined: Vec<f64> = ens.log_weights.iter().zip(lrnd.iter()).map(|(w, r)| w + r).collect();
        let lse = log_sum_exp(&combined);
        if !lse.is_finite() {
            return Err(Error::DegenerateWeights);
        }
        log_z += lse;
        elbo += ens.log_weights.iter().zip(lrnd.iter()).map(|(w, r)| w.exp() * r).sum::<f64>();
        combined.iter_mut().for_each(|c| *c -= lse);
        ens.log_weights = combined;
        let ess_n = ess(&ens.log_weights)?;

        let mut resampled = false;
        if flags.resample {
            if let Some(idx) = adaptive_resample(&mut ens, settings.ess_threshold, settings.scheme, n, &mut streams.resample)? {
                ev = ev.gather(&idx);
                resampled = true;
            }
        }
        let mut acceptance = None;
        if flags.mcmc {
            let step = j0 + l;
            let eps = hmc_step_size(settings, step, total);
            acceptance = Some(hmc_refine(&mut ens.positions, path, step, eps, settings.leapfrog_steps, &mut streams.mcmc)?);
            if n < n_sub {
                ev = evaluate(path, policy, ens.positions.view(), step, false)?.0;
            }
        }
        log_rnds.row_mut(n - 1).assign(&lrnd);
        log_weights.row_mut(n).assign(&Array1::from(ens.log_weights.clone()));
        if let (Some(all), Some(t)) = (trajectories.as_mut(), traj) {
            all.push(t);
        }
        events.push(SubtrajectoryEvent {
            n,
            ess: ess_n,
            resampled,
            acceptance,
        });
    }

    Ok(ForwardPassOutput {
        log_rnds,
        log_weights,
        trajectories,
        log_z,
        elbo,
        positions: ens.positions,
        events,
        last_resample_subtraj: ens.last_resample_subtraj,
    })
}

/// Learning rates and clipping for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimSettings {
    pub model_lr: f64,
    pub prior_lr: f64,
    pub schedule_lr: f64,
    pub clip_norm: f64,
}

/// Optimizer state for the groups `[network, prior mean, prior log-std, schedule]`.
pub fn new_opt_state(sampler: &Sampler, opt: &OptimSettings) -> OptState {
    let d = sampler.path.dim();
    let n_net = sampler.policy.correction.mlp().map_or(0, |m| m.n_params());
    OptState::new(
        &[n_net, d, d, sampler.path.schedule.theta.len()],
        &[opt.model_lr, opt.prior_lr, opt.prior_lr, opt.schedule_lr],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: f64,
    pub per_subtrajectory: Vec<f64>,
    pub grad_norm: f64,
    pub applied: bool,
    pub log_z: f64,
    pub elbo: f64,
}

fn apply_update(sampler: &mut Sampler, opt: &mut OptState, settings: &OptimSettings, grads: &mut crate::weights::ParamGrads) -> (f64, bool) {
    let norm = clip_global(&mut grads.groups_mut(), settings.clip_norm);
    let mut empty = Vec::new();
    let net = match sampler.policy.correction.mlp_mut() {
        Some(m) => &mut m.params,
        None => &mut empty,
    };
    let prior = &mut sampler.path.prior;
    let outcome = opt.step(
        &mut [net, &mut prior.mu, &mut prior.log_std, &mut sampler.path.schedule.theta],
        &grads.groups(),
    );
    sampler.refresh();
    (norm, outcome == StepOutcome::Applied)
}

fn skipped(loss: f64, per: Vec<f64>, out: &ForwardPassOutput) -> StepReport {
    StepReport {
        loss,
        per_subtrajectory: per,
        grad_norm: f64::NAN,
        applied: false,
        log_z: out.log_z,
        elbo: out.elbo,
    }
}

/// One on-policy step: forward pass, loss over all subtrajectories, clipped Adam update.
pub fn train_step(
    sampler: &mut Sampler,
    opt: &mut OptState,
    k: usize,
    loss: LossKind,
    flags: PassFlags,
    smc: &SmcSettings,
    optim: &OptimSettings,
    streams: &mut Streams,
) -> Result<StepReport> {
    let flags = PassFlags {
        store_trajectories: true,
        ..flags
    };
    let out = forward_pass(sampler, k, flags, smc, streams)?;
    let trajs = out.trajectories.as_ref().expect("trajectories stored");
    let batch = LossBatch {
        subs: trajs
            .iter()
            .enumerate()
            .map(|(i, t)| SubBatch {
                n: i + 1,
                points: t.clone(),
                prev_log_weights: out.log_weights.row(i).to_owned(),
            })
            .collect(),
        last_resample: vec![out.last_resample_subtraj; k],
    };
    let mut res = match loss_and_grad(&batch, loss, &sampler.path, &sampler.policy) {
        Ok(r) => r,
        Err(Error::NonFiniteWeight { .. }) | Err(Error::NonFiniteActivation { .. }) => return Ok(skipped(f64::NAN, vec![], &out)),
        Err(e) => return Err(e),
    };
    if !res.value.is_finite() {
        return Ok(skipped(res.value, res.per_subtrajectory, &out));
    }
    let (grad_norm, applied) = apply_update(sampler, opt, optim, &mut res.grads);
    Ok(StepReport {
        loss: res.value,
        per_subtrajectory: res.per_subtrajectory,
        grad_norm,
        applied,
        log_z: out.log_z,
        elbo: out.elbo,
    })
}

/// One replay-buffer step: the fresh batch is inserted, then each subtrajectory
/// trains on `K/2` prioritized buffer records plus `K/2` fresh records drawn
/// without replacement, under the log-variance loss.
pub fn train_step_buffer(
    sampler: &mut Sampler,
    opt: &mut OptState,
    buffer: &mut ReplayBuffer,
    iteration: u64,
    k: usize,
    flags: PassFlags,
    smc: &SmcSettings,
    optim: &OptimSettings,
    streams: &mut Streams,
) -> Result<StepReport> {
    train_step_buffer_with(sampler, opt, buffer, iteration, k, flags, smc, optim, streams, |buf, n, half, _, rng| {
        buf.sample_prioritized(n, half, rng)
    })
}

/// [`train_step_buffer`] with a caller-supplied buffer draw. `draw` receives the
/// buffer, the subtrajectory index, the number of records wanted and the fresh
/// indices already chosen for the other half.
pub fn train_step_buffer_with<D>(
    sampler: &mut Sampler,
    opt: &mut OptState,
    buffer: &mut ReplayBuffer,
    iteration: u64,
    k: usize,
    flags: PassFlags,
    smc: &SmcSettings,
    optim: &OptimSettings,
    streams: &mut Streams,
    mut draw: D,
) -> Result<StepReport>
where
    D: FnMut(&ReplayBuffer, usize, usize, &[usize], &mut ChaCha8Rng) -> Result<(Array3<f64>, Vec<usize>)>,
{
    if k < 4 {
        return Err(Error::Config("buffer training needs K ≥ 4".into()));
    }
    let flags = PassFlags {
        store_trajectories: true,
        ..flags
    };
    let out = forward_pass(sampler, k, flags, smc, streams)?;
    let trajs = out.trajectories.as_ref().expect("trajectories stored");
    let half = k / 2;
    let mut subs = Vec::with_capacity(trajs.len());
    let mut picked = Vec::with_capacity(trajs.len());
    for (i, t) in trajs.iter().enumerate() {
        let n = i + 1;
        buffer.insert(n, t.view(), out.log_rnds.row(i).as_slice().expect("contiguous"), iteration)?;
        let fresh_idx = sample_without_replacement(&mut streams.resample, k, k - half).into_vec();
        let (from_buffer, idx) = draw(buffer, n, half, &fresh_idx, &mut streams.resample)?;
        if from_buffer.dim().0 != half || idx.len() != half {
            return Err(Error::Buffer(format!("buffer draw returned {} records, expected {half}", idx.len())));
        }
        let fresh = t.select(Axis(0), &fresh_idx);
        let mut points = Array3::zeros((k, t.dim().1, t.dim().2));
        points.slice_mut(s![..half, .., ..]).assign(&from_buffer);
        points.slice_mut(s![half.., .., ..]).assign(&fresh);
        subs.push(SubBatch {
            n,
            points,
            prev_log_weights: Array1::from_elem(k, -(k as f64).ln()),
        });
        picked.push(idx);
    }
    let batch = LossBatch {
        subs,
        last_resample: vec![out.last_resample_subtraj; k],
    };
    let mut res = match loss_and_grad(&batch, LossKind::Lv, &sampler.path, &sampler.policy) {
        Ok(r) => r,
        Err(Error::NonFiniteWeight { .. }) | Err(Error::NonFiniteActivation { .. }) => return Ok(skipped(f64::NAN, vec![], &out)),
        Err(e) => return Err(e),
    };
    for (i, idx) in picked.iter().enumerate() {
        let refreshed = res.log_rnds[i].slice(s![..half]).to_vec();
        buffer.update_priorities(i + 1, idx, &refreshed)?;
    }
    if !res.value.is_finite() {
        return Ok(skipped(res.value, res.per_subtrajectory, &out));
    }
    let (grad_norm, applied) = apply_update(sampler, opt, optim, &mut res.grads);
    Ok(StepReport {
        loss: res.value,
        per_subtrajectory: res.per_subtrajectory,
        grad_norm,
        applied,
        log_z: out.log_z,
        elbo: out.elbo,
    })
}

/// Target evaluations per particle per iteration: one per integrator step
/// plus one per leapfrog step at every subtrajectory boundary.
pub fn nfe_per_iteration(grid: &Grid, mcmc: bool, leapfrog_steps: usize) -> usize {
    grid.total() + if mcmc { grid.n_sub * leapfrog_steps } else { 0 }
}
