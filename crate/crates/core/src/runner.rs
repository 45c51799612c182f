//! Experiment orchestration: sampler construction, the training loop with
//! periodic evaluation, checkpoints and output files.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! config.toml                         resolved configuration
//! ground_truth_<task>_<target_seed>.txt
//! seed_<s>/metrics.jsonl              header line, then train and eval records
//! seed_<s>/checkpoint_best.json       parameters at the best running-averaged evaluation
//! seed_<s>/checkpoint_final.json
//! seed_<s>/samples.txt                equally weighted samples of the last evaluation
//! summary.json, summary.txt           mean ± s.d. across seeds
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::annealing::{AnnealingPath, PriorParams, ScheduleParams};
use crate::buffer::ReplayBuffer;
use crate::config::{Algorithm, RunConfig, SelectMetric};
use crate::error::{Error, Result};
use crate::eval::{evaluate, running_average, EvalRequest, MetricsRecord};
use crate::net::{Mlp, MlpArch};
use crate::numerics::rng_stream;
use crate::report::{aggregate, read_points, write_points, LogHeader, LogLine, MetricsLog, MetricsWriter, Summary, TrainRecord, LOG_FORMAT, LOG_VERSION};
use crate::sde::{ControlPolicy, Correction};
use crate::target::Target;
use crate::trainer::{new_opt_state, nfe_per_iteration, train_step, train_step_buffer, Sampler, StepReport, Streams};

const TAG_NET: u64 = 0x6e6574;
const TAG_TRAIN: u64 = 0x747261;
const TAG_EVAL: u64 = 0x657661;
const TAG_TRUTH: u64 = 0x677474;

/// Consecutive failed training steps tolerated before a run is aborted.
pub const MAX_CONSECUTIVE_INCIDENTS: usize = 50;

pub const CHECKPOINT_FORMAT: &str = "scld-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Builds the untrained sampler for one seed.
pub fn build_sampler(cfg: &RunConfig, seed: u64) -> Result<Sampler> {
    let target = Arc::new(Target::build(&cfg.target, cfg.target_seed)?);
    let grid = cfg.grid();
    let total = grid.total();
    let dim = target.dim();
    let path = AnnealingPath::new(
        PriorParams::isotropic(dim, cfg.sampler.init_scale),
        ScheduleParams::linear(total),
        target,
        grid,
    )?;
    let correction = match cfg.algorithm {
        Algorithm::Smc => Correction::Zero,
        _ => {
            let arch = MlpArch {
                dim,
                hidden: cfg.network.hidden,
                embedding: cfg.network.embedding,
                variant: cfg.network.variant,
            };
            Correction::net(Mlp::init(arch, &mut rng_stream(seed, &[TAG_NET]))?, total)
        }
    };
    let policy = ControlPolicy::new(correction, cfg.noise_schedule()?, total);
    Ok(Sampler { path, policy })
}

/// Learned parameters with the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub seed: u64,
    pub iteration: u64,
    pub net: Option<Vec<f64>>,
    pub prior_mu: Vec<f64>,
    pub prior_log_std: Vec<f64>,
    pub theta: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(cfg: &RunConfig, seed: u64, iteration: u64, sampler: &Sampler) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            seed,
            iteration,
            net: sampler.policy.correction.mlp().map(|m| m.params.clone()),
            prior_mu: sampler.path.prior.mu.clone(),
            prior_log_std: sampler.path.prior.log_std.clone(),
            theta: sampler.path.schedule.theta.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        if ck.config_hash != ck.config.hash() {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        Ok(ck)
    }

    /// Rebuilds the sampler and installs the stored parameters.
    pub fn restore(&self) -> Result<Sampler> {
        let mut sampler = build_sampler(&self.config, self.seed)?;
        let mismatch = |what: &str| Error::Checkpoint(format!("{what} has the wrong length"));
        match (sampler.policy.correction.mlp_mut(), &self.net) {
            (Some(m), Some(p)) if m.params.len() == p.len() => m.params.clone_from(p),
            (None, None) => {}
            _ => return Err(mismatch("network")),
        }
        if self.prior_mu.len() != sampler.path.prior.mu.len() || self.prior_log_std.len() != sampler.path.prior.log_std.len() {
            return Err(mismatch("prior"));
        }
        if self.theta.len() != sampler.path.schedule.theta.len() {
            return Err(mismatch("schedule"));
        }
        sampler.path.prior.mu.clone_from(&self.prior_mu);
        sampler.path.prior.log_std.clone_from(&self.prior_log_std);
        sampler.path.schedule.theta.clone_from(&self.theta);
        sampler.refresh();
        Ok(sampler)
    }
}

/// Ground-truth samples for Sinkhorn, drawn once per (task, target seed) and cached.
pub fn ground_truth(cfg: &RunConfig, target: &Target, dir: &Path) -> Result<Array2<f64>> {
    let path = dir.join(format!("ground_truth_{}_{}.txt", cfg.task, cfg.target_seed));
    if path.exists() {
        let pts = read_points(&path)?;
        if pts.nrows() == cfg.eval.ground_truth_samples && pts.ncols() == target.dim() {
            return Ok(pts);
        }
    }
    let mut rng = rng_stream(cfg.target_seed, &[TAG_TRUTH]);
    let rows = target.exact_sample(&mut rng, cfg.eval.ground_truth_samples)?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let pts = Array2::from_shape_vec((cfg.eval.ground_truth_samples, target.dim()), flat).map_err(|e| Error::Shape(e.to_string()))?;
    write_points(&path, pts.view())?;
    Ok(pts)
}

/// Everything an evaluation needs besides the sampler.
pub struct Evaluator {
    cfg: RunConfig,
    truth: Option<Array2<f64>>,
    modes: Option<Vec<Vec<f64>>>,
    true_log_z: Option<f64>,
}

impl Evaluator {
    pub fn new(cfg: &RunConfig, target: &Target, dir: &Path) -> Result<Self> {
        let truth = if cfg.eval.sinkhorn {
            if !target.has_exact_sampler() {
                return Err(Error::Unsupported {
                    operation: "sinkhorn evaluation",
                    target: target.name().into(),
                });
            }
            Some(ground_truth(cfg, target, dir)?)
        } else {
            None
        };
        let modes = if cfg.eval.coverage {
            Some(target.mode_centers().ok_or_else(|| Error::Unsupported {
                operation: "mode coverage",
                target: target.name().into(),
            })?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            truth,
            modes,
            true_log_z: target.true_log_z(),
        })
    }

    pub fn run(&self, sampler: &Sampler, seed: u64, iteration: u64) -> Result<(MetricsRecord, Array2<f64>)> {
        let eval_sampler = sampler.with_partition(self.cfg.eval.n_sub)?;
        let request = EvalRequest {
            particles: self.cfg.eval.particles,
            flags: self.cfg.eval_flags(),
            smc: self.cfg.smc_settings(),
            true_log_z: self.true_log_z,
            ground_truth: self.truth.as_ref().map(|t| t.view()),
            sinkhorn_epsilon_factor: self.cfg.eval.sinkhorn_epsilon_factor,
            sinkhorn_max_iter: self.cfg.eval.sinkhorn_max_iter,
            modes: self.modes.as_deref(),
            coverage_radius: self.cfg.eval.coverage_radius,
        };
        let mut streams = Streams::new(seed, &[TAG_EVAL, iteration]);
        evaluate(&eval_sampler, &request, iteration, &mut streams)
    }
}

fn select_value(metric: SelectMetric, r: &MetricsRecord) -> Option<f64> {
    match metric {
        SelectMetric::Elbo => Some(r.elbo),
        SelectMetric::LogZError => r.log_z_error,
        SelectMetric::Sinkhorn => r.sinkhorn,
    }
}

fn opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Result of training one seed.
pub struct SeedRun {
    pub seed: u64,
    pub sampler: Sampler,
    pub evals: Vec<MetricsRecord>,
    pub log_path: PathBuf,
}

/// Trains one seed, writing its metrics log, checkpoints and final samples into `dir`.
pub fn run_seed(cfg: &RunConfig, seed: u64, dir: &Path) -> Result<SeedRun> {
    std::fs::create_dir_all(dir)?;
    let mut sampler = build_sampler(cfg, seed)?;
    let target = sampler.path.target.clone();
    let evaluator = Evaluator::new(cfg, &target, dir.parent().unwrap_or(dir))?;
    let log_path = dir.join("metrics.jsonl");
    let mut log = MetricsWriter::create(&log_path)?;
    log.write(&LogLine::Header(LogHeader {
        format: LOG_FORMAT.into(),
        version: LOG_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        task: cfg.task.clone(),
        algorithm: cfg.algorithm.name().into(),
        seed,
        target_seed: cfg.target_seed,
        sinkhorn_epsilon_factor: cfg.eval.sinkhorn_epsilon_factor,
        nfe_per_iteration: nfe_per_iteration(&cfg.grid(), cfg.sampler.mcmc, cfg.sampler.leapfrog_steps),
        n_params: sampler.policy.correction.mlp().map_or(0, |m| m.n_params()),
        true_log_z: target.true_log_z(),
    }))?;

    let optim = cfg.optim_settings();
    let smc = cfg.smc_settings();
    let flags = cfg.train_flags();
    let mut opt_state = new_opt_state(&sampler, &optim);
    let grid = cfg.grid();
    let mut buffer = (cfg.algorithm == Algorithm::ScldBuffer)
        .then(|| ReplayBuffer::new(grid.n_sub, cfg.buffer.capacity, grid.inner + 1, sampler.path.dim()));
    let eval_points = cfg.eval_iterations();
    let mut next_eval = 0;
    let mut evals: Vec<MetricsRecord> = Vec::new();
    let mut selected = Vec::new();
    let mut best: Option<f64> = None;
    let mut last_samples = None;
    let mut incidents = 0usize;
    let start = Instant::now();

    for iteration in 0..=cfg.iterations {
        if next_eval < eval_points.len() && eval_points[next_eval] == iteration {
            next_eval += 1;
            let (mut record, samples) = evaluator.run(&sampler, seed, iteration)?;
            record.wall_seconds = start.elapsed().as_secs_f64();
            log.write(&LogLine::Eval(record.clone()))?;
            if let Some(v) = select_value(cfg.eval.select_metric, &record) {
                selected.push(v);
                let avg = *running_average(&selected, cfg.eval.window).last().expect("non-empty");
                let higher = cfg.eval.select_metric.higher_is_better();
                if best.is_none_or(|b| if higher { avg > b } else { avg < b }) {
                    best = Some(avg);
                    Checkpoint::capture(cfg, seed, iteration, &sampler).save(&dir.join("checkpoint_best.json"))?;
                }
            }
            evals.push(record);
            last_samples = Some(samples);
        }
        if iteration == cfg.iterations {
            break;
        }
        let step = iteration + 1;
        let mut streams = Streams::new(seed, &[TAG_TRAIN, step]);
        let k = cfg.sampler.particles;
        let outcome = match buffer.as_mut() {
            Some(buf) => train_step_buffer(&mut sampler, &mut opt_state, buf, step, k, flags, &smc, &optim, &mut streams),
            None => train_step(&mut sampler, &mut opt_state, k, cfg.loss, flags, &smc, &optim, &mut streams),
        };
        let record = match outcome {
            Ok(StepReport {
                loss,
                grad_norm,
                applied,
                log_z,
                elbo,
                ..
            }) => TrainRecord {
                iteration: step,
                wall_seconds: start.elapsed().as_secs_f64(),
                loss: opt(loss),
                grad_norm: opt(grad_norm),
                applied,
                log_z: opt(log_z),
                elbo: opt(elbo),
                incident: (!applied).then(|| "update skipped: non-finite loss or gradient".to_string()),
            },
            Err(e @ (Error::NonFiniteWeight { .. } | Error::NonFiniteActivation { .. } | Error::DegenerateWeights)) => TrainRecord {
                iteration: step,
                wall_seconds: start.elapsed().as_secs_f64(),
                loss: None,
                grad_norm: None,
                applied: false,
                log_z: None,
                elbo: None,
                incident: Some(e.to_string()),
            },
            Err(e) => return Err(e),
        };
        incidents = if record.applied { 0 } else { incidents + 1 };
        log.write(&LogLine::Train(record))?;
        if incidents >= MAX_CONSECUTIVE_INCIDENTS {
            return Err(Error::Diverged {
                iteration: step as usize,
                elbo: f64::NAN,
            });
        }
    }
    Checkpoint::capture(cfg, seed, cfg.iterations, &sampler).save(&dir.join("checkpoint_final.json"))?;
    if let Some(s) = last_samples {
        write_points(&dir.join("samples.txt"), s.view())?;
    }
    Ok(SeedRun {
        seed,
        sampler,
        evals,
        log_path,
    })
}

/// Runs every seed, then writes the resolved config and the cross-seed summary.
pub fn run_experiment(cfg: &RunConfig) -> Result<Summary> {
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut logs = Vec::new();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed, &out.join(format!("seed_{seed}")))?;
        logs.push(MetricsLog::read(&run.log_path)?);
    }
    let summary = aggregate(&logs, cfg.eval.window)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    std::fs::write(out.join("summary.txt"), summary.to_text())?;
    Ok(summary)
}

/// Evaluates a checkpoint once, writing `eval_only.jsonl` and `eval_samples.txt` into `out`.
pub fn run_eval_only(checkpoint: &Path, out: &Path) -> Result<MetricsRecord> {
    let ck = Checkpoint::load(checkpoint)?;
    let sampler = ck.restore()?;
    std::fs::create_dir_all(out)?;
    let evaluator = Evaluator::new(&ck.config, &sampler.path.target, out)?;
    let start = Instant::now();
    let (mut record, samples) = evaluator.run(&sampler, ck.seed, ck.iteration)?;
    record.wall_seconds = start.elapsed().as_secs_f64();
    let mut log = MetricsWriter::create(&out.join("eval_only.jsonl"))?;
    log.write(&LogLine::Header(LogHeader {
        format: LOG_FORMAT.into(),
        version: LOG_VERSION,
        code_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: ck.config_hash.clone(),
        task: ck.config.task.clone(),
        algorithm: ck.config.algorithm.name().into(),
        seed: ck.seed,
        target_seed: ck.config.target_seed,
        sinkhorn_epsilon_factor: ck.config.eval.sinkhorn_epsilon_factor,
        nfe_per_iteration: nfe_per_iteration(&ck.config.grid(), ck.config.sampler.mcmc, ck.config.sampler.leapfrog_steps),
        n_params: sampler.policy.correction.mlp().map_or(0, |m| m.n_params()),
        true_log_z: sampler.path.target.true_log_z(),
    }))?;
    log.write(&LogLine::Eval(record.clone()))?;
    write_points(&out.join("eval_samples.txt"), samples.view())?;
    Ok(record)
}
