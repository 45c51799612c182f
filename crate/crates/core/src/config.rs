//! Run configuration: TOML parsing with defaults, validation and serialization.
//!
//! Every key is optional except `task` and `algorithm`. Unknown keys are
//! rejected. [`RunConfig::to_toml`] writes every field explicitly, so the
//! output parses back to an identical configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::annealing::Grid;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::net::NetVariant;
use crate::sde::{NoiseSchedule, ScheduleKind};
use crate::smc::ResampleScheme;
use crate::target::TargetSpec;
use crate::trainer::{OptimSettings, PassFlags, SmcSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// On-policy training of the full sequential sampler.
    Scld,
    /// Replay-buffer training of the full sequential sampler (log-variance loss).
    ScldBuffer,
    /// Untrained sequential Monte Carlo: zero network, no updates.
    Smc,
    /// One subtrajectory, no resampling or MCMC, log-variance loss.
    CmcdLv,
    /// One subtrajectory, no resampling or MCMC, KL loss.
    CmcdKl,
}

impl Algorithm {
    pub fn is_cmcd(self) -> bool {
        matches!(self, Algorithm::CmcdLv | Algorithm::CmcdKl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Scld => "scld",
            Algorithm::ScldBuffer => "scld_buffer",
            Algorithm::Smc => "smc",
            Algorithm::CmcdLv => "cmcd_lv",
            Algorithm::CmcdKl => "cmcd_kl",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "scld" => Ok(Algorithm::Scld),
            "scld_buffer" => Ok(Algorithm::ScldBuffer),
            "smc" => Ok(Algorithm::Smc),
            "cmcd_lv" => Ok(Algorithm::CmcdLv),
            "cmcd_kl" => Ok(Algorithm::CmcdKl),
            other => Err(Error::Config(format!("algorithm: unknown value `{other}`"))),
        }
    }
}

/// Metric used to pick the best evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    Elbo,
    LogZError,
    Sinkhorn,
}

impl SelectMetric {
    pub fn higher_is_better(self) -> bool {
        matches!(self, SelectMetric::Elbo)
    }
}

/// The target associated with a named task.
pub fn task_target(task: &str) -> Option<TargetSpec> {
    Some(match task {
        "gaussian" => TargetSpec::Gaussian {
            dim: 2,
            mean: 0.0,
            variance: 4.0,
            log_z: 0.0,
        },
        "funnel" => TargetSpec::Funnel {
            dim: 10,
            first_variance: 9.0,
        },
        "mw54" => TargetSpec::Manywell {
            dim: 5,
            delta: 4.0,
            wells: None,
        },
        "gmm40" => TargetSpec::Gmm {
            dim: 50,
            components: 40,
            half_width: 40.0,
        },
        "gmm40_2d" => TargetSpec::Gmm {
            dim: 2,
            components: 40,
            half_width: 40.0,
        },
        "mos" => TargetSpec::Mos {
            dim: 50,
            components: 10,
            half_width: 10.0,
            dof: 2.0,
        },
        "robot1" => TargetSpec::Robot1 { dim: 10 },
        "robot4" => TargetSpec::Robot4 { dim: 10 },
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Number of subtrajectories `N`.
    pub n_sub: usize,
    /// Integrator steps per subtrajectory `L`.
    pub inner: usize,
    pub total_steps: usize,
    /// Particles per training pass `K`.
    pub particles: usize,
    pub ess_threshold: f64,
    pub resample: bool,
    pub mcmc: bool,
    pub resample_scheme: ResampleScheme,
    pub hmc_step_sizes: [f64; 2],
    pub leapfrog_steps: usize,
    /// Standard deviation of the initial isotropic prior.
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: NetVariant,
    pub hidden: usize,
    pub embedding: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub model_lr: f64,
    pub prior_lr: f64,
    pub schedule_lr: f64,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    /// Records kept per subtrajectory.
    pub capacity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluation events spread evenly over training, plus one at iteration 0.
    pub count: usize,
    pub particles: usize,
    /// Subtrajectories at evaluation time; must divide `total_steps`.
    pub n_sub: usize,
    pub resample: bool,
    pub mcmc: bool,
    /// Running-average window over evaluation events.
    pub window: usize,
    pub select_metric: SelectMetric,
    pub sinkhorn: bool,
    pub sinkhorn_epsilon_factor: f64,
    pub sinkhorn_max_iter: usize,
    pub coverage: bool,
    pub coverage_radius: f64,
    /// Size of the cached ground-truth sample.
    pub ground_truth_samples: usize,
}

/// A fully resolved and validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub algorithm: Algorithm,
    pub loss: LossKind,
    pub iterations: u64,
    pub seeds: Vec<u64>,
    /// Seed for random target structure such as mixture means.
    pub target_seed: u64,
    pub output_dir: String,
    pub target: TargetSpec,
    pub sampler: SamplerConfig,
    pub noise: NoiseConfig,
    pub network: NetworkConfig,
    pub optim: OptimConfig,
    pub buffer: BufferConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSampler {
    n_sub: Option<usize>,
    inner: Option<usize>,
    total_steps: Option<usize>,
    particles: Option<usize>,
    ess_threshold: Option<f64>,
    resample: Option<bool>,
    mcmc: Option<bool>,
    resample_scheme: Option<ResampleScheme>,
    hmc_step_sizes: Option<[f64; 2]>,
    leapfrog_steps: Option<usize>,
    init_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    kind: Option<ScheduleKind>,
    sigma_min: Option<f64>,
    sigma_max: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    variant: Option<NetVariant>,
    hidden: Option<usize>,
    embedding: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptim {
    model_lr: Option<f64>,
    prior_lr: Option<f64>,
    schedule_lr: Option<f64>,
    clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBuffer {
    capacity: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    count: Option<usize>,
    particles: Option<usize>,
    n_sub: Option<usize>,
    resample: Option<bool>,
    mcmc: Option<bool>,
    window: Option<usize>,
    select_metric: Option<SelectMetric>,
    sinkhorn: Option<bool>,
    sinkhorn_epsilon_factor: Option<f64>,
    sinkhorn_max_iter: Option<usize>,
    coverage: Option<bool>,
    coverage_radius: Option<f64>,
    ground_truth_samples: Option<usize>,
}

/// A parsed but unresolved configuration; command-line overrides are applied here.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub task: Option<String>,
    pub algorithm: Option<String>,
    pub loss: Option<LossKind>,
    pub iterations: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub target_seed: Option<u64>,
    pub output_dir: Option<String>,
    target: Option<TargetSpec>,
    #[serde(default)]
    sampler: RawSampler,
    #[serde(default)]
    noise: RawNoise,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    optim: RawOptim,
    #[serde(default)]
    buffer: RawBuffer,
    #[serde(default)]
    eval: RawEval,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(field: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(field, format!("must be non-negative and finite, got {v}")))
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies defaults and checks every constraint.
    pub fn resolve(self) -> Result<RunConfig> {
        let task = self.task.ok_or_else(|| invalid("task", "missing mandatory key"))?;
        let algorithm = Algorithm::parse(&self.algorithm.ok_or_else(|| invalid("algorithm", "missing mandatory key"))?)?;
        let target = match self.target {
            Some(t) => t,
            None => task_target(&task).ok_or_else(|| invalid("target", format!("task `{task}` has no built-in target; add a [target] table")))?,
        };
        if target.dim() == 0 {
            return Err(invalid("target.dim", "must be at least 1"));
        }

        let loss = match (algorithm, self.loss) {
            (Algorithm::CmcdLv | Algorithm::ScldBuffer, Some(LossKind::Kl)) => {
                return Err(invalid("loss", format!("{} requires the lv loss", algorithm.name())))
            }
            (Algorithm::CmcdKl, Some(LossKind::Lv)) => return Err(invalid("loss", "cmcd_kl requires the kl loss")),
            (Algorithm::CmcdKl, _) => LossKind::Kl,
            (_, Some(l)) => l,
            (_, None) => LossKind::Lv,
        };

        let s = self.sampler;
        let cmcd = algorithm.is_cmcd();
        let (n_sub, inner, total_steps) = resolve_grid(s.n_sub, s.inner, s.total_steps, cmcd)?;
        if cmcd && n_sub != 1 {
            return Err(invalid("sampler.n_sub", format!("{} requires n_sub = 1, got {n_sub}", algorithm.name())));
        }
        let resample = s.resample.unwrap_or(!cmcd);
        let mcmc = s.mcmc.unwrap_or(!cmcd);
        if cmcd && (resample || mcmc) {
            return Err(invalid("sampler", format!("{} runs without resampling and MCMC", algorithm.name())));
        }
        let particles = s.particles.unwrap_or(2000);
        if particles == 0 {
            return Err(invalid("sampler.particles", "must be at least 1"));
        }
        if algorithm == Algorithm::ScldBuffer && particles < 4 {
            return Err(invalid("sampler.particles", "buffer training needs at least 4 particles"));
        }
        let ess_threshold = s.ess_threshold.unwrap_or(0.3);
        if !(ess_threshold > 0.0 && ess_threshold < 1.0) {
            return Err(invalid("sampler.ess_threshold", format!("must lie in (0, 1), got {ess_threshold}")));
        }
        let hmc_step_sizes = s.hmc_step_sizes.unwrap_or([0.1, 0.1]);
        for e in hmc_step_sizes {
            positive("sampler.hmc_step_sizes", e)?;
        }
        let leapfrog_steps = s.leapfrog_steps.unwrap_or(10);
        if mcmc && leapfrog_steps == 0 {
            return Err(invalid("sampler.leapfrog_steps", "must be at least 1 when mcmc is enabled"));
        }
        let init_scale = s.init_scale.unwrap_or(1.0);
        positive("sampler.init_scale", init_scale)?;
        let sampler = SamplerConfig {
            n_sub,
            inner,
            total_steps,
            particles,
            ess_threshold,
            resample,
            mcmc,
            resample_scheme: s.resample_scheme.unwrap_or_default(),
            hmc_step_sizes,
            leapfrog_steps,
            init_scale,
        };

        let noise = NoiseConfig {
            kind: self.noise.kind.unwrap_or(ScheduleKind::Cosine),
            sigma_min: self.noise.sigma_min.unwrap_or(0.01),
            sigma_max: self.noise.sigma_max.unwrap_or(1.0),
        };
        NoiseSchedule::new(noise.kind, noise.sigma_min, noise.sigma_max).map_err(|e| invalid("noise", e))?;

        let network = NetworkConfig {
            variant: self.network.variant.unwrap_or(NetVariant::PisGradNet),
            hidden: self.network.hidden.unwrap_or(64),
            embedding: self.network.embedding.unwrap_or(64),
        };
        if network.hidden == 0 || network.embedding == 0 || network.embedding % 2 != 0 {
            return Err(invalid("network", "hidden must be positive and embedding a positive even number"));
        }

        let model_lr = self.optim.model_lr.unwrap_or(1e-3);
        let optim = OptimConfig {
            model_lr,
            prior_lr: self.optim.prior_lr.unwrap_or(model_lr),
            schedule_lr: self.optim.schedule_lr.unwrap_or(1e-2),
            clip_norm: self.optim.clip_norm.unwrap_or(1.0),
        };
        non_negative("optim.model_lr", optim.model_lr)?;
        non_negative("optim.prior_lr", optim.prior_lr)?;
        non_negative("optim.schedule_lr", optim.schedule_lr)?;
        positive("optim.clip_norm", optim.clip_norm)?;

        let buffer = BufferConfig {
            capacity: self.buffer.capacity.unwrap_or(20 * particles),
        };
        if algorithm == Algorithm::ScldBuffer && buffer.capacity < particles {
            return Err(invalid("buffer.capacity", "must hold at least one batch"));
        }

        let e = self.eval;
        let eval_n = e.n_sub.unwrap_or(n_sub);
        if eval_n == 0 || total_steps % eval_n != 0 {
            return Err(invalid("eval.n_sub", format!("{eval_n} does not divide total_steps = {total_steps}")));
        }
        let eval_resample = e.resample.unwrap_or(resample);
        let eval_mcmc = e.mcmc.unwrap_or(mcmc);
        if cmcd && (eval_n != 1 || eval_resample || eval_mcmc) {
            return Err(invalid("eval", format!("{} evaluates with n_sub = 1 and no resampling or MCMC", algorithm.name())));
        }
        if eval_mcmc && leapfrog_steps == 0 {
            return Err(invalid("sampler.leapfrog_steps", "must be at least 1 when eval.mcmc is enabled"));
        }
        let eval = EvalConfig {
            count: e.count.unwrap_or(100),
            particles: e.particles.unwrap_or(2000),
            n_sub: eval_n,
            resample: eval_resample,
            mcmc: eval_mcmc,
            window: e.window.unwrap_or(5),
            select_metric: e.select_metric.unwrap_or(SelectMetric::Elbo),
            sinkhorn: e.sinkhorn.unwrap_or(false),
            sinkhorn_epsilon_factor: e.sinkhorn_epsilon_factor.unwrap_or(0.05),
            sinkhorn_max_iter: e.sinkhorn_max_iter.unwrap_or(1000),
            coverage: e.coverage.unwrap_or(false),
            coverage_radius: e.coverage_radius.unwrap_or(3.0),
            ground_truth_samples: e.ground_truth_samples.unwrap_or(2000),
        };
        if eval.particles == 0 || eval.window == 0 {
            return Err(invalid("eval", "particles and window must be at least 1"));
        }
        positive("eval.sinkhorn_epsilon_factor", eval.sinkhorn_epsilon_factor)?;
        positive("eval.coverage_radius", eval.coverage_radius)?;
        if eval.sinkhorn && eval.ground_truth_samples == 0 {
            return Err(invalid("eval.ground_truth_samples", "must be at least 1 when sinkhorn is enabled"));
        }
        if eval.select_metric == SelectMetric::Sinkhorn && !eval.sinkhorn {
            return Err(invalid("eval.select_metric", "sinkhorn selection requires eval.sinkhorn = true"));
        }

        let seeds = self.seeds.unwrap_or_else(|| vec![0]);
        if seeds.is_empty() {
            return Err(invalid("seeds", "must list at least one seed"));
        }
        Ok(RunConfig {
            task,
            algorithm,
            loss,
            // The baseline has nothing to train.
            iterations: if algorithm == Algorithm::Smc { 0 } else { self.iterations.unwrap_or(1000) },
            seeds,
            target_seed: self.target_seed.unwrap_or(0),
            output_dir: self.output_dir.unwrap_or_else(|| "runs".into()),
            target,
            sampler,
            noise,
            network,
            optim,
            buffer,
            eval,
        })
    }

    pub fn set_algorithm(&mut self, name: &str) {
        self.algorithm = Some(name.to_string());
        if Algorithm::parse(name).is_ok_and(|a| a.is_cmcd()) {
            // Presets describe the sequential sampler; the single-subtrajectory
            // variants take the same fine grid on one subtrajectory.
            let total = self.sampler.total_steps.or_else(|| Some(self.sampler.n_sub? * self.sampler.inner?));
            self.sampler.n_sub = Some(1);
            self.sampler.inner = total;
            self.sampler.resample = Some(false);
            self.sampler.mcmc = Some(false);
            self.eval.n_sub = Some(1);
            self.eval.resample = Some(false);
            self.eval.mcmc = Some(false);
            if name == "cmcd_kl" {
                self.loss = Some(LossKind::Kl);
            } else if self.loss == Some(LossKind::Kl) {
                self.loss = Some(LossKind::Lv);
            }
        } else if name == "scld_buffer" {
            self.loss = Some(LossKind::Lv);
        }
    }
}

fn resolve_grid(n: Option<usize>, l: Option<usize>, total: Option<usize>, cmcd: bool) -> Result<(usize, usize, usize)> {
    let check = |n: usize, l: usize, t: usize| -> Result<(usize, usize, usize)> {
        if n == 0 || l == 0 {
            return Err(invalid("sampler", "n_sub and inner must be at least 1"));
        }
        if n * l != t {
            return Err(invalid("sampler", format!("n_sub · inner = {n} · {l} = {} differs from total_steps = {t}", n * l)));
        }
        Ok((n, l, t))
    };
    let divide = |t: usize, by: usize, field: &str| -> Result<usize> {
        if by == 0 || t % by != 0 {
            return Err(invalid(field, format!("{by} does not divide total_steps = {t}")));
        }
        Ok(t / by)
    };
    match (n, l, total) {
        (Some(n), Some(l), Some(t)) => check(n, l, t),
        (Some(n), Some(l), None) => check(n, l, n * l),
        (Some(n), None, t) => {
            let t = t.unwrap_or(128);
            check(n, divide(t, n, "sampler.n_sub")?, t)
        }
        (None, Some(l), t) => {
            let t = t.unwrap_or(128);
            check(divide(t, l, "sampler.inner")?, l, t)
        }
        (None, None, t) => {
            let t = t.unwrap_or(128);
            if cmcd {
                check(1, t, t)
            } else {
                check(t, 1, t)
            }
        }
    }
}

/// Parses and validates configuration text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    RawConfig::parse(text)?.resolve()
}

/// Reads and validates a configuration file.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the serialized configuration with `seeds` and `output_dir` blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds = vec![];
        c.output_dir = String::new();
        let text = c.to_toml().expect("resolved configs serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn grid(&self) -> Grid {
        Grid {
            n_sub: self.sampler.n_sub,
            inner: self.sampler.inner,
            horizon: 1.0,
        }
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.noise.kind, self.noise.sigma_min, self.noise.sigma_max)
    }

    pub fn smc_settings(&self) -> SmcSettings {
        SmcSettings {
            ess_threshold: self.sampler.ess_threshold,
            scheme: self.sampler.resample_scheme,
            hmc_step_sizes: self.sampler.hmc_step_sizes,
            leapfrog_steps: self.sampler.leapfrog_steps,
        }
    }

    pub fn optim_settings(&self) -> OptimSettings {
        OptimSettings {
            model_lr: self.optim.model_lr,
            prior_lr: self.optim.prior_lr,
            schedule_lr: self.optim.schedule_lr,
            clip_norm: self.optim.clip_norm,
        }
    }

    pub fn train_flags(&self) -> PassFlags {
        PassFlags {
            resample: self.sampler.resample,
            mcmc: self.sampler.mcmc,
            store_trajectories: false,
        }
    }

    pub fn eval_flags(&self) -> PassFlags {
        PassFlags {
            resample: self.eval.resample,
            mcmc: self.eval.mcmc,
            store_trajectories: false,
        }
    }

    /// Iterations after which an evaluation runs: 0, then `count` evenly spaced points ending at `iterations`.
    pub fn eval_iterations(&self) -> Vec<u64> {
        let mut out = vec![0];
        let count = self.eval.count as u64;
        if self.iterations > 0 && count > 0 {
            for i in 1..=count {
                let it = (i * self.iterations).div_ceil(count);
                if it > *out.last().expect("non-empty") {
                    out.push(it);
                }
            }
        }
        out
    }
}
