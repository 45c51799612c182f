//! Benchmark target densities with pointwise log-density, analytic score,
//! exact samplers and reference normalizing constants.

use rand::Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    all_finite, integrate, isotropic_normal_log_pdf, log_sum_exp, rng_stream, standard_normal,
    LN_2PI,
};

const ROBOT_GOAL_DISTANCE: f64 = 7.0;
const ROBOT_GOAL_VARIANCE: f64 = 1e-4;
const ROBOT_FIRST_JOINT_VARIANCE: f64 = 1.0;
const ROBOT_JOINT_VARIANCE: f64 = 4e-2;
const MANYWELL_GRID: usize = 4096;

fn default_one() -> f64 {
    1.0
}
fn default_gmm_components() -> usize {
    40
}
fn default_gmm_half_width() -> f64 {
    40.0
}
fn default_mos_components() -> usize {
    10
}
fn default_mos_half_width() -> f64 {
    10.0
}
fn default_dof() -> f64 {
    2.0
}
fn default_funnel_variance() -> f64 {
    9.0
}
fn default_delta() -> f64 {
    4.0
}
fn default_robot_dim() -> usize {
    10
}

/// Which benchmark density to build and its shape parameters.
///
/// Mixture mode locations are not part of the spec; they are drawn from the
/// seed passed to [`Target::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `exp(log_z) · N(mean·1, variance·I)`.
    Gaussian {
        dim: usize,
        #[serde(default)]
        mean: f64,
        #[serde(default = "default_one")]
        variance: f64,
        #[serde(default)]
        log_z: f64,
    },
    Gmm {
        dim: usize,
        #[serde(default = "default_gmm_components")]
        components: usize,
        #[serde(default = "default_gmm_half_width")]
        half_width: f64,
    },
    Mos {
        dim: usize,
        #[serde(default = "default_mos_components")]
        components: usize,
        #[serde(default = "default_mos_half_width")]
        half_width: f64,
        #[serde(default = "default_dof")]
        dof: f64,
    },
    Funnel {
        dim: usize,
        #[serde(default = "default_funnel_variance")]
        first_variance: f64,
    },
    Manywell {
        dim: usize,
        #[serde(default = "default_delta")]
        delta: f64,
        /// Number of double-well coordinates; defaults to `dim`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wells: Option<usize>,
    },
    Robot1 {
        #[serde(default = "default_robot_dim")]
        dim: usize,
    },
    Robot4 {
        #[serde(default = "default_robot_dim")]
        dim: usize,
    },
}

impl TargetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TargetSpec::Gaussian { .. } => "gaussian",
            TargetSpec::Gmm { .. } => "gmm",
            TargetSpec::Mos { .. } => "mos",
            TargetSpec::Funnel { .. } => "funnel",
            TargetSpec::Manywell { .. } => "manywell",
            TargetSpec::Robot1 { .. } => "robot1",
            TargetSpec::Robot4 { .. } => "robot4",
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            TargetSpec::Gaussian { dim, .. }
            | TargetSpec::Gmm { dim, .. }
            | TargetSpec::Mos { dim, .. }
            | TargetSpec::Funnel { dim, .. }
            | TargetSpec::Manywell { dim, .. }
            | TargetSpec::Robot1 { dim }
            | TargetSpec::Robot4 { dim } => dim,
        }
    }
}

#[derive(Debug, Clone)]
enum Density {
    Gaussian {
        mean: Vec<f64>,
        variance: f64,
        log_z: f64,
    },
    Gmm {
        /// components × dim, row-major.
        means: Vec<f64>,
        components: usize,
    },
    Mos {
        means: Vec<f64>,
        components: usize,
        dof: f64,
        log_norm: f64,
    },
    Funnel {
        first_variance: f64,
    },
    Manywell {
        delta: f64,
        wells: usize,
        log_z_1d: f64,
        /// Tabulated inverse-CDF support and cumulative probabilities.
        grid: Vec<f64>,
        cdf: Vec<f64>,
    },
    Robot {
        goals: Vec<[f64; 2]>,
    },
}

/// An immutable unnormalized target density `ρ_target`.
#[derive(Debug, Clone)]
pub struct Target {
    spec: TargetSpec,
    seed: u64,
    dim: usize,
    density: Density,
}

fn uniform_means(seed: u64, tag: u64, components: usize, dim: usize, half_width: f64) -> Vec<f64> {
    let mut rng = rng_stream(seed, &[tag]);
    (0..components * dim)
        .map(|_| rng.random_range(-half_width..half_width))
        .collect()
}

fn manywell_log_factor(s: f64, delta: f64) -> f64 {
    let q = s * s - delta;
    -q * q
}

impl Target {
    /// Builds a target. Mixture mode locations are drawn from `seed`, so the
    /// same `(spec, seed)` always yields bit-identical structures.
    pub fn build(spec: &TargetSpec, seed: u64) -> Result<Self> {
        let dim = spec.dim();
        if dim == 0 {
            return Err(Error::InvalidTarget("dim must be at least 1".into()));
        }
        let density = match *spec {
            TargetSpec::Gaussian {
                mean,
                variance,
                log_z,
                ..
            } => {
                if !(variance > 0.0) || !mean.is_finite() || !log_z.is_finite() {
                    return Err(Error::InvalidTarget(
                        "gaussian needs finite mean/log_z and positive variance".into(),
                    ));
                }
                Density::Gaussian {
                    mean: vec![mean; dim],
                    variance,
                    log_z,
                }
            }
            TargetSpec::Gmm {
                components,
                half_width,
                ..
            } => {
                if components == 0 || !(half_width > 0.0) {
                    return Err(Error::InvalidTarget(
                        "gmm needs at least one component and positive half_width".into(),
                    ));
                }
                Density::Gmm {
                    means: uniform_means(seed, 0x6d6d, components, dim, half_width),
                    components,
                }
            }
            TargetSpec::Mos {
                components,
                half_width,
                dof,
                ..
            } => {
                if components == 0 || !(half_width > 0.0) || !(dof > 0.0) {
                    return Err(Error::InvalidTarget(
                        "mos needs components ≥ 1, half_width > 0, dof > 0".into(),
                    ));
                }
                use statrs::function::gamma::ln_gamma;
                let log_norm = ln_gamma(0.5 * (dof + 1.0))
                    - ln_gamma(0.5 * dof)
                    - 0.5 * (dof * std::f64::consts::PI).ln();
                Density::Mos {
                    means: uniform_means(seed, 0x6d6f73, components, dim, half_width),
                    components,
                    dof,
                    log_norm,
                }
            }
            TargetSpec::Funnel { first_variance, .. } => {
                if dim < 2 {
                    return Err(Error::InvalidTarget("funnel requires dim ≥ 2".into()));
                }
                if !(first_variance > 0.0) {
                    return Err(Error::InvalidTarget("funnel variance must be positive".into()));
                }
                Density::Funnel { first_variance }
            }
            TargetSpec::Manywell { delta, wells, .. } => {
                let wells = wells.unwrap_or(dim);
                if wells > dim {
                    return Err(Error::InvalidTarget(format!(
                        "manywell has {wells} wells but only {dim} dimensions"
                    )));
                }
                if !delta.is_finite() {
                    return Err(Error::InvalidTarget("manywell delta must be finite".into()));
                }
                let reach = (delta.max(0.0) + 8.0).sqrt() + 1.0;
                let z = integrate(|s| manywell_log_factor(s, delta).exp(), -reach, reach, 1e-13);
                let half = reach.max(4.0);
                let grid: Vec<f64> = (0..MANYWELL_GRID)
                    .map(|i| -half + 2.0 * half * i as f64 / (MANYWELL_GRID - 1) as f64)
                    .collect();
                let dens: Vec<f64> = grid
                    .iter()
                    .map(|&s| manywell_log_factor(s, delta).exp())
                    .collect();
                let mut cdf = vec![0.0; MANYWELL_GRID];
                for i in 1..MANYWELL_GRID {
                    cdf[i] = cdf[i - 1] + 0.5 * (dens[i] + dens[i - 1]) * (grid[i] - grid[i - 1]);
                }
                let total = cdf[MANYWELL_GRID - 1];
                cdf.iter_mut().for_each(|c| *c /= total);
                Density::Manywell {
                    delta,
                    wells,
                    log_z_1d: z.ln(),
                    grid,
                    cdf,
                }
            }
            TargetSpec::Robot1 { .. } => Density::Robot {
                goals: vec![[ROBOT_GOAL_DISTANCE, 0.0]],
            },
            TargetSpec::Robot4 { .. } => Density::Robot {
                goals: vec![
                    [ROBOT_GOAL_DISTANCE, 0.0],
                    [-ROBOT_GOAL_DISTANCE, 0.0],
                    [0.0, ROBOT_GOAL_DISTANCE],
                    [0.0, -ROBOT_GOAL_DISTANCE],
                ],
            },
        };
        Ok(Self {
            spec: spec.clone(),
            seed,
            dim,
            density,
        })
    }

    pub fn spec(&self) -> &TargetSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &'static str {
        self.spec.name()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "point has dimension {} but target has {}",
                x.len(),
                self.dim
            )));
        }
        if !all_finite(x) {
            return Err(Error::NonFinite("target input"));
        }
        Ok(())
    }

    /// Unnormalized `log ρ_target(x)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let mut grad = vec![0.0; self.dim];
        Ok(self.eval(x, &mut grad))
    }

    /// `∇ log ρ_target(x)`.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut grad = vec![0.0; self.dim];
        self.eval(x, &mut grad);
        Ok(grad)
    }

    /// Log-density and score in one pass without input validation.
    pub fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        match &self.density {
            Density::Gaussian {
                mean,
                variance,
                log_z,
            } => {
                for k in 0..d {
                    grad[k] = -(x[k] - mean[k]) / variance;
                }
                log_z + isotropic_normal_log_pdf(x, mean, *variance)
            }
            Density::Gmm { means, components } => {
                let m = *components;
                let mut logits = Vec::with_capacity(m);
                for i in 0..m {
                    let mu = &means[i * d..(i + 1) * d];
                    let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
                    logits.push(-0.5 * sq);
                }
                let lse = log_sum_exp(&logits);
                grad.iter_mut().for_each(|g| *g = 0.0);
                for i in 0..m {
                    let r = (logits[i] - lse).exp();
                    if r == 0.0 {
                        continue;
                    }
                    let mu = &means[i * d..(i + 1) * d];
                    for k in 0..d {
                        grad[k] += r * (mu[k] - x[k]);
                    }
                }
                lse - (m as f64).ln() - 0.5 * d as f64 * LN_2PI
            }
            Density::Mos {
                means,
                components,
                dof,
                log_norm,
            } => {
                let m = *components;
                let mut logits = Vec::with_capacity(m);
                for i in 0..m {
                    let mu = &means[i * d..(i + 1) * d];
                    let lp: f64 = x
                        .iter()
                        .zip(mu)
                        .map(|(a, b)| {
                            let z = a - b;
                            log_norm - 0.5 * (dof + 1.0) * (z * z / dof).ln_1p()
                        })
                        .sum();
                    logits.push(lp);
                }
                let lse = log_sum_exp(&logits);
                grad.iter_mut().for_each(|g| *g = 0.0);
                for i in 0..m {
                    let r = (logits[i] - lse).exp();
                    if r == 0.0 {
                        continue;
                    }
                    let mu = &means[i * d..(i + 1) * d];
                    for k in 0..d {
                        let z = x[k] - mu[k];
                        grad[k] -= r * (dof + 1.0) * z / (dof + z * z);
                    }
                }
                lse - (m as f64).ln()
            }
            Density::Funnel { first_variance } => {
                let x1 = x[0];
                let inv = (-x1).exp();
                let mut lp = -0.5 * (LN_2PI + first_variance.ln()) - 0.5 * x1 * x1 / first_variance;
                let mut sq = 0.0;
                for k in 1..d {
                    sq += x[k] * x[k];
                    grad[k] = -x[k] * inv;
                }
                let rest = (d - 1) as f64;
                lp += -0.5 * rest * (LN_2PI + x1) - 0.5 * sq * inv;
                grad[0] = -x1 / first_variance - 0.5 * rest + 0.5 * sq * inv;
                lp
            }
            Density::Manywell { delta, wells, .. } => {
                let mut lp = 0.0;
                for k in 0..d {
                    if k < *wells {
                        let q = x[k] * x[k] - delta;
                        lp -= q * q;
                        grad[k] = -4.0 * x[k] * q;
                    } else {
                        lp -= 0.5 * x[k] * x[k];
                        grad[k] = -x[k];
                    }
                }
                lp
            }
            Density::Robot { goals } => {
                let mut lp = 0.0;
                let (mut ex, mut ey) = (0.0, 0.0);
                for k in 0..d {
                    let var = if k == 0 {
                        ROBOT_FIRST_JOINT_VARIANCE
                    } else {
                        ROBOT_JOINT_VARIANCE
                    };
                    lp += -0.5 * (LN_2PI + var.ln()) - 0.5 * x[k] * x[k] / var;
                    grad[k] = -x[k] / var;
                    ex += x[k].cos();
                    ey += x[k].sin();
                }
                // Max over goal densities; ties resolve to the lowest index.
                let mut best = 0;
                let mut best_sq = f64::INFINITY;
                for (i, g) in goals.iter().enumerate() {
                    let sq = (ex - g[0]).powi(2) + (ey - g[1]).powi(2);
                    if sq < best_sq {
                        best_sq = sq;
                        best = i;
                    }
                }
                let g = goals[best];
                lp += -(LN_2PI + ROBOT_GOAL_VARIANCE.ln()) - 0.5 * best_sq / ROBOT_GOAL_VARIANCE;
                let cx = -(ex - g[0]) / ROBOT_GOAL_VARIANCE;
                let cy = -(ey - g[1]) / ROBOT_GOAL_VARIANCE;
                for k in 0..d {
                    grad[k] += cx * (-x[k].sin()) + cy * x[k].cos();
                }
                lp
            }
        }
    }

    /// I.i.d. samples from the normalized target, where an exact sampler exists.
    pub fn exact_sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Vec<f64>>> {
        let d = self.dim;
        match &self.density {
            Density::Gaussian { mean, variance, .. } => {
                let sd = variance.sqrt();
                Ok((0..n)
                    .map(|_| mean.iter().map(|m| m + sd * standard_normal(rng)).collect())
                    .collect())
            }
            Density::Gmm { means, components } => Ok((0..n)
                .map(|_| {
                    let i = rng.random_range(0..*components);
                    (0..d)
                        .map(|k| means[i * d + k] + standard_normal(rng))
                        .collect()
                })
                .collect()),
            Density::Mos {
                means,
                components,
                dof,
                ..
            } => {
                let t = StudentT::new(*dof).map_err(|e| Error::InvalidTarget(e.to_string()))?;
                Ok((0..n)
                    .map(|_| {
                        let i = rng.random_range(0..*components);
                        (0..d).map(|k| means[i * d + k] + t.sample(rng)).collect()
                    })
                    .collect())
            }
            Density::Funnel { first_variance } => Ok((0..n)
                .map(|_| {
                    let x1 = first_variance.sqrt() * standard_normal(rng);
                    let sd = (0.5 * x1).exp();
                    std::iter::once(x1)
                        .chain((1..d).map(|_| sd * standard_normal(rng)))
                        .collect()
                })
                .collect()),
            Density::Manywell {
                wells, grid, cdf, ..
            } => Ok((0..n)
                .map(|_| {
                    (0..d)
                        .map(|k| {
                            if k < *wells {
                                inverse_cdf(grid, cdf, rng.random::<f64>())
                            } else {
                                standard_normal(rng)
                            }
                        })
                        .collect()
                })
                .collect()),
            Density::Robot { .. } => Err(Error::Unsupported {
                operation: "exact sampling",
                target: self.name().into(),
            }),
        }
    }

    pub fn has_exact_sampler(&self) -> bool {
        !matches!(self.density, Density::Robot { .. })
    }

    /// Reference `log Z` where it is known in closed form or by quadrature.
    pub fn true_log_z(&self) -> Option<f64> {
        match &self.density {
            Density::Gaussian { log_z, .. } => Some(*log_z),
            Density::Gmm { .. } | Density::Mos { .. } | Density::Funnel { .. } => Some(0.0),
            Density::Manywell {
                wells, log_z_1d, ..
            } => Some(
                *wells as f64 * log_z_1d + 0.5 * (self.dim - wells) as f64 * LN_2PI,
            ),
            Density::Robot { .. } => None,
        }
    }

    /// Mode locations, when the target has an enumerable set of them.
    pub fn mode_centers(&self) -> Option<Vec<Vec<f64>>> {
        let d = self.dim;
        match &self.density {
            Density::Gaussian { mean, .. } => Some(vec![mean.clone()]),
            Density::Gmm { means, components } | Density::Mos { means, components, .. } => Some(
                (0..*components)
                    .map(|i| means[i * d..(i + 1) * d].to_vec())
                    .collect(),
            ),
            Density::Manywell { delta, wells, .. } if *delta > 0.0 && *wells <= 16 => {
                let r = delta.sqrt();
                Some(
                    (0..1usize << wells)
                        .map(|mask| {
                            (0..d)
                                .map(|k| {
                                    if k < *wells {
                                        if mask >> k & 1 == 1 {
                                            r
                                        } else {
                                            -r
                                        }
                                    } else {
                                        0.0
                                    }
                                })
                                .collect()
                        })
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Marginal CDF of one double-well coordinate (tabulated); only for manywell.
    pub fn manywell_marginal_cdf(&self, s: f64) -> Option<f64> {
        match &self.density {
            Density::Manywell { grid, cdf, .. } => Some(if s <= grid[0] {
                0.0
            } else if s >= grid[grid.len() - 1] {
                1.0
            } else {
                let i = grid.partition_point(|&g| g <= s) - 1;
                let w = (s - grid[i]) / (grid[i + 1] - grid[i]);
                cdf[i] + w * (cdf[i + 1] - cdf[i])
            }),
            _ => None,
        }
    }
}

fn inverse_cdf(grid: &[f64], cdf: &[f64], u: f64) -> f64 {
    let i = cdf.partition_point(|&c| c < u).clamp(1, cdf.len() - 1);
    let (c0, c1) = (cdf[i - 1], cdf[i]);
    let w = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.5 };
    grid[i - 1] + w * (grid[i] - grid[i - 1])
}
