//! Subtrajectory log Radon–Nikodym derivatives on detached points, their
//! gradients with respect to the network, prior and schedule, and their
//! combination across subtrajectories.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::annealing::AnnealingPath;
use crate::error::{Error, Result};
use crate::net::Tape;
use crate::numerics::LN_2PI;
use crate::sde::{evaluate, ControlPolicy, Correction, StepEval};

/// Detached points of one subtrajectory for one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtrajectoryRecord {
    pub particle: usize,
    /// 1-based subtrajectory index; spans fine steps `(n−1)L ..= nL`.
    pub n: usize,
    /// `L+1` rows of dimension `d`.
    pub points: Array2<f64>,
    pub log_rnd: f64,
    pub origin_iteration: u64,
}

/// Gradients for the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub net: Vec<f64>,
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros(path: &AnnealingPath, policy: &ControlPolicy) -> Self {
        let d = path.dim();
        Self {
            net: vec![0.0; policy.correction.mlp().map_or(0, |m| m.n_params())],
            mu: vec![0.0; d],
            log_std: vec![0.0; d],
            theta: vec![0.0; path.schedule.theta.len()],
        }
    }

    pub fn groups(&self) -> [&[f64]; 4] {
        [&self.net, &self.mu, &self.log_std, &self.theta]
    }

    pub fn groups_mut(&mut self) -> [&mut [f64]; 4] {
        [&mut self.net, &mut self.mu, &mut self.log_std, &mut self.theta]
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.groups_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Adds `log N(x_prev; x_next + b h, σ_next² h) − log N(x_next; x_prev + u h, σ_prev² h)`
/// for every row into `acc`.
pub(crate) fn accumulate_kernel_ratio(
    x_prev: ArrayView2<f64>,
    x_next: ArrayView2<f64>,
    prev: &StepEval,
    next: &StepEval,
    sigma2_prev: f64,
    sigma2_next: f64,
    h: f64,
    acc: &mut Array1<f64>,
) {
    let d = x_prev.ncols();
    let norm_f = -0.5 * d as f64 * (LN_2PI + (sigma2_prev * h).ln());
    let norm_b = -0.5 * d as f64 * (LN_2PI + (sigma2_next * h).ln());
    for r in 0..x_prev.nrows() {
        let (mut sq_f, mut sq_b) = (0.0, 0.0);
        for k in 0..d {
            let rf = x_next[[r, k]] - x_prev[[r, k]] - prev.u[[r, k]] * h;
            let rb = x_prev[[r, k]] - x_next[[r, k]] - next.backward_drift(sigma2_next, r, k) * h;
            sq_f += rf * rf;
            sq_b += rb * rb;
        }
        let fwd = norm_f - 0.5 * sq_f / (sigma2_prev * h);
        let bwd = norm_b - 0.5 * sq_b / (sigma2_next * h);
        acc[r] += bwd - fwd;
    }
}

fn check_points(path: &AnnealingPath, n: usize, points: &ArrayView3<f64>) -> Result<()> {
    let (_, steps, d) = points.dim();
    if n == 0 || n > path.grid.n_sub {
        return Err(Error::Shape(format!("subtrajectory {n} outside 1..={}", path.grid.n_sub)));
    }
    if steps != path.grid.inner + 1 || d != path.dim() {
        return Err(Error::Shape(format!(
            "subtrajectory points have shape {:?}, expected [_, {}, {}]",
            points.dim(),
            path.grid.inner + 1,
            path.dim()
        )));
    }
    Ok(())
}

fn check_values(values: &Array1<f64>, n: usize, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteWeight {
            subtrajectory: n,
            step,
        })
    }
}

/// Recorded evaluations of a batch of subtrajectories, for the reverse pass.
pub struct RndTape {
    n: usize,
    points: Array3<f64>,
    evals: Vec<StepEval>,
    tapes: Vec<Option<Tape>>,
}

fn run(path: &AnnealingPath, policy: &ControlPolicy, n: usize, points: ArrayView3<f64>, keep: bool) -> Result<(Array1<f64>, Vec<StepEval>, Vec<Option<Tape>>)> {
    check_points(path, n, &points)?;
    let l = path.grid.inner;
    let h = path.grid.h();
    let j0 = path.grid.sub_start(n);
    let mut values = Array1::zeros(points.len_of(Axis(0)));
    let mut evals = Vec::with_capacity(l + 1);
    let mut tapes = Vec::with_capacity(l + 1);
    for i in 0..=l {
        let x = points.index_axis(Axis(1), i).to_owned();
        let (ev, tape) = evaluate(path, policy, x.view(), j0 + i, keep)?;
        if i == 0 {
            values -= &ev.log_pi;
        } else {
            let prev: &StepEval = evals.last().expect("previous step");
            accumulate_kernel_ratio(
                points.index_axis(Axis(1), i - 1),
                points.index_axis(Axis(1), i),
                prev,
                &ev,
                policy.sigma(j0 + i - 1).powi(2),
                policy.sigma(j0 + i).powi(2),
                h,
                &mut values,
            );
            check_values(&values, n, j0 + i)?;
        }
        if i == l {
            values += &ev.log_pi;
        }
        evals.push(ev);
        tapes.push(tape);
        // Without a tape only the previous evaluation is needed.
        if !keep && evals.len() > 1 {
            evals.remove(0);
            tapes.remove(0);
        }
    }
    check_values(&values, n, j0 + l)?;
    Ok((values, evals, tapes))
}

/// Log-RNDs of a batch of detached subtrajectories under the current parameters.
pub fn log_rnd_batch(path: &AnnealingPath, policy: &ControlPolicy, n: usize, points: ArrayView3<f64>) -> Result<Array1<f64>> {
    Ok(run(path, policy, n, points, false)?.0)
}

/// Log-RND of one stored record.
pub fn log_rnd_subtrajectory(record: &SubtrajectoryRecord, path: &AnnealingPath, policy: &ControlPolicy) -> Result<f64> {
    let pts = record.points.view().insert_axis(Axis(0));
    Ok(log_rnd_batch(path, policy, record.n, pts)?[0])
}

/// Total log-weight of a particle from its per-subtrajectory log-RNDs.
pub fn combine_log_weights(per_subtrajectory: &[f64], expected: usize) -> Result<f64> {
    if per_subtrajectory.len() != expected {
        return Err(Error::Shape(format!(
            "expected {expected} subtrajectory log-RNDs, got {}",
            per_subtrajectory.len()
        )));
    }
    Ok(per_subtrajectory.iter().sum())
}

impl RndTape {
    pub fn forward(path: &AnnealingPath, policy: &ControlPolicy, n: usize, points: ArrayView3<f64>) -> Result<(Array1<f64>, RndTape)> {
        let (values, evals, tapes) = run(path, policy, n, points, true)?;
        Ok((
            values,
            RndTape {
                n,
                points: points.to_owned(),
                evals,
                tapes,
            },
        ))
    }

    /// Accumulates `Σ_r cot_r ∇ log w_r` into `grads`, holding all points fixed.
    pub fn backward(&self, path: &AnnealingPath, policy: &ControlPolicy, cot: &[f64], grads: &mut ParamGrads) -> Result<()> {
        let (b, steps, d) = self.points.dim();
        if cot.len() != b {
            return Err(Error::Shape(format!("cotangent of length {} for {b} records", cot.len())));
        }
        let l = steps - 1;
        let h = path.grid.h();
        let j0 = path.grid.sub_start(self.n);
        let betas = path.betas();
        let mut c_u: Vec<Array2<f64>> = (0..=l).map(|_| Array2::zeros((b, d))).collect();
        let mut c_b: Vec<Array2<f64>> = (0..=l).map(|_| Array2::zeros((b, d))).collect();
        for i in 1..=l {
            let (prev, next) = (&self.evals[i - 1], &self.evals[i]);
            let s2p = policy.sigma(j0 + i - 1).powi(2);
            let s2n = policy.sigma(j0 + i).powi(2);
            for r in 0..b {
                let c = cot[r];
                if c == 0.0 {
                    continue;
                }
                for k in 0..d {
                    let xp = self.points[[r, i - 1, k]];
                    let xn = self.points[[r, i, k]];
                    let rf = xn - xp - prev.u[[r, k]] * h;
                    let rb = xp - xn - next.backward_drift(s2n, r, k) * h;
                    c_u[i - 1][[r, k]] -= c * rf / s2p;
                    c_b[i][[r, k]] += c * rb / s2n;
                }
            }
        }
        let mut d_beta = vec![0.0; betas.len()];
        let inv_var: Vec<f64> = path.prior.log_std.iter().map(|l| (-2.0 * l).exp()).collect();
        for i in 0..=l {
            let j = j0 + i;
            let ev = &self.evals[i];
            let s2 = policy.sigma(j).powi(2);
            let beta = betas[j];
            let mut c_corr = Array2::zeros((b, d));
            for r in 0..b {
                for k in 0..d {
                    let cu = c_u[i][[r, k]];
                    let cb = c_b[i][[r, k]];
                    c_corr[[r, k]] = s2 * (cu - cb);
                    let cg = 0.5 * s2 * (cu + cb);
                    if cg == 0.0 {
                        continue;
                    }
                    let gp = ev.prior_grad[[r, k]];
                    d_beta[j] += cg * (ev.target_grad[[r, k]] - gp);
                    grads.mu[k] += (1.0 - beta) * cg * inv_var[k];
                    grads.log_std[k] += (1.0 - beta) * cg * (-2.0 * gp);
                }
            }
            let sign = if i == 0 {
                -1.0
            } else if i == l {
                1.0
            } else {
                0.0
            };
            if sign != 0.0 {
                for r in 0..b {
                    let c = sign * cot[r];
                    if c == 0.0 {
                        continue;
                    }
                    d_beta[j] += c * (ev.log_target[r] - ev.log_prior[r]);
                    for k in 0..d {
                        let z = self.points[[r, i, k]] - path.prior.mu[k];
                        grads.mu[k] += c * (1.0 - beta) * z * inv_var[k];
                        grads.log_std[k] += c * (1.0 - beta) * (-1.0 + z * z * inv_var[k]);
                    }
                }
            }
            if let (Correction::Net { mlp, contexts }, Some(tape)) = (&policy.correction, &self.tapes[i]) {
                mlp.backward(&contexts[j], tape, c_corr.view(), &mut grads.net)?;
            }
        }
        let d_theta = path.schedule.vjp(betas, &d_beta);
        for (g, v) in grads.theta.iter_mut().zip(d_theta) {
            *g += v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annealing::{Grid, PriorParams, ScheduleParams};
    use crate::net::{Mlp, MlpArch, NetVariant};
    use crate::numerics::{rng_stream, standard_normal};
    use crate::sde::{NoiseSchedule, ScheduleKind};
    use crate::target::{Target, TargetSpec};
    use std::sync::Arc;

    fn unit_path(n: usize, l: usize) -> AnnealingPath {
        let target = Target::build(&TargetSpec::Gaussian { dim: 1, mean: 0.0, variance: 1.0, log_z: 0.0 }, 0).unwrap();
        let grid = Grid::new(n, l).unwrap();
        AnnealingPath::new(PriorParams::isotropic(1, 1.0), ScheduleParams::linear(n * l), Arc::new(target), grid).unwrap()
    }

    #[test]
    fn hand_computed_single_step() {
        // d = 1, h = 1, σ = 1, prior = target = N(0, 1), zero net, x: 0 → 1.
        // u(x) = −x/2 and backward drift σ²g − u = −x/2 as well.
        // log π(1) − log π(0) = −1/2.
        // forward: log N(1; 0, 1) = −½log 2π − ½.
        // backward: log N(0; 1 − ½, 1) = −½log 2π − 1/8.
        // total = −1/2 + (−1/8) − (−1/2) = −1/8.
        let path = unit_path(1, 1);
        let noise = NoiseSchedule::new(ScheduleKind::Constant, 1.0, 1.0).unwrap();
        let policy = ControlPolicy::new(Correction::Zero, noise, 1);
        let rec = SubtrajectoryRecord {
            particle: 0,
            n: 1,
            points: ndarray::arr2(&[[0.0], [1.0]]),
            log_rnd: 0.0,
            origin_iteration: 0,
        };
        let v = log_rnd_subtrajectory(&rec, &path, &policy).unwrap();
        assert!((v + 0.125).abs() < 1e-15, "{v}");
    }

    #[test]
    fn combine_examples() {
        assert_eq!(combine_log_weights(&[0.7], 1).unwrap(), 0.7);
        assert_eq!(combine_log_weights(&[0.0; 4], 4).unwrap(), 0.0);
        assert!(combine_log_weights(&[0.0; 3], 4).is_err());
    }

    #[test]
    fn shape_errors() {
        let path = unit_path(2, 3);
        let noise = NoiseSchedule::new(ScheduleKind::Constant, 1.0, 1.0).unwrap();
        let policy = ControlPolicy::new(Correction::Zero, noise, 6);
        let pts = Array3::zeros((2, 3, 1));
        assert!(log_rnd_batch(&path, &policy, 1, pts.view()).is_err());
        let pts = Array3::zeros((2, 4, 1));
        assert!(log_rnd_batch(&path, &policy, 3, pts.view()).is_err());
        assert!(log_rnd_batch(&path, &policy, 2, pts.view()).is_ok());
    }

    fn random_setup(seed: u64) -> (AnnealingPath, ControlPolicy, Array3<f64>, usize) {
        let mut rng = rng_stream(seed, &[]);
        let d = 2;
        let target = Target::build(&TargetSpec::Gmm { dim: d, components: 3, half_width: 2.0 }, seed).unwrap();
        let grid = Grid::new(3, 2).unwrap();
        let prior = PriorParams {
            mu: (0..d).map(|_| 0.3 * standard_normal(&mut rng)).collect(),
            log_std: (0..d).map(|_| 0.2 * standard_normal(&mut rng)).collect(),
        };
        let schedule = ScheduleParams { theta: (0..6).map(|_| standard_normal(&mut rng)).collect() };
        let path = AnnealingPath::new(prior, schedule, Arc::new(target), grid).unwrap();
        // The gated score input is detached, so finite differences over the prior
        // and schedule only agree with the analytic gradient for the plain variant.
        let variant = if seed % 2 == 0 { NetVariant::PisNet } else { NetVariant::PisGradNet };
        let arch = MlpArch { dim: d, hidden: 5, embedding: 4, variant };
        let mut mlp = Mlp::init(arch, &mut rng).unwrap();
        for p in &mut mlp.params {
            *p += 0.2 * standard_normal(&mut rng);
        }
        let noise = NoiseSchedule::new(ScheduleKind::Cosine, 0.4, 1.3).unwrap();
        let policy = ControlPolicy::new(Correction::net(mlp, 6), noise, 6);
        let n = 1 + (seed as usize % 3);
        let points = Array3::from_shape_fn((3, 3, d), |_| standard_normal(&mut rng));
        (path, policy, points, n)
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let (path, policy, points, n) = random_setup(seed);
            let mut rng = rng_stream(seed, &[1]);
            let cot: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
            let (_, tape) = RndTape::forward(&path, &policy, n, points.view()).unwrap();
            let mut g = ParamGrads::zeros(&path, &policy);
            tape.backward(&path, &policy, &cot, &mut g).unwrap();
            let objective = |path: &AnnealingPath, policy: &ControlPolicy| -> f64 {
                let v = log_rnd_batch(path, policy, n, points.view()).unwrap();
                v.iter().zip(&cot).map(|(a, b)| a * b).sum()
            };
            let h = 1e-5;
            let check = |fd: f64, an: f64, what: &str| {
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-2), "seed {seed} {what}: fd {fd} vs {an}");
            };
            for i in 0..g.net.len() {
                let mut p = policy.clone();
                p.correction.mlp_mut().unwrap().params[i] += h;
                p.correction.refresh();
                let up = objective(&path, &p);
                p.correction.mlp_mut().unwrap().params[i] -= 2.0 * h;
                p.correction.refresh();
                check((up - objective(&path, &p)) / (2.0 * h), g.net[i], "net");
            }
            if seed % 2 == 1 {
                continue;
            }
            for k in 0..2 {
                let mut p = path.clone();
                p.prior.mu[k] += h;
                let up = objective(&p, &policy);
                p.prior.mu[k] -= 2.0 * h;
                check((up - objective(&p, &policy)) / (2.0 * h), g.mu[k], "mu");
                let mut p = path.clone();
                p.prior.log_std[k] += h;
                let up = objective(&p, &policy);
                p.prior.log_std[k] -= 2.0 * h;
                check((up - objective(&p, &policy)) / (2.0 * h), g.log_std[k], "log_std");
            }
            for m in 0..6 {
                let mut p = path.clone();
                p.schedule.theta[m] += h;
                p.refresh();
                let up = objective(&p, &policy);
                p.schedule.theta[m] -= 2.0 * h;
                p.refresh();
                check((up - objective(&p, &policy)) / (2.0 * h), g.theta[m], "theta");
            }
        }
    }

    #[test]
    fn recomputation_leaves_points_untouched() {
        let (path, policy, points, n) = random_setup(4);
        let before = points.clone();
        let (v1, _) = RndTape::forward(&path, &policy, n, points.view()).unwrap();
        let v2 = log_rnd_batch(&path, &policy, n, points.view()).unwrap();
        assert_eq!(points, before);
        assert_eq!(v1, v2);
    }
}
