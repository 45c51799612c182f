#![allow(dead_code)]

use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use scld::annealing::{AnnealingPath, Grid, PriorParams, ScheduleParams};
use scld::eval::GaussianBridge;
use scld::losses::{loss_and_grad, LossBatch, LossKind, SubBatch};
use scld::net::{Mlp, MlpArch, NetVariant};
use scld::numerics::{normalize_log_weights, rng_stream, standard_normal};
use scld::sde::{control_u, ControlPolicy, Correction, NoiseSchedule, ScheduleKind};
use scld::target::{Target, TargetSpec};
use scld::trainer::{PassFlags, Sampler};
use scld::weights::{log_rnd_batch, ParamGrads, RndTape};

pub const OFF: PassFlags = PassFlags {
    resample: false,
    mcmc: false,
    store_trajectories: false,
};

pub fn gaussian_target(dim: usize, variance: f64, log_z: f64) -> Arc<Target> {
    Arc::new(
        Target::build(
            &TargetSpec::Gaussian {
                dim,
                mean: 0.0,
                variance,
                log_z,
            },
            0,
        )
        .unwrap(),
    )
}

/// Prior `N(0, v0·I)`, linear schedule, given target and correction.
pub fn sampler_for(target: Arc<Target>, v0: f64, n: usize, l: usize, noise: NoiseSchedule, correction: Correction) -> Sampler {
    let dim = target.dim();
    let grid = Grid::new(n, l).unwrap();
    let path = AnnealingPath::new(PriorParams::isotropic(dim, v0.sqrt()), ScheduleParams::linear(n * l), target, grid).unwrap();
    Sampler {
        path,
        policy: ControlPolicy::new(correction, noise, n * l),
    }
}

pub fn zero_sampler(dim: usize, v0: f64, v1: f64, n: usize, l: usize, noise: NoiseSchedule) -> Sampler {
    sampler_for(gaussian_target(dim, v1, 0.0), v0, n, l, noise, Correction::Zero)
}

pub fn net_sampler(dim: usize, v1: f64, n: usize, l: usize, hidden: usize, embedding: usize, variant: NetVariant, seed: u64) -> Sampler {
    let mlp = Mlp::init(
        MlpArch {
            dim,
            hidden,
            embedding,
            variant,
        },
        &mut rng_stream(seed, &[]),
    )
    .unwrap();
    let noise = NoiseSchedule::new(ScheduleKind::Cosine, 0.3, 1.2).unwrap();
    sampler_for(gaussian_target(dim, v1, 0.0), 1.0, n, l, noise, Correction::net(mlp, n * l))
}

/// Sampler driven by the closed-form bridge control between `N(0, v0)` and `N(0, v1)`.
pub fn bridge_sampler(v0: f64, v1: f64, n: usize, l: usize, noise: NoiseSchedule) -> (Sampler, GaussianBridge) {
    let zero = zero_sampler(1, v0, v1, n, l, noise);
    let bridge = GaussianBridge::new(v0, v1, zero.path.betas().to_vec(), noise, 1.0).unwrap();
    let correction = bridge.correction(&zero.path.grid);
    (sampler_for(gaussian_target(1, v1, 0.0), v0, n, l, noise, correction), bridge)
}

pub fn constant_noise(sigma: f64) -> NoiseSchedule {
    NoiseSchedule::new(ScheduleKind::Constant, sigma, sigma).unwrap()
}


const FD_STEP: f64 = 1e-5;
pub const GRAD_RTOL: f64 = 1e-4;

fn close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= GRAD_RTOL * an.abs().max(fd.abs()).max(1e-2)
}

/// Random small GMM path with a perturbed network; the plain variant on even
/// seeds so that prior and schedule derivatives are checked too.
pub fn random_instance(seed: u64) -> (Sampler, Array3<f64>, usize) {
    let mut rng = rng_stream(seed, &[0x67726164]);
    let d = 2;
    let (n_sub, l) = (3, 2);
    let target = Target::build(
        &TargetSpec::Gmm {
            dim: d,
            components: 3,
            half_width: 2.0,
        },
        seed,
    )
    .unwrap();
    let prior = PriorParams {
        mu: (0..d).map(|_| 0.3 * standard_normal(&mut rng)).collect(),
        log_std: (0..d).map(|_| 0.2 * standard_normal(&mut rng)).collect(),
    };
    let schedule = ScheduleParams {
        theta: (0..n_sub * l).map(|_| standard_normal(&mut rng)).collect(),
    };
    let path = AnnealingPath::new(prior, schedule, Arc::new(target), Grid::new(n_sub, l).unwrap()).unwrap();
    let variant = if seed % 2 == 0 { NetVariant::PisNet } else { NetVariant::PisGradNet };
    let mut mlp = Mlp::init(
        MlpArch {
            dim: d,
            hidden: 5,
            embedding: 4,
            variant,
        },
        &mut rng,
    )
    .unwrap();
    for p in &mut mlp.params {
        *p += 0.2 * standard_normal(&mut rng);
    }
    let noise = NoiseSchedule::new(ScheduleKind::Cosine, 0.4, 1.3).unwrap();
    let policy = ControlPolicy::new(Correction::net(mlp, n_sub * l), noise, n_sub * l);
    let points = Array3::from_shape_fn((4, l + 1, d), |_| standard_normal(&mut rng));
    let n = 1 + (seed as usize % n_sub);
    (Sampler { path, policy }, points, n)
}

/// Central differences of `f` over every parameter group, compared with `grads`.
/// Prior and schedule groups are skipped for the gated variant, whose score
/// input is detached.
fn check_groups<F: Fn(&Sampler) -> f64>(sampler: &Sampler, grads: &ParamGrads, f: F, what: &str) -> Result<(), String> {
    let h = FD_STEP;
    let fail = |group: &str, i: usize, fd: f64, an: f64| -> Result<(), String> {
        if close(fd, an) {
            Ok(())
        } else {
            Err(format!("{what} {group}[{i}]: finite difference {fd} vs analytic {an}"))
        }
    };
    for i in 0..grads.net.len() {
        let mut s = sampler.clone();
        s.policy.correction.mlp_mut().unwrap().params[i] += h;
        s.refresh();
        let up = f(&s);
        s.policy.correction.mlp_mut().unwrap().params[i] -= 2.0 * h;
        s.refresh();
        fail("net", i, (up - f(&s)) / (2.0 * h), grads.net[i])?;
    }
    let gated = sampler.policy.correction.mlp().is_some_and(|m| m.arch.variant == NetVariant::PisGradNet);
    if gated {
        return Ok(());
    }
    for k in 0..grads.mu.len() {
        for (group, g) in [("mu", &grads.mu), ("log_std", &grads.log_std)] {
            let bump = |s: &mut Sampler, v: f64| {
                if group == "mu" {
                    s.path.prior.mu[k] += v;
                } else {
                    s.path.prior.log_std[k] += v;
                }
                s.refresh();
            };
            let mut s = sampler.clone();
            bump(&mut s, h);
            let up = f(&s);
            bump(&mut s, -2.0 * h);
            fail(group, k, (up - f(&s)) / (2.0 * h), g[k])?;
        }
    }
    for m in 0..grads.theta.len() {
        let mut s = sampler.clone();
        s.path.schedule.theta[m] += h;
        s.refresh();
        let up = f(&s);
        s.path.schedule.theta[m] -= 2.0 * h;
        s.refresh();
        fail("theta", m, (up - f(&s)) / (2.0 * h), grads.theta[m])?;
    }
    Ok(())
}

fn loss_batch(sampler: &Sampler, points: &Array3<f64>, seed: u64) -> LossBatch {
    let mut rng = rng_stream(seed, &[0x6c6f7373]);
    let k = points.dim().0;
    let subs = (1..=sampler.path.grid.n_sub)
        .map(|n| {
            let mut lw: Vec<f64> = (0..k).map(|_| standard_normal(&mut rng)).collect();
            normalize_log_weights(&mut lw);
            let pts = points.mapv(|v| v + 0.1 * n as f64);
            SubBatch {
                n,
                points: pts,
                prev_log_weights: Array1::from(lw),
            }
        })
        .collect();
    LossBatch {
        subs,
        last_resample: vec![0; k],
    }
}

/// Gradient checks on one random instance: both losses, the control, the
/// log-RND, the schedule and the prior reparametrization.
pub fn gradient_instance(seed: u64) -> Result<(), String> {
    let (sampler, points, n) = random_instance(seed);
    let (path, policy) = (&sampler.path, &sampler.policy);
    let mut rng = rng_stream(seed, &[0x636f74]);
    let h = FD_STEP;

    for kind in [LossKind::Lv, LossKind::Kl] {
        let batch = loss_batch(&sampler, &points, seed);
        let out = loss_and_grad(&batch, kind, path, policy).map_err(|e| e.to_string())?;
        let f = |s: &Sampler| loss_and_grad(&batch, kind, &s.path, &s.policy).unwrap().value;
        check_groups(&sampler, &out.grads, f, &format!("{kind:?} loss"))?;
    }

    let cot: Vec<f64> = (0..points.dim().0).map(|_| standard_normal(&mut rng)).collect();
    let (_, tape) = RndTape::forward(path, policy, n, points.view()).map_err(|e| e.to_string())?;
    let mut g = ParamGrads::zeros(path, policy);
    tape.backward(path, policy, &cot, &mut g).map_err(|e| e.to_string())?;
    let f = |s: &Sampler| {
        let v = log_rnd_batch(&s.path, &s.policy, n, points.view()).unwrap();
        v.iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
    };
    check_groups(&sampler, &g, f, "log-RND")?;

    // Control: ⟨c, u(x)⟩ is σ²⟨c, ũ(x)⟩ plus a network-free term.
    let x: Vec<f64> = (0..path.dim()).map(|_| standard_normal(&mut rng)).collect();
    let c: Vec<f64> = (0..path.dim()).map(|_| standard_normal(&mut rng)).collect();
    let step = 1 + seed as usize % path.grid.total();
    let mlp = policy.correction.mlp().unwrap();
    let xa = Array2::from_shape_vec((1, x.len()), x.clone()).unwrap();
    let score = Array2::from_shape_vec((1, x.len()), path.grad_log_pi(&x, step).unwrap()).unwrap();
    let ctx = mlp.context(step, path.grid.total());
    let (_, net_tape) = mlp.forward_tape(&ctx, xa.view(), score.view()).map_err(|e| e.to_string())?;
    let s2 = policy.sigma(step).powi(2);
    let cot_u = Array2::from_shape_vec((1, c.len()), c.iter().map(|v| s2 * v).collect()).unwrap();
    let mut net_grads = vec![0.0; mlp.n_params()];
    mlp.backward(&ctx, &net_tape, cot_u.view(), &mut net_grads).map_err(|e| e.to_string())?;
    for i in 0..net_grads.len() {
        let mut p = policy.clone();
        let eval = |p: &ControlPolicy| -> f64 { control_u(path, p, &x, step).unwrap().iter().zip(&c).map(|(a, b)| a * b).sum() };
        p.correction.mlp_mut().unwrap().params[i] += h;
        p.correction.refresh();
        let up = eval(&p);
        p.correction.mlp_mut().unwrap().params[i] -= 2.0 * h;
        p.correction.refresh();
        let fd = (up - eval(&p)) / (2.0 * h);
        if !close(fd, net_grads[i]) {
            return Err(format!("control net[{i}]: finite difference {fd} vs analytic {}", net_grads[i]));
        }
    }

    let betas = path.schedule.betas();
    let d_beta: Vec<f64> = (0..betas.len()).map(|_| standard_normal(&mut rng)).collect();
    let vjp = path.schedule.vjp(&betas, &d_beta);
    for m in 0..vjp.len() {
        let eval = |theta: &[f64]| -> f64 {
            let b = ScheduleParams { theta: theta.to_vec() }.betas();
            b.iter().zip(&d_beta).map(|(a, c)| a * c).sum()
        };
        let mut t = path.schedule.theta.clone();
        t[m] += h;
        let up = eval(&t);
        t[m] -= 2.0 * h;
        let fd = (up - eval(&t)) / (2.0 * h);
        if !close(fd, vjp[m]) {
            return Err(format!("schedule theta[{m}]: finite difference {fd} vs analytic {}", vjp[m]));
        }
    }

    let d = path.dim();
    let xi = Array2::from_shape_fn((5, d), |_| standard_normal(&mut rng));
    let cot_x = Array2::from_shape_fn((5, d), |_| standard_normal(&mut rng));
    let (d_mu, d_ls) = path.prior.sample_vjp(&xi, &cot_x);
    let eval = |p: &PriorParams| (p.transform(&xi) * &cot_x).sum();
    for k in 0..d {
        for (which, an) in [(0, d_mu[k]), (1, d_ls[k])] {
            let mut p = path.prior.clone();
            let field = if which == 0 { &mut p.mu } else { &mut p.log_std };
            field[k] += h;
            let up = eval(&p);
            let field = if which == 0 { &mut p.mu } else { &mut p.log_std };
            field[k] -= 2.0 * h;
            let fd = (up - eval(&p)) / (2.0 * h);
            if !close(fd, an) {
                return Err(format!("prior reparametrization [{which}, {k}]: finite difference {fd} vs analytic {an}"));
            }
        }
    }
    Ok(())
}

/// Entropic OT between uniform marginals by damped Newton iterations over the
/// interior of the transport polytope; returns `⟨P, C⟩` of the minimizer of
/// `⟨P, C⟩ + ε Σ P log P`.
pub fn brute_force_entropic_ot(a: &Array2<f64>, b: &Array2<f64>, epsilon: f64) -> f64 {
    let (n, m) = (a.nrows(), b.nrows());
    let cost = Array2::from_shape_fn((n, m), |(i, j)| (&a.row(i) - &b.row(j)).mapv(|v| v * v).sum());
    // Free coordinates θ_{ij}, i < n−1, j < m−1; P = P0 + Σ θ_{ij} (e_ij − e_i,m−1 − e_n−1,j + e_n−1,m−1).
    let free = (n - 1) * (m - 1);
    let plan = |theta: &[f64]| {
        let mut p = Array2::from_elem((n, m), 1.0 / (n * m) as f64);
        for i in 0..n - 1 {
            for j in 0..m - 1 {
                let t = theta[i * (m - 1) + j];
                p[[i, j]] += t;
                p[[i, m - 1]] -= t;
                p[[n - 1, j]] -= t;
                p[[n - 1, m - 1]] += t;
            }
        }
        p
    };
    let objective = |p: &Array2<f64>| -> f64 {
        if p.iter().any(|&v| v <= 0.0) {
            return f64::INFINITY;
        }
        p.iter().zip(cost.iter()).map(|(&v, &c)| v * c + epsilon * v * v.ln()).sum()
    };
    let basis = |i: usize, j: usize| -> [(usize, usize, f64); 4] { [(i, j, 1.0), (i, m - 1, -1.0), (n - 1, j, -1.0), (n - 1, m - 1, 1.0)] };
    let mut theta = vec![0.0; free];
    for _ in 0..200 {
        let p = plan(&theta);
        let dp = p.mapv(|v| epsilon * (v.ln() + 1.0)) + &cost;
        let curv = p.mapv(|v| epsilon / v);
        let mut grad = vec![0.0; free];
        let mut hess = Array2::<f64>::zeros((free, free));
        for r in 0..free {
            let er = basis(r / (m - 1), r % (m - 1));
            grad[r] = er.iter().map(|&(i, j, s)| s * dp[[i, j]]).sum();
            for c in 0..free {
                let ec = basis(c / (m - 1), c % (m - 1));
                let mut acc = 0.0;
                for &(i, j, s) in &er {
                    for &(k, l, t) in &ec {
                        if i == k && j == l {
                            acc += s * t * curv[[i, j]];
                        }
                    }
                }
                hess[[r, c]] = acc;
            }
        }
        let step = solve(hess, grad.clone());
        let decrement: f64 = step.iter().zip(&grad).map(|(a, b)| a * b).sum();
        if decrement < 1e-28 {
            break;
        }
        let f0 = objective(&p);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(a, b)| a - t * b).collect();
            if objective(&plan(&cand)) <= f0 - 0.25 * t * decrement || t < 1e-12 {
                theta = cand;
                break;
            }
            t *= 0.5;
        }
    }
    let p = plan(&theta);
    (&p * &cost).sum()
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Array2<f64>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs())).unwrap();
        for k in 0..n {
            a.swap([c, k], [piv, k]);
        }
        b.swap(c, piv);
        for r in c + 1..n {
            let f = a[[r, c]] / a[[c, c]];
            for k in c..n {
                a[[r, k]] -= f * a[[c, k]];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[[r, k]] * x[k]).sum();
        x[r] = (b[r] - s) / a[[r, r]];
    }
    x
}
