mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use ndarray::{s, Array2, Array3, Axis};
use scld::config::{parse_config, RawConfig, RunConfig};
use scld::eval::{default_sinkhorn_epsilon, kl_lv_scaling_diagnostic, running_average, sinkhorn_distance, ScalingSetup};
use scld::losses::lv_term;
use scld::numerics::{ks_p_value, ks_statistic, log_sum_exp, mean, median, normal_cdf, rng_stream, standard_normal, std_dev};
use scld::report::MetricsLog;
use scld::runner::run_experiment;
use scld::smc::{adaptive_resample, ess, hmc_refine, leapfrog, resample_indices, ParticleEnsemble, ResampleScheme};
use scld::target::{Target, TargetSpec};
use scld::trainer::{forward_pass, PassFlags, Sampler, SmcSettings, Streams};
use scld::weights::log_rnd_batch;
use serde_json::Value;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn preset(name: &str, out: &Path) -> RawConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    let mut raw = RawConfig::parse(&std::fs::read_to_string(path).unwrap()).unwrap();
    raw.output_dir = Some(out.display().to_string());
    raw
}

fn logs(cfg: &RunConfig) -> Vec<MetricsLog> {
    run_experiment(cfg).unwrap();
    cfg.seeds
        .iter()
        .map(|s| MetricsLog::read(&PathBuf::from(&cfg.output_dir).join(format!("seed_{s}/metrics.jsonl"))).unwrap())
        .collect()
}

/// Running averages of `metric` at the evaluation event with the best running-averaged |Δlog Z|, and at the last event.
fn selected(log: &MetricsLog, window: usize, metric: impl Fn(&scld::eval::MetricsRecord) -> f64) -> (f64, f64, f64, f64) {
    let err: Vec<f64> = log.evals.iter().map(|r| r.log_z_error.unwrap()).collect();
    let other: Vec<f64> = log.evals.iter().map(metric).collect();
    let (ea, oa) = (running_average(&err, window), running_average(&other, window));
    let best = (0..ea.len()).min_by(|&a, &b| ea[a].total_cmp(&ea[b])).unwrap();
    let last = ea.len() - 1;
    (ea[best], oa[best], ea[last], oa[last])
}

fn log_z_run(name: &str, bound: f64, minutes: f64) -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset(name, dir.path()).resolve().unwrap();
    let start = Instant::now();
    let log = &logs(&cfg)[0];
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let (best, _, last, _) = selected(log, cfg.eval.window, |r| r.elbo);
    ensure(
        best <= bound && mins <= minutes,
        format!("|dlogZ| best {best:.4} final {last:.4} (bound {bound}), {mins:.1} min (limit {minutes})"),
    )
}

fn c1() -> Check {
    log_z_run("mw54", 0.2, 20.0)
}

fn c2() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("gmm40_2d", dir.path()).resolve().unwrap();
    let ok_cfg = cfg.noise.sigma_max == 10.0 && cfg.eval.particles == 2000 && cfg.eval.coverage_radius == 3.0;
    let start = Instant::now();
    let log = &logs(&cfg)[0];
    let mins = start.elapsed().as_secs_f64() / 60.0;
    let (err, modes, err_last, modes_last) = selected(log, cfg.eval.window, |r| r.modes_covered.unwrap() as f64);
    ensure(
        ok_cfg && err <= 0.2 && modes >= 36.0 && mins <= 20.0,
        format!("|dlogZ| {err:.4}, modes {modes:.1}/40 (final {err_last:.4}, {modes_last:.1}), {mins:.1} min"),
    )
}

fn c3() -> Check {
    log_z_run("funnel", 0.5, 30.0)
}

fn c4() -> Check {
    let start = Instant::now();
    let run = |algorithm: &str| -> Vec<(f64, f64)> {
        let dir = tempfile::tempdir().unwrap();
        let mut raw = preset("mw54", dir.path());
        raw.set_algorithm(algorithm);
        raw.iterations = Some(500);
        raw.seeds = Some(vec![0, 1, 2]);
        let cfg = raw.resolve().unwrap();
        logs(&cfg)
            .iter()
            .map(|l| {
                let elbo: Vec<f64> = l.evals.iter().map(|r| r.elbo).collect();
                (elbo[0], *running_average(&elbo, cfg.eval.window).last().unwrap())
            })
            .collect()
    };
    let scld = run("scld_buffer");
    let cmcd = run("cmcd_lv");
    let initial = median(&scld.iter().map(|r| r.0).collect::<Vec<_>>());
    let trained = median(&scld.iter().map(|r| r.1).collect::<Vec<_>>());
    let baseline = median(&cmcd.iter().map(|r| r.1).collect::<Vec<_>>());
    let mins = start.elapsed().as_secs_f64() / 60.0;
    ensure(
        trained >= initial && trained >= baseline && mins <= 45.0,
        format!("ELBO scld {trained:.4}, iteration 0 {initial:.4}, cmcd_lv {baseline:.4}, {mins:.1} min"),
    )
}

fn c5() -> Check {
    let setup = ScalingSetup {
        v0: 1.0,
        v1: 4.0,
        inner: 1,
        sigma: 3.0,
        particles: 256,
        reference_particles: 400_000,
    };
    let rows = kl_lv_scaling_diagnostic(&[1, 2, 4, 8], &setup, 100).map_err(|e| e.to_string())?;
    let kl: Vec<f64> = rows.iter().map(|r| r.kl_relative_error).collect();
    let lv: Vec<f64> = rows.iter().map(|r| r.lv_relative_error).collect();
    let increasing = kl.windows(2).all(|w| w[1] > w[0]);
    let (rk, rl) = (kl[3] / kl[0], lv[3] / lv[0]);
    ensure(increasing && rl < rk, format!("KL {kl:.3?}, LV {lv:.3?}, ratio KL {rk:.2} LV {rl:.2}"))
}

fn total_log_w(sampler: &Sampler, traj: &Array3<f64>) -> Vec<f64> {
    let (n_sub, l) = (sampler.path.grid.n_sub, sampler.path.grid.inner);
    let mut acc = vec![0.0; traj.shape()[0]];
    for n in 1..=n_sub {
        let lw = log_rnd_batch(&sampler.path, &sampler.policy, n, traj.slice(s![.., (n - 1) * l..=n * l, ..])).unwrap();
        acc.iter_mut().zip(lw.iter()).for_each(|(a, v)| *a += v);
    }
    acc
}

fn c6() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let (sampler, _, _) = random_instance(seed);
        let total = sampler.path.grid.total();
        let mut rng = rng_stream(seed, &[6]);
        let traj = Array3::from_shape_fn((5, total + 1, 2), |_| 2.0 * standard_normal(&mut rng));
        let fine = total_log_w(&sampler.with_partition(total).unwrap(), &traj);
        for parts in (1..=total).filter(|p| total % p == 0) {
            let other = total_log_w(&sampler.with_partition(parts).unwrap(), &traj);
            worst = fine.iter().zip(&other).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
        }
    }
    ensure(worst <= 1e-10, format!("max deviation {worst:.2e}"))
}

fn c7() -> Check {
    for seed in 0..20 {
        gradient_instance(seed).map_err(|e| format!("instance {seed}: {e}"))?;
    }
    Ok("20 instances within 1e-4".into())
}

fn c8() -> Check {
    let w = [0.4, 0.3, 0.15, 0.1, 0.05];
    let lw: Vec<f64> = w.iter().map(|v: &f64| v.ln()).collect();
    let k = w.len();
    let trials = 10_000;
    let mut rng = rng_stream(8, &[]);
    let mut counts = vec![0.0; k];
    for _ in 0..trials {
        for i in resample_indices(&lw, k, ResampleScheme::Multinomial, &mut rng).unwrap() {
            counts[i] += 1.0;
        }
    }
    for i in 0..k {
        let m = counts[i] / trials as f64;
        let se = (k as f64 * w[i] * (1.0 - w[i]) / trials as f64).sqrt();
        if (m - k as f64 * w[i]).abs() > 3.0 * se {
            return Err(format!("particle {i}: mean offspring {m} vs {}", k as f64 * w[i]));
        }
    }
    let mut fired = 0;
    for case in 0..500u64 {
        let mut rng = rng_stream(case, &[8]);
        let kk = 2 + (case % 40) as usize;
        let raw: Vec<f64> = (0..kk).map(|_| 3.0 * standard_normal(&mut rng)).collect();
        let lse = log_sum_exp(&raw);
        let mut ens = ParticleEnsemble {
            positions: Array2::zeros((kk, 1)),
            log_weights: raw.iter().map(|v| v - lse).collect(),
            ancestry: (0..kk).collect(),
            last_resample_subtraj: 0,
        };
        let e = ess(&ens.log_weights).unwrap();
        let res = adaptive_resample(&mut ens, 0.3, ResampleScheme::Multinomial, 1, &mut rng).unwrap();
        if res.is_some() != (e < 0.3 * kk as f64) {
            return Err(format!("gate mismatch at ESS {e} with K = {kk}"));
        }
        if res.is_some() {
            fired += 1;
            let after = ess(&ens.log_weights).unwrap();
            if (after - kk as f64).abs() > 1e-9 * kk as f64 {
                return Err(format!("post-resample ESS {after} with K = {kk}"));
            }
        }
    }
    Ok(format!("offspring within 3 s.e.; gate exact on 500 cases ({fired} fired)"))
}

fn c9() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let target = Target::build(&TargetSpec::Gmm { dim: 2, components: 4, half_width: 3.0 }, seed).unwrap();
        let mut grad = |x: &[f64], g: &mut [f64]| target.eval(x, g);
        let mut rng = rng_stream(seed, &[9]);
        let x0: Vec<f64> = (0..2).map(|_| 2.0 * standard_normal(&mut rng)).collect();
        let p0: Vec<f64> = (0..2).map(|_| standard_normal(&mut rng)).collect();
        let (mut x, mut p) = (x0.clone(), p0.clone());
        leapfrog(&mut x, &mut p, 0.1, 10, &mut grad);
        p.iter_mut().for_each(|v| *v = -*v);
        leapfrog(&mut x, &mut p, 0.1, 10, &mut grad);
        for k in 0..2 {
            worst = worst.max((x[k] - x0[k]).abs()).max((p[k] + p0[k]).abs());
        }
    }
    let s = zero_sampler(2, 1.0, 1.0, 1, 2, constant_noise(1.0));
    let n = 100_000;
    let mut rng = rng_stream(9, &[]);
    let mut x = Array2::from_shape_fn((n, 2), |_| standard_normal(&mut rng));
    hmc_refine(&mut x, &s.path, 1, 0.3, 10, &mut rng).unwrap();
    let p: Vec<f64> = (0..2)
        .map(|k| {
            let mut col = x.column(k).to_vec();
            ks_p_value(ks_statistic(&mut col, normal_cdf), n)
        })
        .collect();
    ensure(worst <= 1e-10 && p.iter().all(|&v| v > 1e-3), format!("reversibility {worst:.2e}, KS p-values {p:.3?}"))
}

fn c10() -> Check {
    let s = zero_sampler(1, 1.0, 4.0, 8, 16, constant_noise(1.0));
    let flags = PassFlags {
        resample: true,
        mcmc: true,
        store_trajectories: false,
    };
    let runs: Vec<(f64, f64)> = (0..100)
        .map(|seed| {
            let out = forward_pass(&s, 10_000, flags, &SmcSettings::default(), &mut Streams::new(seed, &[10])).unwrap();
            (out.log_z, out.elbo)
        })
        .collect();
    let log_z: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let (m, se) = (mean(&log_z), std_dev(&log_z) / 10.0);
    let bounded = runs.iter().all(|(z, e)| e <= z);
    ensure(m.abs() <= 3.0 * se && bounded, format!("mean log Z {m:.5} ± {se:.5}, ELBO <= log Z on all runs: {bounded}"))
}

fn c11() -> Check {
    let mut lvs = Vec::new();
    for l in [16, 64, 256] {
        let (s, _) = bridge_sampler(1.0, 4.0, 1, l, constant_noise(1.0));
        let out = forward_pass(&s, 4000, OFF, &SmcSettings::default(), &mut Streams::new(11, &[])).unwrap();
        lvs.push(lv_term(&out.log_rnds.row(0).to_vec()).unwrap().0);
    }
    let (n, l, k) = (10, 32, 100_000);
    let (s, bridge) = bridge_sampler(1.0, 4.0, n, l, constant_noise(1.0));
    let flags = PassFlags {
        store_trajectories: true,
        ..OFF
    };
    let out = forward_pass(&s, k, flags, &SmcSettings::default(), &mut Streams::new(11, &[1])).unwrap();
    let mut worst: f64 = 0.0;
    for (i, traj) in out.trajectories.unwrap().iter().enumerate() {
        let x = traj.index_axis(Axis(1), l);
        let var = x.iter().map(|v| v * v).sum::<f64>() / k as f64;
        let v = bridge.variance(s.path.grid.time((i + 1) * l));
        worst = worst.max((var - v).abs() / (v * (2.0 / k as f64).sqrt()));
    }
    ensure(
        lvs.windows(2).all(|w| w[1] < w[0]) && worst <= 4.0,
        format!("LV over L = 16, 64, 256: {:.3e} {:.3e} {:.3e}; variance gap {worst:.2} s.e.", lvs[0], lvs[1], lvs[2]),
    )
}

fn c12() -> Check {
    let pts = |seed: u64, n: usize, d: usize, scale: f64| {
        let mut rng = rng_stream(seed, &[12]);
        Array2::from_shape_fn((n, d), |_| scale * standard_normal(&mut rng))
    };
    let mut sym: f64 = 0.0;
    for seed in 0..50 {
        let (a, b) = (pts(seed, 3 + seed as usize % 9, 2, 1.0), pts(seed + 1000, 2 + seed as usize % 7, 2, 2.0));
        let eps = default_sinkhorn_epsilon(a.view(), b.view(), 0.2);
        let ab = sinkhorn_distance(a.view(), b.view(), eps, 100_000, 1e-12).unwrap();
        let ba = sinkhorn_distance(b.view(), a.view(), eps, 100_000, 1e-12).unwrap();
        sym = sym.max((ab.cost - ba.cost).abs());
    }
    let mut brute: f64 = 0.0;
    for seed in 0..20 {
        let (a, b) = (pts(seed, 4, 2, 1.0), pts(seed + 100, 4, 2, 1.5));
        let eps = default_sinkhorn_epsilon(a.view(), b.view(), 0.2);
        let cost = sinkhorn_distance(a.view(), b.view(), eps, 100_000, 1e-13).unwrap().cost;
        brute = brute.max((cost - brute_force_entropic_ot(&a, &b, eps)).abs());
    }
    let p = Array2::from_shape_vec((1, 2), vec![0.3, -1.0]).unwrap();
    let zero = sinkhorn_distance(p.view(), p.view(), 0.1, 100, 1e-12).unwrap().cost;
    ensure(
        sym <= 1e-9 && brute <= 1e-6 && zero == 0.0,
        format!("symmetry {sym:.2e}, brute force {brute:.2e}, singleton {zero}"),
    )
}

fn small(algorithm: &str, extra: &str, dir: &Path) -> String {
    format!(
        "task = \"gaussian\"\nalgorithm = \"{algorithm}\"\niterations = 6\nseeds = [0, 1]\noutput_dir = \"{}\"\n{extra}\n\
         [network]\nhidden = 8\nembedding = 4\n\n[eval]\ncount = 3\nparticles = 200\nselect_metric = \"log_z_error\"\n",
        dir.display()
    )
}

/// Metrics lines of every seed with wall-clock fields removed, optionally without headers.
fn records(dir: &Path, headers: bool) -> Vec<Value> {
    let mut out = Vec::new();
    for seed in [0, 1] {
        for line in std::fs::read_to_string(dir.join(format!("seed_{seed}/metrics.jsonl"))).unwrap().lines() {
            let mut v: Value = serde_json::from_str(line).unwrap();
            v.as_object_mut().unwrap().remove("wall_seconds");
            if headers || v["kind"] != "header" {
                out.push(v);
            }
        }
    }
    out
}

fn c13() -> Check {
    let grid = "[sampler]\nn_sub = 2\ninner = 4\nparticles = 32\n";
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&parse_config(&small("smc", grid, a.path())).unwrap()).unwrap();
    let mut raw = RawConfig::parse(&small("scld", grid, b.path())).unwrap();
    raw.iterations = Some(0);
    run_experiment(&raw.resolve().unwrap()).unwrap();
    let smc_same = records(a.path(), false) == records(b.path(), false);

    let one = "[sampler]\nn_sub = 1\ninner = 8\nparticles = 32\nresample = false\nmcmc = false\n";
    let (c, d) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&parse_config(&small("cmcd_lv", one, c.path())).unwrap()).unwrap();
    let text = small("scld", one, d.path()).replace("[eval]\n", "[eval]\nresample = false\nmcmc = false\n");
    run_experiment(&parse_config(&text).unwrap()).unwrap();
    let cmcd_same = records(c.path(), false) == records(d.path(), false);
    ensure(smc_same && cmcd_same, format!("smc == scld(zero net, 0 iterations): {smc_same}; cmcd_lv == scld(N = 1, gates off): {cmcd_same}"))
}

fn c14() -> Check {
    let grid = "[sampler]\nn_sub = 2\ninner = 4\nparticles = 32\n";
    for algorithm in ["scld", "scld_buffer", "cmcd_lv", "cmcd_kl", "smc"] {
        let extra = if algorithm.starts_with("cmcd") { "" } else { grid };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run_experiment(&parse_config(&small(algorithm, extra, a.path())).unwrap()).unwrap();
        run_experiment(&parse_config(&small(algorithm, extra, b.path())).unwrap()).unwrap();
        if records(a.path(), true) != records(b.path(), true) {
            return Err(format!("{algorithm}: metrics differ between repeated runs"));
        }
    }
    Ok("5 algorithms x 2 seeds identical".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 14] = [
        ("MW54 log Z", c1),
        ("GMM40 2d log Z and mode coverage", c2),
        ("Funnel log Z", c3),
        ("MW54 ELBO improvement over SMC and CMCD-LV", c4),
        ("KL vs LV dimension scaling", c5),
        ("RND telescoping", c6),
        ("gradient suite", c7),
        ("resampling", c8),
        ("HMC", c9),
        ("untrained sampler consistency", c10),
        ("Gaussian bridge oracle", c11),
        ("Sinkhorn", c12),
        ("baseline equivalences", c13),
        ("determinism", c14),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {id:>2} {name}: {detail} [{secs:.0} s]");
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
