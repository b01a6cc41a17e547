//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line with
//! the observed values, the pinned tolerance and its runtime; the process exits
//! nonzero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use gp_penalty::assess::crps_point;
use gp_penalty::bench::{piston_slap_dataset, training_dataset, TestFunction};
use gp_penalty::gp::{profile_loglik_mp, Dataset, GpFit, KernelConfig, DEFAULT_NUGGET};
use gp_penalty::optimize::{maximize_penalized, mle, OptimConfig};
use gp_penalty::penalty::{grad_penalized_loglik, penalized_loglik, PenaltySpec};
use gp_penalty::study::{self, log_grid, RunConfig};
use gp_penalty::tuning::{
    cv_evaluate, default_lambda_grid, fold_metrics, make_folds, metric_dpe, nearest_grid_index,
    FoldPartition, MetricKind,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

const G: f64 = DEFAULT_NUGGET;

type Check<'a> = Box<dyn Fn() -> Verdict + 'a>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn demo_config() -> OptimConfig {
    OptimConfig::default().with_bounds(0.001, 100.0)
}

fn fit_1d(function: TestFunction, lambda: f64) -> f64 {
    let (_, data) = training_dataset(function, 0).unwrap();
    let spec = if lambda == 0.0 {
        PenaltySpec::none()
    } else {
        PenaltySpec::lasso(lambda)
    };
    maximize_penalized(&data, G, &spec, &demo_config())
        .unwrap()
        .theta_hat[0]
}

fn c1_sine_penalized() -> Verdict {
    let t = fit_1d(TestFunction::Sine, 0.01);
    verdict(
        (21.8..=26.6).contains(&t),
        format!("theta_hat = {t:.4}, want [21.8, 26.6]"),
    )
}

fn c2_flat_mle() -> Verdict {
    let s = fit_1d(TestFunction::Sine, 0.0);
    let f = fit_1d(TestFunction::Forrester, 0.0);
    verdict(
        s == 100.0 && f == 100.0,
        format!("sine theta_hat = {s:?}, forrester theta_hat = {f:?}, want exactly 100"),
    )
}

fn c3_forrester_penalized() -> Verdict {
    let a = fit_1d(TestFunction::Forrester, 0.02);
    let b = fit_1d(TestFunction::Forrester, 0.004);
    verdict(
        (9.5..=11.6).contains(&a) && (30.5..=37.3).contains(&b),
        format!(
            "lambda 0.02 -> {a:.4} (want [9.5, 11.6]); lambda 0.004 -> {b:.4} (want [30.5, 37.3])"
        ),
    )
}

fn loocv_pe(function: TestFunction) -> (Vec<f64>, usize, usize) {
    let (_, data) = training_dataset(function, 0).unwrap();
    let n = data.n();
    let partition = FoldPartition::from_folds(n, (0..n).map(|i| vec![i]).collect()).unwrap();
    let grid = default_lambda_grid();
    let cv = cv_evaluate(
        &data,
        &partition,
        &grid,
        PenaltySpec::lasso(0.0),
        G,
        &demo_config(),
    )
    .unwrap();
    let curve = cv.curve(MetricKind::Pe);
    (
        grid,
        curve.lambda_star_index().unwrap(),
        curve.lambda_1se_index().unwrap(),
    )
}

fn c4_loocv_selection() -> Verdict {
    let (grid, s_star, s_1se) = loocv_pe(TestFunction::Sine);
    let (_, f_star, f_1se) = loocv_pe(TestFunction::Forrester);
    let near = |j: usize, target: f64| {
        let t = nearest_grid_index(&grid, target).unwrap();
        (j as i64 - t as i64).abs() <= 1
    };
    let checks = [
        ("sine lambda*", s_star == 0, grid[s_star], "0".to_string()),
        (
            "sine lambda_1SE",
            near(s_1se, 0.004),
            grid[s_1se],
            format!(
                "grid index {} +- 1",
                nearest_grid_index(&grid, 0.004).unwrap()
            ),
        ),
        (
            "forrester lambda*",
            near(f_star, 0.02),
            grid[f_star],
            format!(
                "grid index {} +- 1",
                nearest_grid_index(&grid, 0.02).unwrap()
            ),
        ),
        (
            "forrester lambda_1SE",
            f_1se == grid.len() - 1,
            grid[f_1se],
            format!("{:.4}", grid[grid.len() - 1]),
        ),
    ];
    let detail = checks
        .iter()
        .map(|(name, ok, v, want)| {
            format!(
                "{name} = {v:.5} (want {want}) {}",
                if *ok { "ok" } else { "MISS" }
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    verdict(checks.iter().all(|c| c.1), detail)
}

fn c5_moore_penrose() -> Verdict {
    let (_, data) = training_dataset(TestFunction::Sine, 0).unwrap();
    let thetas = log_grid(0.001, 100.0, 200);
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &t in &thetas {
        if let Ok(v) = profile_loglik_mp(&[t], &data, 0.0) {
            if v > best.0 {
                best = (v, t);
            }
        }
    }
    verdict(
        (0.01..=0.06).contains(&best.1),
        format!(
            "argmax over 200 log-spaced theta in [0.001, 100] = {:.5}, want [0.01, 0.06]",
            best.1
        ),
    )
}

/// Largest relative deviation of each metric from its small-θ closed form over
/// the folds of a Forrester 4-fold split with θ fixed.
fn limit_errors(theta: f64) -> [f64; 3] {
    let (_, data) = training_dataset(TestFunction::Forrester, 0).unwrap();
    let n = data.n();
    let partition = make_folds(n, 4, 0).unwrap();
    let mut worst = [0.0f64; 3];
    for fold in partition.folds() {
        let (train, x_out, y_out) = data.split(fold).unwrap();
        let kernel = KernelConfig::with_bounds(vec![theta], G, 1e-12, 1e3).unwrap();
        let fit = GpFit::new(&train, kernel).unwrap();
        let m = fold_metrics(&fit, n, &x_out, &y_out).unwrap();
        let n_v = y_out.len() as f64;
        let n_t = train.n() as f64;
        let sum: f64 = y_out.iter().sum();
        let ss_k = y_out.iter().map(|v| v * v).sum::<f64>() - sum * sum / n as f64;
        let ss_mk: f64 = train.responses().iter().map(|v| v * v).sum();
        let dpe = ss_k / G;
        let md = (n as f64 - n_v) * ss_k / ss_mk;
        let score = md + n_v * (ss_mk / (n as f64 - n_v)).ln() + (n as f64 / n_t).ln();
        for (w, (got, want)) in worst
            .iter_mut()
            .zip([(m.dpe, dpe), (m.md, md), (m.score, score)])
        {
            *w = w.max(((got - want) / want).abs());
        }
    }
    worst
}

fn c6_limit_invariants() -> Verdict {
    let at = limit_errors(0.001);
    let tiny = limit_errors(1e-9);
    verdict(
        at.iter().all(|e| *e <= 0.02),
        format!(
            "theta = 0.001: max rel err DPE {:.3e}, MD {:.3e}, Score {:.3e} (want <= 0.02); \
             at theta = 1e-9: {:.1e}, {:.1e}, {:.1e}",
            at[0], at[1], at[2], tiny[0], tiny[1], tiny[2]
        ),
    )
}

fn c7_gradient() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for inst in 0..50 {
        let n = rng.random_range(3..=10);
        let d = rng.random_range(1..=3);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let y: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = Dataset::from_raw(&x, &y, &vec![0.0; d], &vec![1.0; d]).unwrap();
        let theta: Vec<f64> = (0..d)
            .map(|_| (rng.random_range(-3.0f64..3.0)).exp())
            .collect();
        let lambda = rng.random_range(0.0..0.5);
        let spec = if inst % 2 == 0 {
            PenaltySpec::lasso(lambda)
        } else {
            PenaltySpec::scad(lambda)
        };
        let grad = grad_penalized_loglik(&theta, &data, G, &spec).unwrap();
        for p in 0..d {
            // Textbook central-difference step: balances truncation against roundoff.
            let h = f64::EPSILON.cbrt() * theta[p].max(1.0);
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[p] += h;
            dn[p] -= h;
            let fd = (penalized_loglik(&up, &data, G, &spec).unwrap()
                - penalized_loglik(&dn, &data, G, &spec).unwrap())
                / (2.0 * h);
            worst = worst.max((grad[p] - fd).abs() / fd.abs().max(1.0));
        }
    }
    verdict(
        worst <= 1e-4,
        format!("max |analytic - central| / max(|central|, 1) = {worst:.3e} over 50 instances (h = cbrt(eps) max(theta, 1)), want <= 1e-4"),
    )
}

fn c8_dpe_calibration() -> Verdict {
    let theta = vec![3.0, 5.0];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws: Vec<f64> = (0..500)
        .map(|_| {
            let x = DMatrix::from_fn(10, 2, |_, _| rng.random::<f64>());
            let r = DMatrix::from_fn(10, 10, |i, j| {
                let s: f64 = (0..2)
                    .map(|p| theta[p] * (x[(i, p)] - x[(j, p)]).powi(2))
                    .sum();
                (-s).exp() + if i == j { G } else { 0.0 }
            });
            let l = r.cholesky().unwrap().l();
            let z = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = l * z;
            let fit = GpFit::from_parts(
                x.rows(0, 8).into_owned(),
                y.rows(0, 8).into_owned(),
                KernelConfig::new(theta.clone(), G).unwrap(),
            )
            .unwrap();
            let pred = fit.predict(&x.rows(8, 2).into_owned()).unwrap();
            metric_dpe(&y.rows(8, 2).into_owned(), &pred).unwrap()
        })
        .collect();
    let m = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / m;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let se = sd / m.sqrt();
    verdict(
        (mean - 2.0).abs() <= 3.0 * se,
        format!("mean DPE = {mean:.4}, MC SE = {se:.4}, want |mean - 2| <= 3 SE"),
    )
}

/// `∫ (Φ((t-μ)/τ) - 1{t ≥ y})² dt` by composite Simpson in standardized units.
fn crps_quadrature(y: f64, mu: f64, tau: f64) -> f64 {
    let std = Normal::standard();
    let z = (y - mu) / tau;
    let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| -> f64 {
        if b <= a {
            return 0.0;
        }
        let m = 20_000;
        let h = (b - a) / m as f64;
        let mut s = f(a) + f(b);
        for i in 1..m {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let below = |s: f64| std.cdf(s).powi(2);
    let above = |s: f64| std.sf(s).powi(2);
    // Beyond |s| = 12 the integrands are 1 or 0 to double precision.
    let lower = simpson(&below, -12.0, z.min(12.0)) + (z - 12.0).max(0.0);
    let upper = simpson(&above, z.max(-12.0), 12.0) + (-12.0 - z).max(0.0);
    tau * (lower + upper)
}

fn c9_crps() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let y = rng.random_range(-5.0..5.0);
        let mu = rng.random_range(-5.0..5.0);
        let tau = rng.random_range(0.01..10.0);
        worst = worst.max((crps_point(y, mu, tau) - crps_quadrature(y, mu, tau)).abs());
    }
    let spot = crps_point(0.0, 0.0, 1.0);
    let spot_ok = (spot - 0.233_698_9).abs() <= 1e-6;
    verdict(
        worst <= 1e-6 && spot_ok,
        format!(
            "max |closed - quadrature| = {worst:.2e} (want <= 1e-6); CRPS(0; 0, 1) = {spot:.8} \
             (want 0.2336989 +- 1e-6; exact sqrt(2/pi) - 1/sqrt(pi) = {:.8})",
            (2.0 / std::f64::consts::PI).sqrt() - std::f64::consts::PI.sqrt().recip()
        ),
    )
}

fn c10_piston() -> Verdict {
    let (_, data) = piston_slap_dataset();
    let config = OptimConfig::default();
    let opt = mle(&data, G, &config).unwrap();
    let t = &opt.theta_hat;
    let fit = GpFit::new(&data, KernelConfig::new(t.clone(), G).unwrap()).unwrap();
    let s2 = fit.sigma2_hat();
    let at_lo = [1, 3, 4].iter().all(|&p| t[p] == config.theta_lo);
    let first_largest = t.iter().all(|&v| v <= t[0]);
    let within = |got: f64, want: f64| ((got - want) / want).abs() <= 0.25;
    let magnitudes =
        within(t[0], 4.067) && within(t[2], 0.588) && within(t[5], 2.751) && within(s2, 1.151);
    let hits = (0..20u64)
        .filter(|&s| {
            let o = mle(&data, G, &config.clone().with_seed(s)).unwrap();
            [1, 3, 4].iter().all(|&p| o.theta_hat[p] == config.theta_lo)
                && o.theta_hat.iter().all(|&v| v <= o.theta_hat[0])
        })
        .count();
    verdict(
        at_lo && first_largest && magnitudes,
        format!(
            "theta_hat = [{}], sigma2 = {s2:.4}, loglik = {:.4}; bounds {} largest-first {} magnitudes(+-25%) {}; \
             pattern found for {hits}/20 seeds",
            t.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", "),
            opt.objective,
            at_lo,
            first_largest,
            magnitudes
        ),
    )
}

fn c11_lim_study(dir: &Path) -> Verdict {
    let report = study::cmd_sim_study(TestFunction::Lim, 20, &RunConfig::default(), dir).unwrap();
    let get = |m: &str| {
        report
            .summaries
            .iter()
            .find(|s| s.method == m)
            .unwrap()
            .clone()
    };
    let (dpe, pe, mle) = (get("DPE"), get("PE"), get("MLE"));
    let ok = dpe.median_rel_rmse <= pe.median_rel_rmse
        && (dpe.median_sqrt_rel_rmse - mle.median_sqrt_rel_rmse).abs() <= 0.1;
    verdict(
        ok,
        format!(
            "median rel RMSE gap: DPE {:.4}, PE {:.4}, MLE {:.4}; sqrt scale DPE {:.4} vs MLE {:.4} (want DPE <= PE and |DPE - MLE| <= 0.1)",
            dpe.median_rel_rmse, pe.median_rel_rmse, mle.median_rel_rmse, dpe.median_sqrt_rel_rmse, mle.median_sqrt_rel_rmse
        ),
    )
}

fn run_all_commands(dir: &Path) {
    let run = RunConfig::default();
    let demo = RunConfig {
        optim: run.optim.clone().with_bounds(0.001, 100.0),
        ..run.clone()
    };
    study::cmd_demo(TestFunction::Sine, &demo, &dir.join("demo")).unwrap();
    let files = study::cmd_dataset(TestFunction::Lim, 0, &dir.join("data")).unwrap();
    study::cmd_cv(&files[0], MetricKind::Dpe, 5, true, &run, &dir.join("cv")).unwrap();
    study::cmd_sim_study(TestFunction::Lim, 2, &run, &dir.join("sim")).unwrap();
    study::cmd_piston(3, None, &run, &dir.join("piston")).unwrap();
}

fn collect_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism(root: &Path) -> Verdict {
    let (a, b) = (root.join("a"), root.join("b"));
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_all_commands(&a));
    rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap()
        .install(|| run_all_commands(&b));
    let (fa, fb) = (collect_files(&a), collect_files(&b));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    verdict(
        fa.len() == fb.len() && differing.is_empty(),
        format!(
            "{} files from demo/dataset/cv/sim-study/piston, 1 vs 4 threads; differing: {:?}",
            fa.len(),
            differing
        ),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let criteria: Vec<(u32, &str, Duration, Check<'_>)> = vec![
        (
            1,
            "sine penalized fit",
            Duration::from_secs(5),
            Box::new(c1_sine_penalized),
        ),
        (
            2,
            "sine/forrester MLE at upper bound",
            Duration::from_secs(5),
            Box::new(c2_flat_mle),
        ),
        (
            3,
            "forrester penalized fits",
            Duration::from_secs(10),
            Box::new(c3_forrester_penalized),
        ),
        (
            4,
            "LOOCV-PE selection",
            Duration::from_secs(120),
            Box::new(c4_loocv_selection),
        ),
        (
            5,
            "Moore-Penrose argmax",
            Duration::from_secs(10),
            Box::new(c5_moore_penrose),
        ),
        (
            6,
            "small-theta limit forms",
            Duration::from_secs(5),
            Box::new(c6_limit_invariants),
        ),
        (
            7,
            "gradient vs central differences",
            Duration::from_secs(30),
            Box::new(c7_gradient),
        ),
        (
            8,
            "DPE chi-square calibration",
            Duration::from_secs(60),
            Box::new(c8_dpe_calibration),
        ),
        (
            9,
            "CRPS closed form vs quadrature",
            Duration::from_secs(10),
            Box::new(c9_crps),
        ),
        (
            10,
            "piston MLE structure",
            Duration::from_secs(30),
            Box::new(c10_piston),
        ),
        (
            11,
            "lim simulation study",
            Duration::from_secs(1800),
            Box::new(|| c11_lim_study(&tmp.path().join("lim"))),
        ),
        (
            12,
            "determinism",
            Duration::from_secs(300),
            Box::new(|| c12_determinism(&tmp.path().join("det"))),
        ),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in &criteria {
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *limit;
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {id:>2} {name}: {} | {:.2} s (limit {} s{})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", exceeded" }
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
