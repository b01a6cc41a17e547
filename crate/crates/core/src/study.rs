//! Experiments behind the `gp-penalty` binary.
//!
//! Every command is a pure function of its configuration: seeds are derived
//! from the base seed and fixed tags, floats are written in shortest
//! round-trip form and nothing time-dependent reaches the output files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assess::{crps, rmse};
use crate::bench::{
    benchmark_spec, lhs_design, piston_slap_dataset, training_dataset, RawTable, TestFunction,
};
use crate::error::{Error, Result};
use crate::gp::{profile_loglik, profile_loglik_mp, Dataset, GpFit, KernelConfig, DEFAULT_NUGGET};
use crate::optimize::{derive_seed, maximize_penalized, FitResult, OptimConfig};
use crate::penalty::{penalized_loglik, PenaltySpec};
use crate::tuning::{
    cv_evaluate, default_lambda_grid, fmt_f64, make_folds, validate_grid, CvCurve, CvRun,
    MetricKind,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Settings shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub nugget: f64,
    pub penalty: PenaltySpec,
    pub grid: Vec<f64>,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            nugget: DEFAULT_NUGGET,
            penalty: PenaltySpec::lasso(0.0),
            grid: default_lambda_grid(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        validate_grid(&self.grid)?;
        self.optim.validate()?;
        self.penalty.validate()?;
        if !(self.nugget > 0.0) {
            return Err(Error::Domain(format!(
                "nugget must be positive, got {}",
                self.nugget
            )));
        }
        Ok(())
    }

    fn spec(&self, lambda: f64) -> PenaltySpec {
        self.penalty.with_lambda(lambda)
    }
}

/// Parses `"default"` or a comma-separated list of λ values.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    if text.trim().eq_ignore_ascii_case("default") {
        return Ok(default_lambda_grid());
    }
    let grid = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Domain(format!("bad lambda '{}': {e}", s.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_grid(&grid)?;
    Ok(grid)
}

/// Full-data fit at one λ.
#[derive(Debug, Clone)]
pub struct LambdaFit {
    pub lambda: f64,
    pub opt: FitResult,
    pub fit: GpFit,
}

/// Fits at `lambda` with a seed that depends only on `(seed, λ)`, so the same
/// λ always yields the same fit within a run regardless of which method asked.
pub fn fit_at(data: &Dataset, lambda: f64, run: &RunConfig, seed: u64) -> Result<LambdaFit> {
    let cfg = run
        .optim
        .clone()
        .with_seed(derive_seed(seed, &[lambda.to_bits()]));
    let opt = maximize_penalized(data, run.nugget, &run.spec(lambda), &cfg)?;
    let kernel = KernelConfig::with_bounds(
        opt.theta_hat.clone(),
        run.nugget,
        cfg.theta_lo,
        cfg.theta_hi,
    )?;
    let fit = GpFit::new(data, kernel)?;
    Ok(LambdaFit { lambda, opt, fit })
}

/// Posterior mean and standard deviation at natural-unit points, in natural units.
pub fn predict_natural(
    data: &Dataset,
    fit: &GpFit,
    x_raw: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let x = data.scale_points(x_raw)?;
    let (mean, var) = fit.predict_marginal(&x)?;
    let scale = data.response_scale();
    Ok((
        mean.iter().map(|&m| data.to_natural(m)).collect(),
        var.iter().map(|&v| v.sqrt() * scale).collect(),
    ))
}

/// Closed-form leave-one-out residuals `α_i / (R⁻¹)_ii`, in natural units.
pub fn loo_residuals(data: &Dataset, fit: &GpFit) -> Vec<f64> {
    let r_inv = fit.chol().inverse();
    let alpha = fit.chol().solve(fit.responses());
    (0..fit.n())
        .map(|i| alpha[i] / r_inv[(i, i)] * data.response_scale())
        .collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = writer(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer(path)?);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn theta_header(d: usize) -> Vec<String> {
    (1..=d).map(|p| format!("theta_hat_{p}")).collect()
}

/// Log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, m: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..m)
        .map(|i| {
            if i == 0 {
                lo
            } else if i + 1 == m {
                hi
            } else {
                (a + (b - a) * i as f64 / (m - 1) as f64).exp()
            }
        })
        .collect()
}

/// Index of the largest finite value (first on ties).
fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub lambda: f64,
    pub theta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub objective: f64,
}

impl FitSummary {
    fn from_fit(f: &LambdaFit) -> Self {
        Self {
            lambda: f.lambda,
            theta_hat: f.opt.theta_hat.clone(),
            sigma2_hat: f.fit.sigma2_hat(),
            objective: f.opt.objective,
        }
    }
}

// ---------------------------------------------------------------------------
// dataset

/// Writes a training table (and the test table if the function has one).
pub fn cmd_dataset(function: TestFunction, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let (table, _) = training_dataset(function, seed)?;
    let train_path = out_dir.join(format!("{function}_train.csv"));
    table.write_csv(writer(&train_path)?)?;
    let mut paths = vec![train_path];
    if benchmark_spec(function).n_test > 0 {
        let test = crate::bench::test_table(function, derive_seed(seed, &[1]))?;
        let test_path = out_dir.join(format!("{function}_test.csv"));
        test.write_csv(writer(&test_path)?)?;
        paths.push(test_path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// demo

/// λ used for the penalized demo fit.
pub fn demo_lambda(function: TestFunction) -> Result<f64> {
    match function {
        TestFunction::Sine => Ok(0.01),
        TestFunction::Forrester => Ok(0.004),
        f => Err(Error::Domain(format!(
            "no demo for {f}; use sine or forrester"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub schema_version: u32,
    pub function: TestFunction,
    pub seed: u64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub nugget: f64,
    pub mle: FitSummary,
    pub penalized: FitSummary,
    /// Grid maximizers of the profile curves in the profile CSV.
    pub argmax_plain: Option<f64>,
    pub argmax_mp: Option<f64>,
    pub argmax_nugget: Option<f64>,
    pub argmax_penalized: Option<f64>,
}

/// Profile curves, the λ path and predictive curves for a one-dimensional demo.
pub fn cmd_demo(function: TestFunction, run: &RunConfig, out_dir: &Path) -> Result<DemoSummary> {
    run.validate()?;
    let lambda_demo = demo_lambda(function)?;
    create_dir(out_dir)?;
    let seed = run.optim.seed;
    let (table, data) = training_dataset(function, seed)?;
    table.write_csv(writer(&out_dir.join(format!("{function}_train.csv")))?)?;

    // Profile likelihood curves over θ.
    let thetas = log_grid(run.optim.theta_lo, run.optim.theta_hi, 200);
    let spec = run.spec(lambda_demo);
    let curves: Vec<[f64; 4]> = thetas
        .iter()
        .map(|&t| {
            let plain = profile_loglik(&[t], &data, 0.0).unwrap_or(f64::NAN);
            let mp = profile_loglik_mp(&[t], &data, 0.0).unwrap_or(f64::NAN);
            let nug = profile_loglik(&[t], &data, run.nugget).unwrap_or(f64::NAN);
            let pen = penalized_loglik(&[t], &data, run.nugget, &spec).unwrap_or(f64::NAN);
            [plain, mp, nug, pen]
        })
        .collect();
    let rows: Vec<Vec<String>> = thetas
        .iter()
        .zip(&curves)
        .map(|(t, c)| {
            std::iter::once(*t)
                .chain(c.iter().copied())
                .map(fmt_f64)
                .collect()
        })
        .collect();
    write_rows(
        &out_dir.join(format!("{function}_profile.csv")),
        &strings(&[
            "theta",
            "loglik_plain",
            "loglik_mp",
            "loglik_nugget",
            "loglik_penalized",
        ]),
        &rows,
    )?;
    let column = |c: usize| curves.iter().map(|r| r[c]).collect::<Vec<_>>();
    let argmax_at = |c: usize| argmax(&column(c)).map(|i| thetas[i]);

    // λ path.
    let mut lambdas = run.grid.clone();
    if !lambdas.contains(&lambda_demo) {
        lambdas.push(lambda_demo);
        lambdas.sort_by(f64::total_cmp);
    }
    let path: Vec<Result<LambdaFit>> = lambdas
        .par_iter()
        .map(|&l| fit_at(&data, l, run, seed))
        .collect();
    let mut rows = Vec::new();
    for (l, r) in lambdas.iter().zip(&path) {
        match r {
            Ok(f) => rows.push(vec![
                fmt_f64(*l),
                fmt_f64(f.opt.theta_hat[0]),
                fmt_f64(f.fit.sigma2_hat()),
                fmt_f64(f.opt.objective),
            ]),
            Err(e) => {
                warn!("lambda {l}: {e}");
                rows.push(vec![
                    fmt_f64(*l),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
        }
    }
    write_rows(
        &out_dir.join(format!("{function}_lambda_path.csv")),
        &strings(&["lambda", "theta_hat", "sigma2_hat", "objective"]),
        &rows,
    )?;

    // Predictive curves.
    let mle = fit_at(&data, 0.0, run, seed)?;
    let pen = fit_at(&data, lambda_demo, run, seed)?;
    let bspec = benchmark_spec(function);
    let (lo, hi) = (bspec.input_lo[0], bspec.input_hi[0]);
    let xs: Vec<f64> = (0..200)
        .map(|i| lo + (hi - lo) * i as f64 / 199.0)
        .collect();
    let x_raw = DMatrix::from_column_slice(xs.len(), 1, &xs);
    let mut rows = Vec::new();
    for (label, f) in [("mle", &mle), ("penalized", &pen)] {
        let (mean, sd) = predict_natural(&data, &f.fit, &x_raw)?;
        for i in 0..xs.len() {
            rows.push(vec![
                label.to_string(),
                fmt_f64(f.lambda),
                fmt_f64(xs[i]),
                fmt_f64(mean[i]),
                fmt_f64(sd[i]),
            ]);
        }
    }
    write_rows(
        &out_dir.join(format!("{function}_predictive.csv")),
        &strings(&["fit", "lambda", "x", "mean", "sd"]),
        &rows,
    )?;

    let summary = DemoSummary {
        schema_version: SCHEMA_VERSION,
        function,
        seed,
        theta_lo: run.optim.theta_lo,
        theta_hi: run.optim.theta_hi,
        nugget: run.nugget,
        mle: FitSummary::from_fit(&mle),
        penalized: FitSummary::from_fit(&pen),
        argmax_plain: argmax_at(0),
        argmax_mp: argmax_at(1),
        argmax_nugget: argmax_at(2),
        argmax_penalized: argmax_at(3),
    };
    write_json(&out_dir.join(format!("{function}_demo.json")), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// cv

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub schema_version: u32,
    pub dataset: String,
    pub metric: MetricKind,
    pub k: usize,
    pub seed: u64,
    pub use_1se: bool,
    pub grid: Vec<f64>,
    pub mean_curve: Vec<f64>,
    pub se: Vec<f64>,
    pub lambda_star: f64,
    pub lambda_1se: f64,
    pub selected_lambda: f64,
    pub final_fit: FitSummary,
}

/// Reads a dataset CSV and scales it by its observed input range.
pub fn load_dataset(path: &Path) -> Result<(RawTable, Dataset)> {
    let table = RawTable::read_csv_path(path)?;
    let data = Dataset::from_raw_observed(&table.inputs, &table.responses).map_err(|e| {
        Error::MalformedData {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })?;
    Ok((table, data))
}

/// K-fold CV on a dataset file; writes `cv_curve.csv` and `cv_summary.json`.
pub fn cmd_cv(
    dataset_path: &Path,
    metric: MetricKind,
    k: usize,
    use_1se: bool,
    run: &RunConfig,
    out_dir: &Path,
) -> Result<CvSummary> {
    run.validate()?;
    let (_, data) = load_dataset(dataset_path)?;
    create_dir(out_dir)?;
    let seed = run.optim.seed;
    let partition = make_folds(data.n(), k, derive_seed(seed, &[0]))?;
    let cv = cv_evaluate(
        &data,
        &partition,
        &run.grid,
        run.penalty,
        run.nugget,
        &run.optim.clone().with_seed(derive_seed(seed, &[1])),
    )?;
    let curve = cv.curve(metric);
    curve.write_csv(data.d(), writer(&out_dir.join("cv_curve.csv"))?)?;
    let star = run.grid[curve.lambda_star_index()?];
    let one_se = run.grid[curve.lambda_1se_index()?];
    let selected = if use_1se { one_se } else { star };
    let final_fit = fit_at(&data, selected, run, seed)?;
    let summary = CvSummary {
        schema_version: SCHEMA_VERSION,
        dataset: dataset_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metric,
        k: partition.k(),
        seed,
        use_1se,
        grid: run.grid.clone(),
        mean_curve: curve.mean_curve.clone(),
        se: curve.se.clone(),
        lambda_star: star,
        lambda_1se: one_se,
        selected_lambda: selected,
        final_fit: FitSummary::from_fit(&final_fit),
    };
    write_json(&out_dir.join("cv_summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// sim-study

pub const SIM_METHODS: [&str; 7] = ["MLE", "PE", "MD", "Score", "DPE", "DPE-1SE", "pMLE*"];
const SIM_FOLDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub rep: usize,
    pub method: String,
    pub lambda: f64,
    pub theta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub rmse: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_valid: usize,
    pub median_rmse: f64,
    pub median_crps: f64,
    /// Median of `(m - m*) / m*` against pMLE* in the same rep.
    pub median_rel_rmse: f64,
    pub median_rel_crps: f64,
    /// Median of `sign(rel)·sqrt(|rel|)`.
    pub median_sqrt_rel_rmse: f64,
    pub median_sqrt_rel_crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyReport {
    pub schema_version: u32,
    pub function: TestFunction,
    pub reps: usize,
    pub seed: u64,
    pub folds: usize,
    pub summaries: Vec<MethodSummary>,
}

fn signed_sqrt(v: f64) -> f64 {
    v.signum() * v.abs().sqrt()
}

/// Per-method medians of the records, each rep compared against its pMLE* row.
pub fn summarize(records: &[MethodRecord]) -> Vec<MethodSummary> {
    let mut oracle: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.method == "pMLE*") {
        oracle.insert(r.rep, (r.rmse, r.crps));
    }
    let mut methods: Vec<String> = SIM_METHODS.iter().map(|s| s.to_string()).collect();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    methods
        .into_iter()
        .filter(|m| records.iter().any(|r| &r.method == m))
        .map(|method| {
            let rows: Vec<&MethodRecord> = records
                .iter()
                .filter(|r| r.method == method && r.rmse.is_finite() && r.crps.is_finite())
                .collect();
            let rel = |f: fn(&MethodRecord) -> f64, g: fn(&(f64, f64)) -> f64| -> Vec<f64> {
                rows.iter()
                    .filter_map(|r| oracle.get(&r.rep).map(|o| (f(r) - g(o)) / g(o)))
                    .collect()
            };
            let rel_rmse = rel(|r| r.rmse, |o| o.0);
            let rel_crps = rel(|r| r.crps, |o| o.1);
            MethodSummary {
                n_valid: rows.len(),
                median_rmse: median(&rows.iter().map(|r| r.rmse).collect::<Vec<_>>()),
                median_crps: median(&rows.iter().map(|r| r.crps).collect::<Vec<_>>()),
                median_rel_rmse: median(&rel_rmse),
                median_rel_crps: median(&rel_crps),
                median_sqrt_rel_rmse: median(
                    &rel_rmse.iter().map(|&v| signed_sqrt(v)).collect::<Vec<_>>(),
                ),
                median_sqrt_rel_crps: median(
                    &rel_crps.iter().map(|&v| signed_sqrt(v)).collect::<Vec<_>>(),
                ),
                method,
            }
        })
        .collect()
}

fn record_row(r: &MethodRecord, d: usize) -> Vec<String> {
    let mut row = vec![r.rep.to_string(), r.method.clone(), fmt_f64(r.lambda)];
    if r.theta_hat.len() == d {
        row.extend(r.theta_hat.iter().map(|t| fmt_f64(*t)));
    } else {
        row.extend(std::iter::repeat_n(String::new(), d));
    }
    row.extend([fmt_f64(r.sigma2_hat), fmt_f64(r.rmse), fmt_f64(r.crps)]);
    row
}

fn records_header(d: usize) -> Vec<String> {
    let mut h = strings(&["rep", "method", "lambda"]);
    h.extend(theta_header(d));
    h.extend(strings(&["sigma2_hat", "rmse", "crps"]));
    h
}

pub fn write_records_csv<W: Write>(records: &[MethodRecord], d: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(records_header(d))?;
    for r in records {
        w.write_record(record_row(r, d))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(input: R) -> Result<Vec<MethodRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let d = headers
        .iter()
        .filter(|h| h.starts_with("theta_hat_"))
        .count();
    if headers
        .iter()
        .ne(records_header(d).iter().map(String::as_str))
    {
        return Err(Error::Shape("unexpected records header".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Shape(format!("bad number '{s}': {e}")))
    };
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let theta = if rec[3].is_empty() {
            Vec::new()
        } else {
            (0..d)
                .map(|p| num(&rec[3 + p]))
                .collect::<Result<Vec<_>>>()?
        };
        out.push(MethodRecord {
            rep: rec[0]
                .parse()
                .map_err(|e| Error::Shape(format!("bad rep '{}': {e}", &rec[0])))?,
            method: rec[1].to_string(),
            lambda: num(&rec[2])?,
            theta_hat: theta,
            sigma2_hat: num(&rec[3 + d])?,
            rmse: num(&rec[4 + d])?,
            crps: num(&rec[5 + d])?,
        });
    }
    Ok(out)
}

fn failed_record(rep: usize, method: &str) -> MethodRecord {
    MethodRecord {
        rep,
        method: method.to_string(),
        lambda: f64::NAN,
        theta_hat: Vec::new(),
        sigma2_hat: f64::NAN,
        rmse: f64::NAN,
        crps: f64::NAN,
    }
}

/// Full-data fit at each grid λ, scored on the test set.
struct GridEval {
    lambda: f64,
    theta_hat: Vec<f64>,
    sigma2_hat: f64,
    rmse: f64,
    crps: f64,
}

fn sim_rep(function: TestFunction, rep: usize, run: &RunConfig) -> Result<Vec<MethodRecord>> {
    let spec = benchmark_spec(function);
    let rep_seed = run.optim.seed.wrapping_add(rep as u64);
    let to_natural = |unit: DMatrix<f64>| {
        DMatrix::from_fn(unit.nrows(), unit.ncols(), |i, p| {
            spec.input_lo[p] + unit[(i, p)] * (spec.input_hi[p] - spec.input_lo[p])
        })
    };
    let train = RawTable::evaluate(
        function,
        to_natural(lhs_design(
            spec.n_train,
            spec.d,
            derive_seed(rep_seed, &[0]),
        )?),
    )?;
    let test = RawTable::evaluate(
        function,
        to_natural(lhs_design(
            spec.n_test,
            spec.d,
            derive_seed(rep_seed, &[1]),
        )?),
    )?;
    let data = Dataset::from_raw(
        &train.inputs,
        &train.responses,
        &spec.input_lo,
        &spec.input_hi,
    )?;

    let partition = make_folds(data.n(), SIM_FOLDS, derive_seed(rep_seed, &[2]))?;
    let cv = cv_evaluate(
        &data,
        &partition,
        &run.grid,
        run.penalty,
        run.nugget,
        &run.optim.clone().with_seed(derive_seed(rep_seed, &[3])),
    )?;

    let mut lambdas = run.grid.clone();
    if !lambdas.contains(&0.0) {
        lambdas.insert(0, 0.0);
    }
    let evals: Vec<Option<GridEval>> = lambdas
        .par_iter()
        .map(|&l| {
            let r = fit_at(&data, l, run, derive_seed(rep_seed, &[4])).and_then(|f| {
                let (mean, sd) = predict_natural(&data, &f.fit, &test.inputs)?;
                Ok(GridEval {
                    lambda: l,
                    theta_hat: f.opt.theta_hat.clone(),
                    sigma2_hat: f.fit.sigma2_hat(),
                    rmse: rmse(&test.responses, &mean)?,
                    crps: crps(&test.responses, &mean, &sd)?,
                })
            });
            r.map_err(|e| warn!("rep {rep}, lambda {l}: {e}")).ok()
        })
        .collect();
    let by_lambda = |l: f64| evals.iter().flatten().find(|e| e.lambda == l);
    let record = |method: &str, lambda: Option<f64>| match lambda.and_then(by_lambda) {
        Some(e) => MethodRecord {
            rep,
            method: method.to_string(),
            lambda: e.lambda,
            theta_hat: e.theta_hat.clone(),
            sigma2_hat: e.sigma2_hat,
            rmse: e.rmse,
            crps: e.crps,
        },
        None => failed_record(rep, method),
    };
    let select = |curve: CvCurve, one_se: bool| {
        let idx = if one_se {
            curve.lambda_1se_index()
        } else {
            curve.lambda_star_index()
        };
        idx.map(|j| run.grid[j])
            .map_err(|e| warn!("rep {rep}: {e}"))
            .ok()
    };

    let mut out = vec![record("MLE", Some(0.0))];
    for (name, metric) in [
        ("PE", MetricKind::Pe),
        ("MD", MetricKind::Md),
        ("Score", MetricKind::Score),
        ("DPE", MetricKind::Dpe),
    ] {
        out.push(record(name, select(cv.curve(metric), false)));
    }
    out.push(record("DPE-1SE", select(cv.curve(MetricKind::Dpe), true)));
    // Oracle: the grid λ with the lowest test RMSE, smaller λ on ties.
    let best = run
        .grid
        .iter()
        .filter_map(|&l| by_lambda(l))
        .fold(None::<&GridEval>, |acc, e| match acc {
            Some(b) if b.rmse <= e.rmse => Some(b),
            _ => Some(e),
        })
        .map(|e| e.lambda);
    out.push(record("pMLE*", best));
    Ok(out)
}

/// Repeated Latin hypercube train/test draws with 5-fold CV per rep.
pub fn cmd_sim_study(
    function: TestFunction,
    reps: usize,
    run: &RunConfig,
    out_dir: &Path,
) -> Result<SimStudyReport> {
    run.validate()?;
    if function.is_demo() {
        return Err(Error::Domain(format!(
            "{function} has no test set; choose lim, franke, piston_sim or borehole"
        )));
    }
    if reps == 0 {
        return Err(Error::Domain("reps must be at least 1".into()));
    }
    create_dir(out_dir)?;
    let per_rep: Vec<Vec<MethodRecord>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let r = sim_rep(function, rep, run);
            info!("{function} rep {rep} done");
            r.unwrap_or_else(|e| {
                warn!("rep {rep} failed: {e}");
                SIM_METHODS.iter().map(|m| failed_record(rep, m)).collect()
            })
        })
        .collect();
    let records: Vec<MethodRecord> = per_rep.into_iter().flatten().collect();
    let d = benchmark_spec(function).d;
    write_records_csv(
        &records,
        d,
        writer(&out_dir.join(format!("{function}_records.csv")))?,
    )?;
    let summaries = summarize(&records);
    write_summary_csv(&summaries, &out_dir.join(format!("{function}_summary.csv")))?;
    let report = SimStudyReport {
        schema_version: SCHEMA_VERSION,
        function,
        reps,
        seed: run.optim.seed,
        folds: SIM_FOLDS,
        summaries,
    };
    write_json(&out_dir.join(format!("{function}_summary.json")), &report)?;
    Ok(report)
}

fn write_summary_csv(summaries: &[MethodSummary], path: &Path) -> Result<()> {
    let rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            vec![
                s.method.clone(),
                s.n_valid.to_string(),
                fmt_f64(s.median_rmse),
                fmt_f64(s.median_crps),
                fmt_f64(s.median_rel_rmse),
                fmt_f64(s.median_rel_crps),
                fmt_f64(s.median_sqrt_rel_rmse),
                fmt_f64(s.median_sqrt_rel_crps),
            ]
        })
        .collect();
    write_rows(
        path,
        &strings(&[
            "method",
            "n_valid",
            "median_rmse",
            "median_crps",
            "median_rel_rmse",
            "median_rel_crps",
            "median_sqrt_rel_rmse",
            "median_sqrt_rel_crps",
        ]),
        &rows,
    )
}

// ---------------------------------------------------------------------------
// piston

pub const PISTON_METRICS: [&str; 3] = ["PE", "DPE", "DPE-1SE"];
/// Coordinate tolerance for calling a fit identical to the MLE.
pub const EQUAL_THETA_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Less,
    Equal,
    Greater,
}

impl Outcome {
    fn name(self) -> &'static str {
        match self {
            Outcome::Less => "less",
            Outcome::Equal => "equal",
            Outcome::Greater => "greater",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PistonRecord {
    pub rep: usize,
    pub metric: String,
    pub lambda: f64,
    pub theta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub rmse: f64,
    pub crps: Option<f64>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallyRow {
    pub metric: String,
    pub outcome: Outcome,
    pub count: usize,
    pub median_rmse: f64,
    pub median_crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PistonFit {
    pub label: String,
    pub lambda: f64,
    pub theta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub rmse: f64,
    pub crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PistonReport {
    pub schema_version: u32,
    pub reps: usize,
    pub seed: u64,
    /// `"test"` when a test set was supplied, otherwise `"loo"` (closed-form
    /// leave-one-out residuals of each final fit).
    pub comparison: String,
    pub mle: PistonFit,
    pub loocv_pe: PistonFit,
    pub best_4fold: Option<PistonFit>,
    pub tally: Vec<TallyRow>,
}

struct Scored {
    fit: LambdaFit,
    rmse: f64,
    crps: Option<f64>,
}

fn score_fit(data: &Dataset, fit: LambdaFit, test: Option<&RawTable>) -> Result<Scored> {
    match test {
        Some(t) => {
            let (mean, sd) = predict_natural(data, &fit.fit, &t.inputs)?;
            Ok(Scored {
                rmse: rmse(&t.responses, &mean)?,
                crps: Some(crps(&t.responses, &mean, &sd)?),
                fit,
            })
        }
        None => {
            let res = loo_residuals(data, &fit.fit);
            let zeros = vec![0.0; res.len()];
            Ok(Scored {
                rmse: rmse(&res, &zeros)?,
                crps: None,
                fit,
            })
        }
    }
}

fn piston_fit(label: &str, s: &Scored) -> PistonFit {
    PistonFit {
        label: label.to_string(),
        lambda: s.fit.lambda,
        theta_hat: s.fit.opt.theta_hat.clone(),
        sigma2_hat: s.fit.fit.sigma2_hat(),
        rmse: s.rmse,
        crps: s.crps,
    }
}

/// MLE, LOOCV with PE, and repeated random 4-fold CV on the piston slap data.
pub fn cmd_piston(
    reps: usize,
    test_path: Option<&Path>,
    run: &RunConfig,
    out_dir: &Path,
) -> Result<PistonReport> {
    run.validate()?;
    if reps == 0 {
        return Err(Error::Domain("reps must be at least 1".into()));
    }
    let (_, data) = piston_slap_dataset();
    let test = match test_path {
        Some(p) => {
            let t = RawTable::read_csv_path(p)?;
            if t.d() != data.d() {
                return Err(Error::MalformedData {
                    path: p.to_path_buf(),
                    reason: format!(
                        "test set has {} inputs, piston data has {}",
                        t.d(),
                        data.d()
                    ),
                });
            }
            Some(t)
        }
        None => None,
    };
    create_dir(out_dir)?;
    let seed = run.optim.seed;
    let fit_seed = derive_seed(seed, &[7]);

    // Every λ any method selects is fitted once on the full data.
    let mut cache: BTreeMap<u64, Scored> = BTreeMap::new();
    let scored = |lambda: f64, cache: &mut BTreeMap<u64, Scored>| -> Result<()> {
        if let std::collections::btree_map::Entry::Vacant(slot) = cache.entry(lambda.to_bits()) {
            let f = fit_at(&data, lambda, run, fit_seed)?;
            slot.insert(score_fit(&data, f, test.as_ref())?);
        }
        Ok(())
    };

    scored(0.0, &mut cache)?;
    let loo = make_folds(data.n(), data.n(), derive_seed(seed, &[0]))?;
    let loo_cv = cv_evaluate(
        &data,
        &loo,
        &run.grid,
        run.penalty,
        run.nugget,
        &run.optim.clone().with_seed(derive_seed(seed, &[1])),
    )?;
    let loo_lambda = run.grid[loo_cv.curve(MetricKind::Pe).lambda_star_index()?];
    scored(loo_lambda, &mut cache)?;

    let runs: Vec<Result<CvRun>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = seed.wrapping_add(rep as u64);
            let part = make_folds(data.n(), 4, derive_seed(rep_seed, &[2]))?;
            cv_evaluate(
                &data,
                &part,
                &run.grid,
                run.penalty,
                run.nugget,
                &run.optim.clone().with_seed(derive_seed(rep_seed, &[3])),
            )
        })
        .collect();

    let mut selections: Vec<(usize, &str, Option<f64>)> = Vec::new();
    for (rep, r) in runs.into_iter().enumerate() {
        let cv = r?;
        for metric in PISTON_METRICS {
            let curve = cv.curve(if metric == "PE" {
                MetricKind::Pe
            } else {
                MetricKind::Dpe
            });
            let idx = if metric == "DPE-1SE" {
                curve.lambda_1se_index()
            } else {
                curve.lambda_star_index()
            };
            let lambda = idx
                .map(|j| run.grid[j])
                .map_err(|e| warn!("rep {rep} {metric}: {e}"))
                .ok();
            selections.push((rep, metric, lambda));
        }
    }
    let mut distinct: Vec<f64> = selections.iter().filter_map(|s| s.2).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let fits: Vec<(f64, Result<Scored>)> = distinct
        .par_iter()
        .filter(|l| !cache.contains_key(&l.to_bits()))
        .map(|&l| {
            (
                l,
                fit_at(&data, l, run, fit_seed).and_then(|f| score_fit(&data, f, test.as_ref())),
            )
        })
        .collect();
    for (l, s) in fits {
        cache.insert(l.to_bits(), s?);
    }

    let mle = &cache[&0.0f64.to_bits()];
    let mut records = Vec::new();
    for (rep, metric, lambda) in selections {
        let Some(lambda) = lambda else { continue };
        let s = &cache[&lambda.to_bits()];
        let same = s
            .fit
            .opt
            .theta_hat
            .iter()
            .zip(&mle.fit.opt.theta_hat)
            .all(|(a, b)| (a - b).abs() <= EQUAL_THETA_TOL);
        let outcome = if same {
            Outcome::Equal
        } else if s.rmse < mle.rmse {
            Outcome::Less
        } else {
            Outcome::Greater
        };
        records.push(PistonRecord {
            rep,
            metric: metric.to_string(),
            lambda,
            theta_hat: s.fit.opt.theta_hat.clone(),
            sigma2_hat: s.fit.fit.sigma2_hat(),
            rmse: s.rmse,
            crps: s.crps,
            outcome,
        });
    }

    let mut tally = Vec::new();
    for metric in PISTON_METRICS {
        for outcome in [Outcome::Less, Outcome::Equal, Outcome::Greater] {
            let rows: Vec<&PistonRecord> = records
                .iter()
                .filter(|r| r.metric == metric && r.outcome == outcome)
                .collect();
            tally.push(TallyRow {
                metric: metric.to_string(),
                outcome,
                count: rows.len(),
                median_rmse: median(&rows.iter().map(|r| r.rmse).collect::<Vec<_>>()),
                median_crps: test
                    .as_ref()
                    .map(|_| median(&rows.iter().filter_map(|r| r.crps).collect::<Vec<_>>())),
            });
        }
    }

    let best = records
        .iter()
        .fold(None::<&PistonRecord>, |acc, r| match acc {
            Some(b) if (b.rmse, b.lambda) <= (r.rmse, r.lambda) => Some(b),
            _ => Some(r),
        })
        .map(|r| piston_fit("best_4fold", &cache[&r.lambda.to_bits()]));

    let report = PistonReport {
        schema_version: SCHEMA_VERSION,
        reps,
        seed,
        comparison: if test.is_some() { "test" } else { "loo" }.to_string(),
        mle: piston_fit("mle", mle),
        loocv_pe: piston_fit("loocv_pe", &cache[&loo_lambda.to_bits()]),
        best_4fold: best,
        tally,
    };
    write_piston_outputs(&report, &records, data.d(), out_dir)?;
    Ok(report)
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_piston_outputs(
    report: &PistonReport,
    records: &[PistonRecord],
    d: usize,
    out_dir: &Path,
) -> Result<()> {
    let mut header = strings(&["rep", "metric", "lambda"]);
    header.extend(theta_header(d));
    header.extend(strings(&["sigma2_hat", "rmse", "crps", "outcome"]));
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![r.rep.to_string(), r.metric.clone(), fmt_f64(r.lambda)];
            row.extend(r.theta_hat.iter().map(|t| fmt_f64(*t)));
            row.extend([
                fmt_f64(r.sigma2_hat),
                fmt_f64(r.rmse),
                opt_fmt(r.crps),
                r.outcome.name().to_string(),
            ]);
            row
        })
        .collect();
    write_rows(&out_dir.join("piston_records.csv"), &header, &rows)?;

    let rows: Vec<Vec<String>> = report
        .tally
        .iter()
        .map(|t| {
            vec![
                t.metric.clone(),
                t.outcome.name().to_string(),
                t.count.to_string(),
                fmt_f64(t.median_rmse),
                opt_fmt(t.median_crps),
            ]
        })
        .collect();
    write_rows(
        &out_dir.join("piston_tally.csv"),
        &strings(&["metric", "outcome", "count", "median_rmse", "median_crps"]),
        &rows,
    )?;

    let mut columns = vec![&report.mle, &report.loocv_pe];
    if let Some(b) = &report.best_4fold {
        columns.push(b);
    }
    let mut header = vec!["parameter".to_string()];
    header.extend(columns.iter().map(|c| c.label.clone()));
    let mut rows = vec![
        std::iter::once("lambda".to_string())
            .chain(columns.iter().map(|c| fmt_f64(c.lambda)))
            .collect(),
        std::iter::once("sigma2_hat".to_string())
            .chain(columns.iter().map(|c| fmt_f64(c.sigma2_hat)))
            .collect(),
    ];
    for p in 0..d {
        rows.push(
            std::iter::once(format!("theta_hat_{}", p + 1))
                .chain(columns.iter().map(|c| fmt_f64(c.theta_hat[p])))
                .collect(),
        );
    }
    rows.push(
        std::iter::once(format!("rmse_{}", report.comparison))
            .chain(columns.iter().map(|c| fmt_f64(c.rmse)))
            .collect(),
    );
    write_rows(&out_dir.join("piston_params.csv"), &header, &rows)?;
    write_json(&out_dir.join("piston_summary.json"), report)
}
