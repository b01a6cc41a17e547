//! K-fold cross-validation over a grid of penalty weights.
//!
//! Every `(fold, λ)` cell fits `θ̂` on the training part, predicts the held-out
//! part and records all four metrics at once, so one run can be summarized
//! under any metric without refitting.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{Dataset, GpFit, KernelConfig, PosteriorPrediction};
use crate::linalg::Cholesky;
use crate::optimize::{derive_seed, maximize_penalized, OptimConfig};
use crate::penalty::PenaltySpec;

/// `{0}` followed by 50 log-spaced values from `e⁻⁸` to `e²`.
pub fn default_lambda_grid() -> Vec<f64> {
    let mut grid = vec![0.0];
    grid.extend((0..50).map(|i| (-8.0 + 10.0 * i as f64 / 49.0).exp()));
    grid
}

/// Index of the grid value closest to `lambda` (on a log scale for positive
/// values; zero only matches zero).
pub fn nearest_grid_index(grid: &[f64], lambda: f64) -> Option<usize> {
    let dist = |v: f64| {
        if lambda == 0.0 || v == 0.0 {
            if lambda == v {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (v.ln() - lambda.ln()).abs()
        }
    };
    (0..grid.len())
        .filter(|&i| dist(grid[i]).is_finite())
        .min_by(|&i, &j| dist(grid[i]).total_cmp(&dist(grid[j])))
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Domain("lambda grid is empty".into()));
    }
    if let Some(v) = grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Domain(format!(
            "lambda grid value {v} is not a finite nonnegative number"
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain(
            "lambda grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    folds: Vec<Vec<usize>>,
}

impl FoldPartition {
    /// Builds a partition from explicit index sets, checking that they cover
    /// `0..n` exactly once.
    pub fn from_folds(n: usize, folds: Vec<Vec<usize>>) -> Result<Self> {
        if folds.len() < 2 {
            return Err(Error::Domain("need at least two folds".into()));
        }
        let mut seen = vec![false; n];
        for &i in folds.iter().flatten() {
            if i >= n || seen[i] {
                return Err(Error::Domain(format!(
                    "index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || folds.iter().any(|f| f.is_empty()) {
            return Err(Error::Domain(
                "folds must be nonempty and cover every row".into(),
            ));
        }
        Ok(Self { folds })
    }

    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn folds(&self) -> &[Vec<usize>] {
        &self.folds
    }

    pub fn n(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn min_fold_size(&self) -> usize {
        self.folds.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// Random partition of `0..n` into `k` folds whose sizes differ by at most one;
/// the first `n mod k` folds take the extra row. Indices within a fold are sorted.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPartition> {
    if k < 2 || k > n {
        return Err(Error::Domain(format!(
            "need 2 <= K <= n, got K = {k}, n = {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[start..start + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += size;
    }
    Ok(FoldPartition { folds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Pe,
    Md,
    Score,
    Dpe,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Pe,
        MetricKind::Md,
        MetricKind::Score,
        MetricKind::Dpe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Pe => "pe",
            MetricKind::Md => "md",
            MetricKind::Score => "score",
            MetricKind::Dpe => "dpe",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pe" => Ok(MetricKind::Pe),
            "md" => Ok(MetricKind::Md),
            "score" => Ok(MetricKind::Score),
            "dpe" => Ok(MetricKind::Dpe),
            other => Err(Error::Domain(format!("unknown metric '{other}'"))),
        }
    }
}

fn residual(y_k: &DVector<f64>, pred: &PosteriorPrediction) -> Result<DVector<f64>> {
    if y_k.len() != pred.mean.len() {
        return Err(Error::Shape(format!(
            "{} held-out responses but {} predictions",
            y_k.len(),
            pred.mean.len()
        )));
    }
    Ok(y_k - &pred.mean)
}

fn factor_named(m: &DMatrix<f64>, what: &str) -> Result<Cholesky> {
    Cholesky::factor(m).map_err(|pivot| {
        Error::Numeric(format!("{what} is not positive definite at pivot {pivot}"))
    })
}

/// Squared prediction error `rᵀr`.
pub fn metric_pe(y_k: &DVector<f64>, pred: &PosteriorPrediction) -> Result<f64> {
    Ok(residual(y_k, pred)?.norm_squared())
}

/// Mahalanobis distance `rᵀΣ⁻¹r` under the predictive covariance.
pub fn metric_md(y_k: &DVector<f64>, pred: &PosteriorPrediction) -> Result<f64> {
    let r = residual(y_k, pred)?;
    Ok(factor_named(&pred.cov, "predictive covariance")?.quad_form(&r))
}

/// `MD + log|Σ|`.
pub fn metric_score(y_k: &DVector<f64>, pred: &PosteriorPrediction) -> Result<f64> {
    let r = residual(y_k, pred)?;
    let chol = factor_named(&pred.cov, "predictive covariance")?;
    Ok(chol.quad_form(&r) + chol.log_det())
}

/// Decorrelated prediction error `rᵀR⁻¹r`, standardized by the conditional
/// correlation rather than the covariance, so it carries no `1/σ̂²` factor.
pub fn metric_dpe(y_k: &DVector<f64>, pred: &PosteriorPrediction) -> Result<f64> {
    let r = residual(y_k, pred)?;
    Ok(factor_named(&pred.cond_corr, "conditional correlation")?.quad_form(&r))
}

/// All four metrics for one held-out fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub pe: f64,
    pub md: f64,
    pub score: f64,
    pub dpe: f64,
    /// `y_{-k}ᵀR⁻¹y_{-k} / (n - n_v)`.
    pub sigma2_cv: f64,
}

impl FoldMetrics {
    pub fn get(&self, metric: MetricKind) -> f64 {
        match metric {
            MetricKind::Pe => self.pe,
            MetricKind::Md => self.md,
            MetricKind::Score => self.score,
            MetricKind::Dpe => self.dpe,
        }
    }
}

/// Scores a fit on `D_{-k}` against the held-out fold.
///
/// `n_total` is the size of the full dataset; the fold scale estimate divides
/// by `n_total - n_v`, which coincides with the fit's own `σ̂²` whenever the
/// fit was trained on exactly the complement of the fold.
pub fn fold_metrics(
    fit: &GpFit,
    n_total: usize,
    x_val: &DMatrix<f64>,
    y_val: &DVector<f64>,
) -> Result<FoldMetrics> {
    let n_v = y_val.len();
    if n_v == 0 || n_total <= n_v {
        return Err(Error::Shape(format!(
            "held-out fold of size {n_v} from {n_total} rows"
        )));
    }
    let sigma2_cv = fit.quad_form() / (n_total - n_v) as f64;
    let mut pred = fit.predict(x_val)?;
    pred.cov = &pred.cond_corr * sigma2_cv;
    pred.point_var = pred.cov.diagonal();
    Ok(FoldMetrics {
        pe: metric_pe(y_val, &pred)?,
        md: metric_md(y_val, &pred)?,
        score: metric_score(y_val, &pred)?,
        dpe: metric_dpe(y_val, &pred)?,
        sigma2_cv,
    })
}

/// Result of one `(fold, λ)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub theta_hat: Vec<f64>,
    pub sigma2_hat: f64,
    pub metrics: FoldMetrics,
}

/// Every cell of a CV run. `cells[k][j]` is fold `k` at `grid[j]`; `None`
/// marks a cell whose fit or metrics could not be computed.
#[derive(Debug, Clone, PartialEq)]
pub struct CvRun {
    pub grid: Vec<f64>,
    pub partition: FoldPartition,
    pub d: usize,
    pub cells: Vec<Vec<Option<CellResult>>>,
}

/// Fits every `(fold, λ)` cell. Cell seeds derive from
/// `(config.seed, fold, λ index)`, so the outcome does not depend on the order
/// cells are scheduled in.
pub fn cv_evaluate(
    data: &Dataset,
    partition: &FoldPartition,
    grid: &[f64],
    penalty: PenaltySpec,
    g: f64,
    config: &OptimConfig,
) -> Result<CvRun> {
    validate_grid(grid)?;
    config.validate()?;
    penalty.validate()?;
    if partition.n() != data.n() {
        return Err(Error::Shape(format!(
            "partition covers {} rows, dataset has {}",
            partition.n(),
            data.n()
        )));
    }
    let k = partition.k();
    let splits = partition
        .folds()
        .iter()
        .map(|fold| data.split(fold))
        .collect::<Result<Vec<_>>>()?;

    let flat: Vec<Option<CellResult>> = (0..k * grid.len())
        .into_par_iter()
        .map(|cell| {
            let (fold, j) = (cell / grid.len(), cell % grid.len());
            let (train, x_val, y_val) = &splits[fold];
            let cfg = config
                .clone()
                .with_seed(derive_seed(config.seed, &[fold as u64, j as u64]));
            let spec = penalty.with_lambda(grid[j]);
            match evaluate_cell(train, data.n(), x_val, y_val, &spec, g, &cfg) {
                Ok(c) => Some(c),
                Err(e) => {
                    warn!("CV cell (fold {fold}, lambda {}) invalid: {e}", grid[j]);
                    None
                }
            }
        })
        .collect();

    let mut cells = Vec::with_capacity(k);
    let mut it = flat.into_iter();
    for _ in 0..k {
        cells.push(it.by_ref().take(grid.len()).collect());
    }
    Ok(CvRun {
        grid: grid.to_vec(),
        partition: partition.clone(),
        d: data.d(),
        cells,
    })
}

fn evaluate_cell(
    train: &Dataset,
    n_total: usize,
    x_val: &DMatrix<f64>,
    y_val: &DVector<f64>,
    spec: &PenaltySpec,
    g: f64,
    config: &OptimConfig,
) -> Result<CellResult> {
    let opt = maximize_penalized(train, g, spec, config)?;
    let kernel =
        KernelConfig::with_bounds(opt.theta_hat.clone(), g, config.theta_lo, config.theta_hi)?;
    let fit = GpFit::new(train, kernel)?;
    let metrics = fold_metrics(&fit, n_total, x_val, y_val)?;
    Ok(CellResult {
        theta_hat: opt.theta_hat,
        sigma2_hat: fit.sigma2_hat(),
        metrics,
    })
}

/// Aggregated CV curve for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub metric: MetricKind,
    pub grid: Vec<f64>,
    /// `K × |grid|`; `None` for invalid cells.
    pub per_fold: Vec<Vec<Option<f64>>>,
    /// Mean over valid cells; NaN when a column has none.
    pub mean_curve: Vec<f64>,
    pub sd: Vec<f64>,
    pub se: Vec<f64>,
    /// A column is eligible for selection only if every fold is valid.
    pub eligible: Vec<bool>,
    pub lambda_star: Option<f64>,
    pub lambda_1se: Option<f64>,
    pub per_fold_theta: Vec<Vec<Option<Vec<f64>>>>,
    pub per_fold_sigma2: Vec<Vec<Option<f64>>>,
}

impl CvRun {
    pub fn k(&self) -> usize {
        self.cells.len()
    }

    /// Summarizes the run under `metric`.
    pub fn curve(&self, metric: MetricKind) -> CvCurve {
        if matches!(metric, MetricKind::Md | MetricKind::Score)
            && self.partition.min_fold_size() < 2
        {
            warn!(
                "{metric} with held-out folds of size {} is unreliable; at least 2 is recommended",
                self.partition.min_fold_size()
            );
        }
        let per_fold: Vec<Vec<Option<f64>>> = self
            .cells
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| c.as_ref().map(|c| c.metrics.get(metric)))
                    .collect()
            })
            .collect();
        let per_fold_theta = self
            .cells
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| c.as_ref().map(|c| c.theta_hat.clone()))
                    .collect()
            })
            .collect();
        let per_fold_sigma2 = self
            .cells
            .iter()
            .map(|row| {
                row.iter()
                    .map(|c| c.as_ref().map(|c| c.sigma2_hat))
                    .collect()
            })
            .collect();
        let mut curve = CvCurve {
            metric,
            grid: self.grid.clone(),
            per_fold,
            mean_curve: Vec::new(),
            sd: Vec::new(),
            se: Vec::new(),
            eligible: Vec::new(),
            lambda_star: None,
            lambda_1se: None,
            per_fold_theta,
            per_fold_sigma2,
        };
        curve.aggregate();
        curve
    }
}

impl CvCurve {
    pub fn k(&self) -> usize {
        self.per_fold.len()
    }

    fn aggregate(&mut self) {
        let k = self.k();
        let (mut mean, mut sd, mut se, mut eligible) = (vec![], vec![], vec![], vec![]);
        for j in 0..self.grid.len() {
            let vals: Vec<f64> = self
                .per_fold
                .iter()
                .filter_map(|row| row[j])
                .filter(|v| v.is_finite())
                .collect();
            let m = vals.len();
            let mu = if m > 0 {
                vals.iter().sum::<f64>() / m as f64
            } else {
                f64::NAN
            };
            let s = if m > 1 {
                (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            mean.push(mu);
            sd.push(s);
            se.push(s / (m as f64).sqrt());
            eligible.push(m == k);
        }
        self.mean_curve = mean;
        self.sd = sd;
        self.se = se;
        self.eligible = eligible;
        self.lambda_star = self.star_index().map(|j| self.grid[j]);
        self.lambda_1se = self.one_se_index().map(|j| self.grid[j]);
    }

    fn star_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for j in 0..self.grid.len() {
            if !self.eligible[j] {
                continue;
            }
            if best.is_none_or(|b| self.mean_curve[j] < self.mean_curve[b]) {
                best = Some(j);
            }
        }
        best
    }

    fn one_se_index(&self) -> Option<usize> {
        let star = self.star_index()?;
        let se = if self.se[star].is_finite() {
            self.se[star]
        } else {
            0.0
        };
        let threshold = self.mean_curve[star] + se;
        (star..self.grid.len())
            .rev()
            .find(|&j| self.eligible[j] && self.mean_curve[j] <= threshold)
    }

    /// Grid index of `λ*`.
    pub fn lambda_star_index(&self) -> Result<usize> {
        self.star_index().ok_or_else(|| {
            Error::Selection(format!("no eligible lambda for the {} curve", self.metric))
        })
    }

    /// Grid index of `λ_1SE`.
    pub fn lambda_1se_index(&self) -> Result<usize> {
        self.one_se_index().ok_or_else(|| {
            Error::Selection(format!("no eligible lambda for the {} curve", self.metric))
        })
    }

    /// Writes one row per `(fold, λ)`:
    /// `lambda, fold, metric_value, theta_hat_1..d, sigma2_hat`.
    /// Invalid cells leave the value columns empty.
    pub fn write_csv<W: Write>(&self, d: usize, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["lambda".to_string(), "fold".into(), "metric_value".into()];
        header.extend((1..=d).map(|p| format!("theta_hat_{p}")));
        header.push("sigma2_hat".into());
        w.write_record(&header)?;
        for j in 0..self.grid.len() {
            for k in 0..self.k() {
                let mut row = vec![fmt_f64(self.grid[j]), (k + 1).to_string()];
                match (
                    &self.per_fold[k][j],
                    &self.per_fold_theta[k][j],
                    self.per_fold_sigma2[k][j],
                ) {
                    (Some(v), Some(theta), Some(s2)) => {
                        row.push(fmt_f64(*v));
                        row.extend(theta.iter().map(|t| fmt_f64(*t)));
                        row.push(fmt_f64(s2));
                    }
                    _ => row.extend(std::iter::repeat_n(String::new(), d + 2)),
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a curve from [`CvCurve::write_csv`] output.
    pub fn read_csv<R: Read>(metric: MetricKind, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let d = headers
            .iter()
            .filter(|h| h.starts_with("theta_hat_"))
            .count();
        if headers.len() != d + 4 || &headers[0] != "lambda" || &headers[1] != "fold" {
            return Err(Error::Shape("unexpected CV curve header".into()));
        }
        let mut rows: Vec<CsvRow> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Shape(format!("bad number '{s}': {e}")))
            };
            let lambda = parse(&rec[0])?;
            let fold: usize = rec[1]
                .parse()
                .map_err(|e| Error::Shape(format!("bad fold '{}': {e}", &rec[1])))?;
            let cell = if rec[2].is_empty() {
                None
            } else {
                let theta = (0..d)
                    .map(|p| parse(&rec[3 + p]))
                    .collect::<Result<Vec<_>>>()?;
                Some((parse(&rec[2])?, theta, parse(&rec[3 + d])?))
            };
            rows.push((lambda, fold, cell));
        }
        let mut grid: Vec<f64> = Vec::new();
        for (l, _, _) in &rows {
            if grid.last() != Some(l) {
                grid.push(*l);
            }
        }
        let k = rows.iter().map(|r| r.1).max().unwrap_or(0);
        if k == 0 || rows.len() != k * grid.len() {
            return Err(Error::Shape(
                "CV curve rows do not form a K × grid table".into(),
            ));
        }
        let mut per_fold = vec![vec![None; grid.len()]; k];
        let mut per_fold_theta = vec![vec![None; grid.len()]; k];
        let mut per_fold_sigma2 = vec![vec![None; grid.len()]; k];
        for (i, (_, fold, cell)) in rows.into_iter().enumerate() {
            let j = i / k;
            if let Some((v, theta, s2)) = cell {
                per_fold[fold - 1][j] = Some(v);
                per_fold_theta[fold - 1][j] = Some(theta);
                per_fold_sigma2[fold - 1][j] = Some(s2);
            }
        }
        let mut curve = CvCurve {
            metric,
            grid,
            per_fold,
            mean_curve: Vec::new(),
            sd: Vec::new(),
            se: Vec::new(),
            eligible: Vec::new(),
            lambda_star: None,
            lambda_1se: None,
            per_fold_theta,
            per_fold_sigma2,
        };
        curve.aggregate();
        Ok(curve)
    }
}

/// Shortest decimal form that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// `(λ, fold, (metric, θ̂, σ̂²) if the cell is valid)`.
type CsvRow = (f64, usize, Option<(f64, Vec<f64>, f64)>);

/// Convenience wrapper: evaluate every cell and summarize under `metric`.
pub fn cv_curve(
    data: &Dataset,
    partition: &FoldPartition,
    grid: &[f64],
    metric: MetricKind,
    penalty: PenaltySpec,
    g: f64,
    config: &OptimConfig,
) -> Result<CvCurve> {
    Ok(cv_evaluate(data, partition, grid, penalty, g, config)?.curve(metric))
}

/// `λ*`: the eligible grid value minimizing the mean curve, ties to the smaller λ.
pub fn select_lambda(curve: &CvCurve) -> Result<f64> {
    Ok(curve.grid[curve.lambda_star_index()?])
}

/// `λ_1SE`: the largest eligible λ whose mean is within one standard error of
/// the minimum.
pub fn select_lambda_1se(curve: &CvCurve) -> Result<f64> {
    Ok(curve.grid[curve.lambda_1se_index()?])
}
