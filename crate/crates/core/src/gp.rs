//! Gaussian-process core: preprocessing, the anisotropic squared-exponential
//! kernel with a fixed nugget, the profile likelihood and posterior prediction.
//!
//! Correlation between two unit-cube inputs is
//! `exp(-Σ_p θ_p (x_p - x'_p)²)`, plus the nugget `g` on the training diagonal.
//! The scale `σ²` is profiled out in closed form, `σ̂² = yᵀR⁻¹y / n`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;

/// Nugget used throughout unless a caller overrides it.
pub const DEFAULT_NUGGET: f64 = 1e-5;
pub const DEFAULT_THETA_LO: f64 = 0.001;
pub const DEFAULT_THETA_HI: f64 = 1000.0;

/// Maps raw inputs onto the unit cube column by column.
///
/// Points outside `[lo, hi]` are allowed and land outside `[0, 1]`.
pub fn scale_inputs(raw: &DMatrix<f64>, lo: &[f64], hi: &[f64]) -> Result<DMatrix<f64>> {
    check_bounds(raw.ncols(), lo, hi)?;
    Ok(DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, p| {
        (raw[(i, p)] - lo[p]) / (hi[p] - lo[p])
    }))
}

pub fn unscale_inputs(scaled: &DMatrix<f64>, lo: &[f64], hi: &[f64]) -> Result<DMatrix<f64>> {
    check_bounds(scaled.ncols(), lo, hi)?;
    Ok(DMatrix::from_fn(scaled.nrows(), scaled.ncols(), |i, p| {
        lo[p] + scaled[(i, p)] * (hi[p] - lo[p])
    }))
}

fn check_bounds(d: usize, lo: &[f64], hi: &[f64]) -> Result<()> {
    if lo.len() != d || hi.len() != d {
        return Err(Error::Shape(format!(
            "{} input columns but bounds of length {} and {}",
            d,
            lo.len(),
            hi.len()
        )));
    }
    for p in 0..d {
        if !(lo[p] < hi[p]) {
            return Err(Error::InvalidDesign(format!(
                "dimension {} has degenerate range [{}, {}]",
                p + 1,
                lo[p],
                hi[p]
            )));
        }
    }
    Ok(())
}

/// Subtracts the arithmetic mean. Returns the centered vector and the mean.
pub fn center_responses(y_raw: &[f64]) -> Result<(DVector<f64>, f64)> {
    if y_raw.is_empty() {
        return Err(Error::EmptyData);
    }
    let mean = y_raw.iter().sum::<f64>() / y_raw.len() as f64;
    Ok((
        DVector::from_iterator(y_raw.len(), y_raw.iter().map(|v| v - mean)),
        mean,
    ))
}

/// Centers and divides by the sample standard deviation (`n - 1` denominator).
///
/// The scale falls back to 1 when it is undefined (a single point) or zero.
pub fn standardize_responses(y_raw: &[f64]) -> Result<(DVector<f64>, f64, f64)> {
    let (centered, mean) = center_responses(y_raw)?;
    let n = centered.len();
    let scale = if n > 1 {
        let sd = (centered.norm_squared() / (n - 1) as f64).sqrt();
        if sd > 0.0 && sd.is_finite() {
            sd
        } else {
            1.0
        }
    } else {
        1.0
    };
    Ok((centered / scale, mean, scale))
}

/// Training data on the unit cube with standardized responses, plus the
/// records needed to map back to natural units.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    responses: DVector<f64>,
    response_mean: f64,
    response_scale: f64,
    input_lo: Vec<f64>,
    input_hi: Vec<f64>,
}

const UNIT_CUBE_SLACK: f64 = 1e-12;

impl Dataset {
    /// Builds a dataset from natural-unit inputs and responses using explicit
    /// design bounds.
    pub fn from_raw(raw_x: &DMatrix<f64>, raw_y: &[f64], lo: &[f64], hi: &[f64]) -> Result<Self> {
        if raw_x.nrows() == 0 || raw_y.is_empty() {
            return Err(Error::EmptyData);
        }
        if raw_x.nrows() != raw_y.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} responses",
                raw_x.nrows(),
                raw_y.len()
            )));
        }
        let inputs = scale_inputs(raw_x, lo, hi)?;
        if let Some(bad) = inputs
            .iter()
            .find(|&&v| !(-UNIT_CUBE_SLACK..=1.0 + UNIT_CUBE_SLACK).contains(&v))
        {
            return Err(Error::InvalidDesign(format!(
                "training input scales to {bad}, outside [0, 1]"
            )));
        }
        let inputs = inputs.map(|v| v.clamp(0.0, 1.0));
        let (responses, response_mean, response_scale) = standardize_responses(raw_y)?;
        Ok(Self {
            inputs,
            responses,
            response_mean,
            response_scale,
            input_lo: lo.to_vec(),
            input_hi: hi.to_vec(),
        })
    }

    /// Like [`Dataset::from_raw`] with bounds taken from the observed per-column
    /// minimum and maximum.
    pub fn from_raw_observed(raw_x: &DMatrix<f64>, raw_y: &[f64]) -> Result<Self> {
        let (lo, hi) = observed_bounds(raw_x)?;
        Self::from_raw(raw_x, raw_y, &lo, &hi)
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    pub fn d(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn response_mean(&self) -> f64 {
        self.response_mean
    }

    pub fn response_scale(&self) -> f64 {
        self.response_scale
    }

    pub fn input_lo(&self) -> &[f64] {
        &self.input_lo
    }

    pub fn input_hi(&self) -> &[f64] {
        &self.input_hi
    }

    /// Scales natural-unit points with this dataset's bounds.
    pub fn scale_points(&self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        scale_inputs(raw, &self.input_lo, &self.input_hi)
    }

    pub fn unscale_points(&self, scaled: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        unscale_inputs(scaled, &self.input_lo, &self.input_hi)
    }

    /// Maps a model-scale response back to natural units.
    pub fn to_natural(&self, y: f64) -> f64 {
        self.response_mean + self.response_scale * y
    }

    /// Maps a natural-unit response to model scale.
    pub fn to_model(&self, y_raw: f64) -> f64 {
        (y_raw - self.response_mean) / self.response_scale
    }

    /// Natural-unit copies of the training responses.
    pub fn natural_responses(&self) -> Vec<f64> {
        self.responses.iter().map(|&y| self.to_natural(y)).collect()
    }

    /// Splits off the rows in `held_out`. The remaining training rows are
    /// re-centered on their own mean; the held-out responses are shifted by
    /// that same training mean so both sides share one origin.
    pub fn split(&self, held_out: &[usize]) -> Result<(Dataset, DMatrix<f64>, DVector<f64>)> {
        let n = self.n();
        let mut is_out = vec![false; n];
        for &i in held_out {
            if i >= n {
                return Err(Error::Shape(format!(
                    "row index {i} out of range for n = {n}"
                )));
            }
            is_out[i] = true;
        }
        let train: Vec<usize> = (0..n).filter(|&i| !is_out[i]).collect();
        if train.is_empty() {
            return Err(Error::EmptyData);
        }
        let shift = train.iter().map(|&i| self.responses[i]).sum::<f64>() / train.len() as f64;
        let train_set = Dataset {
            inputs: self.inputs.select_rows(train.iter()),
            responses: DVector::from_iterator(
                train.len(),
                train.iter().map(|&i| self.responses[i] - shift),
            ),
            response_mean: self.response_mean + self.response_scale * shift,
            response_scale: self.response_scale,
            input_lo: self.input_lo.clone(),
            input_hi: self.input_hi.clone(),
        };
        let x_out = self.inputs.select_rows(held_out.iter());
        let y_out = DVector::from_iterator(
            held_out.len(),
            held_out.iter().map(|&i| self.responses[i] - shift),
        );
        Ok((train_set, x_out, y_out))
    }
}

/// Per-column minimum and maximum.
pub fn observed_bounds(raw_x: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if raw_x.nrows() == 0 {
        return Err(Error::EmptyData);
    }
    let lo = raw_x.column_iter().map(|c| c.min()).collect();
    let hi = raw_x.column_iter().map(|c| c.max()).collect();
    Ok((lo, hi))
}

/// Lengthscales, nugget and the box the lengthscales must live in.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelConfig {
    pub theta: Vec<f64>,
    pub nugget: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

impl KernelConfig {
    /// Default box `[0.001, 1000]`.
    pub fn new(theta: Vec<f64>, nugget: f64) -> Result<Self> {
        Self::with_bounds(theta, nugget, DEFAULT_THETA_LO, DEFAULT_THETA_HI)
    }

    pub fn with_bounds(theta: Vec<f64>, nugget: f64, theta_lo: f64, theta_hi: f64) -> Result<Self> {
        if !(theta_lo > 0.0 && theta_lo < theta_hi) {
            return Err(Error::Domain(format!(
                "lengthscale bounds must satisfy 0 < lo < hi, got [{theta_lo}, {theta_hi}]"
            )));
        }
        if !(nugget > 0.0) {
            return Err(Error::Domain(format!(
                "nugget must be positive, got {nugget}"
            )));
        }
        if let Some(t) = theta.iter().find(|t| !(**t >= theta_lo && **t <= theta_hi)) {
            return Err(Error::Domain(format!(
                "lengthscale {t} outside [{theta_lo}, {theta_hi}]"
            )));
        }
        Ok(Self {
            theta,
            nugget,
            theta_lo,
            theta_hi,
        })
    }
}

fn check_theta(theta: &[f64], d: usize) -> Result<()> {
    if theta.len() != d {
        return Err(Error::Shape(format!(
            "{} lengthscales for {} input dimensions",
            theta.len(),
            d
        )));
    }
    if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::Domain(format!(
            "lengthscales must be positive, got {t}"
        )));
    }
    Ok(())
}

/// Correlation matrix between the rows of `x1` and `x2`.
///
/// With `add_nugget`, `g` is added to every diagonal entry; callers only set it
/// when `x1` and `x2` are the same point set.
pub fn kernel_matrix(
    x1: &DMatrix<f64>,
    x2: &DMatrix<f64>,
    theta: &[f64],
    g: f64,
    add_nugget: bool,
) -> Result<DMatrix<f64>> {
    if x1.ncols() != x2.ncols() {
        return Err(Error::Shape(format!(
            "point sets have {} and {} columns",
            x1.ncols(),
            x2.ncols()
        )));
    }
    check_theta(theta, x1.ncols())?;
    if !(g >= 0.0) {
        return Err(Error::Domain(format!(
            "nugget must be nonnegative, got {g}"
        )));
    }
    let mut k = DMatrix::from_fn(x1.nrows(), x2.nrows(), |i, j| {
        let mut s = 0.0;
        for (p, t) in theta.iter().enumerate() {
            let diff = x1[(i, p)] - x2[(j, p)];
            s += t * diff * diff;
        }
        (-s).exp()
    });
    if add_nugget {
        for i in 0..k.nrows().min(k.ncols()) {
            k[(i, i)] += g;
        }
    }
    Ok(k)
}

/// Factorized training correlation plus `α = R⁻¹y` and `q = yᵀR⁻¹y`.
#[derive(Debug, Clone)]
pub(crate) struct ProfileTerms {
    pub chol: Cholesky,
    pub alpha: DVector<f64>,
    pub quad: f64,
}

pub(crate) fn profile_terms(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    theta: &[f64],
    g: f64,
) -> Result<ProfileTerms> {
    let r = kernel_matrix(inputs, inputs, theta, g, true)?;
    let chol = Cholesky::factor(&r).map_err(|pivot| Error::NotPositiveDefinite {
        theta: theta.to_vec(),
        pivot,
    })?;
    let alpha = chol.solve(y);
    let quad = chol.quad_form(y);
    if !(quad > 0.0) || !quad.is_finite() {
        return Err(Error::Numeric(format!(
            "quadratic form yᵀR⁻¹y = {quad} is not positive (theta = {theta:?})"
        )));
    }
    Ok(ProfileTerms { chol, alpha, quad })
}

fn loglik_from_terms(terms: &ProfileTerms, n: usize) -> f64 {
    -0.5 * n as f64 * terms.quad.ln() - 0.5 * terms.chol.log_det()
}

/// Profile log likelihood with additive constants dropped:
/// `-(n/2) log(yᵀR⁻¹y) - (1/2) log|R|`.
pub fn profile_loglik(theta: &[f64], data: &Dataset, g: f64) -> Result<f64> {
    let terms = profile_terms(data.inputs(), data.responses(), theta, g)?;
    Ok(loglik_from_terms(&terms, data.n()))
}

/// Profile log likelihood with the Moore-Penrose pseudoinverse in the
/// quadratic term and no nugget.
///
/// Eigenvalues at or below `eig_tol` are dropped from the pseudoinverse. The
/// log-determinant keeps every eigenvalue as computed (by magnitude), which is
/// what makes this variant unreliable for small lengthscales.
pub fn profile_loglik_mp(theta: &[f64], data: &Dataset, eig_tol: f64) -> Result<f64> {
    if !(eig_tol >= 0.0) {
        return Err(Error::Domain(format!(
            "eig_tol must be nonnegative, got {eig_tol}"
        )));
    }
    let r = kernel_matrix(data.inputs(), data.inputs(), theta, 0.0, false)?;
    let eig = SymmetricEigen::try_new(r, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric(format!("eigendecomposition failed (theta = {theta:?})")))?;
    let proj = eig.eigenvectors.transpose() * data.responses();
    let mut quad = 0.0;
    let mut log_det = 0.0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > eig_tol {
            quad += proj[k] * proj[k] / lambda;
        }
        log_det += lambda.abs().max(f64::MIN_POSITIVE).ln();
    }
    let n = data.n() as f64;
    Ok(-0.5 * n * quad.ln() - 0.5 * log_det)
}

/// Closed-form scale estimate `yᵀR⁻¹y / n`.
pub fn sigma2_hat(theta: &[f64], data: &Dataset, g: f64) -> Result<f64> {
    let terms = profile_terms(data.inputs(), data.responses(), theta, g)?;
    Ok(terms.quad / data.n() as f64)
}

/// Posterior mean and conditional correlation at a set of points.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorPrediction {
    pub mean: DVector<f64>,
    /// `R(X*,X*) + gI - R(X*,X) R⁻¹ R(X,X*)`, symmetrized with a clamped diagonal.
    pub cond_corr: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    pub point_var: DVector<f64>,
}

impl PosteriorPrediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn point_sd(&self) -> DVector<f64> {
        self.point_var.map(f64::sqrt)
    }
}

/// A GP conditioned on training data at fixed lengthscales.
#[derive(Debug, Clone)]
pub struct GpFit {
    config: KernelConfig,
    inputs: DMatrix<f64>,
    responses: DVector<f64>,
    chol: Cholesky,
    alpha: DVector<f64>,
    sigma2_hat: f64,
    loglik: f64,
}

impl GpFit {
    pub fn new(data: &Dataset, config: KernelConfig) -> Result<Self> {
        Self::from_parts(data.inputs().clone(), data.responses().clone(), config)
    }

    /// Conditions on arbitrary unit-cube inputs and responses (no centering is
    /// applied).
    pub fn from_parts(
        inputs: DMatrix<f64>,
        responses: DVector<f64>,
        config: KernelConfig,
    ) -> Result<Self> {
        if inputs.nrows() != responses.len() {
            return Err(Error::Shape(format!(
                "{} input rows but {} responses",
                inputs.nrows(),
                responses.len()
            )));
        }
        if responses.is_empty() {
            return Err(Error::EmptyData);
        }
        let terms = profile_terms(&inputs, &responses, &config.theta, config.nugget)?;
        let n = responses.len();
        let loglik = loglik_from_terms(&terms, n);
        Ok(Self {
            sigma2_hat: terms.quad / n as f64,
            loglik,
            chol: terms.chol,
            alpha: terms.alpha,
            config,
            inputs,
            responses,
        })
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn theta(&self) -> &[f64] {
        &self.config.theta
    }

    pub fn nugget(&self) -> f64 {
        self.config.nugget
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    pub fn chol(&self) -> &Cholesky {
        &self.chol
    }

    pub fn sigma2_hat(&self) -> f64 {
        self.sigma2_hat
    }

    /// `yᵀR⁻¹y` for the training responses.
    pub fn quad_form(&self) -> f64 {
        self.sigma2_hat * self.responses.len() as f64
    }

    pub fn loglik(&self) -> f64 {
        self.loglik
    }

    pub fn n(&self) -> usize {
        self.responses.len()
    }

    fn check_points(&self, xstar: &DMatrix<f64>) -> Result<()> {
        if xstar.ncols() != self.inputs.ncols() {
            return Err(Error::Shape(format!(
                "prediction points have {} columns, model has {}",
                xstar.ncols(),
                self.inputs.ncols()
            )));
        }
        Ok(())
    }

    /// Full joint posterior at `xstar`.
    pub fn predict(&self, xstar: &DMatrix<f64>) -> Result<PosteriorPrediction> {
        self.check_points(xstar)?;
        let theta = &self.config.theta;
        let g = self.config.nugget;
        let cross = kernel_matrix(xstar, &self.inputs, theta, g, false)?;
        let mean = &cross * &self.alpha;
        let prior = kernel_matrix(xstar, xstar, theta, g, true)?;
        let whitened = self.chol.forward_matrix(&cross.transpose());
        let mut cond = prior - whitened.transpose() * &whitened;
        let m = cond.nrows();
        for i in 0..m {
            for j in (i + 1)..m {
                let avg = 0.5 * (cond[(i, j)] + cond[(j, i)]);
                cond[(i, j)] = avg;
                cond[(j, i)] = avg;
            }
            if cond[(i, i)] < 0.0 {
                cond[(i, i)] = 0.0;
            }
        }
        let cov = &cond * self.sigma2_hat;
        let point_var = cov.diagonal();
        Ok(PosteriorPrediction {
            mean,
            cond_corr: cond,
            cov,
            point_var,
        })
    }

    /// Posterior mean and marginal variance only, without forming the `m × m`
    /// conditional matrix.
    pub fn predict_marginal(&self, xstar: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_points(xstar)?;
        let theta = &self.config.theta;
        let g = self.config.nugget;
        let cross = kernel_matrix(xstar, &self.inputs, theta, g, false)?;
        let mean = &cross * &self.alpha;
        let whitened = self.chol.forward_matrix(&cross.transpose());
        let var = DVector::from_iterator(
            xstar.nrows(),
            whitened
                .column_iter()
                .map(|c| ((1.0 + g) - c.norm_squared()).max(0.0) * self.sigma2_hat),
        );
        Ok((mean, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_dataset() -> Dataset {
        let x: Vec<f64> = (0..6).map(|i| 2.0 * i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        Dataset::from_raw(&DMatrix::from_column_slice(6, 1, &x), &y, &[0.0], &[10.0]).unwrap()
    }

    fn dataset_1d(x: &[f64], y: &[f64]) -> Dataset {
        Dataset::from_raw(
            &DMatrix::from_column_slice(x.len(), 1, x),
            y,
            &[0.0],
            &[1.0],
        )
        .unwrap()
    }

    #[test]
    fn scale_inputs_examples() {
        let raw = DMatrix::from_row_slice(1, 1, &[5.0]);
        assert_eq!(scale_inputs(&raw, &[0.0], &[10.0]).unwrap()[(0, 0)], 0.5);

        let data = sine_dataset();
        let expected = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        for (got, want) in data.inputs().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15);
        }

        let err = scale_inputs(&raw, &[3.0], &[3.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidDesign(_)));
    }

    #[test]
    fn scale_allows_extrapolation() {
        let raw = DMatrix::from_row_slice(2, 1, &[-5.0, 15.0]);
        let s = scale_inputs(&raw, &[0.0], &[10.0]).unwrap();
        assert_eq!(s[(0, 0)], -0.5);
        assert_eq!(s[(1, 0)], 1.5);
    }

    #[test]
    fn center_responses_examples() {
        let (y, m) = center_responses(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(y.as_slice(), &[-1.0, 0.0, 1.0]);

        let (y, m) = center_responses(&[5.0]).unwrap();
        assert_eq!((y[0], m), (0.0, 5.0));

        let (y, m) = center_responses(&[-1.0, 1.0]).unwrap();
        assert_eq!((y.as_slice(), m), (&[-1.0, 1.0][..], 0.0));

        assert!(matches!(
            center_responses(&[]).unwrap_err(),
            Error::EmptyData
        ));
    }

    #[test]
    fn dataset_rejects_training_points_outside_bounds() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 11.0]);
        let err = Dataset::from_raw(&x, &[1.0, 2.0], &[0.0], &[10.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidDesign(_)));
    }

    #[test]
    fn kernel_examples() {
        let a = DMatrix::from_row_slice(1, 1, &[0.3]);
        let k = kernel_matrix(&a, &a, &[2.0], 1e-5, true).unwrap();
        assert_eq!(k[(0, 0)], 1.0 + 1e-5);

        let b = DMatrix::from_row_slice(1, 1, &[1.3]);
        let k = kernel_matrix(&a, &b, &[1.0], 0.0, false).unwrap();
        assert!((k[(0, 0)] - 0.367_879_441_171_442_33).abs() < 1e-10);

        let x1 = DMatrix::from_row_slice(2, 1, &[0.3, 0.5]);
        let x2 = DMatrix::from_row_slice(3, 1, &[0.9, 0.3, 0.1]);
        let k = kernel_matrix(&x1, &x2, &[4.0], 1e-5, false).unwrap();
        assert_eq!(k[(0, 1)], 1.0);
    }

    #[test]
    fn kernel_errors() {
        let a = DMatrix::from_row_slice(1, 2, &[0.3, 0.1]);
        let b = DMatrix::from_row_slice(1, 1, &[0.3]);
        assert!(matches!(
            kernel_matrix(&a, &b, &[1.0, 1.0], 0.0, false).unwrap_err(),
            Error::Shape(_)
        ));
        assert!(matches!(
            kernel_matrix(&a, &a, &[1.0, 0.0], 0.0, false).unwrap_err(),
            Error::Domain(_)
        ));
        assert!(matches!(
            kernel_matrix(&a, &a, &[1.0, -2.0], 0.0, false).unwrap_err(),
            Error::Domain(_)
        ));
    }

    #[test]
    fn kernel_with_nugget_has_eigenvalues_above_nugget() {
        let x = DMatrix::from_row_slice(5, 2, &[0.0, 0.1, 0.2, 0.2, 0.4, 0.9, 0.7, 0.3, 0.95, 0.5]);
        let g = 1e-3;
        let k = kernel_matrix(&x, &x, &[0.01, 0.02], g, true).unwrap();
        let eig = SymmetricEigen::new(k.clone());
        assert!(eig.eigenvalues.min() >= g * (1.0 - 1e-6));
        assert!((k.clone() - k.transpose()).norm() == 0.0);
    }

    #[test]
    fn loglik_scalar_case() {
        let inputs = DMatrix::from_row_slice(1, 1, &[0.5]);
        let c = 3.0_f64;
        let terms = profile_terms(&inputs, &DVector::from_vec(vec![c]), &[1.0], 0.0).unwrap();
        let ll = loglik_from_terms(&terms, 1);
        assert!((ll - (-0.5 * (c * c).ln())).abs() < 1e-14);
    }

    #[test]
    fn loglik_sine_plateau_and_small_theta() {
        let data = sine_dataset();
        let l100 = profile_loglik(&[100.0], &data, DEFAULT_NUGGET).unwrap();
        let l50 = profile_loglik(&[50.0], &data, DEFAULT_NUGGET).unwrap();
        assert!((l100 - l50).abs() < 1.0);
        let small = profile_loglik(&[0.001], &data, DEFAULT_NUGGET).unwrap();
        assert!(small.is_finite());
    }

    #[test]
    fn loglik_failure_reports_theta_and_pivot() {
        // Duplicated input without a nugget makes R singular.
        let data = dataset_1d(&[0.0, 0.5, 0.5, 1.0], &[1.0, 2.0, 2.5, 0.0]);
        match profile_loglik(&[2.0], &data, 0.0).unwrap_err() {
            Error::NotPositiveDefinite { theta, pivot } => {
                assert_eq!(theta, vec![2.0]);
                assert_eq!(pivot, 2);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn mp_matches_exact_when_well_conditioned() {
        let data = sine_dataset();
        for theta in [20.0, 50.0, 100.0] {
            let exact = profile_loglik(&[theta], &data, 0.0).unwrap();
            let mp = profile_loglik_mp(&[theta], &data, 0.0).unwrap();
            assert!(
                ((mp - exact) / exact).abs() < 1e-8,
                "theta {theta}: {mp} vs {exact}"
            );
        }
    }

    #[test]
    fn mp_finite_for_duplicated_input() {
        let data = dataset_1d(&[0.0, 0.5, 0.5, 1.0], &[1.0, 2.0, 2.5, 0.0]);
        assert!(profile_loglik_mp(&[2.0], &data, 1e-10).unwrap().is_finite());
        assert!(profile_loglik_mp(&[2.0], &data, 0.0).unwrap().is_finite());
    }

    #[test]
    fn sigma2_examples() {
        let data = dataset_1d(&[0.0, 0.3, 0.6, 1.0], &[1.0, -2.0, 0.5, 3.0]);
        let y = data.responses();
        let s2 = sigma2_hat(&[1e6], &data, 0.0).unwrap();
        assert!((s2 - y.norm_squared() / 4.0).abs() < 1e-12);

        let inputs = DMatrix::from_row_slice(1, 1, &[0.2]);
        let fit = GpFit::from_parts(
            inputs,
            DVector::from_vec(vec![2.0]),
            KernelConfig::new(vec![1.0], 1e-300).unwrap(),
        )
        .unwrap();
        assert!((fit.sigma2_hat() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn sigma2_small_theta_matches_sherman_morrison_limit() {
        // The J + gI limit needs θ·(max squared distance) well below g.
        let data = sine_dataset();
        let g = DEFAULT_NUGGET;
        let y = data.responses();
        let n = data.n() as f64;
        let centered_ss = y.norm_squared() - y.sum().powi(2) / n;
        let limit = centered_ss / (g * n);
        let s2 = sigma2_hat(&[1e-9], &data, g).unwrap();
        assert!(((s2 - limit) / limit).abs() < 0.02, "{s2} vs {limit}");
    }

    #[test]
    fn predict_two_point_system() {
        // X = (0, 1), y = (-1, 1), θ = 1, g = 0, x* = 0.5: the cross correlations
        // are both e^{-1/4}, so the antisymmetric y gives a zero mean, and the
        // variance is 1 - 2 e^{-1/2} / (1 + e^{-1}).
        let inputs = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let y = DVector::from_vec(vec![-1.0, 1.0]);
        let config = KernelConfig::with_bounds(vec![1.0], 1e-300, 1e-3, 1e3).unwrap();
        let fit = GpFit::from_parts(inputs, y, config).unwrap();
        let pred = fit.predict(&DMatrix::from_row_slice(1, 1, &[0.5])).unwrap();
        assert!(pred.mean[0].abs() < 1e-14);
        let e = std::f64::consts::E;
        let want = 1.0 - 2.0 * e.powf(-0.5) / (1.0 + 1.0 / e);
        assert!((pred.cond_corr[(0, 0)] - want).abs() < 1e-12);
        // σ̂² = yᵀR⁻¹y / 2 with R = [[1, e⁻¹], [e⁻¹, 1]], y = (-1, 1).
        let s2 = (2.0 / (1.0 - 1.0 / e)) / 2.0;
        assert!((fit.sigma2_hat() - s2).abs() < 1e-12);
        assert!((pred.cov[(0, 0)] - s2 * want).abs() < 1e-12);

        // Asymmetric responses: y = (0, 1) gives mean e^{-1/4}/(1 + e^{-1}).
        let inputs = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let config = KernelConfig::with_bounds(vec![1.0], 1e-300, 1e-3, 1e3).unwrap();
        let fit = GpFit::from_parts(inputs, DVector::from_vec(vec![0.0, 1.0]), config).unwrap();
        let pred = fit.predict(&DMatrix::from_row_slice(1, 1, &[0.5])).unwrap();
        let want = e.powf(-0.25) / (1.0 + 1.0 / e);
        assert!((pred.mean[0] - want).abs() < 1e-12);
    }

    #[test]
    fn predict_interpolates_training_point() {
        let data = sine_dataset();
        let fit = GpFit::new(
            &data,
            KernelConfig::new(vec![20.0], DEFAULT_NUGGET).unwrap(),
        )
        .unwrap();
        let y = data.responses();
        let range = y.max() - y.min();
        let pred = fit.predict(data.inputs()).unwrap();
        for i in 0..data.n() {
            assert!((pred.mean[i] - y[i]).abs() <= 1e-3 * range);
        }
    }

    #[test]
    fn predict_large_theta_reverts_to_prior() {
        let data = sine_dataset();
        let fit = GpFit::new(
            &data,
            KernelConfig::with_bounds(vec![1e5], DEFAULT_NUGGET, 1e-3, 1e6).unwrap(),
        )
        .unwrap();
        let xstar = DMatrix::from_row_slice(3, 1, &[0.1, 0.5, 0.9]);
        let pred = fit.predict(&xstar).unwrap();
        assert!(pred.mean.amax() < 1e-12);
        let eye = DMatrix::<f64>::identity(3, 3) * fit.sigma2_hat();
        assert!((&pred.cov - eye).amax() < 1e-4 * fit.sigma2_hat());
    }

    #[test]
    fn predict_shape_error() {
        let data = sine_dataset();
        let fit = GpFit::new(
            &data,
            KernelConfig::new(vec![20.0], DEFAULT_NUGGET).unwrap(),
        )
        .unwrap();
        let bad = DMatrix::from_row_slice(1, 2, &[0.1, 0.2]);
        assert!(matches!(fit.predict(&bad).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn marginal_prediction_matches_full() {
        let data = sine_dataset();
        let fit = GpFit::new(&data, KernelConfig::new(vec![7.0], DEFAULT_NUGGET).unwrap()).unwrap();
        let xstar = DMatrix::from_row_slice(4, 1, &[0.05, 0.33, 0.71, 1.2]);
        let full = fit.predict(&xstar).unwrap();
        let (mean, var) = fit.predict_marginal(&xstar).unwrap();
        assert!((&full.mean - mean).amax() < 1e-12);
        assert!((&full.point_var - var).amax() < 1e-12);
    }

    #[test]
    fn split_recenters_training_rows() {
        let data = sine_dataset();
        let (train, x_out, y_out) = data.split(&[1, 4]).unwrap();
        assert_eq!(train.n(), 4);
        assert!(train.responses().sum().abs() < 1e-12);
        assert_eq!(x_out.nrows(), 2);
        // Natural units survive the shift on both sides.
        let natural = data.natural_responses();
        assert!((train.to_natural(y_out[0]) - natural[1]).abs() < 1e-12);
        assert!((train.to_natural(train.responses()[0]) - natural[0]).abs() < 1e-12);
    }
}
