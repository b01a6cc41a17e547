//! Multistart maximization of the penalized profile likelihood over a box.
//!
//! Each start runs a projected limited-memory BFGS in `u = ln θ`, where the box
//! `[θ_lo, θ_hi]` becomes `[ln θ_lo, ln θ_hi]` and the five-decade range of
//! plausible lengthscales is evenly scaled.

use std::collections::VecDeque;

use log::debug;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StartFailure};
use crate::gp::{Dataset, DEFAULT_THETA_HI, DEFAULT_THETA_LO};
use crate::penalty::{value_and_grad, PenaltySpec};

const MEMORY: usize = 10;
const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
/// Relative objective change below which a run stops, about `1e7·ε`.
const FTOL: f64 = 2.2e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub n_starts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            theta_lo: DEFAULT_THETA_LO,
            theta_hi: DEFAULT_THETA_HI,
            n_starts: 10,
            max_iters: 500,
            grad_tol: 1e-6,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn with_bounds(self, theta_lo: f64, theta_hi: f64) -> Self {
        Self {
            theta_lo,
            theta_hi,
            ..self
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_lo > 0.0 && self.theta_lo < self.theta_hi && self.theta_hi.is_finite()) {
            return Err(Error::Domain(format!(
                "lengthscale bounds must satisfy 0 < lo < hi, got [{}, {}]",
                self.theta_lo, self.theta_hi
            )));
        }
        if self.n_starts == 0 {
            return Err(Error::Domain("n_starts must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Domain(format!(
                "grad_tol must be nonnegative, got {}",
                self.grad_tol
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    /// `Q(θ̂)`.
    pub objective: f64,
    pub start_index: usize,
    pub converged: bool,
    pub n_evals: usize,
    /// `Q` at the winning start's initial point.
    pub initial_objective: f64,
}

/// Mixes a base seed with a list of tags (splitmix64 finalizer per step), so
/// that sub-streams for `(seed, fold, λ)` and the like are independent of the
/// order in which work is scheduled.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}

/// Best of `config.n_starts` local runs from log-uniform starting points.
///
/// Starts whose objective cannot be evaluated are dropped; the call fails only
/// when every start does.
pub fn maximize_penalized(
    data: &Dataset,
    g: f64,
    spec: &PenaltySpec,
    config: &OptimConfig,
) -> Result<FitResult> {
    config.validate()?;
    spec.validate()?;
    let d = data.d();
    let (a, b) = (config.theta_lo.ln(), config.theta_hi.ln());

    let runs: Vec<Result<FitResult, StartFailure>> = (0..config.n_starts)
        .into_par_iter()
        .map(|start| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(start as u64);
            let u0: Vec<f64> = (0..d).map(|_| rng.random_range(a..=b)).collect();
            let theta0: Vec<f64> = u0.iter().map(|u| u.exp()).collect();
            run_local(data, g, spec, config, &u0)
                .map(|mut fit| {
                    fit.start_index = start;
                    fit
                })
                .map_err(|e| StartFailure {
                    start_index: start,
                    initial_theta: theta0,
                    reason: e.to_string(),
                })
        })
        .collect();

    let mut best: Option<FitResult> = None;
    let mut failures = Vec::new();
    for run in runs {
        match run {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.objective > b.objective) {
                    best = Some(fit);
                }
            }
            Err(f) => {
                debug!("start {} failed: {}", f.start_index, f.reason);
                failures.push(f);
            }
        }
    }
    best.ok_or(Error::OptimizationFailed { starts: failures })
}

/// Unpenalized maximum likelihood.
pub fn mle(data: &Dataset, g: f64, config: &OptimConfig) -> Result<FitResult> {
    maximize_penalized(data, g, &PenaltySpec::none(), config)
}

/// One local run from a given starting `θ`, clamped into the box.
pub fn maximize_from(
    data: &Dataset,
    g: f64,
    spec: &PenaltySpec,
    config: &OptimConfig,
    theta0: &[f64],
) -> Result<FitResult> {
    config.validate()?;
    spec.validate()?;
    if theta0.len() != data.d() {
        return Err(Error::Shape(format!(
            "{} starting values for {} dimensions",
            theta0.len(),
            data.d()
        )));
    }
    let (a, b) = (config.theta_lo.ln(), config.theta_hi.ln());
    let u0: Vec<f64> = theta0.iter().map(|t| t.ln().clamp(a, b)).collect();
    run_local(data, g, spec, config, &u0)
}

/// Minimization target `f(u) = -Q(e^u)` with its gradient in `u`.
struct Target<'a> {
    data: &'a Dataset,
    g: f64,
    spec: &'a PenaltySpec,
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
    evals: usize,
}

impl Target<'_> {
    /// Maps `u` to `θ`, returning the bound itself for coordinates sitting on it.
    fn theta(&self, u: &DVector<f64>) -> Vec<f64> {
        u.iter()
            .map(|&v| {
                if v <= self.a {
                    self.lo
                } else if v >= self.b {
                    self.hi
                } else {
                    v.exp()
                }
            })
            .collect()
    }

    /// `None` when the correlation matrix cannot be factorized at `u`.
    fn eval(&mut self, u: &DVector<f64>) -> Result<Option<(f64, DVector<f64>)>> {
        self.evals += 1;
        let theta = self.theta(u);
        match value_and_grad(
            &theta,
            self.data.inputs(),
            self.data.responses(),
            self.g,
            self.spec,
        ) {
            Ok((q, grad)) if q.is_finite() && grad.iter().all(|v| v.is_finite()) => {
                let gu = DVector::from_iterator(
                    theta.len(),
                    theta.iter().zip(grad.iter()).map(|(t, dq)| -t * dq),
                );
                Ok(Some((-q, gu)))
            }
            Ok(_) | Err(Error::NotPositiveDefinite { .. }) | Err(Error::Numeric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn project(&self, u: &mut DVector<f64>) {
        for v in u.iter_mut() {
            *v = v.clamp(self.a, self.b);
        }
    }

    /// `‖P(u - ∇f) - u‖∞`.
    fn projected_grad_norm(&self, u: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        u.iter()
            .zip(grad.iter())
            .map(|(&v, &gv)| ((v - gv).clamp(self.a, self.b) - v).abs())
            .fold(0.0, f64::max)
    }

    /// Coordinates held at a bound because the descent direction points out.
    fn fixed_mask(&self, u: &DVector<f64>, grad: &DVector<f64>) -> Vec<bool> {
        u.iter()
            .zip(grad.iter())
            .map(|(&v, &gv)| (v <= self.a && gv > 0.0) || (v >= self.b && gv < 0.0))
            .collect()
    }
}

fn masked(v: &DVector<f64>, fixed: &[bool]) -> DVector<f64> {
    DVector::from_iterator(
        v.len(),
        v.iter().zip(fixed).map(|(&x, &f)| if f { 0.0 } else { x }),
    )
}

/// Two-loop recursion for `-H∇f` restricted to the free coordinates.
fn lbfgs_direction(
    grad: &DVector<f64>,
    fixed: &[bool],
    memory: &VecDeque<(DVector<f64>, DVector<f64>)>,
) -> DVector<f64> {
    let mut q = masked(grad, fixed);
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let s = masked(s, fixed);
        let y = masked(y, fixed);
        let sy = s.dot(&y);
        if sy <= 0.0 {
            alphas.push(None);
            continue;
        }
        let rho = 1.0 / sy;
        let alpha = rho * s.dot(&q);
        q.axpy(-alpha, &y, 1.0);
        alphas.push(Some((alpha, rho, s, y)));
    }
    if let Some((s, y)) = memory.back() {
        let s = masked(s, fixed);
        let y = masked(y, fixed);
        let yy = y.norm_squared();
        let sy = s.dot(&y);
        if sy > 0.0 && yy > 0.0 {
            q *= sy / yy;
        }
    }
    for entry in alphas.into_iter().rev().flatten() {
        let (alpha, rho, s, y) = entry;
        let beta = rho * y.dot(&q);
        q.axpy(alpha - beta, &s, 1.0);
    }
    -masked(&q, fixed)
}

fn run_local(
    data: &Dataset,
    g: f64,
    spec: &PenaltySpec,
    config: &OptimConfig,
    u0: &[f64],
) -> Result<FitResult> {
    let mut target = Target {
        data,
        g,
        spec,
        lo: config.theta_lo,
        hi: config.theta_hi,
        a: config.theta_lo.ln(),
        b: config.theta_hi.ln(),
        evals: 0,
    };
    let mut u = DVector::from_column_slice(u0);
    target.project(&mut u);
    let (mut f, mut grad) = target.eval(&u)?.ok_or_else(|| {
        Error::Numeric(format!(
            "objective not finite at starting point theta = {:?}",
            target.theta(&u)
        ))
    })?;
    let initial = -f;
    let mut memory: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::with_capacity(MEMORY);
    let mut converged = false;

    for _ in 0..config.max_iters {
        if target.projected_grad_norm(&u, &grad) <= config.grad_tol {
            converged = true;
            break;
        }
        let fixed = target.fixed_mask(&u, &grad);
        let mut dir = lbfgs_direction(&grad, &fixed, &memory);
        if dir.dot(&grad) >= 0.0 {
            memory.clear();
            dir = -masked(&grad, &fixed);
        }
        let mut step = if memory.is_empty() {
            (1.0 / dir.amax()).min(1.0)
        } else {
            1.0
        };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial = &u + &dir * step;
            target.project(&mut trial);
            let delta = &trial - &u;
            if delta.amax() == 0.0 {
                break;
            }
            if let Some((ft, gt)) = target.eval(&trial)? {
                if ft <= f + ARMIJO_C1 * grad.dot(&delta) {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }

        let Some((u_new, f_new, g_new)) = accepted else {
            if memory.is_empty() {
                // Steepest descent cannot make progress either.
                converged = target.projected_grad_norm(&u, &grad) <= config.grad_tol.max(1e-4);
                break;
            }
            memory.clear();
            continue;
        };

        let s = &u_new - &u;
        let y = &g_new - &grad;
        if s.dot(&y) > 1e-12 * s.norm() * y.norm() {
            if memory.len() == MEMORY {
                memory.pop_front();
            }
            memory.push_back((s, y));
        }
        let f_old = f;
        u = u_new;
        f = f_new;
        grad = g_new;
        if (f_old - f) <= FTOL * f_old.abs().max(f.abs()).max(1.0) {
            converged = true;
            break;
        }
    }

    let theta_hat = target.theta(&u);
    Ok(FitResult {
        theta_hat,
        objective: -f,
        start_index: 0,
        converged,
        n_evals: target.evals,
        initial_objective: initial,
    })
}
