//! Maximum-likelihood fitting.
//!
//! Hyperparameters are optimized on the log scale (so positivity never
//! binds) with a BFGS ascent driven by the analytic scores and a cubic
//! strong-Wolfe line search. With one curve the shape `nu` is not
//! identifiable and must be fixed (the convention is 1.05); with several
//! curves it can be estimated jointly, reparameterized as
//! `nu = 1 + 1e-6 + exp(z)`.
//!
//! Multi-start: restart 0 uses a deterministic data-driven initialization,
//! the rest draw log-uniform hyperparameters in `[1e-3, 1e2]` with
//! amplitude-like entries scaled by the pooled response variance. The best
//! restart by final likelihood wins; everything is deterministic given the
//! seed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::model::{
    curve_caches, hessian_beta, log_likelihood_from_caches, score_beta_from_caches,
    score_nu_from_caches, CurveCache, Dataset, KernelSet, ModelParams, Nu, NU_FLOOR,
};
use crate::rng::stream;

/// Which model family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Etpr,
    Gpr,
}

/// Whether the shape parameter is pinned or estimated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NuPolicy {
    Fixed(f64),
    Estimate,
}

/// Kernel hyperparameter tying across curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaTie {
    Tied,
    Untied,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub mode: Mode,
    pub nu_policy: NuPolicy,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub restarts: usize,
    pub seed: u64,
    pub tie: ThetaTie,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            mode: Mode::Etpr,
            nu_policy: NuPolicy::Fixed(1.05),
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            restarts: 5,
            seed: 0,
            tie: ThetaTie::Tied,
        }
    }
}

/// A fitted model: estimated parameters, the per-curve factorizations, and
/// convergence metadata. Holds a copy of the training data so predictions
/// can be formed later.
pub struct FittedModel {
    pub params: ModelParams,
    pub data: Dataset,
    pub caches: Vec<CurveCache>,
    /// Natural-scale standard errors aligned with `beta = (phi, theta..)`;
    /// absent when the negative Hessian is not positive definite.
    pub std_errors: Option<DVector<f64>>,
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub log_likelihood: f64,
    pub warnings: Vec<String>,
}

impl FittedModel {
    pub fn summary(&self) -> FitSummary {
        FitSummary {
            nu: self.params.nu,
            phi: self.params.phi,
            kernels: self.params.kernels.clone(),
            log_likelihood: self.log_likelihood,
            converged: self.converged,
            final_gradient_norm: self.final_gradient_norm,
            std_errors: self
                .std_errors
                .as_ref()
                .map(|v| v.iter().copied().collect()),
            warnings: self.warnings.clone(),
        }
    }
}

/// Serializable fit summary (natural-scale parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub nu: Nu,
    pub phi: f64,
    pub kernels: KernelSet,
    pub log_likelihood: f64,
    pub converged: bool,
    pub final_gradient_norm: f64,
    pub std_errors: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

/// Maximize the marginal likelihood.
///
/// Returns the best multi-start iterate even when the gradient tolerance
/// was not reached (`converged = false`); hard errors only arise when no
/// restart produced a single valid evaluation.
pub fn fit(data: &Dataset, kernel: &KernelConfig, opts: &FitOptions) -> Result<FittedModel> {
    validate_options(data, opts)?;
    kernel.validate()?;
    if kernel.input_dim != data.input_dim() {
        return Err(Error::Dimension {
            expected: data.input_dim(),
            got: kernel.input_dim,
        });
    }

    let map = ParamMap::new(data, kernel, opts);
    let var_y = pooled_variance(data);

    let results: Vec<Option<BfgsOutcome>> = (0..opts.restarts)
        .into_par_iter()
        .map(|restart| {
            let z0 = map.initial_point(restart, opts.seed, var_y);
            let mut outcome = bfgs(
                |z| map.evaluate(data, z),
                z0,
                opts.max_iterations,
                opts.gradient_tolerance,
            )?;
            // Quasi-Newton stalls once the gradient reaches line-search
            // precision; a few Newton steps on the analytic curvature close
            // the remaining gap (beta-only fits; the nu block has no
            // analytic second derivatives).
            if !map.estimate_nu {
                newton_polish(data, &map, &mut outcome, opts.gradient_tolerance);
            }
            Some(outcome)
        })
        .collect();

    let best = results
        .into_iter()
        .flatten()
        .min_by(|a, b| a.f.total_cmp(&b.f))
        .ok_or_else(|| Error::Numerical {
            reason: "no restart produced a valid likelihood evaluation".into(),
        })?;

    let params = map.params_from(&best.z)?;
    let caches = curve_caches(data, &params)?;
    let log_likelihood = log_likelihood_from_caches(data, &params, &caches);
    let mut warnings = Vec::new();
    if !best.converged {
        warnings.push(format!(
            "gradient tolerance not reached: max-norm {} after {} iterations",
            best.grad_norm, best.iterations
        ));
    }
    let std_errors = match standard_errors_for(data, &params) {
        Ok(se) => Some(se),
        Err(Error::HessianNotPd) => {
            warnings
                .push("negative Hessian not positive definite; standard errors omitted".into());
            None
        }
        Err(e) => return Err(e),
    };
    Ok(FittedModel {
        params,
        data: data.clone(),
        caches,
        std_errors,
        converged: best.converged,
        final_gradient_norm: best.grad_norm,
        log_likelihood,
        warnings,
    })
}

fn validate_options(data: &Dataset, opts: &FitOptions) -> Result<()> {
    if opts.restarts == 0 || opts.max_iterations == 0 {
        return Err(Error::InvalidOptions {
            reason: "restarts and max_iterations must be at least 1".into(),
        });
    }
    if !(opts.gradient_tolerance > 0.0) {
        return Err(Error::InvalidOptions {
            reason: "gradient_tolerance must be positive".into(),
        });
    }
    match (opts.mode, opts.nu_policy) {
        (Mode::Gpr, NuPolicy::Estimate) => Err(Error::InvalidOptions {
            reason: "the Gaussian model has no shape parameter to estimate".into(),
        }),
        (Mode::Etpr, NuPolicy::Estimate) if data.len() == 1 => Err(Error::InvalidOptions {
            reason: "nu is not estimable from a single curve; fix it (conventionally 1.05)"
                .into(),
        }),
        (Mode::Etpr, NuPolicy::Fixed(v)) if !(v > NU_FLOOR) => Err(Error::InvalidOptions {
            reason: format!("fixed nu must exceed {NU_FLOOR}, got {v}"),
        }),
        _ => Ok(()),
    }
}

/// Mapping between the optimizer's log-scale vector and model parameters.
struct ParamMap {
    template: ModelParams,
    m: usize,
    beta_len: usize,
    estimate_nu: bool,
}

impl ParamMap {
    fn new(data: &Dataset, kernel: &KernelConfig, opts: &FitOptions) -> Self {
        let kernels = match opts.tie {
            ThetaTie::Tied => KernelSet::Tied(kernel.clone()),
            ThetaTie::Untied => KernelSet::PerCurve(vec![kernel.clone(); data.len()]),
        };
        let nu = match (opts.mode, opts.nu_policy) {
            (Mode::Gpr, _) => Nu::Infinity,
            (Mode::Etpr, NuPolicy::Fixed(v)) => Nu::Finite(v),
            (Mode::Etpr, NuPolicy::Estimate) => Nu::Finite(3.0),
        };
        let template = ModelParams {
            phi: 1.0,
            kernels,
            nu,
        };
        let m = data.len();
        let beta_len = template.beta_len(m);
        ParamMap {
            template,
            m,
            beta_len,
            estimate_nu: matches!(
                (opts.mode, opts.nu_policy),
                (Mode::Etpr, NuPolicy::Estimate)
            ),
        }
    }

    fn dim(&self) -> usize {
        self.beta_len + usize::from(self.estimate_nu)
    }

    fn params_from(&self, z: &DVector<f64>) -> Result<ModelParams> {
        let beta = DVector::from_iterator(
            self.beta_len,
            z.iter().take(self.beta_len).map(|v| v.exp()),
        );
        if beta.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Numerical {
                reason: "parameter overflow in log-scale transform".into(),
            });
        }
        let mut params = self.template.with_beta(&beta, self.m)?;
        if self.estimate_nu {
            let nu = 1.0 + 1e-6 + z[self.beta_len].exp();
            if !nu.is_finite() {
                return Err(Error::Numerical {
                    reason: "nu overflow in log-scale transform".into(),
                });
            }
            params.nu = Nu::Finite(nu);
        }
        Ok(params)
    }

    /// Negative log-likelihood and its gradient in `z`.
    fn evaluate(&self, data: &Dataset, z: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let params = self.params_from(z).ok()?;
        let caches = curve_caches(data, &params).ok()?;
        let ll = log_likelihood_from_caches(data, &params, &caches);
        if !ll.is_finite() {
            return None;
        }
        let score = score_beta_from_caches(data, &params, &caches);
        let mut grad = DVector::zeros(self.dim());
        for k in 0..self.beta_len {
            grad[k] = -score[k] * z[k].exp();
        }
        if self.estimate_nu {
            let nu = match params.nu {
                Nu::Finite(v) => v,
                Nu::Infinity => unreachable!(),
            };
            let snu = score_nu_from_caches(data, nu, &caches);
            grad[self.beta_len] = -snu * z[self.beta_len].exp();
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return None;
        }
        Some((-ll, grad))
    }

    fn initial_point(&self, restart: usize, seed: u64, var_y: f64) -> DVector<f64> {
        let scale = var_y.max(1e-12);
        let mut z = DVector::zeros(self.dim());
        if restart == 0 {
            // Deterministic data-driven start: noise at a tenth of the
            // response variance, amplitudes at the variance, the rest at 1.
            z[0] = (0.1 * scale).ln();
            for (k, is_amp) in self.amplitude_flags().iter().enumerate() {
                z[1 + k] = if *is_amp { scale.ln() } else { 0.0 };
            }
            if self.estimate_nu {
                z[self.beta_len] = 2.0f64.ln(); // nu near 3
            }
            return z;
        }
        let mut rng = stream(seed, restart as u64);
        let lo = 1e-3f64.ln();
        let hi = 1e2f64.ln();
        z[0] = rng.gen_range(lo..hi) + scale.ln();
        for (k, is_amp) in self.amplitude_flags().iter().enumerate() {
            let base = rng.gen_range(lo..hi);
            z[1 + k] = if *is_amp { base + scale.ln() } else { base };
        }
        if self.estimate_nu {
            z[self.beta_len] = rng.gen_range(0.2f64.ln()..20f64.ln());
        }
        z
    }

    /// One flag per kernel hyperparameter (flattened across curve blocks):
    /// true when the parameter is a pure amplitude.
    fn amplitude_flags(&self) -> Vec<bool> {
        let per_config = |cfg: &KernelConfig| -> Vec<bool> {
            let mut flags = Vec::with_capacity(cfg.param_count());
            for term in &cfg.terms {
                let amp = term.amplitude_indices();
                for i in 0..term.params.len() {
                    flags.push(amp.contains(&i));
                }
            }
            flags
        };
        match &self.template.kernels {
            KernelSet::Tied(cfg) => per_config(cfg),
            KernelSet::PerCurve(cfgs) => cfgs.iter().flat_map(per_config).collect(),
        }
    }
}

fn pooled_variance(data: &Dataset) -> f64 {
    let mut count = 0.0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for curve in data.curves() {
        for &v in curve.y.iter() {
            count += 1.0;
            sum += v;
            sum_sq += v * v;
        }
    }
    let mean = sum / count;
    (sum_sq / count - mean * mean).max(0.0)
}

struct BfgsOutcome {
    z: DVector<f64>,
    f: f64,
    grad: DVector<f64>,
    grad_norm: f64,
    converged: bool,
    iterations: usize,
}

/// Newton refinement in the log-parameter space, using the analytic
/// Hessian mapped through the chain rule. Gives quadratic convergence to
/// the stationary point once BFGS has brought the iterate close.
fn newton_polish(data: &Dataset, map: &ParamMap, outcome: &mut BfgsOutcome, tol: f64) {
    for _ in 0..12 {
        if outcome.grad_norm <= tol * 1e-3 {
            break;
        }
        let params = match map.params_from(&outcome.z) {
            Ok(p) => p,
            Err(_) => break,
        };
        let (h_nat, caches) = match (hessian_beta(data, &params), curve_caches(data, &params)) {
            (Ok(h), Ok(c)) => (h, c),
            _ => break,
        };
        let score = score_beta_from_caches(data, &params, &caches);
        let beta = params.beta(map.m);
        let p = beta.len();
        // f = -l, so the Newton matrix is -H_log with
        // H_log = D H D + diag(beta .* score), D = diag(beta).
        let mut a = DMatrix::zeros(p, p);
        for k in 0..p {
            for j in 0..p {
                let mut v = beta[k] * h_nat[(k, j)] * beta[j];
                if k == j {
                    v += beta[k] * score[k];
                }
                a[(k, j)] = -v;
            }
        }
        let chol = match nalgebra::Cholesky::new(a) {
            Some(c) => c,
            None => break, // not in the concave basin; keep the BFGS point
        };
        let step = chol.solve(&outcome.grad);
        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..6 {
            let candidate = &outcome.z - &step * scale;
            if let Some((fc, gc)) = map.evaluate(data, &candidate) {
                let better_f = fc <= outcome.f + 1e-10 * (1.0 + outcome.f.abs());
                let better_g = gc.amax() < outcome.grad_norm;
                if better_f && (fc < outcome.f || better_g) {
                    outcome.z = candidate;
                    outcome.f = fc;
                    outcome.grad_norm = gc.amax();
                    outcome.grad = gc;
                    accepted = true;
                    break;
                }
            }
            scale *= 0.25;
        }
        if !accepted {
            break;
        }
    }
    if outcome.grad_norm <= tol {
        outcome.converged = true;
    }
}

/// Dense BFGS minimization with a strong-Wolfe cubic line search.
///
/// `eval` returns `None` for infeasible points (failed factorization or
/// overflow); the line search treats those as infinitely bad and shrinks.
fn bfgs<F>(eval: F, z0: DVector<f64>, max_iter: usize, tol: f64) -> Option<BfgsOutcome>
where
    F: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let n = z0.len();
    let (mut f, mut g) = eval(&z0)?;
    let mut z = z0;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..max_iter {
        iterations = iter;
        if g.amax() <= tol {
            converged = true;
            break;
        }
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            // Curvature information went bad; fall back to steepest descent.
            h = DMatrix::identity(n, n);
            first_update = true;
            dir = -g.clone();
        }
        let ls = match line_search(&eval, &z, &dir, f, g.dot(&dir)) {
            Some(ls) => ls,
            None => {
                if first_update {
                    break; // no progress possible along the gradient
                }
                h = DMatrix::identity(n, n);
                first_update = true;
                let dir = -g.clone();
                match line_search(&eval, &z, &dir, f, g.dot(&dir)) {
                    Some(ls) => ls,
                    None => break,
                }
            }
        };
        let step = &ls.z - &z;
        let y = &ls.grad - &g;
        let sy = step.dot(&y);
        if sy > 1e-12 * step.norm() * y.norm() {
            if first_update {
                // Scale the initial inverse Hessian to the secant pair.
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H <- (I - rho s y') H (I - rho y s') + rho s s'
            let s_hy = &step * hy.transpose();
            h = h - (&s_hy + s_hy.transpose()) * rho
                + (&step * step.transpose()) * (rho * rho * yhy + rho);
        }
        z = ls.z;
        f = ls.f;
        g = ls.grad;
    }
    if g.amax() <= tol {
        converged = true;
    }
    Some(BfgsOutcome {
        grad_norm: g.amax(),
        z,
        f,
        grad: g,
        converged,
        iterations,
    })
}

struct LineSearchResult {
    z: DVector<f64>,
    f: f64,
    grad: DVector<f64>,
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;

fn line_search<F>(
    eval: &F,
    x: &DVector<f64>,
    dir: &DVector<f64>,
    f0: f64,
    dphi0: f64,
) -> Option<LineSearchResult>
where
    F: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    if dphi0 >= 0.0 {
        return None;
    }
    let mut alpha_prev = 0.0;
    let mut f_prev = f0;
    let mut dphi_prev = dphi0;
    let mut alpha = 1.0;
    const ALPHA_MAX: f64 = 64.0;

    for i in 0..12 {
        let zt = x + dir * alpha;
        match eval(&zt) {
            None => {
                // Infeasible: zoom toward the last good point.
                return zoom(
                    eval,
                    x,
                    dir,
                    f0,
                    dphi0,
                    alpha_prev,
                    f_prev,
                    dphi_prev,
                    alpha,
                    f64::INFINITY,
                    f64::NAN,
                );
            }
            Some((ft, gt)) => {
                let dt = gt.dot(dir);
                if ft > f0 + WOLFE_C1 * alpha * dphi0 || (i > 0 && ft >= f_prev) {
                    return zoom(
                        eval, x, dir, f0, dphi0, alpha_prev, f_prev, dphi_prev, alpha, ft, dt,
                    );
                }
                if dt.abs() <= -WOLFE_C2 * dphi0 {
                    return Some(LineSearchResult {
                        z: zt,
                        f: ft,
                        grad: gt,
                    });
                }
                if dt >= 0.0 {
                    return zoom(
                        eval, x, dir, f0, dphi0, alpha, ft, dt, alpha_prev, f_prev, dphi_prev,
                    );
                }
                if alpha >= ALPHA_MAX {
                    // Still descending at the cap; accept the cap point.
                    return Some(LineSearchResult {
                        z: zt,
                        f: ft,
                        grad: gt,
                    });
                }
                alpha_prev = alpha;
                f_prev = ft;
                dphi_prev = dt;
                alpha = (2.0 * alpha).min(ALPHA_MAX);
            }
        }
    }
    None
}

/// Zoom phase between a good endpoint `lo` and a bad endpoint `hi`
/// (`f_hi` may be infinite when `hi` is infeasible).
#[allow(clippy::too_many_arguments)]
fn zoom<F>(
    eval: &F,
    x: &DVector<f64>,
    dir: &DVector<f64>,
    f0: f64,
    dphi0: f64,
    mut lo: f64,
    mut f_lo: f64,
    mut d_lo: f64,
    mut hi: f64,
    mut f_hi: f64,
    mut d_hi: f64,
) -> Option<LineSearchResult>
where
    F: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let mut fallback: Option<LineSearchResult> = None;
    for _ in 0..30 {
        let span = hi - lo;
        if span.abs() < 1e-16 * (1.0 + lo.abs()) {
            break;
        }
        let mut alpha = if f_hi.is_finite() && d_hi.is_finite() {
            cubic_minimizer(lo, f_lo, d_lo, hi, f_hi, d_hi)
        } else {
            f64::NAN
        };
        let lo_guard = lo + 0.1 * span;
        let hi_guard = hi - 0.1 * span;
        if !alpha.is_finite() || (alpha - lo_guard) * (alpha - hi_guard) > 0.0 {
            alpha = lo + 0.5 * span;
        }
        let zt = x + dir * alpha;
        match eval(&zt) {
            None => {
                hi = alpha;
                f_hi = f64::INFINITY;
                d_hi = f64::NAN;
            }
            Some((ft, gt)) => {
                let dt = gt.dot(dir);
                if ft > f0 + WOLFE_C1 * alpha * dphi0 || ft >= f_lo {
                    hi = alpha;
                    f_hi = ft;
                    d_hi = dt;
                } else {
                    if ft < f0 {
                        fallback = Some(LineSearchResult {
                            z: zt.clone(),
                            f: ft,
                            grad: gt.clone(),
                        });
                    }
                    if dt.abs() <= -WOLFE_C2 * dphi0 {
                        return Some(LineSearchResult {
                            z: zt,
                            f: ft,
                            grad: gt,
                        });
                    }
                    if dt * span >= 0.0 {
                        hi = lo;
                        f_hi = f_lo;
                        d_hi = d_lo;
                    }
                    lo = alpha;
                    f_lo = ft;
                    d_lo = dt;
                }
            }
        }
    }
    // No strong-Wolfe point located; fall back to the best sufficient
    // decrease seen so the outer loop can still make progress.
    fallback
}

fn cubic_minimizer(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return f64::NAN;
    }
    let d2 = disc.sqrt().copysign(b - a);
    b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2)
}

/// Standard errors of `beta` on the natural scale.
///
/// The curvature is assembled analytically, moved to the log scale where
/// the optimizer works (`H_log = D H D + diag(beta .* score)` with
/// `D = diag(beta)`), inverted through its Cholesky factor, and mapped
/// back by the delta method.
pub fn standard_errors(model: &FittedModel) -> Result<DVector<f64>> {
    standard_errors_for(&model.data, &model.params)
}

fn standard_errors_for(data: &Dataset, params: &ModelParams) -> Result<DVector<f64>> {
    let m = data.len();
    let beta = params.beta(m);
    let h_nat = hessian_beta(data, params)?;
    let caches = curve_caches(data, params)?;
    let score = score_beta_from_caches(data, params, &caches);
    let p = beta.len();
    let mut neg_h_log = DMatrix::zeros(p, p);
    for k in 0..p {
        for j in 0..p {
            let mut v = beta[k] * h_nat[(k, j)] * beta[j];
            if k == j {
                v += beta[k] * score[k];
            }
            neg_h_log[(k, j)] = -v;
        }
    }
    let chol = nalgebra::Cholesky::new(neg_h_log).ok_or(Error::HessianNotPd)?;
    let cov = chol.inverse();
    let mut se = DVector::zeros(p);
    for k in 0..p {
        let v = cov[(k, k)];
        if v < 0.0 {
            return Err(Error::HessianNotPd);
        }
        se[k] = beta[k] * v.sqrt();
    }
    Ok(se)
}

/// One row of a shape-parameter profile.
#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub nu: f64,
    /// Maximized log-likelihood over `beta` at this `nu`; `None` marks a
    /// failed inner fit.
    pub log_likelihood: Option<f64>,
    pub error: Option<String>,
}

/// Profile the likelihood over a grid of `nu` values, refitting `beta` at
/// each grid point. Failed cells are marked, not dropped.
pub fn profile_nu(
    data: &Dataset,
    kernel: &KernelConfig,
    opts: &FitOptions,
    grid: &[f64],
) -> Vec<ProfilePoint> {
    grid.par_iter()
        .map(|&nu| {
            let mut point_opts = *opts;
            point_opts.mode = Mode::Etpr;
            point_opts.nu_policy = NuPolicy::Fixed(nu);
            match fit(data, kernel, &point_opts) {
                Ok(model) => ProfilePoint {
                    nu,
                    log_likelihood: Some(model.log_likelihood),
                    error: None,
                },
                Err(e) => ProfilePoint {
                    nu,
                    log_likelihood: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{se_plus_lin, KernelTerm};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn toy_data(seed: u64, n: usize) -> Dataset {
        // A smooth function plus noise; enough structure to fit against.
        let mut rng = stream(seed, 0);
        let xs: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 / (n - 1) as f64).collect();
        let y = DVector::from_iterator(
            n,
            xs.iter()
                .map(|&x| (2.0 * x).sin() + 0.1 * rng.gen_range(-1.0..1.0)),
        );
        let x = DMatrix::from_column_slice(n, 1, &xs);
        Dataset::new(vec![crate::model::Curve::new(x, y).unwrap()]).unwrap()
    }

    #[test]
    fn rejects_nu_estimation_with_one_curve() {
        let data = toy_data(1, 8);
        let kernel = se_plus_lin(1, vec![1.0, 1.0], vec![1.0]).unwrap();
        let opts = FitOptions {
            nu_policy: NuPolicy::Estimate,
            ..Default::default()
        };
        assert!(matches!(
            fit(&data, &kernel, &opts),
            Err(Error::InvalidOptions { .. })
        ));
    }

    #[test]
    fn rejects_gpr_with_nu_estimation() {
        let data = toy_data(1, 8);
        let kernel = se_plus_lin(1, vec![1.0, 1.0], vec![1.0]).unwrap();
        let opts = FitOptions {
            mode: Mode::Gpr,
            nu_policy: NuPolicy::Estimate,
            ..Default::default()
        };
        assert!(fit(&data, &kernel, &opts).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let data = toy_data(3, 12);
        let kernel = se_plus_lin(1, vec![1.0, 1.0], vec![1.0]).unwrap();
        let opts = FitOptions {
            restarts: 3,
            max_iterations: 120,
            ..Default::default()
        };
        let a = fit(&data, &kernel, &opts).unwrap();
        let b = fit(&data, &kernel, &opts).unwrap();
        assert_eq!(a.params.phi.to_bits(), b.params.phi.to_bits());
        assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
        let ba: Vec<u64> = a.params.beta(1).iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u64> = b.params.beta(1).iter().map(|v| v.to_bits()).collect();
        assert_eq!(ba, bb);
    }

    #[test]
    fn bfgs_solves_quadratic() {
        let eval = |z: &DVector<f64>| {
            let f = 3.0 * (z[0] - 1.0).powi(2) + 0.5 * (z[1] + 2.0).powi(2);
            let g = DVector::from_vec(vec![6.0 * (z[0] - 1.0), z[1] + 2.0]);
            Some((f, g))
        };
        let out = bfgs(eval, DVector::from_vec(vec![5.0, 5.0]), 100, 1e-10).unwrap();
        assert!(out.converged);
        assert_relative_eq!(out.z[0], 1.0, epsilon = 1e-7);
        assert_relative_eq!(out.z[1], -2.0, epsilon = 1e-7);
    }

    #[test]
    fn bfgs_handles_infeasible_regions() {
        // Objective undefined for z[0] > 2; the search must stay inside.
        let eval = |z: &DVector<f64>| {
            if z[0] > 2.0 {
                return None;
            }
            let f = (z[0] - 1.0).powi(2);
            let g = DVector::from_vec(vec![2.0 * (z[0] - 1.0)]);
            Some((f, g))
        };
        let out = bfgs(eval, DVector::from_vec(vec![-6.0]), 100, 1e-10).unwrap();
        assert_relative_eq!(out.z[0], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn profile_degenerate_grid_matches_fixed_fit() {
        let data = toy_data(5, 10);
        let kernel = se_plus_lin(1, vec![1.0, 1.0], vec![1.0]).unwrap();
        let opts = FitOptions {
            restarts: 2,
            max_iterations: 150,
            ..Default::default()
        };
        let profile = profile_nu(&data, &kernel, &opts, &[1.05]);
        let direct = fit(&data, &kernel, &opts).unwrap();
        assert_relative_eq!(
            profile[0].log_likelihood.unwrap(),
            direct.log_likelihood,
            epsilon = 1e-9
        );
    }

    #[test]
    fn scalar_hessian_closed_form() {
        // n = 1, zero kernel: l(phi) has a hand-computable second derivative.
        let data = Dataset::new(vec![crate::model::Curve::new(
            DMatrix::from_column_slice(1, 1, &[0.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap()])
        .unwrap();
        let cfg =
            KernelConfig::new(1, vec![KernelTerm::squared_exp(vec![1e-300, 1.0])]).unwrap();
        let nu = 1.05f64;
        let omega = nu - 1.0;
        let phi = 0.8f64;
        let params =
            ModelParams::new(phi, KernelSet::Tied(cfg), Nu::Finite(nu)).unwrap();
        // l(phi) = c - (1/2) ln phi - (1/2 + nu) ln(1 + y^2 / (2 omega phi)),
        // differentiated twice by hand at y = 1.
        let a: f64 = 1.0 / (2.0 * omega);
        let d2 = 0.5 / (phi * phi)
            - (0.5 + nu) * (2.0 * a * phi + a * a) / (phi * phi + a * phi).powi(2);
        let h = hessian_beta(&data, &params).unwrap();
        assert_relative_eq!(h[(0, 0)], d2, max_relative = 1e-9);
    }
}
