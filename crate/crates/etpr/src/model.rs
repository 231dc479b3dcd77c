//! Marginal likelihood, analytic scores and Hessian of the regression
//! model, plus the Gaussian special case.
//!
//! Each curve `i` contributes an EMTD likelihood with mean zero and scale
//! `Sigma_in = K_in + phi I`, where `K_in` is the kernel Gram matrix of the
//! curve's inputs. The scale constraint `omega = nu - 1` is applied
//! globally so that the process variance equals the kernel, giving the
//! covariance parameters the same interpretation in both the heavy-tailed
//! and Gaussian models. `Nu::Infinity` selects the Gaussian model, in which
//! the posterior reweighting factors `s0` and `s1` are exactly one.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::KernelConfig;
use crate::linalg::{cholesky_with_jitter, log_det};
use crate::special::{digamma, ln_gamma};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Smallest admissible excess of a finite `nu` over 1, so that
/// `omega = nu - 1` stays strictly positive.
pub const NU_FLOOR: f64 = 1.0 + 1e-6;

/// One functional replicate: a design matrix and its responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Curve {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::LengthMismatch {
                left: x.nrows(),
                right: y.len(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::InvalidParameter {
                reason: "curve needs at least one observation".into(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }
}

/// A collection of curves sharing one input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    curves: Vec<Curve>,
}

impl Dataset {
    pub fn new(curves: Vec<Curve>) -> Result<Self> {
        if curves.is_empty() {
            return Err(Error::InvalidParameter {
                reason: "dataset needs at least one curve".into(),
            });
        }
        let p = curves[0].x.ncols();
        if p == 0 {
            return Err(Error::InvalidParameter {
                reason: "input dimension must be at least 1".into(),
            });
        }
        if curves.iter().any(|c| c.x.ncols() != p) {
            return Err(Error::InvalidParameter {
                reason: "curves disagree on input dimension".into(),
            });
        }
        Ok(Self { curves })
    }

    pub fn curves(&self) -> &[Curve] {
        &self.curves
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.curves[0].x.ncols()
    }
}

/// Shape parameter: finite (heavy-tailed model) or infinite (Gaussian).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nu {
    Finite(f64),
    Infinity,
}

impl Nu {
    pub fn is_finite(&self) -> bool {
        matches!(self, Nu::Finite(_))
    }

    pub fn value(&self) -> f64 {
        match self {
            Nu::Finite(v) => *v,
            Nu::Infinity => f64::INFINITY,
        }
    }
}

/// Kernel hyperparameters, either one block shared by every curve (the
/// default) or one block per curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelSet {
    Tied(KernelConfig),
    PerCurve(Vec<KernelConfig>),
}

impl KernelSet {
    pub fn for_curve(&self, i: usize) -> &KernelConfig {
        match self {
            KernelSet::Tied(cfg) => cfg,
            KernelSet::PerCurve(cfgs) => &cfgs[i],
        }
    }

    pub fn validate(&self, m: usize, input_dim: usize) -> Result<()> {
        let check = |cfg: &KernelConfig| -> Result<()> {
            cfg.validate()?;
            if cfg.input_dim != input_dim {
                return Err(Error::Dimension {
                    expected: input_dim,
                    got: cfg.input_dim,
                });
            }
            Ok(())
        };
        match self {
            KernelSet::Tied(cfg) => check(cfg),
            KernelSet::PerCurve(cfgs) => {
                if cfgs.len() != m {
                    return Err(Error::LengthMismatch {
                        left: cfgs.len(),
                        right: m,
                    });
                }
                cfgs.iter().try_for_each(check)
            }
        }
    }
}

/// Full parameter vector `beta = (phi, theta_1, ..)` plus the shape `nu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub phi: f64,
    pub kernels: KernelSet,
    pub nu: Nu,
}

impl ModelParams {
    pub fn new(phi: f64, kernels: KernelSet, nu: Nu) -> Result<Self> {
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::InvalidParameter {
                reason: format!("phi must be positive and finite, got {phi}"),
            });
        }
        if let Nu::Finite(v) = nu {
            if !(v > NU_FLOOR) || !v.is_finite() {
                return Err(Error::NuOutOfDomain { nu: v });
            }
        }
        Ok(Self { phi, kernels, nu })
    }

    /// `omega = nu - 1` for the finite-shape model.
    pub fn omega(&self) -> Option<f64> {
        match self.nu {
            Nu::Finite(v) => Some(v - 1.0),
            Nu::Infinity => None,
        }
    }

    /// Same covariance parameters with the shape sent to infinity.
    pub fn to_gaussian(&self) -> ModelParams {
        ModelParams {
            phi: self.phi,
            kernels: self.kernels.clone(),
            nu: Nu::Infinity,
        }
    }

    /// Number of entries in `beta` (phi plus every kernel block).
    pub fn beta_len(&self, m: usize) -> usize {
        1 + match &self.kernels {
            KernelSet::Tied(cfg) => cfg.param_count(),
            KernelSet::PerCurve(cfgs) => {
                debug_assert_eq!(cfgs.len(), m);
                cfgs.iter().map(|c| c.param_count()).sum()
            }
        }
    }

    /// Flattened natural-scale `beta`.
    pub fn beta(&self, m: usize) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.beta_len(m));
        out.push(self.phi);
        match &self.kernels {
            KernelSet::Tied(cfg) => out.extend(cfg.params()),
            KernelSet::PerCurve(cfgs) => {
                for cfg in cfgs {
                    out.extend(cfg.params());
                }
            }
        }
        DVector::from_vec(out)
    }

    /// Rebuild parameters from a flattened natural-scale `beta`.
    pub fn with_beta(&self, beta: &DVector<f64>, m: usize) -> Result<ModelParams> {
        if beta.len() != self.beta_len(m) {
            return Err(Error::LengthMismatch {
                left: beta.len(),
                right: self.beta_len(m),
            });
        }
        let mut kernels = self.kernels.clone();
        let values: Vec<f64> = beta.iter().skip(1).copied().collect();
        match &mut kernels {
            KernelSet::Tied(cfg) => cfg.set_params(&values)?,
            KernelSet::PerCurve(cfgs) => {
                let mut offset = 0;
                for cfg in cfgs.iter_mut() {
                    let len = cfg.param_count();
                    cfg.set_params(&values[offset..offset + len])?;
                    offset += len;
                }
            }
        }
        ModelParams::new(beta[0], kernels, self.nu)
    }

    /// For global beta index `k > 0`, the curves it touches and the
    /// flattened kernel-parameter index within that curve's config.
    fn theta_scope(&self, k: usize, m: usize) -> (ThetaScope, usize) {
        debug_assert!(k >= 1);
        match &self.kernels {
            KernelSet::Tied(_) => (ThetaScope::AllCurves, k - 1),
            KernelSet::PerCurve(cfgs) => {
                let mut offset = k - 1;
                for (i, cfg) in cfgs.iter().enumerate().take(m) {
                    if offset < cfg.param_count() {
                        return (ThetaScope::Curve(i), offset);
                    }
                    offset -= cfg.param_count();
                }
                panic!("beta index {k} out of range");
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ThetaScope {
    AllCurves,
    Curve(usize),
}

impl ThetaScope {
    fn touches(&self, curve: usize) -> bool {
        match self {
            ThetaScope::AllCurves => true,
            ThetaScope::Curve(i) => *i == curve,
        }
    }
}

/// Per-curve factorization and reweighting factors.
pub struct CurveCache {
    /// Cholesky factor of `Sigma_in` (after jitter, if any).
    pub sigma_chol: Cholesky<f64, Dyn>,
    /// `alpha = Sigma_in^{-1} y`.
    pub alpha: DVector<f64>,
    /// `S_i = y' Sigma_in^{-1} y`.
    pub quad: f64,
    /// Score reweighting `(n + 2 nu) / (2 omega + S_i)`; 1 in the Gaussian model.
    pub s1: f64,
    /// Posterior mean of the latent scale `(S_i + 2 omega) / (n + 2 omega)`;
    /// 1 in the Gaussian model.
    pub s0: f64,
}

/// Factorize every curve under the given parameters.
pub fn curve_caches(data: &Dataset, params: &ModelParams) -> Result<Vec<CurveCache>> {
    params
        .kernels
        .validate(data.len(), data.input_dim())?;
    data.curves()
        .par_iter()
        .enumerate()
        .map(|(i, curve)| curve_cache(curve, params, i))
        .collect()
}

fn curve_cache(curve: &Curve, params: &ModelParams, index: usize) -> Result<CurveCache> {
    let n = curve.len();
    let mut sigma = params.kernels.for_curve(index).gram(&curve.x);
    for d in 0..n {
        sigma[(d, d)] += params.phi;
    }
    let chol = cholesky_with_jitter(&sigma)
        .map_err(|e| e.with_curve(index))?
        .chol;
    let alpha = chol.solve(&curve.y);
    let quad = curve.y.dot(&alpha);
    let (s1, s0) = match params.nu {
        Nu::Finite(nu) => {
            let omega = nu - 1.0;
            let nf = n as f64;
            (
                (nf + 2.0 * nu) / (2.0 * omega + quad),
                (quad + 2.0 * omega) / (nf + 2.0 * omega),
            )
        }
        Nu::Infinity => (1.0, 1.0),
    };
    Ok(CurveCache {
        sigma_chol: chol,
        alpha,
        quad,
        s1,
        s0,
    })
}

/// Marginal log-likelihood of `beta` (and `nu`) over all curves.
pub fn log_marginal_likelihood(data: &Dataset, params: &ModelParams) -> Result<f64> {
    let caches = curve_caches(data, params)?;
    Ok(log_likelihood_from_caches(data, params, &caches))
}

pub(crate) fn log_likelihood_from_caches(
    data: &Dataset,
    params: &ModelParams,
    caches: &[CurveCache],
) -> f64 {
    let mut total = 0.0;
    for (curve, cache) in data.curves().iter().zip(caches) {
        let n = curve.len() as f64;
        let ld = log_det(&cache.sigma_chol);
        total += match params.nu {
            Nu::Finite(nu) => {
                let omega = nu - 1.0;
                -0.5 * n * (LN_2PI + omega.ln()) - 0.5 * ld
                    - (0.5 * n + nu) * (cache.quad / (2.0 * omega)).ln_1p()
                    + ln_gamma(0.5 * n + nu)
                    - ln_gamma(nu)
            }
            Nu::Infinity => -0.5 * n * LN_2PI - 0.5 * ld - 0.5 * cache.quad,
        };
    }
    total
}

/// Analytic score in the natural-scale `beta = (phi, theta..)`:
/// entry `k` is `1/2 sum_i Tr((s1_i alpha_i alpha_i' - Sigma_in^{-1})
/// dSigma_in / dbeta_k)`.
pub fn score_beta(data: &Dataset, params: &ModelParams) -> Result<DVector<f64>> {
    let caches = curve_caches(data, params)?;
    Ok(score_beta_from_caches(data, params, &caches))
}

pub(crate) fn score_beta_from_caches(
    data: &Dataset,
    params: &ModelParams,
    caches: &[CurveCache],
) -> DVector<f64> {
    let m = data.len();
    let len = params.beta_len(m);
    let per_curve: Vec<DVector<f64>> = data
        .curves()
        .par_iter()
        .zip(caches.par_iter())
        .enumerate()
        .map(|(i, (curve, cache))| {
            let mut out = DVector::zeros(len);
            let sigma_inv = cache.sigma_chol.inverse();
            // W = s1 alpha alpha' - Sigma^{-1}; dSigma/dphi = I.
            let w = cache.s1 * (&cache.alpha * cache.alpha.transpose()) - &sigma_inv;
            out[0] = 0.5 * w.trace();
            let cfg = params.kernels.for_curve(i);
            for k in 1..len {
                let (scope, local) = params.theta_scope(k, m);
                if !scope.touches(i) {
                    continue;
                }
                let dg = cfg.gram_grad(&curve.x, local);
                out[k] = 0.5 * frob_dot(&w, &dg);
            }
            out
        })
        .collect();
    let mut total = DVector::zeros(len);
    for v in per_curve {
        total += v;
    }
    total
}

/// Analytic score in `nu` for the finite-shape model.
pub fn score_nu(data: &Dataset, params: &ModelParams) -> Result<f64> {
    let nu = match params.nu {
        Nu::Finite(v) if v > 1.0 => v,
        Nu::Finite(v) => return Err(Error::NuOutOfDomain { nu: v }),
        Nu::Infinity => {
            return Err(Error::NuOutOfDomain { nu: f64::INFINITY });
        }
    };
    let caches = curve_caches(data, params)?;
    Ok(score_nu_from_caches(data, nu, &caches))
}

pub(crate) fn score_nu_from_caches(data: &Dataset, nu: f64, caches: &[CurveCache]) -> f64 {
    let omega = nu - 1.0;
    let mut total = 0.0;
    for (curve, cache) in data.curves().iter().zip(caches) {
        let n = curve.len() as f64;
        let s = cache.quad;
        total += -0.5
            * (n / omega + 2.0 * (s / (2.0 * omega)).ln_1p()
                - (n + 2.0 * nu) * s / (2.0 * omega * omega + omega * s)
                - 2.0 * digamma(0.5 * n + nu)
                + 2.0 * digamma(nu));
    }
    total
}

/// Full matrix of second partials of the log-likelihood in the
/// natural-scale `beta`.
///
/// Entry `(k, j)` accumulates, per curve,
///
/// ```text
/// 1/2 Tr(W d2Sigma/dbk dbj) + 1/2 Tr(S^-1 dSj S^-1 dSk)
///   - s1 a' dSj S^-1 dSk a + 1/2 s1^2/(n + 2 nu) (a' dSj a)(a' dSk a)
/// ```
///
/// with `W = s1 a a' - S^-1`; the last term vanishes in the Gaussian model.
pub fn hessian_beta(data: &Dataset, params: &ModelParams) -> Result<DMatrix<f64>> {
    let caches = curve_caches(data, params)?;
    let m = data.len();
    let len = params.beta_len(m);
    let per_curve: Vec<DMatrix<f64>> = data
        .curves()
        .par_iter()
        .zip(caches.par_iter())
        .enumerate()
        .map(|(i, (curve, cache))| hessian_curve(curve, cache, params, i, m, len))
        .collect();
    let mut total = DMatrix::zeros(len, len);
    for h in per_curve {
        total += h;
    }
    Ok(total)
}

fn hessian_curve(
    curve: &Curve,
    cache: &CurveCache,
    params: &ModelParams,
    i: usize,
    m: usize,
    len: usize,
) -> DMatrix<f64> {
    let n = curve.len();
    let nf = n as f64;
    let cfg = params.kernels.for_curve(i);
    let sigma_inv = cache.sigma_chol.inverse();
    let alpha = &cache.alpha;
    let s1 = cache.s1;
    let w = s1 * (alpha * alpha.transpose()) - &sigma_inv;

    // Global beta indices this curve depends on, with their local kernel index
    // (None marks phi).
    let mut active: Vec<(usize, Option<usize>)> = vec![(0, None)];
    for k in 1..len {
        let (scope, local) = params.theta_scope(k, m);
        if scope.touches(i) {
            active.push((k, Some(local)));
        }
    }

    // First derivatives of Sigma and the contractions reused across pairs.
    let derivs: Vec<DMatrix<f64>> = active
        .iter()
        .map(|&(_, local)| match local {
            None => DMatrix::identity(n, n),
            Some(l) => cfg.gram_grad(&curve.x, l),
        })
        .collect();
    let v: Vec<DVector<f64>> = derivs.iter().map(|d| d * alpha).collect();
    let u: Vec<DVector<f64>> = v.iter().map(|vk| cache.sigma_chol.solve(vk)).collect();
    let t: Vec<f64> = v.iter().map(|vk| alpha.dot(vk)).collect();
    let w_mats: Vec<DMatrix<f64>> = derivs.iter().map(|d| &sigma_inv * d).collect();

    let quad_weight = match params.nu {
        Nu::Finite(nu) => 0.5 * s1 * s1 / (nf + 2.0 * nu),
        Nu::Infinity => 0.0,
    };

    let mut out = DMatrix::zeros(len, len);
    for (a, &(ka, la)) in active.iter().enumerate() {
        for (b, &(kb, lb)) in active.iter().enumerate().skip(a) {
            let mut h = 0.0;
            // Second derivative of Sigma vanishes unless both indices are
            // kernel parameters.
            if let (Some(la), Some(lb)) = (la, lb) {
                let d2 = cfg.gram_second(&curve.x, la, lb);
                h += 0.5 * frob_dot(&w, &d2);
            }
            h += 0.5 * trace_product(&w_mats[a], &w_mats[b]);
            h -= s1 * v[a].dot(&u[b]);
            h += quad_weight * t[a] * t[b];
            out[(ka, kb)] += h;
            if ka != kb {
                out[(kb, ka)] += h;
            }
        }
    }
    out
}

/// Sum of the elementwise product of two equally sized matrices.
fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `Tr(A B)` for square matrices.
fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for r in 0..n {
        for c in 0..n {
            acc += a[(r, c)] * b[(c, r)];
        }
    }
    acc
}

/// One row of the influence sweep: the perturbation magnitude and the score
/// norms of the heavy-tailed and Gaussian models evaluated at the same
/// covariance parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InfluenceRow {
    pub magnitude: f64,
    pub etpr_score_norm: f64,
    pub gpr_score_norm: f64,
}

/// Replace the response at `(curve, point)` by each magnitude and evaluate
/// both score norms.
///
/// Bounded kernels are required: the boundedness of the heavy-tailed score
/// only holds when `sup k` is finite, so configurations containing the
/// linear family are rejected.
pub fn bounded_influence_probe(
    data: &Dataset,
    params: &ModelParams,
    curve: usize,
    point: usize,
    magnitudes: &[f64],
) -> Result<Vec<InfluenceRow>> {
    if curve >= data.len() {
        return Err(Error::Index {
            reason: format!("curve {curve} out of range for {} curves", data.len()),
        });
    }
    if point >= data.curves()[curve].len() {
        return Err(Error::Index {
            reason: format!("point {point} out of range"),
        });
    }
    for i in 0..data.len() {
        if !params.kernels.for_curve(i).is_bounded() {
            return Err(Error::InvalidOptions {
                reason: "influence probe requires a bounded kernel (no linear term)".into(),
            });
        }
    }
    if !params.nu.is_finite() {
        return Err(Error::NuOutOfDomain { nu: f64::INFINITY });
    }
    let gaussian = params.to_gaussian();
    let mut rows = Vec::with_capacity(magnitudes.len());
    for &magnitude in magnitudes {
        let mut perturbed = data.clone();
        perturbed.curves[curve].y[point] = magnitude;
        let etpr = score_beta(&perturbed, params)?.norm();
        let gpr = score_beta(&perturbed, &gaussian)?.norm();
        rows.push(InfluenceRow {
            magnitude,
            etpr_score_norm: etpr,
            gpr_score_norm: gpr,
        });
    }
    Ok(rows)
}
