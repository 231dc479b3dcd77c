//! Predictive means, variances and intervals for the latent function and
//! for new responses, per curve.
//!
//! Conditioning `n` training points turns the prior shape `(nu, nu - 1)`
//! into `(n/2 + nu, n/2 + nu - 1)`, and the predictive law of `f(u)` stays
//! in the EMTD family with
//!
//! ```text
//! mean     = k_u' Sigma^{-1} y
//! variance = s0 * (k(u, u) - k_u' Sigma^{-1} k_u)        (latent f)
//!          = s0 * (k(u, u) - k_u' Sigma^{-1} k_u + phi)  (response y)
//! ```
//!
//! where `s0` is the posterior mean of the latent scale. The mean is the
//! BLUP and does not depend on `nu`; the variances do, through `s0`.
//!
//! A scalar EMTD `(nu*, omega*, mu, sigma)` variate standardizes as
//! `(f - mu) / sqrt(sigma * omega* / nu*) ~ Student-t(2 nu*)`, so interval
//! endpoints come from Student-t quantiles with `2 nu* = n + 2 nu` degrees
//! of freedom. In the Gaussian model `s0 = 1`, the degrees of freedom are
//! reported as infinite and normal quantiles are used.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::estimate::FittedModel;
use crate::model::Nu;

/// Prediction at a single query point.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Prediction {
    pub mean: f64,
    /// Predictive variance of the latent function value.
    pub f_variance: f64,
    /// Predictive variance of a new response: `f_variance + s0 * phi`.
    pub y_variance: f64,
    /// Posterior mean of the latent scale for this curve.
    pub s0: f64,
    /// Student degrees of freedom of the predictive law (`n + 2 nu`);
    /// infinite in the Gaussian model.
    pub dof: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Predictive distribution of the latent function at the rows of `queries`,
/// with central intervals at the given `level`.
pub fn predict_f(
    model: &FittedModel,
    curve: usize,
    queries: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<Prediction>> {
    predict_impl(model, curve, queries, level, Target::Latent)
}

/// Predictive distribution of a new response at the rows of `queries`.
/// Same mean as [`predict_f`], the variance picks up the noise term, and
/// intervals cover the response.
pub fn predict_y(
    model: &FittedModel,
    curve: usize,
    queries: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<Prediction>> {
    predict_impl(model, curve, queries, level, Target::Response)
}

#[derive(Clone, Copy, PartialEq)]
enum Target {
    Latent,
    Response,
}

fn predict_impl(
    model: &FittedModel,
    curve: usize,
    queries: &DMatrix<f64>,
    level: f64,
    target: Target,
) -> Result<Vec<Prediction>> {
    check_curve(model, curve)?;
    if queries.ncols() != model.data.input_dim() {
        return Err(Error::Dimension {
            expected: model.data.input_dim(),
            got: queries.ncols(),
        });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter {
            reason: format!("interval level must lie in (0, 1), got {level}"),
        });
    }
    let train = &model.data.curves()[curve];
    let cache = &model.caches[curve];
    let cfg = model.params.kernels.for_curve(curve);
    let n = train.len() as f64;
    let s0 = cache.s0;
    let (dof, quantile) = interval_quantile(model.params.nu, n, level)?;

    let x_rows: Vec<Vec<f64>> = (0..train.x.nrows())
        .map(|i| train.x.row(i).iter().copied().collect())
        .collect();
    let mut out = Vec::with_capacity(queries.nrows());
    for qi in 0..queries.nrows() {
        let u: Vec<f64> = queries.row(qi).iter().copied().collect();
        let k_u = DVector::from_iterator(x_rows.len(), x_rows.iter().map(|r| cfg.eval(r, &u)));
        let mean = k_u.dot(&cache.alpha);
        let mut w = k_u.clone();
        cache
            .sigma_chol
            .l_dirty()
            .solve_lower_triangular_mut(&mut w);
        let posterior = cfg.eval(&u, &u) - w.norm_squared();
        let f_variance = clamp_variance(s0 * posterior)?;
        let y_variance = f_variance + s0 * model.params.phi;
        let target_var = match target {
            Target::Latent => f_variance,
            Target::Response => y_variance,
        };
        let half_width = quantile * interval_scale(model.params.nu, n, target_var);
        out.push(Prediction {
            mean,
            f_variance,
            y_variance,
            s0,
            dof,
            lower: mean - half_width,
            upper: mean + half_width,
        });
    }
    Ok(out)
}

/// Degrees of freedom and the upper-tail quantile for a central interval.
fn interval_quantile(nu: Nu, n: f64, level: f64) -> Result<(f64, f64)> {
    let p = 0.5 * (1.0 + level);
    match nu {
        Nu::Finite(v) => {
            let dof = n + 2.0 * v;
            let t = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Numerical {
                reason: format!("Student-t quantile: {e}"),
            })?;
            Ok((dof, t.inverse_cdf(p)))
        }
        Nu::Infinity => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            Ok((f64::INFINITY, normal.inverse_cdf(p)))
        }
    }
}

/// Scale of the standardized predictive variate: `sqrt(var * omega* / nu*)`
/// in the finite-shape model (where `omega* = nu* - 1` makes the EMTD scale
/// equal the variance) and `sqrt(var)` in the Gaussian one.
fn interval_scale(nu: Nu, n: f64, variance: f64) -> f64 {
    match nu {
        Nu::Finite(v) => {
            let nu_star = 0.5 * n + v;
            (variance * (nu_star - 1.0) / nu_star).sqrt()
        }
        Nu::Infinity => variance.sqrt(),
    }
}

fn clamp_variance(v: f64) -> Result<f64> {
    if v < -1e-10 {
        return Err(Error::Numerical {
            reason: format!("negative predictive variance {v}"),
        });
    }
    Ok(v.max(0.0))
}

/// In-sample BLUP: mean `K Sigma^{-1} y` and covariance
/// `s0 * phi * K Sigma^{-1}` of the latent function at the training inputs.
pub fn blup_training(model: &FittedModel, curve: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_curve(model, curve)?;
    let train = &model.data.curves()[curve];
    let cache = &model.caches[curve];
    let cfg = model.params.kernels.for_curve(curve);
    let gram = cfg.gram(&train.x);
    let mean = &gram * &cache.alpha;
    let sigma_inv = cache.sigma_chol.inverse();
    let cov = &gram * sigma_inv * (cache.s0 * model.params.phi);
    Ok((mean, (&cov + cov.transpose()) * 0.5))
}

/// Cross-covariance of the conditional process between the rows of `u` and
/// the rows of `v`: `s0 * (k(u, v) - k_u' Sigma^{-1} k_v)`.
pub fn posterior_process(
    model: &FittedModel,
    curve: usize,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_curve(model, curve)?;
    let p = model.data.input_dim();
    if u.ncols() != p || v.ncols() != p {
        return Err(Error::Dimension {
            expected: p,
            got: if u.ncols() != p { u.ncols() } else { v.ncols() },
        });
    }
    let train = &model.data.curves()[curve];
    let cache = &model.caches[curve];
    let cfg = model.params.kernels.for_curve(curve);
    let k_uv = cfg.cross_gram(u, v);
    let k_xu = cfg.cross_gram(&train.x, u);
    let k_xv = cfg.cross_gram(&train.x, v);
    let solved = cache.sigma_chol.solve(&k_xv);
    Ok((k_uv - k_xu.transpose() * solved) * cache.s0)
}

fn check_curve(model: &FittedModel, curve: usize) -> Result<()> {
    if curve >= model.data.len() {
        return Err(Error::Index {
            reason: format!(
                "curve {curve} out of range; the model was trained on {} curve(s)",
                model.data.len()
            ),
        });
    }
    Ok(())
}
