//! Extended multivariate t-distribution (EMTD) and its latent-scale law.
//!
//! An `Emtd(nu, omega, mean, scale)` is the Gaussian scale mixture
//!
//! ```text
//! z | r ~ Normal(mean, r * scale),      r ~ InvGamma(nu, omega),
//! ```
//!
//! whose marginal density is
//!
//! ```text
//! p(z) = |2 pi omega scale|^{-1/2} * Gamma(n/2 + nu) / Gamma(nu)
//!        * (1 + q / (2 omega))^{-(n/2 + nu)},    q = (z - mean)' scale^{-1} (z - mean).
//! ```
//!
//! The family is closed under marginalization, conditioning and full-rank
//! linear maps, which is what makes exact t-process regression tractable.
//! All densities are computed in log space with quadratic forms going
//! through Cholesky solves; gamma ratios are log-gamma differences so large
//! dimensions do not overflow.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_with_jitter, log_det, quad_form, require_symmetric};
use crate::rng::stream;
use crate::special::ln_gamma;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Inverse gamma distribution with density
/// `g(r) = omega^shape / Gamma(shape) * r^{-(shape+1)} * exp(-omega / r)`
/// (shape `nu`, scale `omega`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvGamma {
    shape: f64,
    scale: f64,
}

impl InvGamma {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0) || !(scale > 0.0) {
            return Err(Error::InvalidParameter {
                reason: format!("inverse gamma requires positive shape and scale, got ({shape}, {scale})"),
            });
        }
        Ok(Self { shape, scale })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Mean `scale / (shape - 1)`; undefined unless `shape > 1`.
    pub fn mean(&self) -> Option<f64> {
        (self.shape > 1.0).then(|| self.scale / (self.shape - 1.0))
    }

    /// Variance `scale^2 / ((shape-1)^2 (shape-2))`; undefined unless `shape > 2`.
    pub fn variance(&self) -> Option<f64> {
        (self.shape > 2.0).then(|| {
            let d = self.shape - 1.0;
            self.scale * self.scale / (d * d * (self.shape - 2.0))
        })
    }

    pub fn log_density(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.scale.ln() - ln_gamma(self.shape) - (self.shape + 1.0) * r.ln()
            - self.scale / r
    }

    /// One draw; the reciprocal of a gamma variate with matching parameters.
    pub fn sample_one<R: Rng>(&self, rng: &mut R) -> f64 {
        let gamma = Gamma::new(self.shape, 1.0 / self.scale)
            .expect("parameters validated at construction");
        1.0 / gamma.sample(rng)
    }
}

/// Parameters of an extended multivariate t-distribution.
///
/// Construction validates positivity of `nu` and `omega`, symmetry of the
/// scale matrix (to `1e-12` relative) and positive-definiteness after the
/// jitter policy, and caches the Cholesky factor for later use.
#[derive(Debug, Clone)]
pub struct Emtd {
    nu: f64,
    omega: f64,
    mean: DVector<f64>,
    scale: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl Emtd {
    pub fn new(nu: f64, omega: f64, mean: DVector<f64>, scale: DMatrix<f64>) -> Result<Self> {
        if !(nu > 0.0) || !(omega > 0.0) {
            return Err(Error::InvalidParameter {
                reason: format!("EMTD requires nu > 0 and omega > 0, got ({nu}, {omega})"),
            });
        }
        if mean.len() != scale.nrows() {
            return Err(Error::Dimension {
                expected: scale.nrows(),
                got: mean.len(),
            });
        }
        let scale = require_symmetric(&scale)?;
        let chol = cholesky_with_jitter(&scale)?.chol;
        Ok(Self {
            nu,
            omega,
            mean,
            scale,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn mean_param(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn scale_param(&self) -> &DMatrix<f64> {
        &self.scale
    }

    /// Mean vector; defined only for `nu > 1/2`.
    pub fn mean(&self) -> Option<DVector<f64>> {
        (self.nu > 0.5).then(|| self.mean.clone())
    }

    /// Covariance `omega * scale / (nu - 1)`; defined only for `nu > 1`.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.nu > 1.0).then(|| &self.scale * (self.omega / (self.nu - 1.0)))
    }

    /// Marginal skewness of each coordinate. The third moment exists for
    /// `nu > 3/2` and vanishes by symmetry; below that threshold the value
    /// is undefined and `None` is returned.
    pub fn skewness(&self) -> Option<f64> {
        (self.nu > 1.5).then_some(0.0)
    }

    /// Marginal kurtosis `3 / (nu - 2) + 3`; defined only for `nu > 2`.
    pub fn kurtosis(&self) -> Option<f64> {
        (self.nu > 2.0).then(|| 3.0 / (self.nu - 2.0) + 3.0)
    }

    /// Log density at `z`.
    pub fn log_density(&self, z: &DVector<f64>) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let n = self.dim() as f64;
        let q = quad_form(&self.chol, &(z - &self.mean));
        Ok(-0.5 * (n * (LN_2PI + self.omega.ln()) + log_det(&self.chol))
            + ln_gamma(0.5 * n + self.nu)
            - ln_gamma(self.nu)
            - (0.5 * n + self.nu) * (q / (2.0 * self.omega)).ln_1p())
    }

    /// Marginal over the given coordinates: same `(nu, omega)` with the
    /// sub-vector mean and principal submatrix scale.
    pub fn marginal(&self, indices: &[usize]) -> Result<Emtd> {
        self.check_indices(indices)?;
        let mean = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.mean[i]));
        let scale = DMatrix::from_fn(indices.len(), indices.len(), |r, c| {
            self.scale[(indices[r], indices[c])]
        });
        Emtd::new(self.nu, self.omega, mean, scale)
    }

    /// Condition on observing `observed` coordinates at `z1`; returns the
    /// law of the remaining coordinates (in their original order).
    ///
    /// The conditional stays in the family with
    /// `nu* = n1/2 + nu`, `omega* = n1/2 + omega`,
    /// `mean* = S21 S11^{-1} (z1 - mean1) + mean2`, and
    /// `scale* = (2 omega + a1) / (2 omega + n1) * (S22 - S21 S11^{-1} S12)`
    /// where `a1` is the Mahalanobis norm of the observed block. Unlike the
    /// Gaussian case, a poorly fitting observation inflates the conditional
    /// scale through `a1`.
    pub fn conditional(&self, observed: &[usize], z1: &DVector<f64>) -> Result<Emtd> {
        self.check_indices(observed)?;
        if z1.len() != observed.len() {
            return Err(Error::Dimension {
                expected: observed.len(),
                got: z1.len(),
            });
        }
        let rest: Vec<usize> = (0..self.dim()).filter(|i| !observed.contains(i)).collect();
        if rest.is_empty() {
            return Err(Error::Index {
                reason: "conditioning on all coordinates leaves nothing to predict".into(),
            });
        }
        let n1 = observed.len();
        let s11 = DMatrix::from_fn(n1, n1, |r, c| self.scale[(observed[r], observed[c])]);
        let s12 = DMatrix::from_fn(n1, rest.len(), |r, c| self.scale[(observed[r], rest[c])]);
        let s22 = DMatrix::from_fn(rest.len(), rest.len(), |r, c| {
            self.scale[(rest[r], rest[c])]
        });
        let mu1 = DVector::from_iterator(n1, observed.iter().map(|&i| self.mean[i]));
        let mu2 = DVector::from_iterator(rest.len(), rest.iter().map(|&i| self.mean[i]));

        let chol11 = cholesky_with_jitter(&s11)?.chol;
        let dev = z1 - &mu1;
        let a1 = quad_form(&chol11, &dev);
        // S11^{-1} S12 and S11^{-1} (z1 - mean1) via the factor.
        let s11_inv_s12 = chol11.solve(&s12);
        let s11_inv_dev = chol11.solve(&dev);

        let mean_star = s12.transpose() * s11_inv_dev + mu2;
        let schur = s22 - s12.transpose() * s11_inv_s12;
        let factor = (2.0 * self.omega + a1) / (2.0 * self.omega + n1 as f64);
        // Symmetrize: the Schur complement picks up round-off asymmetry.
        let scale_star = (&schur + schur.transpose()) * (0.5 * factor);

        Emtd::new(
            self.nu + 0.5 * n1 as f64,
            self.omega + 0.5 * n1 as f64,
            mean_star,
            scale_star,
        )
    }

    /// Image under a full-row-rank matrix `a` (l x n, l <= n):
    /// `(nu, omega, a * mean, a * scale * a')`.
    pub fn linear_map(&self, a: &DMatrix<f64>) -> Result<Emtd> {
        if a.ncols() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: a.ncols(),
            });
        }
        let l = a.nrows();
        if l > self.dim() {
            return Err(Error::RankDeficient {
                rank: self.dim(),
                rows: l,
            });
        }
        let svd = a.clone().svd(false, false);
        let max_sv = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-10 * max_sv)
            .count();
        if rank < l {
            return Err(Error::RankDeficient { rank, rows: l });
        }
        let mean = a * &self.mean;
        let scale = a * &self.scale * a.transpose();
        Emtd::new(self.nu, self.omega, mean, (&scale + scale.transpose()) * 0.5)
    }

    /// Draw `count` i.i.d. rows, deterministically from `seed`.
    ///
    /// Each row uses its own ChaCha substream (stream id = row index), so
    /// the draws for row `i` do not depend on `count`.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DMatrix<f64>> {
        if count == 0 {
            return Err(Error::InvalidParameter {
                reason: "sample count must be at least 1".into(),
            });
        }
        let n = self.dim();
        let r_law = InvGamma::new(self.nu, self.omega)?;
        let l = self.chol.l_dirty();
        let mut out = DMatrix::zeros(count, n);
        for i in 0..count {
            let mut rng = stream(seed, i as u64);
            let r = r_law.sample_one(&mut rng);
            let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut z = DVector::zeros(n);
            // z = mean + sqrt(r) * L g, accumulating only the lower triangle.
            for row in 0..n {
                let mut acc = 0.0;
                for col in 0..=row {
                    acc += l[(row, col)] * g[col];
                }
                z[row] = self.mean[row] + r.sqrt() * acc;
            }
            out.set_row(i, &z.transpose());
        }
        Ok(out)
    }

    /// Posterior of the latent scale `r` given an observation `z`:
    /// `InvGamma(n/2 + nu, omega + q/2)` together with its mean and
    /// variance where defined (`None` marks an undefined moment).
    pub fn scale_posterior(&self, z: &DVector<f64>) -> Result<ScalePosterior> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let n = self.dim() as f64;
        let q = quad_form(&self.chol, &(z - &self.mean));
        let posterior = InvGamma::new(0.5 * n + self.nu, self.omega + 0.5 * q)?;
        Ok(ScalePosterior {
            mean: posterior.mean(),
            variance: posterior.variance(),
            posterior,
        })
    }

    fn check_indices(&self, indices: &[usize]) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::Index {
                reason: "index set is empty".into(),
            });
        }
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.dim() {
                return Err(Error::Index {
                    reason: format!("index {i} out of range for dimension {}", self.dim()),
                });
            }
            if indices[..k].contains(&i) {
                return Err(Error::Index {
                    reason: format!("duplicate index {i}"),
                });
            }
        }
        Ok(())
    }
}

/// Latent-scale posterior summary returned by [`Emtd::scale_posterior`].
#[derive(Debug, Clone, Copy)]
pub struct ScalePosterior {
    pub posterior: InvGamma,
    /// `(2 omega + q) / (n + 2 nu - 2)`; `None` when `n + 2 nu <= 2`.
    pub mean: Option<f64>,
    /// `None` when `n/2 + nu <= 2`.
    pub variance: Option<f64>,
}
