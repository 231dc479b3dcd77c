//! Covariance kernels, kernel sums, Gram matrices and analytic
//! hyperparameter derivatives.
//!
//! Five families are provided; a configuration is an ordered sum of terms
//! and its hyperparameter vector is the concatenation of the per-term
//! parameter blocks. Layouts (for input dimension `p`):
//!
//! | family          | parameters               | form |
//! |-----------------|--------------------------|------|
//! | `SquaredExp`    | `[eta0, eta1..etap]`     | `eta0 * exp(-1/2 sum eta_l (u_l - v_l)^2)` |
//! | `Linear`        | `[eta0..eta_{p-1}]`      | `sum eta_{l-1} u_l v_l` |
//! | `VonMises`      | `[eta0, eta1]`           | `eta0 * exp(eta1 (sum cos(u_l - v_l) - p))` |
//! | `RationalQuad`  | `[lambda, eta1..etap]`   | `(1 + (20^{1/lambda} - 1) sum eta_l (u_l - v_l)^2)^{-lambda}` |
//! | `Matern`        | `[eta1]`                 | closed form for order 1/2, 3/2, 5/2 in `eta1 * ||u - v||` |
//!
//! All hyperparameters are strictly positive; fitting code works on the log
//! scale so the constraints never bind. The Matern order is a fixed
//! configuration constant, not a hyperparameter.

use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Kernel family tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExp,
    Linear,
    VonMises,
    RationalQuad,
    Matern,
}

/// One additive kernel term: a family plus its hyperparameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTerm {
    pub family: KernelFamily,
    pub params: Vec<f64>,
    /// Matern smoothness order; ignored by other families. Only the
    /// half-integer orders 1/2, 3/2 and 5/2 are supported (their closed
    /// forms avoid Bessel evaluations inside Gram assembly).
    #[serde(default = "default_matern_order", skip_serializing_if = "is_default_order")]
    pub matern_order: f64,
}

fn default_matern_order() -> f64 {
    1.5
}

fn is_default_order(order: &f64) -> bool {
    *order == 1.5
}

impl KernelTerm {
    pub fn squared_exp(params: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::SquaredExp,
            params,
            matern_order: default_matern_order(),
        }
    }

    pub fn linear(params: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::Linear,
            params,
            matern_order: default_matern_order(),
        }
    }

    pub fn von_mises(eta0: f64, eta1: f64) -> Self {
        Self {
            family: KernelFamily::VonMises,
            params: vec![eta0, eta1],
            matern_order: default_matern_order(),
        }
    }

    pub fn rational_quad(params: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::RationalQuad,
            params,
            matern_order: default_matern_order(),
        }
    }

    pub fn matern(eta1: f64, order: f64) -> Self {
        Self {
            family: KernelFamily::Matern,
            params: vec![eta1],
            matern_order: order,
        }
    }

    fn expected_len(&self, input_dim: usize) -> usize {
        match self.family {
            KernelFamily::SquaredExp | KernelFamily::RationalQuad => input_dim + 1,
            KernelFamily::Linear => input_dim,
            KernelFamily::VonMises => 2,
            KernelFamily::Matern => 1,
        }
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        let expected = self.expected_len(input_dim);
        if self.params.len() != expected {
            return Err(Error::InvalidParameter {
                reason: format!(
                    "{:?} term needs {expected} parameter(s) for input dimension {input_dim}, got {}",
                    self.family,
                    self.params.len()
                ),
            });
        }
        if self.params.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter {
                reason: format!("{:?} term has a non-positive hyperparameter", self.family),
            });
        }
        if self.family == KernelFamily::Matern
            && ![0.5, 1.5, 2.5].contains(&self.matern_order)
        {
            return Err(Error::InvalidParameter {
                reason: format!(
                    "Matern order {} unsupported; use 0.5, 1.5 or 2.5",
                    self.matern_order
                ),
            });
        }
        Ok(())
    }

    fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        match self.family {
            KernelFamily::SquaredExp => {
                let mut s = 0.0;
                for l in 0..u.len() {
                    let d = u[l] - v[l];
                    s += self.params[l + 1] * d * d;
                }
                self.params[0] * (-0.5 * s).exp()
            }
            KernelFamily::Linear => {
                let mut s = 0.0;
                for l in 0..u.len() {
                    s += self.params[l] * u[l] * v[l];
                }
                s
            }
            KernelFamily::VonMises => {
                let c = cos_sum(u, v);
                self.params[0] * (self.params[1] * c).exp()
            }
            KernelFamily::RationalQuad => {
                let lambda = self.params[0];
                let coeff = rq_coeff(lambda);
                let d = weighted_sq_dist(&self.params[1..], u, v);
                (1.0 + coeff * d).powf(-lambda)
            }
            KernelFamily::Matern => {
                let t = self.params[0] * euclid_dist(u, v);
                matern_profile(self.matern_order, t).0
            }
        }
    }

    /// Analytic partials with respect to this term's hyperparameters,
    /// written into `out` (length = parameter count).
    fn grad(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        match self.family {
            KernelFamily::SquaredExp => {
                let k = self.eval(u, v);
                out[0] = k / self.params[0];
                for l in 0..u.len() {
                    let d = u[l] - v[l];
                    out[l + 1] = -0.5 * d * d * k;
                }
            }
            KernelFamily::Linear => {
                for l in 0..u.len() {
                    out[l] = u[l] * v[l];
                }
            }
            KernelFamily::VonMises => {
                let c = cos_sum(u, v);
                let k = self.params[0] * (self.params[1] * c).exp();
                out[0] = k / self.params[0];
                out[1] = c * k;
            }
            KernelFamily::RationalQuad => {
                let lambda = self.params[0];
                let g20 = 20f64.powf(1.0 / lambda);
                let coeff = g20 - 1.0;
                let d = weighted_sq_dist(&self.params[1..], u, v);
                let b = 1.0 + coeff * d;
                let k = b.powf(-lambda);
                // d/d lambda of exp(-lambda ln B) with B depending on lambda
                // through 20^{1/lambda}.
                out[0] = k * (-b.ln() + d * g20 * LN_20 / (lambda * b));
                let fac = -lambda * b.powf(-lambda - 1.0) * coeff;
                for l in 0..u.len() {
                    let diff = u[l] - v[l];
                    out[l + 1] = fac * diff * diff;
                }
            }
            KernelFamily::Matern => {
                let dist = euclid_dist(u, v);
                let t = self.params[0] * dist;
                out[0] = matern_profile(self.matern_order, t).1 * dist;
            }
        }
    }

    /// Analytic second partial with respect to hyperparameters `a` and `b`
    /// of this term.
    fn second_partial(&self, u: &[f64], v: &[f64], a: usize, b: usize) -> f64 {
        match self.family {
            KernelFamily::SquaredExp => {
                let k = self.eval(u, v);
                let half_sq = |l: usize| {
                    let d = u[l - 1] - v[l - 1];
                    -0.5 * d * d
                };
                match (a, b) {
                    (0, 0) => 0.0,
                    (0, l) | (l, 0) => half_sq(l) * k / self.params[0],
                    (l, j) => half_sq(l) * half_sq(j) * k,
                }
            }
            KernelFamily::Linear => 0.0,
            KernelFamily::VonMises => {
                let c = cos_sum(u, v);
                let k = self.params[0] * (self.params[1] * c).exp();
                match (a, b) {
                    (0, 0) => 0.0,
                    (0, 1) | (1, 0) => c * k / self.params[0],
                    _ => c * c * k,
                }
            }
            KernelFamily::RationalQuad => self.rq_second_partial(u, v, a, b),
            KernelFamily::Matern => {
                let dist = euclid_dist(u, v);
                let t = self.params[0] * dist;
                matern_profile(self.matern_order, t).2 * dist * dist
            }
        }
    }

    fn rq_second_partial(&self, u: &[f64], v: &[f64], a: usize, b: usize) -> f64 {
        let lambda = self.params[0];
        let g20 = 20f64.powf(1.0 / lambda);
        let coeff = g20 - 1.0;
        let d = weighted_sq_dist(&self.params[1..], u, v);
        let b_val = 1.0 + coeff * d;
        let k = b_val.powf(-lambda);
        // Derivatives of the lambda-dependent pieces.
        let c1 = -g20 * LN_20 / (lambda * lambda); // d coeff / d lambda
        let c2 = g20 * LN_20 * (LN_20 + 2.0 * lambda) / lambda.powi(4); // d^2 coeff / d lambda^2
        let b1 = d * c1;
        let b2 = d * c2;
        let m1 = -b_val.ln() - lambda * b1 / b_val; // d log k / d lambda
        match (a, b) {
            (0, 0) => {
                let m2 = -2.0 * b1 / b_val - lambda * b2 / b_val
                    + lambda * b1 * b1 / (b_val * b_val);
                k * (m1 * m1 + m2)
            }
            (0, l) | (l, 0) => {
                let diff = u[l - 1] - v[l - 1];
                let dsq = diff * diff;
                // d/d lambda of (-lambda coeff B^{-lambda-1}) * dsq.
                let f = -lambda * coeff * b_val.powf(-lambda - 1.0);
                f * dsq
                    * (1.0 / lambda + c1 / coeff - b_val.ln()
                        - (lambda + 1.0) * b1 / b_val)
            }
            (l, j) => {
                let dl = u[l - 1] - v[l - 1];
                let dj = u[j - 1] - v[j - 1];
                lambda * (lambda + 1.0) * b_val.powf(-lambda - 2.0) * coeff * coeff
                    * dl * dl * dj * dj
            }
        }
    }

    /// Bounded kernels keep `sup |k|` finite; only the linear family is
    /// unbounded on an unbounded input domain.
    pub fn is_bounded(&self) -> bool {
        self.family != KernelFamily::Linear
    }

    /// Whether the term is linear in an amplitude parameter, so rescaling
    /// those parameters by `c` rescales the term by `c`.
    pub fn is_amplitude_scalable(&self) -> bool {
        matches!(
            self.family,
            KernelFamily::SquaredExp | KernelFamily::Linear | KernelFamily::VonMises
        )
    }

    /// Indices (within this term's block) of parameters that act as pure
    /// amplitudes. Used to scale initial values by the data variance.
    pub fn amplitude_indices(&self) -> Vec<usize> {
        match self.family {
            KernelFamily::SquaredExp | KernelFamily::VonMises => vec![0],
            KernelFamily::Linear => (0..self.params.len()).collect(),
            KernelFamily::RationalQuad | KernelFamily::Matern => vec![],
        }
    }
}

const LN_20: f64 = 2.995732273553991;

fn rq_coeff(lambda: f64) -> f64 {
    20f64.powf(1.0 / lambda) - 1.0
}

fn cos_sum(u: &[f64], v: &[f64]) -> f64 {
    let mut c = 0.0;
    for l in 0..u.len() {
        c += (u[l] - v[l]).cos();
    }
    c - u.len() as f64
}

fn weighted_sq_dist(weights: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for l in 0..u.len() {
        let d = u[l] - v[l];
        s += weights[l] * d * d;
    }
    s
}

fn euclid_dist(u: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for l in 0..u.len() {
        let d = u[l] - v[l];
        s += d * d;
    }
    s.sqrt()
}

/// Matern profile in `t = eta1 * ||u - v||`: value and its first and second
/// derivatives with respect to `eta1` divided by the corresponding power of
/// the distance (so callers multiply by `dist` and `dist^2`). `t = 0` gives
/// exactly 1 with vanishing derivatives.
fn matern_profile(order: f64, t: f64) -> (f64, f64, f64) {
    let e = (-t).exp();
    if order == 0.5 {
        (e, -e, e)
    } else if order == 1.5 {
        ((1.0 + t) * e, -t * e, (t - 1.0) * e)
    } else {
        // order == 2.5
        let k = (1.0 + t + t * t / 3.0) * e;
        let d1 = -(t / 3.0) * (1.0 + t) * e;
        let d2 = -(1.0 / 3.0) * (1.0 + t - t * t) * e;
        (k, d1, d2)
    }
}

/// An ordered sum of kernel terms over a fixed input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub input_dim: usize,
    pub terms: Vec<KernelTerm>,
}

impl KernelConfig {
    pub fn new(input_dim: usize, terms: Vec<KernelTerm>) -> Result<Self> {
        let cfg = Self { input_dim, terms };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidParameter {
                reason: "input dimension must be at least 1".into(),
            });
        }
        if self.terms.is_empty() {
            return Err(Error::InvalidParameter {
                reason: "kernel needs at least one term".into(),
            });
        }
        for term in &self.terms {
            term.validate(self.input_dim)?;
        }
        Ok(())
    }

    /// Total number of hyperparameters across all terms.
    pub fn param_count(&self) -> usize {
        self.terms.iter().map(|t| t.params.len()).sum()
    }

    /// Flattened hyperparameter vector in declared term order.
    pub fn params(&self) -> Vec<f64> {
        self.terms.iter().flat_map(|t| t.params.iter().copied()).collect()
    }

    /// Replace the flattened hyperparameter vector.
    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                left: self.param_count(),
                right: values.len(),
            });
        }
        let mut offset = 0;
        for term in &mut self.terms {
            let len = term.params.len();
            term.params.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
        self.validate()
    }

    /// Map a flattened parameter index to `(term index, index within term)`.
    pub fn locate(&self, index: usize) -> (usize, usize) {
        let mut offset = 0;
        for (t, term) in self.terms.iter().enumerate() {
            if index < offset + term.params.len() {
                return (t, index - offset);
            }
            offset += term.params.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn is_bounded(&self) -> bool {
        self.terms.iter().all(KernelTerm::is_bounded)
    }

    pub fn is_amplitude_homogeneous(&self) -> bool {
        self.terms.iter().all(KernelTerm::is_amplitude_scalable)
    }

    /// Kernel value `k(u, v)`: the sum of all term evaluations.
    pub fn eval(&self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.input_dim);
        debug_assert_eq!(v.len(), self.input_dim);
        self.terms.iter().map(|t| t.eval(u, v)).sum()
    }

    /// Gradient of `k(u, v)` in the flattened hyperparameter order.
    pub fn grad(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.param_count()];
        let mut offset = 0;
        for term in &self.terms {
            let len = term.params.len();
            term.grad(u, v, &mut out[offset..offset + len]);
            offset += len;
        }
        out
    }

    /// Second partial of `k(u, v)` for flattened indices `a`, `b`. Cross
    /// derivatives between different terms vanish because the sum is
    /// separable.
    pub fn second_partial(&self, u: &[f64], v: &[f64], a: usize, b: usize) -> f64 {
        let (ta, la) = self.locate(a);
        let (tb, lb) = self.locate(b);
        if ta != tb {
            return 0.0;
        }
        self.terms[ta].second_partial(u, v, la, lb)
    }

    /// Gram matrix over the rows of `x`. The upper triangle is computed and
    /// mirrored so the result is exactly symmetric.
    pub fn gram(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.gram_with(x, |u, v| self.eval(u, v))
    }

    /// Elementwise derivative of the Gram matrix with respect to flattened
    /// hyperparameter `index`.
    pub fn gram_grad(&self, x: &DMatrix<f64>, index: usize) -> DMatrix<f64> {
        let (t, l) = self.locate(index);
        let term = &self.terms[t];
        self.gram_with(x, |u, v| {
            let mut block = vec![0.0; term.params.len()];
            term.grad(u, v, &mut block);
            block[l]
        })
    }

    /// Elementwise second derivative of the Gram matrix.
    pub fn gram_second(&self, x: &DMatrix<f64>, a: usize, b: usize) -> DMatrix<f64> {
        self.gram_with(x, |u, v| self.second_partial(u, v, a, b))
    }

    /// Rectangular kernel matrix between the rows of `a` and the rows of `b`.
    pub fn cross_gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let rows_a: Vec<Vec<f64>> = (0..a.nrows())
            .map(|i| a.row(i).iter().copied().collect())
            .collect();
        let rows_b: Vec<Vec<f64>> = (0..b.nrows())
            .map(|i| b.row(i).iter().copied().collect())
            .collect();
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| self.eval(&rows_a[i], &rows_b[j]))
    }

    fn gram_with<F: Fn(&[f64], &[f64]) -> f64>(&self, x: &DMatrix<f64>, f: F) -> DMatrix<f64> {
        let n = x.nrows();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| x.row(i).iter().copied().collect())
            .collect();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = f(&rows[i], &rows[j]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }
}

/// Shorthand for the sum `k_se + k_lin` used throughout the simulation
/// studies, with parameters `(eta0, eta1.., xi0..)`.
pub fn se_plus_lin(input_dim: usize, se: Vec<f64>, lin: Vec<f64>) -> Result<KernelConfig> {
    KernelConfig::new(
        input_dim,
        vec![KernelTerm::squared_exp(se), KernelTerm::linear(lin)],
    )
}

/// Shorthand for the sum `k_se + k_m` (Matern order 3/2).
pub fn se_plus_matern(input_dim: usize, se: Vec<f64>, matern_eta: f64) -> Result<KernelConfig> {
    KernelConfig::new(
        input_dim,
        vec![
            KernelTerm::squared_exp(se),
            KernelTerm::matern(matern_eta, 1.5),
        ],
    )
}
