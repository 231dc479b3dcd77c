//! Shared oracles for the integration suites: adaptive quadrature, the
//! scale-mixture representation of the heavy-tailed density, and finite
//! differences of the likelihood. Everything here is deliberately
//! independent of the library's own density/score code paths.

#![allow(dead_code)]

use etpr::kernels::{KernelConfig, KernelTerm};
use etpr::model::{Curve, Dataset, KernelSet, ModelParams, Nu};
use etpr::rng::stream;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Adaptive Simpson integration with absolute tolerance.
///
/// The interval is pre-split into 32 panels before adapting, so narrow
/// features cannot hide between the first probe points.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(a: f64, fa: f64, b: f64, fb: f64, fm: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(a, fa, m, fm, flm);
        let right = simpson(m, fm, b, fb, frm);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, fa, m, fm, flm, left, 0.6 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, frm, right, 0.6 * tol, depth - 1)
        }
    }
    const PANELS: usize = 32;
    let mut total = 0.0;
    let step = (b - a) / PANELS as f64;
    let panel_tol = tol / PANELS as f64;
    for i in 0..PANELS {
        let lo = a + step * i as f64;
        let hi = lo + step;
        let flo = f(lo);
        let fhi = f(hi);
        let fm = f(0.5 * (lo + hi));
        let whole = simpson(lo, flo, hi, fhi, fm);
        total += recurse(f, lo, flo, hi, fhi, fm, whole, panel_tol, 28);
    }
    total
}

/// Integral of `f` over the whole real line through `x = center + tan(t)`.
pub fn integrate_line<F: Fn(f64) -> f64>(f: &F, center: f64, tol: f64) -> f64 {
    let half = std::f64::consts::FRAC_PI_2 - 1e-9;
    let g = |t: f64| {
        let x = center + t.tan();
        let sec2 = 1.0 + t.tan() * t.tan();
        let v = f(x) * sec2;
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    integrate(&g, -half, half, tol)
}

/// Log density of the inverse gamma law IG(shape, scale).
pub fn ig_log_density(r: f64, shape: f64, scale: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * r.ln() - scale / r
}

/// Log density of `Normal(mean, r * scale_matrix)` at `z`, by explicit
/// (dense) inversion, independent of the library's Cholesky path.
pub fn normal_log_density(
    z: &DVector<f64>,
    mean: &DVector<f64>,
    scale: &DMatrix<f64>,
    r: f64,
) -> f64 {
    let n = z.len() as f64;
    let cov = scale * r;
    let det = cov.determinant();
    let inv = cov.try_inverse().expect("oracle covariance invertible");
    let dev = z - mean;
    let q = (dev.transpose() * inv * dev)[(0, 0)];
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + det.ln() + q)
}

/// Oracle for the heavy-tailed log density: one-dimensional quadrature of
/// the scale mixture over the latent `r`, using the substitution
/// `t = scale / r` (which turns the mixing law into a Gamma(shape, 1)).
/// Also returns the posterior mean and second moment of `r`, so the same
/// quadrature validates the scale posterior.
pub struct MixtureOracle {
    pub log_density: f64,
    pub r_mean: f64,
    pub r_second_moment: f64,
}

pub fn mixture_oracle(
    z: &DVector<f64>,
    nu: f64,
    omega: f64,
    mean: &DVector<f64>,
    scale: &DMatrix<f64>,
) -> MixtureOracle {
    let n = z.len() as f64;
    // Log integrand in t: Normal(z; mean, (omega/t) scale) * Gamma(t; nu, 1).
    let log_integrand = |t: f64| -> f64 {
        if t <= 0.0 {
            return f64::NEG_INFINITY;
        }
        use statrs::function::gamma::ln_gamma;
        normal_log_density(z, mean, scale, omega / t) + (nu - 1.0) * t.ln() - t - ln_gamma(nu)
    };
    // Quadratic form needed to place the peak.
    let inv = scale.clone().try_inverse().expect("oracle scale invertible");
    let dev = z - mean;
    let q = (dev.transpose() * inv * dev)[(0, 0)];
    let rate = 1.0 + q / (2.0 * omega);
    let t_peak = ((0.5 * n + nu - 1.0) / rate).max(0.1);
    let log_max = log_integrand(t_peak);

    // The integrand is unimodal in t but its support spans many orders of
    // magnitude, so integrate octave by octave outward from the peak until
    // the contribution is negligible.
    let weighted = |extra: i32| -> f64 {
        let g = |t: f64| -> f64 {
            let lg = log_integrand(t);
            if lg.is_finite() {
                (lg - log_max).exp() * (omega / t).powi(extra)
            } else {
                0.0
            }
        };
        let mut total = 0.0;
        let mut hi = t_peak;
        while hi > 1e-12 {
            let lo = (hi / 2.0).max(1e-12);
            total += integrate(&g, lo, hi, 1e-13);
            if log_integrand(lo) - log_max < -80.0 {
                break;
            }
            hi = lo;
        }
        let mut lo = t_peak;
        loop {
            let hi = lo * 2.0;
            total += integrate(&g, lo, hi, 1e-13);
            if log_integrand(hi) - log_max < -80.0 {
                break;
            }
            lo = hi;
        }
        total
    };
    let mass = weighted(0);
    let first = weighted(1);
    let second = weighted(2);
    MixtureOracle {
        log_density: log_max + mass.ln(),
        r_mean: first / mass,
        r_second_moment: second / mass,
    }
}

/// Central finite difference of the log-likelihood along natural-scale
/// `beta[k]` with relative step `h_rel`.
pub fn fd_loglik_beta(data: &Dataset, params: &ModelParams, k: usize, h_rel: f64) -> f64 {
    let m = data.len();
    let beta = params.beta(m);
    let h = h_rel * beta[k];
    let mut plus = beta.clone();
    plus[k] += h;
    let mut minus = beta.clone();
    minus[k] -= h;
    let lp = etpr::model::log_marginal_likelihood(data, &params.with_beta(&plus, m).unwrap())
        .unwrap();
    let lm = etpr::model::log_marginal_likelihood(data, &params.with_beta(&minus, m).unwrap())
        .unwrap();
    (lp - lm) / (2.0 * h)
}

/// Central finite difference of the log-likelihood in `nu` (absolute step).
pub fn fd_loglik_nu(data: &Dataset, params: &ModelParams, h: f64) -> f64 {
    let nu = match params.nu {
        Nu::Finite(v) => v,
        Nu::Infinity => panic!("finite nu required"),
    };
    let mut plus = params.clone();
    plus.nu = Nu::Finite(nu + h);
    let mut minus = params.clone();
    minus.nu = Nu::Finite(nu - h);
    let lp = etpr::model::log_marginal_likelihood(data, &plus).unwrap();
    let lm = etpr::model::log_marginal_likelihood(data, &minus).unwrap();
    (lp - lm) / (2.0 * h)
}

/// Relative agreement with a small absolute floor for near-zero entries.
pub fn close_rel(a: f64, b: f64, rel: f64) -> bool {
    let denom = a.abs().max(b.abs());
    (a - b).abs() <= rel * denom + 1e-9
}

/// Kernel configurations exercised by the gradient sweeps: the five
/// families plus the two sums used in the studies.
pub fn kernel_zoo(p: usize, rng: &mut impl Rng) -> Vec<KernelConfig> {
    let draw = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| -> f64 {
        let u: f64 = rand::Rng::gen_range(rng, lo.ln()..hi.ln());
        u.exp()
    };
    let se = |rng: &mut dyn rand::RngCore| {
        KernelTerm::squared_exp((0..=p).map(|_| draw(rng, 0.1, 3.0)).collect())
    };
    let lin = |rng: &mut dyn rand::RngCore| {
        KernelTerm::linear((0..p).map(|_| draw(rng, 0.1, 3.0)).collect())
    };
    let vm = |rng: &mut dyn rand::RngCore| {
        KernelTerm::von_mises(draw(rng, 0.1, 3.0), draw(rng, 0.1, 3.0))
    };
    let rq = |rng: &mut dyn rand::RngCore| {
        KernelTerm::rational_quad((0..=p).map(|_| draw(rng, 0.2, 3.0)).collect())
    };
    let matern = |rng: &mut dyn rand::RngCore| KernelTerm::matern(draw(rng, 0.2, 3.0), 1.5);
    vec![
        KernelConfig::new(p, vec![se(rng)]).unwrap(),
        KernelConfig::new(p, vec![lin(rng)]).unwrap(),
        KernelConfig::new(p, vec![vm(rng)]).unwrap(),
        KernelConfig::new(p, vec![rq(rng)]).unwrap(),
        KernelConfig::new(p, vec![matern(rng)]).unwrap(),
        KernelConfig::new(p, vec![se(rng), lin(rng)]).unwrap(),
        KernelConfig::new(p, vec![se(rng), matern(rng)]).unwrap(),
    ]
}

/// Random dataset and parameters for gradient sweeps. `draw` rotates over
/// curve counts, sample sizes, kernels and shape values.
pub fn random_case(draw: usize) -> (Dataset, ModelParams) {
    let mut rng = stream(0xC0FFEE ^ draw as u64, 0);
    let m = if draw % 2 == 0 { 1 } else { 2 };
    let n = if (draw / 2) % 2 == 0 { 3 } else { 10 };
    let p = if draw % 5 == 0 { 2 } else { 1 };
    let kernels = kernel_zoo(p, &mut rng);
    let kernel = kernels[draw % kernels.len()].clone();
    let curves = (0..m)
        .map(|_| {
            let x = DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.5..1.5));
            let y = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
            Curve::new(x, y).unwrap()
        })
        .collect();
    let data = Dataset::new(curves).unwrap();
    let nu_choices = [1.05, 1.3, 2.0, 4.0, 8.0];
    let params = ModelParams::new(
        rng.gen_range(0.05..1.0),
        KernelSet::Tied(kernel),
        Nu::Finite(nu_choices[draw % nu_choices.len()]),
    )
    .unwrap();
    (data, params)
}

/// Empirical Kolmogorov-Smirnov distance between samples and a reference CDF.
pub fn ks_distance(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - c).abs());
    }
    d
}
