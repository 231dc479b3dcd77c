//! Finite-difference validation of the analytic scores and curvature.

mod common;

use common::{close_rel, fd_loglik_beta, fd_loglik_nu, random_case};
use etpr::model::{hessian_beta, score_beta, score_nu, Nu};

#[test]
fn score_beta_matches_finite_differences() {
    for draw in 0..30 {
        let (data, params) = random_case(draw);
        let analytic = score_beta(&data, &params).unwrap();
        for k in 0..analytic.len() {
            let fd = fd_loglik_beta(&data, &params, k, 1e-6);
            assert!(
                close_rel(analytic[k], fd, 1e-5),
                "draw {draw} beta[{k}]: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }
}

#[test]
fn score_nu_matches_finite_differences() {
    for draw in 0..30 {
        let (data, params) = random_case(draw);
        let analytic = score_nu(&data, &params).unwrap();
        let fd = fd_loglik_nu(&data, &params, 1e-5);
        assert!(
            (analytic - fd).abs() <= 1e-6,
            "draw {draw}: analytic {analytic} vs fd {fd}"
        );
    }
}

#[test]
fn hessian_diagonal_matches_second_differences() {
    for draw in [0, 3, 7, 11, 16] {
        let (data, params) = random_case(draw);
        let h = hessian_beta(&data, &params).unwrap();
        let m = data.len();
        let beta = params.beta(m);
        for k in 0..beta.len() {
            let step = 1e-4 * beta[k];
            let mut plus = beta.clone();
            plus[k] += step;
            let mut minus = beta.clone();
            minus[k] -= step;
            let lp = etpr::model::log_marginal_likelihood(
                &data,
                &params.with_beta(&plus, m).unwrap(),
            )
            .unwrap();
            let l0 = etpr::model::log_marginal_likelihood(&data, &params).unwrap();
            let lm = etpr::model::log_marginal_likelihood(
                &data,
                &params.with_beta(&minus, m).unwrap(),
            )
            .unwrap();
            let fd = (lp - 2.0 * l0 + lm) / (step * step);
            assert!(
                close_rel(h[(k, k)], fd, 1e-4) || (h[(k, k)] - fd).abs() < 1e-5,
                "draw {draw} H[{k},{k}]: analytic {} vs fd {fd}",
                h[(k, k)]
            );
        }
    }
}

#[test]
fn hessian_cross_terms_match_fd_of_score() {
    for draw in [2, 5, 9] {
        let (data, params) = random_case(draw);
        let h = hessian_beta(&data, &params).unwrap();
        let m = data.len();
        let beta = params.beta(m);
        for j in 0..beta.len() {
            let step = 1e-6 * beta[j];
            let mut plus = beta.clone();
            plus[j] += step;
            let mut minus = beta.clone();
            minus[j] -= step;
            let sp = score_beta(&data, &params.with_beta(&plus, m).unwrap()).unwrap();
            let sm = score_beta(&data, &params.with_beta(&minus, m).unwrap()).unwrap();
            for k in 0..beta.len() {
                let fd = (sp[k] - sm[k]) / (2.0 * step);
                assert!(
                    close_rel(h[(k, j)], fd, 1e-4) || (h[(k, j)] - fd).abs() < 1e-5,
                    "draw {draw} H[{k},{j}]: analytic {} vs fd {fd}",
                    h[(k, j)]
                );
            }
        }
    }
}

#[test]
fn gaussian_hessian_is_the_large_shape_limit() {
    // At nu = 1e8 the reweighting terms are numerically gone, so the two
    // curvature paths agree.
    let (data, mut params) = random_case(4);
    params.nu = Nu::Finite(1e8);
    let finite = hessian_beta(&data, &params).unwrap();
    params.nu = Nu::Infinity;
    let gaussian = hessian_beta(&data, &params).unwrap();
    let scale = gaussian.amax().max(1.0);
    assert!(
        (&finite - &gaussian).amax() <= 1e-5 * scale,
        "max deviation {}",
        (&finite - &gaussian).amax()
    );
}

#[test]
fn untied_kernels_still_match_finite_differences() {
    use etpr::kernels::se_plus_lin;
    use etpr::model::{Curve, Dataset, KernelSet, ModelParams};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;

    let mut rng = etpr::rng::stream(88, 0);
    let curves = (0..2)
        .map(|_| {
            let x = DMatrix::from_fn(5, 1, |_, _| rng.gen_range(-1.0..1.0));
            let y = DVector::from_fn(5, |_, _| rng.gen_range(-1.5..1.5));
            Curve::new(x, y).unwrap()
        })
        .collect();
    let data = Dataset::new(curves).unwrap();
    let k1 = se_plus_lin(1, vec![0.5, 2.0], vec![0.3]).unwrap();
    let k2 = se_plus_lin(1, vec![1.2, 0.7], vec![0.9]).unwrap();
    let params = ModelParams::new(
        0.2,
        KernelSet::PerCurve(vec![k1, k2]),
        Nu::Finite(1.6),
    )
    .unwrap();
    let analytic = score_beta(&data, &params).unwrap();
    assert_eq!(analytic.len(), 7); // phi + 3 + 3
    for k in 0..analytic.len() {
        let fd = fd_loglik_beta(&data, &params, k, 1e-6);
        assert!(
            close_rel(analytic[k], fd, 1e-5),
            "beta[{k}]: analytic {} vs fd {fd}",
            analytic[k]
        );
    }
}
