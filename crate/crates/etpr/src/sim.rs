//! Simulation benchmark harness: data generators for the six process
//! cases, outlier/contamination injectors, MSE evaluation and a seeded
//! replication runner.
//!
//! The generating kernel is always `k_se + k_lin` with true parameters
//! `theta_true = (eta0, eta_1..eta_p, xi_0..xi_{p-1})`. The six cases are
//!
//! 1. `f ~ GP(0, k)`, Gaussian noise,
//! 2. as (1) with a different `theta_true` convention,
//! 3. `f ~ GP(0, k)`, noise `sqrt(phi) * t_2`,
//! 4. as (3),
//! 5. `f` and the noise are independent heavy-tailed processes with shape
//!    `(2, 2)` (one latent scale per curve for each),
//! 6. `f` and the noise share a single latent scale per curve.
//!
//! Cases 1/2 and 3/4 differ only through the configured `theta_true` and
//! `phi_true`, which the caller supplies explicitly.
//!
//! Every replication derives its own seed from `(seed, replication)`, and
//! all substreams (function draw, noise, subset selection, contamination)
//! are split deterministically, so replications can run in parallel and
//! reproduce exactly.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::InvGamma;
use crate::error::{Error, Result};
use crate::estimate::{fit, FitOptions, Mode, NuPolicy};
use crate::kernels::{se_plus_lin, KernelConfig};
use crate::linalg::cholesky_with_jitter;
use crate::model::{Curve, Dataset};
use crate::predict::predict_f;
use crate::rng::{derive, stream};

// Substream tags for seed derivation.
const TAG_F: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_SPLIT: u64 = 3;
const TAG_CONTAMINATE: u64 = 4;
const TAG_SCALE: u64 = 5;
const TAG_FIT: u64 = 6;

/// Shape/scale of the heavy-tailed generator cases (5) and (6).
const HEAVY_NU: f64 = 2.0;
const HEAVY_OMEGA: f64 = 2.0;

/// How training points are chosen from the full design grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRule {
    /// `n` points with orders evenly spaced over the grid.
    EvenOrders,
    /// `n - 1` points evenly spaced (by order) within the first
    /// `dense_count` grid points, plus the final grid point. Reproduces the
    /// "sparse far point" design.
    SparseLast { dense_count: usize },
}

/// Design grid and train/test split rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Design {
    /// `total` points whose coordinate `l` is evenly spaced over
    /// `ranges[l]`; the split is deterministic.
    EvenGrid {
        ranges: Vec<(f64, f64)>,
        total: usize,
        train_rule: TrainRule,
    },
    /// Same grid, but each curve's training subset of size `n` is drawn at
    /// random from the replication stream.
    RandomSubset {
        ranges: Vec<(f64, f64)>,
        total: usize,
    },
}

impl Design {
    fn ranges(&self) -> &[(f64, f64)] {
        match self {
            Design::EvenGrid { ranges, .. } | Design::RandomSubset { ranges, .. } => ranges,
        }
    }

    fn total(&self) -> usize {
        match self {
            Design::EvenGrid { total, .. } | Design::RandomSubset { total, .. } => *total,
        }
    }
}

/// Output corruption applied to training responses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contamination {
    /// Add one `Normal(0, sigma2)` draw at a fixed training index of every
    /// curve.
    GaussAtPoint { index: usize, sigma2: f64 },
    /// Add a constant at a fixed training index of every curve.
    ConstantAtPoint { index: usize, delta: f64 },
    /// Add a raw Student-t(`df`) draw at `count` randomly chosen training
    /// points of every curve.
    TError { df: f64, count: usize },
    /// Block contamination: with the given probability, shift every
    /// training point whose first coordinate falls in a random window
    /// `[t, t + width]` by `amplitude` with a random sign. The window start
    /// is uniform on `[0, 1 - width]`.
    Peak {
        probability: f64,
        amplitude: f64,
        width: f64,
    },
}

/// The per-curve random draw behind a `Peak` contamination, exposed so
/// audits and tests can reconstruct which points were shifted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeakDraw {
    /// 1.0 with the configured probability, else 0.0.
    pub active: f64,
    /// +1 or -1 with equal probability.
    pub sign: f64,
    /// Window start.
    pub start: f64,
}

impl PeakDraw {
    pub fn sample(seed: u64, curve: usize, probability: f64, width: f64) -> PeakDraw {
        let mut rng = stream(derive(seed, TAG_CONTAMINATE), curve as u64);
        let active = if rng.gen_range(0.0..1.0) < probability {
            1.0
        } else {
            0.0
        };
        let sign = if rng.gen_range(0.0..1.0) < 0.5 { 1.0 } else { -1.0 };
        let start = rng.gen_range(0.0..(1.0 - width));
        PeakDraw {
            active,
            sign,
            start,
        }
    }
}

/// One simulation scenario: generator truth, design, contamination and the
/// kernel/settings used for fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Process case, 1 through 6.
    pub case_id: u8,
    pub m: usize,
    /// Training size per curve.
    pub n: usize,
    /// Input dimension.
    pub p: usize,
    /// Generating kernel parameters `(eta0, eta_1..eta_p, xi_0..xi_{p-1})`.
    pub theta_true: Vec<f64>,
    pub phi_true: f64,
    pub design: Design,
    #[serde(default)]
    pub contamination: Option<Contamination>,
    pub replications: usize,
    pub seed: u64,
    /// Kernel family fitted to the generated data (its parameter values
    /// only shape the template; they are re-estimated).
    pub fit_kernel: KernelConfig,
    #[serde(default)]
    pub fit: FitSettings,
}

/// Optimizer settings for benchmark fits; lighter than the library default
/// because a benchmark runs hundreds of fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.case_id) {
            return Err(Error::InvalidParameter {
                reason: format!("case_id must be 1..6, got {}", self.case_id),
            });
        }
        if self.m == 0 || self.replications == 0 {
            return Err(Error::InvalidParameter {
                reason: "m and replications must be at least 1".into(),
            });
        }
        if self.theta_true.len() != 2 * self.p + 1 {
            return Err(Error::LengthMismatch {
                left: self.theta_true.len(),
                right: 2 * self.p + 1,
            });
        }
        if !(self.phi_true > 0.0) {
            return Err(Error::InvalidParameter {
                reason: "phi_true must be positive".into(),
            });
        }
        if self.design.ranges().len() != self.p {
            return Err(Error::LengthMismatch {
                left: self.design.ranges().len(),
                right: self.p,
            });
        }
        let total = self.design.total();
        if self.n == 0 || self.n >= total {
            return Err(Error::InvalidParameter {
                reason: format!("train size {} must lie in 1..{total}", self.n),
            });
        }
        if let Design::EvenGrid {
            train_rule: TrainRule::SparseLast { dense_count },
            ..
        } = self.design
        {
            if dense_count >= total || self.n < 2 || self.n - 1 > dense_count {
                return Err(Error::InvalidParameter {
                    reason: "sparse-last rule needs 2 <= n <= dense_count + 1 < total".into(),
                });
            }
        }
        if let Some(c) = &self.contamination {
            match *c {
                Contamination::GaussAtPoint { index, sigma2 } => {
                    if index >= self.n || !(sigma2 >= 0.0) {
                        return Err(Error::InvalidParameter {
                            reason: "gauss_at_point needs index < n and sigma2 >= 0".into(),
                        });
                    }
                }
                Contamination::ConstantAtPoint { index, .. } => {
                    if index >= self.n {
                        return Err(Error::InvalidParameter {
                            reason: "constant_at_point index out of range".into(),
                        });
                    }
                }
                Contamination::TError { df, count } => {
                    if !(df > 0.0) || count == 0 || count > self.n {
                        return Err(Error::InvalidParameter {
                            reason: "t_error needs df > 0 and 1 <= count <= n".into(),
                        });
                    }
                }
                Contamination::Peak {
                    probability,
                    width,
                    ..
                } => {
                    if !(0.0..=1.0).contains(&probability) || !(width > 0.0 && width < 1.0) {
                        return Err(Error::InvalidParameter {
                            reason: "peak needs probability in [0,1] and width in (0,1)".into(),
                        });
                    }
                }
            }
        }
        self.fit_kernel.validate()?;
        if self.fit_kernel.input_dim != self.p {
            return Err(Error::Dimension {
                expected: self.p,
                got: self.fit_kernel.input_dim,
            });
        }
        Ok(())
    }

    fn truth_kernel(&self) -> Result<KernelConfig> {
        let se = self.theta_true[..=self.p].to_vec();
        let lin = self.theta_true[self.p + 1..].to_vec();
        se_plus_lin(self.p, se, lin)
    }
}

/// One generated replication: training data, test data (noisy responses at
/// the held-out inputs) and the noise-free function values at the test
/// inputs, per curve.
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: Vec<DVector<f64>>,
}

/// Generate one replication of the configured scenario. Deterministic in
/// `(config.seed, replication)`.
pub fn generate(config: &ScenarioConfig, replication: usize) -> Result<Generated> {
    config.validate()?;
    let rep_seed = derive(config.seed, replication as u64);
    let grid = design_grid(&config.design);
    let total = config.design.total();
    let kernel = config.truth_kernel()?;
    let gram = kernel.gram(&grid);
    let chol = cholesky_with_jitter(&gram)?.chol;
    let l = chol.l();

    let mut train_curves = Vec::with_capacity(config.m);
    let mut test_curves = Vec::with_capacity(config.m);
    let mut truth = Vec::with_capacity(config.m);
    for curve in 0..config.m {
        // Case 6 shares one latent scale between function and noise; case 5
        // draws two independent ones.
        let mut scale_rng = stream(derive(rep_seed, TAG_SCALE), curve as u64);
        let heavy = InvGamma::new(HEAVY_NU, HEAVY_OMEGA)?;
        let (r_f, r_noise) = match config.case_id {
            5 => (
                heavy.sample_one(&mut scale_rng),
                heavy.sample_one(&mut scale_rng),
            ),
            6 => {
                let r = heavy.sample_one(&mut scale_rng);
                (r, r)
            }
            _ => (1.0, 1.0),
        };

        let mut f_rng = stream(derive(rep_seed, TAG_F), curve as u64);
        let g = DVector::from_fn(total, |_, _| f_rng.sample::<f64, _>(StandardNormal));
        let f_vals = (&l * g) * r_f.sqrt();

        let mut noise_rng = stream(derive(rep_seed, TAG_NOISE), curve as u64);
        let noise = DVector::from_fn(total, |_, _| match config.case_id {
            3 | 4 => config.phi_true.sqrt() * student_t(&mut noise_rng, 2.0),
            _ => {
                let g: f64 = noise_rng.sample(StandardNormal);
                (r_noise * config.phi_true).sqrt() * g
            }
        });
        let y = &f_vals + noise;

        let train_idx = train_indices(config, rep_seed, curve);
        let test_idx: Vec<usize> = (0..total).filter(|i| !train_idx.contains(i)).collect();
        train_curves.push(subset_curve(&grid, &y, &train_idx)?);
        test_curves.push(subset_curve(&grid, &y, &test_idx)?);
        truth.push(DVector::from_iterator(
            test_idx.len(),
            test_idx.iter().map(|&i| f_vals[i]),
        ));
    }
    Ok(Generated {
        train: Dataset::new(train_curves)?,
        test: Dataset::new(test_curves)?,
        truth,
    })
}

/// Grid whose coordinate `l` is evenly spaced over `ranges[l]`.
fn design_grid(design: &Design) -> DMatrix<f64> {
    let ranges = design.ranges();
    let total = design.total();
    DMatrix::from_fn(total, ranges.len(), |i, l| {
        let (lo, hi) = ranges[l];
        lo + (hi - lo) * i as f64 / (total - 1) as f64
    })
}

fn train_indices(config: &ScenarioConfig, rep_seed: u64, curve: usize) -> Vec<usize> {
    let total = config.design.total();
    let n = config.n;
    match &config.design {
        Design::EvenGrid { train_rule, .. } => match *train_rule {
            TrainRule::EvenOrders => spread_indices(n, total),
            TrainRule::SparseLast { dense_count } => {
                let mut idx = spread_indices(n - 1, dense_count);
                idx.push(total - 1);
                idx
            }
        },
        Design::RandomSubset { .. } => {
            let mut rng = stream(derive(rep_seed, TAG_SPLIT), curve as u64);
            let mut all: Vec<usize> = (0..total).collect();
            all.shuffle(&mut rng);
            let mut idx: Vec<usize> = all.into_iter().take(n).collect();
            idx.sort_unstable();
            idx
        }
    }
}

/// `count` indices with orders evenly spread over `0..limit`.
fn spread_indices(count: usize, limit: usize) -> Vec<usize> {
    if count == 1 {
        return vec![0];
    }
    (0..count)
        .map(|j| ((j as f64) * (limit - 1) as f64 / (count - 1) as f64).round() as usize)
        .collect()
}

fn subset_curve(grid: &DMatrix<f64>, y: &DVector<f64>, idx: &[usize]) -> Result<Curve> {
    let x = DMatrix::from_fn(idx.len(), grid.ncols(), |r, c| grid[(idx[r], c)]);
    let yv = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i]));
    Curve::new(x, yv)
}

/// Student-t draw as a normal over the square root of an independent
/// chi-square over its degrees of freedom.
fn student_t(rng: &mut ChaCha8Rng, df: f64) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    let chi2 = Gamma::new(0.5 * df, 2.0)
        .expect("df validated by caller")
        .sample(rng);
    g / (chi2 / df).sqrt()
}

/// Apply the configured contamination to a copy of the training data.
/// The original dataset is untouched.
pub fn contaminate(train: &Dataset, spec: &Contamination, seed: u64) -> Result<Dataset> {
    let mut curves: Vec<Curve> = train.curves().to_vec();
    for (ci, curve) in curves.iter_mut().enumerate() {
        let n = curve.len();
        let mut rng = stream(derive(seed, TAG_CONTAMINATE), ci as u64);
        match *spec {
            Contamination::GaussAtPoint { index, sigma2 } => {
                if index >= n {
                    return Err(Error::Index {
                        reason: format!("contamination index {index} out of range"),
                    });
                }
                let g: f64 = rng.sample(StandardNormal);
                curve.y[index] += sigma2.sqrt() * g;
            }
            Contamination::ConstantAtPoint { index, delta } => {
                if index >= n {
                    return Err(Error::Index {
                        reason: format!("contamination index {index} out of range"),
                    });
                }
                curve.y[index] += delta;
            }
            Contamination::TError { df, count } => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                for &idx in all.iter().take(count.min(n)) {
                    curve.y[idx] += student_t(&mut rng, df);
                }
            }
            Contamination::Peak {
                probability,
                amplitude,
                width,
            } => {
                let draw = PeakDraw::sample(seed, ci, probability, width);
                let shift = amplitude * draw.active * draw.sign;
                for j in 0..n {
                    let u = curve.x[(j, 0)];
                    if u >= draw.start && u <= draw.start + width {
                        curve.y[j] += shift;
                    }
                }
            }
        }
    }
    Dataset::new(curves)
}

/// Mean squared deviation between predictions and the truth.
pub fn mse(predictions: &[f64], truth: &[f64]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truth.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidParameter {
            reason: "mse needs at least one point".into(),
        });
    }
    let sum: f64 = predictions
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// A fitting method compared by the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gpr,
    EtprFixedNu(f64),
    EtprEstimateNu,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Method::Gpr => "gpr".into(),
            Method::EtprFixedNu(nu) => format!("etpr_fixed_nu_{nu}"),
            Method::EtprEstimateNu => "etpr".into(),
        }
    }

    fn fit_options(&self, settings: &FitSettings, seed: u64) -> FitOptions {
        let (mode, nu_policy) = match self {
            Method::Gpr => (Mode::Gpr, NuPolicy::Fixed(1.05)),
            Method::EtprFixedNu(nu) => (Mode::Etpr, NuPolicy::Fixed(*nu)),
            Method::EtprEstimateNu => (Mode::Etpr, NuPolicy::Estimate),
        };
        FitOptions {
            mode,
            nu_policy,
            max_iterations: settings.max_iterations,
            gradient_tolerance: settings.gradient_tolerance,
            restarts: settings.restarts,
            seed,
            ..FitOptions::default()
        }
    }
}

/// Outcome of one method on one replication.
#[derive(Debug, Clone, Serialize)]
pub struct MethodOutcome {
    pub method: String,
    pub mse: Option<f64>,
    /// Estimated `nu` when the method estimates it.
    pub nu_hat: Option<f64>,
    pub converged: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RepRecord {
    pub replication: usize,
    pub outcomes: Vec<MethodOutcome>,
}

/// Aggregate over successful replications of one method.
#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_mse: f64,
    pub sd_mse: f64,
    /// Number of replications entering the aggregate.
    pub replications: usize,
    /// Replications whose fit failed with a hard error (recorded in the
    /// per-replication records, excluded from the aggregate).
    pub n_fail: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchResult {
    pub methods: Vec<MethodSummary>,
    pub records: Vec<RepRecord>,
}

/// Run the full benchmark: per replication, generate, contaminate, fit
/// every method, predict the held-out points and score the MSE against the
/// noise-free truth (pooled over curves). Replications run in parallel with
/// independent derived seeds; the aggregation is a deterministic serial
/// reduce over the per-replication records.
pub fn run_benchmark(config: &ScenarioConfig, methods: &[Method]) -> Result<BenchResult> {
    config.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidOptions {
            reason: "benchmark needs at least one method".into(),
        });
    }
    let records: Vec<RepRecord> = (0..config.replications)
        .into_par_iter()
        .map(|replication| run_replication(config, methods, replication))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchResult {
        methods: aggregate(methods, &records),
        records,
    })
}

fn run_replication(
    config: &ScenarioConfig,
    methods: &[Method],
    replication: usize,
) -> Result<RepRecord> {
    let generated = generate(config, replication)?;
    let rep_seed = derive(config.seed, replication as u64);
    let train = match &config.contamination {
        Some(spec) => contaminate(&generated.train, spec, rep_seed)?,
        None => generated.train,
    };
    let truth_flat: Vec<f64> = generated
        .truth
        .iter()
        .flat_map(|t| t.iter().copied())
        .collect();

    let outcomes = methods
        .iter()
        .enumerate()
        .map(|(mi, method)| {
            let opts = method.fit_options(&config.fit, derive(rep_seed, TAG_FIT + mi as u64));
            match fit(&train, &config.fit_kernel, &opts) {
                Ok(model) => {
                    let mut preds = Vec::with_capacity(truth_flat.len());
                    let mut failure = None;
                    for (ci, test_curve) in generated.test.curves().iter().enumerate() {
                        match predict_f(&model, ci, &test_curve.x, 0.95) {
                            Ok(ps) => preds.extend(ps.into_iter().map(|p| p.mean)),
                            Err(e) => {
                                failure = Some(e.to_string());
                                break;
                            }
                        }
                    }
                    let nu_hat = match (method, model.params.nu) {
                        (Method::EtprEstimateNu, crate::model::Nu::Finite(v)) => Some(v),
                        _ => None,
                    };
                    match failure {
                        None => MethodOutcome {
                            method: method.label(),
                            mse: mse(&preds, &truth_flat).ok(),
                            nu_hat,
                            converged: Some(model.converged),
                            error: None,
                        },
                        Some(e) => MethodOutcome {
                            method: method.label(),
                            mse: None,
                            nu_hat,
                            converged: Some(model.converged),
                            error: Some(e),
                        },
                    }
                }
                Err(e) => MethodOutcome {
                    method: method.label(),
                    mse: None,
                    nu_hat: None,
                    converged: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(RepRecord {
        replication,
        outcomes,
    })
}

fn aggregate(methods: &[Method], records: &[RepRecord]) -> Vec<MethodSummary> {
    methods
        .iter()
        .enumerate()
        .map(|(mi, method)| {
            let values: Vec<f64> = records
                .iter()
                .filter_map(|r| r.outcomes[mi].mse)
                .collect();
            let n_fail = records.len() - values.len();
            let count = values.len();
            let mean = if count > 0 {
                values.iter().sum::<f64>() / count as f64
            } else {
                f64::NAN
            };
            let sd = if count > 1 {
                let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
                (ss / (count - 1) as f64).sqrt()
            } else {
                0.0
            };
            MethodSummary {
                method: method.label(),
                mean_mse: mean,
                sd_mse: sd,
                replications: count,
                n_fail,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base_config() -> ScenarioConfig {
        ScenarioConfig {
            case_id: 1,
            m: 1,
            n: 10,
            p: 1,
            theta_true: vec![0.05, 2.0, 0.05],
            phi_true: 0.1,
            design: Design::EvenGrid {
                ranges: vec![(0.0, 3.0)],
                total: 50,
                train_rule: TrainRule::EvenOrders,
            },
            contamination: None,
            replications: 2,
            seed: 7,
            fit_kernel: se_plus_lin(1, vec![1.0, 1.0], vec![1.0]).unwrap(),
            fit: FitSettings::default(),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = base_config();
        let a = generate(&config, 3).unwrap();
        let b = generate(&config, 3).unwrap();
        assert_eq!(a.train.curves()[0].y, b.train.curves()[0].y);
        assert_eq!(a.test.curves()[0].x, b.test.curves()[0].x);
        assert_eq!(a.truth[0], b.truth[0]);
        let c = generate(&config, 4).unwrap();
        assert_ne!(a.train.curves()[0].y, c.train.curves()[0].y);
    }

    #[test]
    fn split_sizes_are_consistent() {
        let mut config = base_config();
        config.m = 2;
        let g = generate(&config, 0).unwrap();
        assert_eq!(g.train.len(), 2);
        for ci in 0..2 {
            assert_eq!(g.train.curves()[ci].len(), 10);
            assert_eq!(g.test.curves()[ci].len(), 40);
            assert_eq!(g.truth[ci].len(), 40);
        }
    }

    #[test]
    fn sparse_last_rule_puts_far_point_in_training() {
        let mut config = base_config();
        config.design = Design::EvenGrid {
            ranges: vec![(0.0, 2.0)],
            total: 61,
            train_rule: TrainRule::SparseLast { dense_count: 46 },
        };
        let g = generate(&config, 0).unwrap();
        let train_x = &g.train.curves()[0].x;
        assert_eq!(train_x.nrows(), 10);
        // Last training input is the far grid point 2.0; the rest stay
        // within the dense prefix [0, 1.5].
        assert_relative_eq!(train_x[(9, 0)], 2.0, epsilon = 1e-12);
        for j in 0..9 {
            assert!(train_x[(j, 0)] <= 1.5 + 1e-12);
        }
        // 46th grid point (index 45) is 1.5.
        let grid = design_grid(&config.design);
        assert_relative_eq!(grid[(45, 0)], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_constant_disturbance_is_identity() {
        let config = base_config();
        let g = generate(&config, 1).unwrap();
        let out = contaminate(
            &g.train,
            &Contamination::ConstantAtPoint {
                index: 9,
                delta: 0.0,
            },
            11,
        )
        .unwrap();
        assert_eq!(out.curves()[0].y, g.train.curves()[0].y);
    }

    #[test]
    fn constant_disturbance_round_trips() {
        let config = base_config();
        let g = generate(&config, 1).unwrap();
        let spec = Contamination::ConstantAtPoint {
            index: 4,
            delta: 2.5,
        };
        let once = contaminate(&g.train, &spec, 11).unwrap();
        let back = contaminate(
            &once,
            &Contamination::ConstantAtPoint {
                index: 4,
                delta: -2.5,
            },
            11,
        )
        .unwrap();
        // Restored up to the one rounding step of y + delta; every other
        // entry is untouched bit for bit.
        for j in 0..10 {
            if j == 4 {
                assert_relative_eq!(
                    back.curves()[0].y[j],
                    g.train.curves()[0].y[j],
                    max_relative = 1e-15,
                    epsilon = 1e-15
                );
            } else {
                assert_eq!(back.curves()[0].y[j], g.train.curves()[0].y[j]);
            }
        }
        assert_relative_eq!(
            once.curves()[0].y[4] - g.train.curves()[0].y[4],
            2.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn peak_shifts_exactly_the_window() {
        let config = base_config();
        let g = generate(&config, 2).unwrap();
        let width = 1.0 / 15.0;
        let spec = Contamination::Peak {
            probability: 1.0,
            amplitude: 4.0,
            width,
        };
        let seed = 123;
        let out = contaminate(&g.train, &spec, seed).unwrap();
        let draw = PeakDraw::sample(seed, 0, 1.0, width);
        assert_eq!(draw.active, 1.0);
        for j in 0..g.train.curves()[0].len() {
            let u = g.train.curves()[0].x[(j, 0)];
            let diff = out.curves()[0].y[j] - g.train.curves()[0].y[j];
            if u >= draw.start && u <= draw.start + width {
                assert_relative_eq!(diff, 4.0 * draw.sign, epsilon = 1e-15);
            } else {
                assert_eq!(diff, 0.0);
            }
        }
    }

    #[test]
    fn gauss_at_point_matches_target_variance() {
        // Over many seeds the injected noise has variance sigma2.
        let config = base_config();
        let g = generate(&config, 0).unwrap();
        let spec = Contamination::GaussAtPoint {
            index: 9,
            sigma2: 4.0,
        };
        let n_draws = 10_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for s in 0..n_draws {
            let out = contaminate(&g.train, &spec, s as u64).unwrap();
            let d = out.curves()[0].y[9] - g.train.curves()[0].y[9];
            sum += d;
            sum_sq += d * d;
        }
        let mean = sum / n_draws as f64;
        let var = sum_sq / n_draws as f64 - mean * mean;
        // 4 MC standard errors of a sample variance of N(0, 4):
        // sd(d^2) = sqrt(2) * 4.
        let tol = 4.0 * (2.0f64.sqrt() * 4.0) / (n_draws as f64).sqrt();
        assert!((var - 4.0).abs() < tol, "var {var} tol {tol}");
    }

    #[test]
    fn mse_basics() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let c = 0.7;
        let preds: Vec<f64> = vec![1.0 + c, 2.0 + c, 3.0 + c];
        assert_relative_eq!(mse(&preds, &[1.0, 2.0, 3.0]).unwrap(), c * c, epsilon = 1e-15);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());

        // Against an independent naive loop on a seeded draw.
        let mut rng = stream(5, 0);
        let a: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut acc = 0.0;
        for i in 0..40 {
            acc += (a[i] - b[i]).powi(2);
        }
        assert_relative_eq!(mse(&a, &b).unwrap(), acc / 40.0, epsilon = 1e-14);
    }

    #[test]
    fn benchmark_aggregation_matches_serial_recount() {
        let mut config = base_config();
        config.replications = 3;
        config.n = 8;
        config.fit = FitSettings {
            restarts: 1,
            max_iterations: 60,
            gradient_tolerance: 1e-5,
        };
        let methods = [Method::Gpr, Method::EtprFixedNu(1.05)];
        let result = run_benchmark(&config, &methods).unwrap();
        assert_eq!(result.records.len(), 3);
        for (mi, summary) in result.methods.iter().enumerate() {
            let vals: Vec<f64> = result
                .records
                .iter()
                .filter_map(|r| r.outcomes[mi].mse)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert_relative_eq!(summary.mean_mse, mean, epsilon = 1e-15);
            assert_eq!(summary.replications + summary.n_fail, 3);
        }
        // Determinism end to end.
        let again = run_benchmark(&config, &methods).unwrap();
        assert_eq!(
            result.methods[0].mean_mse.to_bits(),
            again.methods[0].mean_mse.to_bits()
        );
    }

    #[test]
    fn invalid_case_is_rejected() {
        let mut config = base_config();
        config.case_id = 7;
        assert!(config.validate().is_err());
        assert!(generate(&config, 0).is_err());
    }
}
