//! Seeded simulation lab: data generators, coverage and superuniformity
//! estimators, and the shift/drift diagnostics that turn robustness bounds
//! into checkable numbers.
//!
//! Every estimator derives one RNG stream per trial from
//! `(master seed, trial index)`, so results are independent of execution
//! order and a parallel run is bit-identical to a serial one.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::engine::{self, derive_rng, PartialInfo, SimRng};
use crate::methods::{LikelihoodRatioFn, Method, PointWeight};
use crate::{DataPoint, Dataset, Error, Result, ScoreFunction};

/// Normal cdf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn log_normal_pdf(x: f64, mean: f64) -> f64 {
    let z = x - mean;
    -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// A synthetic data-generating process: `n` training points plus one test
/// point, with a linear regression response `y = beta' x + noise`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// All `n + 1` points i.i.d. with standard normal features.
    Exchangeable {
        n: usize,
        d: usize,
        beta: Vec<f64>,
        noise_sd: f64,
    },
    /// Training features centered at `train_mean`, the test feature at
    /// `test_mean`, identity covariance; the response law is unchanged, so
    /// the exact density ratio is a known log-linear function of `x`.
    CovariateShift {
        n: usize,
        d: usize,
        train_mean: Vec<f64>,
        test_mean: Vec<f64>,
        beta: Vec<f64>,
        noise_sd: f64,
    },
    /// Training point `i` has feature mean `per_index_means[i]` on every
    /// coordinate and the test point has mean `test_mean`: independent but
    /// not identically distributed.
    Drift {
        n: usize,
        d: usize,
        per_index_means: Vec<f64>,
        test_mean: f64,
        beta: Vec<f64>,
        noise_sd: f64,
    },
    /// Feedback acquisition: the first feature is standard normal and each
    /// later feature is normal around the anchor chosen by the
    /// acquisition rule from the points so far. The sequence density is
    /// known in closed form, which makes the exact ordering ratio
    /// available.
    Fcs {
        n: usize,
        d: usize,
        acquisition: Acquisition,
        beta: Vec<f64>,
        noise_sd: f64,
    },
}

/// Acquisition rules for the feedback generator.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    /// Center the next feature draw at the features of the point with the
    /// largest response so far.
    BestResponseNormal,
    /// Center the next feature draw at the mean of the features so far,
    /// which depends on features only.
    FeatureMeanNormal,
}

/// One generated trial.
#[derive(Clone, Debug)]
pub struct Trial {
    pub training: Vec<DataPoint>,
    pub test: DataPoint,
}

impl Trial {
    pub fn augmented(&self) -> Result<Dataset> {
        Dataset::augment(&self.training, self.test.x(), self.test.y())
    }
}

impl GeneratorSpec {
    pub fn n(&self) -> usize {
        match self {
            GeneratorSpec::Exchangeable { n, .. }
            | GeneratorSpec::CovariateShift { n, .. }
            | GeneratorSpec::Drift { n, .. }
            | GeneratorSpec::Fcs { n, .. } => *n,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GeneratorSpec::Exchangeable { d, .. }
            | GeneratorSpec::CovariateShift { d, .. }
            | GeneratorSpec::Drift { d, .. }
            | GeneratorSpec::Fcs { d, .. } => *d,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d, beta, noise_sd) = match self {
            GeneratorSpec::Exchangeable { n, d, beta, noise_sd } => (*n, *d, beta, *noise_sd),
            GeneratorSpec::CovariateShift {
                n,
                d,
                train_mean,
                test_mean,
                beta,
                noise_sd,
            } => {
                if train_mean.len() != *d || test_mean.len() != *d {
                    return Err(Error::Config(
                        "shift means must match the feature dimension".into(),
                    ));
                }
                (*n, *d, beta, *noise_sd)
            }
            GeneratorSpec::Drift {
                n,
                d,
                per_index_means,
                beta,
                noise_sd,
                ..
            } => {
                if per_index_means.len() != *n {
                    return Err(Error::Config(
                        "drift needs one mean per training index".into(),
                    ));
                }
                (*n, *d, beta, *noise_sd)
            }
            GeneratorSpec::Fcs { n, d, beta, noise_sd, .. } => (*n, *d, beta, *noise_sd),
        };
        if n == 0 || d == 0 {
            return Err(Error::Config("n and d must be positive".into()));
        }
        if beta.len() != d {
            return Err(Error::Config(
                "beta must match the feature dimension".into(),
            ));
        }
        if !(noise_sd > 0.0) || !noise_sd.is_finite() {
            return Err(Error::Config("noise_sd must be positive".into()));
        }
        Ok(())
    }

    /// Draws one trial.
    pub fn generate(&self, rng: &mut SimRng) -> Result<Trial> {
        self.validate()?;
        let d = self.dim();
        let n = self.n();
        let beta = match self {
            GeneratorSpec::Exchangeable { beta, .. }
            | GeneratorSpec::CovariateShift { beta, .. }
            | GeneratorSpec::Drift { beta, .. }
            | GeneratorSpec::Fcs { beta, .. } => beta.clone(),
        };
        let noise_sd = match self {
            GeneratorSpec::Exchangeable { noise_sd, .. }
            | GeneratorSpec::CovariateShift { noise_sd, .. }
            | GeneratorSpec::Drift { noise_sd, .. }
            | GeneratorSpec::Fcs { noise_sd, .. } => *noise_sd,
        };
        let std_normal =
            |rng: &mut SimRng| rng.sample::<f64, _>(rand_distr::StandardNormal);
        let respond = |x: &[f64], rng: &mut SimRng| -> f64 {
            let mean: f64 = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            mean + noise_sd * std_normal(rng)
        };
        match self {
            GeneratorSpec::Exchangeable { .. } => {
                let draw = |rng: &mut SimRng| -> Result<DataPoint> {
                    let x: Vec<f64> = (0..d).map(|_| std_normal(rng)).collect();
                    let y = respond(&x, rng);
                    DataPoint::new(x, y)
                };
                let training = (0..n).map(|_| draw(rng)).collect::<Result<Vec<_>>>()?;
                let test = draw(rng)?;
                Ok(Trial { training, test })
            }
            GeneratorSpec::CovariateShift {
                train_mean,
                test_mean,
                ..
            } => {
                let draw = |mean: &[f64], rng: &mut SimRng| -> Result<DataPoint> {
                    let x: Vec<f64> = mean.iter().map(|&m| m + std_normal(rng)).collect();
                    let y = respond(&x, rng);
                    DataPoint::new(x, y)
                };
                let training = (0..n)
                    .map(|_| draw(train_mean, rng))
                    .collect::<Result<Vec<_>>>()?;
                let test = draw(test_mean, rng)?;
                Ok(Trial { training, test })
            }
            GeneratorSpec::Drift {
                per_index_means,
                test_mean,
                ..
            } => {
                let draw = |mean: f64, rng: &mut SimRng| -> Result<DataPoint> {
                    let x: Vec<f64> = (0..d).map(|_| mean + std_normal(rng)).collect();
                    let y = respond(&x, rng);
                    DataPoint::new(x, y)
                };
                let training = per_index_means
                    .iter()
                    .map(|&m| draw(m, rng))
                    .collect::<Result<Vec<_>>>()?;
                let test = draw(*test_mean, rng)?;
                Ok(Trial { training, test })
            }
            GeneratorSpec::Fcs { acquisition, .. } => {
                let mut points: Vec<DataPoint> = Vec::with_capacity(n + 1);
                for _ in 0..=n {
                    let anchor = acquisition_anchor(*acquisition, &points, d);
                    let x: Vec<f64> = anchor.iter().map(|&a| a + std_normal(rng)).collect();
                    let y = respond(&x, rng);
                    points.push(DataPoint::new(x, y)?);
                }
                let test = points.pop().expect("n + 1 points were generated");
                Ok(Trial {
                    training: points,
                    test,
                })
            }
        }
    }

    /// Exact log density ratio `log(dP_test / dP_train)(x)` for the shift
    /// generator.
    pub fn log_shift_ratio(&self, x: &[f64]) -> Result<f64> {
        match self {
            GeneratorSpec::CovariateShift {
                train_mean,
                test_mean,
                ..
            } => Ok(x
                .iter()
                .zip(train_mean.iter().zip(test_mean.iter()))
                .map(|(&xi, (&a, &b))| (b - a) * xi + (a * a - b * b) / 2.0)
                .sum()),
            _ => Err(Error::Config(
                "the exact shift ratio is only defined for the shift generator".into(),
            )),
        }
    }

    /// The exact shift ratio as a point weight.
    pub fn oracle_weight(&self) -> Result<PointWeight> {
        let spec = self.clone();
        self.log_shift_ratio(&vec![0.0; self.dim()])?;
        Ok(Arc::new(move |p: &DataPoint| {
            spec.log_shift_ratio(p.x())
                .expect("shift generator validated")
                .exp()
        }))
    }

    /// Exact log ratio `log(dP_test / dP_i)(x)` between the test law and
    /// the law of training index `i` under the drift generator.
    pub fn log_drift_ratio(&self, i: usize, x: &[f64]) -> Result<f64> {
        match self {
            GeneratorSpec::Drift {
                per_index_means,
                test_mean,
                ..
            } => {
                let mi = *per_index_means.get(i).ok_or(Error::IndexOutOfRange {
                    index: i,
                    len: per_index_means.len(),
                })?;
                Ok(x
                    .iter()
                    .map(|&xi| (test_mean - mi) * xi + (mi * mi - test_mean * test_mean) / 2.0)
                    .sum())
            }
            _ => Err(Error::Config(
                "the drift ratio is only defined for the drift generator".into(),
            )),
        }
    }

    /// Exact ratio between the test density and the average training
    /// density under the drift generator, as a point weight. Its mean
    /// under the averaged training law is one, so no renormalization is
    /// needed.
    pub fn drift_mixture_weight(&self) -> Result<PointWeight> {
        match self {
            GeneratorSpec::Drift {
                per_index_means,
                test_mean,
                d,
                ..
            } => {
                if *d != 1 {
                    return Err(Error::Config(
                        "the drift mixture weight needs one-dimensional features".into(),
                    ));
                }
                let means = per_index_means.clone();
                let test_mean = *test_mean;
                Ok(Arc::new(move |p: &DataPoint| {
                    let x = p.x()[0];
                    let test = log_normal_pdf(x, test_mean).exp();
                    let mixture: f64 = means
                        .iter()
                        .map(|&m| log_normal_pdf(x, m).exp())
                        .sum::<f64>()
                        / means.len() as f64;
                    test / mixture
                }))
            }
            _ => Err(Error::Config(
                "the drift mixture weight is only defined for the drift generator".into(),
            )),
        }
    }

    /// Log sequence density of the feedback generator's feature draws
    /// along the given point ordering (the response factors are
    /// order-independent and cancel from every ratio).
    fn fcs_log_feature_factors(&self, points: &[DataPoint]) -> Result<f64> {
        let acquisition = match self {
            GeneratorSpec::Fcs { acquisition, .. } => *acquisition,
            _ => {
                return Err(Error::Config(
                    "feedback factors are only defined for the feedback generator".into(),
                ))
            }
        };
        let d = self.dim();
        let mut log_density = 0.0;
        for t in 0..points.len() {
            let anchor = acquisition_anchor(acquisition, &points[..t], d);
            for (j, &xj) in points[t].x().iter().enumerate() {
                log_density += log_normal_pdf(xj, anchor[j]);
            }
        }
        Ok(log_density)
    }

    /// The exact ordering density ratio of the feedback generator: the
    /// ratio of acquisition factor products between the reordered and
    /// observed sequences.
    pub fn fcs_likelihood_ratio(&self) -> Result<LikelihoodRatioFn> {
        match self {
            GeneratorSpec::Fcs { .. } => {}
            _ => {
                return Err(Error::Config(
                    "the ordering ratio is only defined for the feedback generator".into(),
                ))
            }
        }
        let spec = self.clone();
        Ok(LikelihoodRatioFn::new(move |z: &Dataset, sigma| {
            let reordered = z.apply_perm(sigma).expect("permutation fits the data");
            spec.fcs_log_feature_factors(reordered.points())
                .expect("feedback generator validated")
                - spec
                    .fcs_log_feature_factors(z.points())
                    .expect("feedback generator validated")
        }))
    }
}

fn acquisition_anchor(acquisition: Acquisition, so_far: &[DataPoint], d: usize) -> Vec<f64> {
    if so_far.is_empty() {
        return vec![0.0; d];
    }
    match acquisition {
        Acquisition::BestResponseNormal => so_far
            .iter()
            .max_by(|a, b| a.y().partial_cmp(&b.y()).expect("finite responses"))
            .expect("nonempty prefix")
            .x()
            .to_vec(),
        Acquisition::FeatureMeanNormal => {
            let mut mean = vec![0.0; d];
            for p in so_far {
                for (m, &xj) in mean.iter_mut().zip(p.x()) {
                    *m += xj;
                }
            }
            for m in &mut mean {
                *m /= so_far.len() as f64;
            }
            mean
        }
    }
}

/// Coverage estimate for one method at one level.
#[derive(Clone, Debug, Serialize)]
pub struct CoverageReport {
    pub method: String,
    pub alpha: f64,
    pub trials: usize,
    pub covered: usize,
    pub coverage: f64,
    /// 95% Wilson interval for the coverage probability.
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// The coverage the theory guarantees (1 - alpha minus any inflation
    /// allowance).
    pub theoretical_floor: f64,
    /// Inflation allowance entering the floor, when one applies.
    pub inflation: Option<f64>,
    pub seed: u64,
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    let z = 1.959963984540054_f64;
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn map_trials<T, F>(trials: usize, parallel: bool, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Send + Sync,
{
    if parallel {
        (0..trials).into_par_iter().map(f).collect()
    } else {
        (0..trials).map(f).collect()
    }
}

/// Estimates the marginal coverage `P(p(Y) > alpha)` of a method under a
/// generator by direct evaluation of the p-value at the true response.
/// `inflation` widens the reported theoretical floor below `1 - alpha`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_coverage(
    method: &Method,
    spec: &GeneratorSpec,
    alpha: f64,
    trials: usize,
    seed: u64,
    parallel: bool,
    inflation: Option<f64>,
) -> Result<CoverageReport> {
    engine::validate_alpha(alpha)?;
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    spec.validate()?;
    let outcomes = map_trials(trials, parallel, |t| -> Result<bool> {
        let mut rng = derive_rng(seed, t as u64);
        let trial = spec.generate(&mut rng)?;
        let z = trial.augmented()?;
        let aux = method.draw_aux(&trial.training, trial.test.x(), &mut rng)?;
        let res = method.pvalue(&z, &aux, None, &mut rng)?;
        Ok(res.p > alpha)
    })?;
    let covered = outcomes.iter().filter(|&&c| c).count();
    let coverage = covered as f64 / trials as f64;
    let (ci_lo, ci_hi) = wilson_interval(covered, trials);
    Ok(CoverageReport {
        method: method.name().to_string(),
        alpha,
        trials,
        covered,
        coverage,
        ci_lo,
        ci_hi,
        theoretical_floor: (1.0 - alpha - inflation.unwrap_or(0.0)).max(0.0),
        inflation,
        seed,
    })
}

/// How p-values are produced in a superuniformity sweep.
#[derive(Clone)]
pub enum PvalueScheme {
    /// The method's own (exact or internally sampled) p-value.
    Method(Method),
    /// Monte Carlo p-value over `m` uniform reorderings plus the observed
    /// one.
    McExchangeable { score: ScoreFunction, m: usize },
    /// Self-normalized importance sampling against a proposal that tilts
    /// orderings by `tilt` times the response placed last; the target is
    /// the uniform (correct) model.
    IsExchangeable {
        score: ScoreFunction,
        m: usize,
        tilt: f64,
    },
}

impl PvalueScheme {
    pub fn label(&self) -> String {
        match self {
            PvalueScheme::Method(m) => m.name().to_string(),
            PvalueScheme::McExchangeable { m, .. } => format!("mc[{m}]"),
            PvalueScheme::IsExchangeable { m, tilt, .. } => format!("is[{m},tilt={tilt}]"),
        }
    }

    fn pvalue(&self, trial: &Trial, rng: &mut SimRng) -> Result<f64> {
        let z = trial.augmented()?;
        match self {
            PvalueScheme::Method(method) => {
                let aux = method.draw_aux(&trial.training, trial.test.x(), rng)?;
                Ok(method.pvalue(&z, &aux, None, rng)?.p)
            }
            PvalueScheme::McExchangeable { score, m } => {
                let u = PartialInfo::BagOnly(z.to_bag());
                let model = engine::uniform_permutation_model(usize::MAX);
                Ok(engine::pvalue_mc(&model, score, &z, &u, *m, rng)?.p)
            }
            PvalueScheme::IsExchangeable { score, m, tilt } => {
                let u = PartialInfo::BagOnly(z.to_bag());
                let target = engine::uniform_permutation_model(usize::MAX);
                let proposal = tilted_last_response_model(*tilt);
                Ok(engine::pvalue_is(&target, &proposal, score, &z, &u, *m, rng)?.p)
            }
        }
    }
}

/// Proposal over reorderings of the bag whose probability is proportional
/// to `exp(tilt * y_last)`: the last position is drawn by a softmax over
/// responses and the rest is a uniform shuffle.
pub fn tilted_last_response_model(tilt: f64) -> engine::ConditionalModel {
    engine::ConditionalModel::from_sampler(move |u: &PartialInfo, rng: &mut SimRng| {
        let bag = u.bag();
        let mut points = bag.points().to_vec();
        let weights: Vec<f64> = points.iter().map(|p| (tilt * p.y()).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = points.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            pick -= w;
            if pick <= 0.0 {
                chosen = i;
                break;
            }
        }
        let last = points.remove(chosen);
        use rand::seq::SliceRandom;
        points.shuffle(rng);
        points.push(last);
        Dataset::new(points).expect("bag points form a dataset")
    })
    .with_log_weight(move |z: &Dataset, _u: &PartialInfo| Ok(tilt * z.last().y()))
}

/// Empirical cdf of the p-value at the true response over a level grid:
/// returns `(alpha, P(p <= alpha))` pairs. A superuniform p-value stays at
/// or below the diagonal up to binomial noise.
pub fn superuniformity_curve(
    scheme: &PvalueScheme,
    spec: &GeneratorSpec,
    alpha_grid: &[f64],
    trials: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<(f64, f64)>> {
    if alpha_grid.is_empty() {
        return Err(Error::InvalidArgument("need a nonempty level grid".into()));
    }
    for &a in alpha_grid {
        engine::validate_alpha(a)?;
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    spec.validate()?;
    let pvalues = map_trials(trials, parallel, |t| -> Result<f64> {
        let mut rng = derive_rng(seed, t as u64);
        let trial = spec.generate(&mut rng)?;
        scheme.pvalue(&trial, &mut rng)
    })?;
    Ok(alpha_grid
        .iter()
        .map(|&a| {
            let hits = pvalues.iter().filter(|&&p| p <= a).count();
            (a, hits as f64 / trials as f64)
        })
        .collect())
}

/// Monte Carlo estimate of a coverage-inflation allowance with its
/// standard error.
#[derive(Clone, Debug, Serialize)]
pub struct InflationEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Estimates `(1/2) E_train | w_bar - w* |` for the shift generator, where
/// `w_bar` is `w` rescaled by its estimated training mean and `w*` is the
/// exact density ratio. This is the coverage inflation a misspecified
/// weight costs weighted conformal prediction.
///
/// A split-half stability diagnostic on the normalizer guards against a
/// divergent weight mean.
pub fn estimate_l1_inflation(
    spec: &GeneratorSpec,
    w: &PointWeight,
    samples: usize,
    seed: u64,
) -> Result<InflationEstimate> {
    if samples < 100 {
        return Err(Error::InvalidArgument("need at least 100 samples".into()));
    }
    spec.validate()?;
    let draws = sample_training_points(spec, samples, seed)?;
    let vals: Vec<f64> = draws.iter().map(|p| w(p)).collect();
    if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Diagnostic(
            "weight produced a negative or non-finite value".into(),
        ));
    }
    let half = samples / 2;
    let mean_a = vals[..half].iter().sum::<f64>() / half as f64;
    let mean_b = vals[half..].iter().sum::<f64>() / (samples - half) as f64;
    let norm = vals.iter().sum::<f64>() / samples as f64;
    if !(norm > 0.0) {
        return Err(Error::Diagnostic("weight mean is not positive".into()));
    }
    if (mean_a - mean_b).abs() / norm > 0.5 {
        return Err(Error::Diagnostic(format!(
            "weight mean is unstable across halves ({mean_a} vs {mean_b}); the \
             training-mean normalizer may not exist"
        )));
    }
    let integrand: Vec<f64> = draws
        .iter()
        .zip(vals.iter())
        .map(|(p, &v)| {
            let w_star = spec
                .log_shift_ratio(p.x())
                .expect("shift generator validated")
                .exp();
            0.5 * (v / norm - w_star).abs()
        })
        .collect();
    Ok(mean_with_se(&integrand, samples))
}

fn mean_with_se(values: &[f64], samples: usize) -> InflationEstimate {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (values.len() as f64 - 1.0);
    InflationEstimate {
        estimate: mean,
        std_error: (var / values.len() as f64).sqrt(),
        samples,
    }
}

fn sample_training_points(
    spec: &GeneratorSpec,
    samples: usize,
    seed: u64,
) -> Result<Vec<DataPoint>> {
    let mut rng = derive_rng(seed, u64::MAX);
    let mut out = Vec::with_capacity(samples);
    while out.len() < samples {
        let trial = spec.generate(&mut rng)?;
        for p in trial.training {
            if out.len() == samples {
                break;
            }
            out.push(p);
        }
    }
    Ok(out)
}

/// The two per-index terms of the drift robustness bound, plus their
/// average: miscoverage exceeds `alpha` by at most
/// `mean_i [ E_i (w*_i - w_bar)_+ + TV(F_i, F_mixture) ]`.
#[derive(Clone, Debug, Serialize)]
pub struct DriftBound {
    /// Monte Carlo estimates of `E_i (w*_i - w_bar)_+` per training index.
    pub positive_part_terms: Vec<f64>,
    /// Total-variation distances between each per-index law and their
    /// average, by quadrature over the one-dimensional feature.
    pub tv_terms: Vec<f64>,
    pub total: f64,
}

/// Evaluates the drift bound terms for the drift generator with weight
/// `w`. Features must be one-dimensional so the total-variation terms can
/// be integrated by quadrature.
pub fn drift_bound_terms(
    spec: &GeneratorSpec,
    w: &PointWeight,
    samples: usize,
    seed: u64,
) -> Result<DriftBound> {
    let per_index_means = match spec {
        GeneratorSpec::Drift {
            per_index_means,
            d: 1,
            ..
        } => per_index_means.clone(),
        GeneratorSpec::Drift { .. } => {
            return Err(Error::Config(
                "drift bound terms need one-dimensional features".into(),
            ))
        }
        _ => {
            return Err(Error::Config(
                "drift bound terms are only defined for the drift generator".into(),
            ))
        }
    };
    if samples < 100 {
        return Err(Error::InvalidArgument("need at least 100 samples".into()));
    }
    let n = per_index_means.len();
    // Normalizer: the mean of w under the averaged training law, averaged
    // over equally many draws from each per-index law.
    let mut rng = derive_rng(seed, u64::MAX - 1);
    let mut per_index_draws: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &m in &per_index_means {
        let draws: Vec<f64> = (0..samples)
            .map(|_| m + rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        per_index_draws.push(draws);
    }
    let eval_w = |x: f64| -> Result<f64> {
        let v = w(&DataPoint::scalar(x, 0.0)?);
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Diagnostic(
                "weight produced a negative or non-finite value".into(),
            ));
        }
        Ok(v)
    };
    let mut norm_acc = 0.0;
    for draws in &per_index_draws {
        for &x in draws {
            norm_acc += eval_w(x)?;
        }
    }
    let norm = norm_acc / (n * samples) as f64;
    if !(norm > 0.0) {
        return Err(Error::Diagnostic("weight mean is not positive".into()));
    }
    let mut positive_part_terms = Vec::with_capacity(n);
    for (i, draws) in per_index_draws.iter().enumerate() {
        let mut acc = 0.0;
        for &x in draws {
            let w_star = spec.log_drift_ratio(i, &[x])?.exp();
            acc += (w_star - eval_w(x)? / norm).max(0.0);
        }
        positive_part_terms.push(acc / samples as f64);
    }
    let tv_terms: Vec<f64> = per_index_means
        .iter()
        .map(|&m| tv_gaussian_vs_mixture(m, &per_index_means))
        .collect();
    let total = positive_part_terms
        .iter()
        .zip(tv_terms.iter())
        .map(|(a, b)| a + b)
        .sum::<f64>()
        / n as f64;
    Ok(DriftBound {
        positive_part_terms,
        tv_terms,
        total,
    })
}

/// Total variation between two unit-variance Gaussians, in closed form.
pub fn tv_two_gaussians(mean_a: f64, mean_b: f64) -> f64 {
    2.0 * normal_cdf((mean_a - mean_b).abs() / 2.0) - 1.0
}

/// Total variation between a unit-variance Gaussian at `mean` and the
/// equal mixture of unit-variance Gaussians at `means`, by trapezoidal
/// quadrature.
pub fn tv_gaussian_vs_mixture(mean: f64, means: &[f64]) -> f64 {
    let lo = means
        .iter()
        .chain(std::iter::once(&mean))
        .cloned()
        .fold(f64::INFINITY, f64::min)
        - 10.0;
    let hi = means
        .iter()
        .chain(std::iter::once(&mean))
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
        + 10.0;
    let step = 1e-3;
    let mut x = lo;
    let mut acc = 0.0;
    let density_gap = |x: f64| -> f64 {
        let one = log_normal_pdf(x, mean).exp();
        let mix: f64 =
            means.iter().map(|&m| log_normal_pdf(x, m).exp()).sum::<f64>() / means.len() as f64;
        (one - mix).abs()
    };
    let mut prev = density_gap(x);
    while x < hi {
        let next = density_gap(x + step);
        acc += 0.5 * (prev + next) * step;
        prev = next;
        x += step;
    }
    0.5 * acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::abs_residual_mean;

    fn shift_spec() -> GeneratorSpec {
        GeneratorSpec::CovariateShift {
            n: 10,
            d: 1,
            train_mean: vec![0.0],
            test_mean: vec![0.5],
            beta: vec![1.0],
            noise_sd: 1.0,
        }
    }

    #[test]
    fn generators_emit_the_requested_shape() {
        let specs = vec![
            GeneratorSpec::Exchangeable {
                n: 5,
                d: 2,
                beta: vec![1.0, -1.0],
                noise_sd: 0.5,
            },
            shift_spec(),
            GeneratorSpec::Drift {
                n: 4,
                d: 1,
                per_index_means: vec![0.0, 0.1, 0.2, 0.3],
                test_mean: 0.4,
                beta: vec![1.0],
                noise_sd: 1.0,
            },
            GeneratorSpec::Fcs {
                n: 6,
                d: 1,
                acquisition: Acquisition::BestResponseNormal,
                beta: vec![1.0],
                noise_sd: 1.0,
            },
        ];
        for spec in specs {
            let mut rng = derive_rng(1, 0);
            let trial = spec.generate(&mut rng).unwrap();
            assert_eq!(trial.training.len(), spec.n());
            assert_eq!(trial.test.dim(), spec.dim());
        }
    }

    #[test]
    fn generation_is_deterministic_per_stream() {
        let spec = shift_spec();
        let a = spec.generate(&mut derive_rng(9, 3)).unwrap();
        let b = spec.generate(&mut derive_rng(9, 3)).unwrap();
        assert_eq!(a.training, b.training);
        assert_eq!(a.test, b.test);
    }

    #[test]
    fn shift_ratio_matches_density_quotient() {
        let spec = shift_spec();
        for x in [-2.0, -0.3, 0.0, 0.7, 2.5] {
            let direct = log_normal_pdf(x, 0.5) - log_normal_pdf(x, 0.0);
            assert!((spec.log_shift_ratio(&[x]).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_weight_has_unit_training_mean() {
        let spec = shift_spec();
        let w = spec.oracle_weight().unwrap();
        let est = estimate_l1_inflation(&spec, &w, 20_000, 7).unwrap();
        // The exact ratio has no misspecification; only the normalizer's
        // sampling noise keeps the estimate off zero.
        assert!(est.estimate < 0.05, "estimate {}", est.estimate);
    }

    #[test]
    fn fcs_ratio_is_zero_at_identity_and_consistent_with_factors() {
        let spec = GeneratorSpec::Fcs {
            n: 3,
            d: 1,
            acquisition: Acquisition::BestResponseNormal,
            beta: vec![1.0],
            noise_sd: 1.0,
        };
        let mut rng = derive_rng(2, 0);
        let trial = spec.generate(&mut rng).unwrap();
        let z = trial.augmented().unwrap();
        let lr = spec.fcs_likelihood_ratio().unwrap();
        assert_eq!(lr.log_ratio(&z, &crate::Permutation::identity(4)), 0.0);
        let sigma = crate::Permutation::new(vec![3, 1, 0, 2]).unwrap();
        let direct = spec
            .fcs_log_feature_factors(z.apply_perm(&sigma).unwrap().points())
            .unwrap()
            - spec.fcs_log_feature_factors(z.points()).unwrap();
        assert!((lr.log_ratio(&z, &sigma) - direct).abs() < 1e-12);
    }

    #[test]
    fn wilson_interval_contains_the_point_estimate() {
        let (lo, hi) = wilson_interval(90, 100);
        assert!(lo < 0.9 && 0.9 < hi);
        assert!(lo > 0.8 && hi < 0.97);
    }

    #[test]
    fn coverage_runs_are_bit_identical_serial_and_parallel() {
        let spec = shift_spec();
        let method = Method::standard_cp(abs_residual_mean()).unwrap();
        let serial = estimate_coverage(&method, &spec, 0.2, 200, 3, false, None).unwrap();
        let parallel = estimate_coverage(&method, &spec, 0.2, 200, 3, true, None).unwrap();
        assert_eq!(serial.covered, parallel.covered);
        assert_eq!(serial.coverage, parallel.coverage);
    }

    #[test]
    fn tv_quadrature_matches_the_two_gaussian_closed_form() {
        let q = tv_gaussian_vs_mixture(0.0, &[1.0]);
        let exact = tv_two_gaussians(0.0, 1.0);
        assert!((q - exact).abs() < 1e-4, "{q} vs {exact}");
    }

    #[test]
    fn drift_bound_is_small_for_the_exact_mixture_weight() {
        let spec = GeneratorSpec::Drift {
            n: 4,
            d: 1,
            per_index_means: vec![0.0, 0.0, 0.5, 0.5],
            test_mean: 0.25,
            beta: vec![1.0],
            noise_sd: 1.0,
        };
        let w = spec.drift_mixture_weight().unwrap();
        let bound = drift_bound_terms(&spec, &w, 5_000, 11).unwrap();
        assert_eq!(bound.positive_part_terms.len(), 4);
        assert_eq!(bound.tv_terms.len(), 4);
        assert!(bound.total > 0.0 && bound.total < 1.0);
    }

    #[test]
    fn strict_unknown_fields_are_rejected() {
        let json = r#"{"type":"exchangeable","n":5,"d":1,"beta":[1.0],"noise_sd":1.0,"extra":2}"#;
        assert!(serde_json::from_str::<GeneratorSpec>(json).is_err());
    }
}
