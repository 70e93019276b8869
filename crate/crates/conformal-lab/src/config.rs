//! JSON configuration for the CLI and the configured simulation runner.
//!
//! Parsing is strict: unknown keys anywhere in the document are an error,
//! so a typo in a field name cannot silently fall back to a default.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::methods::{KernelSpec, LikelihoodRatioFn, Method, PointWeight, SwapWeights};
use crate::simlab::{
    self, estimate_coverage, superuniformity_curve, CoverageReport, GeneratorSpec, PvalueScheme,
};
use crate::{DataPoint, Error, Result, ScoreFunction};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Estimate `P(p(Y) > alpha)` per level.
    Coverage,
    /// Estimate the empirical cdf of the p-value per level.
    Superuniformity,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    StandardCp,
    SplitCp,
    Wcp,
    WcpUnnormalized,
    Nexcp,
    Rlcp,
    RlcpResample,
    Gwcp,
    GwcpNonsym,
    GwcpIs,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreConfig {
    AbsResidualMean,
    AbsResidualLs,
    RecencyWeightedLs { decay: f64 },
    KnnResidual { k: usize },
}

impl ScoreConfig {
    /// The score in its natural calling convention.
    pub fn build(&self) -> Result<ScoreFunction> {
        match self {
            ScoreConfig::AbsResidualMean => Ok(crate::scores::abs_residual_mean()),
            ScoreConfig::AbsResidualLs => Ok(crate::scores::abs_residual_ls()),
            ScoreConfig::RecencyWeightedLs { decay } => crate::scores::recency_weighted_ls(*decay),
            ScoreConfig::KnnResidual { k } => crate::scores::knn_residual(*k),
        }
    }

    /// The score as a split score over the frozen prefix.
    pub fn build_split(&self) -> Result<ScoreFunction> {
        match self {
            ScoreConfig::KnnResidual { .. } => self.build(),
            ScoreConfig::AbsResidualMean => Ok(ScoreFunction::split(
                |p: &DataPoint, prefix: &[DataPoint]| {
                    let mean =
                        prefix.iter().map(|q| q.y()).sum::<f64>() / prefix.len() as f64;
                    (p.y() - mean).abs()
                },
            )),
            _ => Err(Error::Config(format!(
                "{self:?} has no split form; use knn_residual or abs_residual_mean"
            ))),
        }
    }
}

/// Weight choices for the weighted methods, resolved against the
/// generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightConfig {
    /// The generator's exact density ratio.
    Oracle,
    /// Constant one (a deliberately misspecified weight).
    Uniform,
    /// The exact ratio capped at `cap` (never overshoots, may undershoot).
    Capped { cap: f64 },
    /// `exp(coef . x)` (a user-specified log-linear weight).
    LogLinear { coef: Vec<f64> },
}

impl WeightConfig {
    pub fn build(&self, spec: &GeneratorSpec) -> Result<PointWeight> {
        match self {
            WeightConfig::Oracle => spec.oracle_weight(),
            WeightConfig::Uniform => Ok(Arc::new(|_p: &DataPoint| 1.0)),
            WeightConfig::Capped { cap } => {
                if !(cap > &0.0) {
                    return Err(Error::Config("cap must be positive".into()));
                }
                let cap = *cap;
                let oracle = spec.oracle_weight()?;
                Ok(Arc::new(move |p: &DataPoint| oracle(p).min(cap)))
            }
            WeightConfig::LogLinear { coef } => {
                let coef = coef.clone();
                Ok(Arc::new(move |p: &DataPoint| {
                    coef.iter()
                        .zip(p.x())
                        .map(|(c, x)| c * x)
                        .sum::<f64>()
                        .exp()
                }))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Gaussian { bandwidth: f64 },
    Box { radius: f64 },
}

impl KernelConfig {
    pub fn build(&self) -> Result<KernelSpec> {
        match self {
            KernelConfig::Gaussian { bandwidth } => KernelSpec::gaussian(*bandwidth),
            KernelConfig::Box { radius } => KernelSpec::boxcar(*radius),
        }
    }
}

/// How the superuniformity task produces p-values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PvalueConfig {
    /// The configured method's own p-value.
    Exact,
    /// Monte Carlo over uniform reorderings.
    Mc { m: usize },
    /// Importance sampling against a response-tilted proposal, uniform
    /// target.
    Is { m: usize, tilt: f64 },
}

/// One simulation run: a method, a generator, and a level grid.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub task: Task,
    pub method: MethodName,
    pub score: ScoreConfig,
    pub alpha: Vec<f64>,
    pub generator: GeneratorSpec,
    pub seed: u64,
    pub trials: usize,
    #[serde(default)]
    pub weights: Option<WeightConfig>,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub nex_decay: Option<f64>,
    #[serde(default)]
    pub split_n0: Option<usize>,
    #[serde(default)]
    pub mc_samples: Option<usize>,
    #[serde(default)]
    pub pvalue: Option<PvalueConfig>,
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.alpha.is_empty() {
            return Err(Error::Config("alpha grid must be nonempty".into()));
        }
        for &a in &self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("alpha {a} must lie in (0, 1)")));
            }
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        Ok(())
    }

    fn kernel(&self) -> Result<KernelSpec> {
        self.kernel
            .as_ref()
            .ok_or_else(|| Error::Config("this method needs a kernel".into()))?
            .build()
    }

    fn weight(&self) -> Result<PointWeight> {
        self.weights
            .as_ref()
            .ok_or_else(|| Error::Config("this method needs weights".into()))?
            .build(&self.generator)
    }

    fn likelihood_ratio(&self) -> Result<LikelihoodRatioFn> {
        match &self.generator {
            GeneratorSpec::Fcs { .. } => self.generator.fcs_likelihood_ratio(),
            GeneratorSpec::Exchangeable { .. } => Ok(LikelihoodRatioFn::exchangeable()),
            GeneratorSpec::CovariateShift { .. } => {
                let spec = self.generator.clone();
                Ok(LikelihoodRatioFn::new(move |z, sigma| {
                    let n = z.len();
                    let last = z.point(sigma.image(n - 1)).expect("index in range");
                    spec.log_shift_ratio(last.x()).expect("shift generator")
                        - spec
                            .log_shift_ratio(z.last().x())
                            .expect("shift generator")
                }))
            }
            GeneratorSpec::Drift { .. } => Err(Error::Config(
                "the drift generator has no ordering density ratio; use wcp with \
                 drift diagnostics"
                    .into(),
            )),
        }
    }

    /// Builds the configured method, resolving generator-dependent pieces
    /// (exact weights, kernels, ordering ratios).
    pub fn build_method(&self) -> Result<Method> {
        match self.method {
            MethodName::StandardCp => Method::standard_cp(self.score.build()?),
            MethodName::SplitCp => {
                let n0 = self
                    .split_n0
                    .ok_or_else(|| Error::Config("split_cp needs split_n0".into()))?;
                Method::split_cp(self.score.build_split()?, n0)
            }
            MethodName::Wcp => Method::wcp(self.score.build()?, self.weight()?),
            MethodName::WcpUnnormalized => {
                Method::wcp_unnormalized(self.score.build()?, self.weight()?)
            }
            MethodName::Nexcp => {
                let decay = self
                    .nex_decay
                    .ok_or_else(|| Error::Config("nexcp needs nex_decay".into()))?;
                let weights = SwapWeights::geometric(self.generator.n() + 1, decay)?;
                Method::nexcp(self.score.build()?, weights)
            }
            MethodName::Rlcp => Method::rlcp(self.score.build()?, self.kernel()?),
            MethodName::RlcpResample => {
                Method::rlcp_resample(self.score.build()?, self.kernel()?)
            }
            MethodName::Gwcp => Method::gwcp(self.score.build()?, self.likelihood_ratio()?),
            MethodName::GwcpNonsym => {
                Method::gwcp_nonsym(self.score.build()?, self.likelihood_ratio()?)
            }
            MethodName::GwcpIs => {
                let draws = self
                    .mc_samples
                    .ok_or_else(|| Error::Config("gwcp_is needs mc_samples".into()))?;
                Method::gwcp_is(self.score.build()?, self.likelihood_ratio()?, None, draws)
            }
        }
    }

    fn scheme(&self) -> Result<PvalueScheme> {
        match self.pvalue.as_ref().unwrap_or(&PvalueConfig::Exact) {
            PvalueConfig::Exact => Ok(PvalueScheme::Method(self.build_method()?)),
            PvalueConfig::Mc { m } => Ok(PvalueScheme::McExchangeable {
                score: self.score.build()?,
                m: *m,
            }),
            PvalueConfig::Is { m, tilt } => Ok(PvalueScheme::IsExchangeable {
                score: self.score.build()?,
                m: *m,
                tilt: *tilt,
            }),
        }
    }
}

pub const CSV_HEADER: &str =
    "method,alpha,trials,covered,coverage,ci_lo,ci_hi,floor,inflation,seed";

fn csv_row(r: &CoverageReport) -> String {
    format!(
        "{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
        r.method,
        r.alpha,
        r.trials,
        r.covered,
        r.coverage,
        r.ci_lo,
        r.ci_hi,
        r.theoretical_floor,
        r.inflation.map_or(String::new(), |v| format!("{v:.6}")),
        r.seed
    )
}

/// Runs the configured task over the level grid and renders one CSV row
/// per level. For the superuniformity task, "covered" counts trials with
/// `p > alpha`, so the semantics of every column match the coverage task.
pub fn run_simulation(cfg: &SimConfig, parallel: bool) -> Result<(String, Vec<CoverageReport>)> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.alpha.len());
    match cfg.task {
        Task::Coverage => {
            let method = cfg.build_method()?;
            for &alpha in &cfg.alpha {
                reports.push(estimate_coverage(
                    &method,
                    &cfg.generator,
                    alpha,
                    cfg.trials,
                    cfg.seed,
                    parallel,
                    None,
                )?);
            }
        }
        Task::Superuniformity => {
            let scheme = cfg.scheme()?;
            let curve = superuniformity_curve(
                &scheme,
                &cfg.generator,
                &cfg.alpha,
                cfg.trials,
                cfg.seed,
                parallel,
            )?;
            for (alpha, ecdf) in curve {
                let covered = ((1.0 - ecdf) * cfg.trials as f64).round() as usize;
                let (ci_lo, ci_hi) = simlab::wilson_interval(covered, cfg.trials);
                reports.push(CoverageReport {
                    method: scheme.label(),
                    alpha,
                    trials: cfg.trials,
                    covered,
                    coverage: 1.0 - ecdf,
                    ci_lo,
                    ci_hi,
                    theoretical_floor: 1.0 - alpha,
                    inflation: None,
                    seed: cfg.seed,
                });
            }
        }
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &reports {
        csv.push_str(&csv_row(r));
        csv.push('\n');
    }
    Ok((csv, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> String {
        r#"{
            "task": "coverage",
            "method": "standard_cp",
            "score": "abs_residual_mean",
            "alpha": [0.1, 0.2],
            "generator": {"type": "exchangeable", "n": 9, "d": 1,
                          "beta": [1.0], "noise_sd": 1.0},
            "seed": 5,
            "trials": 50
        }"#
        .to_string()
    }

    #[test]
    fn parses_a_minimal_config() {
        let cfg = SimConfig::from_json(&base_config()).unwrap();
        assert_eq!(cfg.method, MethodName::StandardCp);
        assert_eq!(cfg.alpha.len(), 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = base_config().replace("\"seed\": 5,", "\"seed\": 5, \"sed\": 1,");
        assert!(SimConfig::from_json(&bad).is_err());
    }

    #[test]
    fn missing_method_parameters_are_reported() {
        let cfg = base_config().replace("standard_cp", "split_cp");
        let cfg = SimConfig::from_json(&cfg).unwrap();
        assert!(matches!(cfg.build_method(), Err(Error::Config(_))));
    }

    #[test]
    fn simulation_produces_one_row_per_level() {
        let cfg = SimConfig::from_json(&base_config()).unwrap();
        let (csv, reports) = run_simulation(&cfg, false).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(CSV_HEADER));
    }

    #[test]
    fn serial_and_parallel_runs_render_identical_csv() {
        let cfg = SimConfig::from_json(&base_config()).unwrap();
        let (serial, _) = run_simulation(&cfg, false).unwrap();
        let (parallel, _) = run_simulation(&cfg, true).unwrap();
        assert_eq!(serial, parallel);
    }
}
