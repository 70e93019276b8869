//! Concrete conformal methods.
//!
//! Every method pairs a score with a conditional model over reorderings of
//! the augmented data and registers the cheap index-level shortcut it is
//! known to collapse to:
//!
//! * `standard_cp`: uniform over orderings; shortcut is the plain tail
//!   count over the index placed last.
//! * `split_cp`: uniform over orderings fixing a training prefix; shortcut
//!   counts over the calibration fold.
//! * `wcp` / `wcp_unnormalized`: one weight per point placed last, with
//!   either the normalized tail fraction or the raw tail mass.
//! * `nexcp`: one random swap of the test position, weighted over swap
//!   indices; the set-defining p-value dominates the model p-value, so
//!   thresholding it preserves coverage.
//! * `rlcp` / `rlcp_resample`: kernel-localized weights around a sampled
//!   anchor (a fresh feature draw, or one of the observed features).
//! * `gwcp` / `gwcp_nonsym` / `gwcp_is`: arbitrary positive joint-density
//!   ratios over orderings, via exhaustive index weights, the full
//!   nonsymmetric ordering model, or self-normalized importance sampling.
//!
//! The shortcut is what `pvalue` computes; [`crate::oracle`] certifies it
//! against brute-force enumeration of all orderings.

use std::sync::Arc;

use rand::Rng;
use statrs::function::gamma::gamma;

use crate::engine::{self, ConditionalModel, PValueResult, PartialInfo, SimRng};
use crate::{
    DataPoint, Dataset, Error, Permutation, Result, ScoreFunction, WeightedMeasure,
};

/// Exhaustive ordering enumeration is capped at this many points for the
/// index-collapsed general method.
pub const GWCP_MAX_POINTS: usize = 8;
/// The full nonsymmetric ordering model keeps one atom per ordering, so it
/// is capped one size lower.
pub const GWCP_NONSYM_MAX_POINTS: usize = 7;

const IDENTITY_RATIO_TOL: f64 = 1e-9;
const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Per-point weight used by the weighted methods, typically a likelihood
/// ratio between test and training laws evaluated at the point.
pub type PointWeight = Arc<dyn Fn(&DataPoint) -> f64 + Send + Sync>;

/// Swap-index weights: nonnegative, summing to one, with the test position
/// carrying a maximal weight.
#[derive(Clone, Debug)]
pub struct SwapWeights {
    w: Vec<f64>,
}

impl SwapWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() < 2 {
            return Err(Error::InvalidArgument(
                "swap weights need at least two entries".into(),
            ));
        }
        if w.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidArgument(
                "swap weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "swap weights must sum to one, got {total}"
            )));
        }
        let last = *w.last().expect("nonempty");
        if w.iter().any(|&v| v > last) {
            return Err(Error::InvalidArgument(
                "the test position must carry a maximal swap weight".into(),
            ));
        }
        Ok(Self { w })
    }

    /// Geometric weights `decay^(n+1-i)` normalized to one; the newest
    /// position gets the largest weight for any `decay` in `(0, 1]`.
    pub fn geometric(len: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::InvalidArgument("decay must lie in (0, 1]".into()));
        }
        let mut w = Vec::with_capacity(len);
        let mut v = 1.0;
        for _ in 0..len {
            w.push(v);
            v *= decay;
        }
        w.reverse();
        let total: f64 = w.iter().sum();
        for v in &mut w {
            *v /= total;
        }
        // Renormalization leaves the last entry maximal; fix any residual
        // rounding in the sum by adjusting the largest entry.
        let total: f64 = w.iter().sum();
        let last = w.len() - 1;
        w[last] += 1.0 - total;
        Self::new(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A localization kernel on feature space. Densities are exactly
/// normalized so that `H(x, .)` integrates to one, and `H(x, x) > 0` for
/// every `x`.
#[derive(Clone, Debug)]
pub enum KernelSpec {
    Gaussian { bandwidth: f64 },
    Box { radius: f64 },
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidArgument("bandwidth must be positive".into()));
        }
        Ok(Self::Gaussian { bandwidth })
    }

    pub fn boxcar(radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidArgument("radius must be positive".into()));
        }
        Ok(Self::Box { radius })
    }

    /// Density of the kernel centered at `center`, evaluated at `x`.
    pub fn density(&self, x: &[f64], center: &[f64]) -> f64 {
        let d = x.len();
        let sq: f64 = x
            .iter()
            .zip(center.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        match self {
            KernelSpec::Gaussian { bandwidth } => {
                let norm = (2.0 * std::f64::consts::PI * bandwidth * bandwidth)
                    .powf(d as f64 / 2.0);
                (-sq / (2.0 * bandwidth * bandwidth)).exp() / norm
            }
            KernelSpec::Box { radius } => {
                if sq.sqrt() <= *radius {
                    1.0 / ball_volume(d, *radius)
                } else {
                    0.0
                }
            }
        }
    }

    /// Draws one point from the kernel centered at `center`.
    pub fn sample(&self, center: &[f64], rng: &mut SimRng) -> Vec<f64> {
        match self {
            KernelSpec::Gaussian { bandwidth } => center
                .iter()
                .map(|&c| c + bandwidth * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect(),
            KernelSpec::Box { radius } => loop {
                let cand: Vec<f64> = center
                    .iter()
                    .map(|&c| c + radius * (2.0 * rng.gen::<f64>() - 1.0))
                    .collect();
                let sq: f64 = cand
                    .iter()
                    .zip(center.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if sq.sqrt() <= *radius {
                    return cand;
                }
            },
        }
    }
}

fn ball_volume(d: usize, radius: f64) -> f64 {
    let df = d as f64;
    std::f64::consts::PI.powf(df / 2.0) * radius.powi(d as i32) / gamma(df / 2.0 + 1.0)
}

/// Log ratio of the posited joint density between a reordering of the data
/// and the observed ordering: `sigma -> log( f(z_sigma) / f(z) )`. The
/// ratio at the identity is zero by construction, and the ratio may depend
/// on responses as well as features.
#[derive(Clone)]
pub struct LikelihoodRatioFn {
    f: Arc<dyn Fn(&Dataset, &Permutation) -> f64 + Send + Sync>,
}

impl LikelihoodRatioFn {
    pub fn new<G>(f: G) -> Self
    where
        G: Fn(&Dataset, &Permutation) -> f64 + Send + Sync + 'static,
    {
        Self { f: Arc::new(f) }
    }

    /// A ratio that only looks at the feature sequence, the form under
    /// which importance-sampled general reweighting is usually stated.
    pub fn from_features<G>(f: G) -> Self
    where
        G: Fn(&[Vec<f64>], &Permutation) -> f64 + Send + Sync + 'static,
    {
        Self::new(move |z: &Dataset, sigma: &Permutation| {
            let xs: Vec<Vec<f64>> = z.points().iter().map(|p| p.x().to_vec()).collect();
            f(&xs, sigma)
        })
    }

    /// The exchangeable ratio: identically one.
    pub fn exchangeable() -> Self {
        Self::new(|_z, _sigma| 0.0)
    }

    pub fn log_ratio(&self, z: &Dataset, sigma: &Permutation) -> f64 {
        (self.f)(z, sigma)
    }
}

/// Auxiliary randomness a method draws once per prediction set.
#[derive(Clone, Debug, PartialEq)]
pub enum Aux {
    None,
    /// A data index (a swap position or a resampled anchor index).
    Index(usize),
    /// A localization anchor in feature space.
    Anchor(Vec<f64>),
}

#[derive(Clone)]
enum MethodKind {
    Standard,
    Split { n0: usize },
    Wcp { w: PointWeight },
    WcpUnnorm { w: PointWeight },
    Nexcp { weights: SwapWeights },
    Rlcp { kernel: KernelSpec },
    RlcpResample { kernel: KernelSpec },
    Gwcp { lr: LikelihoodRatioFn },
    GwcpNonsym { lr: LikelihoodRatioFn },
    GwcpIs {
        lr: LikelihoodRatioFn,
        proposal: Option<LikelihoodRatioFn>,
        draws: usize,
    },
}

/// A fully specified conformal method: a score plus a conditional model
/// with its registered shortcut.
#[derive(Clone)]
pub struct Method {
    score: ScoreFunction,
    kind: MethodKind,
}

impl Method {
    /// Standard conformal prediction: uniform over all orderings of the
    /// bag. Requires a bag score.
    pub fn standard_cp(score: ScoreFunction) -> Result<Self> {
        require_bag(&score)?;
        Ok(Self {
            score,
            kind: MethodKind::Standard,
        })
    }

    /// Split conformal prediction: the first `n0` points form a frozen
    /// training prefix and only the remaining fold is exchangeable.
    /// Requires a split score.
    pub fn split_cp(score: ScoreFunction, n0: usize) -> Result<Self> {
        if !matches!(score, ScoreFunction::Split(_)) {
            return Err(Error::InvalidArgument("split_cp needs a split score".into()));
        }
        if n0 == 0 {
            return Err(Error::InvalidArgument(
                "the training prefix must be nonempty".into(),
            ));
        }
        Ok(Self {
            score,
            kind: MethodKind::Split { n0 },
        })
    }

    /// Weighted conformal prediction under covariate shift: the candidate
    /// placed last is reweighted by `w`, normalized over candidates.
    /// Requires a bag score and a strictly positive weight.
    pub fn wcp(score: ScoreFunction, w: PointWeight) -> Result<Self> {
        require_bag(&score)?;
        Ok(Self {
            score,
            kind: MethodKind::Wcp { w },
        })
    }

    /// Weighted conformal with raw tail mass instead of the normalized
    /// fraction: each index carries mass `w(z_i) / (n + 1)` and membership
    /// compares the unnormalized mass with `alpha`. Nonnegative weights
    /// suffice.
    pub fn wcp_unnormalized(score: ScoreFunction, w: PointWeight) -> Result<Self> {
        require_bag(&score)?;
        Ok(Self {
            score,
            kind: MethodKind::WcpUnnorm { w },
        })
    }

    /// Non-exchangeable conformal via a single weighted random swap of the
    /// test position. Requires an ordered score; scores are always taken
    /// against the swapped ordering carried by the summary.
    pub fn nexcp(score: ScoreFunction, weights: SwapWeights) -> Result<Self> {
        let score = score.lift_to_ordered()?;
        Ok(Self {
            score,
            kind: MethodKind::Nexcp { weights },
        })
    }

    /// Kernel-localized conformal prediction: an anchor is drawn from the
    /// kernel at the test features and candidates are reweighted by their
    /// kernel affinity to it. Requires a bag score.
    pub fn rlcp(score: ScoreFunction, kernel: KernelSpec) -> Result<Self> {
        require_bag(&score)?;
        Ok(Self {
            score,
            kind: MethodKind::Rlcp { kernel },
        })
    }

    /// Localized conformal with a resampled anchor: the anchor is one of
    /// the observed feature vectors, drawn from the row-normalized kernel
    /// row of the test point. Requires a bag score.
    pub fn rlcp_resample(score: ScoreFunction, kernel: KernelSpec) -> Result<Self> {
        require_bag(&score)?;
        Ok(Self {
            score,
            kind: MethodKind::RlcpResample { kernel },
        })
    }

    /// General reweighting by a joint density ratio, collapsed to one
    /// weight per index placed last by summing the ratio over all
    /// orderings. Exhaustive, so limited to [`GWCP_MAX_POINTS`] points.
    /// Requires a bag score.
    pub fn gwcp(score: ScoreFunction, lr: LikelihoodRatioFn) -> Result<Self> {
        require_bag(&score)?;
        Ok(Self {
            score,
            kind: MethodKind::Gwcp { lr },
        })
    }

    /// General reweighting with the full ordering model: one atom per
    /// ordering, scored against the candidate's own order, which admits
    /// order-aware scores. Limited to [`GWCP_NONSYM_MAX_POINTS`] points.
    pub fn gwcp_nonsym(score: ScoreFunction, lr: LikelihoodRatioFn) -> Result<Self> {
        let score = score.lift_to_ordered()?;
        Ok(Self {
            score,
            kind: MethodKind::GwcpNonsym { lr },
        })
    }

    /// Importance-sampled general reweighting: `draws` orderings are drawn
    /// from the proposal (uniform when `proposal` is `None`) and the
    /// p-value is the self-normalized weighted tail fraction, with the
    /// observed ordering always included. A non-uniform proposal requires
    /// exhaustive enumeration to sample from and is therefore limited to
    /// [`GWCP_NONSYM_MAX_POINTS`] points.
    pub fn gwcp_is(
        score: ScoreFunction,
        lr: LikelihoodRatioFn,
        proposal: Option<LikelihoodRatioFn>,
        draws: usize,
    ) -> Result<Self> {
        if draws == 0 {
            return Err(Error::InvalidArgument("need at least one draw".into()));
        }
        let score = score.lift_to_ordered()?;
        Ok(Self {
            score,
            kind: MethodKind::GwcpIs {
                lr,
                proposal,
                draws,
            },
        })
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            MethodKind::Standard => "standard_cp",
            MethodKind::Split { .. } => "split_cp",
            MethodKind::Wcp { .. } => "wcp",
            MethodKind::WcpUnnorm { .. } => "wcp_unnormalized",
            MethodKind::Nexcp { .. } => "nexcp",
            MethodKind::Rlcp { .. } => "rlcp",
            MethodKind::RlcpResample { .. } => "rlcp_resample",
            MethodKind::Gwcp { .. } => "gwcp",
            MethodKind::GwcpNonsym { .. } => "gwcp_nonsym",
            MethodKind::GwcpIs { .. } => "gwcp_is",
        }
    }

    pub fn score(&self) -> &ScoreFunction {
        &self.score
    }

    /// Whether the method's p-value is a raw mass rather than a fraction.
    pub fn is_unnormalized(&self) -> bool {
        matches!(self.kind, MethodKind::WcpUnnorm { .. })
    }

    /// Draws the method's auxiliary randomness for one prediction set.
    pub fn draw_aux(
        &self,
        training: &[DataPoint],
        x_test: &[f64],
        rng: &mut SimRng,
    ) -> Result<Aux> {
        match &self.kind {
            MethodKind::Nexcp { weights } => {
                let len = training.len() + 1;
                if weights.len() != len {
                    return Err(Error::Config(format!(
                        "swap weights have length {} but the data has {} points",
                        weights.len(),
                        len
                    )));
                }
                Ok(Aux::Index(sample_categorical(weights.as_slice(), rng)))
            }
            MethodKind::Rlcp { kernel } => Ok(Aux::Anchor(kernel.sample(x_test, rng))),
            MethodKind::RlcpResample { kernel } => {
                let mut xs: Vec<&[f64]> = training.iter().map(|p| p.x()).collect();
                xs.push(x_test);
                let row = kernel_row(kernel, xs.len() - 1, &xs)?;
                Ok(Aux::Index(sample_categorical(&row, rng)))
            }
            _ => Ok(Aux::None),
        }
    }

    /// Enumerates the method's auxiliary randomness with its probabilities
    /// when that randomness has finite support, `None` when it does not
    /// (a continuous anchor, or internal sampling).
    pub fn aux_support(&self, z: &Dataset) -> Result<Option<Vec<(Aux, f64)>>> {
        match &self.kind {
            MethodKind::Nexcp { weights } => {
                if weights.len() != z.len() {
                    return Err(Error::Config(
                        "swap weights do not match the data length".into(),
                    ));
                }
                Ok(Some(
                    weights
                        .as_slice()
                        .iter()
                        .enumerate()
                        .map(|(k, &w)| (Aux::Index(k), w))
                        .collect(),
                ))
            }
            MethodKind::RlcpResample { kernel } => {
                let xs: Vec<&[f64]> = z.points().iter().map(|p| p.x()).collect();
                let row = kernel_row(kernel, xs.len() - 1, &xs)?;
                Ok(Some(
                    row.iter()
                        .enumerate()
                        .map(|(k, &w)| (Aux::Index(k), w))
                        .collect(),
                ))
            }
            MethodKind::Rlcp { .. } | MethodKind::GwcpIs { .. } => Ok(None),
            _ => Ok(Some(vec![(Aux::None, 1.0)])),
        }
    }

    /// The method's p-value on augmented data `z` under auxiliary
    /// randomness `aux`. When `alpha` is given, the result also carries
    /// the dual score threshold. For the swap method this is the
    /// set-defining p-value, which dominates the model p-value.
    pub fn pvalue(
        &self,
        z: &Dataset,
        aux: &Aux,
        alpha: Option<f64>,
        rng: &mut SimRng,
    ) -> Result<PValueResult> {
        match &self.kind {
            MethodKind::Standard => {
                let u = PartialInfo::BagOnly(z.to_bag());
                let model = index_swap_model(vec![1.0 / z.len() as f64; z.len()], 0);
                engine::pvalue_exact(&model, &self.score, z, &u, alpha)
            }
            MethodKind::Split { n0 } => {
                let n0 = *n0;
                if n0 + 2 > z.len() {
                    return Err(Error::InvalidArgument(format!(
                        "prefix of {n0} leaves no calibration fold in {} points",
                        z.len()
                    )));
                }
                let u = PartialInfo::BagWithPrefix {
                    bag: z.to_bag(),
                    prefix: z.points()[..n0].to_vec(),
                };
                let fold = z.len() - n0;
                let model = index_swap_model(vec![1.0 / fold as f64; fold], n0);
                engine::pvalue_exact(&model, &self.score, z, &u, alpha)
            }
            MethodKind::Wcp { w } => {
                let u = PartialInfo::BagOnly(z.to_bag());
                let mut weights = point_weights(z, w, true)?;
                let total: f64 = weights.iter().sum();
                for v in &mut weights {
                    *v /= total;
                }
                let model = index_swap_model(weights, 0);
                engine::pvalue_exact(&model, &self.score, z, &u, alpha)
            }
            MethodKind::WcpUnnorm { w } => {
                let u = PartialInfo::BagOnly(z.to_bag());
                let n1 = z.len() as f64;
                let weights: Vec<f64> = point_weights(z, w, false)?
                    .into_iter()
                    .map(|v| v / n1)
                    .collect();
                let model = ConditionalModel::from_enumerate(
                    move |z: &Dataset, _u: &PartialInfo| {
                        weights
                            .iter()
                            .enumerate()
                            .map(|(i, &w)| Ok((z.swap(i)?, w)))
                            .collect()
                    },
                    false,
                );
                engine::pvalue_unnormalized(&model, &self.score, z, &u, alpha)
            }
            MethodKind::Nexcp { .. } => Ok(self.nexcp_pvalues(z, aux, alpha)?.0),
            MethodKind::Rlcp { kernel } => {
                let anchor = match aux {
                    Aux::Anchor(a) => a.clone(),
                    _ => return Err(Error::Config("localized method needs an anchor".into())),
                };
                let weights = anchor_weights(z, kernel, &anchor)?;
                let u = PartialInfo::BagWithAnchor {
                    bag: z.to_bag(),
                    anchor,
                };
                let model = index_swap_model(weights, 0);
                engine::pvalue_exact(&model, &self.score, z, &u, alpha)
            }
            MethodKind::RlcpResample { kernel } => {
                let k = match aux {
                    Aux::Index(k) => *k,
                    _ => return Err(Error::Config("resampled method needs an index".into())),
                };
                if k >= z.len() {
                    return Err(Error::IndexOutOfRange {
                        index: k,
                        len: z.len(),
                    });
                }
                let weights = resampled_weights(z, kernel, k)?;
                let u = PartialInfo::BagWithIndexAnchor {
                    bag: z.to_bag(),
                    anchor: z.point(k)?.x().to_vec(),
                };
                let model = index_swap_model(weights, 0);
                engine::pvalue_exact(&model, &self.score, z, &u, alpha)
            }
            MethodKind::Gwcp { lr } => {
                if z.len() > GWCP_MAX_POINTS {
                    return Err(Error::Capacity(format!(
                        "gwcp enumerates all orderings of at most {GWCP_MAX_POINTS} points \
                         ({} given); use gwcp_is",
                        z.len()
                    )));
                }
                check_identity_ratio(lr, z)?;
                let weights = collapsed_ratio_weights(lr, z)?;
                let u = PartialInfo::BagOnly(z.to_bag());
                let model = index_swap_model(weights, 0);
                engine::pvalue_exact(&model, &self.score, z, &u, alpha)
            }
            MethodKind::GwcpNonsym { lr } => {
                if z.len() > GWCP_NONSYM_MAX_POINTS {
                    return Err(Error::Capacity(format!(
                        "gwcp_nonsym keeps one atom per ordering of at most \
                         {GWCP_NONSYM_MAX_POINTS} points ({} given); use gwcp_is",
                        z.len()
                    )));
                }
                check_identity_ratio(lr, z)?;
                let (perms, weights) = ordering_ratio_weights(lr, z)?;
                let u = PartialInfo::BagOnly(z.to_bag());
                let model = ConditionalModel::from_enumerate(
                    move |z: &Dataset, _u: &PartialInfo| {
                        perms
                            .iter()
                            .zip(weights.iter())
                            .map(|(sigma, &w)| Ok((z.apply_perm(sigma)?, w)))
                            .collect()
                    },
                    true,
                );
                engine::pvalue_exact(&model, &self.score, z, &u, alpha)
            }
            MethodKind::GwcpIs {
                lr,
                proposal,
                draws,
            } => self.gwcp_is_pvalue(z, lr, proposal.as_ref(), *draws, alpha, rng),
        }
    }

    /// Both p-values of the swap method: the set-defining one (scores of
    /// the original points against the swapped ordering) and the model one
    /// (scores of the swap candidates). The model p-value never exceeds
    /// the set-defining one, so thresholding the latter preserves
    /// coverage.
    pub fn nexcp_pvalues(
        &self,
        z: &Dataset,
        aux: &Aux,
        alpha: Option<f64>,
    ) -> Result<(PValueResult, PValueResult)> {
        let weights = match &self.kind {
            MethodKind::Nexcp { weights } => weights,
            _ => {
                return Err(Error::Config(
                    "nexcp_pvalues is only defined for the swap method".into(),
                ))
            }
        };
        let k0 = match aux {
            Aux::Index(k) => *k,
            _ => return Err(Error::Config("the swap method needs a swap index".into())),
        };
        if weights.len() != z.len() {
            return Err(Error::Config(
                "swap weights do not match the data length".into(),
            ));
        }
        if k0 >= z.len() {
            return Err(Error::IndexOutOfRange {
                index: k0,
                len: z.len(),
            });
        }
        let swapped = z.swap(k0)?;
        let u = PartialInfo::SwappedData(swapped.clone());
        let w = weights.as_slice().to_vec();
        let set_model = index_swap_model(w.clone(), 0);
        let set_res = engine::pvalue_exact(&set_model, &self.score, z, &u, alpha)?;
        let model = ConditionalModel::from_enumerate(
            move |_z: &Dataset, u: &PartialInfo| {
                let swapped = match u {
                    PartialInfo::SwappedData(d) => d,
                    _ => return Err(Error::Config("expected a swapped summary".into())),
                };
                w.iter()
                    .enumerate()
                    .map(|(k, &wk)| Ok((swapped.swap(k)?, wk)))
                    .collect()
            },
            true,
        );
        let model_res = engine::pvalue_exact(&model, &self.score, z, &u, alpha)?;
        Ok((set_res, model_res))
    }

    fn gwcp_is_pvalue(
        &self,
        z: &Dataset,
        lr: &LikelihoodRatioFn,
        proposal: Option<&LikelihoodRatioFn>,
        draws: usize,
        alpha: Option<f64>,
        rng: &mut SimRng,
    ) -> Result<PValueResult> {
        check_identity_ratio(lr, z)?;
        if let Some(g) = proposal {
            check_identity_ratio(g, z)?;
        }
        let n = z.len();
        // With a non-uniform proposal, sampling a permutation requires the
        // full categorical over orderings.
        let proposal_table = match proposal {
            Some(g) => {
                if n > GWCP_NONSYM_MAX_POINTS {
                    return Err(Error::Capacity(format!(
                        "a non-uniform ordering proposal needs at most \
                         {GWCP_NONSYM_MAX_POINTS} points ({n} given)"
                    )));
                }
                let (perms, weights) = ordering_ratio_weights(g, z)?;
                Some((perms, weights))
            }
            None => None,
        };
        let test_score = score_ordering(&self.score, z, &Permutation::identity(n))?;
        let mut log_ratios = Vec::with_capacity(draws + 1);
        let mut scores = Vec::with_capacity(draws + 1);
        log_ratios.push(0.0);
        scores.push(test_score);
        for _ in 0..draws {
            let sigma = match &proposal_table {
                Some((perms, weights)) => perms[sample_categorical(weights, rng)].clone(),
                None => Permutation::random(n, rng),
            };
            let lq = lr.log_ratio(z, &sigma);
            let lg = proposal.map_or(0.0, |g| g.log_ratio(z, &sigma));
            if !lq.is_finite() || !lg.is_finite() {
                return Err(Error::AbsoluteContinuity(
                    "log ratio was not finite at a sampled ordering".into(),
                ));
            }
            log_ratios.push(lq - lg);
            scores.push(score_ordering(&self.score, z, &sigma)?);
        }
        let max_lr = log_ratios
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = log_ratios.iter().map(|lw| (lw - max_lr).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut num = 0.0;
        for (w, s) in weights.iter().zip(scores.iter()) {
            if *s >= test_score {
                num += w;
            }
        }
        let threshold = match alpha {
            Some(a) => {
                engine::validate_alpha(a)?;
                let atoms: Vec<(f64, f64)> = scores
                    .iter()
                    .zip(weights.iter())
                    .map(|(&s, &w)| (s, w / total))
                    .collect();
                Some(WeightedMeasure::new(atoms)?.threshold_unnormalized(a)?)
            }
            None => None,
        };
        Ok(PValueResult {
            p: num / total,
            test_score,
            threshold,
            support_size: draws + 1,
        })
    }

    /// Weight the method's full ordering model assigns to the candidate
    /// `z` reordered by `sigma`, up to a normalization shared by all
    /// orderings. Used by the brute-force oracle.
    pub(crate) fn perm_weight(&self, z: &Dataset, sigma: &Permutation, aux: &Aux) -> Result<f64> {
        let n = z.len();
        if sigma.len() != n {
            return Err(Error::InvalidArgument(
                "permutation does not match the data length".into(),
            ));
        }
        let last = sigma.image(n - 1);
        match &self.kind {
            MethodKind::Standard => Ok(1.0),
            MethodKind::Split { n0 } => {
                let fixes_prefix = (0..*n0).all(|i| sigma.image(i) == i);
                Ok(if fixes_prefix { 1.0 } else { 0.0 })
            }
            MethodKind::Wcp { w } | MethodKind::WcpUnnorm { w } => Ok(w(z.point(last)?)),
            MethodKind::Nexcp { weights } => {
                // Set-defining rule: candidate k exchanges position k with
                // the last position and carries the k-th swap weight. The
                // drawn index only enters through the scoring context.
                let _ = aux_index(aux)?;
                for (k, &wk) in weights.as_slice().iter().enumerate() {
                    if *sigma == Permutation::swap_with_last(n, k)? {
                        return Ok(wk);
                    }
                }
                Ok(0.0)
            }
            MethodKind::Rlcp { kernel } => {
                let anchor = match aux {
                    Aux::Anchor(a) => a,
                    _ => return Err(Error::Config("localized method needs an anchor".into())),
                };
                Ok(kernel.density(z.point(last)?.x(), anchor))
            }
            MethodKind::RlcpResample { kernel } => {
                let k = aux_index(aux)?;
                let xs: Vec<&[f64]> = z.points().iter().map(|p| p.x()).collect();
                let row = kernel_row(kernel, last, &xs)?;
                Ok(row[k])
            }
            MethodKind::Gwcp { lr } | MethodKind::GwcpNonsym { lr } => {
                Ok(lr.log_ratio(z, sigma).exp())
            }
            MethodKind::GwcpIs { .. } => Err(Error::Config(
                "the importance-sampled method has no exact ordering weights".into(),
            )),
        }
    }

    /// Score of the candidate `z` reordered by `sigma`, under the method's
    /// scoring convention. Used by the brute-force oracle.
    pub(crate) fn perm_score(&self, z: &Dataset, sigma: &Permutation, aux: &Aux) -> Result<f64> {
        let candidate = z.apply_perm(sigma)?;
        match &self.kind {
            MethodKind::Split { n0 } => {
                let u = PartialInfo::BagWithPrefix {
                    bag: z.to_bag(),
                    prefix: z.points()[..*n0].to_vec(),
                };
                engine::eval_score(&self.score, &candidate, &u)
            }
            MethodKind::Nexcp { .. } => {
                let k0 = aux_index(aux)?;
                let u = PartialInfo::SwappedData(z.swap(k0)?);
                engine::eval_score(&self.score, &candidate, &u)
            }
            _ => {
                let u = PartialInfo::BagOnly(z.to_bag());
                engine::eval_score(&self.score, &candidate, &u)
            }
        }
    }
}

/// Split-conformal membership through the inflated-quantile route: the
/// test score is accepted when it is at most the calibration quantile at
/// level `(1 - alpha)(1 + 1/n1)`. Agrees with the p-value route exactly.
pub fn split_membership_inflated(
    score: &ScoreFunction,
    z: &Dataset,
    n0: usize,
    alpha: f64,
) -> Result<bool> {
    engine::validate_alpha(alpha)?;
    if n0 == 0 || n0 + 2 > z.len() {
        return Err(Error::InvalidArgument(
            "prefix must leave at least one calibration point".into(),
        ));
    }
    let f = match score {
        ScoreFunction::Split(f) => f,
        _ => {
            return Err(Error::InvalidArgument(
                "the inflated-quantile route needs a split score".into(),
            ))
        }
    };
    let prefix = &z.points()[..n0];
    let cal: Vec<f64> = z.points()[n0..z.len() - 1]
        .iter()
        .map(|p| f(p, prefix))
        .collect();
    let test = f(z.last(), prefix);
    Ok(test <= crate::wdist::quantile_inflate(&cal, alpha)?)
}

fn require_bag(score: &ScoreFunction) -> Result<()> {
    match score {
        ScoreFunction::Bag(_) => Ok(()),
        _ => Err(Error::InvalidArgument(
            "this method requires a bag score".into(),
        )),
    }
}

fn aux_index(aux: &Aux) -> Result<usize> {
    match aux {
        Aux::Index(k) => Ok(*k),
        _ => Err(Error::Config("this method needs an index draw".into())),
    }
}

/// The index-level shortcut model: candidate `i` exchanges position
/// `offset + i` with the last position and carries `weights[i]`.
fn index_swap_model(weights: Vec<f64>, offset: usize) -> ConditionalModel {
    ConditionalModel::from_enumerate(
        move |z: &Dataset, _u: &PartialInfo| {
            if offset + weights.len() != z.len() {
                return Err(Error::Config(
                    "index weights do not match the data length".into(),
                ));
            }
            weights
                .iter()
                .enumerate()
                .map(|(i, &w)| Ok((z.swap(offset + i)?, w)))
                .collect()
        },
        true,
    )
}

fn point_weights(z: &Dataset, w: &PointWeight, strictly_positive: bool) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(z.len());
    for p in z.points() {
        let v = w(p);
        if !v.is_finite() || v < 0.0 || (strictly_positive && v == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "point weight must be {} and finite, got {v}",
                if strictly_positive {
                    "positive"
                } else {
                    "nonnegative"
                }
            )));
        }
        out.push(v);
    }
    Ok(out)
}

fn anchor_weights(z: &Dataset, kernel: &KernelSpec, anchor: &[f64]) -> Result<Vec<f64>> {
    let mut weights: Vec<f64> = z
        .points()
        .iter()
        .map(|p| kernel.density(p.x(), anchor))
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Model(
            "kernel weights vanished at the sampled anchor".into(),
        ));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

fn kernel_row(kernel: &KernelSpec, i: usize, xs: &[&[f64]]) -> Result<Vec<f64>> {
    let mut row: Vec<f64> = xs.iter().map(|x| kernel.density(xs[i], x)).collect();
    let total: f64 = row.iter().sum();
    // The diagonal term is always positive, so the row normalizes.
    debug_assert!(total > 0.0);
    for w in &mut row {
        *w /= total;
    }
    Ok(row)
}

fn resampled_weights(z: &Dataset, kernel: &KernelSpec, k: usize) -> Result<Vec<f64>> {
    let xs: Vec<&[f64]> = z.points().iter().map(|p| p.x()).collect();
    let mut weights = Vec::with_capacity(z.len());
    for i in 0..z.len() {
        let row = kernel_row(kernel, i, &xs)?;
        weights.push(row[k]);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Model("resampled kernel weights vanished".into()));
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

fn check_identity_ratio(lr: &LikelihoodRatioFn, z: &Dataset) -> Result<()> {
    let at_id = lr.log_ratio(z, &Permutation::identity(z.len()));
    if at_id.abs() > IDENTITY_RATIO_TOL {
        return Err(Error::InvalidArgument(format!(
            "the density ratio at the identity ordering must be one, got log ratio {at_id}"
        )));
    }
    Ok(())
}

fn all_permutations(n: usize) -> Vec<Permutation> {
    itertools::Itertools::permutations(0..n, n)
        .map(|map| Permutation::new(map).expect("generated maps are bijections"))
        .collect()
}

/// Index weights of the collapsed general model: the total ratio mass of
/// orderings placing each point last, normalized. Combined in log space.
fn collapsed_ratio_weights(lr: &LikelihoodRatioFn, z: &Dataset) -> Result<Vec<f64>> {
    let n = z.len();
    let mut group_logs: Vec<Vec<f64>> = vec![Vec::new(); n];
    for sigma in all_permutations(n) {
        let l = lr.log_ratio(z, &sigma);
        if l.is_nan() || l == f64::INFINITY {
            return Err(Error::Model("density ratio must be finite".into()));
        }
        group_logs[sigma.image(n - 1)].push(l);
    }
    let max_log = group_logs
        .iter()
        .flatten()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if max_log == f64::NEG_INFINITY {
        return Err(Error::Model("density ratio vanished on all orderings".into()));
    }
    let mut weights: Vec<f64> = group_logs
        .iter()
        .map(|logs| logs.iter().map(|l| (l - max_log).exp()).sum())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// One normalized weight per ordering, combined in log space.
fn ordering_ratio_weights(
    lr: &LikelihoodRatioFn,
    z: &Dataset,
) -> Result<(Vec<Permutation>, Vec<f64>)> {
    let perms = all_permutations(z.len());
    let logs: Vec<f64> = perms.iter().map(|s| lr.log_ratio(z, s)).collect();
    if logs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::Model("density ratio must be finite".into()));
    }
    let max_log = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logs.iter().map(|l| (l - max_log).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok((perms, weights))
}

fn score_ordering(score: &ScoreFunction, z: &Dataset, sigma: &Permutation) -> Result<f64> {
    let candidate = z.apply_perm(sigma)?;
    let u = PartialInfo::BagOnly(z.to_bag());
    engine::eval_score(score, &candidate, &u)
}

fn sample_categorical(weights: &[f64], rng: &mut SimRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}
