//! The p-value engine.
//!
//! A conditional model assigns weights to candidate reorderings of the
//! observed data, all consistent with a summary `u`. The p-value of the
//! observed ordering is the (possibly weighted, possibly raw-mass)
//! fraction of candidates whose score is at least the observed score:
//!
//! ```text
//! p = sum_c w_c * 1{ s(c, u) >= s(z, u) } / sum_c w_c     (normalized)
//! p = sum_c w_c * 1{ s(c, u) >= s(z, u) }                 (raw mass)
//! ```
//!
//! Membership in a prediction set is `p > alpha` in both cases, and each
//! p-value comes with the dual score threshold so callers can check the
//! two routes against each other.
//!
//! When enumeration is infeasible the engine offers a Monte Carlo p-value
//! (the observed data always counts as one of the draws, which keeps the
//! result superuniform) and a self-normalized importance-sampling p-value
//! for models that can only be evaluated up to a constant.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::sync::Arc;

use crate::methods::Method;
use crate::wdist::Threshold;
use crate::{Bag, DataPoint, Dataset, Error, Result, ScoreFunction, WeightedMeasure};

/// The deterministic RNG used everywhere randomness is needed.
pub type SimRng = ChaCha12Rng;

/// Derives an independent RNG stream for `(seed, stream)`. Streams for
/// different indices never share state, which lets trials run in parallel
/// while staying bit-identical to a serial run.
pub fn derive_rng(seed: u64, stream: u64) -> SimRng {
    SimRng::seed_from_u64(splitmix64(
        seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    ))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// The summary the model conditions on. Every variant determines the bag
/// of the data; some carry extra structure a score or model may use.
#[derive(Clone, Debug)]
pub enum PartialInfo {
    /// The unordered bag alone.
    BagOnly(Bag),
    /// The bag plus a fixed ordered prefix (split conformal).
    BagWithPrefix { bag: Bag, prefix: Vec<DataPoint> },
    /// The bag plus a sampled localization anchor in feature space.
    BagWithAnchor { bag: Bag, anchor: Vec<f64> },
    /// The bag plus an anchor taken from one of the data points' features.
    BagWithIndexAnchor { bag: Bag, anchor: Vec<f64> },
    /// A full ordered dataset obtained by a random swap of the observed
    /// data; scores may depend on this ordering.
    SwappedData(Dataset),
}

impl PartialInfo {
    pub fn bag(&self) -> Bag {
        match self {
            PartialInfo::BagOnly(b)
            | PartialInfo::BagWithPrefix { bag: b, .. }
            | PartialInfo::BagWithAnchor { bag: b, .. }
            | PartialInfo::BagWithIndexAnchor { bag: b, .. } => b.clone(),
            PartialInfo::SwappedData(z) => z.to_bag(),
        }
    }
}

type EnumerateFn = Arc<dyn Fn(&Dataset, &PartialInfo) -> Result<Vec<(Dataset, f64)>> + Send + Sync>;
type SamplerFn = Arc<dyn Fn(&PartialInfo, &mut SimRng) -> Dataset + Send + Sync>;
type LogWeightFn = Arc<dyn Fn(&Dataset, &PartialInfo) -> Result<f64> + Send + Sync>;

/// A user-posited conditional distribution over reorderings of the data.
///
/// * `enumerate` lists every candidate with its weight (exact backends);
/// * `sampler` draws a candidate given the summary (Monte Carlo and
///   importance-sampling backends);
/// * `log_weight` evaluates the candidate's weight up to an additive
///   constant shared by all candidates (importance sampling).
/// * `normalized` declares whether enumerated weights form a probability;
///   raw-mass models leave it unset and keep their weights as mass.
#[derive(Clone)]
pub struct ConditionalModel {
    enumerate: Option<EnumerateFn>,
    sampler: Option<SamplerFn>,
    log_weight: Option<LogWeightFn>,
    normalized: bool,
}

impl ConditionalModel {
    pub fn from_enumerate<G>(enumerate: G, normalized: bool) -> Self
    where
        G: Fn(&Dataset, &PartialInfo) -> Result<Vec<(Dataset, f64)>> + Send + Sync + 'static,
    {
        Self {
            enumerate: Some(Arc::new(enumerate)),
            sampler: None,
            log_weight: None,
            normalized,
        }
    }

    pub fn from_sampler<G>(sampler: G) -> Self
    where
        G: Fn(&PartialInfo, &mut SimRng) -> Dataset + Send + Sync + 'static,
    {
        Self {
            enumerate: None,
            sampler: Some(Arc::new(sampler)),
            log_weight: None,
            normalized: true,
        }
    }

    pub fn with_sampler<G>(mut self, sampler: G) -> Self
    where
        G: Fn(&PartialInfo, &mut SimRng) -> Dataset + Send + Sync + 'static,
    {
        self.sampler = Some(Arc::new(sampler));
        self
    }

    pub fn with_log_weight<G>(mut self, log_weight: G) -> Self
    where
        G: Fn(&Dataset, &PartialInfo) -> Result<f64> + Send + Sync + 'static,
    {
        self.log_weight = Some(Arc::new(log_weight));
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Outcome of one p-value computation.
#[derive(Clone, Debug)]
pub struct PValueResult {
    pub p: f64,
    /// Score of the observed ordering.
    pub test_score: f64,
    /// Dual score threshold at the requested level, when one was requested.
    pub threshold: Option<Threshold<f64>>,
    /// Number of candidates enumerated or samples drawn (including the
    /// observed data where it participates).
    pub support_size: usize,
}

impl PValueResult {
    /// Prediction-set membership at level `alpha`.
    pub fn member(&self, alpha: f64) -> bool {
        self.p > alpha
    }
}

/// Scores a candidate ordering `z` in context `u`. The score convention is
/// derived from the score variant and the summary variant:
///
/// * bag scores see the candidate's last point and the bag of `u`;
/// * split scores see the last point and the prefix carried by `u`;
/// * ordered scores see the last point and the swapped dataset when `u`
///   carries one, otherwise the candidate's own ordering.
pub(crate) fn eval_score(score: &ScoreFunction, z: &Dataset, u: &PartialInfo) -> Result<f64> {
    match (score, u) {
        (ScoreFunction::Bag(f), _) => {
            let owned;
            let bag = match u {
                PartialInfo::SwappedData(d) => {
                    owned = d.to_bag();
                    &owned
                }
                PartialInfo::BagOnly(b)
                | PartialInfo::BagWithPrefix { bag: b, .. }
                | PartialInfo::BagWithAnchor { bag: b, .. }
                | PartialInfo::BagWithIndexAnchor { bag: b, .. } => b,
            };
            Ok(f(z.last(), bag))
        }
        (ScoreFunction::Split(f), PartialInfo::BagWithPrefix { prefix, .. }) => {
            if prefix.is_empty() {
                return Err(Error::InvalidArgument("prefix must be nonempty".into()));
            }
            Ok(f(z.last(), prefix))
        }
        (ScoreFunction::Split(_), _) => Err(Error::InvalidArgument(
            "split scores need a summary with a prefix".into(),
        )),
        (ScoreFunction::Ordered(f), PartialInfo::SwappedData(d)) => Ok(f(z.last(), d)),
        (ScoreFunction::Ordered(f), _) => Ok(f(z.last(), z)),
    }
}

struct EnumeratedScores {
    weights: Vec<f64>,
    scores: Vec<f64>,
    test_score: f64,
    total: f64,
}

fn enumerate_and_score(
    model: &ConditionalModel,
    score: &ScoreFunction,
    z: &Dataset,
    u: &PartialInfo,
) -> Result<EnumeratedScores> {
    let enumerate = model
        .enumerate
        .as_ref()
        .ok_or_else(|| Error::Config("model has no enumeration backend".into()))?;
    let candidates = enumerate(z, u)?;
    if candidates.is_empty() {
        return Err(Error::Model("model enumerated no candidates".into()));
    }
    let u_bag = u.bag();
    if z.to_bag() != u_bag {
        return Err(Error::Model(
            "observed data is inconsistent with the summary".into(),
        ));
    }
    let mut weights = Vec::with_capacity(candidates.len());
    let mut scores = Vec::with_capacity(candidates.len());
    let mut total = 0.0;
    for (candidate, w) in &candidates {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::Model(
                "candidate weights must be finite and nonnegative".into(),
            ));
        }
        if candidate.to_bag() != u_bag {
            return Err(Error::Model(
                "candidate outside the support of the summary".into(),
            ));
        }
        weights.push(*w);
        scores.push(eval_score(score, candidate, u)?);
        total += *w;
    }
    if total <= 0.0 {
        return Err(Error::Model("candidate weights must have positive total".into()));
    }
    let test_score = eval_score(score, z, u)?;
    Ok(EnumeratedScores {
        weights,
        scores,
        test_score,
        total,
    })
}

/// Exact p-value for a normalized model by full enumeration. When `alpha`
/// is given, also reports the dual threshold: membership `p > alpha` is
/// equivalent to `test_score <= threshold`.
pub fn pvalue_exact(
    model: &ConditionalModel,
    score: &ScoreFunction,
    z: &Dataset,
    u: &PartialInfo,
    alpha: Option<f64>,
) -> Result<PValueResult> {
    if !model.normalized {
        return Err(Error::InvalidArgument(
            "pvalue_exact needs a normalized model; use pvalue_unnormalized".into(),
        ));
    }
    let e = enumerate_and_score(model, score, z, u)?;
    if (e.total - 1.0).abs() > 1e-9 {
        return Err(Error::Model(format!(
            "normalized model has total weight {}",
            e.total
        )));
    }
    let mut tail = 0.0;
    for (w, s) in e.weights.iter().zip(e.scores.iter()) {
        if *s >= e.test_score {
            tail += w;
        }
    }
    let p = tail / e.total;
    let threshold = match alpha {
        Some(a) => {
            validate_alpha(a)?;
            let atoms: Vec<(f64, f64)> = e
                .scores
                .iter()
                .zip(e.weights.iter())
                .map(|(&s, &w)| (s, w / e.total))
                .collect();
            Some(WeightedMeasure::new(atoms)?.threshold_unnormalized(a)?)
        }
        None => None,
    };
    Ok(PValueResult {
        p,
        test_score: e.test_score,
        threshold,
        support_size: e.weights.len(),
    })
}

/// Raw-mass p-value: the weight of candidates scoring at least the
/// observed score, not divided by the total. The dual threshold is the
/// unnormalized one, so membership `p > alpha` is again equivalent to
/// `test_score <= threshold`.
pub fn pvalue_unnormalized(
    model: &ConditionalModel,
    score: &ScoreFunction,
    z: &Dataset,
    u: &PartialInfo,
    alpha: Option<f64>,
) -> Result<PValueResult> {
    let e = enumerate_and_score(model, score, z, u)?;
    let mut p = 0.0;
    for (w, s) in e.weights.iter().zip(e.scores.iter()) {
        if *s >= e.test_score {
            p += w;
        }
    }
    let threshold = match alpha {
        Some(a) => {
            validate_alpha(a)?;
            let atoms: Vec<(f64, f64)> = e
                .scores
                .iter()
                .zip(e.weights.iter())
                .map(|(&s, &w)| (s, w))
                .collect();
            Some(WeightedMeasure::new(atoms)?.threshold_unnormalized(a)?)
        }
        None => None,
    };
    Ok(PValueResult {
        p,
        test_score: e.test_score,
        threshold,
        support_size: e.weights.len(),
    })
}

/// Monte Carlo p-value from `m` model draws plus the observed data:
///
/// ```text
/// p = (1 + #{ draws scoring >= observed }) / (m + 1)
/// ```
///
/// Counting the observed data keeps the p-value superuniform for any
/// `m >= 1`, at the price of a floor of `1 / (m + 1)`.
pub fn pvalue_mc(
    model: &ConditionalModel,
    score: &ScoreFunction,
    z: &Dataset,
    u: &PartialInfo,
    m: usize,
    rng: &mut SimRng,
) -> Result<PValueResult> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let sampler = model
        .sampler
        .as_ref()
        .ok_or_else(|| Error::Config("model has no sampler".into()))?;
    let u_bag = u.bag();
    if z.to_bag() != u_bag {
        return Err(Error::Model(
            "observed data is inconsistent with the summary".into(),
        ));
    }
    let test_score = eval_score(score, z, u)?;
    let mut count = 1usize;
    for _ in 0..m {
        let draw = sampler(u, rng);
        if draw.to_bag() != u_bag {
            return Err(Error::Model(
                "sampler produced a candidate outside the support".into(),
            ));
        }
        if eval_score(score, &draw, u)? >= test_score {
            count += 1;
        }
    }
    Ok(PValueResult {
        p: count as f64 / (m + 1) as f64,
        test_score,
        threshold: None,
        support_size: m + 1,
    })
}

/// Self-normalized importance-sampling p-value. Draws `m` candidates from
/// the proposal, weights each draw (and the observed data, which always
/// participates) by the target-to-proposal ratio, and returns the weighted
/// tail fraction. Ratios are combined in log space with max-subtraction.
///
/// Both models must expose `log_weight` up to additive constants, and the
/// proposal must be able to sample; a non-finite log weight at any draw is
/// treated as a violation of mutual absolute continuity.
pub fn pvalue_is(
    target: &ConditionalModel,
    proposal: &ConditionalModel,
    score: &ScoreFunction,
    z: &Dataset,
    u: &PartialInfo,
    m: usize,
    rng: &mut SimRng,
) -> Result<PValueResult> {
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let target_lw = target
        .log_weight
        .as_ref()
        .ok_or_else(|| Error::Config("target model has no log-weight backend".into()))?;
    let proposal_lw = proposal
        .log_weight
        .as_ref()
        .ok_or_else(|| Error::Config("proposal model has no log-weight backend".into()))?;
    let sampler = proposal
        .sampler
        .as_ref()
        .ok_or_else(|| Error::Config("proposal model has no sampler".into()))?;
    let u_bag = u.bag();
    if z.to_bag() != u_bag {
        return Err(Error::Model(
            "observed data is inconsistent with the summary".into(),
        ));
    }
    let test_score = eval_score(score, z, u)?;
    let mut log_ratios = Vec::with_capacity(m + 1);
    let mut indicators = Vec::with_capacity(m + 1);
    let mut push = |draw: &Dataset| -> Result<()> {
        let lq = target_lw(draw, u)?;
        let lr = proposal_lw(draw, u)?;
        if !lq.is_finite() || !lr.is_finite() {
            return Err(Error::AbsoluteContinuity(
                "log weight was not finite at a sampled candidate".into(),
            ));
        }
        log_ratios.push(lq - lr);
        indicators.push(eval_score(score, draw, u)? >= test_score);
        Ok(())
    };
    push(z)?;
    for _ in 0..m {
        let draw = sampler(u, rng);
        if draw.to_bag() != u_bag {
            return Err(Error::Model(
                "sampler produced a candidate outside the support".into(),
            ));
        }
        push(&draw)?;
    }
    let max_lr = log_ratios
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (lr, hit) in log_ratios.iter().zip(indicators.iter()) {
        let w = (lr - max_lr).exp();
        den += w;
        if *hit {
            num += w;
        }
    }
    Ok(PValueResult {
        p: num / den,
        test_score,
        threshold: None,
        support_size: m + 1,
    })
}

/// One grid point of a prediction set.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub y: f64,
    pub p: f64,
    pub member: bool,
}

/// Evaluates a method's p-value over a response grid and keeps the grid
/// points with `p > alpha`. Any auxiliary randomness the method needs
/// (a swap index, a localization anchor) is drawn once and shared by every
/// grid point, so the set is a genuine single prediction set.
pub fn prediction_set(
    method: &Method,
    training: &[DataPoint],
    x_test: &[f64],
    y_grid: &[f64],
    alpha: f64,
    rng: &mut SimRng,
) -> Result<Vec<GridPoint>> {
    validate_alpha(alpha)?;
    if y_grid.is_empty() {
        return Err(Error::InvalidArgument("response grid must be nonempty".into()));
    }
    let aux = method.draw_aux(training, x_test, rng)?;
    let mut out = Vec::with_capacity(y_grid.len());
    for &y in y_grid {
        let z = Dataset::augment(training, x_test, y)?;
        let res = method.pvalue(&z, &aux, Some(alpha), rng)?;
        out.push(GridPoint {
            y,
            p: res.p,
            member: res.member(alpha),
        });
    }
    Ok(out)
}

pub(crate) fn validate_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Uniform distribution over reorderings of the bag, with enumeration (all
/// orderings of the observed data), sampling (a uniform shuffle) and a
/// constant log weight. The reference model for exchangeable data.
pub fn uniform_permutation_model(max_enumerate: usize) -> ConditionalModel {
    ConditionalModel::from_enumerate(
        move |z: &Dataset, _u: &PartialInfo| {
            let n = z.len();
            if n > max_enumerate {
                return Err(Error::Capacity(format!(
                    "cannot enumerate {n}! orderings (limit {max_enumerate})"
                )));
            }
            let perms: Vec<_> = itertools::Itertools::permutations(0..n, n).collect();
            let w = 1.0 / perms.len() as f64;
            perms
                .into_iter()
                .map(|map| Ok((z.apply_perm(&crate::Permutation::new(map)?)?, w)))
                .collect()
        },
        true,
    )
    .with_sampler(|u: &PartialInfo, rng: &mut SimRng| {
        let bag = u.bag();
        let mut points = bag.points().to_vec();
        use rand::seq::SliceRandom;
        points.shuffle(rng);
        Dataset::new(points).expect("bag points form a dataset")
    })
    .with_log_weight(|_z: &Dataset, _u: &PartialInfo| Ok(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scores::abs_residual_mean;

    fn pt(x: f64, y: f64) -> DataPoint {
        DataPoint::scalar(x, y).unwrap()
    }

    fn small_dataset() -> Dataset {
        Dataset::new(vec![pt(0.0, 1.0), pt(0.0, 2.0), pt(0.0, 3.0), pt(0.0, 7.0)]).unwrap()
    }

    #[test]
    fn exact_pvalue_on_the_uniform_model() {
        let z = small_dataset();
        let u = PartialInfo::BagOnly(z.to_bag());
        let model = uniform_permutation_model(8);
        let res = pvalue_exact(&model, &abs_residual_mean(), &z, &u, None).unwrap();
        // Scores around the mean 3.25: the test point 7 has the largest
        // residual, so only orderings placing it last score as high.
        assert!((res.p - 0.25).abs() < 1e-12);
    }

    #[test]
    fn duality_between_pvalue_and_threshold() {
        let z = small_dataset();
        let u = PartialInfo::BagOnly(z.to_bag());
        let model = uniform_permutation_model(8);
        for alpha in [0.125, 0.25, 0.5, 0.75] {
            let res = pvalue_exact(&model, &abs_residual_mean(), &z, &u, Some(alpha)).unwrap();
            let admitted = res.threshold.unwrap().admits(res.test_score);
            assert_eq!(res.p > alpha, admitted, "alpha={alpha}");
        }
    }

    #[test]
    fn mc_pvalue_has_a_floor_and_approaches_exact() {
        let z = small_dataset();
        let u = PartialInfo::BagOnly(z.to_bag());
        let model = uniform_permutation_model(8);
        let exact = pvalue_exact(&model, &abs_residual_mean(), &z, &u, None)
            .unwrap()
            .p;
        let mut rng = derive_rng(7, 0);
        let mc = pvalue_mc(&model, &abs_residual_mean(), &z, &u, 10_000, &mut rng).unwrap();
        assert!(mc.p >= 1.0 / 10_001.0);
        assert!((mc.p - exact).abs() < 0.02, "mc={} exact={}", mc.p, exact);
    }

    #[test]
    fn is_pvalue_with_matching_models_reduces_to_mc() {
        let z = small_dataset();
        let u = PartialInfo::BagOnly(z.to_bag());
        let model = uniform_permutation_model(8);
        let mut rng_a = derive_rng(11, 0);
        let mut rng_b = derive_rng(11, 0);
        let m = 999;
        let is = pvalue_is(&model, &model, &abs_residual_mean(), &z, &u, m, &mut rng_a).unwrap();
        let mc = pvalue_mc(&model, &abs_residual_mean(), &z, &u, m, &mut rng_b).unwrap();
        assert!((is.p - mc.p).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_pvalue_can_exceed_one() {
        let z = small_dataset();
        let u = PartialInfo::BagOnly(z.to_bag());
        let model = ConditionalModel::from_enumerate(
            |z: &Dataset, _u: &PartialInfo| {
                (0..z.len()).map(|i| Ok((z.swap(i)?, 0.75))).collect()
            },
            false,
        );
        // Score constant over candidates: every candidate ties the test
        // score, so the raw mass is the full 3.0.
        let constant = ScoreFunction::bag(|_p: &DataPoint, _b: &Bag| 0.0);
        let res = pvalue_unnormalized(&model, &constant, &z, &u, Some(0.5)).unwrap();
        assert!((res.p - 3.0).abs() < 1e-12);
        assert!(res.member(0.5));
    }

    #[test]
    fn support_violations_are_rejected() {
        let z = small_dataset();
        let u = PartialInfo::BagOnly(z.to_bag());
        let model = ConditionalModel::from_enumerate(
            |_z: &Dataset, _u: &PartialInfo| {
                Ok(vec![(
                    Dataset::new(vec![pt(0.0, -1.0), pt(0.0, -2.0)]).unwrap(),
                    1.0,
                )])
            },
            true,
        );
        let err = pvalue_exact(&model, &abs_residual_mean(), &z, &u, None).unwrap_err();
        assert!(matches!(err, Error::Model(_)));
    }

    #[test]
    fn derived_rng_streams_are_stable_and_distinct() {
        use rand::Rng;
        let a: u64 = derive_rng(42, 0).gen();
        let b: u64 = derive_rng(42, 0).gen();
        let c: u64 = derive_rng(42, 1).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
