//! Finite weighted measures on the real line.
//!
//! A [`WeightedMeasure`] is a list of (value, weight) atoms with
//! nonnegative weights. Atoms are kept sorted by value, and every mass
//! computation sums weights in that canonical order, so repeated queries
//! are bit-for-bit reproducible.
//!
//! The three queries mirror the three ways a conformal procedure consumes
//! a score distribution:
//!
//! * [`WeightedMeasure::quantile`]: `inf { x : P(V <= x) >= tau }` for a
//!   probability measure;
//! * [`WeightedMeasure::tail_prob`]: mass of `{ v >= x }`, not divided by
//!   the total, matching a raw-mass p-value;
//! * [`WeightedMeasure::threshold_unnormalized`]: the smallest atom value
//!   whose strict upper tail mass is at most `alpha`, with an explicit
//!   unbounded-below variant instead of a float infinity.

use crate::num::Scalar;
use crate::{Error, Result};

const NORMALIZATION_TOL: f64 = 1e-9;

/// Threshold of a (possibly unnormalized) score measure at level `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold<F: Scalar> {
    /// Every real value already has strict tail mass at most `alpha`; the
    /// acceptance region is the whole line.
    UnboundedBelow,
    Value(F),
}

impl<F: Scalar> Threshold<F> {
    /// Whether a score at `x` falls inside the acceptance region
    /// `{ x <= threshold }`.
    pub fn admits(&self, x: F) -> bool {
        match self {
            Threshold::UnboundedBelow => false,
            Threshold::Value(t) => x <= *t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedMeasure<F: Scalar> {
    /// (value, weight) pairs sorted by value.
    atoms: Vec<(F, F)>,
    total: F,
}

impl<F: Scalar> WeightedMeasure<F> {
    pub fn new(mut atoms: Vec<(F, F)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidArgument("measure needs at least one atom".into()));
        }
        for &(v, w) in &atoms {
            if !v.is_finite() || !w.is_finite() || w < F::zero() {
                return Err(Error::InvalidArgument(
                    "atoms need finite values and nonnegative finite weights".into(),
                ));
            }
        }
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values compare"));
        let total = atoms.iter().map(|&(_, w)| w).sum::<F>();
        if !(total > F::zero()) {
            return Err(Error::InvalidArgument("total mass must be positive".into()));
        }
        Ok(Self { atoms, total })
    }

    /// Equal weights `1/n` on the given values.
    pub fn uniform(values: &[F]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("measure needs at least one atom".into()));
        }
        let w = F::one() / F::from_usize(values.len()).expect("atom count fits the scalar");
        Self::new(values.iter().map(|&v| (v, w)).collect())
    }

    pub fn atoms(&self) -> &[(F, F)] {
        &self.atoms
    }

    pub fn total(&self) -> F {
        self.total
    }

    pub fn is_normalized(&self) -> bool {
        let tol = F::from_f64(NORMALIZATION_TOL).expect("tolerance fits the scalar");
        (self.total - F::one()).abs() <= tol
    }

    /// Rescales the weights to total mass one.
    pub fn normalized(&self) -> Self {
        let atoms = self
            .atoms
            .iter()
            .map(|&(v, w)| (v, w / self.total))
            .collect();
        Self::new(atoms).expect("rescaled atoms stay valid")
    }

    /// Merges atoms with exactly equal values. No query result changes.
    pub fn consolidated(&self) -> Self {
        let mut atoms: Vec<(F, F)> = Vec::with_capacity(self.atoms.len());
        for &(v, w) in &self.atoms {
            match atoms.last_mut() {
                Some(last) if last.0 == v => last.1 = last.1 + w,
                _ => atoms.push((v, w)),
            }
        }
        Self::new(atoms).expect("consolidated atoms stay valid")
    }

    /// `inf { x : P(V <= x) >= tau }` for a normalized measure, evaluated
    /// by walking the cdf over the sorted atoms. `tau` outside `[0, 1]` is
    /// rejected; `tau = 0` gives the smallest atom value and accumulated
    /// rounding at `tau = 1` falls back to the largest.
    pub fn quantile(&self, tau: F) -> Result<F> {
        if !self.is_normalized() {
            return Err(Error::InvalidArgument(
                "quantile needs a normalized measure".into(),
            ));
        }
        if !(tau >= F::zero() && tau <= F::one()) {
            return Err(Error::InvalidArgument(
                "quantile level must lie in [0, 1]".into(),
            ));
        }
        let mut cum = F::zero();
        for &(v, w) in &self.atoms {
            cum = cum + w;
            if cum >= tau {
                return Ok(v);
            }
        }
        Ok(self.atoms.last().expect("measure is nonempty").0)
    }

    /// Mass of `{ v >= x }`: the raw weight sum, not divided by the total.
    pub fn tail_prob(&self, x: F) -> F {
        self.atoms
            .iter()
            .filter(|&&(v, _)| v >= x)
            .map(|&(_, w)| w)
            .sum()
    }

    /// Mass of `{ v > x }`.
    pub fn strict_tail(&self, x: F) -> F {
        self.atoms
            .iter()
            .filter(|&&(v, _)| v > x)
            .map(|&(_, w)| w)
            .sum()
    }

    /// The smallest value whose strict upper tail mass is at most `alpha`:
    /// `inf { s : mass { v > s } <= alpha }`. When the whole mass is
    /// already at most `alpha` the infimum is unbounded below.
    ///
    /// This is the threshold dual to the raw-mass p-value: for any score
    /// `x`, `tail_prob(x) > alpha` exactly when `x` is admitted by the
    /// returned threshold.
    pub fn threshold_unnormalized(&self, alpha: F) -> Result<Threshold<F>> {
        if !(alpha >= F::zero()) || !alpha.is_finite() {
            return Err(Error::InvalidArgument(
                "threshold level must be finite and nonnegative".into(),
            ));
        }
        if self.total <= alpha {
            return Ok(Threshold::UnboundedBelow);
        }
        for &(v, _) in &self.atoms {
            if self.strict_tail(v) <= alpha {
                return Ok(Threshold::Value(v));
            }
        }
        unreachable!("the largest atom has empty strict tail");
    }
}

/// Split-conformal style calibration threshold: the empirical quantile of
/// `values` at level `min(1, (1 - alpha) * (1 + 1/m))` where `m` is the
/// number of calibration values. A test score is accepted when it is at
/// most the returned value; this reproduces the tail-count rule over the
/// `m + 1` scores without materializing the test score.
///
/// The quantile is taken by integer rank, `ceil((1 - alpha) (m + 1))`-th
/// smallest clipped to the largest value, so the result does not depend on
/// how a running sum of `1/m` weights happens to round.
pub fn quantile_inflate<F: Scalar>(values: &[F], alpha: F) -> Result<F> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(
            "quantile_inflate needs at least one value".into(),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "calibration values must be finite".into(),
        ));
    }
    if !(alpha >= F::zero() && alpha <= F::one()) {
        return Err(Error::InvalidArgument(
            "inflated quantile level must lie in [0, 1]".into(),
        ));
    }
    let m = values.len();
    let m1 = F::from_usize(m + 1).expect("value count fits the scalar");
    let rank = ((F::one() - alpha) * m1)
        .ceil()
        .to_usize()
        .expect("rank fits usize")
        .clamp(1, m);
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values are ordered"));
    Ok(sorted[rank - 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(values: &[f64]) -> WeightedMeasure<f64> {
        WeightedMeasure::uniform(values).unwrap()
    }

    #[test]
    fn quantile_walks_the_cdf() {
        let m = uniform(&[1.0, 2.0, 3.0]);
        assert_eq!(m.quantile(0.5).unwrap(), 2.0);
        assert_eq!(m.quantile(0.0).unwrap(), 1.0);
        assert_eq!(m.quantile(1.0).unwrap(), 3.0);
    }

    #[test]
    fn quantile_rejects_unnormalized_input() {
        let m = WeightedMeasure::new(vec![(0.0, 2.0), (1.0, 1.0)]).unwrap();
        assert!(m.quantile(0.5).is_err());
        assert!(m.normalized().quantile(0.5).is_ok());
    }

    #[test]
    fn quantile_rejects_out_of_range_levels() {
        let m = uniform(&[1.0, 2.0]);
        assert!(m.quantile(-0.1).is_err());
        assert!(m.quantile(1.1).is_err());
    }

    #[test]
    fn tail_prob_is_raw_mass() {
        let m = WeightedMeasure::new(vec![(1.0, 0.5), (2.0, 0.25), (3.0, 0.25)]).unwrap();
        assert_eq!(m.tail_prob(2.0), 0.5);
        assert_eq!(m.tail_prob(3.5), 0.0);
        assert_eq!(m.tail_prob(0.0), 1.0);
    }

    #[test]
    fn threshold_matches_worked_example() {
        // Atoms 1, 2, 3 with weight 0.5 each (total 1.5). At alpha = 0.6
        // the strict tail above 1 has mass 1.0 and above 2 has mass 0.5.
        let m = WeightedMeasure::new(vec![(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)]).unwrap();
        assert_eq!(m.threshold_unnormalized(0.6).unwrap(), Threshold::Value(2.0));
        assert_eq!(
            m.threshold_unnormalized(1.5).unwrap(),
            Threshold::UnboundedBelow
        );
    }

    #[test]
    fn threshold_is_monotone_in_alpha() {
        let m = WeightedMeasure::new(vec![(0.0, 0.25), (1.0, 0.5), (4.0, 0.25)]).unwrap();
        // Shrinking alpha keeps more of the tail out, so the threshold can
        // only move up.
        let mut prev = f64::NEG_INFINITY;
        for alpha in [0.9, 0.6, 0.4, 0.2, 0.1] {
            match m.threshold_unnormalized(alpha).unwrap() {
                Threshold::Value(t) => {
                    assert!(t >= prev);
                    prev = t;
                }
                Threshold::UnboundedBelow => {
                    assert_eq!(prev, f64::NEG_INFINITY);
                }
            }
        }
    }

    #[test]
    fn normalized_threshold_agrees_with_quantile() {
        // For a normalized measure and alpha in (0, 1), the unnormalized
        // threshold at alpha is the (1 - alpha)-quantile.
        let m = uniform(&[1.0, 2.0, 3.0, 4.0]);
        for alpha in [0.125, 0.25, 0.5, 0.75] {
            let t = match m.threshold_unnormalized(alpha).unwrap() {
                Threshold::Value(t) => t,
                Threshold::UnboundedBelow => unreachable!(),
            };
            assert_eq!(t, m.quantile(1.0 - alpha).unwrap());
        }
    }

    #[test]
    fn quantile_inflate_matches_hand_example() {
        // Four calibration values, alpha = 0.25: level = 0.75 * 1.25 =
        // 0.9375, which lands on the largest value.
        assert_eq!(quantile_inflate(&[1.0, 2.0, 3.0, 4.0], 0.25).unwrap(), 4.0);
    }

    #[test]
    fn quantile_inflate_clips_the_level_to_one() {
        assert_eq!(quantile_inflate(&[1.0, 2.0], 0.01).unwrap(), 2.0);
    }

    #[test]
    fn consolidation_preserves_queries() {
        let m = WeightedMeasure::new(vec![(1.0, 0.25), (1.0, 0.25), (2.0, 0.5)]).unwrap();
        let c = m.consolidated();
        assert_eq!(c.atoms().len(), 2);
        assert_eq!(m.tail_prob(1.0), c.tail_prob(1.0));
        assert_eq!(m.quantile(0.5).unwrap(), c.quantile(0.5).unwrap());
        assert_eq!(
            m.threshold_unnormalized(0.4).unwrap(),
            c.threshold_unnormalized(0.4).unwrap()
        );
    }

    #[test]
    fn split_rule_equals_tail_count_over_all_scores() {
        // Appending the test score and taking the plain (1 - alpha)
        // quantile of the m + 1 scores accepts exactly when the inflated
        // quantile of the m calibration scores does.
        let cal = [0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5];
        for alpha in [0.125, 0.25, 0.5] {
            for test in [0.0, 1.0, 3.0, 6.0, 7.0] {
                let mut all: Vec<f64> = cal.to_vec();
                all.push(test);
                let joint = WeightedMeasure::uniform(&all)
                    .unwrap()
                    .quantile(1.0 - alpha)
                    .unwrap();
                let inflated = quantile_inflate(&cal, alpha).unwrap();
                assert_eq!(test <= joint, test <= inflated);
            }
        }
    }
}
