//! Datasets, bags, permutations and score functions.
//!
//! A [`Dataset`] is an ordered sequence of feature/response points whose
//! last entry plays the role of the test point. A [`Bag`] is the same
//! points in a canonical order, which is the summary most conditional
//! models condition on. Score functions come in three calling conventions
//! depending on what context the score is allowed to see.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::num::Scalar;
use crate::{Error, Result};

/// One observation: a feature vector and a scalar response.
///
/// All coordinates must be finite; this is what makes the exact
/// lexicographic comparison used by [`Bag`] total.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPoint<F: Scalar> {
    x: Vec<F>,
    y: F,
}

impl<F: Scalar> DataPoint<F> {
    pub fn new(x: Vec<F>, y: F) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument(
                "feature vector must be nonempty".into(),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) || !y.is_finite() {
            return Err(Error::InvalidArgument(
                "data point coordinates must be finite".into(),
            ));
        }
        Ok(Self { x, y })
    }

    /// Convenience constructor for one-dimensional features.
    pub fn scalar(x: F, y: F) -> Result<Self> {
        Self::new(vec![x], y)
    }

    pub fn x(&self) -> &[F] {
        &self.x
    }

    pub fn y(&self) -> F {
        self.y
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    /// Lexicographic order on (feature coordinates, response), exact on the
    /// float bit values. Total because coordinates are finite.
    pub(crate) fn lex_cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.x.iter().zip(other.x.iter()) {
            match a.partial_cmp(b).expect("finite coordinates compare") {
                Ordering::Equal => {}
                ord => return ord,
            }
        }
        match self.x.len().cmp(&other.x.len()) {
            Ordering::Equal => {}
            ord => return ord,
        }
        self.y.partial_cmp(&other.y).expect("finite response compares")
    }
}

/// An ordered dataset of at least two points with a common feature
/// dimension. The last point is the test position.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F: Scalar> {
    points: Vec<DataPoint<F>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(points: Vec<DataPoint<F>>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument(
                "dataset needs at least two points".into(),
            ));
        }
        let dim = points[0].dim();
        if points.iter().any(|p| p.dim() != dim) {
            return Err(Error::InvalidArgument(
                "all points must share one feature dimension".into(),
            ));
        }
        Ok(Self { points })
    }

    /// Appends a hypothetical test point `(x_test, y)` to the training
    /// points.
    pub fn augment(training: &[DataPoint<F>], x_test: &[F], y: F) -> Result<Self> {
        if training.is_empty() {
            return Err(Error::InvalidArgument(
                "training set must be nonempty".into(),
            ));
        }
        let mut points = training.to_vec();
        points.push(DataPoint::new(x_test.to_vec(), y)?);
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn points(&self) -> &[DataPoint<F>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Result<&DataPoint<F>> {
        self.points.get(i).ok_or(Error::IndexOutOfRange {
            index: i,
            len: self.points.len(),
        })
    }

    pub fn last(&self) -> &DataPoint<F> {
        self.points.last().expect("dataset is nonempty")
    }

    /// Exchanges positions `k` and `len - 1`; `k == len - 1` is the
    /// identity.
    pub fn swap(&self, k: usize) -> Result<Self> {
        if k >= self.points.len() {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.points.len(),
            });
        }
        let mut points = self.points.clone();
        let last = points.len() - 1;
        points.swap(k, last);
        Ok(Self { points })
    }

    /// Reorders as `result[i] = self[perm(i)]`.
    pub fn apply_perm(&self, perm: &Permutation) -> Result<Self> {
        if perm.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "permutation length {} does not match dataset length {}",
                perm.len(),
                self.points.len()
            )));
        }
        let points = perm
            .as_slice()
            .iter()
            .map(|&j| self.points[j].clone())
            .collect();
        Ok(Self { points })
    }

    pub fn to_bag(&self) -> Bag<F> {
        Bag::from_points(self.points.clone()).expect("dataset points form a bag")
    }
}

/// The points of a dataset in canonical (lexicographic) order. Two
/// datasets have equal bags exactly when one is a reordering of the other.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag<F: Scalar> {
    points: Vec<DataPoint<F>>,
}

impl<F: Scalar> Bag<F> {
    pub fn from_points(mut points: Vec<DataPoint<F>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("bag must be nonempty".into()));
        }
        let dim = points[0].dim();
        if points.iter().any(|p| p.dim() != dim) {
            return Err(Error::InvalidArgument(
                "all points must share one feature dimension".into(),
            ));
        }
        points.sort_by(|a, b| a.lex_cmp(b));
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn points(&self) -> &[DataPoint<F>] {
        &self.points
    }

    pub fn responses(&self) -> impl Iterator<Item = F> + '_ {
        self.points.iter().map(|p| p.y())
    }
}

/// A permutation of `0..n`, stored as the image vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        if n == 0 {
            return Err(Error::InvalidArgument("permutation must be nonempty".into()));
        }
        let mut seen = vec![false; n];
        for &j in &map {
            if j >= n || seen[j] {
                return Err(Error::InvalidArgument(
                    "permutation map must be a bijection of 0..n".into(),
                ));
            }
            seen[j] = true;
        }
        Ok(Self { map })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
        }
    }

    /// The transposition exchanging position `k` with the last position.
    pub fn swap_with_last(n: usize, k: usize) -> Result<Self> {
        if k >= n {
            return Err(Error::IndexOutOfRange { index: k, len: n });
        }
        let mut map: Vec<usize> = (0..n).collect();
        map.swap(k, n - 1);
        Ok(Self { map })
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        map.shuffle(rng);
        Self { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn image(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// Functional composition: `(self ∘ other)(i) = self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation> {
        if self.len() != other.len() {
            return Err(Error::InvalidArgument(
                "composed permutations must have equal length".into(),
            ));
        }
        Ok(Permutation {
            map: other.map.iter().map(|&j| self.map[j]).collect(),
        })
    }
}

type BagScoreFn<F> = Arc<dyn Fn(&DataPoint<F>, &Bag<F>) -> F + Send + Sync>;
type SplitScoreFn<F> = Arc<dyn Fn(&DataPoint<F>, &[DataPoint<F>]) -> F + Send + Sync>;
type OrderedScoreFn<F> = Arc<dyn Fn(&DataPoint<F>, &Dataset<F>) -> F + Send + Sync>;

/// A nonconformity score, tagged by what context it may depend on.
///
/// * `Bag`: the score sees the candidate point and the unordered bag only,
///   so it is automatically symmetric.
/// * `Split`: the score sees the candidate point and a fixed prefix of the
///   data (the training fold of split conformal).
/// * `Ordered`: the score sees the candidate point and an ordered dataset,
///   allowing sequence-aware scores.
pub enum ScoreFunction<F: Scalar> {
    Bag(BagScoreFn<F>),
    Split(SplitScoreFn<F>),
    Ordered(OrderedScoreFn<F>),
}

impl<F: Scalar> Clone for ScoreFunction<F> {
    fn clone(&self) -> Self {
        match self {
            Self::Bag(f) => Self::Bag(Arc::clone(f)),
            Self::Split(f) => Self::Split(Arc::clone(f)),
            Self::Ordered(f) => Self::Ordered(Arc::clone(f)),
        }
    }
}

impl<F: Scalar> ScoreFunction<F> {
    pub fn bag<G>(f: G) -> Self
    where
        G: Fn(&DataPoint<F>, &Bag<F>) -> F + Send + Sync + 'static,
    {
        Self::Bag(Arc::new(f))
    }

    pub fn split<G>(f: G) -> Self
    where
        G: Fn(&DataPoint<F>, &[DataPoint<F>]) -> F + Send + Sync + 'static,
    {
        Self::Split(Arc::new(f))
    }

    pub fn ordered<G>(f: G) -> Self
    where
        G: Fn(&DataPoint<F>, &Dataset<F>) -> F + Send + Sync + 'static,
    {
        Self::Ordered(Arc::new(f))
    }

    /// Reinterprets a bag score as an ordered score that ignores the order.
    pub fn lift_to_ordered(&self) -> Result<Self> {
        match self {
            Self::Bag(f) => {
                let f = Arc::clone(f);
                Ok(Self::ordered(move |p, z| f(p, &z.to_bag())))
            }
            Self::Ordered(_) => Ok(self.clone()),
            Self::Split(_) => Err(Error::InvalidArgument(
                "a split score has no ordered form".into(),
            )),
        }
    }
}

/// Scores every point of `z` in context `z` itself: entry `i` is the score
/// of `z_i`. Defined for bag and ordered scores.
pub fn score_vector<F: Scalar>(score: &ScoreFunction<F>, z: &Dataset<F>) -> Result<Vec<F>> {
    match score {
        ScoreFunction::Bag(f) => {
            let bag = z.to_bag();
            Ok(z.points().iter().map(|p| f(p, &bag)).collect())
        }
        ScoreFunction::Ordered(f) => Ok(z.points().iter().map(|p| f(p, z)).collect()),
        ScoreFunction::Split(_) => Err(Error::InvalidArgument(
            "score_vector needs a bag or ordered score".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, y: f64) -> DataPoint<f64> {
        DataPoint::scalar(x, y).unwrap()
    }

    #[test]
    fn rejects_non_finite_coordinates() {
        assert!(DataPoint::scalar(f64::NAN, 0.0).is_err());
        assert!(DataPoint::scalar(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn swap_exchanges_with_last() {
        let z = Dataset::new(vec![pt(0.0, 1.0), pt(0.0, 2.0), pt(0.0, 3.0)]).unwrap();
        let s = z.swap(0).unwrap();
        let ys: Vec<f64> = s.points().iter().map(|p| p.y()).collect();
        assert_eq!(ys, vec![3.0, 2.0, 1.0]);
        assert_eq!(z.swap(2).unwrap(), z);
    }

    #[test]
    fn swap_is_an_involution() {
        let z = Dataset::new(vec![pt(1.0, 1.0), pt(2.0, 2.0), pt(3.0, 3.0)]).unwrap();
        for k in 0..3 {
            assert_eq!(z.swap(k).unwrap().swap(k).unwrap(), z);
        }
    }

    #[test]
    fn bag_is_order_invariant() {
        let z = Dataset::new(vec![pt(2.0, 0.0), pt(1.0, 5.0), pt(1.0, -1.0)]).unwrap();
        let mut rng = rand::thread_rng();
        for _ in 0..20 {
            let sigma = Permutation::random(3, &mut rng);
            assert_eq!(z.apply_perm(&sigma).unwrap().to_bag(), z.to_bag());
        }
    }

    #[test]
    fn bag_canonical_order_ties_on_features_break_on_response() {
        let bag = Bag::from_points(vec![pt(1.0, 2.0), pt(1.0, -3.0), pt(0.0, 9.0)]).unwrap();
        let ys: Vec<f64> = bag.responses().collect();
        assert_eq!(ys, vec![9.0, -3.0, 2.0]);
    }

    #[test]
    fn permutation_validation() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
        assert!(Permutation::new(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn compose_matches_pointwise_definition() {
        let a = Permutation::new(vec![1, 2, 0]).unwrap();
        let b = Permutation::new(vec![2, 1, 0]).unwrap();
        let c = a.compose(&b).unwrap();
        for i in 0..3 {
            assert_eq!(c.image(i), a.image(b.image(i)));
        }
    }

    #[test]
    fn apply_perm_then_bag_commutes() {
        let z = Dataset::new(vec![pt(1.0, 1.0), pt(2.0, 4.0), pt(3.0, 9.0)]).unwrap();
        let sigma = Permutation::new(vec![2, 0, 1]).unwrap();
        let zp = z.apply_perm(&sigma).unwrap();
        assert_eq!(zp.point(0).unwrap().y(), 9.0);
        assert_eq!(zp.to_bag(), z.to_bag());
    }

    #[test]
    fn score_vector_commutes_with_permutations_for_bag_scores() {
        let z = Dataset::new(vec![pt(1.0, 1.0), pt(2.0, 4.0), pt(3.0, 9.0)]).unwrap();
        let score = crate::scores::abs_residual_mean::<f64>();
        let lifted = score.lift_to_ordered().unwrap();
        let base = score_vector(&lifted, &z).unwrap();
        let sigma = Permutation::new(vec![2, 0, 1]).unwrap();
        let permuted = score_vector(&lifted, &z.apply_perm(&sigma).unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(permuted[i], base[sigma.image(i)]);
        }
    }

    #[test]
    fn f32_instantiation_works() {
        let z = Dataset::new(vec![
            DataPoint::<f32>::scalar(0.0, 1.0).unwrap(),
            DataPoint::<f32>::scalar(0.0, 2.0).unwrap(),
        ])
        .unwrap();
        let score = crate::scores::abs_residual_mean::<f32>();
        let v = score_vector(&score, &z).unwrap();
        assert_eq!(v, vec![0.5_f32, 0.5_f32]);
    }
}
