//! Built-in nonconformity scores.
//!
//! All built-ins report an absolute residual `|y - prediction|` for some
//! cheap predictor fit on the allowed context. The ridge penalty keeps the
//! least-squares variants defined on degenerate designs.

use std::cmp::Ordering;

use crate::data::{Bag, DataPoint, Dataset, ScoreFunction};
use crate::num::Scalar;
use crate::{Error, Result};

const RIDGE_LAMBDA: f64 = 1e-8;

/// `|y - mean response of the bag|`. Bag score.
pub fn abs_residual_mean<F: Scalar>() -> ScoreFunction<F> {
    ScoreFunction::bag(|p: &DataPoint<F>, bag: &Bag<F>| {
        let n = F::from_usize(bag.len()).expect("bag size fits the scalar");
        let mean = bag.responses().sum::<F>() / n;
        (p.y() - mean).abs()
    })
}

/// `|y - x' beta|` with `beta` a ridge least-squares fit on the bag. Bag
/// score.
pub fn abs_residual_ls<F: Scalar>() -> ScoreFunction<F> {
    ScoreFunction::bag(|p: &DataPoint<F>, bag: &Bag<F>| {
        let beta = ridge_fit(bag.points(), None);
        (p.y() - dot(p.x(), &beta)).abs()
    })
}

/// `|y - x' beta|` with `beta` a recency-weighted ridge fit on the ordered
/// data: position `i` of `n` gets weight `decay^(n-1-i)`, so later points
/// count more. Ordered score.
pub fn recency_weighted_ls<F: Scalar>(decay: F) -> Result<ScoreFunction<F>> {
    if !(decay > F::zero() && decay <= F::one()) {
        return Err(Error::InvalidArgument(
            "recency decay must lie in (0, 1]".into(),
        ));
    }
    Ok(ScoreFunction::ordered(move |p: &DataPoint<F>, z: &Dataset<F>| {
        let n = z.len();
        let mut weights = Vec::with_capacity(n);
        let mut w = F::one();
        for _ in 0..n {
            weights.push(w);
            w = w * decay;
        }
        weights.reverse();
        let beta = ridge_fit(z.points(), Some(&weights));
        (p.y() - dot(p.x(), &beta)).abs()
    }))
}

/// `|y - mean response of the k nearest prefix points|` under Euclidean
/// feature distance, ties broken by prefix position. `k` is clamped to the
/// prefix size. Split score.
pub fn knn_residual<F: Scalar>(k: usize) -> Result<ScoreFunction<F>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(ScoreFunction::split(move |p: &DataPoint<F>, prefix: &[DataPoint<F>]| {
        assert!(!prefix.is_empty(), "knn residual needs a nonempty prefix");
        let mut order: Vec<usize> = (0..prefix.len()).collect();
        let dist = |q: &DataPoint<F>| -> F {
            p.x()
                .iter()
                .zip(q.x().iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<F>()
        };
        order.sort_by(|&i, &j| {
            dist(&prefix[i])
                .partial_cmp(&dist(&prefix[j]))
                .unwrap_or(Ordering::Equal)
        });
        let kk = k.min(prefix.len());
        let mean = order[..kk]
            .iter()
            .map(|&i| prefix[i].y())
            .sum::<F>()
            / F::from_usize(kk).expect("neighbor count fits the scalar");
        (p.y() - mean).abs()
    }))
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b.iter()).map(|(&u, &v)| u * v).sum()
}

/// Weighted ridge regression via the normal equations and Gaussian
/// elimination with partial pivoting. The feature dimension is small
/// (desk-scale problems), so a dense solve is fine.
fn ridge_fit<F: Scalar>(points: &[DataPoint<F>], weights: Option<&[F]>) -> Vec<F> {
    let d = points[0].dim();
    let lambda = F::from_f64(RIDGE_LAMBDA).expect("ridge penalty fits the scalar");
    let mut a = vec![vec![F::zero(); d]; d];
    let mut b = vec![F::zero(); d];
    for (idx, p) in points.iter().enumerate() {
        let w = weights.map_or(F::one(), |ws| ws[idx]);
        for r in 0..d {
            for c in 0..d {
                a[r][c] = a[r][c] + w * p.x()[r] * p.x()[c];
            }
            b[r] = b[r] + w * p.x()[r] * p.y();
        }
    }
    for r in 0..d {
        a[r][r] = a[r][r] + lambda;
    }
    solve_linear(a, b)
}

fn solve_linear<F: Scalar>(mut a: Vec<Vec<F>>, mut b: Vec<F>) -> Vec<F> {
    let d = b.len();
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(Ordering::Equal)
            })
            .expect("nonempty pivot range");
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        if diag == F::zero() {
            continue;
        }
        for row in (col + 1)..d {
            let factor = a[row][col] / diag;
            for c in col..d {
                let v = a[col][c];
                a[row][c] = a[row][c] - factor * v;
            }
            let v = b[col];
            b[row] = b[row] - factor * v;
        }
    }
    let mut x = vec![F::zero(); d];
    for col in (0..d).rev() {
        let mut acc = b[col];
        for c in (col + 1)..d {
            acc = acc - a[col][c] * x[c];
        }
        x[col] = if a[col][col] == F::zero() {
            F::zero()
        } else {
            acc / a[col][col]
        };
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::score_vector;

    fn pt(x: f64, y: f64) -> DataPoint<f64> {
        DataPoint::scalar(x, y).unwrap()
    }

    #[test]
    fn mean_residual_matches_hand_computation() {
        let z = Dataset::new(vec![pt(0.0, 1.0), pt(0.0, 2.0), pt(0.0, 6.0)]).unwrap();
        let v = score_vector(&abs_residual_mean(), &z).unwrap();
        assert_eq!(v, vec![2.0, 1.0, 3.0]);
    }

    #[test]
    fn ls_residual_recovers_exact_linear_data() {
        let pts = vec![pt(1.0, 2.0), pt(2.0, 4.0), pt(3.0, 6.0)];
        let z = Dataset::new(pts).unwrap();
        let v = score_vector(&abs_residual_ls(), &z).unwrap();
        for s in v {
            assert!(s < 1e-6, "residual {s} should be near zero");
        }
    }

    #[test]
    fn ls_residual_is_bag_symmetric() {
        let z = Dataset::new(vec![pt(1.0, 2.5), pt(2.0, 3.5), pt(3.0, 7.0)]).unwrap();
        let score = abs_residual_ls::<f64>();
        let base = score_vector(&score, &z).unwrap();
        let sigma = crate::data::Permutation::new(vec![2, 0, 1]).unwrap();
        let permuted = score_vector(&score, &z.apply_perm(&sigma).unwrap()).unwrap();
        for i in 0..3 {
            assert_eq!(permuted[i], base[sigma.image(i)]);
        }
    }

    #[test]
    fn recency_weights_favor_late_points() {
        // Two incompatible linear trends; the recency fit should track the
        // later points more closely than the earlier ones.
        let pts = vec![pt(1.0, 10.0), pt(2.0, 20.0), pt(1.0, 1.0), pt(2.0, 2.0)];
        let z = Dataset::new(pts).unwrap();
        let score = recency_weighted_ls(0.1).unwrap();
        let v = score_vector(&score, &z).unwrap();
        assert!(v[3] < v[1], "late point should fit better: {v:?}");
    }

    #[test]
    fn knn_uses_nearest_neighbors() {
        let prefix = vec![pt(0.0, 1.0), pt(10.0, 100.0), pt(0.5, 3.0)];
        let score = knn_residual(2).unwrap();
        let s = match &score {
            ScoreFunction::Split(f) => f(&pt(0.0, 0.0), &prefix),
            _ => unreachable!(),
        };
        assert_eq!(s, 2.0);
    }

    #[test]
    fn knn_rejects_zero_k() {
        assert!(knn_residual::<f64>(0).is_err());
    }
}
