//! Property-based checks of the structural invariants everything else
//! leans on:
//!
//! 1. the bag of a dataset is invariant under reordering;
//! 2. swapping a position with the last is an involution;
//! 3. composing with the identity changes nothing;
//! 4. bag scores only depend on which point sits last;
//! 5. quantiles walk up with the level and land on atom values;
//! 6. the generalized threshold is dual to the tail mass and moves up as
//!    the level shrinks;
//! 7. the inflated calibration quantile is monotone in the level;
//! 8. geometric swap weights form a distribution with a maximal last
//!    entry;
//! 9. trial streams are reproducible from `(seed, index)`.

use proptest::prelude::*;

use conformal_lab::data::score_vector;
use conformal_lab::engine::derive_rng;
use conformal_lab::methods::SwapWeights;
use conformal_lab::scores::abs_residual_mean;
use conformal_lab::wdist::quantile_inflate;
use conformal_lab::{DataPoint, Dataset, Permutation, Threshold, WeightedMeasure};
use rand::Rng;

fn dataset_strategy(max_len: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec((-50i32..50, -50i32..50), 2..=max_len).prop_map(|coords| {
        let points = coords
            .into_iter()
            .map(|(x, y)| {
                DataPoint::scalar(x as f64 / 4.0, y as f64 / 4.0).expect("finite coordinates")
            })
            .collect();
        Dataset::new(points).expect("at least two points")
    })
}

fn permutation_strategy(len: usize) -> impl Strategy<Value = Permutation> {
    any::<u64>().prop_map(move |seed| Permutation::random(len, &mut derive_rng(seed, 0)))
}

fn measure_strategy() -> impl Strategy<Value = WeightedMeasure> {
    prop::collection::vec((0i32..6, 1u32..64), 1..8).prop_map(|atoms| {
        WeightedMeasure::new(
            atoms
                .into_iter()
                .map(|(v, w)| (v as f64, w as f64 / 16.0))
                .collect(),
        )
        .expect("positive weights")
    })
}

proptest! {
    #[test]
    fn bag_is_invariant_under_reordering(z in dataset_strategy(7), seed in any::<u64>()) {
        let sigma = Permutation::random(z.len(), &mut derive_rng(seed, 0));
        prop_assert_eq!(z.apply_perm(&sigma).unwrap().to_bag(), z.to_bag());
    }

    #[test]
    fn swap_is_an_involution(z in dataset_strategy(7), k_raw in any::<usize>()) {
        let k = k_raw % z.len();
        prop_assert_eq!(&z.swap(k).unwrap().swap(k).unwrap(), &z);
    }

    #[test]
    fn identity_is_neutral_for_composition(sigma in permutation_strategy(6)) {
        let id = Permutation::identity(6);
        prop_assert_eq!(&sigma.compose(&id).unwrap(), &sigma);
        prop_assert_eq!(&id.compose(&sigma).unwrap(), &sigma);
        prop_assert!(Permutation::swap_with_last(6, 2)
            .unwrap()
            .compose(&Permutation::swap_with_last(6, 2).unwrap())
            .unwrap()
            .is_identity());
    }

    #[test]
    fn bag_scores_depend_only_on_the_last_point(
        z in dataset_strategy(7),
        seed in any::<u64>(),
    ) {
        let score = abs_residual_mean();
        let v = score_vector(&score, &z).unwrap();
        let sigma = Permutation::random(z.len(), &mut derive_rng(seed, 0));
        let w = score_vector(&score, &z.apply_perm(&sigma).unwrap()).unwrap();
        for i in 0..z.len() {
            prop_assert_eq!(w[i], v[sigma.image(i)]);
        }
    }

    #[test]
    fn quantiles_walk_up_with_the_level(m in measure_strategy(), levels in prop::collection::vec(0.0f64..=1.0, 2..6)) {
        let m = m.normalized();
        let mut sorted = levels.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for tau in sorted {
            let q = m.quantile(tau).unwrap();
            prop_assert!(q >= prev);
            prop_assert!(m.atoms().iter().any(|&(v, _)| v == q));
            prev = q;
        }
    }

    #[test]
    fn threshold_is_dual_to_the_tail_mass(
        m in measure_strategy(),
        alpha_num in 0u32..96,
        probe in -1i32..8,
    ) {
        // Dyadic levels keep the boundary case p == alpha exact.
        let alpha = alpha_num as f64 / 16.0;
        let probe = probe as f64;
        let admitted = match m.threshold_unnormalized(alpha).unwrap() {
            Threshold::Value(t) => probe <= t,
            Threshold::UnboundedBelow => false,
        };
        prop_assert_eq!(m.tail_prob(probe) > alpha, admitted);
    }

    #[test]
    fn threshold_moves_up_as_the_level_shrinks(m in measure_strategy(), a in 0u32..64, b in 0u32..64) {
        let (lo, hi) = (a.min(b) as f64 / 16.0, a.max(b) as f64 / 16.0);
        let t_hi = m.threshold_unnormalized(hi).unwrap();
        let t_lo = m.threshold_unnormalized(lo).unwrap();
        match (t_lo, t_hi) {
            (Threshold::Value(l), Threshold::Value(h)) => prop_assert!(l >= h),
            (Threshold::UnboundedBelow, Threshold::Value(_)) => {
                prop_assert!(false, "larger level produced a larger threshold")
            }
            _ => {}
        }
    }

    #[test]
    fn inflated_quantile_is_monotone_in_the_level(
        values in prop::collection::vec(-100i32..100, 1..12),
        a in 1u32..16,
        b in 1u32..16,
    ) {
        let values: Vec<f64> = values.into_iter().map(|v| v as f64 / 4.0).collect();
        let (lo, hi) = (a.min(b) as f64 / 16.0, a.max(b) as f64 / 16.0);
        let q_lo = quantile_inflate(&values, lo).unwrap();
        let q_hi = quantile_inflate(&values, hi).unwrap();
        prop_assert!(q_lo >= q_hi);
        prop_assert!(values.contains(&q_lo));
    }

    #[test]
    fn geometric_swap_weights_form_a_distribution(len in 2usize..12, decay_num in 1u32..100) {
        let decay = decay_num as f64 / 100.0;
        let w = SwapWeights::geometric(len, decay).unwrap();
        let s = w.as_slice();
        prop_assert_eq!(s.len(), len);
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s[len - 1] >= max - 1e-15);
    }

    #[test]
    fn trial_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let a: Vec<u64> = {
            let mut rng = derive_rng(seed, stream);
            (0..4).map(|_| rng.gen()).collect()
        };
        let b: Vec<u64> = {
            let mut rng = derive_rng(seed, stream);
            (0..4).map(|_| rng.gen()).collect()
        };
        prop_assert_eq!(a, b);
    }
}
