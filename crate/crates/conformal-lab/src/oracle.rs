//! Brute-force reference computations.
//!
//! Every method in [`crate::methods`] computes its p-value through a cheap
//! shortcut (index weights, a single swap, collapsed ratio sums). The
//! oracle recomputes the same p-value by enumerating all `(n+1)!`
//! orderings with the method's full ordering weights, and certifies that
//! the two routes agree to `1e-12`. It can also evaluate the exact
//! finite-sample type-1 error of a method on a fully enumerable toy law.

use itertools::Itertools;

use crate::data::score_vector;
use crate::engine::{derive_rng, SimRng};
use crate::methods::{Aux, Method};
use crate::{Dataset, Error, Permutation, Result, ScoreFunction};

/// Enumeration over orderings is capped at this many points.
pub const BRUTEFORCE_MAX_POINTS: usize = 8;

/// Agreement tolerance between shortcut and brute-force p-values.
pub const EQUIVALENCE_TOL: f64 = 1e-12;

fn all_permutations(n: usize) -> Result<Vec<Permutation>> {
    if n > BRUTEFORCE_MAX_POINTS {
        return Err(Error::Capacity(format!(
            "brute force enumerates orderings of at most {BRUTEFORCE_MAX_POINTS} points \
             ({n} given)"
        )));
    }
    Ok((0..n)
        .permutations(n)
        .map(|map| Permutation::new(map).expect("generated maps are bijections"))
        .collect())
}

/// Brute-force p-value over all orderings of `z`:
///
/// ```text
/// p = sum_sigma w(z, sigma) 1{ s_sigma >= s_id } / sum_sigma w(z, sigma)
/// ```
///
/// where `s_sigma` scores the reordered data under the candidate-ordered
/// convention (bag scores see the bag, ordered scores see the candidate's
/// own order).
pub fn pvalue_bruteforce<W>(weight_fn: W, score: &ScoreFunction, z: &Dataset) -> Result<f64>
where
    W: Fn(&Dataset, &Permutation) -> f64,
{
    let perms = all_permutations(z.len())?;
    // Candidate-ordered scoring only depends on which point sits last for
    // bag scores; score_vector gives that directly.
    let per_index = match score {
        ScoreFunction::Bag(_) => Some(score_vector(score, z)?),
        _ => None,
    };
    let score_of = |sigma: &Permutation| -> Result<f64> {
        match &per_index {
            Some(v) => Ok(v[sigma.image(z.len() - 1)]),
            None => {
                let candidate = z.apply_perm(sigma)?;
                match score {
                    ScoreFunction::Ordered(f) => Ok(f(candidate.last(), &candidate)),
                    _ => Err(Error::InvalidArgument(
                        "brute force needs a bag or ordered score".into(),
                    )),
                }
            }
        }
    };
    let s_id = score_of(&Permutation::identity(z.len()))?;
    let mut num = 0.0;
    let mut den = 0.0;
    for sigma in &perms {
        let w = weight_fn(z, sigma);
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Model(
                "ordering weights must be finite and nonnegative".into(),
            ));
        }
        den += w;
        if score_of(sigma)? >= s_id {
            num += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::Model("ordering weights must have positive total".into()));
    }
    Ok(num / den)
}

/// Brute-force p-value of a method using its registered full ordering
/// weights and scoring convention. Normalized methods divide by the total
/// weight; raw-mass methods divide by the number of orderings instead,
/// which reproduces the raw index mass.
pub fn pvalue_bruteforce_method(method: &Method, z: &Dataset, aux: &Aux) -> Result<f64> {
    let perms = all_permutations(z.len())?;
    let s_id = method.perm_score(z, &Permutation::identity(z.len()), aux)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for sigma in &perms {
        let w = method.perm_weight(z, sigma, aux)?;
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Model(
                "ordering weights must be finite and nonnegative".into(),
            ));
        }
        den += w;
        if method.perm_score(z, sigma, aux)? >= s_id {
            num += w;
        }
    }
    if method.is_unnormalized() {
        Ok(num / perms.len() as f64)
    } else {
        if den <= 0.0 {
            return Err(Error::Model(
                "ordering weights must have positive total".into(),
            ));
        }
        Ok(num / den)
    }
}

/// Result of an equivalence sweep.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub cases_checked: usize,
    pub max_abs_diff: f64,
    /// Description of the first case exceeding the tolerance, if any.
    pub first_failure: Option<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.first_failure.is_none()
    }
}

/// Checks a method's shortcut p-value against brute-force enumeration on
/// `count` generated instances. The generator receives the case index and
/// a derived RNG and returns the augmented data with the auxiliary
/// randomness to condition on.
pub fn check_method_equivalence<G>(
    method: &Method,
    mut generate: G,
    count: usize,
    seed: u64,
) -> Result<OracleReport>
where
    G: FnMut(usize, &mut SimRng) -> Result<(Dataset, Aux)>,
{
    let mut max_abs_diff: f64 = 0.0;
    let mut first_failure = None;
    for case in 0..count {
        let mut rng = derive_rng(seed, case as u64);
        let (z, aux) = generate(case, &mut rng)?;
        let shortcut = method.pvalue(&z, &aux, None, &mut rng)?.p;
        let brute = pvalue_bruteforce_method(method, &z, &aux)?;
        let diff = (shortcut - brute).abs();
        max_abs_diff = max_abs_diff.max(diff);
        if diff > EQUIVALENCE_TOL && first_failure.is_none() {
            first_failure = Some(format!(
                "case {case}: shortcut {shortcut} vs brute force {brute} (diff {diff:e})"
            ));
        }
    }
    Ok(OracleReport {
        cases_checked: count,
        max_abs_diff,
        first_failure,
    })
}

/// A fully enumerable law over datasets: every joint outcome with its
/// probability.
#[derive(Clone, Debug)]
pub struct ToyLaw {
    outcomes: Vec<(Dataset, f64)>,
}

impl ToyLaw {
    pub fn new(outcomes: Vec<(Dataset, f64)>) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::InvalidArgument("toy law needs outcomes".into()));
        }
        let total: f64 = outcomes.iter().map(|&(_, p)| p).sum();
        if outcomes.iter().any(|&(_, p)| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "outcome probabilities must be finite and nonnegative".into(),
            ));
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "outcome probabilities must sum to one, got {total}"
            )));
        }
        Ok(Self { outcomes })
    }

    /// Product law: position `t` draws independently from
    /// `components[t]`, a finite list of (point, probability) atoms.
    /// Dyadic atom probabilities keep every outcome probability exact in
    /// floating point.
    pub fn product(components: &[Vec<(crate::DataPoint, f64)>]) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::InvalidArgument(
                "product law needs at least two positions".into(),
            ));
        }
        let per_point: usize = components.iter().map(|c| c.len()).product();
        if per_point > 1_000_000 {
            return Err(Error::Capacity(format!(
                "product law would enumerate {per_point} outcomes"
            )));
        }
        let outcomes = components
            .iter()
            .map(|c| c.iter())
            .multi_cartesian_product()
            .map(|combo| {
                let prob: f64 = combo.iter().map(|&&(_, p)| p).product();
                let points = combo.iter().map(|&&(ref pt, _)| pt.clone()).collect();
                Ok((Dataset::new(points)?, prob))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(outcomes)
    }

    /// I.i.d. law: `len` positions, all drawing from `atoms`.
    pub fn iid(atoms: &[(crate::DataPoint, f64)], len: usize) -> Result<Self> {
        Self::product(&vec![atoms.to_vec(); len])
    }

    /// Training positions draw from `train_atoms`, the last position from
    /// `test_atoms`.
    pub fn shifted(
        train_atoms: &[(crate::DataPoint, f64)],
        n_train: usize,
        test_atoms: &[(crate::DataPoint, f64)],
    ) -> Result<Self> {
        let mut components = vec![train_atoms.to_vec(); n_train];
        components.push(test_atoms.to_vec());
        Self::product(&components)
    }

    pub fn outcomes(&self) -> &[(Dataset, f64)] {
        &self.outcomes
    }
}

/// Exact rejection probability `P(p <= alpha)` of a method's p-value under
/// a toy law, summing over every joint outcome and every value of the
/// method's auxiliary randomness. Only methods whose auxiliary randomness
/// has finite support are enumerable this way.
pub fn exact_type1(method: &Method, law: &ToyLaw, alpha: f64) -> Result<f64> {
    crate::engine::validate_alpha(alpha)?;
    let mut rejection = 0.0;
    let mut rng = derive_rng(0, 0);
    for (z, prob) in law.outcomes() {
        if *prob == 0.0 {
            continue;
        }
        let auxes = method.aux_support(z)?.ok_or_else(|| {
            Error::Config(format!(
                "{} has auxiliary randomness without finite support; its exact \
                 type-1 error is not enumerable",
                method.name()
            ))
        })?;
        for (aux, aux_prob) in auxes {
            if aux_prob == 0.0 {
                continue;
            }
            let p = method.pvalue(z, &aux, None, &mut rng)?.p;
            if p <= alpha {
                rejection += prob * aux_prob;
            }
        }
    }
    Ok(rejection)
}

/// Builds the standard battery of shortcut-vs-brute-force checks: every
/// exactly computable method with representative parameters on random
/// instances of up to `max_n` points. Returns one labeled report per
/// method.
pub fn equivalence_suite(max_n: usize, cases: usize, seed: u64) -> Result<Vec<(String, OracleReport)>> {
    use crate::methods::{KernelSpec, LikelihoodRatioFn, Method, PointWeight, SwapWeights};
    use crate::scores::{abs_residual_mean, knn_residual, recency_weighted_ls};
    use rand::Rng;
    use std::sync::Arc;

    if max_n < 4 || max_n > BRUTEFORCE_MAX_POINTS {
        return Err(Error::InvalidArgument(format!(
            "max_n must lie in [4, {BRUTEFORCE_MAX_POINTS}]"
        )));
    }
    let random_dataset = |len: usize, rng: &mut SimRng| -> Result<Dataset> {
        Dataset::new(
            (0..len)
                .map(|_| {
                    crate::DataPoint::scalar(
                        rng.gen::<f64>() * 4.0 - 2.0,
                        rng.gen::<f64>() * 4.0 - 2.0,
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        )
    };
    let sizes = move |case: usize| 2 + case % (max_n - 1);
    let mut out = Vec::new();

    let method = Method::standard_cp(abs_residual_mean())?;
    out.push((
        "standard_cp".into(),
        check_method_equivalence(
            &method,
            |case, rng| Ok((random_dataset(sizes(case), rng)?, Aux::None)),
            cases,
            seed,
        )?,
    ));

    let n0 = 2;
    let method = Method::split_cp(knn_residual(2)?, n0)?;
    out.push((
        "split_cp".into(),
        check_method_equivalence(
            &method,
            |case, rng| {
                let len = n0 + 2 + case % (max_n - n0 - 1);
                Ok((random_dataset(len, rng)?, Aux::None))
            },
            cases,
            seed.wrapping_add(1),
        )?,
    ));

    let w: PointWeight = Arc::new(|p: &crate::DataPoint| (0.5 * p.x()[0]).exp());
    let method = Method::wcp(abs_residual_mean(), w.clone())?;
    out.push((
        "wcp".into(),
        check_method_equivalence(
            &method,
            |case, rng| Ok((random_dataset(sizes(case), rng)?, Aux::None)),
            cases,
            seed.wrapping_add(2),
        )?,
    ));

    let method = Method::wcp_unnormalized(abs_residual_mean(), w)?;
    out.push((
        "wcp_unnormalized".into(),
        check_method_equivalence(
            &method,
            |case, rng| Ok((random_dataset(sizes(case), rng)?, Aux::None)),
            cases,
            seed.wrapping_add(3),
        )?,
    ));

    let method = Method::nexcp(abs_residual_mean(), SwapWeights::geometric(max_n, 0.7)?)?;
    out.push((
        "nexcp".into(),
        check_method_equivalence(
            &method,
            |_case, rng| {
                let z = random_dataset(max_n, rng)?;
                let k0 = rng.gen_range(0..max_n);
                Ok((z, Aux::Index(k0)))
            },
            cases,
            seed.wrapping_add(4),
        )?,
    ));

    for (label, kernel) in [
        ("rlcp[gaussian]", KernelSpec::gaussian(0.8)?),
        ("rlcp[box]", KernelSpec::boxcar(3.0)?),
    ] {
        let method = Method::rlcp(abs_residual_mean(), kernel)?;
        let m = method.clone();
        out.push((
            label.into(),
            check_method_equivalence(
                &method,
                move |case, rng| {
                    let z = random_dataset(sizes(case), rng)?;
                    let training = &z.points()[..z.len() - 1];
                    let aux = m.draw_aux(training, z.last().x(), rng)?;
                    Ok((z, aux))
                },
                cases,
                seed.wrapping_add(5),
            )?,
        ));
    }

    let method = Method::rlcp_resample(abs_residual_mean(), KernelSpec::gaussian(0.8)?)?;
    let m = method.clone();
    out.push((
        "rlcp_resample".into(),
        check_method_equivalence(
            &method,
            move |case, rng| {
                let z = random_dataset(sizes(case), rng)?;
                let training = &z.points()[..z.len() - 1];
                let aux = m.draw_aux(training, z.last().x(), rng)?;
                Ok((z, aux))
            },
            cases,
            seed.wrapping_add(6),
        )?,
    ));

    let lr = LikelihoodRatioFn::new(|z: &Dataset, sigma: &Permutation| {
        let base: f64 = (0..z.len())
            .map(|t| 0.2 * t as f64 * z.point(t).expect("index in range").y())
            .sum();
        let permuted: f64 = (0..z.len())
            .map(|t| 0.2 * t as f64 * z.point(sigma.image(t)).expect("index in range").y())
            .sum();
        permuted - base
    });
    let method = Method::gwcp(abs_residual_mean(), lr.clone())?;
    out.push((
        "gwcp".into(),
        check_method_equivalence(
            &method,
            |case, rng| Ok((random_dataset(sizes(case), rng)?, Aux::None)),
            cases,
            seed.wrapping_add(7),
        )?,
    ));

    let method = Method::gwcp_nonsym(recency_weighted_ls(0.9)?, lr)?;
    out.push((
        "gwcp_nonsym".into(),
        check_method_equivalence(
            &method,
            |case, rng| Ok((random_dataset(2 + case % 4, rng)?, Aux::None)),
            cases,
            seed.wrapping_add(8),
        )?,
    ));

    Ok(out)
}

/// Exact type-1 error checks on fully enumerable toy laws with dyadic
/// probabilities: every returned triple is `(label, alpha, rejection)` and
/// validity demands `rejection <= alpha` exactly.
pub fn exact_type1_suite() -> Result<Vec<(String, f64, f64)>> {
    use crate::methods::{LikelihoodRatioFn, Method, PointWeight, SwapWeights};
    use crate::scores::abs_residual_mean;
    use std::sync::Arc;

    let pt = |y: f64| crate::DataPoint::scalar(0.0, y).expect("finite point");
    let train_atoms = vec![(pt(0.0), 0.5), (pt(1.0), 0.25), (pt(2.0), 0.25)];
    let test_atoms = vec![(pt(0.0), 0.25), (pt(1.0), 0.25), (pt(2.0), 0.5)];
    // Test-to-training probability ratio, looked up by the response value
    // (the three support points are distinguished by response alone).
    let ratio: PointWeight = Arc::new(|p: &crate::DataPoint| {
        if p.y() < 0.5 {
            0.5
        } else if p.y() < 1.5 {
            1.0
        } else {
            2.0
        }
    });
    let alphas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
    let mut out = Vec::new();

    let iid = ToyLaw::iid(&train_atoms, 3)?;
    let shifted = ToyLaw::shifted(&train_atoms, 2, &test_atoms)?;

    let method = Method::standard_cp(abs_residual_mean())?;
    for &alpha in &alphas {
        out.push(("standard_cp".into(), alpha, exact_type1(&method, &iid, alpha)?));
    }

    let method = Method::wcp(abs_residual_mean(), ratio.clone())?;
    for &alpha in &alphas {
        out.push(("wcp[oracle]".into(), alpha, exact_type1(&method, &shifted, alpha)?));
    }

    // Product-form joint ratio matching the shifted law: reordering only
    // changes which point is treated as the test draw.
    let r = ratio.clone();
    let lr = LikelihoodRatioFn::new(move |z: &Dataset, sigma: &Permutation| {
        let n = z.len();
        (r(z.point(sigma.image(n - 1)).expect("index in range")) / r(z.last())).ln()
    });
    let method = Method::gwcp(abs_residual_mean(), lr)?;
    for &alpha in &alphas {
        out.push(("gwcp[oracle]".into(), alpha, exact_type1(&method, &shifted, alpha)?));
    }

    let method = Method::nexcp(
        abs_residual_mean(),
        SwapWeights::new(vec![0.25, 0.25, 0.5])?,
    )?;
    for &alpha in &alphas {
        out.push(("nexcp[set]".into(), alpha, exact_type1(&method, &iid, alpha)?));
    }

    Ok(out)
}
