//! End-to-end checks, one per guarantee the library makes. Each test
//! prints a single PASS line so a full run reads as a checklist:
//!
//! 1. every shortcut p-value equals brute-force enumeration;
//! 2. threshold duality and set/p-value agreement never fail;
//! 3. exact finite-sample type-1 error stays at or below the level;
//! 4. coverage floors hold in seeded simulations;
//! 5. misspecified weights stay within their robustness bounds;
//! 6. sampled p-values are superuniform and converge to exact ones;
//! 7. the command line tool is deterministic, serial or parallel.

use std::process::Command;
use std::sync::Arc;

use rand::Rng;

use conformal_lab::engine::derive_rng;
use conformal_lab::methods::{Aux, LikelihoodRatioFn, Method, PointWeight};
use conformal_lab::oracle::{equivalence_suite, exact_type1_suite};
use conformal_lab::scores::abs_residual_mean;
use conformal_lab::simlab::{
    drift_bound_terms, estimate_coverage, estimate_l1_inflation, superuniformity_curve,
    Acquisition, GeneratorSpec, PvalueScheme,
};
use conformal_lab::{DataPoint, Dataset, Permutation, Threshold, WeightedMeasure};

fn binomial_3se(p: f64, trials: usize) -> f64 {
    3.0 * (p * (1.0 - p) / trials as f64).sqrt()
}

fn random_dataset(len: usize, rng: &mut conformal_lab::engine::SimRng) -> Dataset {
    let points = (0..len)
        .map(|_| {
            DataPoint::scalar(rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0)
                .expect("finite coordinates")
        })
        .collect();
    Dataset::new(points).expect("at least two points")
}

#[test]
fn criterion_1_shortcuts_match_brute_force() {
    let reports = equivalence_suite(5, 200, 17).expect("suite runs");
    let mut worst: f64 = 0.0;
    for (label, report) in &reports {
        assert!(
            report.passed(),
            "{label}: {}",
            report.first_failure.as_deref().unwrap_or("")
        );
        assert_eq!(report.cases_checked, 200, "{label}");
        worst = worst.max(report.max_abs_diff);
    }
    println!(
        "PASS criterion 1: {} methods x 200 instances agree with brute force, \
         max |diff| = {worst:.3e}",
        reports.len()
    );
}

#[test]
fn criterion_2_duality_never_fails() {
    let mut rng = derive_rng(2, 0);

    // Threshold duality on random weighted measures with ties: membership
    // through the (possibly unnormalized) tail mass agrees with membership
    // through the dual threshold, at every probe point including the atom
    // values themselves.
    let mut checks = 0usize;
    for _ in 0..10_000 {
        let len = rng.gen_range(1..8);
        let atoms: Vec<(f64, f64)> = (0..len)
            .map(|_| (rng.gen_range(0..5) as f64, rng.gen_range(1..16) as f64 / 8.0))
            .collect();
        let m = WeightedMeasure::new(atoms).expect("valid atoms");
        let alpha = rng.gen::<f64>() * m.total() * 1.2;
        let threshold = m.threshold_unnormalized(alpha).expect("valid level");
        for probe in [0.0, 1.0, 2.0, 3.0, 4.0, 4.5, -1.0, rng.gen::<f64>() * 5.0] {
            let by_mass = m.tail_prob(probe) > alpha;
            let by_threshold = match threshold {
                Threshold::Value(t) => probe <= t,
                Threshold::UnboundedBelow => false,
            };
            assert_eq!(
                by_mass, by_threshold,
                "measure {:?}, alpha {alpha}, probe {probe}",
                m.atoms()
            );
            checks += 1;
        }
        // The normalized route must agree with the raw-mass route.
        let norm = m.normalized();
        let t_norm = norm
            .threshold_unnormalized(alpha / m.total())
            .expect("valid level");
        assert_eq!(threshold, t_norm, "normalization changed the threshold");
    }

    // Set membership through p > alpha agrees with membership through the
    // dual score threshold on random prediction problems.
    let w: PointWeight = Arc::new(|p: &DataPoint| (0.4 * p.x()[0]).exp());
    let methods = [
        Method::standard_cp(abs_residual_mean()).expect("valid method"),
        Method::wcp(abs_residual_mean(), w).expect("valid method"),
    ];
    let mut grid_checks = 0usize;
    for case in 0..500 {
        let method = &methods[case % methods.len()];
        // Uniform weights take p onto the grid k/len; a power-of-two len
        // keeps those values and the dyadic levels exact, so p can equal
        // alpha without either comparison route rounding across it.
        let len = if case % methods.len() == 0 {
            [4, 8][(case / 2) % 2]
        } else {
            4 + case % 4
        };
        let z = random_dataset(len, &mut rng);
        let alpha = [0.125, 0.25, 0.5][case % 3];
        let res = method
            .pvalue(&z, &Aux::None, Some(alpha), &mut rng)
            .expect("exact p-value");
        let by_p = res.p > alpha;
        let by_threshold = match res.threshold.expect("threshold requested") {
            Threshold::Value(t) => res.test_score <= t,
            Threshold::UnboundedBelow => false,
        };
        assert_eq!(by_p, by_threshold, "case {case}: p = {}", res.p);
        grid_checks += 1;
    }
    println!(
        "PASS criterion 2: {checks} threshold duality checks and {grid_checks} \
         set membership checks, zero failures"
    );
}

#[test]
fn criterion_3_exact_type1_at_or_below_level() {
    let rows = exact_type1_suite().expect("enumerable laws");
    for (label, alpha, rejection) in &rows {
        assert!(
            rejection <= alpha,
            "{label} at {alpha}: exact rejection {rejection}"
        );
    }
    println!(
        "PASS criterion 3: exact rejection <= alpha on all {} (method, level) pairs",
        rows.len()
    );
}

#[test]
fn criterion_4_coverage_floors() {
    let trials = 2000;
    let alpha = 0.1;
    let slack = binomial_3se(0.9, trials);
    let beta = vec![1.0];
    let mut lines = Vec::new();

    let exchangeable = GeneratorSpec::Exchangeable {
        n: 19,
        d: 1,
        beta: beta.clone(),
        noise_sd: 0.5,
    };
    let shift = GeneratorSpec::CovariateShift {
        n: 19,
        d: 1,
        train_mean: vec![0.0],
        test_mean: vec![0.5],
        beta: beta.clone(),
        noise_sd: 0.5,
    };

    // Exchangeable data: coverage is also capped at 1 - alpha + 1/(n+1).
    let method = Method::standard_cp(abs_residual_mean()).expect("valid method");
    let r = estimate_coverage(&method, &exchangeable, alpha, trials, 41, true, None)
        .expect("simulation runs");
    assert!(r.coverage >= 0.900 - slack, "standard_cp: {}", r.coverage);
    assert!(r.coverage <= 0.950 + slack, "standard_cp: {}", r.coverage);
    lines.push(format!("standard_cp {:.4}", r.coverage));

    let w = shift.oracle_weight().expect("shift generator");
    let method = Method::wcp(abs_residual_mean(), w.clone()).expect("valid method");
    let r = estimate_coverage(&method, &shift, alpha, trials, 42, true, None)
        .expect("simulation runs");
    assert!(r.coverage >= 0.900 - slack, "wcp: {}", r.coverage);
    lines.push(format!("wcp {:.4}", r.coverage));

    let method = Method::wcp_unnormalized(abs_residual_mean(), w).expect("valid method");
    let r = estimate_coverage(&method, &shift, alpha, trials, 43, true, None)
        .expect("simulation runs");
    assert!(r.coverage >= 0.900 - slack, "wcp_unnormalized: {}", r.coverage);
    lines.push(format!("wcp_unnormalized {:.4}", r.coverage));

    let kernel = conformal_lab::methods::KernelSpec::gaussian(1.0).expect("valid kernel");
    let method = Method::rlcp(abs_residual_mean(), kernel.clone()).expect("valid method");
    let r = estimate_coverage(&method, &exchangeable, alpha, trials, 44, true, None)
        .expect("simulation runs");
    assert!(r.coverage >= 0.900 - slack, "rlcp: {}", r.coverage);
    lines.push(format!("rlcp {:.4}", r.coverage));

    let method = Method::rlcp_resample(abs_residual_mean(), kernel).expect("valid method");
    let r = estimate_coverage(&method, &exchangeable, alpha, trials, 45, true, None)
        .expect("simulation runs");
    assert!(r.coverage >= 0.900 - slack, "rlcp_resample: {}", r.coverage);
    lines.push(format!("rlcp_resample {:.4}", r.coverage));

    let fcs = GeneratorSpec::Fcs {
        n: 5,
        d: 1,
        acquisition: Acquisition::BestResponseNormal,
        beta,
        noise_sd: 0.5,
    };
    let lr = fcs.fcs_likelihood_ratio().expect("feedback generator");
    let method = Method::gwcp_is(abs_residual_mean(), lr, None, 500).expect("valid method");
    let r = estimate_coverage(&method, &fcs, alpha, trials, 46, true, None)
        .expect("simulation runs");
    assert!(r.coverage >= 0.900 - slack, "gwcp_is: {}", r.coverage);
    lines.push(format!("gwcp_is {:.4}", r.coverage));

    println!(
        "PASS criterion 4: coverage floors hold at alpha = 0.1 over {trials} trials ({})",
        lines.join(", ")
    );
}

#[test]
fn criterion_5_robustness_bounds() {
    let trials = 2000;
    let alpha = 0.1;
    let beta = vec![1.0];
    let mut lines = Vec::new();

    // Unit weights under a genuine shift: miscoverage can exceed alpha, but
    // only by the importance-weight L1 gap.
    let shift = GeneratorSpec::CovariateShift {
        n: 19,
        d: 1,
        train_mean: vec![0.0],
        test_mean: vec![0.5],
        beta: beta.clone(),
        noise_sd: 0.5,
    };
    let unit: PointWeight = Arc::new(|_p: &DataPoint| 1.0);
    let gap = estimate_l1_inflation(&shift, &unit, 20_000, 7).expect("stable weight mean");
    let method = Method::wcp(abs_residual_mean(), unit).expect("valid method");
    let r = estimate_coverage(
        &method,
        &shift,
        alpha,
        trials,
        51,
        true,
        Some(gap.estimate),
    )
    .expect("simulation runs");
    let miscoverage = 1.0 - r.coverage;
    let bound = alpha + gap.estimate + 3.0 * gap.std_error + binomial_3se(alpha, trials);
    assert!(
        miscoverage <= bound,
        "unit-weight shift: miscoverage {miscoverage} > bound {bound}"
    );
    lines.push(format!("shift w=1: {miscoverage:.4} <= {bound:.4}"));

    // Two-group drift with the test-vs-mixture weight: the excess
    // miscoverage is bounded by the averaged positive-part and
    // total-variation terms.
    let mut means = vec![-0.75; 5];
    means.extend(vec![0.75; 5]);
    let drift = GeneratorSpec::Drift {
        n: 10,
        d: 1,
        per_index_means: means,
        test_mean: 0.75,
        beta: beta.clone(),
        noise_sd: 0.5,
    };
    let w = drift.drift_mixture_weight().expect("drift generator");
    let bound_terms = drift_bound_terms(&drift, &w, 20_000, 7).expect("quadrature runs");
    let method = Method::wcp(abs_residual_mean(), w).expect("valid method");
    let r = estimate_coverage(
        &method,
        &drift,
        alpha,
        trials,
        52,
        true,
        Some(bound_terms.total),
    )
    .expect("simulation runs");
    let miscoverage = 1.0 - r.coverage;
    let bound = alpha + bound_terms.total + binomial_3se(alpha, trials);
    assert!(
        miscoverage <= bound,
        "drift: miscoverage {miscoverage} > bound {bound}"
    );
    lines.push(format!("drift: {miscoverage:.4} <= {bound:.4}"));

    // Raw-mass weights capped below the exact ratio: the cap costs at most
    // the mean clipped-off mass under the training law.
    let w_star = shift.oracle_weight().expect("shift generator");
    let cap = 1.5;
    let w_capped: PointWeight = {
        let w_star = w_star.clone();
        Arc::new(move |p: &DataPoint| w_star(p).min(cap))
    };
    let mut rng = derive_rng(7, 99);
    let clipped: Vec<f64> = (0..20_000)
        .map(|_| {
            let trial = shift.generate(&mut rng).expect("generator runs");
            let p = &trial.training[0];
            (w_star(p) - w_capped(p)).max(0.0)
        })
        .collect();
    let clip_mean = clipped.iter().sum::<f64>() / clipped.len() as f64;
    let clip_var = clipped
        .iter()
        .map(|v| (v - clip_mean) * (v - clip_mean))
        .sum::<f64>()
        / (clipped.len() as f64 - 1.0);
    let clip_se = (clip_var / clipped.len() as f64).sqrt();
    let method = Method::wcp_unnormalized(abs_residual_mean(), w_capped).expect("valid method");
    let r = estimate_coverage(&method, &shift, alpha, trials, 53, true, Some(clip_mean))
        .expect("simulation runs");
    let miscoverage = 1.0 - r.coverage;
    let bound = alpha + clip_mean + 3.0 * clip_se + binomial_3se(alpha, trials);
    assert!(
        miscoverage <= bound,
        "capped raw-mass: miscoverage {miscoverage} > bound {bound}"
    );
    lines.push(format!("capped: {miscoverage:.4} <= {bound:.4}"));

    println!("PASS criterion 5: robustness bounds hold ({})", lines.join(", "));
}

#[test]
fn criterion_6_sampled_pvalues() {
    let trials = 2000;
    let spec = GeneratorSpec::Exchangeable {
        n: 9,
        d: 1,
        beta: vec![1.0],
        noise_sd: 0.5,
    };
    let grid = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

    let schemes = [
        PvalueScheme::McExchangeable {
            score: abs_residual_mean(),
            m: 19,
        },
        PvalueScheme::IsExchangeable {
            score: abs_residual_mean(),
            m: 200,
            tilt: 0.5,
        },
    ];
    for scheme in &schemes {
        let curve =
            superuniformity_curve(scheme, &spec, &grid, trials, 61, true).expect("sweep runs");
        for &(a, ecdf) in &curve {
            assert!(
                ecdf <= a + binomial_3se(a, trials),
                "{}: P(p <= {a}) = {ecdf}",
                scheme.label()
            );
        }
    }

    // The sampled general-reweighting p-value converges to the exact one.
    let lr = LikelihoodRatioFn::new(|z: &Dataset, sigma: &Permutation| {
        let base: f64 = (0..z.len())
            .map(|t| 0.3 * t as f64 * z.point(t).expect("index in range").y())
            .sum();
        let permuted: f64 = (0..z.len())
            .map(|t| 0.3 * t as f64 * z.point(sigma.image(t)).expect("index in range").y())
            .sum();
        permuted - base
    });
    let exact = Method::gwcp_nonsym(abs_residual_mean(), lr.clone()).expect("valid method");
    let sampled = Method::gwcp_is(abs_residual_mean(), lr, None, 10_000).expect("valid method");
    let mut rng = derive_rng(62, 0);
    let mut max_gap: f64 = 0.0;
    for case in 0..20 {
        let z = random_dataset(4 + case % 2, &mut rng);
        let pe = exact
            .pvalue(&z, &Aux::None, None, &mut rng)
            .expect("exact p-value")
            .p;
        let ps = sampled
            .pvalue(&z, &Aux::None, None, &mut rng)
            .expect("sampled p-value")
            .p;
        let gap = (pe - ps).abs();
        max_gap = max_gap.max(gap);
        assert!(gap <= 0.02, "case {case}: exact {pe} vs sampled {ps}");
    }
    println!(
        "PASS criterion 6: sampled p-values superuniform on a 9-level grid and \
         within 0.02 of exact (max gap {max_gap:.4})"
    );
}

#[test]
fn criterion_7_cli_is_deterministic() {
    let dir = std::env::temp_dir().join(format!("conformal-lab-accept-{}", std::process::id()));
    std::fs::create_dir_all(&dir).expect("temp dir");
    let config = dir.join("sim.json");
    std::fs::write(
        &config,
        r#"{
            "task": "coverage",
            "method": "wcp",
            "score": "abs_residual_mean",
            "alpha": [0.1, 0.2],
            "generator": {
                "type": "covariate_shift",
                "n": 10, "d": 1,
                "train_mean": [0.0], "test_mean": [0.5],
                "beta": [1.0], "noise_sd": 0.5
            },
            "weights": "oracle",
            "seed": 3, "trials": 400
        }"#,
    )
    .expect("write config");

    let run = |out: &std::path::Path, serial: bool| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_conformal-lab"));
        cmd.arg("simulate")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out);
        if serial {
            cmd.arg("--serial");
        }
        let status = cmd.status().expect("binary runs");
        assert!(status.success(), "simulate exited with {status}");
        std::fs::read(out).expect("output written")
    };
    let a = run(&dir.join("a.csv"), false);
    let b = run(&dir.join("b.csv"), false);
    let c = run(&dir.join("c.csv"), true);
    assert_eq!(a, b, "two parallel runs differ");
    assert_eq!(a, c, "serial and parallel runs differ");
    assert!(!a.is_empty());
    std::fs::remove_dir_all(&dir).ok();
    println!(
        "PASS criterion 7: repeated and serial-vs-parallel runs are byte-identical \
         ({} bytes of CSV)",
        a.len()
    );
}
