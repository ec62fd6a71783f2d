//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities (run with `--nocapture` to see them). Oracles are
//! brute-force stratified computations on the raw rows, independent of the
//! model-fitting path they check.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ratioport::datamodel::{AnalysisDataset, ObservationRow, OutcomeKind};
use ratioport::diagnostics::{
    check_restriction, compat_check, restriction_statistic, Restriction, RestrictionSpecs,
    StratumMeans,
};
use ratioport::estimators::{
    bootstrap_ci, estimate_ate, estimate_chi, estimate_phi, estimate_psi, BootstrapConfig,
    EstimationPipeline, EstimatorId, NuisanceSource, RatioSource,
};
use ratioport::glm::{fit_glm, log_likelihood, Family, FittedModel, Link, ModelSpec};
use ratioport::nuisance::{fit_g, fit_h, fit_iterated, fit_m, fit_ratio, NuisanceSet, RatioMethod, RatioModel};
use ratioport::simulate::{
    generate, true_estimands, EffectSpec, OraclePrecision, OutcomeFamily, ScenarioSpec,
    TargetTreatment, WDist,
};

// ---------------------------------------------------------------------------
// shared builders
// ---------------------------------------------------------------------------

fn row(x: f64, w: Option<Vec<f64>>, s: u8, a: u8, y: f64) -> ObservationRow {
    ObservationRow { x: vec![x], w, s, a, y }
}

/// Deterministic n = 200 dataset with binary X and binary W (the W block
/// carries the interaction column so (X, W) fits can saturate).
///
/// Trial cells (x, a) have 25 rows each with outcome means
/// 0.2 / 0.4 (controls) and 0.4 / 0.6 (treated); target cells (x, w) have
/// 25 rows each, all untreated, with means 0.2, 0.4, 0.6, 0.8.
fn saturated_dataset() -> AnalysisDataset {
    let mut rows = Vec::new();
    let trial_ones = [((0.0), 0, 5), ((0.0), 1, 10), ((1.0), 0, 10), ((1.0), 1, 15)];
    for &(x, a, ones) in &trial_ones {
        for i in 0..25 {
            rows.push(row(x, None, 1, a, f64::from(u8::from(i < ones))));
        }
    }
    let target_ones = [((0.0, 0.0), 5), ((0.0, 1.0), 10), ((1.0, 0.0), 15), ((1.0, 1.0), 20)];
    for &((x, w), ones) in &target_ones {
        for i in 0..25 {
            rows.push(row(x, Some(vec![w, x * w]), 0, 0, f64::from(u8::from(i < ones))));
        }
    }
    AnalysisDataset::new(
        rows,
        vec!["x".into()],
        vec!["w".into(), "xw".into()],
        OutcomeKind::Binary,
    )
    .unwrap()
}

fn saturated_nuisances(ds: &AnalysisDataset) -> NuisanceSet {
    let x_logit = ModelSpec::canonical(Family::Bernoulli, vec!["x".into()]);
    let xw_logit = ModelSpec::canonical(Family::Bernoulli, vec!["x".into(), "w".into(), "xw".into()]);
    let step3 = ModelSpec::canonical(Family::Gaussian, vec!["x".into()]);
    let ratio = fit_ratio(ds, &x_logit, RatioMethod::ArmSpecific).unwrap();
    let mut set = NuisanceSet::new(ratio);
    set.g = Some(fit_g(ds, &x_logit).unwrap());
    set.h = Some(fit_h(ds, &x_logit).unwrap());
    let m = fit_m(ds, &xw_logit).unwrap();
    set.b = Some(fit_iterated(ds, &m, &step3).unwrap());
    set.m = Some(m);
    set
}

/// Brute-force stratified-standardization oracle for all six estimators.
/// Everything is a direct group mean over the raw rows.
fn oracle_six(ds: &AnalysisDataset) -> [f64; 6] {
    type Key = (u64, u64);
    let xkey = |x: f64| -> u64 { x.to_bits() };
    let mut sums: BTreeMap<(u8, u8, u64), (f64, f64)> = BTreeMap::new();
    for r in ds.rows().iter().filter(|r| r.s == 1) {
        let e = sums.entry((1, r.a, xkey(r.x[0]))).or_insert((0.0, 0.0));
        e.0 += r.y;
        e.1 += 1.0;
    }
    let arm_mean = |a: u8, x: f64| -> f64 {
        let (s, n) = sums[&(1, a, xkey(x))];
        s / n
    };
    let r_o = |x: f64| arm_mean(1, x) / arm_mean(0, x);

    let mut g_sum: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut h_sum: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    let mut m_sum: BTreeMap<Key, (f64, f64)> = BTreeMap::new();
    for r in ds.rows().iter().filter(|r| r.s == 0) {
        let k = xkey(r.x[0]);
        let e = g_sum.entry(k).or_insert((0.0, 0.0));
        e.0 += r.y;
        e.1 += 1.0;
        if r.a == 0 {
            let e = h_sum.entry(k).or_insert((0.0, 0.0));
            e.0 += r.y;
            e.1 += 1.0;
            if let Some(w) = &r.w {
                let e = m_sum.entry((k, w[0].to_bits())).or_insert((0.0, 0.0));
                e.0 += r.y;
                e.1 += 1.0;
            }
        }
    }
    let mean = |t: &(f64, f64)| t.0 / t.1;
    // b(x): average m over the empirical W | X distribution among all
    // target rows.
    let mut b_sum: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for r in ds.rows().iter().filter(|r| r.s == 0) {
        if let Some(w) = &r.w {
            let k = xkey(r.x[0]);
            let e = b_sum.entry(k).or_insert((0.0, 0.0));
            e.0 += mean(&m_sum[&(k, w[0].to_bits())]);
            e.1 += 1.0;
        }
    }

    let n0 = ds.n0() as f64;
    let (mut np, mut dp, mut nc, mut dc, mut ns, mut dsum) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for r in ds.rows().iter().filter(|r| r.s == 0) {
        let k = xkey(r.x[0]);
        let rx = r_o(r.x[0]);
        np += rx * mean(&g_sum[&k]);
        dp += r.y;
        nc += rx * mean(&h_sum[&k]);
        dc += mean(&h_sum[&k]);
        if let Some(w) = &r.w {
            ns += rx * mean(&b_sum[&k]);
            dsum += mean(&m_sum[&(k, w[0].to_bits())]);
        }
    }
    [
        np / dp,
        nc / dc,
        ns / dsum,
        (np - dp) / n0,
        (nc - dc) / n0,
        (ns - dsum) / n0,
    ]
}

/// The A5 scenario with the worked true values: target baselines (0.1, 0.3),
/// ratios (2, 1.5), so mean ratio 1.625 and ATE 0.125. Gaussian outcomes
/// with a small dispersion keep the sampling noise of the plug-in
/// estimators well inside the stated tolerances at the stated sizes.
fn a5_scenario() -> ScenarioSpec {
    ScenarioSpec {
        x_names: vec!["x".into()],
        x_points: vec![vec![0.0], vec![1.0]],
        trial_probs: vec![0.5, 0.5],
        target_probs: vec![0.5, 0.5],
        baseline_trial: vec![0.15, 0.35],
        baseline_target: vec![0.1, 0.3],
        effect: EffectSpec::MeanRatio(vec![2.0, 1.5]),
        w_dist: None,
        target_treatment: TargetTreatment::AllControl,
        trial_assignment_prob: 0.5,
        outcome_family: OutcomeFamily::Gaussian { sigma: 0.05 },
    }
}

fn gaussian_spec(names: &[&str]) -> ModelSpec {
    ModelSpec::canonical(Family::Gaussian, names.iter().map(|s| s.to_string()).collect())
}

fn phi_pipeline_gaussian() -> EstimationPipeline {
    EstimationPipeline {
        estimator: EstimatorId::Phi,
        ratio: RatioSource::Fit { spec: gaussian_spec(&["x"]), method: RatioMethod::ArmSpecific },
        g: Some(NuisanceSource::Fit(gaussian_spec(&["x"]))),
        h: None,
        m: None,
        step3: None,
    }
}

fn constant_ratio(c: f64) -> RatioModel {
    let treated = FittedModel::external(Family::Gaussian, Link::Identity, vec![], true, vec![c]).unwrap();
    let control = FittedModel::external(Family::Gaussian, Link::Identity, vec![], true, vec![1.0]).unwrap();
    RatioModel::from_arm_models(treated, control).unwrap()
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_saturated_oracle_equivalence() {
    let start = Instant::now();
    let ds = saturated_dataset();
    assert_eq!(ds.n(), 200);
    let nuis = saturated_nuisances(&ds);

    let estimates = [
        estimate_phi(&ds, &nuis).unwrap().value,
        estimate_chi(&ds, &nuis).unwrap().value,
        estimate_psi(&ds, &nuis).unwrap().value,
        estimate_ate(&ds, &nuis, EstimatorId::Beta).unwrap().value,
        estimate_ate(&ds, &nuis, EstimatorId::Gamma).unwrap().value,
        estimate_ate(&ds, &nuis, EstimatorId::Delta).unwrap().value,
    ];
    let oracle = oracle_six(&ds);
    let names = ["phi", "chi", "psi", "beta", "gamma", "delta"];
    for ((name, est), orc) in names.iter().zip(&estimates).zip(&oracle) {
        assert!(
            (est - orc).abs() <= 1e-10,
            "{name}: estimator {est} vs stratified oracle {orc}"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "criterion 1 PASS: six estimators match the stratified oracle to 1e-10 \
         (max dev {:.2e}, {:?})",
        names
            .iter()
            .zip(&estimates)
            .zip(&oracle)
            .map(|((_, e), o)| (e - o).abs())
            .fold(0.0_f64, f64::max),
        elapsed
    );
}

#[test]
fn criterion_02_constant_ratio_exactness() {
    let start = Instant::now();
    let ds = saturated_dataset();
    let fitted = saturated_nuisances(&ds);

    // c = 2 (a power of two, so the factorization is exact in floating point)
    let mut nuis = NuisanceSet::new(constant_ratio(2.0));
    nuis.g = fitted.g.clone();
    nuis.h = fitted.h.clone();
    nuis.m = fitted.m.clone();
    nuis.b = fitted.b.clone();
    let chi = estimate_chi(&ds, &nuis).unwrap().value;
    assert_eq!(chi, 2.0, "chi must factor the constant out exactly, got {chi}");
    let phi = estimate_phi(&ds, &nuis).unwrap().value;
    assert!((phi - 2.0).abs() <= 1e-8, "phi = {phi}");
    let psi = estimate_psi(&ds, &nuis).unwrap().value;
    assert!((psi - 2.0).abs() <= 1e-8, "psi = {psi}");

    // c = 1: the phi-type ATE must vanish.
    let mut unit = NuisanceSet::new(constant_ratio(1.0));
    unit.g = fitted.g.clone();
    let beta = estimate_ate(&ds, &unit, EstimatorId::Beta).unwrap().value;
    assert!(beta.abs() <= 1e-8, "beta = {beta}");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "criterion 2 PASS: chi == c exactly, |phi - c| = {:.2e}, |psi - c| = {:.2e}, \
         |beta| = {:.2e} ({:?})",
        (phi - 2.0).abs(),
        (psi - 2.0).abs(),
        beta.abs(),
        elapsed
    );
}

#[test]
fn criterion_03_ratio_difference_identities() {
    let mut max_dev: f64 = 0.0;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + trial);
        let n1 = 40 + (rng.gen::<u64>() % 80) as usize;
        let n0 = 40 + (rng.gen::<u64>() % 80) as usize;
        let with_w = trial % 2 == 0;
        let mut rows = Vec::new();
        for i in 0..n1 {
            let x = f64::from(u8::from(i % 2 == 0));
            let a = u8::from((i / 2) % 2 == 0);
            let y = 0.5 + 0.4 * x + 0.3 * f64::from(a) + rng.gen::<f64>();
            rows.push(row(x, None, 1, a, y));
        }
        for i in 0..n0 {
            let x = f64::from(u8::from(i % 2 == 0));
            let w = if with_w { Some(vec![f64::from(u8::from((i / 2) % 2 == 0))]) } else { None };
            let a = u8::from(i % 5 == 0);
            let y = 0.4 + 0.3 * x + rng.gen::<f64>();
            rows.push(row(x, w, 0, a, y));
        }
        let w_names: Vec<String> = if with_w { vec!["w".into()] } else { vec![] };
        let ds =
            AnalysisDataset::new(rows, vec!["x".into()], w_names, OutcomeKind::Continuous).unwrap();

        let mut pairs = vec![(EstimatorId::Phi, EstimatorId::Beta), (EstimatorId::Chi, EstimatorId::Gamma)];
        if with_w {
            pairs.push((EstimatorId::Psi, EstimatorId::Delta));
        }
        for (ratio_id, ate_id) in pairs {
            let m_cols: Vec<&str> = if with_w { vec!["x", "w"] } else { vec!["x"] };
            let mut pipeline = EstimationPipeline {
                estimator: ratio_id,
                ratio: RatioSource::Fit { spec: gaussian_spec(&["x"]), method: RatioMethod::ArmSpecific },
                g: Some(NuisanceSource::Fit(gaussian_spec(&["x"]))),
                h: Some(NuisanceSource::Fit(gaussian_spec(&["x"]))),
                m: Some(NuisanceSource::Fit(gaussian_spec(&m_cols))),
                step3: Some(gaussian_spec(&["x"])),
            };
            let ratio_est = pipeline.run(&ds).unwrap();
            pipeline.estimator = ate_id;
            let ate_est = pipeline.run(&ds).unwrap();
            let implied = (ratio_est.value - 1.0) * ratio_est.denominator;
            let dev = (ate_est.value - implied).abs();
            max_dev = max_dev.max(dev);
            assert!(
                dev <= 1e-12,
                "dataset {trial}, {}: ate {} vs (ratio-1)*den {}",
                ate_est.estimator.as_str(),
                ate_est.value,
                implied
            );
        }
    }
    println!("criterion 3 PASS: ratio/difference identity on 100 random datasets (max dev {max_dev:.2e})");
}

#[test]
fn criterion_04_consistency_under_a5() {
    let start = Instant::now();
    let scenario = a5_scenario();
    let truth = true_estimands(&scenario, OraclePrecision::ClosedForm).unwrap();
    assert!((truth.mean_ratio - 1.625).abs() < 1e-12);
    assert!((truth.ate - 0.125).abs() < 1e-12);

    let ds = generate(&scenario, 20_000, 20_000, 404).unwrap();
    let phi = phi_pipeline_gaussian().run(&ds).unwrap();
    let mut beta_pipeline = phi_pipeline_gaussian();
    beta_pipeline.estimator = EstimatorId::Beta;
    let beta = beta_pipeline.run(&ds).unwrap();

    let phi_err = (phi.value - 1.625).abs();
    let beta_err = (beta.value - 0.125).abs();
    assert!(phi_err < 0.02, "phi = {} (err {phi_err})", phi.value);
    assert!(beta_err < 0.01, "beta = {} (err {beta_err})", beta.value);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "criterion 4 PASS: phi err {phi_err:.4} < 0.02, beta err {beta_err:.4} < 0.01 at n = 20000 ({elapsed:?})"
    );
}

#[test]
fn criterion_05_consistency_under_b_and_c() {
    // B-scenario: treatment variation in X only; chi is the valid estimator.
    let mut b_scenario = a5_scenario();
    b_scenario.target_treatment =
        TargetTreatment::LogisticInX { intercept: -0.5, x_coefs: vec![1.0] };
    let b_truth = true_estimands(&b_scenario, OraclePrecision::ClosedForm).unwrap();
    let b_ds = generate(&b_scenario, 20_000, 20_000, 505).unwrap();
    let chi_pipeline = EstimationPipeline {
        estimator: EstimatorId::Chi,
        ratio: RatioSource::Fit { spec: gaussian_spec(&["x"]), method: RatioMethod::ArmSpecific },
        g: None,
        h: Some(NuisanceSource::Fit(gaussian_spec(&["x"]))),
        m: None,
        step3: None,
    };
    let chi = chi_pipeline.run(&b_ds).unwrap();
    let chi_err = (chi.value - b_truth.mean_ratio).abs();
    assert!(chi_err < 0.02, "chi = {} vs truth {} (err {chi_err})", chi.value, b_truth.mean_ratio);

    // C-scenario: confounding controlled by (X, W); psi is the valid
    // estimator. Baselines are additive in (x, w) so the m model on (x, w)
    // is correctly specified.
    let c_scenario = ScenarioSpec {
        x_names: vec!["x".into()],
        x_points: vec![vec![0.0], vec![1.0]],
        trial_probs: vec![0.5, 0.5],
        target_probs: vec![0.5, 0.5],
        baseline_trial: vec![0.15, 0.35],
        baseline_target: vec![0.14, 0.36],
        effect: EffectSpec::MeanRatio(vec![2.0, 1.5]),
        w_dist: Some(WDist {
            names: vec!["w".into()],
            points: vec![vec![0.0], vec![1.0]],
            probs_given_x: vec![vec![0.6, 0.4], vec![0.4, 0.6]],
            baseline_xw: Some(vec![vec![0.1, 0.2], vec![0.3, 0.4]]),
        }),
        target_treatment: TargetTreatment::LogisticInXW {
            intercept: -0.5,
            x_coefs: vec![0.8],
            w_coefs: vec![0.6],
        },
        trial_assignment_prob: 0.5,
        outcome_family: OutcomeFamily::Gaussian { sigma: 0.05 },
    };
    let c_truth = true_estimands(&c_scenario, OraclePrecision::ClosedForm).unwrap();
    let c_ds = generate(&c_scenario, 20_000, 20_000, 506).unwrap();
    let psi_pipeline = EstimationPipeline {
        estimator: EstimatorId::Psi,
        ratio: RatioSource::Fit { spec: gaussian_spec(&["x"]), method: RatioMethod::ArmSpecific },
        g: None,
        h: None,
        m: Some(NuisanceSource::Fit(gaussian_spec(&["x", "w"]))),
        step3: Some(gaussian_spec(&["x"])),
    };
    let psi = psi_pipeline.run(&c_ds).unwrap();
    let psi_err = (psi.value - c_truth.mean_ratio).abs();
    assert!(psi_err < 0.02, "psi = {} vs truth {} (err {psi_err})", psi.value, c_truth.mean_ratio);

    println!(
        "criterion 5 PASS: chi err {chi_err:.4} (B-scenario truth {:.4}), psi err {psi_err:.4} \
         (C-scenario truth {:.4}) at n = 20000",
        b_truth.mean_ratio, c_truth.mean_ratio
    );
}

#[test]
fn criterion_06_confounding_bias_separation() {
    // Engineered B-scenario: strong treatment uptake where the effect is
    // large (x = 0) and almost none where it is absent (x = 1).
    //
    // Oracle quantities, derived before the build:
    //   truth = (0.5*3*0.1 + 0.5*1*0.2) / (0.5*0.1 + 0.5*0.2) = 5/3;
    //   naive phi limit = (0.5*3*0.26 + 0.5*1*0.2) / (0.5*0.26 + 0.5*0.2)
    //                   = 0.49/0.23 = 2.1304  (E[Y|x,S=0] = e0(x)(1 + pi(x)(rho(x)-1))).
    let prob_x0: f64 = 0.8;
    let prob_x1: f64 = 0.05;
    let intercept = (prob_x0 / (1.0 - prob_x0)).ln();
    let slope = (prob_x1 / (1.0 - prob_x1)).ln() - intercept;
    let scenario = ScenarioSpec {
        x_names: vec!["x".into()],
        x_points: vec![vec![0.0], vec![1.0]],
        trial_probs: vec![0.5, 0.5],
        target_probs: vec![0.5, 0.5],
        baseline_trial: vec![0.15, 0.25],
        baseline_target: vec![0.1, 0.2],
        effect: EffectSpec::MeanRatio(vec![3.0, 1.0]),
        w_dist: None,
        target_treatment: TargetTreatment::LogisticInX { intercept, x_coefs: vec![slope] },
        trial_assignment_prob: 0.5,
        outcome_family: OutcomeFamily::Gaussian { sigma: 0.05 },
    };
    let truth = true_estimands(&scenario, OraclePrecision::ClosedForm).unwrap();
    assert!((truth.mean_ratio - 5.0 / 3.0).abs() < 1e-12);
    let naive_limit = 0.49 / 0.23;

    let ds = generate(&scenario, 20_000, 20_000, 606).unwrap();

    // Naive phi: computed while wrongly treating the all-control condition
    // as holding (the library computes it; the CLI would refuse).
    let phi = phi_pipeline_gaussian().run(&ds).unwrap();
    let phi_bias = (phi.value - truth.mean_ratio).abs();
    assert!(phi_bias > 0.05, "naive phi bias {phi_bias} should exceed 0.05");
    assert!(
        (phi.value - naive_limit).abs() < 0.05,
        "naive phi {} should sit near its oracle limit {naive_limit}",
        phi.value
    );

    let chi_pipeline = EstimationPipeline {
        estimator: EstimatorId::Chi,
        ratio: RatioSource::Fit { spec: gaussian_spec(&["x"]), method: RatioMethod::ArmSpecific },
        g: None,
        h: Some(NuisanceSource::Fit(gaussian_spec(&["x"]))),
        m: None,
        step3: None,
    };
    let chi = chi_pipeline.run(&ds).unwrap();
    let chi_bias = (chi.value - truth.mean_ratio).abs();
    assert!(chi_bias < 0.02, "chi bias {chi_bias} should stay under 0.02");

    println!(
        "criterion 6 PASS: naive phi bias {phi_bias:.3} (> 0.05, near limit {naive_limit:.4}), \
         chi bias {chi_bias:.4} (< 0.02)"
    );
}

#[test]
fn criterion_07_bootstrap_coverage() {
    let start = Instant::now();
    let scenario = a5_scenario();
    let truth = 1.625_f64;
    let reps: usize = 500;
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(2);

    let cover_count = std::sync::atomic::AtomicUsize::new(0);
    let failed_runs = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for worker in 0..workers {
            let scenario = &scenario;
            let cover_count = &cover_count;
            let failed_runs = &failed_runs;
            scope.spawn(move || {
                let pipeline = phi_pipeline_gaussian();
                let mut rep = worker;
                while rep < reps {
                    let ds = generate(scenario, 2000, 2000, 1000 + rep as u64).unwrap();
                    let cfg = BootstrapConfig {
                        replicates: 200,
                        level: 0.95,
                        seed: 50_000 + rep as u64,
                        threads: 1,
                    };
                    match bootstrap_ci(&ds, &pipeline, &cfg) {
                        Ok((_, interval)) => {
                            if interval.lower <= truth && truth <= interval.upper {
                                cover_count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                            }
                        }
                        Err(_) => {
                            failed_runs.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        }
                    }
                    rep += workers;
                }
            });
        }
    });
    let failed = failed_runs.load(std::sync::atomic::Ordering::Relaxed);
    assert_eq!(failed, 0, "{failed} Monte Carlo repetitions failed outright");
    let coverage = cover_count.load(std::sync::atomic::Ordering::Relaxed) as f64 / reps as f64;
    assert!(
        (0.92..=0.98).contains(&coverage),
        "empirical coverage {coverage} outside [0.92, 0.98]"
    );
    println!(
        "criterion 7 PASS: percentile-bootstrap coverage {coverage:.3} over {reps} repetitions \
         (B = 200, n = 2000 per stratum, {:?})",
        start.elapsed()
    );
}

#[test]
fn criterion_08_incompatibility_theorem() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut strata = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let branch = rng.gen::<bool>();
        let nonzero = |rng: &mut ChaCha8Rng| -> f64 {
            let v: f64 = rng.gen::<f64>() * 8.0 - 4.0;
            if v.abs() < 1e-3 { 1.0 + v } else { v }
        };
        let s = if branch {
            // Unit ratio branch.
            let c1 = nonzero(&mut rng);
            let c2 = nonzero(&mut rng);
            StratumMeans { e11: c1, e10: c1, e01: c2, e00: c2 }
        } else {
            // Equal-control-means branch.
            let c = nonzero(&mut rng);
            let rho = 0.1 + rng.gen::<f64>() * 9.9;
            StratumMeans { e11: rho * c, e10: c, e01: rho * c, e00: c }
        };
        strata.push(s);
    }
    let report = compat_check(&strata, 0.0).unwrap();
    assert!(report.theorem_satisfied);
    let counterexamples = report
        .strata
        .iter()
        .filter(|s| s.holds_a4 && s.holds_a4_star && !(s.holds_i1 || s.holds_i2))
        .count();
    assert_eq!(counterexamples, 0);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("criterion 8 PASS: 10000 constructed tuples, zero counterexamples ({elapsed:?})");
}

#[test]
fn criterion_09_diagnostics_calibration() {
    // Exact-zero case: the trial control rows and the target rows carry
    // identical (x, y) sequences, so the two saturated fits are bitwise
    // equal and the R2 statistic is exactly zero.
    let mut rows = Vec::new();
    let shared: Vec<(f64, f64)> = (0..16)
        .map(|i| (f64::from(u8::from(i % 2 == 0)), 0.25 + 0.03125 * f64::from(i)))
        .collect();
    for (x, y) in &shared {
        rows.push(row(*x, None, 1, 1, y + 0.125));
    }
    for (x, y) in &shared {
        rows.push(row(*x, None, 1, 0, *y));
    }
    for (x, y) in &shared {
        rows.push(row(*x, None, 0, 0, *y));
    }
    let ds = AnalysisDataset::new(rows, vec!["x".into()], vec![], OutcomeKind::Continuous).unwrap();
    let specs = RestrictionSpecs {
        trial_outcome: gaussian_spec(&["x"]),
        target_outcome: gaussian_spec(&["x"]),
    };
    let exact = check_restriction(&ds, Restriction::R2, &specs, 50, 0.95, 9, 1).unwrap();
    assert_eq!(exact.statistic, 0.0, "shared-mean-table R2 statistic must be exactly zero");

    // Shifted case: trial control means sit 0.1 above the target means
    // everywhere, so the R2 statistic estimates 0.1.
    let mut scenario = a5_scenario();
    scenario.baseline_trial = vec![0.2, 0.4];
    scenario.outcome_family = OutcomeFamily::Gaussian { sigma: 0.1 };
    let shifted = generate(&scenario, 20_000, 20_000, 909).unwrap();
    let result = check_restriction(&shifted, Restriction::R2, &specs, 100, 0.95, 10, 1).unwrap();
    assert!(
        (result.statistic - 0.1).abs() <= 0.02,
        "R2 statistic {} should estimate the 0.1 shift",
        result.statistic
    );

    // The fitted-model identity behind the exact case, stated directly.
    let mu10 = FittedModel::external(Family::Gaussian, Link::Identity, vec!["x".into()], true, vec![0.375, 0.25])
        .unwrap();
    let g = FittedModel::external(Family::Gaussian, Link::Identity, vec!["x".into()], true, vec![0.25, 0.25])
        .unwrap();
    let stat = restriction_statistic(&ds, &mu10, &g).unwrap();
    assert_eq!(stat, 0.125, "constant injected shift is recovered exactly");

    println!(
        "criterion 9 PASS: R2 = 0 exactly on a shared mean table; R2 = {:.4} under a 0.1 shift",
        result.statistic
    );
}

#[test]
fn criterion_10_glm_engine() {
    let start = Instant::now();

    // Saturated closed-form MLEs on discrete designs, against direct
    // stratum means.
    let strata = [(0.0_f64, 2.0_f64, 4_usize), (1.0, 6.0, 6)];
    let mut poisson_rows = Vec::new();
    for &(x, mean, n) in &strata {
        for i in 0..n {
            // Integer counts whose stratum average equals `mean` exactly.
            let bump = if i % 2 == 0 { 1.0 } else { -1.0 };
            poisson_rows.push((vec![x], mean + bump, 1.0));
        }
    }
    let poisson_fit = fit_glm(&ModelSpec::canonical(Family::Poisson, vec!["x".into()]), &poisson_rows).unwrap();
    for &(x, mean, _) in &strata {
        let fitted = poisson_fit.predict_mean(&[x]).unwrap();
        assert!((fitted - mean).abs() <= 1e-8, "poisson stratum {x}: {fitted} vs {mean}");
    }

    let logit_rows: Vec<(Vec<f64>, f64, f64)> = (0..40)
        .map(|i| {
            let x = f64::from(u8::from(i % 2 == 0));
            let ones = if x == 0.0 { i % 20 < 6 } else { i % 20 < 14 };
            (vec![x], f64::from(u8::from(ones)), 1.0)
        })
        .collect();
    let logit_fit = fit_glm(&ModelSpec::canonical(Family::Bernoulli, vec!["x".into()]), &logit_rows).unwrap();
    for x in [0.0, 1.0] {
        let group: Vec<f64> =
            logit_rows.iter().filter(|(c, _, _)| c[0] == x).map(|(_, y, _)| *y).collect();
        let mean = group.iter().sum::<f64>() / group.len() as f64;
        let fitted = logit_fit.predict_mean(&[x]).unwrap();
        assert!((fitted - mean).abs() <= 1e-8, "logit stratum {x}: {fitted} vs {mean}");
    }

    // Finite-difference score check on 50 randomized small problems.
    let mut max_fd: f64 = 0.0;
    for problem in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(42_000 + problem);
        let n = 30 + (rng.gen::<u64>() % 31) as usize;
        let family = match problem % 3 {
            0 => Family::Gaussian,
            1 => Family::Bernoulli,
            _ => Family::Poisson,
        };
        let spec = ModelSpec::canonical(family, vec!["x".into()]);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.gen();
            let eta = -0.2 + 0.5 * x;
            let y = match family {
                Family::Gaussian => eta + rng.gen::<f64>() - 0.5,
                Family::Bernoulli => {
                    let p = 1.0 / (1.0 + (-eta).exp());
                    f64::from(u8::from(rng.gen::<f64>() < p))
                }
                Family::Poisson => {
                    // Small-mean Poisson draw by inversion.
                    let lambda = eta.exp();
                    let u: f64 = rng.gen();
                    let mut k = 0.0;
                    let mut p = (-lambda).exp();
                    let mut cdf = p;
                    while u > cdf && k < 50.0 {
                        k += 1.0;
                        p *= lambda / k;
                        cdf += p;
                    }
                    k
                }
            };
            rows.push((vec![x], y, 1.0));
        }
        let fit = match fit_glm(&spec, &rows) {
            Ok(fit) => fit,
            Err(e) => panic!("problem {problem} ({family:?}) failed to fit: {e}"),
        };
        let h = 1e-5;
        for j in 0..fit.coefficients.len() {
            let mut up = fit.coefficients.clone();
            let mut down = fit.coefficients.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (log_likelihood(&spec, &rows, &up) - log_likelihood(&spec, &rows, &down)) / (2.0 * h);
            max_fd = max_fd.max(fd.abs());
            assert!(fd.abs() <= 1e-5, "problem {problem} ({family:?}), coefficient {j}: fd {fd}");
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!(
        "criterion 10 PASS: saturated MLEs match stratum means to 1e-8; \
         max |finite-difference score| = {max_fd:.2e} over 50 problems ({elapsed:?})"
    );
}
