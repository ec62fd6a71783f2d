//! Synthetic trial + target data with known causal truth.
//!
//! A scenario fixes a finite covariate grid for each population, baseline
//! control means, a shared conditional effect (multiplicative, or additive
//! for the deliberately incompatible variant), the target-population
//! treatment process, and the outcome family. The generative structure bakes
//! the identification conditions in: the ratio of arm mean functions is the
//! same in both populations, control potential-outcome means never depend on
//! the treatment actually received, every target grid point has trial mass,
//! and trial assignment probability sits strictly inside (0,1).
//!
//! `true_estimands` returns the oracle values of E[Y^1 | S=0], E[Y^0 | S=0],
//! their ratio, and the average treatment effect, either in closed form over
//! the grid or by Monte Carlo with a reported standard error.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::datamodel::{AnalysisDataset, DataError, ObservationRow, OutcomeKind};
use crate::kv::Document;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario invariant: {0}")]
    Invalid(String),
    #[error("scenario document: {0}")]
    BadDocument(String),
    #[error("monte carlo oracle needs at least 1000 draws, got {0}")]
    TooFewDraws(u64),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutcomeFamily {
    Bernoulli,
    Poisson,
    Gaussian { sigma: f64 },
}

impl OutcomeFamily {
    pub fn outcome_kind(self) -> OutcomeKind {
        match self {
            OutcomeFamily::Bernoulli => OutcomeKind::Binary,
            OutcomeFamily::Poisson => OutcomeKind::Count,
            OutcomeFamily::Gaussian { .. } => OutcomeKind::Continuous,
        }
    }
}

/// The shared conditional effect. The multiplicative form is the scenario
/// family of interest (relative effect measures transport by construction);
/// the additive form exists to produce mean tables where they provably do
/// not, for the compatibility diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum EffectSpec {
    MeanRatio(Vec<f64>),
    MeanDifference(Vec<f64>),
}

impl EffectSpec {
    fn apply(&self, x_index: usize, baseline: f64) -> f64 {
        match self {
            EffectSpec::MeanRatio(rho) => rho[x_index] * baseline,
            EffectSpec::MeanDifference(tau) => baseline + tau[x_index],
        }
    }

    fn len(&self) -> usize {
        match self {
            EffectSpec::MeanRatio(v) | EffectSpec::MeanDifference(v) => v.len(),
        }
    }
}

/// How treatment is assigned in the target population.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetTreatment {
    /// Everyone receives the control treatment.
    AllControl,
    /// Pr[A=1 | X] = logistic(intercept + x_coefs . x).
    LogisticInX { intercept: f64, x_coefs: Vec<f64> },
    /// Pr[A=1 | X, W] = logistic(intercept + x_coefs . x + w_coefs . w).
    LogisticInXW { intercept: f64, x_coefs: Vec<f64>, w_coefs: Vec<f64> },
}

/// Conditional distribution of W given X on the target grid, with an
/// optional refinement of the baseline mean to (x, w) cells.
#[derive(Debug, Clone, PartialEq)]
pub struct WDist {
    pub names: Vec<String>,
    pub points: Vec<Vec<f64>>,
    /// probs[x_index][w_index]
    pub probs_given_x: Vec<Vec<f64>>,
    /// baseline_xw[x_index][w_index]; when absent the X-level baseline is
    /// used for every w.
    pub baseline_xw: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub x_names: Vec<String>,
    pub x_points: Vec<Vec<f64>>,
    pub trial_probs: Vec<f64>,
    pub target_probs: Vec<f64>,
    /// e0(x, s=1): control mean in the trial population.
    pub baseline_trial: Vec<f64>,
    /// e0(x, s=0): control mean in the target population.
    pub baseline_target: Vec<f64>,
    pub effect: EffectSpec,
    pub w_dist: Option<WDist>,
    pub target_treatment: TargetTreatment,
    pub trial_assignment_prob: f64,
    pub outcome_family: OutcomeFamily,
}

fn probs_ok(probs: &[f64], what: &str) -> Result<(), ScenarioError> {
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(ScenarioError::Invalid(format!("{what} has a negative or non-finite probability")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(ScenarioError::Invalid(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl ScenarioSpec {
    /// Check every construction invariant. Called by `generate` and
    /// `true_estimands`; call it directly after hand-building a scenario.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let k = self.x_points.len();
        if k == 0 {
            return Err(ScenarioError::Invalid("empty covariate grid".into()));
        }
        for (name, len) in [
            ("trial_probs", self.trial_probs.len()),
            ("target_probs", self.target_probs.len()),
            ("baseline_trial", self.baseline_trial.len()),
            ("baseline_target", self.baseline_target.len()),
            ("effect", self.effect.len()),
        ] {
            if len != k {
                return Err(ScenarioError::Invalid(format!(
                    "{name} has {len} entries for {k} grid points"
                )));
            }
        }
        let dim = self.x_names.len();
        if self.x_points.iter().any(|p| p.len() != dim) {
            return Err(ScenarioError::Invalid("grid point dimension does not match x names".into()));
        }
        probs_ok(&self.trial_probs, "trial x distribution")?;
        probs_ok(&self.target_probs, "target x distribution")?;

        let assign = self.trial_assignment_prob;
        if assign.is_nan() || assign <= 0.0 || assign >= 1.0 {
            return Err(ScenarioError::Invalid(format!(
                "trial assignment probability {} must lie strictly inside (0,1)",
                self.trial_assignment_prob
            )));
        }
        // Trial participation positivity: target mass needs trial mass.
        for i in 0..k {
            if self.target_probs[i] > 0.0 && self.trial_probs[i] == 0.0 {
                return Err(ScenarioError::Invalid(format!(
                    "grid point {i} has target mass but no trial mass (participation positivity fails)"
                )));
            }
        }
        if let OutcomeFamily::Gaussian { sigma } = self.outcome_family {
            if sigma.is_nan() || sigma <= 0.0 {
                return Err(ScenarioError::Invalid("gaussian sigma must be positive".into()));
            }
        }
        if let Some(w) = &self.w_dist {
            if w.names.is_empty() || w.points.is_empty() {
                return Err(ScenarioError::Invalid("w distribution must have names and points".into()));
            }
            if w.points.iter().any(|p| p.len() != w.names.len()) {
                return Err(ScenarioError::Invalid("w point dimension does not match w names".into()));
            }
            if w.probs_given_x.len() != k {
                return Err(ScenarioError::Invalid("w probabilities must cover every x grid point".into()));
            }
            for (i, probs) in w.probs_given_x.iter().enumerate() {
                if probs.len() != w.points.len() {
                    return Err(ScenarioError::Invalid(format!(
                        "w probabilities at grid point {i} do not cover every w point"
                    )));
                }
                probs_ok(probs, &format!("w distribution at grid point {i}"))?;
            }
            if let Some(table) = &w.baseline_xw {
                if table.len() != k || table.iter().any(|r| r.len() != w.points.len()) {
                    return Err(ScenarioError::Invalid("baseline refinement must cover every (x, w) cell".into()));
                }
            }
            if matches!(self.target_treatment, TargetTreatment::LogisticInXW { .. }) && w.points.is_empty() {
                return Err(ScenarioError::Invalid("logistic_xw treatment needs w points".into()));
            }
        } else if matches!(self.target_treatment, TargetTreatment::LogisticInXW { .. }) {
            return Err(ScenarioError::Invalid("logistic_xw treatment needs a [w] section".into()));
        }

        // Mean validity under both arms, at every cell the generator can hit.
        let check_mean = |mean: f64, what: &str| -> Result<(), ScenarioError> {
            if mean.is_nan() || mean <= 0.0 {
                return Err(ScenarioError::Invalid(format!("{what} = {mean} must be positive")));
            }
            match self.outcome_family {
                OutcomeFamily::Bernoulli if mean >= 1.0 => {
                    Err(ScenarioError::Invalid(format!("{what} = {mean} must lie inside (0,1) for bernoulli outcomes")))
                }
                _ => Ok(()),
            }
        };
        for i in 0..k {
            check_mean(self.baseline_trial[i], &format!("trial control mean at grid point {i}"))?;
            check_mean(self.effect.apply(i, self.baseline_trial[i]), &format!("trial treated mean at grid point {i}"))?;
            for (mean, what) in self.target_baseline_cells(i) {
                check_mean(mean, &format!("target control mean at {what}"))?;
                check_mean(self.effect.apply(i, mean), &format!("target treated mean at {what}"))?;
            }
        }
        Ok(())
    }

    /// The target-population baseline means reachable at grid point `i`,
    /// one per w cell (or a single X-level entry without W).
    fn target_baseline_cells(&self, i: usize) -> Vec<(f64, String)> {
        match &self.w_dist {
            Some(w) => match &w.baseline_xw {
                Some(table) => table[i]
                    .iter()
                    .enumerate()
                    .map(|(j, m)| (*m, format!("grid point {i}, w cell {j}")))
                    .collect(),
                None => vec![(self.baseline_target[i], format!("grid point {i}"))],
            },
            None => vec![(self.baseline_target[i], format!("grid point {i}"))],
        }
    }

    /// Marginal target control mean at grid point `i` (W integrated out).
    fn marginal_baseline_target(&self, i: usize) -> f64 {
        match &self.w_dist {
            Some(w) => match &w.baseline_xw {
                Some(table) => table[i]
                    .iter()
                    .zip(&w.probs_given_x[i])
                    .map(|(m, p)| m * p)
                    .sum(),
                None => self.baseline_target[i],
            },
            None => self.baseline_target[i],
        }
    }

    /// Conditional mean tables per grid point, for the compatibility
    /// diagnostics: the arm means implied in each population.
    pub fn stratum_means(&self) -> Vec<crate::diagnostics::StratumMeans> {
        (0..self.x_points.len())
            .map(|i| {
                let e10 = self.baseline_trial[i];
                let e00 = self.marginal_baseline_target(i);
                crate::diagnostics::StratumMeans {
                    e11: self.effect.apply(i, e10),
                    e10,
                    e01: self.effect.apply(i, e00),
                    e00,
                }
            })
            .collect()
    }
}

fn draw_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_outcome(family: OutcomeFamily, mean: f64, rng: &mut ChaCha8Rng) -> f64 {
    match family {
        OutcomeFamily::Bernoulli => f64::from(u8::from(rng.gen::<f64>() < mean)),
        OutcomeFamily::Poisson => Poisson::new(mean).expect("validated mean").sample(rng),
        OutcomeFamily::Gaussian { sigma } => Normal::new(mean, sigma).expect("validated sigma").sample(rng),
    }
}

fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Draw a composite dataset: n1 trial rows then n0 target rows, fully
/// determined by the seed.
pub fn generate(
    scenario: &ScenarioSpec,
    n1: usize,
    n0: usize,
    seed: u64,
) -> Result<AnalysisDataset, ScenarioError> {
    scenario.validate()?;
    if n1 == 0 || n0 == 0 {
        return Err(ScenarioError::Invalid("n1 and n0 must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n1 + n0);

    for _ in 0..n1 {
        let i = draw_index(&scenario.trial_probs, &mut rng);
        let a = u8::from(rng.gen::<f64>() < scenario.trial_assignment_prob);
        let base = scenario.baseline_trial[i];
        let mean = if a == 1 { scenario.effect.apply(i, base) } else { base };
        let y = draw_outcome(scenario.outcome_family, mean, &mut rng);
        rows.push(ObservationRow { x: scenario.x_points[i].clone(), w: None, s: 1, a, y });
    }

    for _ in 0..n0 {
        let i = draw_index(&scenario.target_probs, &mut rng);
        let (w, base) = match &scenario.w_dist {
            Some(wd) => {
                let j = draw_index(&wd.probs_given_x[i], &mut rng);
                let base = match &wd.baseline_xw {
                    Some(table) => table[i][j],
                    None => scenario.baseline_target[i],
                };
                (Some(wd.points[j].clone()), base)
            }
            None => (None, scenario.baseline_target[i]),
        };
        let a = match &scenario.target_treatment {
            TargetTreatment::AllControl => 0,
            TargetTreatment::LogisticInX { intercept, x_coefs } => {
                let eta: f64 = intercept
                    + x_coefs.iter().zip(&scenario.x_points[i]).map(|(c, v)| c * v).sum::<f64>();
                u8::from(rng.gen::<f64>() < logistic(eta))
            }
            TargetTreatment::LogisticInXW { intercept, x_coefs, w_coefs } => {
                let wv = w.as_ref().expect("validated: logistic_xw has w");
                let eta: f64 = intercept
                    + x_coefs.iter().zip(&scenario.x_points[i]).map(|(c, v)| c * v).sum::<f64>()
                    + w_coefs.iter().zip(wv).map(|(c, v)| c * v).sum::<f64>();
                u8::from(rng.gen::<f64>() < logistic(eta))
            }
        };
        let mean = if a == 1 { scenario.effect.apply(i, base) } else { base };
        let y = draw_outcome(scenario.outcome_family, mean, &mut rng);
        rows.push(ObservationRow { x: scenario.x_points[i].clone(), w, s: 0, a, y });
    }

    let w_names = scenario.w_dist.as_ref().map(|w| w.names.clone()).unwrap_or_default();
    Ok(AnalysisDataset::new(
        rows,
        scenario.x_names.clone(),
        w_names,
        scenario.outcome_family.outcome_kind(),
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OraclePrecision {
    ClosedForm,
    MonteCarlo { draws: u64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleMethod {
    ClosedForm,
    /// `standard_error` is the delta-method standard error of the mean
    /// ratio over the covariate draws.
    MonteCarlo { draws: u64, seed: u64, standard_error: f64 },
}

/// Oracle values of the target-population estimands.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueValues {
    pub mean_y1_s0: f64,
    pub mean_y0_s0: f64,
    pub mean_ratio: f64,
    pub ate: f64,
    pub method: OracleMethod,
}

/// Compute E[Y^1 | S=0], E[Y^0 | S=0], their ratio, and the ATE, either by
/// summing over the finite grid or by Monte Carlo over covariate draws
/// (averaging conditional means, so the only noise is in the covariates).
pub fn true_estimands(
    scenario: &ScenarioSpec,
    precision: OraclePrecision,
) -> Result<TrueValues, ScenarioError> {
    scenario.validate()?;
    match precision {
        OraclePrecision::ClosedForm => {
            let mut m1 = 0.0;
            let mut m0 = 0.0;
            for i in 0..scenario.x_points.len() {
                let p = scenario.target_probs[i];
                if p == 0.0 {
                    continue;
                }
                match &scenario.w_dist {
                    Some(w) if w.baseline_xw.is_some() => {
                        let table = w.baseline_xw.as_ref().unwrap();
                        for (j, pw) in w.probs_given_x[i].iter().enumerate() {
                            let base = table[i][j];
                            m0 += p * pw * base;
                            m1 += p * pw * scenario.effect.apply(i, base);
                        }
                    }
                    _ => {
                        let base = scenario.baseline_target[i];
                        m0 += p * base;
                        m1 += p * scenario.effect.apply(i, base);
                    }
                }
            }
            Ok(TrueValues {
                mean_y1_s0: m1,
                mean_y0_s0: m0,
                mean_ratio: m1 / m0,
                ate: m1 - m0,
                method: OracleMethod::ClosedForm,
            })
        }
        OraclePrecision::MonteCarlo { draws, seed } => {
            if draws < 1000 {
                return Err(ScenarioError::TooFewDraws(draws));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = draws as f64;
            let (mut s1, mut s0, mut s11, mut s00, mut s10) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for _ in 0..draws {
                let i = draw_index(&scenario.target_probs, &mut rng);
                let base = match &scenario.w_dist {
                    Some(w) if w.baseline_xw.is_some() => {
                        let j = draw_index(&w.probs_given_x[i], &mut rng);
                        w.baseline_xw.as_ref().unwrap()[i][j]
                    }
                    _ => scenario.baseline_target[i],
                };
                let y1 = scenario.effect.apply(i, base);
                s1 += y1;
                s0 += base;
                s11 += y1 * y1;
                s00 += base * base;
                s10 += y1 * base;
            }
            let m1 = s1 / n;
            let m0 = s0 / n;
            let var1 = (s11 / n - m1 * m1).max(0.0);
            let var0 = (s00 / n - m0 * m0).max(0.0);
            let cov = s10 / n - m1 * m0;
            // Delta method for the ratio of means.
            let ratio_var =
                (var1 / (m0 * m0) - 2.0 * m1 * cov / (m0 * m0 * m0) + m1 * m1 * var0 / (m0 * m0 * m0 * m0))
                    .max(0.0);
            Ok(TrueValues {
                mean_y1_s0: m1,
                mean_y0_s0: m0,
                mean_ratio: m1 / m0,
                ate: m1 - m0,
                method: OracleMethod::MonteCarlo { draws, seed, standard_error: (ratio_var / n).sqrt() },
            })
        }
    }
}

/// Render a TrueValues document.
pub fn true_values_document(values: &TrueValues) -> String {
    let mut doc = Document::new();
    let mut s = crate::kv::Section::new("true_values");
    s.push_pair("mean_y1_s0", values.mean_y1_s0);
    s.push_pair("mean_y0_s0", values.mean_y0_s0);
    s.push_pair("mean_ratio", values.mean_ratio);
    s.push_pair("ate", values.ate);
    match &values.method {
        OracleMethod::ClosedForm => s.push_pair("method", "closed_form"),
        OracleMethod::MonteCarlo { draws, seed, standard_error } => {
            s.push_pair("method", "monte_carlo");
            s.push_pair("draws", draws);
            s.push_pair("seed", seed);
            s.push_pair("standard_error", standard_error);
        }
    }
    doc.push(s);
    doc.render()
}

fn parse_f64(tok: &str, what: &str) -> Result<f64, ScenarioError> {
    tok.parse().map_err(|_| ScenarioError::BadDocument(format!("{what}: '{tok}' is not a number")))
}

/// Parse a scenario document. Sections: `[scenario]` (outcome, sigma,
/// trial_assignment_prob, effect), `[x]` (names plus one grid row per point:
/// x values, trial prob, target prob, trial baseline, target baseline,
/// effect value), `[treatment]`, and optionally `[w]` (names plus rows:
/// x index, w values, prob, optional baseline refinement).
pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let doc = Document::parse(text).map_err(|e| ScenarioError::BadDocument(e.to_string()))?;
    let scen = doc
        .section("scenario")
        .ok_or_else(|| ScenarioError::BadDocument("missing [scenario] section".into()))?;
    let outcome_family = match scen
        .get("outcome")
        .ok_or_else(|| ScenarioError::BadDocument("missing outcome".into()))?
    {
        "bernoulli" => OutcomeFamily::Bernoulli,
        "poisson" => OutcomeFamily::Poisson,
        "gaussian" => {
            let sigma = parse_f64(scen.get("sigma").unwrap_or("1"), "sigma")?;
            OutcomeFamily::Gaussian { sigma }
        }
        other => return Err(ScenarioError::BadDocument(format!("unknown outcome '{other}'"))),
    };
    let trial_assignment_prob = parse_f64(
        scen.get("trial_assignment_prob")
            .ok_or_else(|| ScenarioError::BadDocument("missing trial_assignment_prob".into()))?,
        "trial_assignment_prob",
    )?;
    let effect_kind = scen.get("effect").unwrap_or("ratio");

    let x = doc.section("x").ok_or_else(|| ScenarioError::BadDocument("missing [x] section".into()))?;
    let x_names: Vec<String> = x
        .get("names")
        .ok_or_else(|| ScenarioError::BadDocument("missing x names".into()))?
        .split(',')
        .map(|n| n.trim().to_string())
        .collect();
    let dim = x_names.len();
    let mut x_points = Vec::new();
    let mut trial_probs = Vec::new();
    let mut target_probs = Vec::new();
    let mut baseline_trial = Vec::new();
    let mut baseline_target = Vec::new();
    let mut effect_values = Vec::new();
    for row in x.rows() {
        if row.len() != dim + 5 {
            return Err(ScenarioError::BadDocument(format!(
                "[x] rows need {} cells (x values, trial prob, target prob, trial baseline, \
                 target baseline, effect), found {}",
                dim + 5,
                row.len()
            )));
        }
        let values: Vec<f64> = row
            .iter()
            .map(|c| parse_f64(c, "[x] row"))
            .collect::<Result<_, _>>()?;
        x_points.push(values[..dim].to_vec());
        trial_probs.push(values[dim]);
        target_probs.push(values[dim + 1]);
        baseline_trial.push(values[dim + 2]);
        baseline_target.push(values[dim + 3]);
        effect_values.push(values[dim + 4]);
    }
    let effect = match effect_kind {
        "ratio" => EffectSpec::MeanRatio(effect_values),
        "difference" => EffectSpec::MeanDifference(effect_values),
        other => return Err(ScenarioError::BadDocument(format!("unknown effect kind '{other}'"))),
    };

    let treatment = doc
        .section("treatment")
        .ok_or_else(|| ScenarioError::BadDocument("missing [treatment] section".into()))?;
    let parse_coefs = |key: &str| -> Result<Vec<f64>, ScenarioError> {
        treatment
            .get(key)
            .map(|v| v.split(',').map(|c| parse_f64(c.trim(), key)).collect())
            .unwrap_or_else(|| Ok(Vec::new()))
    };
    let target_treatment = match treatment
        .get("kind")
        .ok_or_else(|| ScenarioError::BadDocument("missing treatment kind".into()))?
    {
        "all_control" => TargetTreatment::AllControl,
        "logistic_x" => TargetTreatment::LogisticInX {
            intercept: parse_f64(treatment.get("intercept").unwrap_or("0"), "intercept")?,
            x_coefs: parse_coefs("x_coefs")?,
        },
        "logistic_xw" => TargetTreatment::LogisticInXW {
            intercept: parse_f64(treatment.get("intercept").unwrap_or("0"), "intercept")?,
            x_coefs: parse_coefs("x_coefs")?,
            w_coefs: parse_coefs("w_coefs")?,
        },
        other => return Err(ScenarioError::BadDocument(format!("unknown treatment kind '{other}'"))),
    };

    let w_dist = match doc.section("w") {
        None => None,
        Some(w) => {
            let names: Vec<String> = w
                .get("names")
                .ok_or_else(|| ScenarioError::BadDocument("missing w names".into()))?
                .split(',')
                .map(|n| n.trim().to_string())
                .collect();
            let wdim = names.len();
            // Rows: x index, w values, prob [, baseline refinement].
            let mut points: Vec<Vec<f64>> = Vec::new();
            let mut probs: Vec<Vec<f64>> = vec![Vec::new(); x_points.len()];
            let mut baselines: Vec<Vec<f64>> = vec![Vec::new(); x_points.len()];
            let mut any_baseline = false;
            let mut no_baseline = false;
            for row in w.rows() {
                if row.len() != wdim + 2 && row.len() != wdim + 3 {
                    return Err(ScenarioError::BadDocument(format!(
                        "[w] rows need x index, {} w values, prob, optional baseline; found {} cells",
                        wdim,
                        row.len()
                    )));
                }
                let xi = parse_f64(&row[0], "[w] x index")? as usize;
                if xi >= x_points.len() {
                    return Err(ScenarioError::BadDocument(format!("[w] x index {xi} out of range")));
                }
                let point: Vec<f64> = row[1..=wdim]
                    .iter()
                    .map(|c| parse_f64(c, "[w] point"))
                    .collect::<Result<_, _>>()?;
                let w_index = match points.iter().position(|p| *p == point) {
                    Some(j) => j,
                    None => {
                        points.push(point);
                        for cell in probs.iter_mut().chain(baselines.iter_mut()) {
                            cell.resize(points.len(), 0.0);
                        }
                        points.len() - 1
                    }
                };
                for cell in probs.iter_mut().chain(baselines.iter_mut()) {
                    cell.resize(points.len().max(cell.len()), 0.0);
                }
                probs[xi][w_index] = parse_f64(&row[wdim + 1], "[w] prob")?;
                if row.len() == wdim + 3 {
                    baselines[xi][w_index] = parse_f64(&row[wdim + 2], "[w] baseline")?;
                    any_baseline = true;
                } else {
                    no_baseline = true;
                }
            }
            if any_baseline && no_baseline {
                return Err(ScenarioError::BadDocument(
                    "either every [w] row carries a baseline refinement or none does".into(),
                ));
            }
            Some(WDist {
                names,
                points,
                probs_given_x: probs,
                baseline_xw: if any_baseline { Some(baselines) } else { None },
            })
        }
    };

    let spec = ScenarioSpec {
        x_names,
        x_points,
        trial_probs,
        target_probs,
        baseline_trial,
        baseline_target,
        effect,
        w_dist,
        target_treatment,
        trial_assignment_prob,
        outcome_family,
    };
    spec.validate()?;
    Ok(spec)
}
