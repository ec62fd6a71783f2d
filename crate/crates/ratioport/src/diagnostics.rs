//! Observed-data diagnostics.
//!
//! Assuming transportability of both relative and difference effect measures
//! forces one of two implications: no conditional average treatment effect in
//! either population (I1), or mean exchangeability over populations for both
//! treatments (I2). Combined with the other identifiability conditions those
//! implications restrict the observable data:
//!
//! * R1: E[Y | X, S=1, A=1] = E[Y | X, S=1, A=0] — the trial arms coincide;
//! * R2: E[Y | X, S=1, A=0] = E[Y | X, S=0] — the trial control arm matches
//!   the target outcome regression.
//!
//! `check_restriction` reports a target-standardized mean discrepancy for
//! either restriction with a bootstrap interval; an interval excluding zero
//! is evidence against the restriction (and so against jointly assuming both
//! transportability conditions). `compat_check` evaluates the implication
//! algebra directly on conditional mean tables, and `positivity_report`
//! summarizes the estimated participation and treatment probabilities behind
//! the positivity conditions.

use thiserror::Error;

use crate::datamodel::AnalysisDataset;
use crate::estimators::{bootstrap_draws, quantile, EstimateError, Interval};
use crate::glm::{self, FittedModel, GlmError, ModelSpec};
use crate::nuisance::{self, covariate_values, NuisanceError};

#[derive(Debug, Error)]
pub enum DiagnosticError {
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error("stratum {index}: control mean {which} is zero; the relative effect is undefined")]
    ZeroControlMean { index: usize, which: &'static str },
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Restriction {
    R1,
    R2,
}

impl Restriction {
    pub fn as_str(self) -> &'static str {
        match self {
            Restriction::R1 => "R1",
            Restriction::R2 => "R2",
        }
    }
}

/// Conditional potential-outcome means at one covariate stratum:
/// e11 = E[Y^1 | X=x, S=1], e10 = E[Y^0 | X=x, S=1], and e01/e00 their
/// target-population counterparts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumMeans {
    pub e11: f64,
    pub e10: f64,
    pub e01: f64,
    pub e00: f64,
}

/// Per-stratum verdicts for one mean table.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumCompat {
    /// Relative effect measures transport: e11/e10 = e01/e00.
    pub holds_a4: bool,
    /// Difference effect measures transport: e11 - e10 = e01 - e00.
    pub holds_a4_star: bool,
    /// No conditional average effect in either population.
    pub holds_i1: bool,
    /// Mean exchangeability over populations for both treatments.
    pub holds_i2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatReport {
    pub strata: Vec<StratumCompat>,
    /// Exact-arithmetic implication: every stratum satisfying both
    /// transportability conditions exactly also satisfies I1 or I2 exactly.
    pub theorem_satisfied: bool,
}

/// Evaluate the compatibility algebra on a list of stratum mean tables.
/// The per-stratum flags use the caller's tolerance; `theorem_satisfied` is
/// evaluated at tolerance zero, where the implication is a theorem rather
/// than an empirical finding.
pub fn compat_check(strata: &[StratumMeans], tol: f64) -> Result<CompatReport, DiagnosticError> {
    let mut out = Vec::with_capacity(strata.len());
    let mut theorem = true;
    for (index, s) in strata.iter().enumerate() {
        if s.e10 == 0.0 {
            return Err(DiagnosticError::ZeroControlMean { index, which: "e10" });
        }
        if s.e00 == 0.0 {
            return Err(DiagnosticError::ZeroControlMean { index, which: "e00" });
        }
        let within = |d: f64, t: f64| d.abs() <= t;
        let flags_at = |t: f64| StratumCompat {
            holds_a4: within(s.e11 / s.e10 - s.e01 / s.e00, t),
            holds_a4_star: within((s.e11 - s.e10) - (s.e01 - s.e00), t),
            holds_i1: within(s.e11 - s.e10, t) && within(s.e01 - s.e00, t),
            holds_i2: within(s.e11 - s.e01, t) && within(s.e10 - s.e00, t),
        };
        let exact = flags_at(0.0);
        if exact.holds_a4 && exact.holds_a4_star && !(exact.holds_i1 || exact.holds_i2) {
            theorem = false;
        }
        out.push(flags_at(tol));
    }
    Ok(CompatReport { strata: out, theorem_satisfied: theorem })
}

/// The target-standardized mean discrepancy between two fitted models:
/// the average over target rows of `a(x_i) - b(x_i)`.
pub fn restriction_statistic(
    ds: &AnalysisDataset,
    a: &FittedModel,
    b: &FittedModel,
) -> Result<f64, DiagnosticError> {
    let mut sum = 0.0;
    for row in ds.target_rows() {
        let xa = covariate_values(ds, row, &a.spec.covariate_names)?;
        let xb = covariate_values(ds, row, &b.spec.covariate_names)?;
        sum += a.predict_mean(&xa)? - b.predict_mean(&xb)?;
    }
    Ok(sum / ds.n0() as f64)
}

/// Model specs used when checking a restriction: the trial arm outcome
/// regressions and, for R2, the target outcome regression.
#[derive(Debug, Clone)]
pub struct RestrictionSpecs {
    pub trial_outcome: ModelSpec,
    pub target_outcome: ModelSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticResult {
    pub restriction: Restriction,
    pub statistic: f64,
    pub bootstrap_interval: Interval,
    pub interpretation: String,
}

fn fit_restriction_models(
    ds: &AnalysisDataset,
    which: Restriction,
    specs: &RestrictionSpecs,
) -> Result<(FittedModel, FittedModel), DiagnosticError> {
    let arm = |a: u8| -> Result<FittedModel, DiagnosticError> {
        let rows: Vec<(Vec<f64>, f64, f64)> = ds
            .trial_rows()
            .filter(|r| r.a == a)
            .map(|r| Ok((covariate_values(ds, r, &specs.trial_outcome.covariate_names)?, r.y, 1.0)))
            .collect::<Result<_, NuisanceError>>()?;
        if rows.is_empty() {
            return Err(NuisanceError::EmptyArm {
                arm: a,
                arm_name: if a == 1 { "experimental" } else { "control" },
            }
            .into());
        }
        Ok(glm::fit_glm(&specs.trial_outcome, &rows)?)
    };
    match which {
        Restriction::R1 => Ok((arm(1)?, arm(0)?)),
        Restriction::R2 => {
            let mu10 = arm(0)?;
            let g = nuisance::fit_g(ds, &specs.target_outcome)?;
            Ok((mu10, g))
        }
    }
}

/// Fit the models a restriction compares, compute the discrepancy statistic,
/// and attach a percentile-bootstrap interval (models refit per replicate).
pub fn check_restriction(
    ds: &AnalysisDataset,
    which: Restriction,
    specs: &RestrictionSpecs,
    replicates: usize,
    level: f64,
    seed: u64,
    threads: usize,
) -> Result<DiagnosticResult, DiagnosticError> {
    if replicates == 0 {
        return Err(EstimateError::ZeroReplicates.into());
    }
    if level.is_nan() || level <= 0.0 || level >= 1.0 {
        return Err(EstimateError::BadLevel(level).into());
    }
    let (a, b) = fit_restriction_models(ds, which, specs)?;
    let statistic = restriction_statistic(ds, &a, &b)?;

    let results = bootstrap_draws(ds, replicates, seed, threads, |sample| {
        let (a, b) = fit_restriction_models(sample, which, specs).ok()?;
        restriction_statistic(sample, &a, &b).ok()
    });
    let draws: Vec<f64> = results.iter().flatten().copied().collect();
    let failed = replicates - draws.len();
    if 5 * failed > replicates {
        return Err(EstimateError::TooManyFailures { failed, total: replicates }.into());
    }
    let mut sorted = draws.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let alpha = 1.0 - level;
    let interval = Interval {
        lower: quantile(&sorted, alpha / 2.0),
        upper: quantile(&sorted, 1.0 - alpha / 2.0),
        level,
        replicates,
        failed_replicates: failed,
        method: "percentile bootstrap",
        seed,
        draws: Some(draws),
    };
    let excludes_zero = interval.lower > 0.0 || interval.upper < 0.0;
    let interpretation = format!(
        "{} interval [{}, {}] {} 0: {}",
        which.as_str(),
        interval.lower,
        interval.upper,
        if excludes_zero { "excludes" } else { "covers" },
        if excludes_zero {
            "evidence against the restriction, hence against jointly assuming transportability \
             of relative and difference effect measures"
        } else {
            "no evidence against the restriction at this level"
        }
    );
    Ok(DiagnosticResult { restriction: which, statistic, bootstrap_interval: interval, interpretation })
}

/// Summary of one estimated probability over a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySummary {
    /// Which condition the probability speaks to.
    pub condition: &'static str,
    pub min: f64,
    pub percentile_01: f64,
    pub median: f64,
    /// Dataset row indices with estimated probability below the threshold.
    pub flagged_rows: Vec<usize>,
    /// True when the response was constant and no model could be fit; the
    /// probabilities are then the observed constant.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositivityReport {
    /// Pr[S=1 | X] over target rows (trial participation positivity).
    pub trial_participation: ProbabilitySummary,
    /// Pr[A=1 | X, S=1] over trial rows (trial assignment positivity).
    pub trial_assignment: ProbabilitySummary,
    /// Pr[A=0 | X(, W), S=0] over target rows (control availability).
    pub target_control: ProbabilitySummary,
    pub threshold: f64,
}

fn summarize(
    condition: &'static str,
    indexed: Vec<(usize, f64)>,
    threshold: f64,
    degenerate: bool,
) -> ProbabilitySummary {
    let mut values: Vec<f64> = indexed.iter().map(|(_, p)| *p).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    let flagged = indexed.iter().filter(|(_, p)| *p < threshold).map(|(i, _)| *i).collect();
    ProbabilitySummary {
        condition,
        min: values[0],
        percentile_01: quantile(&values, 0.01),
        median: quantile(&values, 0.5),
        flagged_rows: flagged,
        degenerate,
    }
}

/// Fit logistic models for trial participation, trial treatment assignment,
/// and target control availability, then summarize the estimated
/// probabilities over the rows each condition concerns. A constant response
/// (every target row untreated, say) is reported as a degenerate stratum
/// with probabilities equal to the observed constant instead of an error.
pub fn positivity_report(
    ds: &AnalysisDataset,
    selection_spec: &ModelSpec,
    treatment_spec: &ModelSpec,
    threshold: f64,
) -> Result<PositivityReport, DiagnosticError> {
    if threshold.is_nan() || threshold <= 0.0 || threshold >= 1.0 {
        return Err(DiagnosticError::BadThreshold(threshold));
    }

    // Pr[S=1 | X]: fit on every row, summarize over the target rows.
    let participation = {
        let rows: Vec<(Vec<f64>, f64, f64)> = ds
            .rows()
            .iter()
            .map(|r| Ok((covariate_values(ds, r, &selection_spec.covariate_names)?, f64::from(r.s), 1.0)))
            .collect::<Result<_, NuisanceError>>()?;
        let eval: Vec<usize> =
            ds.rows().iter().enumerate().filter(|(_, r)| r.s == 0).map(|(i, _)| i).collect();
        fit_probabilities(ds, selection_spec, &rows, &eval)?
    };
    let trial_participation = summarize("A6", participation.0, threshold, participation.1);

    // Pr[A=1 | X, S=1]: fit and summarize on trial rows.
    let assignment = {
        let idx: Vec<usize> =
            ds.rows().iter().enumerate().filter(|(_, r)| r.s == 1).map(|(i, _)| i).collect();
        let rows: Vec<(Vec<f64>, f64, f64)> = idx
            .iter()
            .map(|&i| {
                let r = &ds.rows()[i];
                Ok((covariate_values(ds, r, &selection_spec.covariate_names)?, f64::from(r.a), 1.0))
            })
            .collect::<Result<_, NuisanceError>>()?;
        fit_probabilities(ds, selection_spec, &rows, &idx)?
    };
    let trial_assignment = summarize("A3", assignment.0, threshold, assignment.1);

    // Pr[A=0 | X(, W), S=0]: fit and summarize on target rows.
    let control = {
        let idx: Vec<usize> =
            ds.rows().iter().enumerate().filter(|(_, r)| r.s == 0).map(|(i, _)| i).collect();
        let rows: Vec<(Vec<f64>, f64, f64)> = idx
            .iter()
            .map(|&i| {
                let r = &ds.rows()[i];
                Ok((covariate_values(ds, r, &treatment_spec.covariate_names)?, f64::from(1 - r.a), 1.0))
            })
            .collect::<Result<_, NuisanceError>>()?;
        fit_probabilities(ds, treatment_spec, &rows, &idx)?
    };
    let target_control = summarize(
        if ds.w_names().is_empty() { "B2" } else { "C2" },
        control.0,
        threshold,
        control.1,
    );

    Ok(PositivityReport { trial_participation, trial_assignment, target_control, threshold })
}

/// Fit a logistic model on `rows` (responses already 0/1) and evaluate the
/// fitted probability on the dataset rows listed in `eval`. A constant
/// response short-circuits to the constant.
fn fit_probabilities(
    ds: &AnalysisDataset,
    spec: &ModelSpec,
    rows: &[(Vec<f64>, f64, f64)],
    eval: &[usize],
) -> Result<(Vec<(usize, f64)>, bool), DiagnosticError> {
    let first = rows.first().map(|(_, y, _)| *y);
    let constant = first.filter(|f| rows.iter().all(|(_, y, _)| y == f));
    if let Some(c) = constant {
        return Ok((eval.iter().map(|&i| (i, c)).collect(), true));
    }
    let model = glm::fit_glm(spec, rows)?;
    let mut out = Vec::with_capacity(eval.len());
    for &i in eval {
        let r = &ds.rows()[i];
        let x = covariate_values(ds, r, &spec.covariate_names)?;
        out.push((i, model.predict_mean(&x)?));
    }
    Ok((out, false))
}
