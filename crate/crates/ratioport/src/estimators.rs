//! Plug-in estimators of the causal mean ratio and average treatment effect
//! in the target population, with percentile-bootstrap inference.
//!
//! Writing `r(x)` for the trial relative effect estimator and n0 for the
//! target sample size, the three mean-ratio estimators are target-sample
//! standardizations:
//!
//! * phi: `sum r(X_i) g(X_i) / sum Y_i` over target rows — valid when the
//!   control treatment is the only treatment in use in the target;
//! * chi: `sum r(X_i) h(X_i) / sum h(X_i)` — valid under treatment variation
//!   with exchangeability given X;
//! * psi: `sum r(X_i) b(X_i) / sum m(X_i, W_i)` — valid when confounding
//!   control needs the richer covariate set (X, W).
//!
//! The matching average treatment effect estimators (beta, gamma, delta)
//! are the differences of the same per-target-row averaged terms. Bootstrap
//! intervals resample the trial and target strata independently, refit every
//! internally fitted nuisance per replicate, and hold externally supplied
//! models fixed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datamodel::{AnalysisDataset, EstimatorKind, ObservationRow};
use crate::glm::{FittedModel, ModelSpec};
use crate::nuisance::{
    self, covariate_values, NuisanceError, NuisanceSet, RatioMethod, RatioModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimand {
    MeanRatio,
    Ate,
}

impl Estimand {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimand::MeanRatio => "mean_ratio",
            Estimand::Ate => "ate",
        }
    }
}

/// The six estimators: ratio-scale phi/chi/psi and their difference-scale
/// counterparts beta/gamma/delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorId {
    Phi,
    Chi,
    Psi,
    Beta,
    Gamma,
    Delta,
}

impl EstimatorId {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Phi => "phi",
            EstimatorId::Chi => "chi",
            EstimatorId::Psi => "psi",
            EstimatorId::Beta => "beta",
            EstimatorId::Gamma => "gamma",
            EstimatorId::Delta => "delta",
        }
    }

    pub fn estimand(self) -> Estimand {
        match self {
            EstimatorId::Phi | EstimatorId::Chi | EstimatorId::Psi => Estimand::MeanRatio,
            _ => Estimand::Ate,
        }
    }

    /// The structural-validation kind this estimator shares with its
    /// ratio/difference partner.
    pub fn validation_kind(self) -> EstimatorKind {
        match self {
            EstimatorId::Phi | EstimatorId::Beta => EstimatorKind::Phi,
            EstimatorId::Chi | EstimatorId::Gamma => EstimatorKind::Chi,
            EstimatorId::Psi | EstimatorId::Delta => EstimatorKind::Psi,
        }
    }

    /// The ATE estimator paired with a ratio estimator (identity on ATE ids).
    pub fn ate_variant(self) -> EstimatorId {
        match self {
            EstimatorId::Phi | EstimatorId::Beta => EstimatorId::Beta,
            EstimatorId::Chi | EstimatorId::Gamma => EstimatorId::Gamma,
            EstimatorId::Psi | EstimatorId::Delta => EstimatorId::Delta,
        }
    }
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error("zero denominator: the target-sample {0} sum vanishes")]
    ZeroDenominator(&'static str),
    #[error("bootstrap needs B >= 1 replicates")]
    ZeroReplicates,
    #[error("confidence level must lie strictly between 0 and 1, got {0}")]
    BadLevel(f64),
    #[error(
        "{failed} of {total} bootstrap replicates failed (more than 20%); \
         the resampling distribution is unreliable"
    )]
    TooManyFailures { failed: usize, total: usize },
    #[error("estimator {0} cannot be produced by this pipeline: {1}")]
    Unsupported(&'static str, &'static str),
}

/// A point estimate. For ratio estimators `value = numerator / denominator`;
/// for ATE estimators `value = numerator - denominator`. Numerator and
/// denominator are the per-target-row averaged terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub estimand: Estimand,
    pub estimator: EstimatorId,
    pub value: f64,
    pub numerator: f64,
    pub denominator: f64,
    pub n0: usize,
    pub n1: usize,
    pub external_nuisance: bool,
}

/// A percentile-bootstrap confidence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub method: &'static str,
    pub seed: u64,
    pub draws: Option<Vec<f64>>,
}

fn averaged_sums<FNum, FDen>(
    ds: &AnalysisDataset,
    mut num_term: FNum,
    mut den_term: FDen,
) -> Result<(f64, f64), EstimateError>
where
    FNum: FnMut(&ObservationRow) -> Result<f64, EstimateError>,
    FDen: FnMut(&ObservationRow) -> Result<f64, EstimateError>,
{
    let mut num = 0.0;
    let mut den = 0.0;
    for row in ds.target_rows() {
        num += num_term(row)?;
        den += den_term(row)?;
    }
    let n0 = ds.n0() as f64;
    Ok((num / n0, den / n0))
}

fn ratio_times_model(
    ds: &AnalysisDataset,
    ratio: &RatioModel,
    model: &FittedModel,
    row: &ObservationRow,
) -> Result<f64, EstimateError> {
    let x = covariate_values(ds, row, ratio.covariate_names())?;
    let r = ratio.evaluate(&x)?;
    let inputs = covariate_values(ds, row, &model.spec.covariate_names)?;
    let pred = model.predict_mean(&inputs).map_err(NuisanceError::from)?;
    Ok(r * pred)
}

fn model_value(
    ds: &AnalysisDataset,
    model: &FittedModel,
    row: &ObservationRow,
) -> Result<f64, EstimateError> {
    let inputs = covariate_values(ds, row, &model.spec.covariate_names)?;
    Ok(model.predict_mean(&inputs).map_err(NuisanceError::from)?)
}

fn finish(
    estimator: EstimatorId,
    ds: &AnalysisDataset,
    nuisances: &NuisanceSet,
    num: f64,
    den: f64,
    den_name: &'static str,
) -> Result<Estimate, EstimateError> {
    let estimand = estimator.estimand();
    let value = match estimand {
        Estimand::MeanRatio => {
            if den == 0.0 {
                return Err(EstimateError::ZeroDenominator(den_name));
            }
            num / den
        }
        Estimand::Ate => num - den,
    };
    Ok(Estimate {
        estimand,
        estimator,
        value,
        numerator: num,
        denominator: den,
        n0: ds.n0(),
        n1: ds.n1(),
        external_nuisance: nuisances.any_external(),
    })
}

/// phi-type sums: mean of r(X)g(X) over target rows against the mean of the
/// observed outcomes. Shared by phi and beta.
fn phi_sums(ds: &AnalysisDataset, nuisances: &NuisanceSet) -> Result<(f64, f64), EstimateError> {
    let g = nuisances.g.as_ref().ok_or(NuisanceError::MissingNuisance("g"))?;
    averaged_sums(
        ds,
        |row| ratio_times_model(ds, &nuisances.ratio, g, row),
        |row| Ok(row.y),
    )
}

fn chi_sums(ds: &AnalysisDataset, nuisances: &NuisanceSet) -> Result<(f64, f64), EstimateError> {
    let h = nuisances.h.as_ref().ok_or(NuisanceError::MissingNuisance("h"))?;
    averaged_sums(
        ds,
        |row| ratio_times_model(ds, &nuisances.ratio, h, row),
        |row| model_value(ds, h, row),
    )
}

fn psi_sums(ds: &AnalysisDataset, nuisances: &NuisanceSet) -> Result<(f64, f64), EstimateError> {
    let m = nuisances.m.as_ref().ok_or(NuisanceError::MissingNuisance("m"))?;
    let b = nuisances.b.as_ref().ok_or(NuisanceError::MissingNuisance("b"))?;
    averaged_sums(
        ds,
        |row| ratio_times_model(ds, &nuisances.ratio, b, row),
        |row| model_value(ds, m, row),
    )
}

/// The phi estimator of the causal mean ratio (uniform control treatment in
/// the target population). Callers are responsible for checking
/// `validate_dataset(ds, Phi)` first; the computation itself does not refuse
/// treated target rows.
pub fn estimate_phi(ds: &AnalysisDataset, nuisances: &NuisanceSet) -> Result<Estimate, EstimateError> {
    let (num, den) = phi_sums(ds, nuisances)?;
    finish(EstimatorId::Phi, ds, nuisances, num, den, "outcome")
}

/// The chi estimator of the causal mean ratio (treatment variation in the
/// target population, exchangeability given X).
pub fn estimate_chi(ds: &AnalysisDataset, nuisances: &NuisanceSet) -> Result<Estimate, EstimateError> {
    let (num, den) = chi_sums(ds, nuisances)?;
    finish(EstimatorId::Chi, ds, nuisances, num, den, "h-model")
}

/// The psi estimator of the causal mean ratio (confounding control through
/// the richer covariate set (X, W)).
pub fn estimate_psi(ds: &AnalysisDataset, nuisances: &NuisanceSet) -> Result<Estimate, EstimateError> {
    let (num, den) = psi_sums(ds, nuisances)?;
    finish(EstimatorId::Psi, ds, nuisances, num, den, "m-model")
}

/// The average treatment effect estimators: differences of the exact same
/// per-target-row averaged sums as the matching ratio estimator.
pub fn estimate_ate(
    ds: &AnalysisDataset,
    nuisances: &NuisanceSet,
    variant: EstimatorId,
) -> Result<Estimate, EstimateError> {
    let (id, sums) = match variant.ate_variant() {
        EstimatorId::Beta => (EstimatorId::Beta, phi_sums(ds, nuisances)?),
        EstimatorId::Gamma => (EstimatorId::Gamma, chi_sums(ds, nuisances)?),
        EstimatorId::Delta => (EstimatorId::Delta, psi_sums(ds, nuisances)?),
        _ => unreachable!(),
    };
    finish(id, ds, nuisances, sums.0, sums.1, "")
}

/// Where a nuisance model comes from: refit on each dataset handed to the
/// pipeline, or supplied externally and held fixed.
#[derive(Debug, Clone)]
pub enum NuisanceSource {
    Fit(ModelSpec),
    External(FittedModel),
}

impl NuisanceSource {
    fn realize(&self, ds: &AnalysisDataset, fit: impl FnOnce(&AnalysisDataset, &ModelSpec) -> Result<FittedModel, NuisanceError>) -> Result<FittedModel, NuisanceError> {
        match self {
            NuisanceSource::Fit(spec) => fit(ds, spec),
            NuisanceSource::External(model) => Ok(model.clone()),
        }
    }
}

#[derive(Debug, Clone)]
pub enum RatioSource {
    Fit { spec: ModelSpec, method: RatioMethod },
    External(RatioModel),
}

/// A full re-estimation recipe: which estimator to compute and how to build
/// every nuisance it needs. Applying the pipeline to a dataset refits all
/// internal nuisances from scratch, which is exactly what each bootstrap
/// replicate does.
#[derive(Debug, Clone)]
pub struct EstimationPipeline {
    pub estimator: EstimatorId,
    pub ratio: RatioSource,
    pub g: Option<NuisanceSource>,
    pub h: Option<NuisanceSource>,
    pub m: Option<NuisanceSource>,
    /// Ordinary-least-squares spec for the iterated b regression (psi/delta).
    pub step3: Option<ModelSpec>,
}

impl EstimationPipeline {
    pub fn fit_nuisances(&self, ds: &AnalysisDataset) -> Result<NuisanceSet, EstimateError> {
        let ratio = match &self.ratio {
            RatioSource::Fit { spec, method } => nuisance::fit_ratio(ds, spec, *method)?,
            RatioSource::External(model) => model.clone(),
        };
        let mut set = NuisanceSet::new(ratio);
        let kind = self.estimator.validation_kind();
        match kind {
            EstimatorKind::Phi => {
                let g = self
                    .g
                    .as_ref()
                    .ok_or(NuisanceError::MissingNuisance("g"))?
                    .realize(ds, nuisance::fit_g)?;
                set.g = Some(g);
            }
            EstimatorKind::Chi => {
                let h = self
                    .h
                    .as_ref()
                    .ok_or(NuisanceError::MissingNuisance("h"))?
                    .realize(ds, nuisance::fit_h)?;
                set.h = Some(h);
            }
            EstimatorKind::Psi => {
                let m = self
                    .m
                    .as_ref()
                    .ok_or(NuisanceError::MissingNuisance("m"))?
                    .realize(ds, nuisance::fit_m)?;
                let step3 = self.step3.as_ref().ok_or(NuisanceError::MissingNuisance("b (step-3 spec)"))?;
                let b = nuisance::fit_iterated(ds, &m, step3)?;
                set.m = Some(m);
                set.b = Some(b);
            }
        }
        Ok(set)
    }

    /// Fit nuisances on the dataset and compute the configured estimator.
    pub fn run(&self, ds: &AnalysisDataset) -> Result<Estimate, EstimateError> {
        let nuisances = self.fit_nuisances(ds)?;
        match self.estimator {
            EstimatorId::Phi => estimate_phi(ds, &nuisances),
            EstimatorId::Chi => estimate_chi(ds, &nuisances),
            EstimatorId::Psi => estimate_psi(ds, &nuisances),
            v => estimate_ate(ds, &nuisances, v),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
    pub threads: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig { replicates: 500, level: 0.95, seed: 0, threads: 1 }
    }
}

/// RNG for one replicate, derived from (seed, replicate index) only, so a
/// replicate's resample does not depend on execution order or thread count.
fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(replicate as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Resample within stratum: n1 trial rows and n0 target rows, each with
/// replacement, trial block first.
fn resample(ds: &AnalysisDataset, rng: &mut ChaCha8Rng) -> AnalysisDataset {
    let trial: Vec<&ObservationRow> = ds.trial_rows().collect();
    let target: Vec<&ObservationRow> = ds.target_rows().collect();
    let mut rows = Vec::with_capacity(ds.n());
    for _ in 0..trial.len() {
        rows.push(trial[rng.gen_range(0..trial.len())].clone());
    }
    for _ in 0..target.len() {
        rows.push(target[rng.gen_range(0..target.len())].clone());
    }
    AnalysisDataset::from_rows_unchecked(rows, ds)
}

/// Empirical quantile with linear interpolation between order statistics.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Run `statistic` on `replicates` within-stratum resamples of the dataset.
/// Returns per-replicate results in replicate order; failed replicates are
/// `None`. Deterministic for a given seed regardless of `threads`.
pub fn bootstrap_draws<F>(
    ds: &AnalysisDataset,
    replicates: usize,
    seed: u64,
    threads: usize,
    statistic: F,
) -> Vec<Option<f64>>
where
    F: Fn(&AnalysisDataset) -> Option<f64> + Sync,
{
    let run_one = |r: usize| -> Option<f64> {
        let mut rng = replicate_rng(seed, r);
        let sample = resample(ds, &mut rng);
        statistic(&sample)
    };
    if threads <= 1 {
        return (0..replicates).map(run_one).collect();
    }
    let mut out = vec![None; replicates];
    let chunk = replicates.div_ceil(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (start, slice) in (0..).step_by(chunk.max(1)).zip(out.chunks_mut(chunk.max(1))) {
            let run_one = &run_one;
            handles.push(scope.spawn(move || {
                for (offset, slot) in slice.iter_mut().enumerate() {
                    *slot = run_one(start + offset);
                }
            }));
        }
        for h in handles {
            h.join().expect("bootstrap worker panicked");
        }
    });
    out
}

/// Point estimate on the original data plus a percentile interval over
/// within-stratum resamples. Internal nuisances are refit per replicate;
/// external models ride along unchanged. Replicates that fail to fit are
/// dropped and counted, and more than 20% failures is an error.
pub fn bootstrap_ci(
    ds: &AnalysisDataset,
    pipeline: &EstimationPipeline,
    config: &BootstrapConfig,
) -> Result<(Estimate, Interval), EstimateError> {
    if config.replicates == 0 {
        return Err(EstimateError::ZeroReplicates);
    }
    if config.level.is_nan() || config.level <= 0.0 || config.level >= 1.0 {
        return Err(EstimateError::BadLevel(config.level));
    }
    let point = pipeline.run(ds)?;
    let results = bootstrap_draws(ds, config.replicates, config.seed, config.threads, |sample| {
        pipeline.run(sample).ok().map(|e| e.value)
    });
    let draws: Vec<f64> = results.iter().flatten().copied().collect();
    let failed = config.replicates - draws.len();
    if 5 * failed > config.replicates {
        return Err(EstimateError::TooManyFailures { failed, total: config.replicates });
    }
    let mut sorted = draws.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - config.level;
    let interval = Interval {
        lower: quantile(&sorted, alpha / 2.0),
        upper: quantile(&sorted, 1.0 - alpha / 2.0),
        level: config.level,
        replicates: config.replicates,
        failed_replicates: failed,
        method: "percentile bootstrap",
        seed: config.seed,
        draws: Some(draws),
    };
    Ok((point, interval))
}
