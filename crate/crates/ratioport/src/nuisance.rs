//! Conditional-expectation estimators consumed by the plug-in estimators.
//!
//! * `fit_ratio` — the conditional relative effect estimator r(x), either a
//!   pair of arm-specific trial outcome models or a single log-link model
//!   with treatment interactions;
//! * `fit_g` — E[Y | X, S=0], the target outcome regression;
//! * `fit_h` — E[Y | X, S=0, A=0], the target control outcome regression;
//! * `fit_m` — E[Y | X, W, S=0, A=0], its refinement on (X, W);
//! * `fit_iterated` — b(x), the regression of m-model predictions over the
//!   whole target sample back onto X (the iterated-expectation step);
//! * `import_external_model` / export — models developed elsewhere, usable
//!   wherever the internally fitted ones are.

use thiserror::Error;

use crate::datamodel::{AnalysisDataset, ColumnRef, ObservationRow};
use crate::glm::{self, Family, FittedModel, GlmError, Link, ModelSpec};
use crate::kv::Document;

/// Guard for the ratio denominator. Evaluation below this is an error, not a
/// clamp: a vanishing control mean violates the nonzero-mean requirement.
pub const RATIO_FLOOR: f64 = 1e-12;

/// Reserved column names for the treatment main effect and interactions in
/// the log-link interaction parameterization.
const TREAT_NAME: &str = ".a";

#[derive(Debug, Error)]
pub enum NuisanceError {
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error("empty trial arm (s=1, a={arm}): cannot fit the {arm_name} outcome model")]
    EmptyArm { arm: u8, arm_name: &'static str },
    #[error("no rows in the fitting stratum: {0}")]
    EmptyStratum(&'static str),
    #[error("ratio denominator mean {value:.3e} below floor {floor:.1e} at x = {x:?}")]
    DenominatorFloor { value: f64, floor: f64, x: Vec<f64> },
    #[error("covariate '{0}' is not an X or W column of this dataset")]
    UnknownColumn(String),
    #[error("covariate '{0}' must be an X column for this fit")]
    NotAnXColumn(String),
    #[error("model document: {0}")]
    BadDocument(String),
    #[error("estimator requires nuisance '{0}' which is not present")]
    MissingNuisance(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMethod {
    ArmSpecific,
    LogLinkInteraction,
}

impl RatioMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RatioMethod::ArmSpecific => "arm-specific",
            RatioMethod::LogLinkInteraction => "log-link",
        }
    }
}

/// The conditional relative effect estimator r(x).
#[derive(Debug, Clone)]
pub enum RatioComponents {
    /// Separate outcome models for the experimental and control trial arms;
    /// r(x) is the ratio of their predicted means.
    ArmSpecific { treated: FittedModel, control: FittedModel },
    /// One log-link model on (X, A, A*X); r(x) exponentiates the treatment
    /// coefficient block.
    LogLinkInteraction { model: FittedModel, n_x: usize },
}

#[derive(Debug, Clone)]
pub struct RatioModel {
    pub components: RatioComponents,
    pub floor: f64,
}

impl RatioModel {
    pub fn method(&self) -> RatioMethod {
        match self.components {
            RatioComponents::ArmSpecific { .. } => RatioMethod::ArmSpecific,
            RatioComponents::LogLinkInteraction { .. } => RatioMethod::LogLinkInteraction,
        }
    }

    pub fn is_external(&self) -> bool {
        match &self.components {
            RatioComponents::ArmSpecific { treated, control } => {
                treated.is_external() || control.is_external()
            }
            RatioComponents::LogLinkInteraction { model, .. } => model.is_external(),
        }
    }

    /// Build an arm-specific ratio from two already-available models
    /// (typically imported external ones). Both arms must be parameterized
    /// over the same covariates.
    pub fn from_arm_models(treated: FittedModel, control: FittedModel) -> Result<Self, NuisanceError> {
        if treated.spec.covariate_names != control.spec.covariate_names {
            return Err(NuisanceError::BadDocument(
                "arm models use different covariates; the ratio is evaluated on one covariate vector".into(),
            ));
        }
        Ok(RatioModel { components: RatioComponents::ArmSpecific { treated, control }, floor: RATIO_FLOOR })
    }

    /// The covariate names the ratio is evaluated on.
    pub fn covariate_names(&self) -> &[String] {
        match &self.components {
            RatioComponents::ArmSpecific { treated, .. } => &treated.spec.covariate_names,
            RatioComponents::LogLinkInteraction { model, n_x } => &model.spec.covariate_names[..*n_x],
        }
    }

    /// Evaluate r at a covariate point. Errors if the denominator mean falls
    /// below the floor.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64, NuisanceError> {
        match &self.components {
            RatioComponents::ArmSpecific { treated, control } => {
                let denom = control.predict_mean(x)?;
                if denom < self.floor {
                    return Err(NuisanceError::DenominatorFloor {
                        value: denom,
                        floor: self.floor,
                        x: x.to_vec(),
                    });
                }
                Ok(treated.predict_mean(x)? / denom)
            }
            RatioComponents::LogLinkInteraction { model, n_x } => {
                if x.len() != *n_x {
                    return Err(GlmError::DimensionMismatch { expected: *n_x, found: x.len() }.into());
                }
                // Coefficient layout: intercept, X block, A, A*X block.
                let coefs = &model.coefficients;
                let mut eta = coefs[1 + n_x];
                for (j, v) in x.iter().enumerate() {
                    eta += coefs[2 + n_x + j] * v;
                }
                let r = eta.exp();
                if !r.is_finite() {
                    return Err(GlmError::NonFinitePrediction.into());
                }
                Ok(r)
            }
        }
    }
}

fn require_x_columns(ds: &AnalysisDataset, names: &[String]) -> Result<(), NuisanceError> {
    for name in names {
        match ds.column_index(name) {
            Some(ColumnRef::X(_)) => {}
            Some(ColumnRef::W(_)) => return Err(NuisanceError::NotAnXColumn(name.clone())),
            None => return Err(NuisanceError::UnknownColumn(name.clone())),
        }
    }
    Ok(())
}

/// Gather the values a model's covariates take on one row, resolving each
/// name against the dataset's X and W columns.
pub fn covariate_values(
    ds: &AnalysisDataset,
    row: &ObservationRow,
    names: &[String],
) -> Result<Vec<f64>, NuisanceError> {
    names
        .iter()
        .map(|name| {
            ds.column_index(name)
                .and_then(|c| c.value(row))
                .ok_or_else(|| NuisanceError::UnknownColumn(name.clone()))
        })
        .collect()
}

fn fit_rows<'a>(
    spec: &ModelSpec,
    ds: &AnalysisDataset,
    rows: impl Iterator<Item = &'a ObservationRow>,
) -> Result<Vec<(Vec<f64>, f64, f64)>, NuisanceError> {
    rows.map(|r| Ok((covariate_values(ds, r, &spec.covariate_names)?, r.y, 1.0)))
        .collect()
}

/// Fit the conditional relative effect estimator on the trial sample.
pub fn fit_ratio(
    ds: &AnalysisDataset,
    spec: &ModelSpec,
    method: RatioMethod,
) -> Result<RatioModel, NuisanceError> {
    require_x_columns(ds, &spec.covariate_names)?;
    match method {
        RatioMethod::ArmSpecific => {
            let treated_rows = fit_rows(spec, ds, ds.trial_rows().filter(|r| r.a == 1))?;
            if treated_rows.is_empty() {
                return Err(NuisanceError::EmptyArm { arm: 1, arm_name: "experimental" });
            }
            let control_rows = fit_rows(spec, ds, ds.trial_rows().filter(|r| r.a == 0))?;
            if control_rows.is_empty() {
                return Err(NuisanceError::EmptyArm { arm: 0, arm_name: "control" });
            }
            let treated = glm::fit_glm(spec, &treated_rows)?;
            let control = glm::fit_glm(spec, &control_rows)?;
            Ok(RatioModel { components: RatioComponents::ArmSpecific { treated, control }, floor: RATIO_FLOOR })
        }
        RatioMethod::LogLinkInteraction => {
            if spec.link != Link::Log || spec.family == Family::Gaussian {
                return Err(GlmError::InvalidSpec(
                    "the interaction ratio method needs a bernoulli or poisson log-link spec".into(),
                )
                .into());
            }
            if !spec.include_intercept {
                return Err(GlmError::InvalidSpec("the interaction ratio method needs an intercept".into()).into());
            }
            let n_x = spec.covariate_names.len();
            let mut names = spec.covariate_names.clone();
            names.push(TREAT_NAME.to_string());
            for base in &spec.covariate_names {
                names.push(format!("{}*{}", TREAT_NAME, base));
            }
            let mut ext_spec = spec.clone();
            ext_spec.covariate_names = names;
            let mut rows = Vec::new();
            let mut arms = [false, false];
            for r in ds.trial_rows() {
                arms[r.a as usize] = true;
                let x = covariate_values(ds, r, &spec.covariate_names)?;
                let a = f64::from(r.a);
                let mut design = x.clone();
                design.push(a);
                design.extend(x.iter().map(|v| a * v));
                rows.push((design, r.y, 1.0));
            }
            if !arms[1] {
                return Err(NuisanceError::EmptyArm { arm: 1, arm_name: "experimental" });
            }
            if !arms[0] {
                return Err(NuisanceError::EmptyArm { arm: 0, arm_name: "control" });
            }
            let model = glm::fit_glm(&ext_spec, &rows)?;
            Ok(RatioModel { components: RatioComponents::LogLinkInteraction { model, n_x }, floor: RATIO_FLOOR })
        }
    }
}

/// Fit E[Y | X, S=0] on all target rows.
pub fn fit_g(ds: &AnalysisDataset, spec: &ModelSpec) -> Result<FittedModel, NuisanceError> {
    require_x_columns(ds, &spec.covariate_names)?;
    let rows = fit_rows(spec, ds, ds.target_rows())?;
    if rows.is_empty() {
        return Err(NuisanceError::EmptyStratum("target (s=0)"));
    }
    Ok(glm::fit_glm(spec, &rows)?)
}

/// Fit E[Y | X, S=0, A=0] on target control rows.
pub fn fit_h(ds: &AnalysisDataset, spec: &ModelSpec) -> Result<FittedModel, NuisanceError> {
    require_x_columns(ds, &spec.covariate_names)?;
    let rows = fit_rows(spec, ds, ds.target_rows().filter(|r| r.a == 0))?;
    if rows.is_empty() {
        return Err(NuisanceError::EmptyStratum("target control (s=0, a=0)"));
    }
    Ok(glm::fit_glm(spec, &rows)?)
}

/// Fit E[Y | X, W, S=0, A=0] on target control rows over (X, W) covariates.
pub fn fit_m(ds: &AnalysisDataset, spec_with_w: &ModelSpec) -> Result<FittedModel, NuisanceError> {
    for name in &spec_with_w.covariate_names {
        if ds.column_index(name).is_none() {
            return Err(NuisanceError::UnknownColumn(name.clone()));
        }
    }
    let rows = fit_rows(spec_with_w, ds, ds.target_rows().filter(|r| r.a == 0))?;
    if rows.is_empty() {
        return Err(NuisanceError::EmptyStratum("target control (s=0, a=0)"));
    }
    Ok(glm::fit_glm(spec_with_w, &rows)?)
}

/// The iterated-expectation step for b(x):
/// (1) take the fitted m-model, (2) predict on every target row regardless
/// of treatment, (3) regress those predictions on X alone by ordinary least
/// squares. With no W columns the m-model already conditions on X only and
/// is returned unchanged.
pub fn fit_iterated(
    ds: &AnalysisDataset,
    m: &FittedModel,
    step3_spec: &ModelSpec,
) -> Result<FittedModel, NuisanceError> {
    if ds.w_names().is_empty() {
        return Ok(m.clone());
    }
    require_x_columns(ds, &step3_spec.covariate_names)?;
    if step3_spec.family != Family::Gaussian || step3_spec.link != Link::Identity {
        return Err(GlmError::InvalidSpec("the step-3 regression is ordinary least squares (gaussian/identity)".into()).into());
    }
    let mut rows = Vec::new();
    for r in ds.target_rows() {
        let m_input = covariate_values(ds, r, &m.spec.covariate_names)?;
        let pseudo = m.predict_mean(&m_input)?;
        let x = covariate_values(ds, r, &step3_spec.covariate_names)?;
        rows.push((x, pseudo, 1.0));
    }
    if rows.is_empty() {
        return Err(NuisanceError::EmptyStratum("target (s=0)"));
    }
    Ok(glm::fit_glm(step3_spec, &rows)?)
}

/// Parse a model document into a usable (external) model. The result carries
/// no `n_obs`; the bootstrap holds such models fixed across replicates and
/// downstream estimates flag their provenance.
pub fn import_external_model(doc_text: &str) -> Result<FittedModel, NuisanceError> {
    let doc = Document::parse(doc_text).map_err(|e| NuisanceError::BadDocument(e.to_string()))?;
    let model = doc
        .section("model")
        .ok_or_else(|| NuisanceError::BadDocument("missing [model] section".into()))?;
    let family_tok = model
        .get("family")
        .ok_or_else(|| NuisanceError::BadDocument("missing family".into()))?;
    let family = Family::parse(family_tok)
        .ok_or_else(|| NuisanceError::BadDocument(format!("unknown family '{}'", family_tok)))?;
    let link_tok = model
        .get("link")
        .ok_or_else(|| NuisanceError::BadDocument("missing link".into()))?;
    let link = Link::parse(link_tok)
        .ok_or_else(|| NuisanceError::BadDocument(format!("unknown link '{}'", link_tok)))?;

    let coefs = doc
        .section("coefficients")
        .ok_or_else(|| NuisanceError::BadDocument("missing [coefficients] section".into()))?;
    let mut include_intercept = false;
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (i, (name, value)) in coefs.pairs().enumerate() {
        let v: f64 = value
            .parse()
            .map_err(|_| NuisanceError::BadDocument(format!("coefficient '{}' is not a number: '{}'", name, value)))?;
        if name == "(intercept)" {
            if i != 0 {
                return Err(NuisanceError::BadDocument("(intercept) must come first".into()));
            }
            include_intercept = true;
        } else {
            if name.is_empty() {
                return Err(NuisanceError::BadDocument("empty coefficient name".into()));
            }
            names.push(name.to_string());
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(NuisanceError::BadDocument("no coefficients".into()));
    }
    Ok(FittedModel::external(family, link, names, include_intercept, values)?)
}

/// The fitted conditional-expectation models an estimator run consumes.
/// Which optional fields are present depends on the requested estimator.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub ratio: RatioModel,
    pub g: Option<FittedModel>,
    pub h: Option<FittedModel>,
    pub m: Option<FittedModel>,
    pub b: Option<FittedModel>,
}

impl NuisanceSet {
    pub fn new(ratio: RatioModel) -> Self {
        NuisanceSet { ratio, g: None, h: None, m: None, b: None }
    }

    /// True when any component was supplied externally rather than fit on
    /// this dataset.
    pub fn any_external(&self) -> bool {
        self.ratio.is_external()
            || [&self.g, &self.h, &self.m, &self.b]
                .into_iter()
                .flatten()
                .any(FittedModel::is_external)
    }
}
