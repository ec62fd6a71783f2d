//! Standardization of conditional relative effect measures from a randomized
//! trial to a separately sampled target population.
//!
//! The library estimates the causal mean ratio and average treatment effect
//! in the target population under the assumption that covariate-conditional
//! relative effect measures carry over from the trial. It provides the data
//! model, a small GLM engine for the nuisance regressions, the plug-in
//! estimators with percentile-bootstrap inference, observed-data diagnostics
//! for the transportability conditions, and a simulation module whose
//! scenarios have closed-form true estimands.

pub mod cli;
pub mod datamodel;
pub mod diagnostics;
pub mod estimators;
pub mod glm;
pub mod kv;
pub mod nuisance;
pub mod simulate;

pub use datamodel::{AnalysisDataset, EstimatorKind, ObservationRow, OutcomeKind};
pub use estimators::{Estimand, Estimate, EstimatorId, Interval};
pub use glm::{Family, FittedModel, Link, ModelSpec};
pub use nuisance::{NuisanceSet, RatioMethod, RatioModel};
pub use simulate::{ScenarioSpec, TrueValues};
