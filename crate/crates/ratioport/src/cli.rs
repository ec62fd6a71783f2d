//! Command-line surface: `estimate`, `simulate`, `diagnose`, and `compat`
//! subcommands over the library, with plain-text result documents.
//!
//! Every result document embeds the fully resolved run configuration, so a
//! run can be reproduced byte-for-byte from its own output. A `--config`
//! file (an `[args]` section of `flag = value` pairs) seeds defaults;
//! explicit flags override it and the resolved values are what get echoed.

use std::fmt::Display;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::datamodel::{
    load_dataset, validate_dataset, AnalysisDataset, ColumnBindings, DataError, EstimatorKind,
    ObservationRow, OutcomeKind, ValidationReport,
};
use crate::diagnostics::{
    check_restriction, compat_check, positivity_report, DiagnosticError, DiagnosticResult,
    PositivityReport, ProbabilitySummary, Restriction, RestrictionSpecs, StratumMeans,
};
use crate::estimators::{
    bootstrap_ci, BootstrapConfig, Estimate, EstimateError, EstimationPipeline, EstimatorId,
    Interval, NuisanceSource, RatioSource,
};
use crate::glm::{Family, GlmError, ModelSpec};
use crate::kv::{Document, Section};
use crate::nuisance::{import_external_model, NuisanceError, RatioMethod, RatioModel};
use crate::simulate::{
    generate, parse_scenario, true_estimands, true_values_document, OraclePrecision, ScenarioError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("validation failed [{code}]: {message}")]
    Validation { code: &'static str, message: String },
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error(transparent)]
    Nuisance(#[from] NuisanceError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Diagnostic(#[from] DiagnosticError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

impl CliError {
    /// Stable machine-readable code, printed as `error[code]` and suitable
    /// for scripting against.
    pub fn code(&self) -> String {
        match self {
            CliError::Usage(_) => "usage".into(),
            CliError::Read { .. } => "io/read".into(),
            CliError::Write { .. } => "io/write".into(),
            CliError::Data(_) => "datamodel/parse".into(),
            CliError::Validation { code, .. } => format!("datamodel/{}", code),
            CliError::Glm(GlmError::SingularDesign) => "glm/singular".into(),
            CliError::Glm(GlmError::BoundaryNonConvergence { .. }) => "glm/boundary".into(),
            CliError::Glm(GlmError::NonConvergence { .. }) => "glm/nonconvergence".into(),
            CliError::Glm(_) => "glm/spec".into(),
            CliError::Nuisance(NuisanceError::Glm(g)) => CliError::Glm(clone_glm_kind(g)).code(),
            CliError::Nuisance(NuisanceError::DenominatorFloor { .. }) => "nuisance/ratio-floor".into(),
            CliError::Nuisance(_) => "nuisance/fit".into(),
            CliError::Estimate(EstimateError::ZeroDenominator(_)) => "estimate/zero-denominator".into(),
            CliError::Estimate(EstimateError::TooManyFailures { .. }) => "estimate/bootstrap-failures".into(),
            CliError::Estimate(EstimateError::Nuisance(n)) => {
                CliError::Nuisance(clone_nuisance_kind(n)).code()
            }
            CliError::Estimate(_) => "estimate/config".into(),
            CliError::Diagnostic(_) => "diagnostics/run".into(),
            CliError::Scenario(_) => "simulate/scenario".into(),
        }
    }
}

// Error kinds carry owned payloads; for code() routing only the variant
// matters, so a shallow stand-in is enough.
fn clone_glm_kind(g: &GlmError) -> GlmError {
    match g {
        GlmError::SingularDesign => GlmError::SingularDesign,
        GlmError::BoundaryNonConvergence { .. } => {
            GlmError::BoundaryNonConvergence { iterations: 0, last: vec![] }
        }
        GlmError::NonConvergence { .. } => {
            GlmError::NonConvergence { iterations: 0, last_change: 0.0, last: vec![] }
        }
        _ => GlmError::InvalidSpec(String::new()),
    }
}

fn clone_nuisance_kind(n: &NuisanceError) -> NuisanceError {
    match n {
        NuisanceError::Glm(g) => NuisanceError::Glm(clone_glm_kind(g)),
        NuisanceError::DenominatorFloor { value, floor, x } => {
            NuisanceError::DenominatorFloor { value: *value, floor: *floor, x: x.clone() }
        }
        _ => NuisanceError::EmptyStratum("other"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Estimate,
    Simulate,
    Diagnose,
    Compat,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Simulate => "simulate",
            Command::Diagnose => "diagnose",
            Command::Compat => "compat",
        }
    }
}

/// Fully resolved invocation. Defaults are applied at parse time, so what
/// this struct holds is exactly what runs and what gets echoed into the
/// result document.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    // data bindings (estimate / diagnose)
    pub data: Option<PathBuf>,
    pub trial: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub s_col: String,
    pub a_col: String,
    pub y_col: String,
    pub x_cols: Vec<String>,
    pub w_cols: Vec<String>,
    pub outcome: OutcomeKind,
    // estimation choices
    pub estimator: EstimatorKind,
    pub estimand_ate: bool,
    pub ratio_method: RatioMethod,
    pub family: Option<Family>,
    pub g_model: Option<PathBuf>,
    pub h_model: Option<PathBuf>,
    pub m_model: Option<PathBuf>,
    pub ratio_treated_model: Option<PathBuf>,
    pub ratio_control_model: Option<PathBuf>,
    // inference
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    pub threads: usize,
    // outputs
    pub out: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    // simulate
    pub scenario: Option<PathBuf>,
    pub n1: usize,
    pub n0: usize,
    pub truth_method: String,
    pub truth_draws: u64,
    // diagnose
    pub threshold: f64,
    // compat
    pub input: Option<PathBuf>,
    pub tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: Command::Estimate,
            data: None,
            trial: None,
            target: None,
            s_col: "s".into(),
            a_col: "a".into(),
            y_col: "y".into(),
            x_cols: Vec::new(),
            w_cols: Vec::new(),
            outcome: OutcomeKind::Binary,
            estimator: EstimatorKind::Phi,
            estimand_ate: false,
            ratio_method: RatioMethod::ArmSpecific,
            family: None,
            g_model: None,
            h_model: None,
            m_model: None,
            ratio_treated_model: None,
            ratio_control_model: None,
            bootstrap: 500,
            level: 0.95,
            seed: 0,
            threads: 1,
            out: None,
            truth: None,
            scenario: None,
            n1: 1000,
            n0: 1000,
            truth_method: "closed-form".into(),
            truth_draws: 1_000_000,
            threshold: 0.05,
            input: None,
            tol: 1e-8,
        }
    }
}

pub const USAGE: &str = "\
ratioport <command> [flags]

commands:
  estimate   standardize a trial relative effect to the target population
  simulate   draw a synthetic trial + target dataset with known truth
  diagnose   testable-restriction statistics and positivity summaries
  compat     effect-measure compatibility algebra on stratum mean tables

data flags (estimate, diagnose):
  --data FILE                composite file with an s column
  --trial FILE --target FILE separate files (s is implied)
  --s-col --a-col --y-col    column bindings (defaults s, a, y)
  --x-cols a,b  --w-cols c,d covariate bindings
  --outcome {binary|count|continuous}

estimate flags:
  --estimator {phi|chi|psi}  --estimand {ratio|ate}
  --ratio-method {arm-specific|log-link}
  --family {gaussian|bernoulli|poisson}    nuisance family override
  --g-model/--h-model/--m-model FILE       external model documents
  --ratio-treated-model/--ratio-control-model FILE
  --bootstrap B --level L --seed S --threads T

simulate flags:
  --scenario FILE --n1 N --n0 N --seed S --out DATA.csv
  --truth FILE --truth-method {closed-form|monte-carlo} --truth-draws N

diagnose flags: data flags plus --threshold P --bootstrap --level --seed --threads
compat flags:   --input FILE (csv: e11,e10,e01,e00) --tol T

common: --out FILE (result document; stdout otherwise), --config FILE";

fn parse_flag_value<T: std::str::FromStr>(flag: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("flag {flag}: cannot parse '{value}'")))
}

fn split_names(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parse a command line. `args` excludes the program name. A `--config`
/// file is applied first (its `[args]` pairs in file order), then the
/// explicit flags in order, so later settings win.
pub fn parse_args(args: &[String]) -> Result<RunConfig, CliError> {
    let command = match args.first().map(String::as_str) {
        Some("estimate") => Command::Estimate,
        Some("simulate") => Command::Simulate,
        Some("diagnose") => Command::Diagnose,
        Some("compat") => Command::Compat,
        Some(other) => return Err(CliError::Usage(format!("unknown command '{other}'"))),
        None => return Err(CliError::Usage("missing command".into())),
    };
    let mut config = RunConfig { command, ..RunConfig::default() };

    // Collect (flag, value) pairs, expanding --flag=value.
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        let Some(stripped) = arg.strip_prefix("--") else {
            return Err(CliError::Usage(format!("expected a --flag, found '{arg}'")));
        };
        if let Some((k, v)) = stripped.split_once('=') {
            pairs.push((k.to_string(), v.to_string()));
        } else {
            let value = it
                .next()
                .ok_or_else(|| CliError::Usage(format!("flag --{stripped} needs a value")))?;
            pairs.push((stripped.to_string(), value.clone()));
        }
    }

    // Config file first, then flags: flags override config-file values.
    if let Some(pos) = pairs.iter().position(|(k, _)| k == "config") {
        let path = PathBuf::from(&pairs[pos].1);
        let text = fs::read_to_string(&path).map_err(|source| CliError::Read { path: path.clone(), source })?;
        let doc = Document::parse(&text)
            .map_err(|e| CliError::Usage(format!("config file {}: {}", path.display(), e)))?;
        let section = doc
            .section("args")
            .ok_or_else(|| CliError::Usage(format!("config file {} has no [args] section", path.display())))?;
        let file_pairs: Vec<(String, String)> =
            section.pairs().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut merged = file_pairs;
        merged.extend(pairs.iter().filter(|(k, _)| k != "config").cloned());
        pairs = merged;
    }

    for (flag, value) in &pairs {
        let flag = flag.as_str();
        let value = value.as_str();
        match flag {
            "data" => config.data = Some(PathBuf::from(value)),
            "trial" => config.trial = Some(PathBuf::from(value)),
            "target" => config.target = Some(PathBuf::from(value)),
            "s-col" => config.s_col = value.to_string(),
            "a-col" => config.a_col = value.to_string(),
            "y-col" => config.y_col = value.to_string(),
            "x-cols" => config.x_cols = split_names(value),
            "w-cols" => config.w_cols = split_names(value),
            "outcome" => {
                config.outcome = OutcomeKind::parse(value)
                    .ok_or_else(|| CliError::Usage(format!("unknown outcome '{value}'")))?;
            }
            "estimator" => {
                config.estimator = match value {
                    "phi" => EstimatorKind::Phi,
                    "chi" => EstimatorKind::Chi,
                    "psi" => EstimatorKind::Psi,
                    _ => return Err(CliError::Usage(format!("unknown estimator '{value}'"))),
                };
            }
            "estimand" => {
                config.estimand_ate = match value {
                    "ratio" => false,
                    "ate" => true,
                    _ => return Err(CliError::Usage(format!("unknown estimand '{value}'"))),
                };
            }
            "ratio-method" => {
                config.ratio_method = match value {
                    "arm-specific" => RatioMethod::ArmSpecific,
                    "log-link" => RatioMethod::LogLinkInteraction,
                    _ => return Err(CliError::Usage(format!("unknown ratio method '{value}'"))),
                };
            }
            "family" => {
                config.family = Some(
                    Family::parse(value)
                        .ok_or_else(|| CliError::Usage(format!("unknown family '{value}'")))?,
                );
            }
            "g-model" => config.g_model = Some(PathBuf::from(value)),
            "h-model" => config.h_model = Some(PathBuf::from(value)),
            "m-model" => config.m_model = Some(PathBuf::from(value)),
            "ratio-treated-model" => config.ratio_treated_model = Some(PathBuf::from(value)),
            "ratio-control-model" => config.ratio_control_model = Some(PathBuf::from(value)),
            "bootstrap" => config.bootstrap = parse_flag_value(flag, value)?,
            "level" => config.level = parse_flag_value(flag, value)?,
            "seed" => config.seed = parse_flag_value(flag, value)?,
            "threads" => config.threads = parse_flag_value(flag, value)?,
            "out" => config.out = Some(PathBuf::from(value)),
            "truth" => config.truth = Some(PathBuf::from(value)),
            "scenario" => config.scenario = Some(PathBuf::from(value)),
            "n1" => config.n1 = parse_flag_value(flag, value)?,
            "n0" => config.n0 = parse_flag_value(flag, value)?,
            "truth-method" => config.truth_method = value.to_string(),
            "truth-draws" => config.truth_draws = parse_flag_value(flag, value)?,
            "threshold" => config.threshold = parse_flag_value(flag, value)?,
            "input" => config.input = Some(PathBuf::from(value)),
            "tol" => config.tol = parse_flag_value(flag, value)?,
            "config" => {}
            other => return Err(CliError::Usage(format!("unknown flag --{other}"))),
        }
    }
    Ok(config)
}

fn open_reader(path: &Path) -> Result<BufReader<fs::File>, CliError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|source| CliError::Read { path: path.to_path_buf(), source })
}

fn bindings(config: &RunConfig) -> ColumnBindings {
    ColumnBindings {
        s_col: config.s_col.clone(),
        a_col: config.a_col.clone(),
        y_col: config.y_col.clone(),
        x_cols: config.x_cols.clone(),
        w_cols: config.w_cols.clone(),
    }
}

/// Load the analysis dataset from either a composite file or separate trial
/// and target files (in which case the s column is implied).
fn load_data(config: &RunConfig) -> Result<AnalysisDataset, CliError> {
    if config.x_cols.is_empty() {
        return Err(CliError::Usage("--x-cols is required".into()));
    }
    match (&config.data, &config.trial, &config.target) {
        (Some(path), None, None) => {
            Ok(load_dataset(open_reader(path)?, &bindings(config), config.outcome)?)
        }
        (None, Some(trial), Some(target)) => {
            let mut schema = bindings(config);
            schema.s_col = "__implied_s".into();
            let mut trial_rows = read_rows_one_stratum(trial, 1, &schema, config)?;
            let target_rows = read_rows_one_stratum(target, 0, &schema, config)?;
            trial_rows.extend(target_rows);
            Ok(AnalysisDataset::new(
                trial_rows,
                config.x_cols.clone(),
                config.w_cols.clone(),
                config.outcome,
            )?)
        }
        _ => Err(CliError::Usage("provide either --data, or both --trial and --target".into())),
    }
}

/// Load one stratum's file by appending an implied s column. A synthetic
/// row of the opposite stratum rides along to satisfy the both-strata
/// invariant during this partial load and is dropped right after.
fn read_rows_one_stratum(
    path: &Path,
    s: u8,
    schema: &ColumnBindings,
    config: &RunConfig,
) -> Result<Vec<ObservationRow>, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(CliError::Data(DataError::EmptyInput))?;
    let mut amended = format!("{},{}\n", header, schema.s_col);
    let mut opposite = String::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        amended.push_str(line);
        amended.push(',');
        amended.push_str(if s == 1 { "1" } else { "0" });
        amended.push('\n');
        if i == 0 {
            opposite = format!("{},{}\n", line, if s == 1 { "0" } else { "1" });
        }
    }
    amended.push_str(&opposite);
    let side_schema = if s == 1 {
        // Trial files carry no W columns.
        ColumnBindings { w_cols: vec![], ..schema.clone() }
    } else {
        schema.clone()
    };
    let ds = load_dataset(BufReader::new(amended.as_bytes()), &side_schema, config.outcome)?;
    Ok(ds.rows().iter().filter(|r| r.s == s).cloned().collect())
}

fn validation_gate(report: &ValidationReport) -> Result<(), CliError> {
    if let Some(first) = report.errors.first() {
        let rows = if first.rows.is_empty() {
            String::new()
        } else if first.rows.len() <= 10 {
            format!(" (rows {:?})", first.rows)
        } else {
            format!(" (rows {:?} and {} more)", &first.rows[..10], first.rows.len() - 10)
        };
        return Err(CliError::Validation {
            code: first.code,
            message: format!("{}{}", first.message, rows),
        });
    }
    Ok(())
}

fn nuisance_family(config: &RunConfig) -> Family {
    config.family.unwrap_or(match config.outcome {
        OutcomeKind::Binary => Family::Bernoulli,
        OutcomeKind::Count => Family::Poisson,
        OutcomeKind::Continuous => Family::Gaussian,
    })
}

fn load_external(path: &Path) -> Result<crate::glm::FittedModel, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    Ok(import_external_model(&text)?)
}

/// Assemble the estimation pipeline the flags describe.
fn build_pipeline(config: &RunConfig) -> Result<EstimationPipeline, CliError> {
    let family = nuisance_family(config);
    let outcome_spec = ModelSpec::canonical(family, config.x_cols.clone());
    let estimator = match (config.estimator, config.estimand_ate) {
        (EstimatorKind::Phi, false) => EstimatorId::Phi,
        (EstimatorKind::Chi, false) => EstimatorId::Chi,
        (EstimatorKind::Psi, false) => EstimatorId::Psi,
        (EstimatorKind::Phi, true) => EstimatorId::Beta,
        (EstimatorKind::Chi, true) => EstimatorId::Gamma,
        (EstimatorKind::Psi, true) => EstimatorId::Delta,
    };

    let ratio = match (&config.ratio_treated_model, &config.ratio_control_model) {
        (Some(t), Some(c)) => {
            RatioSource::External(RatioModel::from_arm_models(load_external(t)?, load_external(c)?)?)
        }
        (None, None) => match config.ratio_method {
            RatioMethod::ArmSpecific => {
                RatioSource::Fit { spec: outcome_spec.clone(), method: RatioMethod::ArmSpecific }
            }
            RatioMethod::LogLinkInteraction => {
                let log_family = match family {
                    Family::Gaussian => {
                        return Err(CliError::Usage(
                            "--ratio-method log-link needs a bernoulli or poisson family".into(),
                        ))
                    }
                    f => f,
                };
                let spec = ModelSpec::new(log_family, crate::glm::Link::Log, config.x_cols.clone())?;
                RatioSource::Fit { spec, method: RatioMethod::LogLinkInteraction }
            }
        },
        _ => {
            return Err(CliError::Usage(
                "external ratio models come in pairs: --ratio-treated-model and --ratio-control-model".into(),
            ))
        }
    };

    let source = |path: &Option<PathBuf>| -> Result<NuisanceSource, CliError> {
        Ok(match path {
            Some(p) => NuisanceSource::External(load_external(p)?),
            None => NuisanceSource::Fit(outcome_spec.clone()),
        })
    };

    let mut pipeline = EstimationPipeline {
        estimator,
        ratio,
        g: None,
        h: None,
        m: None,
        step3: None,
    };
    match config.estimator {
        EstimatorKind::Phi => pipeline.g = Some(source(&config.g_model)?),
        EstimatorKind::Chi => pipeline.h = Some(source(&config.h_model)?),
        EstimatorKind::Psi => {
            let mut m_cols = config.x_cols.clone();
            m_cols.extend(config.w_cols.iter().cloned());
            let m_spec = ModelSpec::canonical(family, m_cols);
            pipeline.m = Some(match &config.m_model {
                Some(p) => NuisanceSource::External(load_external(p)?),
                None => NuisanceSource::Fit(m_spec),
            });
            pipeline.step3 = Some(ModelSpec::canonical(Family::Gaussian, config.x_cols.clone()));
        }
    }
    Ok(pipeline)
}

fn push_kv(section: &mut Section, key: &str, value: impl Display) {
    section.push_pair(key, value);
}

fn run_section(config: &RunConfig) -> Section {
    let mut s = Section::new("run");
    push_kv(&mut s, "command", config.command.as_str());
    let path_str = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    match config.command {
        Command::Estimate | Command::Diagnose => {
            push_kv(&mut s, "data", path_str(&config.data));
            push_kv(&mut s, "trial", path_str(&config.trial));
            push_kv(&mut s, "target", path_str(&config.target));
            push_kv(&mut s, "s_col", &config.s_col);
            push_kv(&mut s, "a_col", &config.a_col);
            push_kv(&mut s, "y_col", &config.y_col);
            push_kv(&mut s, "x_cols", config.x_cols.join(","));
            push_kv(&mut s, "w_cols", config.w_cols.join(","));
            push_kv(&mut s, "outcome", config.outcome.as_str());
            push_kv(&mut s, "family", nuisance_family(config).as_str());
            if config.command == Command::Estimate {
                push_kv(&mut s, "estimator", config.estimator.as_str());
                push_kv(&mut s, "estimand", if config.estimand_ate { "ate" } else { "ratio" });
                push_kv(&mut s, "ratio_method", config.ratio_method.as_str());
                push_kv(&mut s, "g_model", path_str(&config.g_model));
                push_kv(&mut s, "h_model", path_str(&config.h_model));
                push_kv(&mut s, "m_model", path_str(&config.m_model));
                push_kv(&mut s, "ratio_treated_model", path_str(&config.ratio_treated_model));
                push_kv(&mut s, "ratio_control_model", path_str(&config.ratio_control_model));
            } else {
                push_kv(&mut s, "threshold", config.threshold);
            }
            push_kv(&mut s, "bootstrap", config.bootstrap);
            push_kv(&mut s, "level", config.level);
            push_kv(&mut s, "seed", config.seed);
            push_kv(&mut s, "threads", config.threads);
        }
        Command::Simulate => {
            push_kv(&mut s, "scenario", path_str(&config.scenario));
            push_kv(&mut s, "n1", config.n1);
            push_kv(&mut s, "n0", config.n0);
            push_kv(&mut s, "seed", config.seed);
            push_kv(&mut s, "out", path_str(&config.out));
            push_kv(&mut s, "truth", path_str(&config.truth));
            push_kv(&mut s, "truth_method", &config.truth_method);
            push_kv(&mut s, "truth_draws", config.truth_draws);
        }
        Command::Compat => {
            push_kv(&mut s, "input", path_str(&config.input));
            push_kv(&mut s, "tol", config.tol);
        }
    }
    s
}

fn estimate_sections(estimate: &Estimate, interval: &Interval) -> Vec<Section> {
    let mut result = Section::new("result");
    push_kv(&mut result, "estimator", estimate.estimator.as_str());
    push_kv(&mut result, "estimand", estimate.estimand.as_str());
    push_kv(&mut result, "point", estimate.value);
    push_kv(&mut result, "numerator", estimate.numerator);
    push_kv(&mut result, "denominator", estimate.denominator);
    push_kv(&mut result, "n0", estimate.n0);
    push_kv(&mut result, "n1", estimate.n1);
    push_kv(&mut result, "external_nuisance", estimate.external_nuisance);

    let mut iv = Section::new("interval");
    push_kv(&mut iv, "method", interval.method);
    push_kv(&mut iv, "level", interval.level);
    push_kv(&mut iv, "replicates", interval.replicates);
    push_kv(&mut iv, "failed_replicates", interval.failed_replicates);
    push_kv(&mut iv, "seed", interval.seed);
    push_kv(&mut iv, "lower", interval.lower);
    push_kv(&mut iv, "upper", interval.upper);
    vec![result, iv]
}

fn warnings_section(report: &ValidationReport) -> Option<Section> {
    if report.warnings.is_empty() {
        return None;
    }
    let mut s = Section::new("warnings");
    for w in &report.warnings {
        s.push_pair(w.code, &w.message);
    }
    Some(s)
}

fn run_estimate(config: &RunConfig) -> Result<Document, CliError> {
    let ds = load_data(config)?;
    let report = validate_dataset(&ds, config.estimator);
    validation_gate(&report)?;
    let pipeline = build_pipeline(config)?;
    let boot = BootstrapConfig {
        replicates: config.bootstrap,
        level: config.level,
        seed: config.seed,
        threads: config.threads.max(1),
    };
    let (estimate, interval) = bootstrap_ci(&ds, &pipeline, &boot)?;
    let mut doc = Document::new();
    doc.push(run_section(config));
    for s in estimate_sections(&estimate, &interval) {
        doc.push(s);
    }
    if let Some(w) = warnings_section(&report) {
        doc.push(w);
    }
    Ok(doc)
}

fn push_restriction(section: &mut Section, result: &DiagnosticResult) {
    let prefix = match result.restriction {
        Restriction::R1 => "r1",
        Restriction::R2 => "r2",
    };
    push_kv(section, &format!("{prefix}_statistic"), result.statistic);
    push_kv(section, &format!("{prefix}_lower"), result.bootstrap_interval.lower);
    push_kv(section, &format!("{prefix}_upper"), result.bootstrap_interval.upper);
    push_kv(section, &format!("{prefix}_level"), result.bootstrap_interval.level);
    push_kv(section, &format!("{prefix}_replicates"), result.bootstrap_interval.replicates);
    push_kv(section, &format!("{prefix}_failed_replicates"), result.bootstrap_interval.failed_replicates);
    push_kv(section, &format!("{prefix}_interpretation"), &result.interpretation);
}

fn positivity_sections(report: &PositivityReport) -> Vec<Section> {
    let one = |summary: &ProbabilitySummary, name: &str| {
        let mut s = Section::new(name);
        push_kv(&mut s, "condition", summary.condition);
        push_kv(&mut s, "min", summary.min);
        push_kv(&mut s, "percentile_01", summary.percentile_01);
        push_kv(&mut s, "median", summary.median);
        push_kv(&mut s, "degenerate", summary.degenerate);
        push_kv(
            &mut s,
            "flagged_rows",
            summary.flagged_rows.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
        );
        s
    };
    vec![
        one(&report.trial_participation, "positivity_trial_participation"),
        one(&report.trial_assignment, "positivity_trial_assignment"),
        one(&report.target_control, "positivity_target_control"),
    ]
}

fn run_diagnose(config: &RunConfig) -> Result<Document, CliError> {
    let ds = load_data(config)?;
    let family = nuisance_family(config);
    let trial_outcome = ModelSpec::canonical(family, config.x_cols.clone());
    let target_outcome = ModelSpec::canonical(family, config.x_cols.clone());
    let specs = RestrictionSpecs { trial_outcome, target_outcome };
    let threads = config.threads.max(1);
    let r1 = check_restriction(&ds, Restriction::R1, &specs, config.bootstrap, config.level, config.seed, threads)?;
    let r2 = check_restriction(&ds, Restriction::R2, &specs, config.bootstrap, config.level, config.seed, threads)?;

    let selection_spec = ModelSpec::canonical(Family::Bernoulli, config.x_cols.clone());
    let mut control_cols = config.x_cols.clone();
    control_cols.extend(config.w_cols.iter().cloned());
    let treatment_spec = ModelSpec::canonical(Family::Bernoulli, control_cols);
    let positivity = positivity_report(&ds, &selection_spec, &treatment_spec, config.threshold)?;

    let mut doc = Document::new();
    doc.push(run_section(config));
    let mut diagnostics = Section::new("diagnostics");
    push_restriction(&mut diagnostics, &r1);
    push_restriction(&mut diagnostics, &r2);
    doc.push(diagnostics);
    for s in positivity_sections(&positivity) {
        doc.push(s);
    }
    Ok(doc)
}

fn run_simulate(config: &RunConfig) -> Result<Document, CliError> {
    let scenario_path = config
        .scenario
        .as_ref()
        .ok_or_else(|| CliError::Usage("simulate needs --scenario FILE".into()))?;
    let out = config
        .out
        .as_ref()
        .ok_or_else(|| CliError::Usage("simulate needs --out FILE for the dataset".into()))?;
    let text = fs::read_to_string(scenario_path)
        .map_err(|source| CliError::Read { path: scenario_path.clone(), source })?;
    let scenario = parse_scenario(&text)?;
    let ds = generate(&scenario, config.n1, config.n0, config.seed)?;
    fs::write(out, ds.write_csv()?).map_err(|source| CliError::Write { path: out.clone(), source })?;

    let precision = match config.truth_method.as_str() {
        "closed-form" => OraclePrecision::ClosedForm,
        "monte-carlo" => OraclePrecision::MonteCarlo { draws: config.truth_draws, seed: config.seed },
        other => return Err(CliError::Usage(format!("unknown truth method '{other}'"))),
    };
    let truth = true_estimands(&scenario, precision)?;
    let truth_doc_text = true_values_document(&truth);
    let truth_doc = Document::parse(&truth_doc_text).expect("internally rendered document");

    let mut doc = Document::new();
    doc.push(run_section(config));
    for s in truth_doc.sections {
        doc.push(s);
    }
    Ok(doc)
}

fn run_compat(config: &RunConfig) -> Result<Document, CliError> {
    let input = config
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("compat needs --input FILE".into()))?;
    let text =
        fs::read_to_string(input).map_err(|source| CliError::Read { path: input.clone(), source })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(CliError::Data(DataError::EmptyInput))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let col = |name: &str| -> Result<usize, CliError> {
        names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| CliError::Data(DataError::MissingColumn(name.into())))
    };
    let (i11, i10, i01, i00) = (col("e11")?, col("e10")?, col("e01")?, col("e00")?);
    let mut strata = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |idx: usize| -> Result<f64, CliError> {
            cells
                .get(idx)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| {
                    CliError::Data(DataError::BadCell {
                        row: lineno + 1,
                        column: names.get(idx).unwrap_or(&"?").to_string(),
                        cell: cells.get(idx).unwrap_or(&"").to_string(),
                    })
                })
        };
        strata.push(StratumMeans { e11: get(i11)?, e10: get(i10)?, e01: get(i01)?, e00: get(i00)? });
    }
    let report = compat_check(&strata, config.tol)?;

    let mut doc = Document::new();
    doc.push(run_section(config));
    let mut s = Section::new("compat");
    push_kv(&mut s, "strata", report.strata.len());
    push_kv(&mut s, "theorem_satisfied", report.theorem_satisfied);
    doc.push(s);
    for (i, flags) in report.strata.iter().enumerate() {
        let mut s = Section::new(&format!("stratum_{i}"));
        push_kv(&mut s, "holds_a4", flags.holds_a4);
        push_kv(&mut s, "holds_a4_star", flags.holds_a4_star);
        push_kv(&mut s, "holds_i1", flags.holds_i1);
        push_kv(&mut s, "holds_i2", flags.holds_i2);
        doc.push(s);
    }
    Ok(doc)
}

/// Run a resolved configuration and return the rendered result document.
/// `simulate` additionally writes the generated dataset to `--out`.
pub fn execute(config: &RunConfig) -> Result<String, CliError> {
    let doc = match config.command {
        Command::Estimate => run_estimate(config)?,
        Command::Diagnose => run_diagnose(config)?,
        Command::Simulate => run_simulate(config)?,
        Command::Compat => run_compat(config)?,
    };
    Ok(doc.render())
}

/// Where the rendered document should go for each command.
pub fn document_destination(config: &RunConfig) -> Option<PathBuf> {
    match config.command {
        // simulate's --out holds the dataset; the document goes to --truth.
        Command::Simulate => config.truth.clone(),
        _ => config.out.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_minimal_estimate() {
        let args: Vec<String> = [
            "estimate", "--data", "d.csv", "--x-cols", "x1,x2", "--estimator", "chi",
            "--estimand", "ate", "--bootstrap", "22", "--seed", "9",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let config = parse_args(&args).unwrap();
        assert_eq!(config.command, Command::Estimate);
        assert_eq!(config.x_cols, vec!["x1", "x2"]);
        assert_eq!(config.estimator, EstimatorKind::Chi);
        assert!(config.estimand_ate);
        assert_eq!(config.bootstrap, 22);
        assert_eq!(config.seed, 9);
        assert_eq!(config.level, 0.95, "default level");
    }

    #[test]
    fn flag_equals_form_is_accepted() {
        let args: Vec<String> =
            ["simulate", "--n1=50", "--n0=60", "--seed=3"].iter().map(|s| s.to_string()).collect();
        let config = parse_args(&args).unwrap();
        assert_eq!((config.n1, config.n0, config.seed), (50, 60, 3));
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let args: Vec<String> = ["estimate", "--bogus", "1"].iter().map(|s| s.to_string()).collect();
        assert!(matches!(parse_args(&args), Err(CliError::Usage(_))));
    }

    #[test]
    fn missing_command_is_a_usage_error() {
        assert!(matches!(parse_args(&[]), Err(CliError::Usage(_))));
    }
}
