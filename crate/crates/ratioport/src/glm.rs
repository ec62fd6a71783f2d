//! Generalized linear model engine.
//!
//! Fits Gaussian, Bernoulli, and Poisson regressions by iteratively
//! reweighted least squares (Fisher scoring) with step-halving. This covers
//! every nuisance regression the estimators need: identity-link least
//! squares, logistic regression, Poisson log-linear models, and log-link
//! Bernoulli ("relative risk") regression.
//!
//! Each Fisher step solves the weighted normal equations
//!
//! `(X'WX) d = X'Wz`,  `W_i = w_i (dmu/deta)^2 / V(mu_i)`,  `z_i = eta_i + (y_i - mu_i) / (dmu/deta)`
//!
//! and the candidate step is halved (up to 20 times) whenever the weighted
//! log-likelihood fails to improve or a fitted mean leaves the valid range
//! (log-link Bernoulli means can escape past 1 mid-iteration). Convergence
//! is declared after two consecutive iterations whose coefficient change has
//! max-norm at or below `tol`; the extra polishing step drives the score to
//! numerical zero rather than merely `O(tol)`.

use thiserror::Error;

use crate::kv::{Document, Section};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 20;
const MEAN_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Gaussian,
    Bernoulli,
    Poisson,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Bernoulli => "bernoulli",
            Family::Poisson => "poisson",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s {
            "gaussian" => Some(Family::Gaussian),
            "bernoulli" => Some(Family::Bernoulli),
            "poisson" => Some(Family::Poisson),
            _ => None,
        }
    }

    /// The link whose score equation zeroes the weighted residual sum.
    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Bernoulli => Link::Logit,
            Family::Poisson => Link::Log,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn as_str(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Logit => "logit",
            Link::Log => "log",
        }
    }

    pub fn parse(s: &str) -> Option<Link> {
        match s {
            "identity" => Some(Link::Identity),
            "logit" => Some(Link::Logit),
            "log" => Some(Link::Log),
            _ => None,
        }
    }

    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            // Numerically stable in both tails.
            Link::Logit => {
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// dmu/deta evaluated at mu.
    fn mean_derivative(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => mu * (1.0 - mu),
            Link::Log => mu,
        }
    }
}

#[derive(Debug, Error)]
pub enum GlmError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("no rows with positive weight")]
    EmptyFit,
    #[error("covariate vector length {found} does not match spec width {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("row {index}: {message}")]
    BadResponse { index: usize, message: String },
    #[error("singular design: the weighted cross-product matrix is rank deficient")]
    SingularDesign,
    #[error(
        "no convergence after {iterations} iterations (last max-norm change {last_change:.3e}); \
         coefficients of the last iterate are retained in this error"
    )]
    NonConvergence { iterations: usize, last_change: f64, last: Vec<f64> },
    #[error(
        "boundary non-convergence after {iterations} iterations: fitted means are pinned at the \
         edge of the valid range (degenerate outcome or relative risk regression escaping (0,1)); \
         consider the arm-specific ratio method"
    )]
    BoundaryNonConvergence { iterations: usize, last: Vec<f64> },
    #[error("non-finite prediction from the fitted linear predictor")]
    NonFinitePrediction,
    #[error("model document: {0}")]
    ParseModel(String),
}

/// What to fit: family, link, named covariates, and IRLS controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub link: Link,
    pub covariate_names: Vec<String>,
    pub include_intercept: bool,
    pub max_iter: usize,
    pub tol: f64,
}

impl ModelSpec {
    pub fn new(family: Family, link: Link, covariate_names: Vec<String>) -> Result<Self, GlmError> {
        let spec = ModelSpec {
            family,
            link,
            covariate_names,
            include_intercept: true,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Family with its canonical link.
    pub fn canonical(family: Family, covariate_names: Vec<String>) -> Self {
        ModelSpec::new(family, family.canonical_link(), covariate_names).expect("canonical pair is valid")
    }

    pub fn validate(&self) -> Result<(), GlmError> {
        if self.family == Family::Bernoulli && self.link == Link::Identity {
            return Err(GlmError::InvalidSpec("(bernoulli, identity) is disallowed".into()));
        }
        if self.link == Link::Logit && self.family != Family::Bernoulli {
            return Err(GlmError::InvalidSpec("logit link requires the bernoulli family".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.covariate_names {
            if !seen.insert(name.as_str()) {
                return Err(GlmError::InvalidSpec(format!("covariate name '{}' repeats", name)));
            }
            if name == "(intercept)" {
                return Err(GlmError::InvalidSpec("'(intercept)' is a reserved name".into()));
            }
        }
        if self.max_iter == 0 {
            return Err(GlmError::InvalidSpec("max_iter must be positive".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(GlmError::InvalidSpec("tol must be positive".into()));
        }
        if self.family == Family::Bernoulli && self.link == Link::Log && !self.include_intercept {
            return Err(GlmError::InvalidSpec(
                "log-link bernoulli fits require an intercept (starting values anchor at log(mean y))".into(),
            ));
        }
        Ok(())
    }

    /// Design width: covariates plus the intercept column.
    pub fn width(&self) -> usize {
        self.covariate_names.len() + usize::from(self.include_intercept)
    }
}

/// A fitted (or externally supplied) regression. `n_obs` is `None` exactly
/// when the model was imported rather than fit here.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n_obs: Option<usize>,
}

impl FittedModel {
    pub fn is_external(&self) -> bool {
        self.n_obs.is_none()
    }

    /// Wrap externally supplied coefficients as a usable model.
    pub fn external(
        family: Family,
        link: Link,
        covariate_names: Vec<String>,
        include_intercept: bool,
        coefficients: Vec<f64>,
    ) -> Result<Self, GlmError> {
        let mut spec = ModelSpec::new(family, link, covariate_names)?;
        spec.include_intercept = include_intercept;
        if coefficients.len() != spec.width() {
            return Err(GlmError::DimensionMismatch {
                expected: spec.width(),
                found: coefficients.len(),
            });
        }
        Ok(FittedModel { spec, coefficients, converged: true, iterations: 0, n_obs: None })
    }

    pub fn linear_predictor(&self, covariates: &[f64]) -> Result<f64, GlmError> {
        if covariates.len() != self.spec.covariate_names.len() {
            return Err(GlmError::DimensionMismatch {
                expected: self.spec.covariate_names.len(),
                found: covariates.len(),
            });
        }
        let mut eta = 0.0;
        let mut k = 0;
        if self.spec.include_intercept {
            eta += self.coefficients[0];
            k = 1;
        }
        for (j, v) in covariates.iter().enumerate() {
            eta += self.coefficients[k + j] * v;
        }
        Ok(eta)
    }

    /// Inverse-link of the linear predictor.
    pub fn predict_mean(&self, covariates: &[f64]) -> Result<f64, GlmError> {
        let mu = self.spec.link.inverse(self.linear_predictor(covariates)?);
        if !mu.is_finite() {
            return Err(GlmError::NonFinitePrediction);
        }
        Ok(mu)
    }

    /// Serialize to the model document format consumed by
    /// `nuisance::import_external_model`. Coefficients render in shortest
    /// round-trip decimal form, so re-importing reproduces them bit-for-bit.
    pub fn to_document(&self) -> String {
        let mut doc = Document::new();
        let mut model = Section::new("model");
        model.push_pair("family", self.spec.family.as_str());
        model.push_pair("link", self.spec.link.as_str());
        doc.push(model);
        let mut coefs = Section::new("coefficients");
        let mut k = 0;
        if self.spec.include_intercept {
            coefs.push_pair("(intercept)", self.coefficients[0]);
            k = 1;
        }
        for (j, name) in self.spec.covariate_names.iter().enumerate() {
            coefs.push_pair(name, self.coefficients[k + j]);
        }
        doc.push(coefs);
        doc.render()
    }
}

fn check_responses(family: Family, rows: &[(Vec<f64>, f64, f64)]) -> Result<(), GlmError> {
    for (i, (_, y, w)) in rows.iter().enumerate() {
        if *w < 0.0 || !w.is_finite() {
            return Err(GlmError::BadResponse { index: i, message: format!("weight {} is invalid", w) });
        }
        if !y.is_finite() {
            return Err(GlmError::BadResponse { index: i, message: "non-finite response".into() });
        }
        match family {
            Family::Bernoulli if *y != 0.0 && *y != 1.0 => {
                return Err(GlmError::BadResponse {
                    index: i,
                    message: format!("bernoulli response {} not in {{0,1}}", y),
                });
            }
            Family::Poisson if *y < 0.0 => {
                return Err(GlmError::BadResponse {
                    index: i,
                    message: format!("poisson response {} is negative", y),
                });
            }
            _ => {}
        }
    }
    Ok(())
}

/// Weighted log-likelihood (additive constants dropped) at the given
/// coefficients. Returns -inf / NaN when a mean leaves the family's valid
/// range, which is what the step-halving loop keys on.
pub fn log_likelihood(spec: &ModelSpec, rows: &[(Vec<f64>, f64, f64)], coefficients: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (x, y, w) in rows {
        if *w == 0.0 {
            continue;
        }
        let mu = spec.link.inverse(linear_predictor_raw(spec, coefficients, x));
        ll += w * match spec.family {
            Family::Gaussian => -0.5 * (y - mu) * (y - mu),
            Family::Bernoulli => {
                if *y == 1.0 {
                    mu.ln()
                } else {
                    (1.0 - mu).ln()
                }
            }
            Family::Poisson => {
                if *y == 0.0 {
                    -mu
                } else {
                    y * mu.ln() - mu
                }
            }
        };
    }
    ll
}

/// Weighted score vector (gradient of the log-likelihood) at the given
/// coefficients: `sum_i w_i (y_i - mu_i) (dmu/deta)_i / V(mu_i) x_i`.
pub fn score(spec: &ModelSpec, rows: &[(Vec<f64>, f64, f64)], coefficients: &[f64]) -> Vec<f64> {
    let p = spec.width();
    let mut out = vec![0.0; p];
    for (x, y, w) in rows {
        if *w == 0.0 {
            continue;
        }
        let mu = spec.link.inverse(linear_predictor_raw(spec, coefficients, x));
        let muc = clamp_mean(spec.family, mu);
        let factor = w * (y - mu) * spec.link.mean_derivative(muc) / variance(spec.family, muc);
        accumulate(&mut out, spec.include_intercept, x, factor);
    }
    out
}

fn linear_predictor_raw(spec: &ModelSpec, coefficients: &[f64], x: &[f64]) -> f64 {
    let mut eta = 0.0;
    let mut k = 0;
    if spec.include_intercept {
        eta += coefficients[0];
        k = 1;
    }
    for (j, v) in x.iter().enumerate() {
        eta += coefficients[k + j] * v;
    }
    eta
}

fn variance(family: Family, mu: f64) -> f64 {
    match family {
        Family::Gaussian => 1.0,
        Family::Bernoulli => mu * (1.0 - mu),
        Family::Poisson => mu,
    }
}

fn clamp_mean(family: Family, mu: f64) -> f64 {
    match family {
        Family::Gaussian => mu,
        Family::Bernoulli => mu.clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP),
        Family::Poisson => mu.max(MEAN_CLAMP),
    }
}

fn accumulate(out: &mut [f64], intercept: bool, x: &[f64], factor: f64) {
    let mut k = 0;
    if intercept {
        out[0] += factor;
        k = 1;
    }
    for (j, v) in x.iter().enumerate() {
        out[k + j] += factor * v;
    }
}

fn starting_values(spec: &ModelSpec, rows: &[(Vec<f64>, f64, f64)]) -> Vec<f64> {
    let mut beta = vec![0.0; spec.width()];
    if !spec.include_intercept {
        return beta;
    }
    let (mut sw, mut swy) = (0.0, 0.0);
    for (_, y, w) in rows {
        sw += w;
        swy += w * y;
    }
    let ybar = swy / sw;
    beta[0] = match spec.link {
        Link::Identity => ybar,
        Link::Log => ybar.max(MEAN_CLAMP).ln(),
        Link::Logit => {
            let p = ybar.clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP);
            (p / (1.0 - p)).ln()
        }
    };
    beta
}

/// Solve the symmetric positive definite system `a x = b` by Cholesky
/// decomposition, in place. A pivot at or below `1e-12 * max diagonal`
/// signals rank deficiency.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], p: usize) -> Result<Vec<f64>, GlmError> {
    let max_diag = (0..p).map(|j| a[j * p + j].abs()).fold(0.0_f64, f64::max);
    let floor = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if d.is_nan() || d <= floor {
            return Err(GlmError::SingularDesign);
        }
        let l = d.sqrt();
        a[j * p + j] = l;
        for i in (j + 1)..p {
            let mut v = a[i * p + j];
            for k in 0..j {
                v -= a[i * p + k] * a[j * p + k];
            }
            a[i * p + j] = v / l;
        }
    }
    // forward then back substitution
    for i in 0..p {
        let mut v = b[i];
        for k in 0..i {
            v -= a[i * p + k] * b[k];
        }
        b[i] = v / a[i * p + i];
    }
    for i in (0..p).rev() {
        let mut v = b[i];
        for k in (i + 1)..p {
            v -= a[k * p + i] * b[k];
        }
        b[i] = v / a[i * p + i];
    }
    Ok(b.to_vec())
}

/// Fit by IRLS. Rows are `(covariates, response, weight)`; zero-weight rows
/// are ignored. Coefficients maximize the weighted log-likelihood to within
/// `spec.tol` on the coefficient max-norm change.
pub fn fit_glm(spec: &ModelSpec, rows: &[(Vec<f64>, f64, f64)]) -> Result<FittedModel, GlmError> {
    spec.validate()?;
    let n_cov = spec.covariate_names.len();
    for (i, (x, _, _)) in rows.iter().enumerate() {
        if x.len() != n_cov {
            return Err(GlmError::BadResponse {
                index: i,
                message: format!("covariate vector length {} does not match spec ({})", x.len(), n_cov),
            });
        }
    }
    check_responses(spec.family, rows)?;
    let n_obs = rows.iter().filter(|(_, _, w)| *w > 0.0).count();
    if n_obs == 0 {
        return Err(GlmError::EmptyFit);
    }

    let p = spec.width();
    let mut beta = starting_values(spec, rows);
    let mut ll = log_likelihood(spec, rows, &beta);
    if !ll.is_finite() {
        // Zero start as a fallback; only reachable for intercept-free specs.
        beta = vec![0.0; p];
        ll = log_likelihood(spec, rows, &beta);
    }

    let mut consecutive_small = 0;
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;

    while iterations < spec.max_iter {
        iterations += 1;

        // Assemble the weighted normal equations at the current iterate.
        let mut a = vec![0.0; p * p];
        let mut b = vec![0.0; p];
        for (x, y, w) in rows {
            if *w == 0.0 {
                continue;
            }
            let eta = linear_predictor_raw(spec, &beta, x);
            let mu = clamp_mean(spec.family, spec.link.inverse(eta));
            let d = spec.link.mean_derivative(mu);
            let wt = w * d * d / variance(spec.family, mu);
            let z = eta + (y - mu) / d;
            // row of the design: (1, x)
            let mut xi = Vec::with_capacity(p);
            if spec.include_intercept {
                xi.push(1.0);
            }
            xi.extend_from_slice(x);
            for r in 0..p {
                b[r] += wt * xi[r] * z;
                for c in 0..=r {
                    a[r * p + c] += wt * xi[r] * xi[c];
                }
            }
        }
        for r in 0..p {
            for c in (r + 1)..p {
                a[r * p + c] = a[c * p + r];
            }
        }
        let solution = cholesky_solve(&mut a, &mut b, p)?;

        // Step-halving: accept the first candidate on the segment from the
        // current iterate to the solution that keeps the likelihood finite
        // and non-decreasing (up to rounding slack).
        let slack = 1e-10 * (1.0 + ll.abs());
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate: Vec<f64> = beta
                .iter()
                .zip(&solution)
                .map(|(old, new)| old + lambda * (new - old))
                .collect();
            let cand_ll = log_likelihood(spec, rows, &candidate);
            if cand_ll.is_finite() && cand_ll >= ll - slack {
                accepted = Some((candidate, cand_ll));
                break;
            }
            lambda *= 0.5;
        }
        let Some((next, next_ll)) = accepted else {
            return Err(classify_failure(spec, rows, beta, iterations));
        };

        last_change = beta
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        beta = next;
        ll = next_ll;

        if last_change <= spec.tol {
            consecutive_small += 1;
            if consecutive_small >= 2 {
                return Ok(FittedModel {
                    spec: spec.clone(),
                    coefficients: beta,
                    converged: true,
                    iterations,
                    n_obs: Some(n_obs),
                });
            }
        } else {
            consecutive_small = 0;
        }
    }

    if last_change <= spec.tol {
        // A single sub-tol step at the iteration cap still counts.
        return Ok(FittedModel {
            spec: spec.clone(),
            coefficients: beta,
            converged: true,
            iterations,
            n_obs: Some(n_obs),
        });
    }
    Err(classify_failure_with_change(spec, rows, beta, spec.max_iter, last_change))
}

fn classify_failure(
    spec: &ModelSpec,
    rows: &[(Vec<f64>, f64, f64)],
    last: Vec<f64>,
    iterations: usize,
) -> GlmError {
    classify_failure_with_change(spec, rows, last, iterations, f64::INFINITY)
}

fn classify_failure_with_change(
    spec: &ModelSpec,
    rows: &[(Vec<f64>, f64, f64)],
    last: Vec<f64>,
    iterations: usize,
    last_change: f64,
) -> GlmError {
    let boundary = rows.iter().filter(|(_, _, w)| *w > 0.0).any(|(x, _, _)| {
        let mu = spec.link.inverse(linear_predictor_raw(spec, &last, x));
        match spec.family {
            Family::Bernoulli => mu <= 1e-8 || mu >= 1.0 - 1e-8,
            Family::Poisson => mu <= 1e-8 || mu >= 1e12,
            Family::Gaussian => false,
        }
    });
    if boundary {
        GlmError::BoundaryNonConvergence { iterations, last }
    } else {
        GlmError::NonConvergence { iterations, last_change, last }
    }
}
