//! Observable-data representation: composite trial + target samples.
//!
//! A dataset holds rows of (X, optional W, S, A, Y) where S = 1 marks the
//! randomized trial sample and S = 0 the separately obtained target sample.
//! Additional covariates W are recorded in the target sample only. Ingestion
//! is from delimited text with a header row; cells must parse as finite
//! numbers and missing values are rejected.

use std::collections::BTreeMap;
use std::io::BufRead;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeKind {
    Binary,
    Count,
    Continuous,
}

impl OutcomeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Binary => "binary",
            OutcomeKind::Count => "count",
            OutcomeKind::Continuous => "continuous",
        }
    }

    pub fn parse(s: &str) -> Option<OutcomeKind> {
        match s {
            "binary" => Some(OutcomeKind::Binary),
            "count" => Some(OutcomeKind::Count),
            "continuous" => Some(OutcomeKind::Continuous),
            _ => None,
        }
    }
}

/// Which plug-in estimator a dataset is being prepared for. Determines the
/// structural checks in [`validate_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    Phi,
    Chi,
    Psi,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Phi => "phi",
            EstimatorKind::Chi => "chi",
            EstimatorKind::Psi => "psi",
        }
    }
}

/// One observation. `s` and `a` are 0/1 indicators; `w` is present only on
/// target rows of datasets that carry W columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub x: Vec<f64>,
    pub w: Option<Vec<f64>>,
    pub s: u8,
    pub a: u8,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisDataset {
    rows: Vec<ObservationRow>,
    x_names: Vec<String>,
    w_names: Vec<String>,
    outcome_kind: OutcomeKind,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("duplicate column binding '{0}'")]
    DuplicateColumn(String),
    #[error("row {row}: expected {expected} cells, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row}, column '{column}': cannot parse '{cell}' as a finite number")]
    BadCell { row: usize, column: String, cell: String },
    #[error("row {row}: {indicator} outside {{0,1}} (value {value})")]
    BadIndicator { row: usize, indicator: &'static str, value: f64 },
    #[error("row {row}: binary outcome with y = {value} not in {{0,1}}")]
    BadBinaryOutcome { row: usize, value: f64 },
    #[error("row {row}: count outcome with y = {value} not a nonnegative integer")]
    BadCountOutcome { row: usize, value: f64 },
    #[error("row {row}: trial rows may not carry W values")]
    TrialRowWithW { row: usize },
    #[error("row {row}: expected {expected} w values, found {found}")]
    WrongWDimension { row: usize, expected: usize, found: usize },
    #[error("row {row}: expected {expected} x values, found {found}")]
    WrongXDimension { row: usize, expected: usize, found: usize },
    #[error("row {row}: target row missing W values (dataset has {expected} w columns)")]
    MissingW { row: usize, expected: usize },
    #[error("empty {0} stratum: dataset needs at least one trial and one target row")]
    EmptyStratum(&'static str),
    #[error("covariate names must be distinct; '{0}' repeats")]
    DuplicateName(String),
    #[error("covariate name '{0}' collides with a reserved column name")]
    ReservedName(String),
    #[error("empty input: no data rows")]
    EmptyInput,
}

/// Column-name bindings for ingestion: which header names hold s/a/y and
/// which hold the X and W covariates.
#[derive(Debug, Clone)]
pub struct ColumnBindings {
    pub s_col: String,
    pub a_col: String,
    pub y_col: String,
    pub x_cols: Vec<String>,
    pub w_cols: Vec<String>,
}

impl AnalysisDataset {
    /// Construct a dataset, enforcing every structural invariant.
    pub fn new(
        rows: Vec<ObservationRow>,
        x_names: Vec<String>,
        w_names: Vec<String>,
        outcome_kind: OutcomeKind,
    ) -> Result<Self, DataError> {
        let mut seen = std::collections::HashSet::new();
        for name in x_names.iter().chain(w_names.iter()) {
            if !seen.insert(name.clone()) {
                return Err(DataError::DuplicateName(name.clone()));
            }
            if name == "(intercept)" {
                return Err(DataError::ReservedName(name.clone()));
            }
        }
        let ds = AnalysisDataset { rows, x_names, w_names, outcome_kind };
        ds.check_rows()?;
        Ok(ds)
    }

    /// Construct from rows already known to satisfy the invariants
    /// (bootstrap resampling of a valid dataset).
    pub(crate) fn from_rows_unchecked(
        rows: Vec<ObservationRow>,
        template: &AnalysisDataset,
    ) -> Self {
        AnalysisDataset {
            rows,
            x_names: template.x_names.clone(),
            w_names: template.w_names.clone(),
            outcome_kind: template.outcome_kind,
        }
    }

    fn check_rows(&self) -> Result<(), DataError> {
        if self.rows.is_empty() {
            return Err(DataError::EmptyInput);
        }
        let dim_x = self.x_names.len();
        let dim_w = self.w_names.len();
        for (i, row) in self.rows.iter().enumerate() {
            if row.s > 1 {
                return Err(DataError::BadIndicator { row: i, indicator: "s", value: row.s as f64 });
            }
            if row.a > 1 {
                return Err(DataError::BadIndicator { row: i, indicator: "a", value: row.a as f64 });
            }
            if row.x.len() != dim_x {
                return Err(DataError::WrongXDimension { row: i, expected: dim_x, found: row.x.len() });
            }
            if row.x.iter().any(|v| !v.is_finite()) || !row.y.is_finite() {
                return Err(DataError::BadCell {
                    row: i,
                    column: "<constructed>".to_string(),
                    cell: "non-finite".to_string(),
                });
            }
            match (&row.w, row.s) {
                (Some(_), 1) => return Err(DataError::TrialRowWithW { row: i }),
                (Some(w), 0) => {
                    if w.len() != dim_w || dim_w == 0 {
                        return Err(DataError::WrongWDimension { row: i, expected: dim_w, found: w.len() });
                    }
                    if w.iter().any(|v| !v.is_finite()) {
                        return Err(DataError::BadCell {
                            row: i,
                            column: "<constructed>".to_string(),
                            cell: "non-finite".to_string(),
                        });
                    }
                }
                (None, 0) if dim_w > 0 => {
                    return Err(DataError::MissingW { row: i, expected: dim_w });
                }
                _ => {}
            }
            match self.outcome_kind {
                OutcomeKind::Binary if row.y != 0.0 && row.y != 1.0 => {
                    return Err(DataError::BadBinaryOutcome { row: i, value: row.y });
                }
                OutcomeKind::Count if row.y < 0.0 || row.y.fract() != 0.0 => {
                    return Err(DataError::BadCountOutcome { row: i, value: row.y });
                }
                _ => {}
            }
        }
        if self.n1() == 0 {
            return Err(DataError::EmptyStratum("trial"));
        }
        if self.n0() == 0 {
            return Err(DataError::EmptyStratum("target"));
        }
        Ok(())
    }

    pub fn rows(&self) -> &[ObservationRow] {
        &self.rows
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn outcome_kind(&self) -> OutcomeKind {
        self.outcome_kind
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn n1(&self) -> usize {
        self.rows.iter().filter(|r| r.s == 1).count()
    }

    pub fn n0(&self) -> usize {
        self.rows.iter().filter(|r| r.s == 0).count()
    }

    pub fn trial_rows(&self) -> impl Iterator<Item = &ObservationRow> {
        self.rows.iter().filter(|r| r.s == 1)
    }

    pub fn target_rows(&self) -> impl Iterator<Item = &ObservationRow> {
        self.rows.iter().filter(|r| r.s == 0)
    }

    /// Resolve a covariate name to a per-row accessor: X index or W index.
    pub fn column_index(&self, name: &str) -> Option<ColumnRef> {
        if let Some(i) = self.x_names.iter().position(|n| n == name) {
            return Some(ColumnRef::X(i));
        }
        self.w_names.iter().position(|n| n == name).map(ColumnRef::W)
    }

    /// Serialize to the tabular text format understood by [`load_dataset`].
    /// Trial rows leave W cells empty.
    pub fn write_csv(&self) -> Result<String, DataError> {
        for name in self.x_names.iter().chain(self.w_names.iter()) {
            if name == "s" || name == "a" || name == "y" {
                return Err(DataError::ReservedName(name.clone()));
            }
        }
        let mut out = String::new();
        let mut header: Vec<&str> = self.x_names.iter().map(|s| s.as_str()).collect();
        header.extend(self.w_names.iter().map(|s| s.as_str()));
        header.extend(["s", "a", "y"]);
        out.push_str(&header.join(","));
        out.push('\n');
        for row in &self.rows {
            let mut cells: Vec<String> = row.x.iter().map(|v| format!("{}", v)).collect();
            match &row.w {
                Some(w) => cells.extend(w.iter().map(|v| format!("{}", v))),
                None => cells.extend(std::iter::repeat_with(String::new).take(self.w_names.len())),
            }
            cells.push(format!("{}", row.s));
            cells.push(format!("{}", row.a));
            cells.push(format!("{}", row.y));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

/// Where a covariate name resolves inside a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRef {
    X(usize),
    W(usize),
}

impl ColumnRef {
    pub fn value(self, row: &ObservationRow) -> Option<f64> {
        match self {
            ColumnRef::X(i) => row.x.get(i).copied(),
            ColumnRef::W(i) => row.w.as_ref().and_then(|w| w.get(i).copied()),
        }
    }
}

fn parse_cell(cell: &str, row: usize, column: &str) -> Result<f64, DataError> {
    let trimmed = cell.trim();
    let v: f64 = trimmed.parse().map_err(|_| DataError::BadCell {
        row,
        column: column.to_string(),
        cell: cell.to_string(),
    })?;
    if !v.is_finite() {
        return Err(DataError::BadCell { row, column: column.to_string(), cell: cell.to_string() });
    }
    Ok(v)
}

fn parse_indicator(cell: &str, row: usize, column: &str, what: &'static str) -> Result<u8, DataError> {
    let v = parse_cell(cell, row, column)?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(DataError::BadIndicator { row, indicator: what, value: v })
    }
}

/// Load a dataset from delimited text (comma separator, header row, '.'
/// decimal separator). Row order is preserved. W cells on trial rows are
/// ignored; W cells on target rows must parse.
pub fn load_dataset(
    source: impl BufRead,
    schema: &ColumnBindings,
    outcome_kind: OutcomeKind,
) -> Result<AnalysisDataset, DataError> {
    let mut lines = source.lines();
    let header_line = lines.next().ok_or(DataError::EmptyInput)??;
    let header: Vec<String> = header_line.split(',').map(|h| h.trim().to_string()).collect();

    let find = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };

    let mut bound = std::collections::HashSet::new();
    for name in [&schema.s_col, &schema.a_col, &schema.y_col]
        .into_iter()
        .chain(schema.x_cols.iter())
        .chain(schema.w_cols.iter())
    {
        if !bound.insert(name.as_str()) {
            return Err(DataError::DuplicateColumn(name.clone()));
        }
    }

    let s_idx = find(&schema.s_col)?;
    let a_idx = find(&schema.a_col)?;
    let y_idx = find(&schema.y_col)?;
    let x_idx: Vec<usize> = schema.x_cols.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
    let w_idx: Vec<usize> = schema.w_cols.iter().map(|c| find(c)).collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row_idx = lineno + 1; // 0 is the header
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(DataError::RaggedRow { row: row_idx, expected: header.len(), found: cells.len() });
        }
        let s = parse_indicator(cells[s_idx], row_idx, &schema.s_col, "s")?;
        let a = parse_indicator(cells[a_idx], row_idx, &schema.a_col, "a")?;
        let y = parse_cell(cells[y_idx], row_idx, &schema.y_col)?;
        match outcome_kind {
            OutcomeKind::Binary if y != 0.0 && y != 1.0 => {
                return Err(DataError::BadBinaryOutcome { row: row_idx, value: y });
            }
            OutcomeKind::Count if y < 0.0 || y.fract() != 0.0 => {
                return Err(DataError::BadCountOutcome { row: row_idx, value: y });
            }
            _ => {}
        }
        let x = x_idx
            .iter()
            .zip(&schema.x_cols)
            .map(|(&i, name)| parse_cell(cells[i], row_idx, name))
            .collect::<Result<Vec<_>, _>>()?;
        // Trial rows drop any W columns: the trial records X only.
        let w = if s == 0 && !w_idx.is_empty() {
            Some(
                w_idx
                    .iter()
                    .zip(&schema.w_cols)
                    .map(|(&i, name)| parse_cell(cells[i], row_idx, name))
                    .collect::<Result<Vec<_>, _>>()?,
            )
        } else {
            None
        };
        rows.push(ObservationRow { x, w, s, a, y });
    }

    AnalysisDataset::new(rows, schema.x_cols.clone(), schema.w_cols.clone(), outcome_kind)
}

/// One structured violation found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub code: &'static str,
    pub message: String,
    pub rows: Vec<usize>,
}

/// Per-(s, a) cell counts and outcome moments.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub s: u8,
    pub a: u8,
    pub count: usize,
    pub y_mean: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub errors: Vec<Violation>,
    pub warnings: Vec<Violation>,
    pub summary: Vec<CellSummary>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Check estimator-specific structural conditions on an already well-formed
/// dataset. phi requires uniform control treatment in the target (condition
/// A5); chi and psi require a nonempty target control stratum (the positivity
/// conditions B2 / C2 presume one exists).
pub fn validate_dataset(ds: &AnalysisDataset, intended: EstimatorKind) -> ValidationReport {
    let mut report = ValidationReport::default();

    let treated_target: Vec<usize> = ds
        .rows()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.s == 0 && r.a == 1)
        .map(|(i, _)| i)
        .collect();
    let target_controls = ds.rows().iter().filter(|r| r.s == 0 && r.a == 0).count();

    match intended {
        EstimatorKind::Phi => {
            if !treated_target.is_empty() {
                report.errors.push(Violation {
                    code: "A5_VIOLATED",
                    message: format!(
                        "condition A5 (uniform use of the control treatment in the target population) \
                         fails: {} target row(s) with a = 1",
                        treated_target.len()
                    ),
                    rows: treated_target.clone(),
                });
            }
        }
        EstimatorKind::Chi => {
            if target_controls == 0 {
                report.errors.push(Violation {
                    code: "B2_EMPTY_CONTROL",
                    message: "condition B2 (positivity of control treatment in the target population) \
                              fails: no target rows with a = 0"
                        .to_string(),
                    rows: vec![],
                });
            }
        }
        EstimatorKind::Psi => {
            if target_controls == 0 {
                report.errors.push(Violation {
                    code: "C2_EMPTY_CONTROL",
                    message: "condition C2 (positivity of control treatment in the target population) \
                              fails: no target rows with a = 0"
                        .to_string(),
                    rows: vec![],
                });
            }
        }
    }

    if intended != EstimatorKind::Phi && treated_target.is_empty() {
        report.warnings.push(Violation {
            code: "NO_TREATED_TARGET",
            message: "no treated rows in the target sample; the phi estimator (condition A5) also applies"
                .to_string(),
            rows: vec![],
        });
    }

    // Cell summaries, keyed (s, a) in a fixed order.
    let mut cells: BTreeMap<(u8, u8), (usize, f64, f64, f64)> = BTreeMap::new();
    for row in ds.rows() {
        let entry = cells.entry((row.s, row.a)).or_insert((0, 0.0, f64::INFINITY, f64::NEG_INFINITY));
        entry.0 += 1;
        entry.1 += row.y;
        entry.2 = entry.2.min(row.y);
        entry.3 = entry.3.max(row.y);
    }
    for ((s, a), (count, sum, min, max)) in cells {
        if min == max && count > 1 {
            report.warnings.push(Violation {
                code: "DEGENERATE_CELL",
                message: format!("all outcomes equal ({}) in the (s={}, a={}) cell", min, s, a),
                rows: vec![],
            });
        }
        report.summary.push(CellSummary { s, a, count, y_mean: sum / count as f64, y_min: min, y_max: max });
    }

    report
}
