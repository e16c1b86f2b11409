//! Dataset representation and validation.
//!
//! A unit is a row; row order is the identity of a unit everywhere in this
//! crate. The outcome is stored as `Option<f64>` so that a nonresponder's
//! outcome can never leak into a sum by accident.

use std::io::Read;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

/// Observed outcomes with fewer distinct values than this produce a warning;
/// two or fewer are rejected outright (kernel smoothing over `y` needs
/// continuous support).
const DISTINCT_Y_WARN: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("column `{0}` not found in table")]
    MissingColumn(String),
    #[error("delta column has non-binary entry {value} in row {row}")]
    DeltaNotBinary { row: usize, value: f64 },
    #[error("row {0} has delta=1 but no outcome value")]
    ObservedYMissing(usize),
    #[error("row {0} has delta=0 but carries an outcome value")]
    NonresponderYPresent(usize),
    #[error("observed outcome takes {0} distinct value(s); a continuous outcome is required")]
    DiscreteOutcome(usize),
    #[error("covariate `{column}` is blank or non-finite in row {row}")]
    BadCovariate { row: usize, column: String },
    #[error("value {value} in column `{column}`, row {row} must be strictly positive")]
    NonPositiveValue { row: usize, column: String, value: f64 },
    #[error("column roles invalid: {0}")]
    BadRoles(String),
    #[error("csv parse error: {0}")]
    Csv(String),
}

/// Declares which columns of a raw table play which role in the response
/// model. `x1` columns enter the response model linearly; `x2` columns are
/// the response instrument and are excluded from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRoles {
    pub x1_columns: Vec<String>,
    pub x2_columns: Vec<String>,
    pub y_column: String,
    pub delta_column: String,
}

impl ColumnRoles {
    pub fn new(
        x1_columns: Vec<String>,
        x2_columns: Vec<String>,
        y_column: impl Into<String>,
        delta_column: impl Into<String>,
    ) -> Result<Self, DataError> {
        let roles = ColumnRoles {
            x1_columns,
            x2_columns,
            y_column: y_column.into(),
            delta_column: delta_column.into(),
        };
        roles.check()?;
        Ok(roles)
    }

    fn check(&self) -> Result<(), DataError> {
        if self.x1_columns.is_empty() && self.x2_columns.is_empty() {
            return Err(DataError::BadRoles(
                "x1 and x2 column sets are both empty".into(),
            ));
        }
        for c in &self.x1_columns {
            if self.x2_columns.contains(c) {
                return Err(DataError::BadRoles(format!(
                    "column `{c}` declared as both x1 and x2"
                )));
            }
        }
        let covs = self.x1_columns.iter().chain(self.x2_columns.iter());
        for c in covs {
            if *c == self.y_column || *c == self.delta_column {
                return Err(DataError::BadRoles(format!(
                    "column `{c}` also declared as outcome or response indicator"
                )));
            }
        }
        if self.y_column == self.delta_column {
            return Err(DataError::BadRoles(
                "outcome and response indicator share a column".into(),
            ));
        }
        Ok(())
    }
}

/// A column-named table of reals with blanks, as read from CSV. Blank cells
/// are only legal in the outcome column.
#[derive(Debug, Clone)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl RawTable {
    /// Read a comma-separated table with a mandatory header row. A blank
    /// cell denotes a missing value.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let columns: Vec<String> = rdr
            .headers()
            .map_err(|e| DataError::Csv(e.to_string()))?
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
            let mut row = Vec::with_capacity(columns.len());
            for field in rec.iter() {
                if field.is_empty() {
                    row.push(None);
                } else {
                    let v: f64 = field
                        .parse()
                        .map_err(|_| DataError::Csv(format!("row {}: bad number `{field}`", i + 1)))?;
                    row.push(Some(v));
                }
            }
            if row.len() != columns.len() {
                return Err(DataError::Csv(format!(
                    "row {} has {} fields, expected {}",
                    i + 1,
                    row.len(),
                    columns.len()
                )));
            }
            rows.push(row);
        }
        Ok(RawTable { columns, rows })
    }

    pub fn from_csv_path(path: &std::path::Path) -> Result<Self, DataError> {
        let f = std::fs::File::open(path).map_err(|e| DataError::Csv(e.to_string()))?;
        Self::from_csv_reader(f)
    }

    fn column_index(&self, name: &str) -> Result<usize, DataError> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    }
}

/// A validated dataset. Immutable after construction; safe to share across
/// parallel workers.
#[derive(Debug, Clone)]
pub struct Dataset {
    x1: DMatrix<f64>,
    x2: DMatrix<f64>,
    y: Vec<Option<f64>>,
    delta: Vec<bool>,
    roles: ColumnRoles,
    warnings: Vec<String>,
}

impl Dataset {
    /// Build a dataset from already-separated parts, enforcing the same
    /// invariants as [`validate_dataset`]. Used by the simulation generators.
    pub fn from_parts(
        x1: DMatrix<f64>,
        x2: DMatrix<f64>,
        y: Vec<Option<f64>>,
        delta: Vec<bool>,
        roles: ColumnRoles,
    ) -> Result<Self, DataError> {
        roles.check()?;
        let n = delta.len();
        assert_eq!(y.len(), n, "y/delta length mismatch");
        assert_eq!(x1.nrows(), n, "x1/delta length mismatch");
        assert_eq!(x2.nrows(), n, "x2/delta length mismatch");
        let mut warnings = Vec::new();
        for i in 0..n {
            match (delta[i], y[i]) {
                (true, None) => return Err(DataError::ObservedYMissing(i)),
                (true, Some(v)) if !v.is_finite() => return Err(DataError::ObservedYMissing(i)),
                (false, Some(_)) => return Err(DataError::NonresponderYPresent(i)),
                _ => {}
            }
        }
        for (mat, names) in [(&x1, &roles.x1_columns), (&x2, &roles.x2_columns)] {
            for j in 0..mat.ncols() {
                for i in 0..n {
                    if !mat[(i, j)].is_finite() {
                        return Err(DataError::BadCovariate {
                            row: i,
                            column: names.get(j).cloned().unwrap_or_else(|| format!("#{j}")),
                        });
                    }
                }
            }
        }
        let mut observed: Vec<f64> = y.iter().flatten().copied().collect();
        if !observed.is_empty() {
            observed.sort_by(|a, b| a.partial_cmp(b).unwrap());
            observed.dedup();
            if observed.len() <= 2 {
                return Err(DataError::DiscreteOutcome(observed.len()));
            }
            if observed.len() < DISTINCT_Y_WARN {
                warnings.push(format!(
                    "observed outcome has only {} distinct values; kernel smoothing may be unreliable",
                    observed.len()
                ));
            }
        }
        if roles.x2_columns.is_empty() {
            warnings.push(
                "no instrument (x2) columns declared; identification of the response model \
                 relies on the instrument"
                    .into(),
            );
        }
        Ok(Dataset {
            x1,
            x2,
            y,
            delta,
            roles,
            warnings,
        })
    }

    pub fn n(&self) -> usize {
        self.delta.len()
    }

    /// Number of x1 (response-model) covariates.
    pub fn p(&self) -> usize {
        self.x1.ncols()
    }

    /// Number of instrument covariates.
    pub fn q(&self) -> usize {
        self.x2.ncols()
    }

    pub fn x1(&self) -> &DMatrix<f64> {
        &self.x1
    }

    pub fn x2(&self) -> &DMatrix<f64> {
        &self.x2
    }

    pub fn x1_row(&self, i: usize) -> Vec<f64> {
        (0..self.x1.ncols()).map(|j| self.x1[(i, j)]).collect()
    }

    pub fn delta(&self, i: usize) -> bool {
        self.delta[i]
    }

    /// Observed outcome for row `i`; `None` for nonresponders.
    pub fn y(&self, i: usize) -> Option<f64> {
        self.y[i]
    }

    /// Outcome of a responder row. Panics on nonresponders; use only with
    /// indices from the responder partition.
    pub fn y_observed(&self, i: usize) -> f64 {
        self.y[i].expect("row is a nonresponder")
    }

    pub fn roles(&self) -> &ColumnRoles {
        &self.roles
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn n_responders(&self) -> usize {
        self.delta.iter().filter(|d| **d).count()
    }

    /// Reassemble the column-named table this dataset validates back to.
    pub fn to_raw_table(&self) -> RawTable {
        let mut columns = self.roles.x1_columns.clone();
        columns.extend(self.roles.x2_columns.iter().cloned());
        columns.push(self.roles.y_column.clone());
        columns.push(self.roles.delta_column.clone());
        let rows = (0..self.n())
            .map(|i| {
                let mut row: Vec<Option<f64>> =
                    (0..self.p()).map(|j| Some(self.x1[(i, j)])).collect();
                row.extend((0..self.q()).map(|j| Some(self.x2[(i, j)])));
                row.push(self.y[i]);
                row.push(Some(if self.delta[i] { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        RawTable { columns, rows }
    }
}

/// Check a raw table against the declared roles and produce a [`Dataset`].
/// Row order is preserved.
pub fn validate_dataset(raw: &RawTable, roles: &ColumnRoles) -> Result<Dataset, DataError> {
    roles.check()?;
    let n = raw.rows.len();
    let x1_idx: Vec<usize> = roles
        .x1_columns
        .iter()
        .map(|c| raw.column_index(c))
        .collect::<Result<_, _>>()?;
    let x2_idx: Vec<usize> = roles
        .x2_columns
        .iter()
        .map(|c| raw.column_index(c))
        .collect::<Result<_, _>>()?;
    let y_idx = raw.column_index(&roles.y_column)?;
    let d_idx = raw.column_index(&roles.delta_column)?;

    let mut delta = Vec::with_capacity(n);
    for (i, row) in raw.rows.iter().enumerate() {
        let v = row[d_idx].unwrap_or(f64::NAN);
        if v == 0.0 {
            delta.push(false);
        } else if v == 1.0 {
            delta.push(true);
        } else {
            return Err(DataError::DeltaNotBinary { row: i, value: v });
        }
    }
    let fetch = |idx: &[usize], names: &[String]| -> Result<DMatrix<f64>, DataError> {
        let mut m = DMatrix::zeros(n, idx.len());
        for (j, &c) in idx.iter().enumerate() {
            for (i, row) in raw.rows.iter().enumerate() {
                m[(i, j)] = row[c].ok_or_else(|| DataError::BadCovariate {
                    row: i,
                    column: names[j].clone(),
                })?;
            }
        }
        Ok(m)
    };
    let x1 = fetch(&x1_idx, &roles.x1_columns)?;
    let x2 = fetch(&x2_idx, &roles.x2_columns)?;
    let y: Vec<Option<f64>> = raw.rows.iter().map(|r| r[y_idx]).collect();
    Dataset::from_parts(x1, x2, y, delta, roles.clone())
}

/// Partition `0..n` into responder and nonresponder index lists, preserving
/// row order.
pub fn split_responders(d: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let mut resp = Vec::new();
    let mut nonresp = Vec::new();
    for i in 0..d.n() {
        if d.delta(i) {
            resp.push(i);
        } else {
            nonresp.push(i);
        }
    }
    (resp, nonresp)
}

/// Replace every covariate entry and observed outcome by `log(value)/2`,
/// the variance-stabilising transform used for skewed income-type data.
pub fn log_half_transform(d: &Dataset) -> Result<Dataset, DataError> {
    let check = |v: f64, row: usize, column: &str| -> Result<f64, DataError> {
        if v <= 0.0 {
            Err(DataError::NonPositiveValue {
                row,
                column: column.to_string(),
                value: v,
            })
        } else {
            Ok(v.ln() / 2.0)
        }
    };
    let mut x1 = d.x1.clone();
    for j in 0..d.p() {
        for i in 0..d.n() {
            x1[(i, j)] = check(x1[(i, j)], i, &d.roles.x1_columns[j])?;
        }
    }
    let mut x2 = d.x2.clone();
    for j in 0..d.q() {
        for i in 0..d.n() {
            x2[(i, j)] = check(x2[(i, j)], i, &d.roles.x2_columns[j])?;
        }
    }
    let mut y = Vec::with_capacity(d.n());
    for i in 0..d.n() {
        y.push(match d.y[i] {
            Some(v) => Some(check(v, i, &d.roles.y_column)?),
            None => None,
        });
    }
    Dataset::from_parts(x1, x2, y, d.delta.clone(), d.roles.clone())
}

/// The estimating function `U(theta; x, y)` whose population zero defines
/// the target parameter. The builtin mean uses `U = y - theta`.
#[derive(Clone)]
pub enum Estimand {
    Mean,
    Custom {
        name: String,
        f: Arc<dyn Fn(f64, &[f64], &[f64], f64) -> f64 + Send + Sync>,
    },
}

impl Estimand {
    pub fn u(&self, theta: f64, x1: &[f64], x2: &[f64], y: f64) -> f64 {
        match self {
            Estimand::Mean => y - theta,
            Estimand::Custom { f, .. } => f(theta, x1, x2, y),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Estimand::Mean => "mean",
            Estimand::Custom { name, .. } => name,
        }
    }
}

impl std::fmt::Debug for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Estimand({})", self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(cols: &[&str], rows: &[&[Option<f64>]]) -> RawTable {
        RawTable {
            columns: cols.iter().map(|s| s.to_string()).collect(),
            rows: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    fn roles() -> ColumnRoles {
        ColumnRoles::new(vec!["x1".into()], vec!["x2".into()], "y", "delta").unwrap()
    }

    #[test]
    fn basic_validation_splits_responders() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[
                &[Some(1.0), Some(2.0), Some(0.1), Some(1.0)],
                &[Some(1.5), Some(2.5), Some(0.2), Some(1.0)],
                &[Some(0.5), Some(1.5), None, Some(0.0)],
                &[Some(0.7), Some(1.7), Some(0.3), Some(1.0)],
            ],
        );
        let d = validate_dataset(&t, &roles()).unwrap();
        assert_eq!(d.n(), 4);
        let (resp, nonresp) = split_responders(&d);
        assert_eq!(resp, vec![0, 1, 3]);
        assert_eq!(nonresp, vec![2]);
    }

    #[test]
    fn observed_y_missing_rejected() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[
                &[Some(1.0), Some(2.0), None, Some(1.0)],
                &[Some(1.5), Some(2.5), None, Some(0.0)],
            ],
        );
        match validate_dataset(&t, &roles()) {
            Err(DataError::ObservedYMissing(0)) => {}
            other => panic!("expected ObservedYMissing, got {other:?}"),
        }
    }

    #[test]
    fn binary_outcome_rejected() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[
                &[Some(1.0), Some(2.0), Some(0.0), Some(1.0)],
                &[Some(1.5), Some(2.5), Some(1.0), Some(1.0)],
                &[Some(1.2), Some(2.2), Some(0.0), Some(1.0)],
                &[Some(1.3), Some(2.3), Some(1.0), Some(1.0)],
            ],
        );
        match validate_dataset(&t, &roles()) {
            Err(DataError::DiscreteOutcome(2)) => {}
            other => panic!("expected DiscreteOutcome(2), got {other:?}"),
        }
    }

    #[test]
    fn delta_not_binary_rejected() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[&[Some(1.0), Some(2.0), Some(0.1), Some(2.0)]],
        );
        assert!(matches!(
            validate_dataset(&t, &roles()),
            Err(DataError::DeltaNotBinary { row: 0, value }) if value == 2.0
        ));
    }

    #[test]
    fn missing_column_rejected() {
        let t = table(&["x1", "y", "delta"], &[]);
        assert!(matches!(
            validate_dataset(&t, &roles()),
            Err(DataError::MissingColumn(c)) if c == "x2"
        ));
    }

    #[test]
    fn validation_is_idempotent() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[
                &[Some(1.0), Some(2.0), Some(0.1), Some(1.0)],
                &[Some(1.5), Some(2.5), Some(0.7), Some(1.0)],
                &[Some(0.5), Some(1.5), None, Some(0.0)],
                &[Some(0.7), Some(1.7), Some(0.3), Some(1.0)],
            ],
        );
        let d1 = validate_dataset(&t, &roles()).unwrap();
        let d2 = validate_dataset(&d1.to_raw_table(), &roles()).unwrap();
        assert_eq!(d1.x1, d2.x1);
        assert_eq!(d1.x2, d2.x2);
        assert_eq!(d1.y, d2.y);
        assert_eq!(d1.delta, d2.delta);
    }

    #[test]
    fn log_half_transform_values() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[
                &[Some(1.0), Some(1.0), Some((2.0f64).exp().powi(1)), Some(1.0)],
                &[Some(2.0), Some(3.0), Some(1.5), Some(1.0)],
                &[Some(4.0), Some(5.0), Some(2.5), Some(1.0)],
                &[Some(1.0), Some(1.0), None, Some(0.0)],
            ],
        );
        let d = log_half_transform(&validate_dataset(&t, &roles()).unwrap()).unwrap();
        // log(e^2)/2 = 1, log(1)/2 = 0
        assert!((d.y_observed(0) - 1.0).abs() < 1e-15);
        assert_eq!(d.x1()[(0, 0)], 0.0);
    }

    #[test]
    fn log_half_transform_rejects_nonpositive() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[
                &[Some(0.0), Some(1.0), Some(1.0), Some(1.0)],
                &[Some(2.0), Some(3.0), Some(1.5), Some(1.0)],
                &[Some(4.0), Some(5.0), Some(2.5), Some(1.0)],
            ],
        );
        assert!(matches!(
            log_half_transform(&validate_dataset(&t, &roles()).unwrap()),
            Err(DataError::NonPositiveValue { row: 0, .. })
        ));
    }

    #[test]
    fn log_half_transform_roundtrip() {
        let t = table(
            &["x1", "x2", "y", "delta"],
            &[
                &[Some(1.7), Some(0.4), Some(3.3), Some(1.0)],
                &[Some(2.9), Some(1.1), Some(0.02), Some(1.0)],
                &[Some(0.3), Some(9.6), Some(7.5), Some(1.0)],
                &[Some(5.5), Some(2.2), None, Some(0.0)],
            ],
        );
        let d = validate_dataset(&t, &roles()).unwrap();
        let back = log_half_transform(&d).unwrap();
        for i in 0..d.n() {
            for j in 0..d.p() {
                let orig = d.x1()[(i, j)];
                let rec = (2.0 * back.x1()[(i, j)]).exp();
                assert!((rec - orig).abs() <= 1e-12 * orig.abs());
            }
            if let (Some(orig), Some(tr)) = (d.y(i), back.y(i)) {
                assert!(((2.0 * tr).exp() - orig).abs() <= 1e-12 * orig.abs());
            }
        }
    }

    #[test]
    fn empty_instrument_flagged_not_rejected() {
        let r = ColumnRoles::new(vec!["x1".into()], vec![], "y", "delta").unwrap();
        let t = table(
            &["x1", "y", "delta"],
            &[
                &[Some(1.0), Some(0.1), Some(1.0)],
                &[Some(1.5), Some(0.2), Some(1.0)],
                &[Some(1.2), Some(0.4), Some(1.0)],
            ],
        );
        let d = validate_dataset(&t, &r).unwrap();
        assert!(d.warnings().iter().any(|w| w.contains("instrument")));
    }

    #[test]
    fn roles_reject_overlap() {
        assert!(ColumnRoles::new(vec!["a".into()], vec!["a".into()], "y", "d").is_err());
        assert!(ColumnRoles::new(vec!["y".into()], vec![], "y", "d").is_err());
        assert!(ColumnRoles::new(vec![], vec![], "y", "d").is_err());
    }
}
