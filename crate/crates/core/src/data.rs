//! Datasets, CSV ingestion and feature expansion.
//!
//! A [`Dataset`] holds covariates `x` (n x d), a binary treatment vector and
//! an optional outcome. Fitters never see a `Dataset` directly; they work on a
//! design matrix produced by [`expand`] under a [`FeatureMap`].

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub t: Vec<bool>,
    pub y: Option<Vec<f64>>,
    pub names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with default column names `x1..xd`.
    pub fn new(x: DMatrix<f64>, t: Vec<bool>, y: Option<Vec<f64>>) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, t, y, names)
    }

    pub fn with_names(
        x: DMatrix<f64>,
        t: Vec<bool>,
        y: Option<Vec<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 rows, got {n}")));
        }
        if t.len() != n {
            return Err(Error::InvalidInput(format!(
                "treatment length {} does not match {n} rows",
                t.len()
            )));
        }
        if names.len() != x.ncols() {
            return Err(Error::InvalidInput("column name count mismatch".into()));
        }
        if let Some((idx, _)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Cell {
                row: idx % n + 1,
                column: names[idx / n].clone(),
                message: "non-finite covariate".into(),
            });
        }
        if let Some(y) = &y {
            if y.len() != n {
                return Err(Error::InvalidInput("outcome length mismatch".into()));
            }
            if let Some(i) = y.iter().position(|v| !v.is_finite()) {
                return Err(Error::Cell {
                    row: i + 1,
                    column: "outcome".into(),
                    message: "non-finite outcome".into(),
                });
            }
        }
        Ok(Self { x, t, y, names })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t).count()
    }

    /// Fitting requires both groups to be non-empty.
    pub fn check_groups(&self) -> Result<()> {
        check_groups(&self.t)
    }

    pub fn outcome(&self) -> Result<&[f64]> {
        self.y
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("dataset has no outcome column".into()))
    }

    /// The rows listed in `rows`, in that order.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.n()) {
            return Err(Error::InvalidInput(format!("row {bad} out of range")));
        }
        Self::with_names(
            self.x.select_rows(rows.iter()),
            rows.iter().map(|&i| self.t[i]).collect(),
            self.y.as_ref().map(|y| rows.iter().map(|&i| y[i]).collect()),
            self.names.clone(),
        )
    }

    /// Writes the dataset as CSV: covariates, then `t`, then `y` if present.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = self.names.clone();
        header.push("t".into());
        if self.y.is_some() {
            header.push("y".into());
        }
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(if self.t[i] { "1" } else { "0" }.into());
            if let Some(y) = &self.y {
                rec.push(format!("{:?}", y[i]));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn check_groups(t: &[bool]) -> Result<()> {
    let n1 = t.iter().filter(|&&v| v).count();
    if n1 == 0 || n1 == t.len() {
        return Err(Error::InvalidInput(
            "both treatment groups must be non-empty".into(),
        ));
    }
    Ok(())
}

/// Reads a comma-separated file with a header row.
///
/// Every column other than the treatment and outcome columns becomes a
/// covariate, in file order. Row numbers in errors count data rows from 1.
pub fn load_csv(
    path: impl AsRef<Path>,
    treatment_col: &str,
    outcome_col: Option<&str>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let t_idx = headers
        .iter()
        .position(|h| h == treatment_col)
        .ok_or_else(|| Error::MissingColumn(treatment_col.to_string()))?;
    let y_idx = match outcome_col {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?,
        ),
        None => None,
    };
    let x_cols: Vec<usize> = (0..headers.len())
        .filter(|&j| j != t_idx && Some(j) != y_idx)
        .collect();

    let mut t = Vec::new();
    let mut y = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 1;
        let rec = rec?;
        let cell = |j: usize| -> Result<f64> {
            let raw = rec.get(j).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Cell {
                row,
                column: headers[j].clone(),
                message: format!("cannot parse `{raw}` as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Cell {
                    row,
                    column: headers[j].clone(),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        let tv = cell(t_idx)?;
        t.push(if tv == 1.0 {
            true
        } else if tv == 0.0 {
            false
        } else {
            return Err(Error::Cell {
                row,
                column: treatment_col.to_string(),
                message: format!("treatment must be 0 or 1, got {tv}"),
            });
        });
        if let Some(j) = y_idx {
            y.push(cell(j)?);
        }
        for &j in &x_cols {
            rows.push(cell(j)?);
        }
    }
    let n = t.len();
    let x = DMatrix::from_row_slice(n, x_cols.len(), &rows);
    let names = x_cols.iter().map(|&j| headers[j].clone()).collect();
    Dataset::with_names(x, t, y_idx.map(|_| y), names)
}

/// How covariates are turned into regressors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Raw,
    RawIntercept,
    /// All monomials of total degree 1..=degree, optionally with intercept.
    Polynomial { degree: usize, intercept: bool },
    /// Intercept plus monomials of total degree 1..=degree, each non-intercept
    /// column centered and scaled to unit sample standard deviation.
    Standardized { degree: usize },
}

impl FeatureMap {
    pub fn has_intercept(&self) -> bool {
        match self {
            FeatureMap::Raw => false,
            FeatureMap::RawIntercept | FeatureMap::Standardized { .. } => true,
            FeatureMap::Polynomial { intercept, .. } => *intercept,
        }
    }

    fn degree(&self) -> usize {
        match self {
            FeatureMap::Raw | FeatureMap::RawIntercept => 1,
            FeatureMap::Polynomial { degree, .. } | FeatureMap::Standardized { degree } => *degree,
        }
    }
}

/// A design matrix with its column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
    pub intercept: bool,
}

impl Design {
    /// Wraps a raw matrix; intercept detection looks for a column of ones in
    /// position 0.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let intercept = matrix.ncols() > 0 && matrix.column(0).iter().all(|&v| v == 1.0);
        let names = (0..matrix.ncols())
            .map(|j| {
                if intercept && j == 0 {
                    "(intercept)".to_string()
                } else {
                    format!("c{j}")
                }
            })
            .collect();
        Self {
            matrix,
            names,
            intercept,
        }
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Sub-design with the given columns, in the given order.
    pub fn select(&self, cols: &[usize]) -> Design {
        let matrix = self.matrix.select_columns(cols.iter());
        let names = cols.iter().map(|&j| self.names[j].clone()).collect();
        let intercept = cols.first() == Some(&0) && self.intercept;
        Design {
            matrix,
            names,
            intercept,
        }
    }
}

/// Exponent vectors of all monomials in `d` variables with total degree
/// 1..=q, ordered by total degree, then lexicographically descending in the
/// exponents (so `x1^2` precedes `x1*x2` precedes `x2^2`).
pub fn monomial_exponents(d: usize, q: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, remaining: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == d - 1 {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for e in (0..=remaining).rev() {
            prefix.push(e);
            rec(d, remaining - e, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if d == 0 {
        return out;
    }
    for total in 1..=q {
        rec(d, total, &mut Vec::with_capacity(d), &mut out);
    }
    out
}

fn monomial_name(names: &[String], exps: &[usize]) -> String {
    let parts: Vec<String> = exps
        .iter()
        .zip(names)
        .filter(|(&e, _)| e > 0)
        .map(|(&e, n)| if e == 1 { n.clone() } else { format!("{n}^{e}") })
        .collect();
    parts.join("*")
}

/// Expands covariates into a design matrix.
pub fn expand(ds: &Dataset, fm: FeatureMap) -> Result<Design> {
    let q = fm.degree();
    if q == 0 {
        return Err(Error::InvalidInput("polynomial degree must be >= 1".into()));
    }
    let n = ds.n();
    let exps = monomial_exponents(ds.d(), q);
    let offset = usize::from(fm.has_intercept());
    let m = exps.len() + offset;
    let mut matrix = DMatrix::zeros(n, m);
    let mut names = Vec::with_capacity(m);
    if fm.has_intercept() {
        matrix.column_mut(0).fill(1.0);
        names.push("(intercept)".to_string());
    }
    for (k, e) in exps.iter().enumerate() {
        let mut col = matrix.column_mut(k + offset);
        for i in 0..n {
            let mut v = 1.0;
            for (j, &p) in e.iter().enumerate() {
                if p > 0 {
                    v *= ds.x[(i, j)].powi(p as i32);
                }
            }
            col[i] = v;
        }
        names.push(monomial_name(&ds.names, e));
    }
    if let FeatureMap::Standardized { .. } = fm {
        standardize_columns(&mut matrix, offset, &names)?;
    }
    Ok(Design {
        matrix,
        names,
        intercept: fm.has_intercept(),
    })
}

/// Centers and scales columns `from..` to mean 0 and sample SD 1.
pub fn standardize_columns(matrix: &mut DMatrix<f64>, from: usize, names: &[String]) -> Result<()> {
    let n = matrix.nrows() as f64;
    for j in from..matrix.ncols() {
        let mut col = matrix.column_mut(j);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::Degenerate(names[j].clone()));
        }
        col.apply(|v| *v = (*v - mean) / sd);
    }
    Ok(())
}
