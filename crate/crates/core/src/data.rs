//! Dataset representation, CSV ingestion, rule terms and rule support.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kind of a covariate column. A column is binary iff every observed value is
/// 0 or 1; everything else is treated as continuous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColKind {
    Continuous,
    Binary,
}

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Schema {
    /// Name of the outcome column.
    pub outcome: String,
    /// Name of the treatment-arm column.
    pub arm: String,
    /// Covariate column names, in order. `None` means every remaining column
    /// in header order.
    pub covariates: Option<Vec<String>>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema { outcome: "y".into(), arm: "w".into(), covariates: None }
    }
}

/// Immutable multi-arm dataset: outcome, arm index in {0..T} (0 = control)
/// and an n x p covariate matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    w: Vec<usize>,
    x: Vec<f64>, // row-major, n * p
    p: usize,
    t_max: usize,
    col_kinds: Vec<ColKind>,
    col_names: Vec<String>,
}

impl Dataset {
    /// Build a dataset from raw parts, validating all invariants.
    /// Column kinds are inferred from the observed values.
    pub fn from_parts(
        y: Vec<f64>,
        w: Vec<usize>,
        x: Vec<f64>,
        p: usize,
        col_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        if p == 0 {
            return Err(Error::Data("dataset has no covariates".into()));
        }
        if w.len() != n || x.len() != n * p || col_names.len() != p {
            return Err(Error::Data("inconsistent dataset dimensions".into()));
        }
        for (i, v) in y.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite outcome in row {}", i + 1)));
            }
        }
        for (i, v) in x.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite covariate value in row {}, column '{}'",
                    i / p + 1,
                    col_names[i % p]
                )));
            }
        }
        let t_max = *w.iter().max().unwrap();
        if t_max < 1 {
            return Err(Error::Data(
                "need at least one non-control arm (all arm labels are 0)".into(),
            ));
        }
        let col_kinds = (0..p)
            .map(|j| {
                let binary = (0..n).all(|i| {
                    let v = x[i * p + j];
                    v == 0.0 || v == 1.0
                });
                if binary {
                    ColKind::Binary
                } else {
                    ColKind::Continuous
                }
            })
            .collect();
        Ok(Dataset { y, w, x, p, t_max, col_kinds, col_names })
    }

    /// Load a dataset from a headered CSV file using the given schema.
    pub fn load_csv(path: &Path, schema: &Schema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let col_index = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Data(format!("column '{name}' not found in CSV header")))
        };
        let y_idx = col_index(&schema.outcome)?;
        let w_idx = col_index(&schema.arm)?;
        let cov_idx: Vec<(usize, String)> = match &schema.covariates {
            Some(cols) => cols
                .iter()
                .map(|c| Ok((col_index(c)?, c.clone())))
                .collect::<Result<Vec<_>>>()?,
            None => headers
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != y_idx && *i != w_idx)
                .map(|(i, h)| (i, h.clone()))
                .collect(),
        };
        if cov_idx.is_empty() {
            return Err(Error::Data("schema selects no covariate columns".into()));
        }

        let parse_cell = |raw: &str, row: usize, col: &str| -> Result<f64> {
            let t = raw.trim();
            if t.is_empty() {
                return Err(Error::Data(format!("missing value in row {row}, column '{col}'")));
            }
            t.parse::<f64>().map_err(|_| {
                Error::Data(format!("non-numeric value '{t}' in row {row}, column '{col}'"))
            })
        };

        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut x = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let row = r + 1; // 1-based data row
            let get = |idx: usize, col: &str| -> Result<f64> {
                let raw = record.get(idx).ok_or_else(|| {
                    Error::Data(format!("missing value in row {row}, column '{col}'"))
                })?;
                parse_cell(raw, row, col)
            };
            y.push(get(y_idx, &schema.outcome)?);
            let wv = get(w_idx, &schema.arm)?;
            if !wv.is_finite() || wv < 0.0 || wv.fract() != 0.0 {
                return Err(Error::Data(format!(
                    "arm value '{wv}' in row {row} is not a non-negative integer"
                )));
            }
            w.push(wv as usize);
            for (idx, name) in &cov_idx {
                x.push(get(*idx, name)?);
            }
        }
        let p = cov_idx.len();
        let names = cov_idx.into_iter().map(|(_, n)| n).collect();
        Dataset::from_parts(y, w, x, p, names)
    }

    /// Write the dataset back to CSV (outcome, arm, covariates).
    pub fn save_csv(&self, path: &Path, schema: &Schema) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header = vec![schema.outcome.clone(), schema.arm.clone()];
        header.extend(self.col_names.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format!("{}", self.y[i]), format!("{}", self.w[i])];
            for j in 0..self.p {
                rec.push(format!("{}", self.x(i, j)));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Largest arm index T; arms are 0..=T with 0 the control.
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// Number of arms including the control (T + 1).
    pub fn n_arms(&self) -> usize {
        self.t_max + 1
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn w(&self) -> &[usize] {
        &self.w
    }

    pub fn x(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.p + j]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn col_kind(&self, j: usize) -> ColKind {
        self.col_kinds[j]
    }

    pub fn col_names(&self) -> &[String] {
        &self.col_names
    }

    /// Covariate column j as a vector.
    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.x(i, j)).collect()
    }

    /// New dataset holding only the given rows (column kinds re-inferred).
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let mut y = Vec::with_capacity(rows.len());
        let mut w = Vec::with_capacity(rows.len());
        let mut x = Vec::with_capacity(rows.len() * self.p);
        for &i in rows {
            y.push(self.y[i]);
            w.push(self.w[i]);
            x.extend_from_slice(self.x_row(i));
        }
        Dataset::from_parts(y, w, x, self.p, self.col_names.clone())
    }

    /// Rows per arm 0..=T.
    pub fn arm_counts(&self) -> Vec<usize> {
        let mut c = vec![0usize; self.n_arms()];
        for &wi in &self.w {
            c[wi] += 1;
        }
        c
    }
}

fn fmt_bound(v: f64) -> Option<f64> {
    if v.is_finite() {
        Some(v)
    } else {
        None
    }
}

/// One interval condition `x_j in [lower, upper)`; unbounded sides are
/// serialized as null.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub col: usize,
    #[serde(
        serialize_with = "ser_bound",
        deserialize_with = "de_lower",
        default = "neg_inf"
    )]
    pub lower: f64,
    #[serde(
        serialize_with = "ser_bound",
        deserialize_with = "de_upper",
        default = "pos_inf"
    )]
    pub upper: f64,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}

fn pos_inf() -> f64 {
    f64::INFINITY
}

fn ser_bound<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    fmt_bound(*v).serialize(s)
}

fn de_lower<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
}

fn de_upper<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// Conjunction of half-open interval conditions on covariates; evaluates to
/// 0/1. At most one condition per covariate (intervals are merged on
/// construction) and every interval is non-empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleTerm {
    conditions: Vec<Condition>,
}

impl RuleTerm {
    /// Build a rule from `(col, lower, upper)` conditions. Conditions on the
    /// same covariate are intersected; an empty resulting interval or an
    /// empty condition list is an error.
    pub fn new(conditions: Vec<(usize, f64, f64)>) -> Result<Self> {
        if conditions.is_empty() {
            return Err(Error::Config("rule must have at least one condition".into()));
        }
        let mut merged: Vec<Condition> = Vec::new();
        for (col, lo, hi) in conditions {
            match merged.iter_mut().find(|c| c.col == col) {
                Some(c) => {
                    c.lower = c.lower.max(lo);
                    c.upper = c.upper.min(hi);
                }
                None => merged.push(Condition { col, lower: lo, upper: hi }),
            }
        }
        merged.sort_by_key(|c| c.col);
        for c in &merged {
            if !(c.lower < c.upper) {
                return Err(Error::Config(format!(
                    "empty interval [{}, {}) for covariate {}",
                    c.lower, c.upper, c.col
                )));
            }
        }
        Ok(RuleTerm { conditions: merged })
    }

    pub fn conditions(&self) -> &[Condition] {
        &self.conditions
    }

    /// 1 iff every condition's interval contains x_j (lower inclusive,
    /// upper exclusive). Errors when a condition refers past the end of `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<bool> {
        for c in &self.conditions {
            if c.col >= x.len() {
                return Err(Error::Data(format!(
                    "rule condition on covariate {} but input has {} covariates",
                    c.col,
                    x.len()
                )));
            }
        }
        Ok(self.evaluate_unchecked(x))
    }

    pub(crate) fn evaluate_unchecked(&self, x: &[f64]) -> bool {
        self.conditions.iter().all(|c| {
            let v = x[c.col];
            v >= c.lower && v < c.upper
        })
    }

    /// Fraction of dataset rows the rule covers.
    pub fn support(&self, data: &Dataset) -> Result<f64> {
        let mut hits = 0usize;
        for i in 0..data.n() {
            if self.evaluate(data.x_row(i))? {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.n() as f64)
    }

    /// Distinct covariates used by the rule.
    pub fn n_variables(&self) -> usize {
        self.conditions.len()
    }

    pub fn uses_col(&self, j: usize) -> bool {
        self.conditions.iter().any(|c| c.col == j)
    }

    /// Bit-exact dedup key over the merged condition set.
    pub(crate) fn key(&self) -> Vec<(usize, u64, u64)> {
        self.conditions.iter().map(|c| (c.col, c.lower.to_bits(), c.upper.to_bits())).collect()
    }

    /// Human-readable form, e.g. `x1 >= 0.5 & x3 < 1.2`.
    pub fn describe(&self, col_names: &[String]) -> String {
        let mut parts = Vec::new();
        for c in &self.conditions {
            let name = col_names.get(c.col).cloned().unwrap_or_else(|| format!("x{}", c.col + 1));
            if c.lower.is_finite() {
                parts.push(format!("{name} >= {}", c.lower));
            }
            if c.upper.is_finite() {
                parts.push(format!("{name} < {}", c.upper));
            }
        }
        parts.join(" & ")
    }
}

/// Load a covariate-only matrix from CSV, selecting `cols` in order.
/// Returns the row-major matrix and the row count.
pub fn load_covariate_matrix(path: &Path, cols: &[String]) -> Result<(Vec<f64>, usize)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let idx: Vec<usize> = cols
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c)
                .ok_or_else(|| Error::Data(format!("column '{c}' not found in CSV header")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut x = Vec::new();
    let mut n = 0usize;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (k, &i) in idx.iter().enumerate() {
            let raw = record
                .get(i)
                .ok_or_else(|| Error::Data(format!("missing value in row {row}, column '{}'", cols[k])))?
                .trim();
            if raw.is_empty() {
                return Err(Error::Data(format!("missing value in row {row}, column '{}'", cols[k])));
            }
            let v: f64 = raw.parse().map_err(|_| {
                Error::Data(format!("non-numeric value '{raw}' in row {row}, column '{}'", cols[k]))
            })?;
            x.push(v);
        }
        n += 1;
    }
    Ok((x, n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_multi_arm_csv() {
        let f = write_csv("y,w,x1,x2\n1.5,0,0.3,1\n2.0,1,0.7,0\n-0.5,2,1.1,1\n0.0,1,0.2,0\n");
        let d = Dataset::load_csv(f.path(), &Schema::default()).unwrap();
        assert_eq!(d.n(), 4);
        assert_eq!(d.t_max(), 2);
        assert_eq!(d.p(), 2);
        assert_eq!(d.col_kind(0), ColKind::Continuous);
        assert_eq!(d.col_kind(1), ColKind::Binary);
    }

    #[test]
    fn binary_kind_inferred_from_values() {
        let f = write_csv("y,w,a\n1,0,0\n2,1,1\n3,1,1\n4,0,0\n");
        let d = Dataset::load_csv(f.path(), &Schema::default()).unwrap();
        assert_eq!(d.col_kind(0), ColKind::Binary);
    }

    #[test]
    fn missing_cell_names_row_and_column() {
        let f = write_csv("y,w,x1\n1.0,0,0.5\n2.0,1,\n");
        let err = Dataset::load_csv(f.path(), &Schema::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains("'x1'"), "{msg}");
    }

    #[test]
    fn rejects_non_numeric_and_bad_arm() {
        let f = write_csv("y,w,x1\n1.0,0,abc\n");
        assert!(Dataset::load_csv(f.path(), &Schema::default()).is_err());
        let f = write_csv("y,w,x1\n1.0,-1,0.5\n");
        assert!(Dataset::load_csv(f.path(), &Schema::default()).is_err());
        let f = write_csv("y,w,x1\n1.0,1.5,0.5\n");
        assert!(Dataset::load_csv(f.path(), &Schema::default()).is_err());
    }

    #[test]
    fn csv_round_trip_is_identical() {
        let f = write_csv("y,w,x1,x2\n1.5,0,0.30000001,1\n2.25,2,-0.7,0\n0.125,1,1e-12,1\n");
        let d = Dataset::load_csv(f.path(), &Schema::default()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        d.save_csv(out.path(), &Schema::default()).unwrap();
        let d2 = Dataset::load_csv(out.path(), &Schema::default()).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn rule_evaluation_boundaries() {
        let r = RuleTerm::new(vec![(0, 0.5, f64::INFINITY)]).unwrap();
        assert!(r.evaluate(&[0.7, 0.0]).unwrap());
        // upper bound is exclusive
        let r = RuleTerm::new(vec![(0, 0.5, f64::INFINITY), (1, f64::NEG_INFINITY, 1.0)]).unwrap();
        assert!(!r.evaluate(&[0.7, 1.0]).unwrap());
        // lower bound is inclusive
        let eps = 1e-9;
        let r = RuleTerm::new(vec![(0, 0.5, 0.5 + eps)]).unwrap();
        assert!(r.evaluate(&[0.5]).unwrap());
    }

    #[test]
    fn rule_dimension_error() {
        let r = RuleTerm::new(vec![(3, 0.0, 1.0)]).unwrap();
        assert!(r.evaluate(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn rule_merges_same_variable() {
        let r = RuleTerm::new(vec![
            (1, f64::NEG_INFINITY, 2.0),
            (1, 0.5, f64::INFINITY),
            (0, 0.0, 1.0),
        ])
        .unwrap();
        assert_eq!(r.conditions().len(), 2);
        let c = &r.conditions()[1];
        assert_eq!((c.lower, c.upper), (0.5, 2.0));
        // empty intersection is rejected
        assert!(RuleTerm::new(vec![(0, 1.0, 2.0), (0, 3.0, 4.0)]).is_err());
    }

    #[test]
    fn support_counts_rows() {
        let f = write_csv("y,w,x1\n1,0,0.1\n1,1,0.6\n1,0,0.7\n1,1,0.2\n");
        let d = Dataset::load_csv(f.path(), &Schema::default()).unwrap();
        let all = RuleTerm::new(vec![(0, f64::NEG_INFINITY, f64::INFINITY)]).unwrap();
        assert_eq!(all.support(&d).unwrap(), 1.0);
        let none = RuleTerm::new(vec![(0, 5.0, 6.0)]).unwrap();
        assert_eq!(none.support(&d).unwrap(), 0.0);
        let half = RuleTerm::new(vec![(0, 0.5, f64::INFINITY)]).unwrap();
        assert_eq!(half.support(&d).unwrap(), 0.5);
    }

    #[test]
    fn condition_json_uses_null_for_unbounded() {
        let r = RuleTerm::new(vec![(0, 0.5, f64::INFINITY)]).unwrap();
        let js = serde_json::to_string(&r).unwrap();
        assert!(js.contains("null"), "{js}");
        let back: RuleTerm = serde_json::from_str(&js).unwrap();
        assert_eq!(back, r);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // merging same-variable conditions equals the conjunction of the
        // separate conditions on every input
        #[test]
        fn merged_rule_matches_conjunction(
            a_lo in -5.0f64..0.0, a_len in 0.5f64..6.0,
            b_lo in -5.0f64..0.0, b_len in 0.5f64..6.0,
            xs in proptest::collection::vec(-10.0f64..10.0, 1..40),
        ) {
            let (a_hi, b_hi) = (a_lo + a_len, b_lo + b_len);
            let lo = a_lo.max(b_lo);
            let hi = a_hi.min(b_hi);
            prop_assume!(lo < hi);
            let merged = RuleTerm::new(vec![(0, a_lo, a_hi), (0, b_lo, b_hi)]).unwrap();
            let ra = RuleTerm::new(vec![(0, a_lo, a_hi)]).unwrap();
            let rb = RuleTerm::new(vec![(0, b_lo, b_hi)]).unwrap();
            for x in xs {
                let v = [x];
                prop_assert_eq!(
                    merged.evaluate(&v).unwrap(),
                    ra.evaluate(&v).unwrap() && rb.evaluate(&v).unwrap()
                );
            }
        }
    }
}
