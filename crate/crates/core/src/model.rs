//! The final fitted model: per-arm outcome prediction, HTE and pairwise-arm
//! contrasts, importance measures, and complexity metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::BasisFunction;
use crate::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Fit provenance recorded inside the model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub learner: String,
    pub ensemble: String,
    pub lambda: f64,
    pub seed: u64,
}

/// Frozen rule-ensemble HTE model: shared basis, per-arm intercepts and a
/// (C+p) x (T+1) coefficient matrix, plus the training supports and linear
/// term SDs needed to reproduce importances without the training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub format_version: u32,
    pub col_names: Vec<String>,
    pub basis: Vec<BasisFunction>,
    /// Per-arm intercepts (length T+1).
    pub intercepts: Vec<f64>,
    /// Coefficient matrix, one row per basis function, one column per arm.
    pub coef: Vec<Vec<f64>>,
    /// Training support of each rule term (parallel to the rule prefix of
    /// `basis`).
    pub supports: Vec<f64>,
    /// Training SD of each linear term value (parallel to the linear suffix
    /// of `basis`).
    pub linear_sds: Vec<f64>,
    pub meta: ModelMeta,
}

impl FittedModel {
    pub fn n_arms(&self) -> usize {
        self.intercepts.len()
    }

    /// Largest arm index T.
    pub fn t_max(&self) -> usize {
        self.n_arms() - 1
    }

    pub fn n_rules(&self) -> usize {
        self.supports.len()
    }

    pub fn p(&self) -> usize {
        self.col_names.len()
    }

    fn check_arm(&self, t: usize) -> Result<()> {
        if t >= self.n_arms() {
            return Err(Error::Config(format!(
                "arm {t} out of range (model has arms 0..={})",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Evaluate every basis function at x.
    pub fn basis_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.basis.iter().map(|b| b.evaluate(x)).collect()
    }

    /// Estimated outcome for arm t at covariates x.
    pub fn predict_outcome(&self, x: &[f64], t: usize) -> Result<f64> {
        self.check_arm(t)?;
        let mut out = self.intercepts[t];
        for (g, b) in self.basis.iter().enumerate() {
            let v = b.evaluate(x)?;
            if v != 0.0 {
                out += self.coef[g][t] * v;
            }
        }
        Ok(out)
    }

    /// Estimated HTE of arm t (>= 1) versus the control, evaluated through
    /// the coefficient differences.
    pub fn predict_hte(&self, x: &[f64], t: usize) -> Result<f64> {
        self.check_arm(t)?;
        if t == 0 {
            return Err(Error::Config(
                "the control arm's HTE is identically zero; ask for an arm >= 1".into(),
            ));
        }
        let mut out = self.intercepts[t] - self.intercepts[0];
        for (g, b) in self.basis.iter().enumerate() {
            let v = b.evaluate(x)?;
            if v != 0.0 {
                out += (self.coef[g][t] - self.coef[g][0]) * v;
            }
        }
        Ok(out)
    }

    /// HTE of every non-control arm at x (arm t at index t-1).
    pub fn predict_hte_all(&self, x: &[f64]) -> Result<Vec<f64>> {
        (1..self.n_arms()).map(|t| self.predict_hte(x, t)).collect()
    }

    /// Difference in treatment effect between arms t1 and t2, via the
    /// coefficient differences.
    pub fn pairwise_hte(&self, x: &[f64], t1: usize, t2: usize) -> Result<f64> {
        self.check_arm(t1)?;
        self.check_arm(t2)?;
        if t1 == t2 {
            return Err(Error::Config("pairwise contrast needs two distinct arms".into()));
        }
        let mut out = self.intercepts[t1] - self.intercepts[t2];
        for (g, b) in self.basis.iter().enumerate() {
            let v = b.evaluate(x)?;
            if v != 0.0 {
                out += (self.coef[g][t1] - self.coef[g][t2]) * v;
            }
        }
        Ok(out)
    }

    /// Base-function importance for the contrast t1 vs t2: rules use
    /// |coef difference| * sqrt(support * (1 - support)), linear terms use
    /// |coef difference| * SD of the term.
    pub fn base_importance(&self, t1: usize, t2: usize) -> Result<Vec<f64>> {
        self.check_arm(t1)?;
        self.check_arm(t2)?;
        if t1 == t2 {
            return Err(Error::Config("importance needs two distinct arms".into()));
        }
        let n_rules = self.n_rules();
        Ok(self
            .basis
            .iter()
            .enumerate()
            .map(|(g, b)| {
                let diff = (self.coef[g][t1] - self.coef[g][t2]).abs();
                match b {
                    BasisFunction::Rule(_) => {
                        let s = self.supports[g];
                        diff * (s * (1.0 - s)).sqrt()
                    }
                    BasisFunction::Linear(_) => diff * self.linear_sds[g - n_rules],
                }
            })
            .collect())
    }

    /// Variable importance for the contrast t1 vs t2: the linear-term
    /// importance plus an equal share of every containing rule's importance.
    pub fn variable_importance(&self, t1: usize, t2: usize) -> Result<Vec<f64>> {
        let base = self.base_importance(t1, t2)?;
        let mut out = vec![0.0; self.p()];
        for (g, b) in self.basis.iter().enumerate() {
            match b {
                BasisFunction::Linear(l) => out[l.col] += base[g],
                BasisFunction::Rule(r) => {
                    let m = r.n_variables() as f64;
                    for c in r.conditions() {
                        out[c.col] += base[g] / m;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Number of basis functions whose coefficient group is not all zero.
    pub fn count_terms(&self) -> usize {
        self.coef.iter().filter(|row| row.iter().any(|c| *c != 0.0)).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: FittedModel = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                m.format_version
            )));
        }
        if m.coef.len() != m.basis.len() || m.coef.iter().any(|r| r.len() != m.intercepts.len()) {
            return Err(Error::Data("model coefficient matrix has inconsistent shape".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Importance report rows for the contrast t1 vs t2, sorted by
    /// decreasing importance.
    pub fn importance_report(&self, t1: usize, t2: usize) -> Result<Vec<ImportanceRow>> {
        let imp = self.base_importance(t1, t2)?;
        let mut rows: Vec<ImportanceRow> = self
            .basis
            .iter()
            .enumerate()
            .map(|(g, b)| ImportanceRow {
                kind: match b {
                    BasisFunction::Rule(_) => "rule".into(),
                    BasisFunction::Linear(_) => "linear".into(),
                },
                definition: b.describe(&self.col_names),
                t1,
                t2,
                importance: imp[g],
                support: match b {
                    BasisFunction::Rule(_) => Some(self.supports[g]),
                    BasisFunction::Linear(_) => None,
                },
                coef_diff: self.coef[g][t1] - self.coef[g][t2],
                coef: self.coef[g].clone(),
            })
            .collect();
        rows.sort_by(|a, b| b.importance.partial_cmp(&a.importance).unwrap());
        Ok(rows)
    }

    /// Write the importance report as CSV with one column per arm
    /// coefficient.
    pub fn write_importance_csv(&self, path: &Path, t1: usize, t2: usize) -> Result<()> {
        let rows = self.importance_report(t1, t2)?;
        let mut wtr = csv::Writer::from_path(path)?;
        let mut header =
            vec!["kind".to_string(), "definition".into(), "t1".into(), "t2".into(),
                 "importance".into(), "support".into(), "coef_diff".into()];
        for t in 0..self.n_arms() {
            header.push(format!("coef{t}"));
        }
        wtr.write_record(&header)?;
        for r in rows {
            let mut rec = vec![
                r.kind,
                r.definition,
                r.t1.to_string(),
                r.t2.to_string(),
                format!("{}", r.importance),
                r.support.map_or(String::new(), |s| format!("{s}")),
                format!("{}", r.coef_diff),
            ];
            for c in r.coef {
                rec.push(format!("{c}"));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Write variable importances as CSV.
    pub fn write_variable_importance_csv(&self, path: &Path, t1: usize, t2: usize) -> Result<()> {
        let imp = self.variable_importance(t1, t2)?;
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["variable", "t1", "t2", "importance"])?;
        for (j, v) in imp.iter().enumerate() {
            wtr.write_record(&[
                self.col_names[j].clone(),
                t1.to_string(),
                t2.to_string(),
                format!("{v}"),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// One row of the importance report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub kind: String,
    pub definition: String,
    pub t1: usize,
    pub t2: usize,
    pub importance: f64,
    pub support: Option<f64>,
    pub coef_diff: f64,
    pub coef: Vec<f64>,
}
