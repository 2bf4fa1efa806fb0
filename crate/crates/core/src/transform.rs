//! Inverse-probability-weighted transformed outcomes: one pseudo-outcome per
//! non-control arm and subject, whose conditional mean equals the HTE.

use std::path::Path;

use crate::data::Dataset;
use crate::propensity::GpsModel;
use crate::{Error, Result};

/// n x T matrix of transformed outcomes; column t-1 belongs to arm t.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedOutcomes {
    z: Vec<f64>,
    n: usize,
    t_arms: usize,
}

impl TransformedOutcomes {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of non-control arms (columns).
    pub fn t_arms(&self) -> usize {
        self.t_arms
    }

    /// Row of transformed outcomes for subject i (length T).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.t_arms..(i + 1) * self.t_arms]
    }

    /// Column for arm t (1-based arm index).
    pub fn arm_column(&self, t: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i)[t - 1]).collect()
    }

    /// Debug dump with columns z1..zT.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        let header: Vec<String> = (1..=self.t_arms).map(|t| format!("z{t}")).collect();
        wtr.write_record(&header)?;
        for i in 0..self.n {
            let rec: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Transform outcomes with an explicit per-row probability matrix
/// (`probs[i]` over arms 0..=T). Used directly when the assignment
/// probabilities are known.
pub fn transform_with_probs(data: &Dataset, probs: &[Vec<f64>]) -> Result<TransformedOutcomes> {
    let n = data.n();
    let t_arms = data.t_max();
    if probs.len() != n || probs.iter().any(|p| p.len() != t_arms + 1) {
        return Err(Error::Data("probability matrix shape does not match dataset".into()));
    }
    let mut z = vec![0.0; n * t_arms];
    for i in 0..n {
        let yi = data.y()[i];
        if yi == 0.0 {
            continue; // row stays all zero
        }
        let wi = data.w()[i];
        let e = probs[i][wi];
        if e == 0.0 {
            return Err(Error::Numeric(format!(
                "zero propensity for subject {} (arm {wi}); cannot form transformed outcome",
                i + 1
            )));
        }
        if wi == 0 {
            let v = -yi / e;
            for t in 0..t_arms {
                z[i * t_arms + t] = v;
            }
        } else {
            z[i * t_arms + wi - 1] = yi / e;
        }
    }
    Ok(TransformedOutcomes { z, n, t_arms })
}

/// Transform outcomes using (clipped) probabilities from a fitted GPS model.
pub fn transform_outcomes(data: &Dataset, gps: &GpsModel) -> Result<TransformedOutcomes> {
    if gps.p() != data.p() {
        return Err(Error::Data(format!(
            "GPS model has {} covariates but dataset has {}",
            gps.p(),
            data.p()
        )));
    }
    if gps.n_arms() != data.n_arms() {
        return Err(Error::Data(format!(
            "GPS model has {} arms but dataset has {}",
            gps.n_arms(),
            data.n_arms()
        )));
    }
    let mut probs = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        probs.push(gps.predict(data.x_row(i))?);
    }
    transform_with_probs(data, &probs)
}
