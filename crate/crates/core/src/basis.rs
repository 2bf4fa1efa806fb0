//! Winsorized/normalized linear terms and the arm-masked grouped design for
//! group-wise regularization.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RuleTerm};
use crate::util::{mean, quantile, sd_pop};
use crate::{Error, Result};

/// Winsorized, rescaled linear term for one covariate:
/// `scale * min(upper, max(lower, x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearTerm {
    pub col: usize,
    /// Lower winsorization threshold (training q-quantile).
    pub lower: f64,
    /// Upper winsorization threshold (training (1-q)-quantile).
    pub upper: f64,
    /// 0.4 / SD of the winsorized training column.
    pub scale: f64,
}

impl LinearTerm {
    pub fn apply(&self, x_j: f64) -> f64 {
        self.scale * x_j.clamp(self.lower, self.upper)
    }
}

/// Linear terms for every covariate with positive winsorized spread;
/// zero-spread columns are dropped and recorded.
#[derive(Debug, Clone)]
pub struct LinearFit {
    pub terms: Vec<LinearTerm>,
    pub dropped: Vec<usize>,
}

/// Fit winsorized linear terms: thresholds at the q and 1-q training
/// quantiles (linear-interpolation quantile), scaled to a 0.4 standard
/// deviation.
pub fn fit_linear_terms(data: &Dataset, q: f64) -> Result<LinearFit> {
    if !(0.0..0.5).contains(&q) {
        return Err(Error::Config("winsorization fraction q must lie in [0, 0.5)".into()));
    }
    let mut terms = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..data.p() {
        let col = data.col(j);
        let lower = quantile(&col, q);
        let upper = quantile(&col, 1.0 - q);
        let clamped: Vec<f64> = col.iter().map(|v| v.clamp(lower, upper)).collect();
        let sd = sd_pop(&clamped);
        if sd == 0.0 {
            dropped.push(j);
            continue;
        }
        terms.push(LinearTerm { col: j, lower, upper, scale: 0.4 / sd });
    }
    Ok(LinearFit { terms, dropped })
}

/// A shared basis function: a 0/1 rule term or a winsorized linear term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisFunction {
    Rule(RuleTerm),
    Linear(LinearTerm),
}

impl BasisFunction {
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        match self {
            BasisFunction::Rule(r) => Ok(if r.evaluate(x)? { 1.0 } else { 0.0 }),
            BasisFunction::Linear(l) => {
                if l.col >= x.len() {
                    return Err(Error::Data(format!(
                        "linear term on covariate {} but input has {} covariates",
                        l.col,
                        x.len()
                    )));
                }
                Ok(l.apply(x[l.col]))
            }
        }
    }

    pub fn describe(&self, col_names: &[String]) -> String {
        match self {
            BasisFunction::Rule(r) => r.describe(col_names),
            BasisFunction::Linear(l) => {
                let name =
                    col_names.get(l.col).cloned().unwrap_or_else(|| format!("x{}", l.col + 1));
                format!("linear({name})")
            }
        }
    }
}

/// Per-column (group, arm) moments of the raw masked design columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColStat {
    pub mean: f64,
    pub sd: f64,
}

/// Grouped design over the shared basis: group g, arm t column value for row
/// i is `I(w_i = t) * b_g(x_i)`. Within a group, columns for different arms
/// have disjoint support and are therefore exactly orthogonal. The
/// unpenalized intercept block `I(w_i = t)` is implicit.
#[derive(Debug, Clone)]
pub struct GroupedDesign {
    basis: Vec<BasisFunction>,
    /// Unmasked basis values, one vector of length n per group.
    values: Vec<Vec<f64>>,
    arms: Vec<usize>,
    n_arms: usize,
    col_stats: Vec<Vec<ColStat>>,
}

impl GroupedDesign {
    /// Evaluate rules (deduped) and linear terms on the dataset and assemble
    /// the grouped design. Group order is rules first, then linear terms.
    pub fn build(data: &Dataset, rules: &[RuleTerm], linears: &[LinearTerm]) -> Result<Self> {
        let n = data.n();
        let n_arms = data.n_arms();
        let mut basis: Vec<BasisFunction> = Vec::with_capacity(rules.len() + linears.len());
        basis.extend(rules.iter().cloned().map(BasisFunction::Rule));
        basis.extend(linears.iter().cloned().map(BasisFunction::Linear));

        let mut values = Vec::with_capacity(basis.len());
        for b in &basis {
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                v.push(b.evaluate(data.x_row(i))?);
            }
            values.push(v);
        }
        let arms = data.w().to_vec();
        let col_stats = (0..basis.len())
            .map(|g| {
                (0..n_arms)
                    .map(|t| {
                        let col: Vec<f64> = (0..n)
                            .map(|i| if arms[i] == t { values[g][i] } else { 0.0 })
                            .collect();
                        ColStat { mean: mean(&col), sd: sd_pop(&col) }
                    })
                    .collect()
            })
            .collect();
        Ok(GroupedDesign { basis, values, arms, n_arms, col_stats })
    }

    pub fn n(&self) -> usize {
        self.arms.len()
    }

    pub fn n_groups(&self) -> usize {
        self.basis.len()
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn basis(&self) -> &[BasisFunction] {
        &self.basis
    }

    pub fn arms(&self) -> &[usize] {
        &self.arms
    }

    /// Unmasked basis values for group g.
    pub fn values(&self, g: usize) -> &[f64] {
        &self.values[g]
    }

    /// Materialize the raw masked column for (group, arm).
    pub fn column(&self, g: usize, t: usize) -> Vec<f64> {
        (0..self.n())
            .map(|i| if self.arms[i] == t { self.values[g][i] } else { 0.0 })
            .collect()
    }

    /// Intercept-block column for arm t.
    pub fn intercept_column(&self, t: usize) -> Vec<f64> {
        self.arms.iter().map(|&w| if w == t { 1.0 } else { 0.0 }).collect()
    }

    pub fn col_stats(&self, g: usize) -> &[ColStat] {
        &self.col_stats[g]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dataset(xcols: Vec<Vec<f64>>, w: Vec<usize>) -> Dataset {
        let p = xcols.len();
        let n = xcols[0].len();
        let mut x = Vec::with_capacity(n * p);
        for i in 0..n {
            for c in &xcols {
                x.push(c[i]);
            }
        }
        let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
        Dataset::from_parts(vec![0.0; n], w, x, p, names).unwrap()
    }

    #[test]
    fn constant_column_is_dropped() {
        let d = dataset(vec![vec![5.0; 6], (0..6).map(|i| i as f64).collect()], vec![0, 1, 0, 1, 0, 1]);
        let fit = fit_linear_terms(&d, 0.025).unwrap();
        assert_eq!(fit.dropped, vec![0]);
        assert_eq!(fit.terms.len(), 1);
        assert_eq!(fit.terms[0].col, 1);
    }

    #[test]
    fn q_zero_keeps_min_max() {
        let col: Vec<f64> = vec![3.0, -1.0, 7.0, 2.0];
        let d = dataset(vec![col.clone()], vec![0, 1, 0, 1]);
        let fit = fit_linear_terms(&d, 0.0).unwrap();
        let t = &fit.terms[0];
        assert_eq!(t.lower, -1.0);
        assert_eq!(t.upper, 7.0);
        // winsorization is the identity on the training data
        for v in col {
            assert_eq!(t.apply(v), t.scale * v);
        }
    }

    #[test]
    fn quantiles_match_independent_oracle() {
        let col: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let d = dataset(vec![col.clone()], vec![0, 1].repeat(50));
        let fit = fit_linear_terms(&d, 0.025).unwrap();
        // brute-force sorted-interpolation quantile
        let oracle = |q: f64| -> f64 {
            let mut s = col.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let h = (s.len() - 1) as f64 * q;
            let lo = h.floor() as usize;
            s[lo] + (h - lo as f64) * (s[(lo + 1).min(s.len() - 1)] - s[lo])
        };
        assert_abs_diff_eq!(fit.terms[0].lower, oracle(0.025), epsilon = 1e-12);
        assert_abs_diff_eq!(fit.terms[0].upper, oracle(0.975), epsilon = 1e-12);
    }

    #[test]
    fn winsorized_scale_gives_sd_of_point_four() {
        let col: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let d = dataset(vec![col], vec![0, 1].repeat(100));
        let fit = fit_linear_terms(&d, 0.025).unwrap();
        let t = &fit.terms[0];
        let applied: Vec<f64> = d.col(0).iter().map(|&v| t.apply(v)).collect();
        assert_abs_diff_eq!(sd_pop(&applied), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn apply_clamps_and_scales() {
        let t = LinearTerm { col: 0, lower: -1.0, upper: 1.0, scale: 0.5 };
        assert_eq!(t.apply(0.6), 0.3); // interior
        assert_eq!(t.apply(1000.0), 0.5); // capped above
        assert_eq!(t.apply(-3.0), -0.5);
        // clamping twice equals once
        let once = 2.5f64.clamp(t.lower, t.upper);
        assert_eq!(once.clamp(t.lower, t.upper), once);
    }

    #[test]
    fn masked_columns_are_indicator_masked() {
        let d = dataset(vec![vec![1.0, 1.0]], vec![0, 1]);
        let rule = RuleTerm::new(vec![(0, 0.5, f64::INFINITY)]).unwrap();
        let design = GroupedDesign::build(&d, &[rule], &[]).unwrap();
        assert_eq!(design.column(0, 0), vec![1.0, 0.0]);
        assert_eq!(design.column(0, 1), vec![0.0, 1.0]);
    }

    #[test]
    fn cross_arm_columns_are_exactly_orthogonal() {
        let cols = vec![
            (0..30).map(|i| (i as f64 * 0.7).cos()).collect::<Vec<f64>>(),
            (0..30).map(|i| (i % 2) as f64).collect(),
        ];
        let w: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let d = dataset(cols, w);
        let rules = vec![RuleTerm::new(vec![(0, 0.0, f64::INFINITY)]).unwrap()];
        let linears = fit_linear_terms(&d, 0.025).unwrap().terms;
        let design = GroupedDesign::build(&d, &rules, &linears).unwrap();
        for g in 0..design.n_groups() {
            for t1 in 0..design.n_arms() {
                for t2 in (t1 + 1)..design.n_arms() {
                    let a = design.column(g, t1);
                    let b = design.column(g, t2);
                    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    assert_eq!(dot, 0.0);
                }
            }
        }
    }

    #[test]
    fn column_stats_match_streaming_oracle() {
        let cols = vec![(0..40).map(|i| (i as f64 * 1.3).sin() * 2.0).collect::<Vec<f64>>()];
        let w: Vec<usize> = (0..40).map(|i| (i / 5) % 2).collect();
        let d = dataset(cols, w);
        let linears = fit_linear_terms(&d, 0.0).unwrap().terms;
        let design = GroupedDesign::build(&d, &[], &linears).unwrap();
        for g in 0..design.n_groups() {
            for t in 0..design.n_arms() {
                // independent streaming-moments pass
                let col = design.column(g, t);
                let (mut count, mut m, mut m2) = (0.0f64, 0.0f64, 0.0f64);
                for v in col {
                    count += 1.0;
                    let delta = v - m;
                    m += delta / count;
                    m2 += delta * (v - m);
                }
                let st = design.col_stats(g)[t];
                assert_abs_diff_eq!(st.mean, m, epsilon = 1e-12);
                assert_abs_diff_eq!(st.sd, (m2 / count).sqrt(), epsilon = 1e-12);
            }
        }
    }
}
