//! Group lasso and adaptive group lasso over the grouped design, with a
//! regularization path and stratified k-fold cross-validation.
//!
//! The solver runs block coordinate descent on internally standardized
//! columns. Each group update is exact: within a group the (T+1) masked
//! columns have disjoint support, so after standardization the group Gram
//! matrix is `n I - n u u^T` (diagonal minus rank one) and the penalized
//! block minimizer reduces to a one-dimensional root find via
//! Sherman-Morrison. Coefficients are reported back on the original basis
//! scale.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::GroupedDesign;
use crate::{Error, Result};

/// Group-size multiplier in the penalty `lambda * factor * sum w_g ||beta_g||`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSizeFactor {
    /// sqrt(T): the number of non-control arms.
    SqrtT,
    /// sqrt(T+1): the actual number of columns per group.
    SqrtTPlus1,
}

impl GroupSizeFactor {
    pub fn value(self, n_arms: usize) -> f64 {
        match self {
            GroupSizeFactor::SqrtT => ((n_arms - 1) as f64).sqrt(),
            GroupSizeFactor::SqrtTPlus1 => (n_arms as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Convergence threshold on the largest coefficient change per sweep
    /// (standardized coordinates).
    pub tol: f64,
    pub max_sweeps: usize,
    pub size_factor: GroupSizeFactor,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_sweeps: 100_000, size_factor: GroupSizeFactor::SqrtT }
    }
}

/// Regularization-path shape: `len` log-spaced values from lambda_max down to
/// `min_ratio * lambda_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathOptions {
    pub len: usize,
    pub min_ratio: f64,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions { len: 100, min_ratio: 1e-3 }
    }
}

/// Cross-validation options shared by the plain and adaptive fits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub path: PathOptions,
    pub solve: SolveOptions,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions { folds: 10, seed: 0, path: PathOptions::default(), solve: SolveOptions::default() }
    }
}

fn ser_weight<S: serde::Serializer>(v: &Vec<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    let opt: Vec<Option<f64>> =
        v.iter().map(|w| if w.is_finite() { Some(*w) } else { None }).collect();
    opt.serialize(s)
}

fn de_weight<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
    let opt = Vec::<Option<f64>>::deserialize(d)?;
    Ok(opt.into_iter().map(|w| w.unwrap_or(f64::INFINITY)).collect())
}

/// A solved group lasso problem. Coefficients are on the original basis
/// scale; the objective value refers to the solver's standardized
/// coordinates. Infinite penalty weights serialize as null.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupLassoFit {
    pub intercepts: Vec<f64>,
    /// groups x arms coefficient matrix; rows of inactive groups are exactly
    /// zero.
    pub coef: Vec<Vec<f64>>,
    pub lambda: f64,
    #[serde(serialize_with = "ser_weight", deserialize_with = "de_weight")]
    pub penalty_weights: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub active_groups: Vec<usize>,
    pub converged: bool,
    pub sweeps: usize,
    /// Group norms in solver coordinates (feeds adaptive weights).
    pub std_norms: Vec<f64>,
}

impl GroupLassoFit {
    /// Predicted outcome for a row given its basis values and arm.
    pub fn predict(&self, basis_values: &[f64], arm: usize) -> f64 {
        let mut fit = self.intercepts[arm];
        for g in &self.active_groups {
            fit += self.coef[*g][arm] * basis_values[*g];
        }
        fit
    }
}

/// One point of a cross-validation curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_error: f64,
    pub se: f64,
}

/// Outcome of `cv_select`: the chosen lambda and the full curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSelection {
    pub lambda: f64,
    pub table: Vec<CvPoint>,
    pub warnings: Vec<String>,
}

/// Plain group lasso with CV-selected lambda.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvFit {
    pub fit: GroupLassoFit,
    pub selection: CvSelection,
}

/// Two-stage adaptive group lasso result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveFit {
    /// Final (stage-2) fit; equal to the intercept-only stage-1 fit when the
    /// first stage selected no groups.
    pub fit: GroupLassoFit,
    pub stage1: GroupLassoFit,
    pub stage1_selection: CvSelection,
    pub stage2_selection: Option<CvSelection>,
    pub intercept_only: bool,
}

// ---------------------------------------------------------------------------
// standardized problem + block coordinate descent
// ---------------------------------------------------------------------------

/// Group lasso problem on a row subset of a grouped design, standardized for
/// the solver. Exposes the standardized columns so reference solvers can
/// minimize the identical objective.
pub struct GroupProblem {
    /// basis values per group, restricted to the solve rows
    values: Vec<Vec<f64>>,
    arms: Vec<usize>,
    y: Vec<f64>,
    n_arms: usize,
    /// per group/arm: mean and population SD of the raw masked column
    mean: Vec<Vec<f64>>,
    sd: Vec<Vec<f64>>,
    usable: Vec<Vec<bool>>,
    /// mean/sd per usable column (0 otherwise)
    u: Vec<Vec<f64>>,
    weights: Vec<f64>,
    factor: f64,
    rows_by_arm: Vec<Vec<usize>>,
}

/// Solver state in standardized coordinates.
#[derive(Debug, Clone)]
pub struct GroupLassoState {
    pub beta: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    residual: Vec<f64>,
}

/// Per-solve diagnostics.
#[derive(Debug, Clone)]
pub struct SolveDiagnostics {
    pub converged: bool,
    pub sweeps: usize,
    /// Objective after every sweep (non-increasing).
    pub objective_trace: Vec<f64>,
}

impl GroupProblem {
    /// Restrict the design to `rows` (indices into the design) and
    /// standardize. `y` is the full-length outcome vector.
    pub fn new(
        design: &GroupedDesign,
        rows: &[usize],
        y: &[f64],
        weights: &[f64],
        size_factor: GroupSizeFactor,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("cannot solve on an empty row subset".into()));
        }
        if y.len() != design.n() {
            return Err(Error::Data("outcome length does not match design".into()));
        }
        if weights.len() != design.n_groups() {
            return Err(Error::Config("penalty weight vector length must equal group count".into()));
        }
        if weights.iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config("penalty weights must be >= 0 or infinite".into()));
        }
        let n = rows.len();
        let n_arms = design.n_arms();
        let n_groups = design.n_groups();

        let arms: Vec<usize> = rows.iter().map(|&i| design.arms()[i]).collect();
        let y_r: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let mut values = Vec::with_capacity(n_groups);
        for g in 0..n_groups {
            let src = design.values(g);
            values.push(rows.iter().map(|&i| src[i]).collect::<Vec<f64>>());
        }

        let mut mean = vec![vec![0.0; n_arms]; n_groups];
        let mut sd = vec![vec![0.0; n_arms]; n_groups];
        let mut usable = vec![vec![false; n_arms]; n_groups];
        let mut u = vec![vec![0.0; n_arms]; n_groups];
        for g in 0..n_groups {
            let mut sums = vec![0.0; n_arms];
            let mut sqs = vec![0.0; n_arms];
            for k in 0..n {
                let v = values[g][k];
                sums[arms[k]] += v;
                sqs[arms[k]] += v * v;
            }
            for t in 0..n_arms {
                let m = sums[t] / n as f64;
                let var = (sqs[t] / n as f64 - m * m).max(0.0);
                mean[g][t] = m;
                sd[g][t] = var.sqrt();
                if sd[g][t] > 0.0 {
                    usable[g][t] = true;
                    u[g][t] = m / sd[g][t];
                }
            }
        }
        let mut rows_by_arm = vec![Vec::new(); n_arms];
        for (k, &a) in arms.iter().enumerate() {
            rows_by_arm[a].push(k);
        }
        Ok(GroupProblem {
            values,
            arms,
            y: y_r,
            n_arms,
            mean,
            sd,
            usable,
            u,
            weights: weights.to_vec(),
            factor: size_factor.value(n_arms),
            rows_by_arm,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_groups(&self) -> usize {
        self.values.len()
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn penalty_factor(&self) -> f64 {
        self.factor
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn usable(&self, g: usize, t: usize) -> bool {
        self.usable[g][t]
    }

    /// Standardized column for (group, arm); all-zero for degenerate columns.
    pub fn std_column(&self, g: usize, t: usize) -> Vec<f64> {
        let n = self.n_rows();
        if !self.usable[g][t] {
            return vec![0.0; n];
        }
        (0..n)
            .map(|k| {
                let raw = if self.arms[k] == t { self.values[g][k] } else { 0.0 };
                (raw - self.mean[g][t]) / self.sd[g][t]
            })
            .collect()
    }

    pub fn intercept_column(&self, t: usize) -> Vec<f64> {
        self.arms.iter().map(|&a| if a == t { 1.0 } else { 0.0 }).collect()
    }

    /// Objective value for arbitrary standardized coefficients:
    /// 0.5 * ||y - fit||^2 + lambda * factor * sum_g w_g ||beta_g||_2.
    pub fn objective_of(&self, beta: &[Vec<f64>], intercepts: &[f64], lambda: f64) -> f64 {
        let fit = self.fitted_values(beta, intercepts);
        let sse: f64 = self.y.iter().zip(&fit).map(|(yi, fi)| (yi - fi) * (yi - fi)).sum();
        0.5 * sse + self.penalty_of(beta, lambda)
    }

    /// Cheap objective from the maintained residual (used for the per-sweep
    /// trace).
    fn objective_state(&self, state: &GroupLassoState, lambda: f64) -> f64 {
        let sse: f64 = state.residual.iter().map(|r| r * r).sum();
        0.5 * sse + self.penalty_of(&state.beta, lambda)
    }

    fn penalty_of(&self, beta: &[Vec<f64>], lambda: f64) -> f64 {
        let mut pen = 0.0;
        for g in 0..self.n_groups() {
            let norm = group_norm(&beta[g]);
            if norm > 0.0 {
                pen += lambda * self.factor * self.weights[g] * norm;
            }
        }
        pen
    }

    fn fitted_values(&self, beta: &[Vec<f64>], intercepts: &[f64]) -> Vec<f64> {
        let n = self.n_rows();
        let mut fit: Vec<f64> = (0..n).map(|k| intercepts[self.arms[k]]).collect();
        for g in 0..self.n_groups() {
            let mut shift = 0.0;
            for t in 0..self.n_arms {
                if self.usable[g][t] && beta[g][t] != 0.0 {
                    shift += beta[g][t] * self.mean[g][t] / self.sd[g][t];
                }
            }
            if shift == 0.0 && beta[g].iter().all(|b| *b == 0.0) {
                continue;
            }
            for k in 0..n {
                let a = self.arms[k];
                let masked = if self.usable[g][a] {
                    beta[g][a] * self.values[g][k] / self.sd[g][a]
                } else {
                    0.0
                };
                fit[k] += masked - shift;
            }
        }
        fit
    }

    /// Smallest lambda at which every penalized group is zero, given the
    /// intercept-only residual.
    pub fn lambda_max(&self) -> Result<f64> {
        let state = self.initial_state();
        let mut best: Option<f64> = None;
        for g in 0..self.n_groups() {
            let w = self.weights[g];
            if !w.is_finite() {
                continue;
            }
            let z = self.group_dot(g, &state.residual);
            let norm = group_norm(&z);
            let cand = norm / (self.factor * w.max(f64::MIN_POSITIVE));
            best = Some(best.map_or(cand, |b: f64| b.max(cand)));
        }
        best.ok_or_else(|| Error::Config("every group has an infinite penalty weight".into()))
    }

    fn initial_state(&self) -> GroupLassoState {
        let n = self.n_rows();
        let global_mean = self.y.iter().sum::<f64>() / n as f64;
        let mut intercepts = vec![global_mean; self.n_arms];
        for t in 0..self.n_arms {
            if !self.rows_by_arm[t].is_empty() {
                intercepts[t] = self.rows_by_arm[t].iter().map(|&k| self.y[k]).sum::<f64>()
                    / self.rows_by_arm[t].len() as f64;
            }
        }
        let residual: Vec<f64> =
            (0..n).map(|k| self.y[k] - intercepts[self.arms[k]]).collect();
        GroupLassoState { beta: vec![vec![0.0; self.n_arms]; self.n_groups()], intercepts, residual }
    }

    /// X_g^T r for the standardized group columns (zeros for unusable arms).
    fn group_dot(&self, g: usize, r: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_arms];
        let mut r_sum = 0.0;
        for (k, &rk) in r.iter().enumerate() {
            acc[self.arms[k]] += self.values[g][k] * rk;
            r_sum += rk;
        }
        (0..self.n_arms)
            .map(|t| {
                if self.usable[g][t] {
                    (acc[t] - self.mean[g][t] * r_sum) / self.sd[g][t]
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Exact minimizer of 0.5 b^T G b - b^T z + kappa ||b|| for this group's
    /// Gram G = A - n u u^T with A_t = n (1 + u_t^2) (restricted to usable
    /// arms).
    fn block_minimize(&self, g: usize, z: &[f64], kappa: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_arms];
        let znorm = group_norm(z);
        if znorm <= kappa {
            return out;
        }
        let n = self.n_rows() as f64;
        let u = &self.u[g];

        // beta(nu) = (G + (kappa/nu) I)^{-1} z via Sherman-Morrison on the
        // diagonal-minus-rank-one form
        let beta_of = |nu: f64, out: &mut Vec<f64>| {
            let c = if kappa > 0.0 { (kappa / nu).max(1e-12 * n) } else { 1e-12 * n };
            let mut uz_a = 0.0; // u^T A^{-1} z
            let mut uu_a = 0.0; // u^T A^{-1} u
            for t in 0..self.n_arms {
                if self.usable[g][t] {
                    let a_t = n * (1.0 + u[t] * u[t]) + c;
                    uz_a += u[t] * z[t] / a_t;
                    uu_a += u[t] * u[t] / a_t;
                }
            }
            let gamma = n * uz_a / (1.0 - n * uu_a);
            for t in 0..self.n_arms {
                out[t] = if self.usable[g][t] {
                    (z[t] + gamma * u[t]) / (n * (1.0 + u[t] * u[t]) + c)
                } else {
                    0.0
                };
            }
        };
        if kappa == 0.0 {
            beta_of(1.0, &mut out);
            return out;
        }

        // bracket the unique root of ||beta(nu)|| - nu
        let mut tmp = vec![0.0; self.n_arms];
        let f = |nu: f64, tmp: &mut Vec<f64>| -> f64 {
            beta_of(nu, tmp);
            group_norm(tmp) - nu
        };
        let mut lo = znorm / (n + kappa) * 0.5;
        let mut hi = lo.max(1e-300);
        let mut flo = f(lo.max(1e-300), &mut tmp);
        if flo < 0.0 {
            // shrink until positive (should not normally happen)
            for _ in 0..200 {
                lo *= 0.5;
                flo = f(lo.max(1e-300), &mut tmp);
                if flo >= 0.0 {
                    break;
                }
            }
        }
        for _ in 0..300 {
            hi *= 2.0;
            if f(hi, &mut tmp) < 0.0 {
                break;
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid, &mut tmp) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if (hi - lo) <= 1e-15 * hi {
                break;
            }
        }
        beta_of(0.5 * (lo + hi), &mut out);
        out
    }

    /// One sweep: intercept block first, then the given groups (all when
    /// `subset` is None). Returns the largest coefficient change.
    fn sweep(
        &self,
        state: &mut GroupLassoState,
        subset: Option<&[usize]>,
        lambda: f64,
    ) -> f64 {
        let mut max_delta: f64 = 0.0;
        // unpenalized intercepts: disjoint indicator columns, exact update
        for t in 0..self.n_arms {
            if self.rows_by_arm[t].is_empty() {
                continue;
            }
            let delta = self.rows_by_arm[t].iter().map(|&k| state.residual[k]).sum::<f64>()
                / self.rows_by_arm[t].len() as f64;
            if delta != 0.0 {
                state.intercepts[t] += delta;
                for &k in &self.rows_by_arm[t] {
                    state.residual[k] -= delta;
                }
                max_delta = max_delta.max(delta.abs());
            }
        }
        let groups: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..self.n_groups()).collect(),
        };
        for g in groups {
            let w = self.weights[g];
            if !w.is_finite() {
                continue;
            }
            let kappa = lambda * self.factor * w;
            // z = X_g^T (r + X_g beta_old) = X_g^T r + G beta_old,
            // with G = diag(n (1 + u_t^2)) - n u u^T
            let mut z = self.group_dot(g, &state.residual);
            let old = state.beta[g].clone();
            let n = self.n_rows() as f64;
            let u = &self.u[g];
            let ub: f64 = (0..self.n_arms)
                .filter(|&t| self.usable[g][t])
                .map(|t| u[t] * old[t])
                .sum();
            for t in 0..self.n_arms {
                if self.usable[g][t] {
                    z[t] += n * (1.0 + u[t] * u[t]) * old[t] - n * u[t] * ub;
                }
            }
            let new = self.block_minimize(g, &z, kappa);
            let mut shift = 0.0;
            let mut changed: f64 = 0.0;
            let mut per_arm = vec![0.0; self.n_arms];
            for t in 0..self.n_arms {
                let d = new[t] - old[t];
                changed = changed.max(d.abs());
                if d != 0.0 && self.usable[g][t] {
                    per_arm[t] = d / self.sd[g][t];
                    shift += d * self.mean[g][t] / self.sd[g][t];
                }
            }
            if changed > 0.0 {
                let vals = &self.values[g];
                for (k, r) in state.residual.iter_mut().enumerate() {
                    *r -= per_arm[self.arms[k]] * vals[k] - shift;
                }
                state.beta[g] = new;
            }
            max_delta = max_delta.max(changed);
        }
        max_delta
    }

    /// KKT residual of the current state: stationarity violation for active
    /// groups, subgradient slack for inactive ones, plus intercept gradients.
    pub fn kkt_residual(&self, state: &GroupLassoState, lambda: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.n_arms {
            if self.rows_by_arm[t].is_empty() {
                continue;
            }
            let grad: f64 = self.rows_by_arm[t].iter().map(|&k| state.residual[k]).sum();
            worst = worst.max(grad.abs());
        }
        for g in 0..self.n_groups() {
            let w = self.weights[g];
            if !w.is_finite() {
                continue;
            }
            let kappa = lambda * self.factor * w;
            let z = self.group_dot(g, &state.residual);
            let norm_b = group_norm(&state.beta[g]);
            if norm_b == 0.0 {
                worst = worst.max((group_norm(&z) - kappa).max(0.0));
            } else {
                for t in 0..self.n_arms {
                    if self.usable[g][t] {
                        let v = z[t] - kappa * state.beta[g][t] / norm_b;
                        worst = worst.max(v.abs());
                    }
                }
            }
        }
        worst
    }

    /// Block coordinate descent with an active-set strategy; warm-startable.
    ///
    /// A screening pass restricts the working set to groups whose gradient
    /// norm is anywhere near the penalty threshold; a final full pass over
    /// all groups catches screening violations, so the solution satisfies
    /// the full-problem optimality conditions regardless of the screen.
    pub fn solve(
        &self,
        lambda: f64,
        warm: Option<GroupLassoState>,
        opts: &SolveOptions,
    ) -> (GroupLassoState, SolveDiagnostics) {
        let mut state = warm.unwrap_or_else(|| self.initial_state());
        let mut trace = Vec::new();
        let mut sweeps = 0;
        let mut converged = false;

        // screen on the warm-start residual: keep groups with
        // ||X_g^T r|| >= 0.5 * kappa_g, plus everything currently active
        let mut working: Vec<usize> = (0..self.n_groups())
            .filter(|&g| {
                if !self.weights[g].is_finite() {
                    return false;
                }
                if state.beta[g].iter().any(|b| *b != 0.0) {
                    return true;
                }
                let kappa = lambda * self.factor * self.weights[g];
                group_norm(&self.group_dot(g, &state.residual)) >= 0.5 * kappa
            })
            .collect();

        'outer: loop {
            // optimize over the working set
            loop {
                let delta = self.sweep(&mut state, Some(&working), lambda);
                sweeps += 1;
                trace.push(self.objective_state(&state, lambda));
                if delta < opts.tol {
                    break;
                }
                if sweeps >= opts.max_sweeps {
                    break 'outer;
                }
            }
            // full pass over every group: catches screening misses and
            // certifies convergence on the whole problem
            let delta_full = self.sweep(&mut state, None, lambda);
            sweeps += 1;
            trace.push(self.objective_state(&state, lambda));
            if delta_full < opts.tol {
                converged = true;
                break;
            }
            if sweeps >= opts.max_sweeps {
                break;
            }
            working = (0..self.n_groups())
                .filter(|&g| {
                    self.weights[g].is_finite() && state.beta[g].iter().any(|b| *b != 0.0)
                })
                .collect();
        }
        (state, SolveDiagnostics { converged, sweeps, objective_trace: trace })
    }

    /// Turn a solved state into a fit on the original basis scale.
    pub fn finalize(
        &self,
        state: &GroupLassoState,
        diag: &SolveDiagnostics,
        lambda: f64,
    ) -> GroupLassoFit {
        let n_groups = self.n_groups();
        let mut coef = vec![vec![0.0; self.n_arms]; n_groups];
        let mut shift = 0.0;
        let mut active = Vec::new();
        let mut std_norms = vec![0.0; n_groups];
        for g in 0..n_groups {
            std_norms[g] = group_norm(&state.beta[g]);
            if std_norms[g] > 0.0 {
                active.push(g);
            }
            for t in 0..self.n_arms {
                if self.usable[g][t] && state.beta[g][t] != 0.0 {
                    coef[g][t] = state.beta[g][t] / self.sd[g][t];
                    shift += state.beta[g][t] * self.mean[g][t] / self.sd[g][t];
                }
            }
        }
        let intercepts: Vec<f64> = state.intercepts.iter().map(|i| i - shift).collect();
        GroupLassoFit {
            intercepts,
            coef,
            lambda,
            penalty_weights: self.weights.clone(),
            objective: self.objective_of(&state.beta, &state.intercepts, lambda),
            kkt_residual: self.kkt_residual(state, lambda),
            active_groups: active,
            converged: diag.converged,
            sweeps: diag.sweeps,
            std_norms,
        }
    }

    /// Prediction for a design row not necessarily in the solve subset, in
    /// the solver's standardized coordinates.
    fn predict_design_row(
        &self,
        state: &GroupLassoState,
        design: &GroupedDesign,
        row: usize,
    ) -> f64 {
        let arm = design.arms()[row];
        let mut fit = state.intercepts[arm];
        for g in 0..self.n_groups() {
            let beta = &state.beta[g];
            let mut any = false;
            let mut shift = 0.0;
            for t in 0..self.n_arms {
                if beta[t] != 0.0 && self.usable[g][t] {
                    any = true;
                    shift += beta[t] * self.mean[g][t] / self.sd[g][t];
                }
            }
            if !any {
                continue;
            }
            if self.usable[g][arm] {
                fit += beta[arm] * design.values(g)[row] / self.sd[g][arm];
            }
            fit -= shift;
        }
        fit
    }
}

fn group_norm(v: &[f64]) -> f64 {
    v.iter().map(|b| b * b).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// public operations
// ---------------------------------------------------------------------------

/// Smallest lambda at which every penalized group is zero: max over groups of
/// ||X_g^T r0||_2 / (factor * w_g), with r0 the intercept-only residual.
pub fn lambda_max(
    design: &GroupedDesign,
    y: &[f64],
    weights: &[f64],
    size_factor: GroupSizeFactor,
) -> Result<f64> {
    let rows: Vec<usize> = (0..design.n()).collect();
    GroupProblem::new(design, &rows, y, weights, size_factor)?.lambda_max()
}

/// Log-spaced lambda path from lambda_max down to min_ratio * lambda_max.
pub fn default_path(lmax: f64, opts: &PathOptions) -> Vec<f64> {
    if lmax <= 0.0 || opts.len <= 1 {
        return vec![lmax.max(0.0)];
    }
    let lo = (lmax * opts.min_ratio).ln();
    let hi = lmax.ln();
    (0..opts.len)
        .map(|i| (hi + (lo - hi) * i as f64 / (opts.len - 1) as f64).exp())
        .collect()
}

/// Solve one group lasso problem on the full design.
pub fn group_lasso_fit(
    design: &GroupedDesign,
    y: &[f64],
    lambda: f64,
    weights: &[f64],
    opts: &SolveOptions,
) -> Result<GroupLassoFit> {
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be non-negative".into()));
    }
    let rows: Vec<usize> = (0..design.n()).collect();
    let problem = GroupProblem::new(design, &rows, y, weights, opts.size_factor)?;
    let (state, diag) = problem.solve(lambda, None, opts);
    Ok(problem.finalize(&state, &diag, lambda))
}

/// Seeded arm-stratified fold assignment (fold id per row).
fn stratified_folds(arms: &[usize], n_arms: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0usize; arms.len()];
    for t in 0..n_arms {
        let mut idx: Vec<usize> = (0..arms.len()).filter(|&i| arms[i] == t).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

/// 10-fold (by default) cross-validation over a decreasing, warm-started
/// lambda path; returns the argmin-mean-error lambda with ties broken toward
/// the larger (sparser) value.
pub fn cv_select(
    design: &GroupedDesign,
    y: &[f64],
    path: &[f64],
    folds: usize,
    weights: &[f64],
    seed: u64,
    opts: &SolveOptions,
) -> Result<CvSelection> {
    if folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    if design.n() < folds {
        return Err(Error::Data("fewer rows than folds".into()));
    }
    if path.is_empty() {
        return Err(Error::Config("empty lambda path".into()));
    }
    let mut path = path.to_vec();
    path.sort_by(|a, b| b.partial_cmp(a).unwrap());
    if path.len() == 1 {
        return Ok(CvSelection {
            lambda: path[0],
            table: vec![CvPoint { lambda: path[0], mean_error: f64::NAN, se: 0.0 }],
            warnings: vec![],
        });
    }

    let assignment = stratified_folds(design.arms(), design.n_arms(), folds, seed);
    let fold_results: Vec<Result<(Vec<f64>, Vec<f64>, Option<String>)>> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..design.n()).filter(|&i| assignment[i] != f).collect();
            let held: Vec<usize> = (0..design.n()).filter(|&i| assignment[i] == f).collect();
            if held.is_empty() || train.is_empty() {
                return Err(Error::Data(format!("fold {f} is degenerate")));
            }
            let mut warning = None;
            let mut arm_seen = vec![false; design.n_arms()];
            for &i in &train {
                arm_seen[design.arms()[i]] = true;
            }
            if let Some(t) = arm_seen.iter().position(|s| !s) {
                warning = Some(format!(
                    "fold {f}: arm {t} absent from training split; its intercept uses the global mean"
                ));
            }
            let problem = GroupProblem::new(design, &train, y, weights, opts.size_factor)?;
            let mut sse = vec![0.0; path.len()];
            let mut counts = vec![0.0; path.len()];
            let mut warm: Option<GroupLassoState> = None;
            for (j, &lam) in path.iter().enumerate() {
                let (state, _diag) = problem.solve(lam, warm.take(), opts);
                for &i in &held {
                    let pred = problem.predict_design_row(&state, design, i);
                    let e = y[i] - pred;
                    sse[j] += e * e;
                    counts[j] += 1.0;
                }
                warm = Some(state);
            }
            Ok((sse, counts, warning))
        })
        .collect();

    let mut sse = vec![0.0; path.len()];
    let mut fold_means: Vec<Vec<f64>> = Vec::new();
    let mut warnings = Vec::new();
    for r in fold_results {
        let (s, c, w) = r?;
        let means: Vec<f64> = s.iter().zip(&c).map(|(a, b)| a / b).collect();
        for j in 0..path.len() {
            sse[j] += s[j];
        }
        fold_means.push(means);
        if let Some(w) = w {
            warnings.push(w);
        }
    }
    let n = design.n() as f64;
    let table: Vec<CvPoint> = path
        .iter()
        .enumerate()
        .map(|(j, &lam)| {
            let per_fold: Vec<f64> = fold_means.iter().map(|m| m[j]).collect();
            let mean_error = sse[j] / n;
            let fm = crate::util::mean(&per_fold);
            let var = per_fold.iter().map(|v| (v - fm) * (v - fm)).sum::<f64>()
                / (per_fold.len().saturating_sub(1)).max(1) as f64;
            CvPoint { lambda: lam, mean_error, se: (var / per_fold.len() as f64).sqrt() }
        })
        .collect();

    // argmin mean error; ties go to the larger lambda (path is decreasing)
    let mut best = 0;
    for j in 1..table.len() {
        if table[j].mean_error < table[best].mean_error {
            best = j;
        }
    }
    Ok(CvSelection { lambda: table[best].lambda, table, warnings })
}

/// Warm-started path solve on the full data down to (and including) the
/// target lambda.
fn path_fit(
    problem: &GroupProblem,
    path: &[f64],
    target: f64,
    opts: &SolveOptions,
) -> (GroupLassoState, SolveDiagnostics) {
    let mut warm: Option<GroupLassoState> = None;
    let mut total_sweeps = 0;
    for &lam in path {
        if lam < target {
            break;
        }
        let (state, diag) = problem.solve(lam, warm.take(), opts);
        total_sweeps += diag.sweeps;
        if lam == target {
            return (
                state,
                SolveDiagnostics {
                    converged: diag.converged,
                    sweeps: total_sweeps,
                    objective_trace: diag.objective_trace,
                },
            );
        }
        warm = Some(state);
    }
    // target not on the path: cold solve
    let (state, diag) = problem.solve(target, warm, opts);
    (state, diag)
}

/// Plain group lasso with unit weights and CV-selected lambda.
pub fn group_lasso_cv(design: &GroupedDesign, y: &[f64], opts: &CvOptions) -> Result<CvFit> {
    let weights = vec![1.0; design.n_groups()];
    let rows: Vec<usize> = (0..design.n()).collect();
    let problem = GroupProblem::new(design, &rows, y, &weights, opts.solve.size_factor)?;
    let lmax = problem.lambda_max()?;
    let path = default_path(lmax, &opts.path);
    let selection = cv_select(design, y, &path, opts.folds, &weights, opts.seed, &opts.solve)?;
    let (state, diag) = path_fit(&problem, &path, selection.lambda, &opts.solve);
    let fit = problem.finalize(&state, &diag, selection.lambda);
    Ok(CvFit { fit, selection })
}

/// Two-stage adaptive group lasso: stage 1 is a plain CV group lasso; its
/// group norms become inverse penalty weights (infinite for zeroed groups);
/// stage 2 re-fits with its own CV-selected lambda. Groups zeroed in stage 1
/// stay zero.
pub fn adaptive_group_lasso(
    design: &GroupedDesign,
    y: &[f64],
    opts: &CvOptions,
) -> Result<AdaptiveFit> {
    let stage1 = group_lasso_cv(design, y, opts)?;
    let weights: Vec<f64> = stage1
        .fit
        .std_norms
        .iter()
        .map(|n| if *n > 0.0 { 1.0 / n } else { f64::INFINITY })
        .collect();
    if weights.iter().all(|w| !w.is_finite()) {
        return Ok(AdaptiveFit {
            fit: stage1.fit.clone(),
            stage1: stage1.fit,
            stage1_selection: stage1.selection,
            stage2_selection: None,
            intercept_only: true,
        });
    }
    let rows: Vec<usize> = (0..design.n()).collect();
    let problem = GroupProblem::new(design, &rows, y, &weights, opts.solve.size_factor)?;
    let lmax = problem.lambda_max()?;
    let path = default_path(lmax, &opts.path);
    let selection = cv_select(design, y, &path, opts.folds, &weights, opts.seed + 1, &opts.solve)?;
    let (state, diag) = path_fit(&problem, &path, selection.lambda, &opts.solve);
    let fit = problem.finalize(&state, &diag, selection.lambda);
    Ok(AdaptiveFit {
        fit,
        stage1: stage1.fit,
        stage1_selection: stage1.selection,
        stage2_selection: Some(selection),
        intercept_only: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{GroupedDesign, LinearTerm};
    use crate::data::Dataset;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Design whose group g basis values are `values[g]` (identity linear
    /// terms), with the given arm labels.
    fn design_from_matrix(values: &[Vec<f64>], w: &[usize]) -> GroupedDesign {
        let n = w.len();
        let p = values.len();
        let mut x = Vec::with_capacity(n * p);
        for i in 0..n {
            for g in 0..p {
                x.push(values[g][i]);
            }
        }
        let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
        let data = Dataset::from_parts(vec![0.0; n], w.to_vec(), x, p, names).unwrap();
        let linears: Vec<LinearTerm> = (0..p)
            .map(|j| LinearTerm { col: j, lower: -1e300, upper: 1e300, scale: 1.0 })
            .collect();
        GroupedDesign::build(&data, &[], &linears).unwrap()
    }

    fn random_instance(
        n: usize,
        n_groups: usize,
        n_arms: usize,
        seed: u64,
    ) -> (GroupedDesign, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_arms)).collect();
        let values: Vec<Vec<f64>> = (0..n_groups)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let design = design_from_matrix(&values, &w);
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let signal: f64 = values.iter().take(2).map(|v| v[i]).sum();
                signal * (1.0 + w[i] as f64) + rng.gen_range(-0.3..0.3)
            })
            .collect();
        (design, y)
    }

    #[test]
    fn lambda_max_zero_when_y_matches_arm_means() {
        let values = vec![vec![1.0, -1.0, 0.5, -0.5, 2.0, -2.0]];
        let w = vec![0, 0, 1, 1, 0, 1];
        let design = design_from_matrix(&values, &w);
        // y constant within arm: the intercept-only residual is exactly zero
        let y: Vec<f64> = w.iter().map(|&a| 3.0 + a as f64).collect();
        let lmax = lambda_max(&design, &y, &[1.0], GroupSizeFactor::SqrtT).unwrap();
        assert_abs_diff_eq!(lmax, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_max_hand_check_single_group() {
        // 4 rows, one group; independent route via the standardized columns
        let values = vec![vec![-1.0, 1.0, -2.0, 2.0]];
        let w = vec![0, 0, 1, 1];
        let design = design_from_matrix(&values, &w);
        let y = vec![1.0, 3.0, -1.0, 5.0];
        let weights = [1.0];
        let problem =
            GroupProblem::new(&design, &[0, 1, 2, 3], &y, &weights, GroupSizeFactor::SqrtT)
                .unwrap();
        let lmax = problem.lambda_max().unwrap();

        let arm_mean = [2.0, 2.0]; // per-arm means of y
        let r0: Vec<f64> = (0..4).map(|i| y[i] - arm_mean[w[i]]).collect();
        let mut z2 = 0.0;
        for t in 0..2 {
            let col = problem.std_column(0, t);
            let dot: f64 = col.iter().zip(&r0).map(|(c, r)| c * r).sum();
            z2 += dot * dot;
        }
        let expected = z2.sqrt() / 1.0f64.sqrt(); // sqrt(T) with T = 1
        assert_abs_diff_eq!(lmax, expected, epsilon = 1e-10);
    }

    #[test]
    fn above_lambda_max_everything_is_zero() {
        let (design, y) = random_instance(40, 5, 3, 1);
        let weights = vec![1.0; 5];
        let lmax = lambda_max(&design, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
        let fit = group_lasso_fit(
            &design,
            &y,
            lmax * (1.0 + 1e-9),
            &weights,
            &SolveOptions::default(),
        )
        .unwrap();
        assert!(fit.active_groups.is_empty());
        for row in &fit.coef {
            assert!(row.iter().all(|c| *c == 0.0));
        }
        // intercepts equal the per-arm means of y
        for t in 0..3 {
            let rows: Vec<usize> = (0..40).filter(|&i| design.arms()[i] == t).collect();
            let mean = rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64;
            assert_abs_diff_eq!(fit.intercepts[t], mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn lambda_zero_matches_ols_oracle() {
        let (design, y) = random_instance(24, 2, 2, 7);
        let weights = vec![1.0; 2];
        let rows: Vec<usize> = (0..24).collect();
        let problem =
            GroupProblem::new(&design, &rows, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
        let (state, _) = problem.solve(0.0, None, &SolveOptions::default());

        // normal equations on [intercepts | std columns]
        let mut cols: Vec<Vec<f64>> = (0..2).map(|t| problem.intercept_column(t)).collect();
        for g in 0..2 {
            for t in 0..2 {
                cols.push(problem.std_column(g, t));
            }
        }
        let d = cols.len();
        let mut a = vec![vec![0.0; d + 1]; d];
        for i in 0..d {
            for j in 0..d {
                a[i][j] = cols[i].iter().zip(&cols[j]).map(|(x, y)| x * y).sum();
            }
            a[i][d] = cols[i].iter().zip(&y).map(|(x, y)| x * y).sum();
        }
        // gaussian elimination with partial pivoting
        for k in 0..d {
            let piv = (k..d).max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap()).unwrap();
            a.swap(k, piv);
            for i in k + 1..d {
                let f = a[i][k] / a[k][k];
                for j in k..=d {
                    a[i][j] -= f * a[k][j];
                }
            }
        }
        let mut sol = vec![0.0; d];
        for k in (0..d).rev() {
            let mut s = a[k][d];
            for j in k + 1..d {
                s -= a[k][j] * sol[j];
            }
            sol[k] = s / a[k][k];
        }
        for t in 0..2 {
            assert_abs_diff_eq!(state.intercepts[t], sol[t], epsilon = 1e-8);
        }
        for g in 0..2 {
            for t in 0..2 {
                assert_abs_diff_eq!(state.beta[g][t], sol[2 + g * 2 + t], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn orthonormal_single_group_soft_threshold() {
        // per-arm symmetric basis values: masked columns have mean zero, so
        // the standardized group Gram is exactly n I
        let values = vec![vec![-1.0, 1.0, -2.0, 2.0, -0.5, 0.5, -1.5, 1.5]];
        let w = vec![0, 0, 1, 1, 0, 0, 1, 1];
        let design = design_from_matrix(&values, &w);
        let y = vec![0.4, 1.8, -0.6, 2.2, -1.0, 0.2, 0.8, -1.4];
        let weights = [1.0];
        let rows: Vec<usize> = (0..8).collect();
        let problem =
            GroupProblem::new(&design, &rows, &y, &weights, GroupSizeFactor::SqrtT).unwrap();

        // y has per-arm mean zero? not necessarily; compute r0 against arm means
        let mut arm_mean = [0.0f64; 2];
        for t in 0..2 {
            let rows_t: Vec<usize> = (0..8).filter(|&i| w[i] == t).collect();
            arm_mean[t] = rows_t.iter().map(|&i| y[i]).sum::<f64>() / rows_t.len() as f64;
        }
        let r0: Vec<f64> = (0..8).map(|i| y[i] - arm_mean[w[i]]).collect();
        let mut z = [0.0f64; 2];
        for t in 0..2 {
            let col = problem.std_column(0, t);
            z[t] = col.iter().zip(&r0).map(|(c, r)| c * r).sum();
        }
        let znorm = (z[0] * z[0] + z[1] * z[1]).sqrt();
        let n = 8.0;
        for lambda in [0.1 * znorm, 0.5 * znorm, 0.9 * znorm] {
            let kappa = lambda * 1.0; // sqrt(T) = 1
            let (state, _) = problem.solve(lambda, None, &SolveOptions::default());
            let scale = (1.0 - kappa / znorm).max(0.0) / n;
            for t in 0..2 {
                assert_abs_diff_eq!(state.beta[0][t], scale * z[t], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn kkt_holds_on_random_instances() {
        for seed in 0..8 {
            let (design, y) = random_instance(30, 4, 3, 100 + seed);
            let weights = vec![1.0; 4];
            let lmax = lambda_max(&design, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
            for frac in [0.5, 0.1, 0.01] {
                let fit = group_lasso_fit(
                    &design,
                    &y,
                    lmax * frac,
                    &weights,
                    &SolveOptions::default(),
                )
                .unwrap();
                assert!(fit.converged);
                assert!(fit.kkt_residual <= 1e-6, "kkt = {}", fit.kkt_residual);
                // exact group sparsity
                for (g, row) in fit.coef.iter().enumerate() {
                    if !fit.active_groups.contains(&g) {
                        assert!(row.iter().all(|c| *c == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn objective_is_non_increasing_across_sweeps() {
        let (design, y) = random_instance(40, 6, 3, 42);
        let weights = vec![1.0; 6];
        let rows: Vec<usize> = (0..40).collect();
        let problem =
            GroupProblem::new(&design, &rows, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
        let lmax = problem.lambda_max().unwrap();
        let (_, diag) = problem.solve(0.05 * lmax, None, &SolveOptions::default());
        for pair in diag.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs().max(1.0));
        }
    }

    #[test]
    fn warm_path_matches_cold_solutions() {
        let (design, y) = random_instance(50, 6, 3, 13);
        let weights = vec![1.0; 6];
        let rows: Vec<usize> = (0..50).collect();
        let problem =
            GroupProblem::new(&design, &rows, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
        let lmax = problem.lambda_max().unwrap();
        let path = default_path(lmax, &PathOptions { len: 12, min_ratio: 1e-2 });
        let opts = SolveOptions::default();
        let mut warm: Option<GroupLassoState> = None;
        for &lam in &path {
            let (state, _) = problem.solve(lam, warm.take(), &opts);
            let warm_obj = problem.objective_of(&state.beta, &state.intercepts, lam);
            let (cold, _) = problem.solve(lam, None, &opts);
            let cold_obj = problem.objective_of(&cold.beta, &cold.intercepts, lam);
            assert!((warm_obj - cold_obj).abs() <= 1e-6, "{warm_obj} vs {cold_obj}");
            warm = Some(state);
        }
    }

    #[test]
    fn reported_coefficients_reproduce_fitted_values_on_original_columns() {
        let (design, y) = random_instance(36, 5, 3, 77);
        let weights = vec![1.0; 5];
        let lmax = lambda_max(&design, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
        let rows: Vec<usize> = (0..36).collect();
        let problem =
            GroupProblem::new(&design, &rows, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
        let (state, diag) = problem.solve(0.05 * lmax, None, &SolveOptions::default());
        let fit = problem.finalize(&state, &diag, 0.05 * lmax);
        // residual-implied fitted values vs original-scale reconstruction
        for i in 0..36 {
            let arm = design.arms()[i];
            let mut pred = fit.intercepts[arm];
            for g in 0..design.n_groups() {
                pred += fit.coef[g][arm] * design.values(g)[i];
            }
            let solver_fit = problem.predict_design_row(&state, &design, i);
            assert_abs_diff_eq!(pred, solver_fit, epsilon = 1e-10);
        }
    }

    #[test]
    fn cv_single_point_path_returns_it() {
        let (design, y) = random_instance(40, 4, 2, 3);
        let sel = cv_select(
            &design,
            &y,
            &[0.37],
            5,
            &vec![1.0; 4],
            1,
            &SolveOptions::default(),
        )
        .unwrap();
        assert_eq!(sel.lambda, 0.37);
    }

    #[test]
    fn cv_on_pure_noise_prefers_large_lambda() {
        let mut hits = 0;
        let n_seeds = 10;
        for seed in 0..n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let n = 200;
            let w: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3usize)).collect();
            let values: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let design = design_from_matrix(&values, &w);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let weights = vec![1.0; 20];
            let lmax = lambda_max(&design, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
            let path = default_path(lmax, &PathOptions { len: 50, min_ratio: 1e-2 });
            let sel = cv_select(
                &design,
                &y,
                &path,
                10,
                &weights,
                seed,
                &SolveOptions { tol: 1e-8, ..Default::default() },
            )
            .unwrap();
            // "near the top": among the 10 largest path values
            if sel.lambda >= path[9] {
                hits += 1;
            }
        }
        assert!(hits * 10 >= 8 * n_seeds, "only {hits}/{n_seeds} runs picked a top lambda");
    }

    #[test]
    fn cv_error_at_zero_exceeds_selected() {
        // overfit-prone: nearly as many columns as rows
        let (design, y) = random_instance(40, 12, 3, 21);
        let weights = vec![1.0; 12];
        let lmax = lambda_max(&design, &y, &weights, GroupSizeFactor::SqrtT).unwrap();
        let mut path = default_path(lmax, &PathOptions { len: 20, min_ratio: 1e-2 });
        path.push(0.0);
        let opts = SolveOptions { tol: 1e-7, max_sweeps: 4000, ..Default::default() };
        let sel = cv_select(&design, &y, &path, 5, &weights, 9, &opts).unwrap();
        let best = sel.table.iter().find(|p| p.lambda == sel.lambda).unwrap().mean_error;
        let at_zero = sel.table.last().unwrap();
        assert_eq!(at_zero.lambda, 0.0);
        assert!(at_zero.mean_error > best);
    }

    #[test]
    fn cv_warns_when_training_split_misses_an_arm() {
        let mut values = vec![Vec::new()];
        let mut w = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for i in 0..41 {
            values[0].push(rng.gen_range(-1.0..1.0));
            w.push(if i == 40 { 2 } else { i % 2 });
        }
        let design = design_from_matrix(&values, &w);
        let y: Vec<f64> = (0..41).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lmax = lambda_max(&design, &y, &[1.0], GroupSizeFactor::SqrtT).unwrap();
        let path = default_path(lmax, &PathOptions { len: 5, min_ratio: 0.1 });
        let sel =
            cv_select(&design, &y, &path, 4, &[1.0], 2, &SolveOptions::default()).unwrap();
        assert!(!sel.warnings.is_empty());
    }

    #[test]
    fn infinite_weight_pins_group_to_zero() {
        let (design, y) = random_instance(30, 3, 2, 15);
        let weights = vec![1.0, f64::INFINITY, 1.0];
        let fit =
            group_lasso_fit(&design, &y, 1e-6, &weights, &SolveOptions::default()).unwrap();
        assert!(fit.coef[1].iter().all(|c| *c == 0.0));
        assert!(!fit.active_groups.contains(&1));
    }

    #[test]
    fn uniform_weights_equal_global_lambda_rescale() {
        let (design, y) = random_instance(30, 4, 2, 19);
        let lam = 0.8;
        let c = 2.5;
        let a = group_lasso_fit(&design, &y, lam, &vec![c; 4], &SolveOptions::default()).unwrap();
        let b =
            group_lasso_fit(&design, &y, lam * c, &vec![1.0; 4], &SolveOptions::default()).unwrap();
        for g in 0..4 {
            for t in 0..2 {
                assert_abs_diff_eq!(a.coef[g][t], b.coef[g][t], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn adaptive_active_set_is_nested() {
        for seed in 0..5 {
            let (design, y) = random_instance(60, 5, 3, 700 + seed);
            let opts = CvOptions {
                folds: 5,
                seed,
                path: PathOptions { len: 25, min_ratio: 1e-2 },
                solve: SolveOptions { tol: 1e-9, ..Default::default() },
            };
            let ada = adaptive_group_lasso(&design, &y, &opts).unwrap();
            for g in &ada.fit.active_groups {
                assert!(
                    ada.stage1.active_groups.contains(g),
                    "group {g} active in stage 2 but not in stage 1"
                );
            }
        }
    }

    #[test]
    fn fit_json_round_trips_infinite_weights() {
        let (design, y) = random_instance(30, 3, 2, 23);
        let weights = vec![1.0, f64::INFINITY, 2.0];
        let fit =
            group_lasso_fit(&design, &y, 0.5, &weights, &SolveOptions::default()).unwrap();
        let js = serde_json::to_string(&fit).unwrap();
        let back: GroupLassoFit = serde_json::from_str(&js).unwrap();
        assert_eq!(back.penalty_weights[1], f64::INFINITY);
        assert_eq!(back.coef, fit.coef);
    }
}
