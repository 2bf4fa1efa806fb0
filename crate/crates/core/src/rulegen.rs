//! Multi-target tree boosting over transformed outcomes and decomposition of
//! the fitted trees into candidate rules.

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, RuleTerm};
use crate::transform::TransformedOutcomes;
use crate::{Error, Result};

/// Base learner for the boosting steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Learner {
    /// CART-style variance-reduction splits.
    Gbm,
    /// Association-test-gated splits: a node splits only when the strongest
    /// covariate/target correlation is significant after Bonferroni
    /// adjustment.
    Ctree,
}

/// Boosting configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostConfig {
    /// Number of trees M.
    pub trees: usize,
    /// Mean number of terminal nodes per tree; actual sizes are
    /// 2 + floor(Exp) draws.
    pub mean_leaves: f64,
    /// Shrinkage applied to each tree's contribution (0 allowed for
    /// diagnostics; 0 means residuals never change).
    pub shrinkage: f64,
    pub learner: Learner,
    pub min_node_size: usize,
    /// Row fraction used to fit each tree (residuals update on all rows).
    pub subsample_fraction: f64,
    /// Significance level for the ctree association test.
    pub ctree_alpha: f64,
    pub seed: u64,
}

impl Default for BoostConfig {
    fn default() -> Self {
        BoostConfig {
            trees: 333,
            mean_leaves: 2.0,
            shrinkage: 0.01,
            learner: Learner::Gbm,
            min_node_size: 10,
            subsample_fraction: 0.5,
            ctree_alpha: 0.05,
            seed: 0,
        }
    }
}

impl BoostConfig {
    pub fn validate(&self, n_rows: usize) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::Config("tree count must be at least 1".into()));
        }
        if !(self.mean_leaves >= 2.0) {
            return Err(Error::Config("mean leaves must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::Config("shrinkage must lie in [0, 1]".into()));
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return Err(Error::Config("subsample fraction must lie in (0, 1]".into()));
        }
        if self.min_node_size == 0 {
            return Err(Error::Config("min node size must be at least 1".into()));
        }
        if !(0.0 < self.ctree_alpha && self.ctree_alpha <= 1.0) {
            return Err(Error::Config("ctree alpha must lie in (0, 1]".into()));
        }
        let k = subsample_count(n_rows, self.subsample_fraction);
        if k < 2 * self.min_node_size {
            return Err(Error::Config(format!(
                "subsample of {k} rows is smaller than 2 * min_node_size = {}",
                2 * self.min_node_size
            )));
        }
        Ok(())
    }
}

/// Binary split: rows with x_col < threshold go left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub col: usize,
    pub threshold: f64,
}

/// Node of a fitted multi-target regression tree. Every node carries the
/// per-target mean of its rows; internal nodes additionally carry the split
/// and both children.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub split: Option<Split>,
    pub left: Option<Box<TreeNode>>,
    pub right: Option<Box<TreeNode>>,
    /// Per-target mean of the residuals in this node.
    pub value: Vec<f64>,
    /// Number of training rows routed to this node.
    pub rows: usize,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }

    pub fn n_nodes(&self) -> usize {
        1 + self.left.as_ref().map_or(0, |n| n.n_nodes())
            + self.right.as_ref().map_or(0, |n| n.n_nodes())
    }

    pub fn n_leaves(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.left.as_ref().unwrap().n_leaves() + self.right.as_ref().unwrap().n_leaves()
        }
    }

    /// Leaf value vector for input x.
    pub fn predict(&self, x: &[f64]) -> &[f64] {
        match &self.split {
            None => &self.value,
            Some(s) => {
                if x[s.col] < s.threshold {
                    self.left.as_ref().unwrap().predict(x)
                } else {
                    self.right.as_ref().unwrap().predict(x)
                }
            }
        }
    }
}

/// Result of a boosting run: the fitted trees plus the per-target column
/// means the residuals started from. Only tree structure feeds rule
/// extraction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoostFit {
    pub trees: Vec<TreeNode>,
    pub base: Vec<f64>,
    /// Sum of squared residuals after each boosting step (entry 0 is the
    /// initial centred loss).
    pub loss_trace: Vec<f64>,
}

/// Draw a tree size (terminal-node count): 2 + floor(Exp) with the
/// exponential's mean equal to `mean_leaves - 2`.
pub fn sample_tree_size(mean_leaves: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(mean_leaves >= 2.0) {
        return Err(Error::Config("mean leaves must be at least 2".into()));
    }
    if mean_leaves <= 2.0 + 1e-12 {
        return Ok(2);
    }
    let exp = Exp::new(1.0 / (mean_leaves - 2.0))
        .map_err(|e| Error::Config(format!("bad exponential rate: {e}")))?;
    let omega: f64 = exp.sample(rng);
    Ok(2 + omega.floor() as usize)
}

fn subsample_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

// ---------------------------------------------------------------------------
// tree construction
// ---------------------------------------------------------------------------

struct BuildNode {
    rows: Vec<usize>,
    value: Vec<f64>,
    candidate: Option<Candidate>,
    split: Option<Split>,
    children: Option<(usize, usize)>,
}

#[derive(Clone, Copy)]
struct Candidate {
    col: usize,
    threshold: f64,
    gain: f64,
}

struct SplitContext<'a> {
    data: &'a Dataset,
    resid: &'a [f64],
    n_targets: usize,
    /// Per-target criterion weights (1 / residual variance at tree-fit time;
    /// 0 for degenerate targets).
    weights: Vec<f64>,
    min_node_size: usize,
    learner: Learner,
    alpha: f64,
}

impl<'a> SplitContext<'a> {
    fn node_means(&self, rows: &[usize]) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_targets];
        for &i in rows {
            for t in 0..self.n_targets {
                sums[t] += self.resid[i * self.n_targets + t];
            }
        }
        sums.iter().map(|s| s / rows.len() as f64).collect()
    }

    /// Best admissible split for the node, or `None`.
    fn best_split(&self, rows: &[usize]) -> Option<Candidate> {
        if rows.len() < 2 * self.min_node_size {
            return None;
        }
        match self.learner {
            Learner::Gbm => {
                let mut best: Option<Candidate> = None;
                for j in 0..self.data.p() {
                    if let Some(c) = self.best_split_on(rows, j) {
                        if best.map_or(true, |b| c.gain > b.gain) {
                            best = Some(c);
                        }
                    }
                }
                best
            }
            Learner::Ctree => {
                let j = self.ctree_select_covariate(rows)?;
                self.best_split_on(rows, j)
            }
        }
    }

    /// Best variance-reduction split point on covariate j.
    fn best_split_on(&self, rows: &[usize], j: usize) -> Option<Candidate> {
        let m = rows.len();
        let mut sorted = rows.to_vec();
        sorted.sort_by(|&a, &b| {
            self.data.x(a, j).partial_cmp(&self.data.x(b, j)).unwrap().then(a.cmp(&b))
        });
        let mut total = vec![0.0; self.n_targets];
        for &i in &sorted {
            for t in 0..self.n_targets {
                total[t] += self.resid[i * self.n_targets + t];
            }
        }
        let parent: f64 = (0..self.n_targets)
            .map(|t| self.weights[t] * total[t] * total[t] / m as f64)
            .sum();

        let mut left = vec![0.0; self.n_targets];
        let mut best: Option<Candidate> = None;
        for k in 1..m {
            let i = sorted[k - 1];
            for t in 0..self.n_targets {
                left[t] += self.resid[i * self.n_targets + t];
            }
            if k < self.min_node_size || m - k < self.min_node_size {
                continue;
            }
            let lo = self.data.x(sorted[k - 1], j);
            let hi = self.data.x(sorted[k], j);
            if !(lo < hi) {
                continue;
            }
            let mut gain = -parent;
            for t in 0..self.n_targets {
                let right = total[t] - left[t];
                gain += self.weights[t]
                    * (left[t] * left[t] / k as f64 + right * right / (m - k) as f64);
            }
            if gain > 0.0 && best.map_or(true, |b| gain > b.gain) {
                best = Some(Candidate { col: j, threshold: 0.5 * (lo + hi), gain });
            }
        }
        best
    }

    /// Covariate with the strongest correlation-test statistic across
    /// targets, if significant after Bonferroni adjustment.
    fn ctree_select_covariate(&self, rows: &[usize]) -> Option<usize> {
        let m = rows.len();
        if m < 3 {
            return None;
        }
        let mut best_stat = 0.0;
        let mut best_j = None;
        for j in 0..self.data.p() {
            let xs: Vec<f64> = rows.iter().map(|&i| self.data.x(i, j)).collect();
            let mut stat_j: f64 = 0.0;
            for t in 0..self.n_targets {
                if self.weights[t] == 0.0 {
                    continue;
                }
                let zs: Vec<f64> =
                    rows.iter().map(|&i| self.resid[i * self.n_targets + t]).collect();
                let r = crate::util::pearson(&xs, &zs);
                let stat = if 1.0 - r * r < 1e-12 {
                    f64::INFINITY
                } else {
                    r.abs() * ((m - 2) as f64 / (1.0 - r * r)).sqrt()
                };
                stat_j = stat_j.max(stat);
            }
            if best_j.is_none() || stat_j > best_stat {
                best_stat = stat_j;
                best_j = Some(j);
            }
        }
        let j = best_j?;
        let p_raw = if !best_stat.is_finite() {
            0.0
        } else {
            let dist = StudentsT::new(0.0, 1.0, (m - 2) as f64).ok()?;
            2.0 * (1.0 - dist.cdf(best_stat))
        };
        let n_tests = (self.data.p() * self.n_targets) as f64;
        let p_adj = (p_raw * n_tests).min(1.0);
        if p_adj <= self.alpha {
            Some(j)
        } else {
            None
        }
    }
}

/// Per-target criterion weights: inverse residual variance over the fit
/// rows, zero for (numerically) constant targets.
fn target_weights(rows: &[usize], resid: &[f64], n_targets: usize) -> Vec<f64> {
    let m = rows.len() as f64;
    (0..n_targets)
        .map(|t| {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for &i in rows {
                let z = resid[i * n_targets + t];
                sum += z;
                sq += z * z;
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            // genuinely constant targets leave dust-level variance behind
            let floor = 1e-6 * (mean.abs() + 1e-12);
            if var > floor * floor {
                1.0 / var
            } else {
                0.0
            }
        })
        .collect()
}

/// Fit one multi-target tree by best-first growth to at most `size` leaves.
///
/// `residuals` is the full n x n_targets matrix (row-major); only the rows in
/// `rows` participate in the fit.
pub fn fit_tree(
    data: &Dataset,
    rows: &[usize],
    residuals: &[f64],
    n_targets: usize,
    size: usize,
    learner: Learner,
    min_node_size: usize,
    ctree_alpha: f64,
) -> Result<TreeNode> {
    if size < 2 {
        return Err(Error::Config("tree size must be at least 2 leaves".into()));
    }
    if rows.is_empty() {
        return Err(Error::Data("cannot fit a tree on zero rows".into()));
    }
    if residuals.len() != data.n() * n_targets {
        return Err(Error::Data("residual matrix shape does not match dataset".into()));
    }
    let ctx = SplitContext {
        data,
        resid: residuals,
        n_targets,
        weights: target_weights(rows, residuals, n_targets),
        min_node_size,
        learner,
        alpha: ctree_alpha,
    };

    let mut arena: Vec<BuildNode> = Vec::new();
    let root_value = ctx.node_means(rows);
    let root_cand = ctx.best_split(rows);
    arena.push(BuildNode {
        rows: rows.to_vec(),
        value: root_value,
        candidate: root_cand,
        split: None,
        children: None,
    });

    let mut n_leaves = 1;
    while n_leaves < size {
        // expand the leaf whose best split improves the criterion the most
        let mut pick: Option<(usize, f64)> = None;
        for (idx, node) in arena.iter().enumerate() {
            if node.children.is_some() {
                continue;
            }
            if let Some(c) = node.candidate {
                if pick.map_or(true, |(_, g)| c.gain > g) {
                    pick = Some((idx, c.gain));
                }
            }
        }
        let Some((idx, _)) = pick else { break };
        let cand = arena[idx].candidate.unwrap();
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            arena[idx].rows.iter().partition(|&&i| ctx.data.x(i, cand.col) < cand.threshold);
        debug_assert!(left_rows.len() >= min_node_size && right_rows.len() >= min_node_size);

        let push_child = |rows: Vec<usize>, arena: &mut Vec<BuildNode>| -> usize {
            let value = ctx.node_means(&rows);
            let candidate = ctx.best_split(&rows);
            arena.push(BuildNode { rows, value, candidate, split: None, children: None });
            arena.len() - 1
        };
        let li = push_child(left_rows, &mut arena);
        let ri = push_child(right_rows, &mut arena);
        arena[idx].split = Some(Split { col: cand.col, threshold: cand.threshold });
        arena[idx].children = Some((li, ri));
        n_leaves += 1;
    }

    Ok(freeze(&arena, 0))
}

fn freeze(arena: &[BuildNode], idx: usize) -> TreeNode {
    let node = &arena[idx];
    match node.children {
        None => TreeNode {
            split: None,
            left: None,
            right: None,
            value: node.value.clone(),
            rows: node.rows.len(),
        },
        Some((l, r)) => TreeNode {
            split: node.split,
            left: Some(Box::new(freeze(arena, l))),
            right: Some(Box::new(freeze(arena, r))),
            value: node.value.clone(),
            rows: node.rows.len(),
        },
    }
}

/// Least-squares gradient boosting on the T-dimensional transformed-outcome
/// target. Residuals start at Z minus its column means; each tree is fit on
/// a fresh subsample with a randomly drawn size, and residuals are updated on
/// all rows by `shrinkage * prediction`.
pub fn boost(z: &TransformedOutcomes, data: &Dataset, cfg: &BoostConfig) -> Result<BoostFit> {
    if z.n() != data.n() || z.t_arms() != data.t_max() {
        return Err(Error::Data("transformed outcomes do not match dataset".into()));
    }
    cfg.validate(data.n())?;

    let n = data.n();
    let t = z.t_arms();
    let mut base = vec![0.0; t];
    for i in 0..n {
        for (k, v) in z.row(i).iter().enumerate() {
            base[k] += v;
        }
    }
    for b in base.iter_mut() {
        *b /= n as f64;
    }
    let mut resid = vec![0.0; n * t];
    for i in 0..n {
        for k in 0..t {
            resid[i * t + k] = z.row(i)[k] - base[k];
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k_sub = subsample_count(n, cfg.subsample_fraction);
    let mut trees = Vec::with_capacity(cfg.trees);
    let mut loss_trace = Vec::with_capacity(cfg.trees + 1);
    loss_trace.push(resid.iter().map(|r| r * r).sum());

    for _ in 0..cfg.trees {
        let size = sample_tree_size(cfg.mean_leaves, &mut rng)?;
        let rows: Vec<usize> = if k_sub == n {
            (0..n).collect()
        } else {
            let mut idx = rand::seq::index::sample(&mut rng, n, k_sub).into_vec();
            idx.sort_unstable();
            idx
        };
        let tree = fit_tree(
            data,
            &rows,
            &resid,
            t,
            size,
            cfg.learner,
            cfg.min_node_size,
            cfg.ctree_alpha,
        )?;
        if cfg.shrinkage > 0.0 {
            for i in 0..n {
                let pred = tree.predict(data.x_row(i));
                for k in 0..t {
                    resid[i * t + k] -= cfg.shrinkage * pred[k];
                }
            }
        }
        loss_trace.push(resid.iter().map(|r| r * r).sum());
        trees.push(tree);
    }
    Ok(BoostFit { trees, base, loss_trace })
}

/// Decompose a tree into one rule per non-root node: the conjunction of the
/// split conditions on the root-to-node path, with same-variable conditions
/// merged. Emitted in preorder (left child before right child).
pub fn extract_rules(tree: &TreeNode) -> Vec<RuleTerm> {
    let mut out = Vec::new();
    let mut path: Vec<(usize, f64, f64)> = Vec::new();
    descend(tree, &mut path, &mut out);
    out
}

fn descend(node: &TreeNode, path: &mut Vec<(usize, f64, f64)>, out: &mut Vec<RuleTerm>) {
    let Some(split) = node.split else { return };
    let (left, right) = (node.left.as_ref().unwrap(), node.right.as_ref().unwrap());

    path.push((split.col, f64::NEG_INFINITY, split.threshold));
    out.push(RuleTerm::new(path.clone()).expect("tree path produced an empty interval"));
    descend(left, path, out);
    path.pop();

    path.push((split.col, split.threshold, f64::INFINITY));
    out.push(RuleTerm::new(path.clone()).expect("tree path produced an empty interval"));
    descend(right, path, out);
    path.pop();
}

/// Drop exact duplicates (keeping the first occurrence) and rules with
/// support 0 or 1 on the training data; order is otherwise preserved.
pub fn dedupe_rules(rules: Vec<RuleTerm>, data: &Dataset) -> Result<Vec<RuleTerm>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rule in rules {
        if !seen.insert(rule.key()) {
            continue;
        }
        let s = rule.support(data)?;
        if s > 0.0 && s < 1.0 {
            out.push(rule);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::transform::transform_with_probs;
    use approx::assert_abs_diff_eq;

    fn grid_dataset(xcols: Vec<Vec<f64>>) -> Dataset {
        let p = xcols.len();
        let n = xcols[0].len();
        let mut x = Vec::with_capacity(n * p);
        for i in 0..n {
            for col in &xcols {
                x.push(col[i]);
            }
        }
        let y = vec![0.0; n];
        let mut w = vec![0usize; n];
        w[n - 1] = 1;
        let names = (0..p).map(|j| format!("x{}", j + 1)).collect();
        Dataset::from_parts(y, w, x, p, names).unwrap()
    }

    #[test]
    fn degenerate_exponential_always_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_tree_size(2.0, &mut rng).unwrap(), 2);
        }
        assert!(sample_tree_size(1.5, &mut rng).is_err());
    }

    #[test]
    fn exponential_size_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 1_000_000;
        let mut twos = 0usize;
        let mut sum = 0usize;
        for _ in 0..draws {
            let c = sample_tree_size(3.0, &mut rng).unwrap();
            if c == 2 {
                twos += 1;
            }
            sum += c;
        }
        let p2 = twos as f64 / draws as f64;
        let expect = 1.0 - (-1.0f64).exp();
        assert!((p2 - expect).abs() < 0.002, "P(C=2) = {p2}");
        // geometric series for the floor of an exponential:
        // E[2 + floor(omega)] = 2 + sum_{k>=1} e^{-k} = 2 + 1/(e - 1) = 2.58198
        let expect_mean = 2.0 + 1.0 / (std::f64::consts::E - 1.0);
        let mean = sum as f64 / draws as f64;
        assert!((mean - expect_mean).abs() < 0.004, "mean = {mean}");
    }

    #[test]
    fn constant_residuals_give_root_only_tree() {
        let data = grid_dataset(vec![(0..20).map(|i| i as f64).collect()]);
        // a constant whose running sums round: exercises the degenerate-target guard
        let resid: Vec<f64> = vec![0.1; 20 * 2];
        let tree = fit_tree(&data, &(0..20).collect::<Vec<_>>(), &resid, 2, 4, Learner::Gbm, 2, 0.05)
            .unwrap();
        assert!(tree.is_leaf());
        assert_abs_diff_eq!(tree.value[0], 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(tree.value[1], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn binary_covariate_stump_recovers_group_means() {
        let xb: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let data = grid_dataset(vec![xb.clone()]);
        let mut resid = vec![0.0; 20];
        for i in 0..20 {
            resid[i] = if xb[i] == 0.0 { -1.5 } else { 2.5 };
        }
        let rows: Vec<usize> = (0..20).collect();
        let tree = fit_tree(&data, &rows, &resid, 1, 2, Learner::Gbm, 2, 0.05).unwrap();
        let split = tree.split.unwrap();
        assert_eq!(split.col, 0);
        assert_abs_diff_eq!(split.threshold, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(tree.left.as_ref().unwrap().value[0], -1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(tree.right.as_ref().unwrap().value[0], 2.5, epsilon = 1e-12);
    }

    #[test]
    fn four_leaf_tree_leaf_values_match_partition_means() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 200;
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data = grid_dataset(vec![x1.clone(), x2.clone()]);
        let resid: Vec<f64> = (0..n)
            .map(|i| {
                2.0 * (x1[i] > 0.0) as i32 as f64 + 1.0 * (x2[i] > 0.0) as i32 as f64
                    + rng.gen_range(-0.01..0.01)
            })
            .collect();
        let rows: Vec<usize> = (0..n).collect();
        let tree = fit_tree(&data, &rows, &resid, 1, 4, Learner::Gbm, 5, 0.05).unwrap();
        assert_eq!(tree.n_leaves(), 4);

        // brute-force oracle: route every row through the tree and recompute means
        fn check(node: &TreeNode, rows: &[usize], data: &Dataset, resid: &[f64]) {
            let mean = rows.iter().map(|&i| resid[i]).sum::<f64>() / rows.len() as f64;
            assert_abs_diff_eq!(node.value[0], mean, epsilon = 1e-10);
            assert_eq!(node.rows, rows.len());
            if let Some(s) = node.split {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    rows.iter().partition(|&&i| data.x(i, s.col) < s.threshold);
                check(node.left.as_ref().unwrap(), &l, data, resid);
                check(node.right.as_ref().unwrap(), &r, data, resid);
            }
        }
        check(&tree, &rows, &data, &resid);
    }

    #[test]
    fn gbm_criterion_matches_scalar_reference_for_single_target() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let n = 60;
            let cols: Vec<Vec<f64>> =
                (0..3).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let data = grid_dataset(cols.clone());
            let resid: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rows: Vec<usize> = (0..n).collect();
            let tree = fit_tree(&data, &rows, &resid, 1, 2, Learner::Gbm, 5, 0.05).unwrap();
            let got = tree.split.unwrap();

            // scalar reference: plain single-target variance reduction
            let mut best = (0usize, 0.0f64, f64::NEG_INFINITY);
            for j in 0..3 {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.sort_by(|&a, &b| {
                    cols[j][a].partial_cmp(&cols[j][b]).unwrap().then(a.cmp(&b))
                });
                let total: f64 = resid.iter().sum();
                let mut left = 0.0;
                for k in 1..n {
                    left += resid[idx[k - 1]];
                    if k < 5 || n - k < 5 || !(cols[j][idx[k - 1]] < cols[j][idx[k]]) {
                        continue;
                    }
                    let right = total - left;
                    let gain = left * left / k as f64 + right * right / (n - k) as f64
                        - total * total / n as f64;
                    if gain > best.2 {
                        best = (j, 0.5 * (cols[j][idx[k - 1]] + cols[j][idx[k]]), gain);
                    }
                }
            }
            assert_eq!(got.col, best.0);
            assert_abs_diff_eq!(got.threshold, best.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn ctree_splits_informative_and_refuses_noise() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 120;
        let signal: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let data = grid_dataset(vec![noise.clone(), signal.clone()]);
        let rows: Vec<usize> = (0..n).collect();

        let strong: Vec<f64> = (0..n)
            .map(|i| 3.0 * signal[i] + 0.1 * {
                let e: f64 = StandardNormal.sample(&mut rng);
                e
            })
            .collect();
        let tree = fit_tree(&data, &rows, &strong, 1, 2, Learner::Ctree, 5, 0.05).unwrap();
        assert_eq!(tree.split.unwrap().col, 1);

        let pure_noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let tree = fit_tree(&data, &rows, &pure_noise, 1, 2, Learner::Ctree, 5, 0.05).unwrap();
        assert!(tree.is_leaf(), "no association should pass the Bonferroni gate");
    }

    fn boost_setup(n: usize, seed: u64) -> (Dataset, TransformedOutcomes) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let xv = rng.gen_range(-2.0..2.0f64);
            let arm = rng.gen_range(0..3usize);
            y.push(xv + arm as f64 + rng.gen_range(-0.5..0.5));
            w.push(arm);
            x.push(xv);
            x.push(rng.gen_range(0.0..1.0));
        }
        let data = Dataset::from_parts(y, w, x, 2, vec!["x1".into(), "x2".into()]).unwrap();
        let probs = vec![vec![1.0 / 3.0; 3]; n];
        let z = transform_with_probs(&data, &probs).unwrap();
        (data, z)
    }

    #[test]
    fn zero_shrinkage_fits_identical_trees() {
        let (data, z) = boost_setup(80, 31);
        let cfg = BoostConfig {
            trees: 5,
            shrinkage: 0.0,
            subsample_fraction: 1.0,
            min_node_size: 5,
            ..Default::default()
        };
        let fit = boost(&z, &data, &cfg).unwrap();
        for tree in &fit.trees[1..] {
            assert_eq!(tree, &fit.trees[0]);
        }
        // residuals never change, so the loss trace is flat
        for loss in &fit.loss_trace[1..] {
            assert_eq!(*loss, fit.loss_trace[0]);
        }
    }

    #[test]
    fn single_tree_boost_equals_direct_fit() {
        let (data, z) = boost_setup(80, 33);
        let cfg = BoostConfig {
            trees: 1,
            subsample_fraction: 1.0,
            min_node_size: 5,
            seed: 4,
            ..Default::default()
        };
        let fit = boost(&z, &data, &cfg).unwrap();

        let t = z.t_arms();
        let n = data.n();
        let mut base = vec![0.0; t];
        for i in 0..n {
            for k in 0..t {
                base[k] += z.row(i)[k];
            }
        }
        for b in base.iter_mut() {
            *b /= n as f64;
        }
        let mut resid = vec![0.0; n * t];
        for i in 0..n {
            for k in 0..t {
                resid[i * t + k] = z.row(i)[k] - base[k];
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let size = sample_tree_size(cfg.mean_leaves, &mut rng).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let direct =
            fit_tree(&data, &rows, &resid, t, size, Learner::Gbm, 5, 0.05).unwrap();
        assert_eq!(fit.trees[0], direct);
    }

    #[test]
    fn full_sample_training_loss_is_non_increasing() {
        let (data, z) = boost_setup(120, 35);
        let cfg = BoostConfig {
            trees: 40,
            shrinkage: 0.2,
            subsample_fraction: 1.0,
            min_node_size: 5,
            seed: 7,
            ..Default::default()
        };
        let fit = boost(&z, &data, &cfg).unwrap();
        for pair in fit.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9 * pair[0].abs().max(1.0));
        }
    }

    #[test]
    fn boosting_is_reproducible() {
        let (data, z) = boost_setup(100, 37);
        let cfg = BoostConfig { trees: 10, min_node_size: 5, seed: 99, ..Default::default() };
        let a = boost(&z, &data, &cfg).unwrap();
        let b = boost(&z, &data, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a.trees).unwrap(),
            serde_json::to_string(&b.trees).unwrap()
        );
    }

    #[test]
    fn extract_rules_on_small_trees() {
        // root-only tree
        let leaf = TreeNode { split: None, left: None, right: None, value: vec![0.0], rows: 10 };
        assert!(extract_rules(&leaf).is_empty());

        // stump: two complementary half-open rules
        let stump = TreeNode {
            split: Some(Split { col: 2, threshold: 1.5 }),
            left: Some(Box::new(leaf.clone())),
            right: Some(Box::new(leaf.clone())),
            value: vec![0.0],
            rows: 10,
        };
        let rules = extract_rules(&stump);
        assert_eq!(rules.len(), 2);
        let c = rules[0].conditions()[0];
        assert_eq!((c.col, c.lower, c.upper), (2, f64::NEG_INFINITY, 1.5));
        let c = rules[1].conditions()[0];
        assert_eq!((c.col, c.lower, c.upper), (2, 1.5, f64::INFINITY));

        // depth-2 chain on the same variable: the deeper rule has a merged interval
        let chain = TreeNode {
            split: Some(Split { col: 0, threshold: 0.0 }),
            left: Some(Box::new(TreeNode {
                split: Some(Split { col: 0, threshold: -1.0 }),
                left: Some(Box::new(leaf.clone())),
                right: Some(Box::new(leaf.clone())),
                value: vec![0.0],
                rows: 10,
            })),
            right: Some(Box::new(leaf.clone())),
            value: vec![0.0],
            rows: 10,
        };
        let rules = extract_rules(&chain);
        assert_eq!(rules.len(), chain.n_nodes() - 1);
        // preorder: left child, then its children, then right child
        let deep_left = &rules[1];
        let c = deep_left.conditions()[0];
        assert_eq!((c.lower, c.upper), (f64::NEG_INFINITY, -1.0));
        let deep_right = &rules[2];
        let c = deep_right.conditions()[0];
        assert_eq!((c.lower, c.upper), (-1.0, 0.0));
    }

    #[test]
    fn extracted_rules_match_node_membership() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for trial in 0..10 {
            let n = 80;
            let cols: Vec<Vec<f64>> =
                (0..4).map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let data = grid_dataset(cols);
            let resid: Vec<f64> =
                (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let rows: Vec<usize> = (0..n).collect();
            let size = 2 + (trial % 5);
            let tree =
                fit_tree(&data, &rows, &resid, 2, size, Learner::Gbm, 4, 0.05).unwrap();
            let rules = extract_rules(&tree);
            assert_eq!(rules.len(), tree.n_nodes() - 1);

            // independent oracle: collect per-node row sets by traversal, preorder
            fn node_rows(
                node: &TreeNode,
                rows: &[usize],
                data: &Dataset,
                out: &mut Vec<Vec<usize>>,
            ) {
                if let Some(s) = node.split {
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| data.x(i, s.col) < s.threshold);
                    out.push(l.clone());
                    node_rows(node.left.as_ref().unwrap(), &l, data, out);
                    out.push(r.clone());
                    node_rows(node.right.as_ref().unwrap(), &r, data, out);
                }
            }
            let mut memberships = Vec::new();
            node_rows(&tree, &rows, &data, &mut memberships);
            assert_eq!(memberships.len(), rules.len());
            for (rule, member) in rules.iter().zip(&memberships) {
                for &i in &rows {
                    let inside = member.contains(&i);
                    assert_eq!(rule.evaluate(data.x_row(i)).unwrap(), inside);
                }
            }
        }
    }

    #[test]
    fn dedupe_removes_duplicates_and_constant_rules() {
        let data = grid_dataset(vec![(0..10).map(|i| i as f64).collect()]);
        let a = RuleTerm::new(vec![(0, 4.5, f64::INFINITY)]).unwrap();
        let a_again = RuleTerm::new(vec![(0, 4.5, f64::INFINITY)]).unwrap();
        let everything = RuleTerm::new(vec![(0, -1.0, f64::INFINITY)]).unwrap();
        let nothing = RuleTerm::new(vec![(0, 100.0, 200.0)]).unwrap();
        let b = RuleTerm::new(vec![(0, f64::NEG_INFINITY, 2.5)]).unwrap();
        let out =
            dedupe_rules(vec![a.clone(), a_again, everything, nothing, b.clone()], &data).unwrap();
        assert_eq!(out, vec![a, b]);

        // distinct non-constant rules pass through unchanged
        let k1 = RuleTerm::new(vec![(0, 1.5, f64::INFINITY)]).unwrap();
        let k2 = RuleTerm::new(vec![(0, 2.5, f64::INFINITY)]).unwrap();
        let out = dedupe_rules(vec![k1.clone(), k2.clone()], &data).unwrap();
        assert_eq!(out, vec![k1, k2]);
    }
}
