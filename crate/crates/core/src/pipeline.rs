//! End-to-end fitting pipeline (GPS -> transform -> boost -> rules -> basis
//! -> group-wise ensemble -> model) and the holdout tuning loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{fit_linear_terms, GroupedDesign};
use crate::data::Dataset;
use crate::ensemble::{
    adaptive_group_lasso, group_lasso_cv, CvOptions, CvPoint, GroupSizeFactor, PathOptions,
    SolveOptions,
};
use crate::model::{FittedModel, ModelMeta, MODEL_FORMAT_VERSION};
use crate::propensity::{fit_gps, GpsModel, GpsOptions};
use crate::rulegen::{boost, dedupe_rules, extract_rules, BoostConfig, Learner};
use crate::simbench::{subgroup_eval, tune_metric};
use crate::transform::transform_outcomes;
use crate::util::{sd_pop, splitmix64};
use crate::{Error, Result};

/// Group-wise regularization method for the ensemble step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    GroupLasso,
    AdaptiveGroupLasso,
}

/// Full pipeline configuration. Every field has a CLI flag; the JSON config
/// file uses the same names.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub learner: Learner,
    pub ensemble: EnsembleMethod,
    /// Number of boosted trees M.
    pub trees: usize,
    /// Mean terminal-node count per tree.
    pub mean_leaves: f64,
    /// Boosting shrinkage.
    pub shrinkage: f64,
    /// Winsorization fraction for linear terms.
    pub q: f64,
    /// GPS clipping bound (0 disables).
    pub clip_eps: f64,
    pub cv_folds: usize,
    pub path_len: usize,
    pub path_min_ratio: f64,
    pub min_node_size: usize,
    pub subsample_fraction: f64,
    pub ctree_alpha: f64,
    pub size_factor: GroupSizeFactor,
    pub gps_tol: f64,
    pub gps_max_iter: usize,
    pub solver_tol: f64,
    /// Known per-arm assignment probabilities; set to skip GPS estimation.
    pub known_gps: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            learner: Learner::Gbm,
            ensemble: EnsembleMethod::AdaptiveGroupLasso,
            trees: 333,
            mean_leaves: 2.0,
            shrinkage: 0.01,
            q: 0.025,
            clip_eps: 0.01,
            cv_folds: 10,
            path_len: 100,
            path_min_ratio: 1e-3,
            min_node_size: 10,
            subsample_fraction: 0.5,
            ctree_alpha: 0.05,
            size_factor: GroupSizeFactor::SqrtT,
            gps_tol: 1e-8,
            gps_max_iter: 200,
            solver_tol: 1e-4,
            known_gps: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.q) {
            return Err(Error::Config("q must lie in [0, 0.5)".into()));
        }
        if !(0.0..0.5).contains(&self.clip_eps) {
            return Err(Error::Config("clip_eps must lie in [0, 0.5)".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Config("need at least 2 CV folds".into()));
        }
        if self.path_len == 0 || !(self.path_min_ratio > 0.0 && self.path_min_ratio <= 1.0) {
            return Err(Error::Config("invalid lambda path parameters".into()));
        }
        if let Some(p) = &self.known_gps {
            if p.is_empty() || p.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(Error::Config(
                    "known GPS probabilities must lie strictly inside (0, 1)".into(),
                ));
            }
            if (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::Config("known GPS probabilities must sum to 1".into()));
            }
        }
        self.boost_config_unchecked().validate_static()
    }

    fn boost_config_unchecked(&self) -> BoostConfig {
        BoostConfig {
            trees: self.trees,
            mean_leaves: self.mean_leaves,
            shrinkage: self.shrinkage,
            learner: self.learner,
            min_node_size: self.min_node_size,
            subsample_fraction: self.subsample_fraction,
            ctree_alpha: self.ctree_alpha,
            seed: splitmix64(self.seed ^ 0xb005_7000),
        }
    }

    /// Method label, e.g. "gbm.agl".
    pub fn method_label(&self) -> String {
        let l = match self.learner {
            Learner::Gbm => "gbm",
            Learner::Ctree => "ctree",
        };
        let e = match self.ensemble {
            EnsembleMethod::GroupLasso => "gl",
            EnsembleMethod::AdaptiveGroupLasso => "agl",
        };
        format!("{l}.{e}")
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn cv_options(&self) -> CvOptions {
        CvOptions {
            folds: self.cv_folds,
            seed: splitmix64(self.seed ^ 0xc01d_f01d),
            path: PathOptions { len: self.path_len, min_ratio: self.path_min_ratio },
            solve: SolveOptions {
                tol: self.solver_tol,
                max_sweeps: 100_000,
                size_factor: self.size_factor,
            },
        }
    }
}

impl BoostConfig {
    /// Validation that does not need the row count (full validation happens
    /// inside `boost`).
    fn validate_static(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::Config("tree count must be at least 1".into()));
        }
        if !(self.mean_leaves >= 2.0) {
            return Err(Error::Config("mean leaves must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.shrinkage) {
            return Err(Error::Config("shrinkage must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Fit-stage summary written next to the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub n_rules_generated: usize,
    pub n_rules_deduped: usize,
    pub n_linear_terms: usize,
    pub dropped_linear_cols: Vec<usize>,
    pub n_active_terms: usize,
    pub lambda: f64,
    pub stage1_lambda: Option<f64>,
    pub gps_converged: bool,
    pub warnings: Vec<String>,
}

/// Everything produced by one pipeline fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOutput {
    pub model: FittedModel,
    pub report: FitReport,
    pub cv_table: Vec<CvPoint>,
    pub stage1_cv_table: Option<Vec<CvPoint>>,
}

impl FitOutput {
    pub fn write_cv_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["stage", "lambda", "mean_error", "se"])?;
        if let Some(stage1) = &self.stage1_cv_table {
            for p in stage1 {
                wtr.write_record(&[
                    "1".to_string(),
                    format!("{}", p.lambda),
                    format!("{}", p.mean_error),
                    format!("{}", p.se),
                ])?;
            }
        }
        let stage = if self.stage1_cv_table.is_some() { "2" } else { "1" };
        for p in &self.cv_table {
            wtr.write_record(&[
                stage.to_string(),
                format!("{}", p.lambda),
                format!("{}", p.mean_error),
                format!("{}", p.se),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// GPS model implied by known constant assignment probabilities (control is
/// the reference class); slope rows are padded with zeros for p covariates.
pub fn gps_from_probs(probs: &[f64], p: usize, clip_eps: f64) -> Result<GpsModel> {
    if probs.len() < 2 {
        return Err(Error::Config("need probabilities for at least two arms".into()));
    }
    let coef = probs[1..]
        .iter()
        .map(|pr| {
            let mut row = vec![0.0; p + 1];
            row[0] = (pr / probs[0]).ln();
            row
        })
        .collect();
    GpsModel::from_known(coef, clip_eps)
}

/// Run the whole estimation pipeline on a dataset.
pub fn fit(data: &Dataset, cfg: &RunConfig) -> Result<FitOutput> {
    cfg.validate()?;
    let mut warnings = Vec::new();

    // 1. generalized propensity scores
    let gps = match &cfg.known_gps {
        Some(p) => {
            if p.len() != data.n_arms() {
                return Err(Error::Config(format!(
                    "known GPS lists {} arms but the data has {}",
                    p.len(),
                    data.n_arms()
                )));
            }
            gps_from_probs(p, data.p(), cfg.clip_eps)?
        }
        None => {
            let model = fit_gps(
                data,
                &GpsOptions {
                    tol: cfg.gps_tol,
                    max_iter: cfg.gps_max_iter,
                    clip_eps: cfg.clip_eps,
                },
            )?;
            if !model.meta.converged {
                warnings.push(format!(
                    "GPS fit stopped after {} iterations with gradient norm {:.3e}",
                    model.meta.iterations, model.meta.grad_norm
                ));
            }
            model
        }
    };
    let gps_converged = gps.meta.converged;

    // 2. transformed outcomes
    let z = transform_outcomes(data, &gps)?;

    // 3. rule generation
    let boost_fit = boost(&z, data, &cfg.boost_config_unchecked())?;
    let mut raw_rules = Vec::new();
    for tree in &boost_fit.trees {
        raw_rules.extend(extract_rules(tree));
    }
    let n_rules_generated = raw_rules.len();
    let rules = dedupe_rules(raw_rules, data)?;
    let n_rules_deduped = rules.len();

    // 4. shared basis
    let linear_fit = fit_linear_terms(data, cfg.q)?;
    if !linear_fit.dropped.is_empty() {
        warnings.push(format!(
            "dropped constant covariate columns from the linear terms: {:?}",
            linear_fit.dropped.iter().map(|j| j + 1).collect::<Vec<_>>()
        ));
    }
    if rules.is_empty() && linear_fit.terms.is_empty() {
        return Err(Error::Numeric(
            "no basis functions: rule generation produced nothing and all linear terms were dropped"
                .into(),
        ));
    }
    let design = GroupedDesign::build(data, &rules, &linear_fit.terms)?;

    // 5. group-wise regularized ensemble
    let cv_opts = cfg.cv_options();
    let (fit, cv_table, stage1_cv_table, lambda, stage1_lambda) = match cfg.ensemble {
        EnsembleMethod::GroupLasso => {
            let out = group_lasso_cv(&design, data.y(), &cv_opts)?;
            warnings.extend(out.selection.warnings.clone());
            let lambda = out.fit.lambda;
            (out.fit, out.selection.table, None, lambda, None)
        }
        EnsembleMethod::AdaptiveGroupLasso => {
            let out = adaptive_group_lasso(&design, data.y(), &cv_opts)?;
            warnings.extend(out.stage1_selection.warnings.clone());
            if out.intercept_only {
                warnings.push(
                    "stage 1 selected no groups; the final model is intercept-only".into(),
                );
            }
            let stage2_table = out
                .stage2_selection
                .as_ref()
                .map(|s| {
                    warnings.extend(s.warnings.clone());
                    s.table.clone()
                })
                .unwrap_or_default();
            let lambda = out.fit.lambda;
            let stage1_lambda = out.stage1.lambda;
            (out.fit, stage2_table, Some(out.stage1_selection.table), lambda, Some(stage1_lambda))
        }
    };
    if !fit.converged {
        warnings.push(format!(
            "group lasso stopped at the sweep limit (kkt residual {:.3e})",
            fit.kkt_residual
        ));
    }

    // 6. freeze the model
    let mut supports = Vec::with_capacity(rules.len());
    for r in &rules {
        supports.push(r.support(data)?);
    }
    let mut linear_sds = Vec::with_capacity(linear_fit.terms.len());
    for l in &linear_fit.terms {
        let applied: Vec<f64> = (0..data.n()).map(|i| l.apply(data.x(i, l.col))).collect();
        linear_sds.push(sd_pop(&applied));
    }
    let model = FittedModel {
        format_version: MODEL_FORMAT_VERSION,
        col_names: data.col_names().to_vec(),
        basis: design.basis().to_vec(),
        intercepts: fit.intercepts.clone(),
        coef: fit.coef.clone(),
        supports,
        linear_sds,
        meta: ModelMeta {
            learner: match cfg.learner {
                Learner::Gbm => "gbm".into(),
                Learner::Ctree => "ctree".into(),
            },
            ensemble: match cfg.ensemble {
                EnsembleMethod::GroupLasso => "group_lasso".into(),
                EnsembleMethod::AdaptiveGroupLasso => "adaptive_group_lasso".into(),
            },
            lambda,
            seed: cfg.seed,
        },
    };
    let report = FitReport {
        n_rules_generated,
        n_rules_deduped,
        n_linear_terms: linear_fit.terms.len(),
        dropped_linear_cols: linear_fit.dropped,
        n_active_terms: model.count_terms(),
        lambda,
        stage1_lambda,
        gps_converged,
        warnings,
    };
    Ok(FitOutput { model, report, cv_table, stage1_cv_table })
}

/// One evaluated tuning-grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneRow {
    pub method: String,
    pub trees: usize,
    pub mean_leaves: f64,
    pub shrinkage: f64,
    /// Summed per-arm tuning metric on the holdout (infinite on any sign
    /// mismatch).
    pub metric: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuneOutput {
    /// Index into the grid and the winning configuration, when any grid
    /// point had a finite metric.
    pub best: Option<(usize, RunConfig)>,
    pub rows: Vec<TuneRow>,
}

/// Arm-stratified random split into (train, holdout) row sets.
fn stratified_split(data: &Dataset, holdout: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < holdout && holdout < 1.0) {
        return Err(Error::Config("holdout fraction must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for t in 0..data.n_arms() {
        let mut idx: Vec<usize> = (0..data.n()).filter(|&i| data.w()[i] == t).collect();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64) * holdout).round() as usize;
        let k = k.min(idx.len().saturating_sub(1)).max(usize::from(idx.len() > 1));
        for (pos, i) in idx.into_iter().enumerate() {
            if pos < k {
                held.push(i);
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    held.sort_unstable();
    if train.is_empty() || held.is_empty() {
        return Err(Error::Data("holdout split left an empty part".into()));
    }
    Ok((train, held))
}

/// Grid search: fit each configuration on a training split and score it on
/// the holdout with the subgroup tuning metric summed over the given arms.
pub fn tune(
    data: &Dataset,
    grid: &[RunConfig],
    holdout: f64,
    arms: Option<&[usize]>,
    n_groups: usize,
    seed: u64,
) -> Result<TuneOutput> {
    if grid.is_empty() {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    let (train_rows, held_rows) = stratified_split(data, holdout, seed)?;
    let train = data.subset(&train_rows)?;
    let held = data.subset(&held_rows)?;
    if train.t_max() != data.t_max() || held.t_max() != data.t_max() {
        return Err(Error::Data(
            "holdout split lost an arm; increase the sample or adjust the fraction".into(),
        ));
    }
    let default_arms: Vec<usize> = (1..=data.t_max()).collect();
    let arms = arms.unwrap_or(&default_arms);
    if arms.is_empty() || arms.iter().any(|&t| t == 0 || t > data.t_max()) {
        return Err(Error::Config("tuning arms must be non-control arms of the data".into()));
    }

    let mut rows = Vec::with_capacity(grid.len());
    for cfg in grid {
        let mut cfg = cfg.clone();
        cfg.seed = splitmix64(seed ^ cfg.seed);
        let metric = match fit(&train, &cfg) {
            Ok(out) => {
                let mut total = 0.0;
                for &arm in arms {
                    let est: Vec<f64> = (0..held.n())
                        .map(|i| out.model.predict_hte(held.x_row(i), arm))
                        .collect::<Result<_>>()?;
                    let bins = subgroup_eval(&est, &held, arm, n_groups)?;
                    let actual: Vec<Option<f64>> = bins.iter().map(|b| b.actual).collect();
                    let est_bins: Vec<f64> = bins.iter().map(|b| b.estimated).collect();
                    total += tune_metric(&actual, &est_bins)?;
                }
                total
            }
            Err(e) => {
                // a failed grid point scores as unusable, not fatal
                let _ = e;
                f64::INFINITY
            }
        };
        rows.push(TuneRow {
            method: cfg.method_label(),
            trees: cfg.trees,
            mean_leaves: cfg.mean_leaves,
            shrinkage: cfg.shrinkage,
            metric,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.metric.is_finite())
        .min_by(|(_, a), (_, b)| a.metric.partial_cmp(&b.metric).unwrap())
        .map(|(i, _)| (i, grid[i].clone()));
    Ok(TuneOutput { best, rows })
}
