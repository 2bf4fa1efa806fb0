//! Synthetic multi-arm scenario generator, the four evaluation metrics,
//! subgroup (graphical) evaluation data, the real-data tuning metric, and the
//! replicated benchmark harness.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::pipeline::{self, RunConfig};
use crate::util::{mean, spearman, splitmix64};
use crate::{Error, Result};

/// Treatment-assignment mechanism of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    Rct,
    Observational,
}

impl Assignment {
    pub fn code(self) -> &'static str {
        match self {
            Assignment::Rct => "rct",
            Assignment::Observational => "obs",
        }
    }
}

/// Functional form of a main- or treatment-effect surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectShape {
    Linear,
    Stepwise,
    Nonlinear,
}

impl EffectShape {
    pub fn code(self) -> &'static str {
        match self {
            EffectShape::Linear => "L",
            EffectShape::Stepwise => "S",
            EffectShape::Nonlinear => "N",
        }
    }

    pub fn from_code(c: &str) -> Result<Self> {
        match c {
            "L" | "l" => Ok(EffectShape::Linear),
            "S" | "s" => Ok(EffectShape::Stepwise),
            "N" | "n" => Ok(EffectShape::Nonlinear),
            other => Err(Error::Config(format!("unknown effect code '{other}' (use L, S or N)"))),
        }
    }
}

/// Number of covariates every scenario generates.
pub const SCENARIO_P: usize = 10;

/// One simulation scenario. Scenario codes "A-B" pair the main-effect shape A
/// with the treatment-effect shape B.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Number of non-control arms T (2, 3 or 4).
    pub t_arms: usize,
    pub assignment: Assignment,
    pub main_effect: EffectShape,
    pub treatment_effect: EffectShape,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.t_arms) {
            return Err(Error::Config("scenario arm count T must be 2, 3 or 4".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("scenario sample sizes must be positive".into()));
        }
        Ok(())
    }

    /// Scenario code like "L-L" (main effect - treatment effect).
    pub fn code(&self) -> String {
        format!("{}-{}", self.main_effect.code(), self.treatment_effect.code())
    }

    /// Parse a scenario code "A-B".
    pub fn shapes_from_code(code: &str) -> Result<(EffectShape, EffectShape)> {
        let parts: Vec<&str> = code.split('-').collect();
        if parts.len() != 2 {
            return Err(Error::Config(format!("scenario code '{code}' is not of the form A-B")));
        }
        Ok((EffectShape::from_code(parts[0])?, EffectShape::from_code(parts[1])?))
    }

    /// Full label, e.g. "rct-g3-L-L" (g counts arms including control).
    pub fn label(&self) -> String {
        format!("{}-g{}-{}", self.assignment.code(), self.t_arms + 1, self.code())
    }
}

/// Treatment-effect slope vectors per arm (control first).
const BETAS: [[f64; 3]; 5] =
    [[2.0, 2.0, 2.0], [-1.0, 2.0, 4.0], [3.0, 3.0, -1.0], [-3.0, 3.0, 1.0], [-1.0, 4.0, 1.0]];

fn ind(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Main-effect surface (x is 0-indexed; x[0] is x1).
pub fn main_effect(shape: EffectShape, x: &[f64]) -> f64 {
    match shape {
        EffectShape::Linear => {
            0.6 * x[0] + 0.9 * x[1] + 0.6 * x[2] - 0.9 * x[3] + 0.6 * x[4]
        }
        EffectShape::Stepwise => {
            1.2 * ind(x[0] > -1.0) * ind(x[2] < 1.0) - 1.2 * ind(x[1] < 0.5)
                - 1.2 * ind(x[2] > -1.0) * ind(x[4] < 1.0)
                + 1.2 * ind(x[3] > 0.5)
        }
        EffectShape::Nonlinear => {
            0.6 * x[0] * x[0] + 0.5 * x[1] * x[2]
                - 1.2 * (std::f64::consts::PI * x[3] * x[4]).cos()
        }
    }
}

/// Treatment-effect surface for arm t (0 = control).
pub fn treatment_effect(shape: EffectShape, t: usize, x: &[f64]) -> f64 {
    let [b1, b2, b3] = BETAS[t];
    match shape {
        EffectShape::Linear => {
            b1 * (0.5 * x[0] + x[1]) + b2 * (0.5 * x[2] + x[3]) + b3 * (0.5 * x[4] + x[1])
        }
        EffectShape::Stepwise => {
            b1 * (1.4 * ind(x[0] > 0.0) - 0.3 * ind(x[1] > 0.5))
                + b2 * (1.4 * ind(x[2] > 0.0) - 0.3 * ind(x[3] > 0.5))
                + b3 * (1.4 * ind(x[4] > 0.0) - 0.3 * ind(x[1] > 0.5))
        }
        EffectShape::Nonlinear => {
            b1 * (0.75 * x[0].sin() + x[1]) + b2 * (0.75 * x[2].sin() + x[3])
                + b3 * (0.75 * x[4].sin() + x[1])
        }
    }
}

/// True assignment probabilities over arms 0..=T at covariates x.
pub fn assignment_probs(assignment: Assignment, t_arms: usize, x: &[f64]) -> Vec<f64> {
    match assignment {
        Assignment::Rct => vec![1.0 / (t_arms + 1) as f64; t_arms + 1],
        Assignment::Observational => {
            let f = [
                (-0.50 - 0.1 * x[0] - 0.2 * x[1] - 0.3 * x[2] + 0.2 * x[3] - 0.7 * x[4]).exp(),
                (-0.75 - 0.2 * x[0] - 0.4 * x[1] - 0.6 * x[2] + 0.4 * x[3] - 0.3 * x[4]).exp(),
                (-1.00 - 0.2 * x[0] - 0.5 * x[1] - 0.5 * x[2] + 0.5 * x[3] - 0.3 * x[4]).exp(),
                (-1.50 - 0.3 * x[0] - 0.4 * x[1] - 0.2 * x[2] + 0.4 * x[3] - 0.1 * x[4]).exp(),
            ];
            let denom = 1.0 + f[..t_arms].iter().sum::<f64>();
            let mut p = vec![0.0; t_arms + 1];
            for t in 1..=t_arms {
                p[t] = f[t - 1] / denom;
            }
            p[0] = 1.0 - p[1..].iter().sum::<f64>();
            p
        }
    }
}

/// A generated scenario: train/test datasets plus the true HTE and true
/// assignment probabilities for both splits.
#[derive(Debug, Clone)]
pub struct GeneratedScenario {
    pub train: Dataset,
    pub test: Dataset,
    /// Per-subject true HTE rows (length T), train split.
    pub true_hte_train: Vec<Vec<f64>>,
    pub true_hte_test: Vec<Vec<f64>>,
    /// Per-subject true assignment probabilities (length T+1).
    pub true_gps_train: Vec<Vec<f64>>,
    pub true_gps_test: Vec<Vec<f64>>,
}

fn generate_split(
    spec: &ScenarioSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let t_arms = spec.t_arms;
    let mut y = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut xmat = Vec::with_capacity(n * SCENARIO_P);
    let mut hte = Vec::with_capacity(n);
    let mut gps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = [0.0f64; SCENARIO_P];
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = if j % 2 == 0 {
                StandardNormal.sample(rng)
            } else {
                ind(rng.gen::<f64>() < 0.5)
            };
        }
        let probs = assignment_probs(spec.assignment, t_arms, &x);
        let u: f64 = rng.gen();
        let mut wi = t_arms;
        let mut acc = 0.0;
        for (t, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                wi = t;
                break;
            }
        }
        let mu = main_effect(spec.main_effect, &x);
        let delta = treatment_effect(spec.treatment_effect, wi, &x);
        let noise: f64 = StandardNormal.sample(rng);
        y.push(mu + delta + noise);
        w.push(wi);
        xmat.extend_from_slice(&x);
        let d0 = treatment_effect(spec.treatment_effect, 0, &x);
        hte.push(
            (1..=t_arms)
                .map(|t| treatment_effect(spec.treatment_effect, t, &x) - d0)
                .collect(),
        );
        gps.push(probs);
    }
    let names = (1..=SCENARIO_P).map(|j| format!("x{j}")).collect();
    let data = Dataset::from_parts(y, w, xmat, SCENARIO_P, names)?;
    Ok((data, hte, gps))
}

/// Seeded generation of one scenario's train and test splits.
pub fn generate(spec: &ScenarioSpec) -> Result<GeneratedScenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (train, true_hte_train, true_gps_train) = generate_split(spec, spec.n_train, &mut rng)?;
    let (test, true_hte_test, true_gps_test) = generate_split(spec, spec.n_test, &mut rng)?;
    Ok(GeneratedScenario {
        train,
        test,
        true_hte_train,
        true_hte_test,
        true_gps_train,
        true_gps_test,
    })
}

/// Monte-Carlo unbiasedness check for the transformed outcome: generate the
/// scenario, transform with the KNOWN assignment probabilities, and return
/// per-arm |mean(Z_t) - mean(true HTE_t)| in Monte-Carlo standard-error units
/// (the SE of the paired difference).
pub fn transform_check(spec: &ScenarioSpec) -> Result<Vec<f64>> {
    let gen = generate(spec)?;
    let z = crate::transform::transform_with_probs(&gen.train, &gen.true_gps_train)?;
    let n = gen.train.n();
    let mut ratios = Vec::with_capacity(spec.t_arms);
    for t in 1..=spec.t_arms {
        let diffs: Vec<f64> =
            (0..n).map(|i| z.row(i)[t - 1] - gen.true_hte_train[i][t - 1]).collect();
        let m = mean(&diffs);
        let sd = crate::util::sd_pop(&diffs);
        let se = sd / (n as f64).sqrt();
        ratios.push(if se > 0.0 { m.abs() / se } else { 0.0 });
    }
    Ok(ratios)
}

// ---------------------------------------------------------------------------
// evaluation metrics
// ---------------------------------------------------------------------------

/// Four-metric evaluation plus the term count for model complexity.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpehe: f64,
    pub abs_rel_bias: f64,
    pub kappa: f64,
    pub spearman: f64,
    pub n_terms: Option<usize>,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if self.mpehe < 0.0 || self.abs_rel_bias < 0.0 {
            return Err(Error::Numeric("error metrics must be non-negative".into()));
        }
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&self.kappa) {
            return Err(Error::Numeric(format!("kappa {} outside [-1, 1]", self.kappa)));
        }
        if !(-1.0 - 1e-12..=1.0 + 1e-12).contains(&self.spearman) {
            return Err(Error::Numeric(format!("spearman {} outside [-1, 1]", self.spearman)));
        }
        Ok(())
    }
}

fn check_shapes(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<usize> {
    if truth.len() != est.len() || truth.is_empty() {
        return Err(Error::Data("HTE matrices must have matching, non-zero row counts".into()));
    }
    let k = truth[0].len();
    if k == 0 || truth.iter().any(|r| r.len() != k) || est.iter().any(|r| r.len() != k) {
        return Err(Error::Data("HTE matrices must have matching column counts".into()));
    }
    Ok(k)
}

/// Root of the arm-averaged mean squared HTE error.
pub fn mpehe(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<f64> {
    let k = check_shapes(truth, est)?;
    let n = truth.len() as f64;
    let mut total = 0.0;
    for arm in 0..k {
        let mut sse = 0.0;
        for i in 0..truth.len() {
            let d = truth[i][arm] - est[i][arm];
            sse += d * d;
        }
        total += sse / n;
    }
    Ok((total / k as f64).sqrt())
}

/// Arm-averaged absolute relative bias; arms whose mean true HTE is zero are
/// excluded and reported.
pub fn abs_rel_bias(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let k = check_shapes(truth, est)?;
    let n = truth.len() as f64;
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut used = 0usize;
    for arm in 0..k {
        let mean_true: f64 = truth.iter().map(|r| r[arm]).sum::<f64>() / n;
        if mean_true == 0.0 {
            excluded.push(arm + 1);
            continue;
        }
        let mean_diff: f64 = (0..truth.len())
            .map(|i| truth[i][arm] - est[i][arm])
            .sum::<f64>()
            / n;
        total += (mean_diff / mean_true).abs();
        used += 1;
    }
    if used == 0 {
        return Err(Error::Numeric(
            "absolute relative bias undefined: every arm has zero mean true HTE".into(),
        ));
    }
    Ok((total / used as f64, excluded))
}

/// Best arm over {control with value 0, arms 1..=K}; ties go to the lowest
/// index.
pub fn best_arm(hte_row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut val = 0.0;
    for (idx, v) in hte_row.iter().enumerate() {
        if *v > val {
            val = *v;
            best = idx + 1;
        }
    }
    best
}

/// Unweighted multi-class Cohen's kappa between true and estimated best-arm
/// labels.
pub fn cohens_kappa(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<f64> {
    let k = check_shapes(truth, est)?;
    let n = truth.len();
    let n_labels = k + 1;
    let mut agree = 0usize;
    let mut p_true = vec![0.0; n_labels];
    let mut p_est = vec![0.0; n_labels];
    for i in 0..n {
        let a = best_arm(&truth[i]);
        let b = best_arm(&est[i]);
        if a == b {
            agree += 1;
        }
        p_true[a] += 1.0;
        p_est[b] += 1.0;
    }
    let po = agree as f64 / n as f64;
    let pe: f64 =
        p_true.iter().zip(&p_est).map(|(a, b)| (a / n as f64) * (b / n as f64)).sum();
    if (1.0 - pe).abs() < 1e-15 {
        return Ok(1.0); // both labelings are the same point mass
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Per-subject Spearman rank correlation between estimated and true arm
/// rankings, averaged over subjects; subjects with an undefined correlation
/// (an all-tied vector) are excluded and counted.
pub fn spearman_avg(truth: &[Vec<f64>], est: &[Vec<f64>]) -> Result<(f64, usize)> {
    let k = check_shapes(truth, est)?;
    if k < 2 {
        return Err(Error::Config("rank agreement needs at least two non-control arms".into()));
    }
    let mut excluded = 0usize;
    let mut total = 0.0;
    let mut used = 0usize;
    for i in 0..truth.len() {
        match spearman(&truth[i], &est[i]) {
            Some(r) => {
                total += r;
                used += 1;
            }
            None => excluded += 1,
        }
    }
    if used == 0 {
        return Err(Error::Numeric("rank correlation undefined for every subject".into()));
    }
    Ok((total / used as f64, excluded))
}

/// One subgroup row of the graphical evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub label: String,
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    /// Mean outcome difference (arm t minus control) within the bin; None
    /// when the bin lacks treated or control subjects.
    pub actual: Option<f64>,
    /// Mean estimated HTE within the bin.
    pub estimated: f64,
}

/// Sort subjects by estimated HTE, split into `n_groups` equal bins
/// (remainder to the earliest bins) and compare actual vs estimated HTE per
/// bin.
pub fn subgroup_eval(
    est_hte: &[f64],
    data: &Dataset,
    arm: usize,
    n_groups: usize,
) -> Result<Vec<SubgroupRow>> {
    if n_groups < 2 {
        return Err(Error::Config("need at least 2 subgroups".into()));
    }
    if arm == 0 || arm > data.t_max() {
        return Err(Error::Config(format!("arm {arm} is not a non-control arm of the data")));
    }
    if est_hte.len() != data.n() {
        return Err(Error::Data("prediction vector length does not match dataset".into()));
    }
    let n = data.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| est_hte[a].partial_cmp(&est_hte[b]).unwrap().then(a.cmp(&b)));

    let base = n / n_groups;
    let rem = n % n_groups;
    let mut rows = Vec::with_capacity(n_groups);
    let mut start = 0usize;
    for s in 0..n_groups {
        let len = base + usize::from(s < rem);
        let bin = &order[start..start + len];
        start += len;
        let mut sum_est = 0.0;
        let (mut sum_t, mut n_t) = (0.0, 0usize);
        let (mut sum_c, mut n_c) = (0.0, 0usize);
        for &i in bin {
            sum_est += est_hte[i];
            if data.w()[i] == arm {
                sum_t += data.y()[i];
                n_t += 1;
            } else if data.w()[i] == 0 {
                sum_c += data.y()[i];
                n_c += 1;
            }
        }
        let actual = if n_t > 0 && n_c > 0 {
            Some(sum_t / n_t as f64 - sum_c / n_c as f64)
        } else {
            None
        };
        rows.push(SubgroupRow {
            label: format!("S{}", s + 1),
            n: len,
            n_treated: n_t,
            n_control: n_c,
            actual,
            estimated: sum_est / len as f64,
        });
    }
    Ok(rows)
}

/// Write a subgroup table as CSV (empty cell for NA bins).
pub fn write_subgroup_csv(rows: &[SubgroupRow], arm: usize, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["subgroup", "arm", "n", "n_treated", "n_control", "actual", "estimated"])?;
    for r in rows {
        wtr.write_record(&[
            r.label.clone(),
            arm.to_string(),
            r.n.to_string(),
            r.n_treated.to_string(),
            r.n_control.to_string(),
            r.actual.map_or(String::new(), |a| format!("{a}")),
            format!("{}", r.estimated),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Write a numeric matrix as CSV with columns `<prefix>1..<prefix>K`.
pub fn write_matrix_csv(rows: &[Vec<f64>], col_prefix: &str, path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    let k = rows.first().map_or(0, |r| r.len());
    let header: Vec<String> = (1..=k).map(|j| format!("{col_prefix}{j}")).collect();
    wtr.write_record(&header)?;
    for r in rows {
        let rec: Vec<String> = r.iter().map(|v| format!("{v}")).collect();
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Read a numeric matrix from a headered CSV (all columns).
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row: Vec<f64> = record
            .iter()
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("non-numeric value '{cell}' in row {}", r + 1))
                })
            })
            .collect::<Result<_>>()?;
        out.push(row);
    }
    Ok(out)
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Subgroup tuning metric: mean absolute actual-vs-estimated gap divided by
/// the absolute Spearman correlation; any sign mismatch, or zero
/// correlation, makes the metric infinite. NA bins are excluded pairwise.
pub fn tune_metric(actual: &[Option<f64>], est: &[f64]) -> Result<f64> {
    if actual.len() != est.len() {
        return Err(Error::Data("bin vectors must have the same length".into()));
    }
    let pairs: Vec<(f64, f64)> = actual
        .iter()
        .zip(est)
        .filter_map(|(a, e)| a.map(|a| (a, *e)))
        .collect();
    if pairs.len() < 2 {
        return Err(Error::Numeric("fewer than 2 non-NA subgroups".into()));
    }
    if pairs.iter().any(|(a, e)| sign(*a) != sign(*e)) {
        return Ok(f64::INFINITY);
    }
    let avals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let evals: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let cor = match spearman(&avals, &evals) {
        Some(c) => c.abs(),
        None => return Ok(f64::INFINITY),
    };
    if cor == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mae = pairs.iter().map(|(a, e)| (a - e).abs()).sum::<f64>() / pairs.len() as f64;
    Ok(mae / cor)
}

// ---------------------------------------------------------------------------
// benchmark harness
// ---------------------------------------------------------------------------

/// One aggregated benchmark cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub scenario: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub replications: usize,
    pub failures: usize,
}

/// Reproducibility manifest for a benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchManifest {
    pub master_seed: u64,
    pub replications: usize,
    pub scenarios: Vec<ScenarioSpec>,
    pub methods: Vec<RunConfig>,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub manifest: BenchManifest,
}

impl BenchReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record([
            "scenario", "method", "metric", "mean", "sd", "replications", "failures",
        ])?;
        for r in &self.rows {
            wtr.write_record(&[
                r.scenario.clone(),
                r.method.clone(),
                r.metric.clone(),
                format!("{}", r.mean),
                format!("{}", r.sd),
                r.replications.to_string(),
                r.failures.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// Data seed and fit seed for one (scenario, replication) cell, derived
/// reproducibly from the master seed.
pub fn derive_seeds(master: u64, scenario_idx: usize, rep: usize) -> (u64, u64) {
    let base = splitmix64(
        master ^ splitmix64((scenario_idx as u64) << 32 | rep as u64 | 0x5eed_0000_0000_0000),
    );
    (base, splitmix64(base))
}

/// Evaluate one fitted model against the true test HTEs.
pub fn evaluate_predictions(
    truth: &[Vec<f64>],
    est: &[Vec<f64>],
    n_terms: Option<usize>,
) -> Result<MetricsReport> {
    let report = MetricsReport {
        mpehe: mpehe(truth, est)?,
        abs_rel_bias: abs_rel_bias(truth, est)?.0,
        kappa: cohens_kappa(truth, est)?,
        spearman: spearman_avg(truth, est)?.0,
        n_terms,
    };
    report.validate()?;
    Ok(report)
}

/// Run the scenario x method grid with `replications` seeded repetitions per
/// cell; per-replication failures are recorded, not fatal.
pub fn run_benchmark(
    scenarios: &[ScenarioSpec],
    methods: &[RunConfig],
    replications: usize,
    master_seed: u64,
) -> Result<BenchReport> {
    if replications == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    for s in scenarios {
        s.validate()?;
    }
    for m in methods {
        m.validate()?;
    }
    let mut cells = Vec::new();
    for (si, _) in scenarios.iter().enumerate() {
        for mi in 0..methods.len() {
            for rep in 0..replications {
                cells.push((si, mi, rep));
            }
        }
    }
    let results: Vec<std::result::Result<(usize, usize, MetricsReport), (usize, usize, String)>> =
        cells
            .par_iter()
            .map(|&(si, mi, rep)| {
                let (data_seed, fit_seed) = derive_seeds(master_seed, si, rep);
                let mut spec = scenarios[si].clone();
                spec.seed = data_seed;
                let mut cfg = methods[mi].clone();
                cfg.seed = fit_seed;
                let run = || -> Result<MetricsReport> {
                    let gen = generate(&spec)?;
                    let out = pipeline::fit(&gen.train, &cfg)?;
                    let est: Vec<Vec<f64>> = (0..gen.test.n())
                        .map(|i| out.model.predict_hte_all(gen.test.x_row(i)))
                        .collect::<Result<_>>()?;
                    evaluate_predictions(&gen.true_hte_test, &est, Some(out.model.count_terms()))
                };
                match run() {
                    Ok(m) => Ok((si, mi, m)),
                    Err(e) => Err((si, mi, e.to_string())),
                }
            })
            .collect();

    let metric_names = ["mpehe", "abs_rel_bias", "kappa", "spearman", "n_terms"];
    let mut rows = Vec::new();
    for (si, spec) in scenarios.iter().enumerate() {
        for (mi, method) in methods.iter().enumerate() {
            let mut per_metric: Vec<Vec<f64>> = vec![Vec::new(); metric_names.len()];
            let mut failures = 0usize;
            for r in &results {
                match r {
                    Ok((s, m, rep)) if *s == si && *m == mi => {
                        per_metric[0].push(rep.mpehe);
                        per_metric[1].push(rep.abs_rel_bias);
                        per_metric[2].push(rep.kappa);
                        per_metric[3].push(rep.spearman);
                        per_metric[4].push(rep.n_terms.unwrap_or(0) as f64);
                    }
                    Err((s, m, _)) if *s == si && *m == mi => failures += 1,
                    _ => {}
                }
            }
            for (name, vals) in metric_names.iter().zip(&per_metric) {
                let m = mean(vals);
                let sd = if vals.len() <= 1 {
                    0.0
                } else {
                    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                        / (vals.len() - 1) as f64;
                    var.sqrt()
                };
                rows.push(BenchRow {
                    scenario: spec.label(),
                    method: method.method_label(),
                    metric: name.to_string(),
                    mean: m,
                    sd,
                    replications: vals.len(),
                    failures,
                });
            }
        }
    }
    Ok(BenchReport {
        rows,
        manifest: BenchManifest {
            master_seed,
            replications,
            scenarios: scenarios.to_vec(),
            methods: methods.to_vec(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn scenario_codes_map_to_shapes() {
        let (m, t) = ScenarioSpec::shapes_from_code("L-L").unwrap();
        assert_eq!((m, t), (EffectShape::Linear, EffectShape::Linear));
        let (m, t) = ScenarioSpec::shapes_from_code("N-S").unwrap();
        assert_eq!((m, t), (EffectShape::Nonlinear, EffectShape::Stepwise));
        assert!(ScenarioSpec::shapes_from_code("X-L").is_err());
        assert!(ScenarioSpec::shapes_from_code("LL").is_err());
    }

    #[test]
    fn main_effect_zero_at_origin() {
        let x = [0.0; SCENARIO_P];
        assert_eq!(main_effect(EffectShape::Linear, &x), 0.0);
    }

    #[test]
    fn treatment_effect_hand_value() {
        // x with (0.5 x1 + x2) = (0.5 x3 + x4) = (0.5 x5 + x2) = 1:
        // arm-1 HTE = (-1-2) + (2-2) + (4-2) = -1
        let mut x = [0.0; SCENARIO_P];
        x[0] = 2.0;
        x[2] = 2.0;
        x[4] = 2.0;
        let d1 = treatment_effect(EffectShape::Linear, 1, &x);
        let d0 = treatment_effect(EffectShape::Linear, 0, &x);
        assert_abs_diff_eq!(d1 - d0, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn observational_probabilities_at_origin() {
        // direct evaluation of the assignment formulas at x = 0, T = 2
        let p = assignment_probs(Assignment::Observational, 2, &[0.0; SCENARIO_P]);
        assert_abs_diff_eq!(p[1], 0.2918, epsilon = 5e-5);
        assert_abs_diff_eq!(p[2], 0.2272, epsilon = 5e-5);
        assert_abs_diff_eq!(p[0], 0.4810, epsilon = 5e-5);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rct_arm_frequencies_match_uniform() {
        let spec = ScenarioSpec {
            t_arms: 2,
            assignment: Assignment::Rct,
            main_effect: EffectShape::Linear,
            treatment_effect: EffectShape::Linear,
            n_train: 10_000,
            n_test: 10,
            seed: 11,
        };
        let gen = generate(&spec).unwrap();
        let counts = gen.train.arm_counts();
        let se = (1.0 / 3.0 * 2.0 / 3.0 / 10_000.0f64).sqrt();
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 1.0 / 3.0).abs() <= 3.0 * se, "freq {freq}");
        }
    }

    #[test]
    fn generator_moments_and_assignment_frequencies() {
        let spec = ScenarioSpec {
            t_arms: 3,
            assignment: Assignment::Observational,
            main_effect: EffectShape::Nonlinear,
            treatment_effect: EffectShape::Stepwise,
            n_train: 50_000,
            n_test: 10,
            seed: 13,
        };
        let gen = generate(&spec).unwrap();
        let n = gen.train.n() as f64;
        for j in (0..SCENARIO_P).step_by(2) {
            // continuous covariates: mean 0, var 1 within 4 SE
            let col = gen.train.col(j);
            let m = crate::util::mean(&col);
            let v = crate::util::sd_pop(&col).powi(2);
            assert!(m.abs() <= 4.0 / n.sqrt(), "col {j} mean {m}");
            // var of sample variance of N(0,1) is ~2/n
            assert!((v - 1.0).abs() <= 4.0 * (2.0 / n).sqrt(), "col {j} var {v}");
        }
        for j in (1..SCENARIO_P).step_by(2) {
            let col = gen.train.col(j);
            assert!(col.iter().all(|v| *v == 0.0 || *v == 1.0));
            let m = crate::util::mean(&col);
            assert!((m - 0.5).abs() <= 4.0 * 0.5 / n.sqrt());
        }
        // empirical arm frequencies match the mean analytic probabilities
        let counts = gen.train.arm_counts();
        for t in 0..=3 {
            let freq = counts[t] as f64 / n;
            let mean_p =
                gen.true_gps_train.iter().map(|p| p[t]).sum::<f64>() / n;
            let se = (mean_p * (1.0 - mean_p) / n).sqrt();
            assert!((freq - mean_p).abs() <= 4.0 * se, "arm {t}: {freq} vs {mean_p}");
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = ScenarioSpec {
            t_arms: 2,
            assignment: Assignment::Observational,
            main_effect: EffectShape::Stepwise,
            treatment_effect: EffectShape::Nonlinear,
            n_train: 50,
            n_test: 20,
            seed: 5,
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.true_hte_test, b.true_hte_test);
    }

    #[test]
    fn abs_rel_bias_excludes_zero_mean_arms() {
        // arm 2 has exactly zero mean true HTE
        let truth = vec![vec![2.0, 1.0], vec![2.0, -1.0]];
        let est = vec![vec![1.0, 5.0], vec![1.0, 5.0]];
        let (v, excluded) = abs_rel_bias(&truth, &est).unwrap();
        assert_eq!(excluded, vec![2]);
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        // every arm excluded -> undefined
        let truth = vec![vec![1.0], vec![-1.0]];
        assert!(abs_rel_bias(&truth, &est.iter().map(|r| vec![r[0]]).collect::<Vec<_>>()).is_err());
    }

    #[test]
    fn spearman_excludes_tied_subjects() {
        let truth = vec![vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]];
        let est = vec![vec![2.0, 4.0, 9.0], vec![1.0, 2.0, 3.0]];
        let (v, excluded) = spearman_avg(&truth, &est).unwrap();
        assert_eq!(excluded, 1);
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rank_metrics_invariant_under_increasing_transform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let truth: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let est: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        // strictly increasing transform keeps ranks and the best-arm argmax
        // comparisons need sign preservation for the control's implicit 0,
        // so use a scale (monotone through 0)
        let scaled: Vec<Vec<f64>> =
            est.iter().map(|r| r.iter().map(|v| 3.5 * v).collect()).collect();
        assert_abs_diff_eq!(
            spearman_avg(&truth, &est).unwrap().0,
            spearman_avg(&truth, &scaled).unwrap().0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            cohens_kappa(&truth, &est).unwrap(),
            cohens_kappa(&truth, &scaled).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn subgroup_eval_bins_and_na() {
        // 10 subjects, estimated HTE = index; arms alternate 1/0 except the
        // top bin which has no controls
        let n = 10;
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut x = Vec::new();
        for i in 0..n {
            y.push(i as f64);
            w.push(if i >= 8 { 1 } else { i % 2 });
            x.push(i as f64);
        }
        let data = Dataset::from_parts(y, w, x, 1, vec!["x1".into()]).unwrap();
        let est: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let rows = subgroup_eval(&est, &data, 1, 5).unwrap();
        assert_eq!(rows.len(), 5);
        // sorted: estimated HTE non-decreasing across bins
        for pair in rows.windows(2) {
            assert!(pair[0].estimated <= pair[1].estimated);
        }
        // the last bin {8, 9} has no control subjects -> NA
        assert!(rows[4].actual.is_none());
        assert!(rows[0].actual.is_some());
        // remainder-to-earliest: 10 rows over 5 bins -> all bins size 2
        assert!(rows.iter().all(|r| r.n == 2));
        let rows = subgroup_eval(&est, &data, 1, 3).unwrap();
        assert_eq!(rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![4, 3, 3]);
    }

    #[test]
    fn subgroup_actual_matches_homogeneous_effect() {
        use rand::{Rng, SeedableRng};
        use rand_distr::{Distribution, StandardNormal};
        // homogeneous true effect c with perfect predictions: every bin's
        // actual is within 3 SE of c and estimated equals c
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(71);
        let c = 1.5;
        let n = 20_000;
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let arm = rng.gen_range(0..2usize);
            let noise: f64 = StandardNormal.sample(&mut rng);
            y.push(if arm == 1 { c } else { 0.0 } + noise);
            w.push(arm);
            x.push(rng.gen::<f64>());
        }
        let data = Dataset::from_parts(y, w, x, 1, vec!["x1".into()]).unwrap();
        let est = vec![c; n];
        let rows = subgroup_eval(&est, &data, 1, 5).unwrap();
        for r in rows {
            let bin_n = r.n as f64;
            let se = (1.0 / (bin_n / 2.0)).sqrt() * 2.0f64.sqrt();
            assert!((r.actual.unwrap() - c).abs() <= 3.0 * se);
            assert_abs_diff_eq!(r.estimated, c, epsilon = 1e-12);
        }
    }

    #[test]
    fn tune_metric_edge_cases() {
        // NA bins excluded pairwise; fewer than 2 non-NA -> undefined
        let actual = vec![None, Some(1.0), None];
        assert!(tune_metric(&actual, &[9.0, 1.0, 9.0]).is_err());
        // zero correlation -> infinite
        let actual = vec![Some(1.0), Some(2.0), Some(1.0), Some(2.0)];
        let est = vec![1.0, 2.0, 2.0, 1.0];
        assert!(tune_metric(&actual, &est).unwrap().is_infinite());
        // scale covariance: scaling both by c scales the finite metric by c
        let actual: Vec<Option<f64>> = vec![Some(1.0), Some(3.0), Some(2.0)];
        let est = vec![1.5, 2.0, 2.5];
        let base = tune_metric(&actual, &est).unwrap();
        let scaled_a: Vec<Option<f64>> = actual.iter().map(|a| a.map(|v| 2.5 * v)).collect();
        let scaled_e: Vec<f64> = est.iter().map(|v| 2.5 * v).collect();
        assert_abs_diff_eq!(tune_metric(&scaled_a, &scaled_e).unwrap(), 2.5 * base, epsilon = 1e-12);
    }

    #[test]
    fn single_replication_reports_zero_sd() {
        let spec = ScenarioSpec {
            t_arms: 2,
            assignment: Assignment::Rct,
            main_effect: EffectShape::Linear,
            treatment_effect: EffectShape::Linear,
            n_train: 150,
            n_test: 60,
            seed: 0,
        };
        let cfg = RunConfig {
            trees: 20,
            cv_folds: 3,
            path_len: 10,
            min_node_size: 5,
            ..Default::default()
        };
        let report = run_benchmark(&[spec], &[cfg], 1, 3).unwrap();
        assert!(report.rows.iter().all(|r| r.sd == 0.0 && r.replications == 1));
        assert!(report.rows.iter().any(|r| r.metric == "mpehe"));
    }
}
