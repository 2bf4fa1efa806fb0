//! Command-line front end: simulation, fitting, prediction, importance
//! export, evaluation, tuning and benchmark runs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rulehte::data::{load_covariate_matrix, Dataset, Schema};
use rulehte::ensemble::GroupSizeFactor;
use rulehte::model::FittedModel;
use rulehte::pipeline::{self, EnsembleMethod, RunConfig};
use rulehte::rulegen::Learner;
use rulehte::simbench::{
    self, generate, read_matrix_csv, run_benchmark, subgroup_eval, write_matrix_csv,
    write_subgroup_csv, Assignment, ScenarioSpec,
};
use rulehte::Error;

#[derive(Parser)]
#[command(name = "rulehte", version, about = "Interpretable rule-ensemble HTE estimation for multi-arm studies")]
struct Cli {
    /// Worker threads for cross-validation and benchmark replications.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AssignmentArg {
    Rct,
    Observational,
}

impl From<AssignmentArg> for Assignment {
    fn from(a: AssignmentArg) -> Self {
        match a {
            AssignmentArg::Rct => Assignment::Rct,
            AssignmentArg::Observational => Assignment::Observational,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LearnerArg {
    Gbm,
    Ctree,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleArg {
    #[value(alias = "gl")]
    GroupLasso,
    #[value(alias = "agl")]
    AdaptiveGroupLasso,
}

/// Column-role flags shared by data-reading subcommands.
#[derive(Args, Clone)]
struct SchemaArgs {
    /// Outcome column name.
    #[arg(long, default_value = "y")]
    outcome_col: String,
    /// Treatment-arm column name.
    #[arg(long, default_value = "w")]
    arm_col: String,
    /// Comma-separated covariate columns (default: all remaining columns).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
}

impl SchemaArgs {
    fn schema(&self) -> Schema {
        Schema {
            outcome: self.outcome_col.clone(),
            arm: self.arm_col.clone(),
            covariates: self.covariates.clone(),
        }
    }
}

/// Pipeline hyperparameter flags; unspecified flags fall back to the config
/// file (when given) and then to the defaults.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file with `RunConfig` fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    learner: Option<LearnerArg>,
    #[arg(long)]
    ensemble: Option<EnsembleArg>,
    /// Number of boosted trees.
    #[arg(long)]
    trees: Option<usize>,
    /// Mean terminal-node count per tree.
    #[arg(long)]
    mean_leaves: Option<f64>,
    #[arg(long)]
    shrinkage: Option<f64>,
    /// Winsorization fraction for linear terms.
    #[arg(long)]
    q: Option<f64>,
    /// GPS probability clipping bound (0 disables).
    #[arg(long)]
    clip_eps: Option<f64>,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    path_len: Option<usize>,
    #[arg(long)]
    path_min_ratio: Option<f64>,
    #[arg(long)]
    min_node_size: Option<usize>,
    #[arg(long)]
    subsample_fraction: Option<f64>,
    #[arg(long)]
    ctree_alpha: Option<f64>,
    /// Penalty group-size factor: sqrt-t (as published) or sqrt-t-plus-1.
    #[arg(long)]
    size_factor: Option<String>,
    /// Known per-arm assignment probabilities (comma separated); skips GPS
    /// estimation.
    #[arg(long, value_delimiter = ',')]
    known_gps: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(l) = self.learner {
            cfg.learner = match l {
                LearnerArg::Gbm => Learner::Gbm,
                LearnerArg::Ctree => Learner::Ctree,
            };
        }
        if let Some(e) = self.ensemble {
            cfg.ensemble = match e {
                EnsembleArg::GroupLasso => EnsembleMethod::GroupLasso,
                EnsembleArg::AdaptiveGroupLasso => EnsembleMethod::AdaptiveGroupLasso,
            };
        }
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            };
        }
        set!(trees);
        set!(mean_leaves);
        set!(shrinkage);
        set!(q);
        set!(clip_eps);
        set!(cv_folds);
        set!(path_len);
        set!(path_min_ratio);
        set!(min_node_size);
        set!(subsample_fraction);
        set!(ctree_alpha);
        set!(seed);
        if let Some(p) = &self.known_gps {
            cfg.known_gps = Some(p.clone());
        }
        if let Some(sf) = &self.size_factor {
            cfg.size_factor = match sf.as_str() {
                "sqrt-t" => GroupSizeFactor::SqrtT,
                "sqrt-t-plus-1" => GroupSizeFactor::SqrtTPlus1,
                other => {
                    return Err(Error::Config(format!(
                        "unknown size factor '{other}' (use sqrt-t or sqrt-t-plus-1)"
                    )))
                }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario (train/test CSVs plus true HTE and GPS).
    Simulate {
        /// Number of non-control arms (2, 3 or 4).
        #[arg(long, default_value_t = 2)]
        t_arms: usize,
        #[arg(long, value_enum, default_value_t = AssignmentArg::Rct)]
        assignment: AssignmentArg,
        /// Scenario code "A-B": main effect and treatment effect shapes, each
        /// of L (linear), S (stepwise), N (nonlinear).
        #[arg(long, default_value = "L-L")]
        scenario: String,
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit the rule-ensemble HTE model on a CSV dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Predict outcomes, HTEs or pairwise contrasts for new covariate rows.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// HTE of this arm versus control.
        #[arg(long, conflicts_with_all = ["pairwise", "outcome"])]
        hte: Option<usize>,
        /// Two arms "t1 t2" for a pairwise contrast.
        #[arg(long, num_args = 2, conflicts_with = "outcome")]
        pairwise: Option<Vec<usize>>,
        /// Predicted outcome for this arm.
        #[arg(long)]
        outcome: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export base-function (or variable) importances for an arm contrast.
    Importance {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        t1: usize,
        #[arg(long, default_value_t = 0)]
        t2: usize,
        /// Emit per-variable importances instead of per-basis-function ones.
        #[arg(long)]
        variables: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subgroup (graphical) evaluation of a model on labeled data, or metric
    /// evaluation against a true-HTE matrix.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        /// Arm to evaluate (subgroup mode).
        #[arg(long, default_value_t = 1)]
        arm: usize,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        /// CSV with the true HTE matrix (columns hte1..hteT); switches to
        /// metric evaluation.
        #[arg(long)]
        true_hte: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search hyperparameters on a holdout split using the subgroup
    /// tuning metric.
    Tune {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Candidate tree counts.
        #[arg(long, value_delimiter = ',', default_value = "333,666,1000")]
        grid_trees: Vec<usize>,
        /// Candidate mean terminal-node counts ("depth" of the grid).
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        grid_depth: Vec<f64>,
        /// Candidate shrinkage rates.
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
        grid_shrinkage: Vec<f64>,
        /// Methods to tune, e.g. gbm.gl,gbm.agl,ctree.gl,ctree.agl.
        #[arg(long, value_delimiter = ',', default_value = "gbm.gl,gbm.agl,ctree.gl,ctree.agl")]
        methods: Vec<String>,
        /// Fraction of rows held out for scoring.
        #[arg(long, default_value_t = 0.5)]
        holdout: f64,
        /// Arms to score (default: every non-control arm).
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<usize>>,
        #[arg(long, default_value_t = 5)]
        groups: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Replicated scenario x method benchmark with the four metrics.
    Benchmark {
        /// Scenario codes (comma separated) or "all".
        #[arg(long, default_value = "all")]
        scenarios: String,
        #[arg(long, value_delimiter = ',', default_value = "2")]
        t_arms: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "rct")]
        assignments: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "gbm.gl,gbm.agl")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 10)]
        replications: usize,
        #[arg(long, default_value_t = 1000)]
        n_train: usize,
        #[arg(long, default_value_t = 1000)]
        n_test: usize,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_method(label: &str, base: &RunConfig) -> Result<RunConfig, Error> {
    let mut cfg = base.clone();
    let (l, e) = label.split_once('.').ok_or_else(|| {
        Error::Config(format!("method '{label}' is not of the form <learner>.<ensemble>"))
    })?;
    cfg.learner = match l {
        "gbm" => Learner::Gbm,
        "ctree" => Learner::Ctree,
        other => return Err(Error::Config(format!("unknown learner '{other}'"))),
    };
    cfg.ensemble = match e {
        "gl" | "group_lasso" => EnsembleMethod::GroupLasso,
        "agl" | "adaptive_group_lasso" => EnsembleMethod::AdaptiveGroupLasso,
        other => return Err(Error::Config(format!("unknown ensemble '{other}'"))),
    };
    Ok(cfg)
}

fn write_manifest(dir: &Path, value: serde_json::Value) -> Result<(), Error> {
    std::fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(&value)?)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { t_arms, assignment, scenario, n_train, n_test, seed, out_dir } => {
            let (main_effect, treatment_effect) = ScenarioSpec::shapes_from_code(&scenario)?;
            let spec = ScenarioSpec {
                t_arms,
                assignment: assignment.into(),
                main_effect,
                treatment_effect,
                n_train,
                n_test,
                seed,
            };
            let gen = generate(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            let schema = Schema::default();
            gen.train.save_csv(&out_dir.join("train.csv"), &schema)?;
            gen.test.save_csv(&out_dir.join("test.csv"), &schema)?;
            write_matrix_csv(&gen.true_hte_train, "hte", &out_dir.join("true_hte_train.csv"))?;
            write_matrix_csv(&gen.true_hte_test, "hte", &out_dir.join("true_hte_test.csv"))?;
            write_matrix_csv(&gen.true_gps_train, "gps", &out_dir.join("true_gps_train.csv"))?;
            write_matrix_csv(&gen.true_gps_test, "gps", &out_dir.join("true_gps_test.csv"))?;
            write_manifest(&out_dir, serde_json::json!({ "command": "simulate", "spec": spec }))?;
            println!("wrote scenario {} to {}", spec.label(), out_dir.display());
        }
        Command::Fit { data, schema, config, out_dir } => {
            let cfg = config.build()?;
            let dataset = Dataset::load_csv(&data, &schema.schema())?;
            let out = pipeline::fit(&dataset, &cfg)?;
            std::fs::create_dir_all(&out_dir)?;
            out.model.save(&out_dir.join("model.json"))?;
            std::fs::write(
                out_dir.join("fit_report.json"),
                serde_json::to_string_pretty(&out.report)?,
            )?;
            out.write_cv_csv(&out_dir.join("cv_curve.csv"))?;
            write_manifest(
                &out_dir,
                serde_json::json!({
                    "command": "fit",
                    "data": data.display().to_string(),
                    "schema": schema.schema(),
                    "config": cfg,
                }),
            )?;
            println!(
                "fit {}: {} rules generated, {} kept, {} active terms (lambda {:.6})",
                cfg.method_label(),
                out.report.n_rules_generated,
                out.report.n_rules_deduped,
                out.report.n_active_terms,
                out.report.lambda,
            );
            for w in &out.report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Predict { model, data, hte, pairwise, outcome, out } => {
            let model = FittedModel::load(&model)?;
            let (x, n) = load_covariate_matrix(&data, &model.col_names.to_vec())?;
            let p = model.p();
            let (header, values): (String, Vec<f64>) = if let Some(ts) = pairwise {
                let (t1, t2) = (ts[0], ts[1]);
                let vals = (0..n)
                    .map(|i| model.pairwise_hte(&x[i * p..(i + 1) * p], t1, t2))
                    .collect::<Result<_, _>>()?;
                (format!("pairwise_{t1}_{t2}"), vals)
            } else if let Some(t) = outcome {
                let vals = (0..n)
                    .map(|i| model.predict_outcome(&x[i * p..(i + 1) * p], t))
                    .collect::<Result<_, _>>()?;
                (format!("outcome_{t}"), vals)
            } else {
                let t = hte.ok_or_else(|| {
                    Error::Config("choose one of --hte, --pairwise or --outcome".into())
                })?;
                let vals = (0..n)
                    .map(|i| model.predict_hte(&x[i * p..(i + 1) * p], t))
                    .collect::<Result<_, _>>()?;
                (format!("hte_{t}"), vals)
            };
            let mut wtr = csv::WriterBuilder::new().from_path(&out).map_err(Error::from)?;
            wtr.write_record([header.as_str()]).map_err(Error::from)?;
            for v in values {
                wtr.write_record([format!("{v}")]).map_err(Error::from)?;
            }
            wtr.flush().map_err(|e| Error::Io(e))?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Importance { model, t1, t2, variables, out } => {
            let model = FittedModel::load(&model)?;
            if variables {
                model.write_variable_importance_csv(&out, t1, t2)?;
            } else {
                model.write_importance_csv(&out, t1, t2)?;
            }
            println!("wrote importance report to {}", out.display());
        }
        Command::Evaluate { model, data, schema, arm, groups, true_hte, out } => {
            let model = FittedModel::load(&model)?;
            let dataset = Dataset::load_csv(&data, &schema.schema())?;
            match true_hte {
                Some(path) => {
                    let truth = read_matrix_csv(&path)?;
                    let est: Vec<Vec<f64>> = (0..dataset.n())
                        .map(|i| model.predict_hte_all(dataset.x_row(i)))
                        .collect::<Result<_, _>>()?;
                    let report = simbench::evaluate_predictions(
                        &truth,
                        &est,
                        Some(model.count_terms()),
                    )?;
                    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
                    println!(
                        "mpehe {:.4}  abs_rel_bias {:.4}  kappa {:.4}  spearman {:.4}  terms {}",
                        report.mpehe,
                        report.abs_rel_bias,
                        report.kappa,
                        report.spearman,
                        report.n_terms.unwrap_or(0)
                    );
                }
                None => {
                    let est: Vec<f64> = (0..dataset.n())
                        .map(|i| model.predict_hte(dataset.x_row(i), arm))
                        .collect::<Result<_, _>>()?;
                    let rows = subgroup_eval(&est, &dataset, arm, groups)?;
                    write_subgroup_csv(&rows, arm, &out)?;
                    println!("wrote {groups} subgroup rows to {}", out.display());
                }
            }
        }
        Command::Tune {
            data,
            schema,
            config,
            grid_trees,
            grid_depth,
            grid_shrinkage,
            methods,
            holdout,
            arms,
            groups,
            seed,
            out_dir,
        } => {
            let base = config.build()?;
            let dataset = Dataset::load_csv(&data, &schema.schema())?;
            let mut grid = Vec::new();
            for label in &methods {
                for &trees in &grid_trees {
                    for &depth in &grid_depth {
                        for &shrink in &grid_shrinkage {
                            let mut cfg = parse_method(label, &base)?;
                            cfg.trees = trees;
                            cfg.mean_leaves = depth;
                            cfg.shrinkage = shrink;
                            grid.push(cfg);
                        }
                    }
                }
            }
            let result = pipeline::tune(&dataset, &grid, holdout, arms.as_deref(), groups, seed)?;
            std::fs::create_dir_all(&out_dir)?;

            // wide grid table: one row per hyperparameter triple, one metric
            // column per method
            let mut wtr = csv::Writer::from_path(out_dir.join("grid.csv")).map_err(Error::from)?;
            let mut header = vec!["trees".to_string(), "depth".into(), "shrinkage".into()];
            header.extend(methods.iter().cloned());
            wtr.write_record(&header).map_err(Error::from)?;
            for &trees in &grid_trees {
                for &depth in &grid_depth {
                    for &shrink in &grid_shrinkage {
                        let mut rec =
                            vec![trees.to_string(), format!("{depth}"), format!("{shrink}")];
                        for label in &methods {
                            let cell = result
                                .rows
                                .iter()
                                .find(|r| {
                                    r.method == *label
                                        && r.trees == trees
                                        && r.mean_leaves == depth
                                        && r.shrinkage == shrink
                                })
                                .map_or(String::new(), |r| format!("{}", r.metric));
                            rec.push(cell);
                        }
                        wtr.write_record(&rec).map_err(Error::from)?;
                    }
                }
            }
            wtr.flush().map_err(|e| Error::Io(e))?;

            write_manifest(
                &out_dir,
                serde_json::json!({
                    "command": "tune",
                    "data": data.display().to_string(),
                    "holdout": holdout,
                    "seed": seed,
                    "methods": methods,
                    "grid_trees": grid_trees,
                    "grid_depth": grid_depth,
                    "grid_shrinkage": grid_shrinkage,
                }),
            )?;
            match result.best {
                Some((idx, cfg)) => {
                    std::fs::write(
                        out_dir.join("best_config.json"),
                        serde_json::to_string_pretty(&cfg)?,
                    )?;
                    println!(
                        "best: {} trees={} depth={} shrinkage={} (metric {:.4})",
                        cfg.method_label(),
                        cfg.trees,
                        cfg.mean_leaves,
                        cfg.shrinkage,
                        result.rows[idx].metric
                    );
                }
                None => println!("no configuration achieved a finite tuning metric"),
            }
        }
        Command::Benchmark {
            scenarios,
            t_arms,
            assignments,
            methods,
            replications,
            n_train,
            n_test,
            config,
            seed,
            out_dir,
        } => {
            let base = config.build()?;
            let codes: Vec<String> = if scenarios == "all" {
                ["L", "S", "N"]
                    .iter()
                    .flat_map(|m| ["L", "S", "N"].iter().map(move |t| format!("{m}-{t}")))
                    .collect()
            } else {
                scenarios.split(',').map(|s| s.trim().to_string()).collect()
            };
            let mut specs = Vec::new();
            for assignment in &assignments {
                let assignment = match assignment.as_str() {
                    "rct" => Assignment::Rct,
                    "obs" | "observational" => Assignment::Observational,
                    other => {
                        return Err(Error::Config(format!("unknown assignment '{other}'")))
                    }
                };
                for &t in &t_arms {
                    for code in &codes {
                        let (m, te) = ScenarioSpec::shapes_from_code(code)?;
                        specs.push(ScenarioSpec {
                            t_arms: t,
                            assignment,
                            main_effect: m,
                            treatment_effect: te,
                            n_train,
                            n_test,
                            seed: 0,
                        });
                    }
                }
            }
            let method_cfgs = methods
                .iter()
                .map(|m| parse_method(m, &base))
                .collect::<Result<Vec<_>, _>>()?;
            let report = run_benchmark(&specs, &method_cfgs, replications, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            report.write_csv(&out_dir.join("report.csv"))?;
            report.write_manifest(&out_dir.join("manifest.json"))?;
            println!(
                "benchmarked {} scenarios x {} methods x {} replications -> {}",
                specs.len(),
                method_cfgs.len(),
                replications,
                out_dir.display()
            );
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: could not configure {jobs} worker threads: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
