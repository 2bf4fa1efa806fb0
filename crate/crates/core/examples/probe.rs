use rulehte::basis::{fit_linear_terms, GroupedDesign};
use rulehte::ensemble::*;
use rulehte::propensity::{fit_gps, GpsOptions};
use rulehte::rulegen::{boost, dedupe_rules, extract_rules, BoostConfig, Learner};
use rulehte::simbench::*;
use rulehte::transform::transform_outcomes;
use std::time::Instant;

fn main() {
    let spec = ScenarioSpec {
        t_arms: 2, assignment: Assignment::Rct,
        main_effect: EffectShape::Linear, treatment_effect: EffectShape::Linear,
        n_train: 1000, n_test: 1000, seed: 7,
    };
    let gen = generate(&spec).unwrap();
    let data = &gen.train;
    let t0 = Instant::now();
    let gps = fit_gps(data, &GpsOptions::default()).unwrap();
    println!("gps: {:.2}s converged={}", t0.elapsed().as_secs_f64(), gps.meta.converged);
    let z = transform_outcomes(data, &gps).unwrap();
    let t0 = Instant::now();
    let bf = boost(&z, data, &BoostConfig { seed: 3, learner: Learner::Gbm, ..Default::default() }).unwrap();
    println!("boost: {:.2}s ({} trees)", t0.elapsed().as_secs_f64(), bf.trees.len());
    let t0 = Instant::now();
    let mut rules = Vec::new();
    for t in &bf.trees { rules.extend(extract_rules(t)); }
    let rules = dedupe_rules(rules, data).unwrap();
    println!("rules: {:.2}s ({} kept)", t0.elapsed().as_secs_f64(), rules.len());
    let linears = fit_linear_terms(data, 0.025).unwrap().terms;
    let t0 = Instant::now();
    let design = GroupedDesign::build(data, &rules, &linears).unwrap();
    println!("design: {:.2}s ({} groups x {} arms, n={})", t0.elapsed().as_secs_f64(), design.n_groups(), design.n_arms(), design.n());
    let weights = vec![1.0; design.n_groups()];
    let rows: Vec<usize> = (0..design.n()).collect();
    let problem = GroupProblem::new(&design, &rows, data.y(), &weights, GroupSizeFactor::SqrtT).unwrap();
    let lmax = problem.lambda_max().unwrap();
    println!("lambda_max = {lmax:.4}");
    let path = default_path(lmax, &PathOptions::default());
    for tol in [1e-4, 1e-6] {
        let opts = SolveOptions { tol, max_sweeps: 100_000, size_factor: GroupSizeFactor::SqrtT };
        let t0 = Instant::now();
        let mut warm = None;
        let mut total_sweeps = 0usize;
        let mut max_sweeps_one = 0usize;
        let mut n_active = 0usize;
        for &lam in &path {
            let (state, diag) = problem.solve(lam, warm.take(), &opts);
            total_sweeps += diag.sweeps;
            max_sweeps_one = max_sweeps_one.max(diag.sweeps);
            n_active = state.beta.iter().filter(|b| b.iter().any(|v| *v != 0.0)).count();
            warm = Some(state);
        }
        println!("path(tol={tol:.0e}): {:.2}s, sweeps total {total_sweeps} max {max_sweeps_one}, final active {n_active}",
                 t0.elapsed().as_secs_f64());
    }
}
