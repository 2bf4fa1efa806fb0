use rulehte::basis::{fit_linear_terms, GroupedDesign};
use rulehte::ensemble::*;
use rulehte::propensity::{fit_gps, GpsOptions};
use rulehte::rulegen::{boost, dedupe_rules, extract_rules, BoostConfig, Learner};
use rulehte::simbench::*;
use rulehte::transform::transform_outcomes;
use std::time::Instant;

fn main() {
    let tol: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let spec = ScenarioSpec {
        t_arms: 2, assignment: Assignment::Rct,
        main_effect: EffectShape::Linear, treatment_effect: EffectShape::Linear,
        n_train: 1000, n_test: 1000, seed: 7,
    };
    let gen = generate(&spec).unwrap();
    let data = &gen.train;
    let gps = fit_gps(data, &GpsOptions::default()).unwrap();
    let z = transform_outcomes(data, &gps).unwrap();
    let bf = boost(&z, data, &BoostConfig { seed: 3, learner: Learner::Gbm, ..Default::default() }).unwrap();
    let mut rules = Vec::new();
    for t in &bf.trees { rules.extend(extract_rules(t)); }
    let rules = dedupe_rules(rules, data).unwrap();
    let linears = fit_linear_terms(data, 0.025).unwrap().terms;
    let design = GroupedDesign::build(data, &rules, &linears).unwrap();
    println!("groups {}", design.n_groups());

    let opts = CvOptions {
        folds: 10, seed: 1,
        path: PathOptions::default(),
        solve: SolveOptions { tol, max_sweeps: 100_000, size_factor: GroupSizeFactor::SqrtT },
    };
    let t0 = Instant::now();
    let out = group_lasso_cv(&design, data.y(), &opts).unwrap();
    println!("cv total {:.1}s", t0.elapsed().as_secs_f64());
    let tab = &out.selection.table;
    println!("lambda path: {:.3} .. {:.3}, selected {:.4}", tab[0].lambda, tab.last().unwrap().lambda, out.selection.lambda);
    let sel_idx = tab.iter().position(|p| p.lambda == out.selection.lambda).unwrap();
    for idx in [0usize, 20, 40, 60, 80, 99] {
        println!("  cv[{idx}] lambda {:.4} err {:.4}", tab[idx].lambda, tab[idx].mean_error);
    }
    println!("  selected idx {sel_idx} err {:.4}", tab[sel_idx].mean_error);
    let fit = &out.fit;
    let maxc = fit.coef.iter().flatten().fold(0.0f64, |a, c| a.max(c.abs()));
    println!("final: active {} max|coef| {:.3} kkt {:.3e} converged {} sweeps {}",
        fit.active_groups.len(), maxc, fit.kkt_residual, fit.converged, fit.sweeps);
    // test mpehe from this plain-gl fit
    let est: Vec<Vec<f64>> = (0..gen.test.n()).map(|i| {
        let x = gen.test.x_row(i);
        let vals: Vec<f64> = design.basis().iter().map(|b| b.evaluate(x).unwrap()).collect();
        (1..=2).map(|t| {
            let mut v = fit.intercepts[t] - fit.intercepts[0];
            for g in 0..design.n_groups() { v += (fit.coef[g][t] - fit.coef[g][0]) * vals[g]; }
            v
        }).collect()
    }).collect();
    println!("mpehe {:.4}", mpehe(&gen.true_hte_test, &est).unwrap());
}
