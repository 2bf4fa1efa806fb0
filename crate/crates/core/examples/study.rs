use rulehte::pipeline::{fit, EnsembleMethod, RunConfig};
use rulehte::rulegen::Learner;
use rulehte::simbench::*;
use std::time::Instant;

fn one(gen: &GeneratedScenario, cfg: &RunConfig) -> (f64, f64, f64, usize, f64) {
    let t0 = Instant::now();
    let out = fit(&gen.train, cfg).unwrap();
    let est: Vec<Vec<f64>> = (0..gen.test.n())
        .map(|i| out.model.predict_hte_all(gen.test.x_row(i)).unwrap())
        .collect();
    let rep = evaluate_predictions(&gen.true_hte_test, &est, Some(out.model.count_terms())).unwrap();
    (rep.mpehe, rep.kappa, rep.abs_rel_bias, out.report.n_active_terms, t0.elapsed().as_secs_f64())
}

fn main() {
    let n_train: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1000);
    let tol: f64 = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    for ens in [EnsembleMethod::GroupLasso, EnsembleMethod::AdaptiveGroupLasso] {
        let mut acc = vec![];
        for seed in 0..3u64 {
            let spec = ScenarioSpec {
                t_arms: 2, assignment: Assignment::Rct,
                main_effect: EffectShape::Linear, treatment_effect: EffectShape::Linear,
                n_train, n_test: 1000, seed: 100 + seed,
            };
            let gen = generate(&spec).unwrap();
            let cfg = RunConfig {
                learner: Learner::Gbm, ensemble: ens, seed: 500 + seed,
                solver_tol: tol, ..Default::default()
            };
            let r = one(&gen, &cfg);
            println!("  seed {seed}: mpehe {:.3} kappa {:.3} bias {:.3} terms {} ({:.0}s)", r.0, r.1, r.2, r.3, r.4);
            acc.push(r);
        }
        let m = |f: &dyn Fn(&(f64,f64,f64,usize,f64))->f64| acc.iter().map(f).sum::<f64>()/acc.len() as f64;
        println!("{:?} n={n_train} tol={tol:.0e}: mpehe {:.3} kappa {:.3} bias {:.3} time {:.0}s",
            ens, m(&|r| r.0), m(&|r| r.1), m(&|r| r.2), m(&|r| r.4));
    }
}
