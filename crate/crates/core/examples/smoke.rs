use rulehte::pipeline::{fit, EnsembleMethod, RunConfig};
use rulehte::rulegen::Learner;
use rulehte::simbench::*;
use std::time::Instant;

fn main() {
    let tol: f64 = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(1e-4);
    let spec = ScenarioSpec {
        t_arms: 2,
        assignment: Assignment::Rct,
        main_effect: EffectShape::Linear,
        treatment_effect: EffectShape::Linear,
        n_train: 1000,
        n_test: 1000,
        seed: 7,
    };
    let gen = generate(&spec).unwrap();
    for (label, ens) in [("gl", EnsembleMethod::GroupLasso), ("agl", EnsembleMethod::AdaptiveGroupLasso)] {
        let cfg = RunConfig { learner: Learner::Gbm, ensemble: ens, seed: 3, solver_tol: tol, ..Default::default() };
        let t0 = Instant::now();
        let out = fit(&gen.train, &cfg).unwrap();
        let est: Vec<Vec<f64>> = (0..gen.test.n())
            .map(|i| out.model.predict_hte_all(gen.test.x_row(i)).unwrap())
            .collect();
        let rep = evaluate_predictions(&gen.true_hte_test, &est, Some(out.model.count_terms())).unwrap();
        println!(
            "gbm.{label} tol={tol:.0e}: {:.1}s active {} | mpehe {:.3} bias {:.3} kappa {:.3} rho {:.3}",
            t0.elapsed().as_secs_f64(),
            out.report.n_active_terms, rep.mpehe, rep.abs_rel_bias, rep.kappa, rep.spearman
        );
    }
}
