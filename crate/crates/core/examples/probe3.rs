use rulehte::basis::{fit_linear_terms, GroupedDesign};
use rulehte::ensemble::*;
use rulehte::pipeline::{fit, EnsembleMethod, RunConfig};
use rulehte::rulegen::Learner;
use rulehte::simbench::*;

// per-arm OLS on winsorized linear terms: the attainable "linear oracle"
fn ols_linear_mpehe(gen: &GeneratedScenario) -> f64 {
    let data = &gen.train;
    let linears = fit_linear_terms(data, 0.025).unwrap().terms;
    let p = linears.len();
    let n_arms = data.n_arms();
    // separate OLS per arm: y ~ 1 + l_1..l_p on that arm's rows
    let mut coefs: Vec<Vec<f64>> = Vec::new();
    for t in 0..n_arms {
        let rows: Vec<usize> = (0..data.n()).filter(|&i| data.w()[i] == t).collect();
        let d = p + 1;
        let mut a = vec![vec![0.0; d + 1]; d];
        for &i in &rows {
            let mut xr = vec![1.0];
            for l in &linears { xr.push(l.apply(data.x(i, l.col))); }
            for r in 0..d {
                for c in 0..d { a[r][c] += xr[r] * xr[c]; }
                a[r][d] += xr[r] * data.y()[i];
            }
        }
        for k in 0..d {
            let piv = (k..d).max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap()).unwrap();
            a.swap(k, piv);
            for i in k + 1..d {
                let f = a[i][k] / a[k][k];
                for j in k..=d { a[i][j] -= f * a[k][j]; }
            }
        }
        let mut sol = vec![0.0; d];
        for k in (0..d).rev() {
            let mut s = a[k][d];
            for j in k + 1..d { s -= a[k][j] * sol[j]; }
            sol[k] = s / a[k][k];
        }
        coefs.push(sol);
    }
    let est: Vec<Vec<f64>> = (0..gen.test.n()).map(|i| {
        let x = gen.test.x_row(i);
        let mut vals = vec![1.0];
        for l in &linears { vals.push(l.apply(x[l.col])); }
        (1..n_arms).map(|t| {
            (0..=p).map(|k| (coefs[t][k] - coefs[0][k]) * vals[k]).sum()
        }).collect()
    }).collect();
    mpehe(&gen.true_hte_test, &est).unwrap()
}

fn main() {
    let spec = ScenarioSpec {
        t_arms: 2, assignment: Assignment::Rct,
        main_effect: EffectShape::Linear, treatment_effect: EffectShape::Linear,
        n_train: 1000, n_test: 1000, seed: 7,
    };
    let gen = generate(&spec).unwrap();
    println!("per-arm OLS on linear terms: mpehe {:.4}", ols_linear_mpehe(&gen));

    // group lasso with linear terms only (no rules)
    let data = &gen.train;
    let linears = fit_linear_terms(data, 0.025).unwrap().terms;
    let design = GroupedDesign::build(data, &[], &linears).unwrap();
    let opts = CvOptions {
        folds: 10, seed: 1, path: PathOptions::default(),
        solve: SolveOptions { tol: 1e-6, max_sweeps: 100_000, size_factor: GroupSizeFactor::SqrtT },
    };
    let out = group_lasso_cv(&design, data.y(), &opts).unwrap();
    let est: Vec<Vec<f64>> = (0..gen.test.n()).map(|i| {
        let x = gen.test.x_row(i);
        let vals: Vec<f64> = design.basis().iter().map(|b| b.evaluate(x).unwrap()).collect();
        (1..=2).map(|t| {
            let mut v = out.fit.intercepts[t] - out.fit.intercepts[0];
            for g in 0..design.n_groups() { v += (out.fit.coef[g][t] - out.fit.coef[g][0]) * vals[g]; }
            v
        }).collect()
    }).collect();
    println!("group-lasso CV, linear terms only: lambda {:.3} active {} mpehe {:.4}",
        out.fit.lambda, out.fit.active_groups.len(), mpehe(&gen.true_hte_test, &est).unwrap());

    // full pipeline with known GPS
    let cfg = RunConfig {
        learner: Learner::Gbm, ensemble: EnsembleMethod::GroupLasso, seed: 3,
        solver_tol: 1e-4, known_gps: Some(vec![1.0/3.0; 3]), ..Default::default()
    };
    let out = fit(&gen.train, &cfg).unwrap();
    let est: Vec<Vec<f64>> = (0..gen.test.n())
        .map(|i| out.model.predict_hte_all(gen.test.x_row(i)).unwrap()).collect();
    println!("pipeline gl, known GPS: active {} mpehe {:.4}",
        out.report.n_active_terms, mpehe(&gen.true_hte_test, &est).unwrap());
}
