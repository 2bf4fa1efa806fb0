use rulehte::data::Dataset;
use rulehte::pipeline::{fit, EnsembleMethod, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7_000 + seed);
        let n = 500;
        let mut y = Vec::new();
        let mut w = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            y.push(rng.gen_range(-1.0..1.0));
            w.push(rng.gen_range(0..3usize));
            for _ in 0..4 { x.push(rng.gen_range(-1.0..1.0)); }
        }
        let names = (1..=4).map(|j| format!("x{j}")).collect();
        let data = Dataset::from_parts(y, w, x, 4, names).unwrap();
        let cfg = RunConfig { ensemble: EnsembleMethod::AdaptiveGroupLasso, seed, ..Default::default() };
        let out = fit(&data, &cfg).unwrap();
        println!("seed {seed}: active {} (stage1 lambda {:?}, final lambda {:.4})",
            out.report.n_active_terms, out.report.stage1_lambda, out.report.lambda);
    }
}
