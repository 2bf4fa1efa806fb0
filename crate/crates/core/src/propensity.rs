//! Generalized propensity score estimation via multinomial logistic
//! regression, with probability clipping.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::{Error, Result};

/// Options for [`fit_gps`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpsOptions {
    /// Convergence threshold on the max-norm of the log-likelihood gradient,
    /// per observation (the raw gradient scales with n).
    pub tol: f64,
    pub max_iter: usize,
    /// Probabilities are clipped to `[clip_eps, 1 - clip_eps]` and
    /// renormalized; 0 disables clipping.
    pub clip_eps: f64,
}

impl Default for GpsOptions {
    fn default() -> Self {
        GpsOptions { tol: 1e-8, max_iter: 200, clip_eps: 0.01 }
    }
}

/// Convergence metadata from a GPS fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpsFitMeta {
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Negative log-likelihood per iteration (non-increasing).
    pub nll_trace: Vec<f64>,
}

/// Fitted multinomial logistic model for P(W = t | X = x).
///
/// `coef[t]` holds `[intercept, slope_1, ..., slope_p]` for non-control arm
/// t+1; the control arm is the reference class with linear predictor 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpsModel {
    pub coef: Vec<Vec<f64>>,
    pub clip_eps: f64,
    pub meta: GpsFitMeta,
}

impl GpsModel {
    /// Build a model from known coefficients (e.g. a known assignment
    /// mechanism) instead of estimating them.
    pub fn from_known(coef: Vec<Vec<f64>>, clip_eps: f64) -> Result<Self> {
        if coef.is_empty() || coef.iter().any(|r| r.len() != coef[0].len() || r.len() < 2) {
            return Err(Error::Config("coefficient matrix must be T x (p+1)".into()));
        }
        Ok(GpsModel {
            coef,
            clip_eps,
            meta: GpsFitMeta { converged: true, iterations: 0, grad_norm: 0.0, nll_trace: vec![] },
        })
    }

    pub fn n_arms(&self) -> usize {
        self.coef.len() + 1
    }

    pub fn p(&self) -> usize {
        self.coef[0].len() - 1
    }

    /// Probability vector over arms 0..=T at covariates `x`: softmax over the
    /// linear predictors (0 for the control), clipped and renormalized.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.p() {
            return Err(Error::Data(format!(
                "expected {} covariates, got {}",
                self.p(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate value".into()));
        }
        let mut eta = vec![0.0];
        for row in &self.coef {
            let mut e = row[0];
            for (j, &xj) in x.iter().enumerate() {
                e += row[j + 1] * xj;
            }
            eta.push(e);
        }
        Ok(clip_and_normalize(softmax(&eta), self.clip_eps))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn softmax(eta: &[f64]) -> Vec<f64> {
    let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = eta.iter().map(|e| (e - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

fn clip_and_normalize(mut p: Vec<f64>, eps: f64) -> Vec<f64> {
    if eps > 0.0 {
        for v in p.iter_mut() {
            *v = v.clamp(eps, 1.0 - eps);
        }
    }
    let s: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= s;
    }
    p
}

/// Fit the GPS model by full-batch Newton iteration with backtracking line
/// search; covariates are standardized internally and coefficients reported
/// on the original scale.
pub fn fit_gps(data: &Dataset, opts: &GpsOptions) -> Result<GpsModel> {
    let counts = data.arm_counts();
    if let Some(t) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("arm {t} has no observations; cannot fit GPS")));
    }
    if !(0.0..0.5).contains(&opts.clip_eps) {
        return Err(Error::Config("clip_eps must lie in [0, 0.5)".into()));
    }

    let n = data.n();
    let p = data.p();
    let t_arms = data.t_max(); // non-control arms
    let d = t_arms * (p + 1);

    // standardize columns for conditioning
    let mut means = vec![0.0; p];
    let mut scales = vec![1.0; p];
    for j in 0..p {
        let col = data.col(j);
        means[j] = crate::util::mean(&col);
        let s = crate::util::sd_pop(&col);
        scales[j] = if s > 0.0 { s } else { 1.0 };
    }
    let mut xs: Vec<f64> = Vec::with_capacity(n * p);
    for i in 0..n {
        let row = data.x_row(i);
        for j in 0..p {
            xs.push((row[j] - means[j]) / scales[j]);
        }
    }

    let eta_all = |theta: &[f64]| -> Vec<f64> {
        // n x t_arms linear predictors for the non-control arms
        let mut eta = vec![0.0; n * t_arms];
        for i in 0..n {
            let xr = &xs[i * p..(i + 1) * p];
            for t in 0..t_arms {
                let row = &theta[t * (p + 1)..(t + 1) * (p + 1)];
                let mut e = row[0];
                for j in 0..p {
                    e += row[j + 1] * xr[j];
                }
                eta[i * t_arms + t] = e;
            }
        }
        eta
    };
    let nll_of = |eta: &[f64]| -> f64 {
        let mut nll = 0.0;
        for i in 0..n {
            let e = &eta[i * t_arms..(i + 1) * t_arms];
            let m = e.iter().cloned().fold(0.0f64, f64::max);
            let lse = m + ((-m).exp() + e.iter().map(|v| (v - m).exp()).sum::<f64>()).ln();
            let wi = data.w()[i];
            let obs = if wi == 0 { 0.0 } else { e[wi - 1] };
            nll += lse - obs;
        }
        nll
    };

    let mut theta = vec![0.0; d];
    let mut nll = nll_of(&eta_all(&theta));
    let mut trace = vec![nll];
    let mut grad_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let eta = eta_all(&theta);
        // probabilities for non-control arms
        let mut probs = vec![0.0; n * t_arms];
        for i in 0..n {
            let e = &eta[i * t_arms..(i + 1) * t_arms];
            let mut full = vec![0.0];
            full.extend_from_slice(e);
            let sm = softmax(&full);
            probs[i * t_arms..(i + 1) * t_arms].copy_from_slice(&sm[1..]);
        }
        // gradient of the NLL
        let mut grad = vec![0.0; d];
        for i in 0..n {
            let xr = &xs[i * p..(i + 1) * p];
            let wi = data.w()[i];
            for t in 0..t_arms {
                let r = probs[i * t_arms + t] - if wi == t + 1 { 1.0 } else { 0.0 };
                let base = t * (p + 1);
                grad[base] += r;
                for j in 0..p {
                    grad[base + 1 + j] += r * xr[j];
                }
            }
        }
        grad_norm = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if grad_norm <= opts.tol * n as f64 {
            converged = true;
            break;
        }
        // Hessian of the NLL (PSD)
        let mut hess = vec![0.0; d * d];
        for i in 0..n {
            let xr = &xs[i * p..(i + 1) * p];
            for t in 0..t_arms {
                let pt = probs[i * t_arms + t];
                for s in t..t_arms {
                    let ps = probs[i * t_arms + s];
                    let wts = if s == t { pt * (1.0 - pt) } else { -pt * ps };
                    if wts == 0.0 {
                        continue;
                    }
                    let bt = t * (p + 1);
                    let bs = s * (p + 1);
                    for a in 0..=p {
                        let xa = if a == 0 { 1.0 } else { xr[a - 1] };
                        for b in 0..=p {
                            let xb = if b == 0 { 1.0 } else { xr[b - 1] };
                            hess[(bt + a) * d + (bs + b)] += wts * xa * xb;
                            if s != t {
                                hess[(bs + b) * d + (bt + a)] += wts * xa * xb;
                            }
                        }
                    }
                }
            }
        }
        let dir = match solve_spd(&hess, &grad, d) {
            Some(dir) => dir,
            None => grad.clone(), // fall back to gradient descent
        };
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let dir = if slope > 0.0 { dir } else { grad.clone() };
        let slope = if slope > 0.0 { slope } else { grad.iter().map(|g| g * g).sum() };

        // backtracking line search on the NLL
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-12 {
            let cand: Vec<f64> =
                theta.iter().zip(&dir).map(|(t, d)| t - step * d).collect();
            let cand_nll = nll_of(&eta_all(&cand));
            if cand_nll.is_finite() && cand_nll <= nll - 1e-4 * step * slope {
                theta = cand;
                nll = cand_nll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(nll);
        if !accepted {
            break; // no further progress possible
        }
    }

    // back-transform to the original covariate scale
    let coef: Vec<Vec<f64>> = (0..t_arms)
        .map(|t| {
            let row = &theta[t * (p + 1)..(t + 1) * (p + 1)];
            let mut out = vec![0.0; p + 1];
            out[0] = row[0];
            for j in 0..p {
                out[j + 1] = row[j + 1] / scales[j];
                out[0] -= row[j + 1] * means[j] / scales[j];
            }
            out
        })
        .collect();

    Ok(GpsModel {
        coef,
        clip_eps: opts.clip_eps,
        meta: GpsFitMeta { converged, iterations, grad_norm, nll_trace: trace },
    })
}

/// Solve A x = b for symmetric positive definite A (row-major, d x d) by
/// Cholesky factorization, adding a diagonal ridge if needed.
fn solve_spd(a: &[f64], b: &[f64], d: usize) -> Option<Vec<f64>> {
    for ridge in [0.0, 1e-10, 1e-6, 1e-2] {
        if let Some(x) = try_cholesky(a, b, d, ridge) {
            return Some(x);
        }
    }
    None
}

fn try_cholesky(a: &[f64], b: &[f64], d: usize, ridge: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            if i == j {
                s += ridge;
            }
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    // forward then back substitution
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    Some(x)
}
