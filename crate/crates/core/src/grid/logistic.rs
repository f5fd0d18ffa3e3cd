//! L2-regularized binary logistic regression with a deterministic
//! quasi-Newton solver (L-BFGS directions, Armijo backtracking).

use serde::{Deserialize, Serialize};

use crate::tensor::{dot, sigmoid, softplus};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop when `|∇| ≤ tolerance · (1 + |w|)`.
    pub tolerance: f64,
    pub history: usize,
    /// Cap on negatives per positive inside one cell; `None` keeps all.
    pub max_negative_ratio: Option<f64>,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 3000,
            tolerance: 1e-5,
            history: 10,
            max_negative_ratio: Some(5.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Mean logistic loss plus `(λ/2)|w|²` (bias unregularized) and its gradient;
/// the last gradient entry is the bias.
pub fn objective(rows: &[&[f64]], labels: &[bool], lambda: f64, params: &[f64], grad: &mut [f64]) -> f64 {
    let d = params.len() - 1;
    let (w, b) = (&params[..d], params[d]);
    let m = rows.len() as f64;
    grad.fill(0.0);
    let mut loss = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let s = dot(w, x) + b;
        loss += if y { softplus(-s) } else { softplus(s) };
        let r = sigmoid(s) - f64::from(u8::from(y));
        for (g, xi) in grad[..d].iter_mut().zip(x.iter()) {
            *g += r * xi;
        }
        grad[d] += r;
    }
    loss /= m;
    for g in grad.iter_mut() {
        *g /= m;
    }
    for i in 0..d {
        loss += 0.5 * lambda * w[i] * w[i];
        grad[i] += lambda * w[i];
    }
    loss
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Minimize the regularized mean logistic loss over `rows`.
pub fn fit(rows: &[&[f64]], labels: &[bool], lambda: f64, config: &SolverConfig) -> LogisticFit {
    assert_eq!(rows.len(), labels.len());
    assert!(!rows.is_empty(), "logistic fit needs samples");
    let d = rows[0].len();
    let n = d + 1;
    let mut x = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut f = objective(rows, labels, lambda, &x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let stationary = |g: &[f64], x: &[f64]| norm(g) <= config.tolerance * (1.0 + norm(&x[..d]));
    while iterations < config.max_iters && !stationary(&g, &x) {
        // two-loop recursion
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / norm(&g).max(1.0)
        };
        for qj in q.iter_mut() {
            *qj *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&dir, &g);
        if slope >= 0.0 {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v / norm(&g).max(1.0)).collect();
            slope = dot(&dir, &g);
        }

        let mut step = 1.0;
        let mut g_new = vec![0.0; n];
        let mut x_new = vec![0.0; n];
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_new = objective(rows, labels, lambda, &x_new, &mut g_new);
            if f_new <= f + 1e-4 * step * slope {
                accepted = true;
                f = f_new;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        if dot(&s, &yv) > 1e-12 * norm(&s) * norm(&yv) {
            if s_hist.len() == config.history {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        }
        x = x_new;
        g = g_new;
    }
    let converged = stationary(&g, &x);
    let bias = x[d];
    x.truncate(d);
    LogisticFit {
        weights: x,
        bias,
        iterations,
        grad_norm: norm(&g),
        converged,
    }
}
