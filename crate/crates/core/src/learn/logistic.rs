//! L2-regularized logistic regression.
//!
//! Objective: `(1/n) sum_i w_i [softplus(z_i) - y_i z_i] + (lambda/2) |beta|^2`
//! with `z_i = beta . x_i + b`, inverse class-frequency weights `w_i`, and an
//! unpenalized bias. Minimized by full-batch gradient descent with Nesterov
//! momentum, backtracking step size and adaptive restart.

use serde::{Deserialize, Serialize};

use super::{check_training, class_weights, dot, sigmoid, softplus, LearnError, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub l2_lambda: f64,
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { l2_lambda: 1e-3, tolerance: 1e-6, max_iter: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2_lambda: f64,
    pub seed: u64,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LogisticModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.bias
    }

    /// Probability of the positive class for each row.
    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows).map(|i| sigmoid(self.decision(x.row(i)))).collect()
    }
}

/// Weighted objective and its gradient; the last gradient entry is the bias.
pub fn loss_and_grad(x: &Matrix, y: &[u8], w: &[f64], lambda: f64, params: &[f64], grad: &mut [f64]) -> f64 {
    let d = x.cols;
    let (beta, bias) = (&params[..d], params[d]);
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = x.rows as f64;
    let mut loss = 0.0;
    for i in 0..x.rows {
        let row = x.row(i);
        let z = dot(beta, row) + bias;
        let yi = y[i] as f64;
        loss += w[i] * (softplus(z) - yi * z);
        let r = w[i] * (sigmoid(z) - yi) / n;
        for (g, v) in grad[..d].iter_mut().zip(row) {
            *g += r * v;
        }
        grad[d] += r;
    }
    let mut reg = 0.0;
    for (g, b) in grad[..d].iter_mut().zip(beta) {
        *g += lambda * b;
        reg += b * b;
    }
    loss / n + 0.5 * lambda * reg
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn train_logistic(x: &Matrix, y: &[u8], config: &LogisticConfig, seed: u64) -> Result<LogisticModel, LearnError> {
    check_training(x, y)?;
    let w = class_weights(y)?;
    let dim = x.cols + 1;
    let lambda = config.l2_lambda;

    // Lipschitz bound of the gradient: max_i w_i * (|x_i|^2 + 1) / 4 + lambda
    let mut step_l = (0..x.rows).map(|i| w[i] * (dot(x.row(i), x.row(i)) + 1.0)).fold(0.0, f64::max) / 4.0 + lambda;
    // start optimistic; backtracking grows it when needed
    step_l = (step_l / 64.0).max(lambda).max(1e-12);

    let mut params = vec![0.0; dim];
    let mut momentum_point = params.clone();
    let mut t = 1.0f64;
    let mut grad = vec![0.0; dim];
    let mut grad_y = vec![0.0; dim];
    let mut trial = vec![0.0; dim];
    let mut trial_grad = vec![0.0; dim];
    let mut f_x = loss_and_grad(x, y, &w, lambda, &params, &mut grad);
    let mut iterations = 0;
    let mut grad_norm = norm(&grad);

    while grad_norm >= config.tolerance && iterations < config.max_iter {
        iterations += 1;
        let f_y = loss_and_grad(x, y, &w, lambda, &momentum_point, &mut grad_y);
        let gy2 = dot(&grad_y, &grad_y);
        // backtracking on the sufficient-decrease condition
        let f_trial = loop {
            for ((p, m), g) in trial.iter_mut().zip(&momentum_point).zip(&grad_y) {
                *p = m - g / step_l;
            }
            let f = loss_and_grad(x, y, &w, lambda, &trial, &mut trial_grad);
            if f <= f_y - 0.5 * gy2 / step_l + 1e-15 * f_y.abs() || step_l > 1e15 {
                break f;
            }
            step_l *= 2.0;
        };
        // restart momentum whenever it stops helping
        if f_trial > f_x {
            t = 1.0;
            momentum_point.copy_from_slice(&params);
            step_l = (step_l * 0.9).max(1e-12);
            continue;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let beta = (t - 1.0) / t_next;
        for i in 0..dim {
            momentum_point[i] = trial[i] + beta * (trial[i] - params[i]);
        }
        params.copy_from_slice(&trial);
        grad.copy_from_slice(&trial_grad);
        f_x = f_trial;
        t = t_next;
        grad_norm = norm(&grad);
        // let the step size relax again
        step_l = (step_l * 0.9).max(1e-12);
    }
    Ok(LogisticModel { weights: params[..x.cols].to_vec(), bias: params[x.cols], l2_lambda: lambda, seed, iterations, grad_norm })
}
