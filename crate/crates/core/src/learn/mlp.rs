//! Feed-forward network: `input -> hidden... -> 1`, each hidden layer is
//! Linear, BatchNorm, ReLU, Dropout. Trained with Adam on the weighted
//! cross-entropy, with early stopping on the last training days.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_training, class_weights, dot, sigmoid, softplus, LearnError, Matrix};
use crate::rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fraction of the (latest) training days held out for early stopping.
    pub validation_fraction: f64,
    pub weight_decay: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32, 16],
            dropout: 0.2,
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            validation_fraction: 0.2,
            weight_decay: 0.0,
        }
    }
}

/// Parameter tensors: per hidden layer `[W (out x in), b, gamma, beta]`,
/// then the output layer `[W (1 x in), b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub config: MlpConfig,
    pub input_dim: usize,
    pub seed: u64,
    pub params: Vec<Vec<f64>>,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub epochs_trained: usize,
    pub best_validation_loss: Option<f64>,
}

/// Cached activations of one hidden layer.
struct LayerCache {
    input: Matrix,
    xhat: Matrix,
    inv_std: Vec<f64>,
    pre_relu: Matrix,
    mask: Option<Vec<f64>>,
}

fn linear(x: &Matrix, w: &[f64], b: &[f64], out: usize) -> Matrix {
    let mut h = Matrix::zeros(x.rows, out);
    for i in 0..x.rows {
        let xi = x.row(i);
        let hi = h.row_mut(i);
        for o in 0..out {
            hi[o] = dot(&w[o * x.cols..(o + 1) * x.cols], xi) + b[o];
        }
    }
    h
}

impl MlpModel {
    pub fn new(input_dim: usize, config: &MlpConfig, seed: u64) -> Self {
        let mut rng = rng::keyed(seed, &[0x3170]);
        let mut params = Vec::new();
        let mut running_mean = Vec::new();
        let mut running_var = Vec::new();
        let mut fan_in = input_dim;
        for &h in &config.hidden {
            // He-uniform initialization
            let bound = (6.0 / fan_in.max(1) as f64).sqrt();
            params.push((0..h * fan_in).map(|_| rng.random_range(-bound..bound)).collect());
            params.push(vec![0.0; h]);
            params.push(vec![1.0; h]);
            params.push(vec![0.0; h]);
            running_mean.push(vec![0.0; h]);
            running_var.push(vec![1.0; h]);
            fan_in = h;
        }
        let bound = (3.0 / fan_in.max(1) as f64).sqrt();
        params.push((0..fan_in).map(|_| rng.random_range(-bound..bound)).collect());
        params.push(vec![0.0]);
        Self { config: config.clone(), input_dim, seed, params, running_mean, running_var, epochs_trained: 0, best_validation_loss: None }
    }

    fn layers(&self) -> usize {
        self.config.hidden.len()
    }

    fn width(&self, l: usize) -> usize {
        self.config.hidden[l]
    }

    /// Logits. `train` uses batch statistics and, when `dropout_rng` is
    /// given, dropout; caches are filled for backpropagation.
    fn forward(&mut self, x: &Matrix, train: bool, mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>, caches: &mut Vec<LayerCache>) -> Vec<f64> {
        caches.clear();
        let mut a = x.clone();
        for l in 0..self.layers() {
            let out = self.width(l);
            let (w, b, gamma, beta) = (&self.params[4 * l], &self.params[4 * l + 1], &self.params[4 * l + 2], &self.params[4 * l + 3]);
            let h = linear(&a, w, b, out);
            let n = h.rows as f64;
            let (mean, var) = if train {
                let mut mean = vec![0.0; out];
                let mut var = vec![0.0; out];
                for i in 0..h.rows {
                    for (m, v) in mean.iter_mut().zip(h.row(i)) {
                        *m += v / n;
                    }
                }
                for i in 0..h.rows {
                    for ((s, v), m) in var.iter_mut().zip(h.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m) / n;
                    }
                }
                for o in 0..out {
                    self.running_mean[l][o] = (1.0 - BN_MOMENTUM) * self.running_mean[l][o] + BN_MOMENTUM * mean[o];
                    let unbiased = if h.rows > 1 { var[o] * n / (n - 1.0) } else { var[o] };
                    self.running_var[l][o] = (1.0 - BN_MOMENTUM) * self.running_var[l][o] + BN_MOMENTUM * unbiased;
                }
                (mean, var)
            } else {
                (self.running_mean[l].clone(), self.running_var[l].clone())
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = Matrix::zeros(h.rows, out);
            let mut pre = Matrix::zeros(h.rows, out);
            let mut next = Matrix::zeros(h.rows, out);
            for i in 0..h.rows {
                for o in 0..out {
                    let xh = (h.row(i)[o] - mean[o]) * inv_std[o];
                    xhat.row_mut(i)[o] = xh;
                    let y = gamma[o] * xh + beta[o];
                    pre.row_mut(i)[o] = y;
                    next.row_mut(i)[o] = y.max(0.0);
                }
            }
            let mask = match dropout_rng.as_deref_mut() {
                Some(r) if train && self.config.dropout > 0.0 => {
                    let keep = 1.0 - self.config.dropout;
                    let m: Vec<f64> = (0..next.data.len()).map(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                    next.data.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    Some(m)
                }
                _ => None,
            };
            caches.push(LayerCache { input: a, xhat, inv_std, pre_relu: pre, mask });
            a = next;
        }
        let oi = self.output_index();
        let logits = linear(&a, &self.params[oi], &self.params[oi + 1], 1).data;
        caches.push(LayerCache { input: a, xhat: Matrix::default(), inv_std: Vec::new(), pre_relu: Matrix::default(), mask: None });
        logits
    }

    fn output_index(&self) -> usize {
        4 * self.layers()
    }

    /// Gradients of the weighted loss `sum_i w_i bce_i / sum_i w_i` given the
    /// caches of a training-mode forward pass.
    fn backward(&self, logits: &[f64], y: &[u8], w: &[f64], caches: &[LayerCache]) -> Vec<Vec<f64>> {
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        let wsum: f64 = w.iter().sum();
        let dz: Vec<f64> = logits.iter().zip(y).zip(w).map(|((z, &t), wi)| wi * (sigmoid(*z) - t as f64) / wsum).collect();
        let oi = self.output_index();
        let last = caches.last().expect("output cache");
        let width = last.input.cols;
        let mut da = Matrix::zeros(dz.len(), width);
        for (i, d) in dz.iter().enumerate() {
            for (g, a) in grads[oi].iter_mut().zip(last.input.row(i)) {
                *g += d * a;
            }
            grads[oi + 1][0] += d;
            for (x, wv) in da.row_mut(i).iter_mut().zip(&self.params[oi]) {
                *x = d * wv;
            }
        }
        for l in (0..self.layers()).rev() {
            let c = &caches[l];
            let out = self.width(l);
            let n = da.rows as f64;
            if let Some(m) = &c.mask {
                da.data.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
            }
            // through ReLU
            for (v, p) in da.data.iter_mut().zip(&c.pre_relu.data) {
                if *p <= 0.0 {
                    *v = 0.0;
                }
            }
            let gamma = &self.params[4 * l + 2];
            let mut sum_dxhat = vec![0.0; out];
            let mut sum_dxhat_xhat = vec![0.0; out];
            for i in 0..da.rows {
                for o in 0..out {
                    let dy = da.row(i)[o];
                    let xh = c.xhat.row(i)[o];
                    grads[4 * l + 2][o] += dy * xh;
                    grads[4 * l + 3][o] += dy;
                    let dxh = dy * gamma[o];
                    sum_dxhat[o] += dxh;
                    sum_dxhat_xhat[o] += dxh * xh;
                }
            }
            let mut dh = Matrix::zeros(da.rows, out);
            for i in 0..da.rows {
                for o in 0..out {
                    let dxh = da.row(i)[o] * gamma[o];
                    dh.row_mut(i)[o] = c.inv_std[o] / n * (n * dxh - sum_dxhat[o] - c.xhat.row(i)[o] * sum_dxhat_xhat[o]);
                }
            }
            let in_dim = c.input.cols;
            let w = &self.params[4 * l];
            let mut dinput = Matrix::zeros(da.rows, in_dim);
            for i in 0..dh.rows {
                let xi = c.input.row(i);
                for o in 0..out {
                    let g = dh.row(i)[o];
                    if g == 0.0 {
                        continue;
                    }
                    grads[4 * l + 1][o] += g;
                    for (gw, x) in grads[4 * l][o * in_dim..(o + 1) * in_dim].iter_mut().zip(xi) {
                        *gw += g * x;
                    }
                    for (d, wv) in dinput.row_mut(i).iter_mut().zip(&w[o * in_dim..(o + 1) * in_dim]) {
                        *d += g * wv;
                    }
                }
            }
            da = dinput;
        }
        grads
    }

    /// Probabilities in inference mode.
    pub fn predict(&self, x: &Matrix) -> Vec<f64> {
        let mut scratch = self.clone();
        let mut caches = Vec::new();
        scratch.forward(x, false, None, &mut caches).into_iter().map(sigmoid).collect()
    }

    fn weighted_loss(&self, x: &Matrix, y: &[u8], w: &[f64]) -> f64 {
        let mut scratch = self.clone();
        let mut caches = Vec::new();
        let z = scratch.forward(x, false, None, &mut caches);
        let wsum: f64 = w.iter().sum();
        z.iter().zip(y).zip(w).map(|((z, &t), wi)| wi * (softplus(*z) - t as f64 * z)).sum::<f64>() / wsum
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &[Vec<f64>]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64, weight_decay: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let (c1, c2) = (1.0 - B1.powi(self.t), 1.0 - B2.powi(self.t));
        for (j, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for k in 0..p.len() {
                let gk = g[k] + weight_decay * p[k];
                self.m[j][k] = B1 * self.m[j][k] + (1.0 - B1) * gk;
                self.v[j][k] = B2 * self.v[j][k] + (1.0 - B2) * gk * gk;
                p[k] -= lr * (self.m[j][k] / c1) / ((self.v[j][k] / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Splits row indices into (fit, validation): the validation rows are the
/// last `fraction` of the distinct training days, or the last `fraction` of
/// rows when only one day is available.
fn validation_split(days: &[u32], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut distinct: Vec<u32> = days.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if fraction <= 0.0 || days.len() < 2 {
        return ((0..days.len()).collect(), Vec::new());
    }
    if distinct.len() >= 2 {
        let n_val = ((distinct.len() as f64 * fraction).round() as usize).clamp(1, distinct.len() - 1);
        let cutoff = distinct[distinct.len() - n_val];
        let (val, fit): (Vec<usize>, Vec<usize>) = (0..days.len()).partition(|&i| days[i] >= cutoff);
        (fit, val)
    } else {
        let n_val = ((days.len() as f64 * fraction).round() as usize).clamp(1, days.len() - 1);
        ((0..days.len() - n_val).collect(), (days.len() - n_val..days.len()).collect())
    }
}

pub fn train_mlp(x: &Matrix, y: &[u8], days: &[u32], config: &MlpConfig, seed: u64) -> Result<MlpModel, LearnError> {
    check_training(x, y)?;
    if days.len() != y.len() {
        return Err(LearnError::Shape(format!("{} day indices for {} labels", days.len(), y.len())));
    }
    if config.batch_size == 0 || !(0.0..1.0).contains(&config.dropout) {
        return Err(LearnError::Shape("batch size must be positive and dropout in [0, 1)".into()));
    }
    let mut model = MlpModel::new(x.cols, config, seed);
    let (mut fit_idx, val_idx) = validation_split(days, config.validation_fraction);
    // a one-class fitting split cannot be used; fall back to all rows
    let fit_labels: Vec<u8> = fit_idx.iter().map(|&i| y[i]).collect();
    let val_labels: Vec<u8> = val_idx.iter().map(|&i| y[i]).collect();
    let use_val = class_weights(&fit_labels).is_ok() && !val_idx.is_empty();
    if !use_val {
        fit_idx = (0..y.len()).collect();
    }
    let w_all = class_weights(y)?;
    let val_x = x.select_rows(&val_idx);
    let val_w: Vec<f64> = val_idx.iter().map(|&i| w_all[i]).collect();

    let mut adam = Adam::new(&model.params);
    let mut best: Option<(f64, MlpModel)> = None;
    let mut stale = 0;
    let mut caches = Vec::new();
    for epoch in 0..config.max_epochs {
        let mut rng = rng::keyed(seed, &[0xE90C, epoch as u64]);
        let mut order = fit_idx.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        // batch statistics need at least two rows
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            batches.pop();
        }
        for batch in batches {
            let bx = x.select_rows(batch);
            let by: Vec<u8> = batch.iter().map(|&i| y[i]).collect();
            let bw: Vec<f64> = batch.iter().map(|&i| w_all[i]).collect();
            let logits = model.forward(&bx, true, Some(&mut rng), &mut caches);
            let grads = model.backward(&logits, &by, &bw, &caches);
            adam.step(&mut model.params, &grads, config.learning_rate, config.weight_decay);
        }
        model.epochs_trained = epoch + 1;
        if use_val {
            let loss = model.weighted_loss(&val_x, &val_labels, &val_w);
            if best.as_ref().is_none_or(|(b, _)| loss < *b) {
                best = Some((loss, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    if let Some((loss, mut b)) = best {
        b.best_validation_loss = Some(loss);
        b.epochs_trained = model.epochs_trained;
        model = b;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::auc;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn xor_clusters_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..400 {
            let (a, b) = ((i % 2) as f64, ((i / 2) % 2) as f64);
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![2.0 * a - 1.0 + 0.15 * n1, 2.0 * b - 1.0 + 0.15 * n2]);
            y.push(((a + b) as u32 % 2) as u8);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        let days = vec![1; 400];
        let cfg = MlpConfig { max_epochs: 200, validation_fraction: 0.0, learning_rate: 1e-2, ..MlpConfig::default() };
        let m = train_mlp(&x, &y, &days, &cfg, 1).unwrap();
        let p = m.predict(&x);
        let acc = p.iter().zip(&y).filter(|(p, &t)| (**p > 0.5) == (t == 1)).count() as f64 / 400.0;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..2000).map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let y: Vec<u8> = (0..2000).map(|i| (i % 2) as u8).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let cfg = MlpConfig { max_epochs: 0, ..MlpConfig::default() };
        let m = train_mlp(&x, &y, &vec![1; 2000], &cfg, 5).unwrap();
        assert_eq!(m, MlpModel::new(5, &cfg, 5));
        let a = auc(&m.predict(&x), &y).unwrap();
        assert!((0.45..=0.55).contains(&a), "auc {a}");
    }

    #[test]
    fn gradient_check_without_dropout() {
        let cfg = MlpConfig { hidden: vec![2], dropout: 0.0, ..MlpConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Matrix::from_rows(&(0..6).map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).collect::<Vec<_>>()).unwrap();
        let y = [1, 0, 0, 1, 0, 0];
        let w = class_weights(&y).unwrap();
        let mut model = MlpModel::new(3, &cfg, 3);
        // move gamma and beta off their defaults
        model.params[2] = vec![1.3, 0.7];
        model.params[3] = vec![0.2, 0.4];
        let loss = |m: &MlpModel| {
            let mut s = m.clone();
            let mut c = Vec::new();
            let z = s.forward(&x, true, None, &mut c);
            let ws: f64 = w.iter().sum();
            z.iter().zip(&y).zip(&w).map(|((z, &t), wi)| wi * (softplus(*z) - t as f64 * z)).sum::<f64>() / ws
        };
        let mut caches = Vec::new();
        let mut m = model.clone();
        let z = m.forward(&x, true, None, &mut caches);
        let grads = model.backward(&z, &y, &w, &caches);
        for j in 0..model.params.len() {
            for k in 0..model.params[j].len() {
                let h = 1e-6;
                let (mut a, mut b) = (model.clone(), model.clone());
                a.params[j][k] += h;
                b.params[j][k] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                let g = grads[j][k];
                assert!((fd - g).abs() <= 1e-4 * g.abs().max(1e-4), "tensor {j} entry {k}: fd {fd} vs {g}");
            }
        }
    }

    #[test]
    fn validation_uses_latest_days() {
        let days = [1, 1, 2, 2, 3, 3, 4, 4, 5, 5];
        let (fit, val) = validation_split(&days, 0.2);
        assert_eq!(val, vec![8, 9]);
        assert_eq!(fit.len(), 8);
        let (fit, val) = validation_split(&[1, 1, 1, 1, 1], 0.2);
        assert_eq!((fit, val), (vec![0, 1, 2, 3], vec![4]));
    }

    #[test]
    fn deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> = (0..120).map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let y: Vec<u8> = rows.iter().map(|r| (r[0] > 0.2) as u8).collect();
        let days: Vec<u32> = (0..120).map(|i| i / 30 + 1).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let cfg = MlpConfig { max_epochs: 15, ..MlpConfig::default() };
        assert_eq!(train_mlp(&x, &y, &days, &cfg, 7).unwrap(), train_mlp(&x, &y, &days, &cfg, 7).unwrap());
    }
}
