//! Attention fusion over links.
//!
//! A shared scorer `s(x) = v . relu(W x + b)` (one hidden layer) rates each
//! link's 11-feature sub-vector; a softmax over links turns the scores into
//! weights, the weighted sum of link features feeds a logistic head, and all
//! of it is trained jointly with Adam. Hard mode keeps the `k` links with
//! the largest mean training weight and refits a plain logistic model on
//! their concatenated features.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::logistic::{train_logistic, LogisticConfig, LogisticModel};
use super::{check_training, class_weights, sigmoid, LearnError, Matrix};
use crate::pipeline::FEATURE_COUNT;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Soft,
    Hard(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub scorer_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub logistic: LogisticConfig,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { scorer_width: 16, learning_rate: 1e-3, epochs: 30, batch_size: 64, logistic: LogisticConfig::default() }
    }
}

/// Flat parameter layout: `W (h x F)`, `b (h)`, `v (h)`, head `u (F)`, `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionModel {
    pub mode: AttentionMode,
    pub links: usize,
    pub width: usize,
    pub params: Vec<f64>,
    /// Mean attention weight of each link over the training rows.
    pub link_weights: Vec<f64>,
    /// Links kept in hard mode, best first.
    pub selected: Vec<usize>,
    pub head: Option<LogisticModel>,
    pub seed: u64,
}

struct Layout {
    h: usize,
}

impl Layout {
    fn w(&self) -> std::ops::Range<usize> {
        0..self.h * FEATURE_COUNT
    }
    fn b(&self) -> std::ops::Range<usize> {
        let s = self.h * FEATURE_COUNT;
        s..s + self.h
    }
    fn v(&self) -> std::ops::Range<usize> {
        let s = self.h * FEATURE_COUNT + self.h;
        s..s + self.h
    }
    fn u(&self) -> std::ops::Range<usize> {
        let s = self.h * FEATURE_COUNT + 2 * self.h;
        s..s + FEATURE_COUNT
    }
    fn c(&self) -> usize {
        self.h * FEATURE_COUNT + 2 * self.h + FEATURE_COUNT
    }
    fn len(&self) -> usize {
        self.c() + 1
    }
}

/// Per-row intermediate values.
struct RowPass {
    hidden: Vec<f64>,
    alpha: Vec<f64>,
    fused: [f64; FEATURE_COUNT],
    logit: f64,
}

fn row_forward(params: &[f64], lay: &Layout, row: &[f64], links: usize) -> RowPass {
    let (w, b, v) = (&params[lay.w()], &params[lay.b()], &params[lay.v()]);
    let mut hidden = vec![0.0; links * lay.h];
    let mut scores = vec![0.0; links];
    for l in 0..links {
        let x = &row[l * FEATURE_COUNT..(l + 1) * FEATURE_COUNT];
        let mut s = 0.0;
        for j in 0..lay.h {
            let u: f64 = w[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b[j];
            hidden[l * lay.h + j] = u;
            s += v[j] * u.max(0.0);
        }
        scores[l] = s;
    }
    let alpha = softmax(&scores);
    let mut fused = [0.0; FEATURE_COUNT];
    for l in 0..links {
        for (f, x) in fused.iter_mut().zip(&row[l * FEATURE_COUNT..(l + 1) * FEATURE_COUNT]) {
            *f += alpha[l] * x;
        }
    }
    let logit = params[lay.u()].iter().zip(&fused).map(|(a, b)| a * b).sum::<f64>() + params[lay.c()];
    RowPass { hidden, alpha, fused, logit }
}

/// Numerically stable softmax; always a probability vector.
pub fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

impl AttentionModel {
    fn layout(&self) -> Layout {
        Layout { h: self.width }
    }

    /// Attention weights of one concatenated row.
    pub fn weights(&self, row: &[f64]) -> Vec<f64> {
        row_forward(&self.params, &self.layout(), row, self.links).alpha
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, LearnError> {
        if x.cols != self.links * FEATURE_COUNT {
            return Err(LearnError::Shape(format!("expected {} columns, got {}", self.links * FEATURE_COUNT, x.cols)));
        }
        Ok(match (&self.mode, &self.head) {
            (AttentionMode::Hard(_), Some(head)) => {
                let cols = gather_links(x, &self.selected);
                head.predict(&cols)
            }
            _ => (0..x.rows).map(|i| sigmoid(row_forward(&self.params, &self.layout(), x.row(i), self.links).logit)).collect(),
        })
    }

    /// Largest over smallest mean link weight.
    pub fn weight_ratio(&self) -> f64 {
        let max = self.link_weights.iter().copied().fold(f64::MIN, f64::max);
        let min = self.link_weights.iter().copied().fold(f64::MAX, f64::min);
        max / min
    }
}

fn gather_links(x: &Matrix, links: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(x.rows, links.len() * FEATURE_COUNT);
    for i in 0..x.rows {
        for (j, &l) in links.iter().enumerate() {
            out.row_mut(i)[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT].copy_from_slice(&x.row(i)[l * FEATURE_COUNT..(l + 1) * FEATURE_COUNT]);
        }
    }
    out
}

/// Weighted loss gradient for one batch (soft mode), accumulated in `grad`.
fn batch_grad(params: &[f64], lay: &Layout, x: &Matrix, rows: &[usize], y: &[u8], w: &[f64], links: usize, grad: &mut [f64]) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let wsum: f64 = rows.iter().map(|&i| w[i]).sum();
    for &i in rows {
        let row = x.row(i);
        let pass = row_forward(params, lay, row, links);
        let dz = w[i] * (sigmoid(pass.logit) - y[i] as f64) / wsum;
        let u = &params[lay.u()];
        for (g, f) in grad[lay.u()].iter_mut().zip(&pass.fused) {
            *g += dz * f;
        }
        grad[lay.c()] += dz;
        // d loss / d alpha_l = dz * u . x_l
        let dalpha: Vec<f64> = (0..links)
            .map(|l| dz * u.iter().zip(&row[l * FEATURE_COUNT..(l + 1) * FEATURE_COUNT]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mean_d: f64 = pass.alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let v = &params[lay.v()];
        let w_start = lay.w().start;
        let b_start = lay.b().start;
        let v_start = lay.v().start;
        for l in 0..links {
            let ds = pass.alpha[l] * (dalpha[l] - mean_d);
            if ds == 0.0 {
                continue;
            }
            let xl = &row[l * FEATURE_COUNT..(l + 1) * FEATURE_COUNT];
            for j in 0..lay.h {
                let u = pass.hidden[l * lay.h + j];
                grad[v_start + j] += ds * u.max(0.0);
                if u > 0.0 {
                    let du = ds * v[j];
                    grad[b_start + j] += du;
                    for (g, xv) in grad[w_start + j * FEATURE_COUNT..w_start + (j + 1) * FEATURE_COUNT].iter_mut().zip(xl) {
                        *g += du * xv;
                    }
                }
            }
        }
    }
}

/// Trains attention fusion on concatenated per-link features (`links * 11`
/// columns, already normalized).
pub fn attention_fusion(x: &Matrix, y: &[u8], mode: AttentionMode, config: &AttentionConfig, seed: u64) -> Result<AttentionModel, LearnError> {
    check_training(x, y)?;
    if x.cols == 0 || x.cols % FEATURE_COUNT != 0 {
        return Err(LearnError::Shape(format!("{} columns is not a whole number of links", x.cols)));
    }
    let links = x.cols / FEATURE_COUNT;
    if let AttentionMode::Hard(k) = mode {
        if k == 0 || k > links {
            return Err(LearnError::BadK { k, max: links });
        }
    }
    let lay = Layout { h: config.scorer_width.max(1) };
    let mut rng = rng::keyed(seed, &[0xA77E]);
    let mut params = vec![0.0; lay.len()];
    let bound = (6.0 / FEATURE_COUNT as f64).sqrt();
    for p in &mut params[lay.w()] {
        *p = rng.random_range(-bound..bound);
    }
    let vb = (3.0 / lay.h as f64).sqrt();
    for p in &mut params[lay.v()] {
        *p = rng.random_range(-vb..vb);
    }
    let w = class_weights(y)?;
    let mut grad = vec![0.0; lay.len()];
    let (mut m, mut v) = (vec![0.0; lay.len()], vec![0.0; lay.len()]);
    let mut t = 0;
    if links > 1 {
        for epoch in 0..config.epochs {
            let mut order: Vec<usize> = (0..x.rows).collect();
            order.shuffle(&mut rng::keyed(seed, &[0xA77F, epoch as u64]));
            for batch in order.chunks(config.batch_size.max(1)) {
                batch_grad(&params, &lay, x, batch, y, &w, links, &mut grad);
                t += 1;
                let (c1, c2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
                for k in 0..params.len() {
                    m[k] = 0.9 * m[k] + 0.1 * grad[k];
                    v[k] = 0.999 * v[k] + 0.001 * grad[k] * grad[k];
                    params[k] -= config.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + 1e-8);
                }
            }
        }
    } else {
        // one link: the weight is 1 and only the head matters
        let head = train_logistic(x, y, &config.logistic, seed)?;
        params[lay.u()].copy_from_slice(&head.weights);
        params[lay.c()] = head.bias;
    }
    let mut link_weights = vec![0.0; links];
    for i in 0..x.rows {
        for (acc, a) in link_weights.iter_mut().zip(row_forward(&params, &lay, x.row(i), links).alpha) {
            *acc += a;
        }
    }
    link_weights.iter_mut().for_each(|w| *w /= x.rows as f64);
    let mut model = AttentionModel { mode, links, width: lay.h, params, link_weights, selected: Vec::new(), head: None, seed };
    if let AttentionMode::Hard(k) = mode {
        let mut order: Vec<usize> = (0..links).collect();
        // stable sort keeps the link order on equal weights
        order.sort_by(|&a, &b| model.link_weights[b].total_cmp(&model.link_weights[a]));
        order.truncate(k);
        model.head = Some(train_logistic(&gather_links(x, &order), y, &config.logistic, seed)?);
        model.selected = order;
    }
    Ok(model)
}
