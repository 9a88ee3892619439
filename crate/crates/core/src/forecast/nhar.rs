//! Two-layer ReLU network on the HAR features, trained on a trimmed squared
//! loss with Adam.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::har::{features_from_history, HAR_WINDOW};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NharConfig {
    pub hidden: usize,
    /// Share of the smallest squared errors kept in the loss.
    pub trim: f64,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Number of series drawn for training; all when `None`.
    pub train_sample: Option<usize>,
    /// Train one network per series instead of a pooled one.
    pub per_series: bool,
    pub seed: u64,
}

impl Default for NharConfig {
    fn default() -> Self {
        NharConfig {
            hidden: 10,
            trim: 0.75,
            epochs: 100,
            batch: 1024,
            learning_rate: 1e-3,
            train_sample: None,
            per_series: false,
            seed: 0,
        }
    }
}

impl NharConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("hidden, epochs and batch must be >= 1".into()));
        }
        if !(self.trim > 0.0 && self.trim <= 1.0) || !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("trim must lie in (0, 1] and learning rate be positive".into()));
        }
        Ok(())
    }
}

/// `f(v) = w2' max(0, W1 v + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralHar {
    pub hidden: usize,
    /// Row-major `hidden x 3`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub trim: f64,
    /// Trimmed loss over the training rows before training and after each epoch.
    pub loss_path: Vec<f64>,
}

impl NeuralHar {
    pub fn parameter_count(hidden: usize) -> usize {
        5 * hidden + 1
    }

    pub fn init(hidden: usize, trim: f64, rng: &mut impl Rng) -> NeuralHar {
        let a1 = (6.0f64 / 3.0).sqrt();
        let a2 = (6.0 / hidden as f64).sqrt();
        NeuralHar {
            hidden,
            w1: (0..3 * hidden).map(|_| rng.gen_range(-a1..a1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..hidden).map(|_| rng.gen_range(-a2..a2)).collect(),
            b2: 0.0,
            trim,
            loss_path: Vec::new(),
        }
    }

    pub fn predict(&self, v: &[f64; 3]) -> f64 {
        let mut out = self.b2;
        for j in 0..self.hidden {
            let w = &self.w1[3 * j..3 * j + 3];
            let a = w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + self.b1[j];
            if a > 0.0 {
                out += self.w2[j] * a;
            }
        }
        out
    }

    /// Forecast of the value following `history` in the series' own units.
    pub fn predict_history(&self, history: &[f64], scale: f64) -> f64 {
        let v = features_from_history(history);
        scale * self.predict(&[v[0] / scale, v[1] / scale, v[2] / scale])
    }

    fn flatten(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(Self::parameter_count(self.hidden));
        p.extend(&self.w1);
        p.extend(&self.b1);
        p.extend(&self.w2);
        p.push(self.b2);
        p
    }

    fn assign(&mut self, p: &[f64]) {
        let l = self.hidden;
        self.w1.copy_from_slice(&p[..3 * l]);
        self.b1.copy_from_slice(&p[3 * l..4 * l]);
        self.w2.copy_from_slice(&p[4 * l..5 * l]);
        self.b2 = p[5 * l];
    }

    /// Flat parameters `(W1, b1, w2, b2)` followed by the loss path.
    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let mut p = self.flatten();
        p.extend(&self.loss_path);
        p
    }

    pub(crate) fn from_flat(hidden: usize, trim: f64, flat: &[f64]) -> Result<NeuralHar> {
        let k = Self::parameter_count(hidden);
        if flat.len() < k {
            return Err(Error::State(format!("network needs {k} parameters, got {}", flat.len())));
        }
        let mut net = NeuralHar {
            hidden,
            w1: vec![0.0; 3 * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            trim,
            loss_path: flat[k..].to_vec(),
        };
        net.assign(&flat[..k]);
        Ok(net)
    }

    /// Mean of the `floor(trim * n)` smallest squared errors.
    pub fn trimmed_loss(&self, x: &[[f64; 3]], y: &[f64]) -> f64 {
        let mut e: Vec<f64> = x.iter().zip(y).map(|(v, t)| (self.predict(v) - t).powi(2)).collect();
        trimmed_mean(&mut e, self.trim)
    }
}

fn keep_count(n: usize, trim: f64) -> usize {
    ((trim * n as f64).floor() as usize).clamp(1, n)
}

fn trimmed_mean(e: &mut [f64], trim: f64) -> f64 {
    let h = keep_count(e.len(), trim);
    if h < e.len() {
        e.select_nth_unstable_by(h - 1, f64::total_cmp);
    }
    e[..h].iter().sum::<f64>() / h as f64
}

/// Training rows `(features, target)` of one series divided by `scale`.
pub fn series_rows(r: &[f64], scale: f64, x: &mut Vec<[f64; 3]>, y: &mut Vec<f64>) {
    let s: Vec<f64> = r.iter().map(|v| v / scale).collect();
    for t in HAR_WINDOW..s.len() {
        x.push(features_from_history(&s[..t]));
        y.push(s[t]);
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(k: usize, lr: f64) -> Adam {
        Adam {
            m: vec![0.0; k],
            v: vec![0.0; k],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for k in 0..p.len() {
            self.m[k] = Self::B1 * self.m[k] + (1.0 - Self::B1) * g[k];
            self.v[k] = Self::B2 * self.v[k] + (1.0 - Self::B2) * g[k] * g[k];
            p[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Gradient of the trimmed mean squared error of one batch.
fn batch_gradient(net: &NeuralHar, x: &[[f64; 3]], y: &[f64], batch: &[usize], grad: &mut [f64], scratch: &mut Vec<(f64, usize)>) -> f64 {
    let l = net.hidden;
    scratch.clear();
    scratch.extend(batch.iter().map(|&i| (net.predict(&x[i]) - y[i], i)));
    let h = keep_count(batch.len(), net.trim);
    if h < scratch.len() {
        scratch.select_nth_unstable_by(h - 1, |a, b| (a.0 * a.0).total_cmp(&(b.0 * b.0)));
    }
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for &(e, i) in &scratch[..h] {
        loss += e * e;
        let d = 2.0 * e / h as f64;
        let v = &x[i];
        for j in 0..l {
            let w = &net.w1[3 * j..3 * j + 3];
            let a = w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + net.b1[j];
            if a > 0.0 {
                grad[4 * l + j] += d * a;
                let back = d * net.w2[j];
                grad[3 * j] += back * v[0];
                grad[3 * j + 1] += back * v[1];
                grad[3 * j + 2] += back * v[2];
                grad[3 * l + j] += back;
            }
        }
        grad[5 * l] += d;
    }
    loss / h as f64
}

/// Train on pooled rows with mini-batch Adam; trimming is recomputed per batch.
pub fn train_rows(x: &[[f64; 3]], y: &[f64], cfg: &NharConfig) -> Result<NeuralHar> {
    cfg.validate()?;
    let k = NeuralHar::parameter_count(cfg.hidden);
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 10 * k {
        return Err(Error::InsufficientData(format!(
            "{} training rows for {k} parameters, need {}",
            x.len(),
            10 * k
        )));
    }
    let mut rng = seed::rng(cfg.seed, &[seed::label("nhar")]);
    let mut net = NeuralHar::init(cfg.hidden, cfg.trim, &mut rng);
    let mut params = net.flatten();
    let mut adam = Adam::new(k, cfg.learning_rate);
    let mut grad = vec![0.0; k];
    let mut scratch = Vec::with_capacity(cfg.batch);
    let mut order: Vec<usize> = (0..x.len()).collect();
    net.loss_path.push(net.trimmed_loss(x, y));
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch) {
            let loss = batch_gradient(&net, x, y, batch, &mut grad, &mut scratch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!("network training diverged in epoch {epoch}")));
            }
            adam.step(&mut params, &grad);
            net.assign(&params);
        }
        let loss = net.trimmed_loss(x, y);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("network training diverged in epoch {epoch}")));
        }
        net.loss_path.push(loss);
    }
    log::debug!(
        "network trained on {} rows: trimmed loss {:.4} -> {:.4}",
        x.len(),
        net.loss_path[0],
        net.loss_path[net.loss_path.len() - 1]
    );
    Ok(net)
}
