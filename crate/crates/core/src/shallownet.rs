//! One-hidden-layer softmax classifier trained with cross-entropy and Adam.
//!
//! The same type plays both classifier roles: `D`, trained on the base
//! classes, and `D'`, obtained from `D` by replacing its output layer with a
//! fresh head sized for the novel classes.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::rng::seeded_rng;

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// `hidden × d_feat`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// `num_classes × hidden`
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Gradients with the same shapes as [`Classifier`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            ..Self::default()
        }
    }

    /// Checks invariants; `prefix` is the config path used in error messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}.{name}");
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(field("learning_rate"), "must be > 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::config(field("batch_size"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config(field("beta1"), "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(field("beta2"), "must lie in [0, 1)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config(field("epsilon"), "must be > 0"));
        }
        Ok(())
    }
}

/// Adam moment accumulators over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }
}

/// One Adam update over parameter blocks laid out back to back.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let n: usize = params.iter().map(|p| p.len()).sum();
    let n_grad: usize = grads.iter().map(|g| g.len()).sum();
    if params.len() != grads.len() || n != n_grad {
        return Err(Error::DimensionMismatch {
            what: "adam gradients",
            expected: n,
            got: n_grad,
        });
    }
    if state.m.len() != n || state.v.len() != n {
        return Err(Error::DimensionMismatch {
            what: "adam state",
            expected: n,
            got: state.m.len(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let mut offset = 0;
    for (block, grad) in params.iter_mut().zip(grads) {
        if block.len() != grad.len() {
            return Err(Error::DimensionMismatch {
                what: "adam parameter block",
                expected: block.len(),
                got: grad.len(),
            });
        }
        for (i, (p, &g)) in block.iter_mut().zip(grad.iter()).enumerate() {
            let m = &mut state.m[offset + i];
            let v = &mut state.v[offset + i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        offset += block.len();
    }
    Ok(())
}

fn normal_matrix(rng: &mut crate::rng::SeededRng, rows: usize, cols: usize) -> Matrix {
    let std = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Weights `N(0, 1/fan_in)`, zero biases.
pub fn init_classifier(
    d_feat: usize,
    hidden: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Classifier> {
    if d_feat == 0 || hidden == 0 || num_classes == 0 {
        return Err(Error::config(
            "classifier",
            "d_feat, hidden and num_classes must be at least 1",
        ));
    }
    let mut rng = seeded_rng(seed);
    let w1 = normal_matrix(&mut rng, hidden, d_feat);
    let w2 = normal_matrix(&mut rng, num_classes, hidden);
    Ok(Classifier {
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; num_classes],
    })
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[label] - lse
}

impl Classifier {
    pub fn d_feat(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn num_classes(&self) -> usize {
        self.w2.rows
    }

    pub fn n_params(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }

    /// Shape and finiteness checks, used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let (h, c) = (self.w1.rows, self.w2.rows);
        let checks = [
            (
                "w1 entries",
                self.w1.rows * self.w1.cols,
                self.w1.data.len(),
            ),
            ("b1", h, self.b1.len()),
            ("w2 columns", h, self.w2.cols),
            (
                "w2 entries",
                self.w2.rows * self.w2.cols,
                self.w2.data.len(),
            ),
            ("b2", c, self.b2.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::DimensionMismatch {
                    what,
                    expected,
                    got,
                });
            }
        }
        if h == 0 || c == 0 || self.w1.cols == 0 {
            return Err(Error::Invariant("classifier has an empty layer".into()));
        }
        let finite = self
            .w1
            .data
            .iter()
            .chain(&self.b1)
            .chain(&self.w2.data)
            .chain(&self.b2)
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Invariant("classifier has non-finite weights".into()));
        }
        Ok(())
    }

    /// Returns `(logits, hidden)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let hidden = self.hidden_embedding(x)?;
        let logits = self
            .b2
            .iter()
            .enumerate()
            .map(|(c, b)| b + dot(self.w2.row(c), &hidden))
            .collect();
        Ok((logits, hidden))
    }

    /// Rectified activations of the hidden layer.
    pub fn hidden_embedding(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_feat() {
            return Err(Error::DimensionMismatch {
                what: "classifier input",
                expected: self.d_feat(),
                got: x.len(),
            });
        }
        Ok(self
            .b1
            .iter()
            .enumerate()
            .map(|(j, b)| (b + dot(self.w1.row(j), x)).max(0.0))
            .collect())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(logits, _)| logits)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Softmax probability assigned to `label`.
    pub fn confidence(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(self.predict_proba(x)?[label])
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    /// Mean cross-entropy over `batch` and its exact gradients.
    pub fn loss_and_grads(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        let (h, c, d) = (self.hidden_dim(), self.num_classes(), self.d_feat());
        let mut g = Gradients {
            w1: Matrix::zeros(h, d),
            b1: vec![0.0; h],
            w2: Matrix::zeros(c, h),
            b2: vec![0.0; c],
        };
        let mut loss = 0.0;
        let mut d_hidden = vec![0.0; h];
        for &(x, label) in batch {
            self.check_label(label)?;
            let (logits, hidden) = self.forward(x)?;
            loss -= log_softmax_at(&logits, label);
            let mut d_logits = softmax(&logits);
            d_logits[label] -= 1.0;

            d_hidden.iter_mut().for_each(|v| *v = 0.0);
            for (k, &dl) in d_logits.iter().enumerate() {
                g.b2[k] += dl;
                let w_row = self.w2.row(k);
                let g_row = &mut g.w2.data[k * h..(k + 1) * h];
                for j in 0..h {
                    g_row[j] += dl * hidden[j];
                    d_hidden[j] += dl * w_row[j];
                }
            }
            for j in 0..h {
                // ReLU gate; the subgradient at exactly zero is taken as 0.
                if hidden[j] <= 0.0 {
                    continue;
                }
                let dz = d_hidden[j];
                g.b1[j] += dz;
                let g_row = &mut g.w1.data[j * d..(j + 1) * d];
                for (gw, xi) in g_row.iter_mut().zip(x) {
                    *gw += dz * xi;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        for v in
            g.w1.data
                .iter_mut()
                .chain(g.b1.iter_mut())
                .chain(g.w2.data.iter_mut())
                .chain(g.b2.iter_mut())
        {
            *v *= scale;
        }
        Ok((loss * scale, g))
    }

    pub fn param_blocks_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    /// Hex SHA-256 over the little-endian bytes of every parameter.
    pub fn weight_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self
            .w1
            .data
            .iter()
            .chain(&self.b1)
            .chain(&self.w2.data)
            .chain(&self.b2)
        {
            hasher.update(v.to_le_bytes());
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Fraction of `dataset` whose argmax prediction equals its label.
    pub fn accuracy(&self, dataset: &[(&[f64], usize)]) -> Result<f64> {
        if dataset.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for &(x, label) in dataset {
            let logits = self.logits(x)?;
            if crate::evalharness::argmax(&logits) == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

impl Gradients {
    pub fn blocks(&self) -> [&[f64]; 4] {
        [&self.w1.data, &self.b1, &self.w2.data, &self.b2]
    }
}

/// Mini-batch Adam on `dataset` for `cfg.epochs` epochs.
///
/// Batches come from a fresh shuffle each epoch; the last batch may be short.
/// A fresh optimizer state is used for every call.
pub fn train(
    clf: &Classifier,
    dataset: &[(&[f64], usize)],
    cfg: &TrainConfig,
) -> Result<Classifier> {
    cfg.validate("train")?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let mut model = clf.clone();
    let mut state = AdamState::new(model.n_params());
    let mut rng = seeded_rng(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| dataset[i]));
            let (_, grads) = model.loss_and_grads(&batch)?;
            adam_step(
                &mut model.param_blocks_mut(),
                &grads.blocks(),
                &mut state,
                cfg,
            )?;
        }
    }
    Ok(model)
}

/// Builds `D'`: hidden layer copied, output layer re-initialized at `num_novel` classes.
pub fn adapt_head(d: &Classifier, num_novel: usize, seed: u64) -> Result<Classifier> {
    if num_novel < 2 {
        return Err(Error::config("num_novel", "must be at least 2"));
    }
    let mut rng = seeded_rng(seed);
    Ok(Classifier {
        w1: d.w1.clone(),
        b1: d.b1.clone(),
        w2: normal_matrix(&mut rng, num_novel, d.hidden_dim()),
        b2: vec![0.0; num_novel],
    })
}
