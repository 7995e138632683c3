//! Probabilistic classifiers `p_a(x; theta)`: logistic regression and a small
//! wide-and-deep network.
//!
//! Both expose batch forward passes returning logits, exact backward passes
//! for `sum_i upstream_i * logit_i`, and a flat parameter view used by the
//! optimizer. The wide-and-deep network is
//!
//! ```text
//! wide: x -> Linear(d, 64)
//! deep: x -> Linear(d, 32) -> BN -> ReLU -> Dropout
//!         -> Linear(32, 16) -> BN -> ReLU -> Dropout
//! head: [wide | deep] (80) -> Linear(80, 1) -> sigmoid
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, Matrix};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-12;

pub const WIDE_UNITS: usize = 64;
pub const DEEP_UNITS: [usize; 2] = [32, 16];
pub const DEFAULT_DROPOUT: f64 = 0.3;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

const CHECKPOINT_FORMAT: &str = "evopu-classifier";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("feature dimension {found} does not match classifier input dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("input dimension must be positive")]
    ZeroDimension,
    #[error("upstream gradient has {found} entries for a batch of {expected}")]
    UpstreamLength { expected: usize, found: usize },
    #[error("flat parameter vector has {found} entries, expected {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Lr,
    Wd,
}

/// Train mode uses batch statistics and a dropout mask drawn from the seed;
/// eval mode uses running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn kaiming(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Linear {
            weight: Matrix::from_vec(fan_out, fan_in, data),
            bias: vec![0.0; fan_out],
        }
    }

    /// Returns (weight grad, bias grad, input grad).
    fn backward(&self, dout: &Matrix, input: &Matrix, need_dinput: bool) -> (Matrix, Vec<f64>, Option<Matrix>) {
        let (n, out, inp) = (dout.rows(), self.weight.rows(), self.weight.cols());
        let mut dw = Matrix::zeros(out, inp);
        let mut db = vec![0.0; out];
        for i in 0..n {
            let g = dout.row(i);
            let x = input.row(i);
            for k in 0..out {
                if g[k] != 0.0 {
                    db[k] += g[k];
                    for (w, xv) in dw.row_mut(k).iter_mut().zip(x) {
                        *w += g[k] * xv;
                    }
                }
            }
        }
        let dinput = need_dinput.then(|| {
            let mut dx = Matrix::zeros(n, inp);
            for i in 0..n {
                let g = dout.row(i);
                let row = dx.row_mut(i);
                for k in 0..out {
                    if g[k] != 0.0 {
                        for (d, w) in row.iter_mut().zip(self.weight.row(k)) {
                            *d += g[k] * w;
                        }
                    }
                }
            }
            dx
        });
        (dw, db, dinput)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(units: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdParams {
    pub wide: Linear,
    pub deep1: Linear,
    pub bn1: BatchNorm,
    pub deep2: Linear,
    pub bn2: BatchNorm,
    pub head: Linear,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Classifier {
    Lr(LrParams),
    Wd(WdParams),
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    train: bool,
}

#[derive(Debug, Clone)]
struct WdCache {
    bn1: BnCache,
    a1: Matrix,
    mask1: Option<Matrix>,
    d1: Matrix,
    bn2: BnCache,
    a2: Matrix,
    mask2: Option<Matrix>,
    joint: Matrix,
}

#[derive(Debug, Clone)]
enum Cache {
    Lr,
    Wd(Box<WdCache>),
}

/// Result of a batch forward pass; needed by [`Classifier::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    input: Matrix,
    logits: Vec<f64>,
    cache: Cache,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Clamped probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| clamp_prob(sigmoid(z))).collect()
    }

    /// Smallest |pre-activation| over every ReLU input; infinite for models
    /// without ReLUs. Finite-difference checks use this to avoid kinks.
    pub fn min_relu_margin(&self) -> f64 {
        match &self.cache {
            Cache::Lr => f64::INFINITY,
            Cache::Wd(c) => c
                .a1
                .as_slice()
                .iter()
                .chain(c.a2.as_slice())
                .fold(f64::INFINITY, |m, v| m.min(v.abs())),
        }
    }
}

fn batch_norm_forward(h: &Matrix, bn: &BatchNorm, train: bool) -> (Matrix, BnCache) {
    let (n, k) = (h.rows(), h.cols());
    let (mean, var) = if train {
        let mut mean = vec![0.0; k];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(h.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; k];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(h.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, k);
    let mut out = Matrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            let xh = (h.get(i, j) - mean[j]) * inv_std[j];
            xhat.set(i, j, xh);
            out.set(i, j, bn.gamma[j] * xh + bn.beta[j]);
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train,
        },
    )
}

/// Returns (d input, d gamma, d beta).
fn batch_norm_backward(dout: &Matrix, bn: &BatchNorm, cache: &BnCache) -> (Matrix, Vec<f64>, Vec<f64>) {
    let (n, k) = (dout.rows(), dout.cols());
    let mut dgamma = vec![0.0; k];
    let mut dbeta = vec![0.0; k];
    for i in 0..n {
        for j in 0..k {
            dgamma[j] += dout.get(i, j) * cache.xhat.get(i, j);
            dbeta[j] += dout.get(i, j);
        }
    }
    let mut dh = Matrix::zeros(n, k);
    if cache.train {
        let nf = n as f64;
        // sum_i dxhat_ij = gamma_j * dbeta_j and sum_i dxhat_ij xhat_ij = gamma_j * dgamma_j
        for i in 0..n {
            for j in 0..k {
                let dxhat = dout.get(i, j) * bn.gamma[j];
                let v = cache.inv_std[j] / nf
                    * (nf * dxhat - bn.gamma[j] * dbeta[j] - cache.xhat.get(i, j) * bn.gamma[j] * dgamma[j]);
                dh.set(i, j, v);
            }
        }
    } else {
        for i in 0..n {
            for j in 0..k {
                dh.set(i, j, dout.get(i, j) * bn.gamma[j] * cache.inv_std[j]);
            }
        }
    }
    (dh, dgamma, dbeta)
}

fn relu_dropout(a: &Matrix, dropout: f64, rng: Option<&mut ChaCha8Rng>) -> (Matrix, Option<Matrix>) {
    let mut out = a.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    match rng {
        Some(rng) if dropout > 0.0 => {
            let scale = 1.0 / (1.0 - dropout);
            let mut mask = Matrix::zeros(a.rows(), a.cols());
            for (m, o) in mask.as_mut_slice().iter_mut().zip(out.as_mut_slice()) {
                *m = if rng.random::<f64>() >= dropout { scale } else { 0.0 };
                *o *= *m;
            }
            (out, Some(mask))
        }
        _ => (out, None),
    }
}

fn relu_dropout_backward(dout: &Matrix, a: &Matrix, mask: Option<&Matrix>) -> Matrix {
    let mut d = dout.clone();
    for (idx, v) in d.as_mut_slice().iter_mut().enumerate() {
        let m = mask.map_or(1.0, |m| m.as_slice()[idx]);
        if a.as_slice()[idx] <= 0.0 {
            *v = 0.0;
        } else {
            *v *= m;
        }
    }
    d
}

impl Classifier {
    /// LR: weights ~ N(0, 0.01^2), bias 0. WD: Kaiming-normal weights, zero
    /// biases, unit batch-norm scale.
    pub fn init(kind: ClassifierKind, dim: usize, seed: u64) -> Result<Self, ClassifierError> {
        if dim == 0 {
            return Err(ClassifierError::ZeroDimension);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match kind {
            ClassifierKind::Lr => {
                let normal = Normal::new(0.0, 0.01).expect("positive std");
                Classifier::Lr(LrParams {
                    weights: (0..dim).map(|_| normal.sample(&mut rng)).collect(),
                    bias: 0.0,
                })
            }
            ClassifierKind::Wd => {
                let wide = Linear::kaiming(dim, WIDE_UNITS, &mut rng);
                let deep1 = Linear::kaiming(dim, DEEP_UNITS[0], &mut rng);
                let deep2 = Linear::kaiming(DEEP_UNITS[0], DEEP_UNITS[1], &mut rng);
                let head = Linear::kaiming(WIDE_UNITS + DEEP_UNITS[1], 1, &mut rng);
                Classifier::Wd(WdParams {
                    wide,
                    deep1,
                    bn1: BatchNorm::new(DEEP_UNITS[0]),
                    deep2,
                    bn2: BatchNorm::new(DEEP_UNITS[1]),
                    head,
                    dropout: DEFAULT_DROPOUT,
                })
            }
        })
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Lr(_) => ClassifierKind::Lr,
            Classifier::Wd(_) => ClassifierKind::Wd,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Classifier::Lr(p) => p.weights.len(),
            Classifier::Wd(p) => p.wide.weight.cols(),
        }
    }

    fn check_dim(&self, found: usize) -> Result<(), ClassifierError> {
        let expected = self.input_dim();
        if expected != found {
            return Err(ClassifierError::DimensionMismatch { expected, found });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix, mode: Mode) -> Result<Forward, ClassifierError> {
        self.check_dim(x.cols())?;
        match self {
            Classifier::Lr(p) => {
                let logits = (0..x.rows()).map(|i| dot(x.row(i), &p.weights) + p.bias).collect();
                Ok(Forward {
                    input: x.clone(),
                    logits,
                    cache: Cache::Lr,
                })
            }
            Classifier::Wd(p) => {
                let (train, mut rng) = match mode {
                    Mode::Train { dropout_seed } => (true, Some(ChaCha8Rng::seed_from_u64(dropout_seed))),
                    Mode::Eval => (false, None),
                };
                let wide = x.affine(&p.wide.weight, &p.wide.bias);
                let h1 = x.affine(&p.deep1.weight, &p.deep1.bias);
                let (a1, bn1) = batch_norm_forward(&h1, &p.bn1, train);
                let (d1, mask1) = relu_dropout(&a1, p.dropout, rng.as_mut());
                let h2 = d1.affine(&p.deep2.weight, &p.deep2.bias);
                let (a2, bn2) = batch_norm_forward(&h2, &p.bn2, train);
                let (d2, mask2) = relu_dropout(&a2, p.dropout, rng.as_mut());
                let n = x.rows();
                let mut joint = Matrix::zeros(n, WIDE_UNITS + DEEP_UNITS[1]);
                for i in 0..n {
                    let row = joint.row_mut(i);
                    row[..WIDE_UNITS].copy_from_slice(wide.row(i));
                    row[WIDE_UNITS..].copy_from_slice(d2.row(i));
                }
                let logits = (0..n).map(|i| dot(joint.row(i), p.head.weight.row(0)) + p.head.bias[0]).collect();
                Ok(Forward {
                    input: x.clone(),
                    logits,
                    cache: Cache::Wd(Box::new(WdCache {
                        bn1,
                        a1,
                        mask1,
                        d1,
                        bn2,
                        a2,
                        mask2,
                        joint,
                    })),
                })
            }
        }
    }

    /// Gradient of `sum_i upstream_i * logit_i` with respect to the flat
    /// parameter vector.
    pub fn backward(&self, fwd: &Forward, upstream: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        let n = fwd.logits.len();
        if upstream.len() != n {
            return Err(ClassifierError::UpstreamLength { expected: n, found: upstream.len() });
        }
        let x = &fwd.input;
        match (self, &fwd.cache) {
            (Classifier::Lr(p), _) => {
                let mut g = vec![0.0; p.weights.len() + 1];
                for (i, &u) in upstream.iter().enumerate() {
                    if u != 0.0 {
                        for (gj, xj) in g.iter_mut().zip(x.row(i)) {
                            *gj += u * xj;
                        }
                        g[p.weights.len()] += u;
                    }
                }
                Ok(g)
            }
            (Classifier::Wd(p), Cache::Wd(c)) => {
                let dlogit = Matrix::from_vec(n, 1, upstream.to_vec());
                let (dhead_w, dhead_b, djoint) = p.head.backward(&dlogit, &c.joint, true);
                let djoint = djoint.expect("requested");
                let mut dwide = Matrix::zeros(n, WIDE_UNITS);
                let mut dd2 = Matrix::zeros(n, DEEP_UNITS[1]);
                for i in 0..n {
                    dwide.row_mut(i).copy_from_slice(&djoint.row(i)[..WIDE_UNITS]);
                    dd2.row_mut(i).copy_from_slice(&djoint.row(i)[WIDE_UNITS..]);
                }
                let (dwide_w, dwide_b, _) = p.wide.backward(&dwide, x, false);
                let da2 = relu_dropout_backward(&dd2, &c.a2, c.mask2.as_ref());
                let (dh2, dg2, db2) = batch_norm_backward(&da2, &p.bn2, &c.bn2);
                let (ddeep2_w, ddeep2_b, dd1) = p.deep2.backward(&dh2, &c.d1, true);
                let da1 = relu_dropout_backward(&dd1.expect("requested"), &c.a1, c.mask1.as_ref());
                let (dh1, dg1, db1) = batch_norm_backward(&da1, &p.bn1, &c.bn1);
                let (ddeep1_w, ddeep1_b, _) = p.deep1.backward(&dh1, x, false);
                let mut g = Vec::with_capacity(self.num_params());
                for part in [
                    dwide_w.as_slice(),
                    &dwide_b,
                    ddeep1_w.as_slice(),
                    &ddeep1_b,
                    &dg1,
                    &db1,
                    ddeep2_w.as_slice(),
                    &ddeep2_b,
                    &dg2,
                    &db2,
                    dhead_w.as_slice(),
                    &dhead_b,
                ] {
                    g.extend_from_slice(part);
                }
                Ok(g)
            }
            (Classifier::Wd(_), Cache::Lr) => unreachable!("forward pass produced by a different model"),
        }
    }

    /// Clamped probabilities for a batch.
    pub fn predict_proba_batch(&self, x: &Matrix, mode: Mode) -> Result<Vec<f64>, ClassifierError> {
        Ok(self.forward(x, mode)?.probabilities())
    }

    /// Clamped probability for one feature vector. Batch normalization in
    /// train mode is degenerate for a single row; use eval mode for scoring.
    pub fn predict_proba(&self, features: &[f64], mode: Mode) -> Result<f64, ClassifierError> {
        let x = Matrix::from_vec(1, features.len(), features.to_vec());
        Ok(self.predict_proba_batch(&x, mode)?[0])
    }

    /// Gradient of `sum_i upstream_i * logit_i`.
    pub fn param_gradient(&self, x: &Matrix, mode: Mode, upstream: &[f64]) -> Result<Vec<f64>, ClassifierError> {
        let fwd = self.forward(x, mode)?;
        self.backward(&fwd, upstream)
    }

    fn param_parts(&self) -> Vec<(&[f64], bool)> {
        match self {
            Classifier::Lr(p) => vec![(p.weights.as_slice(), true), (std::slice::from_ref(&p.bias), false)],
            Classifier::Wd(p) => vec![
                (p.wide.weight.as_slice(), true),
                (&p.wide.bias, false),
                (p.deep1.weight.as_slice(), true),
                (&p.deep1.bias, false),
                (&p.bn1.gamma, false),
                (&p.bn1.beta, false),
                (p.deep2.weight.as_slice(), true),
                (&p.deep2.bias, false),
                (&p.bn2.gamma, false),
                (&p.bn2.beta, false),
                (p.head.weight.as_slice(), true),
                (&p.head.bias, false),
            ],
        }
    }

    fn param_parts_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Classifier::Lr(p) => vec![p.weights.as_mut_slice(), std::slice::from_mut(&mut p.bias)],
            Classifier::Wd(p) => vec![
                p.wide.weight.as_mut_slice(),
                &mut p.wide.bias,
                p.deep1.weight.as_mut_slice(),
                &mut p.deep1.bias,
                &mut p.bn1.gamma,
                &mut p.bn1.beta,
                p.deep2.weight.as_mut_slice(),
                &mut p.deep2.bias,
                &mut p.bn2.gamma,
                &mut p.bn2.beta,
                p.head.weight.as_mut_slice(),
                &mut p.head.bias,
            ],
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_parts().iter().map(|(s, _)| s.len()).sum()
    }

    /// Trainable parameters in backward-pass order. Batch-norm running
    /// statistics are not included.
    pub fn flat_params(&self) -> Vec<f64> {
        self.param_parts().iter().flat_map(|(s, _)| s.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), ClassifierError> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(ClassifierError::ParamLength { expected, found: flat.len() });
        }
        let mut offset = 0;
        for part in self.param_parts_mut() {
            let n = part.len();
            part.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// True for weight-matrix entries (L2-penalized), false for biases and
    /// batch-norm affine parameters.
    pub fn penalty_mask(&self) -> Vec<bool> {
        self.param_parts()
            .iter()
            .flat_map(|(s, pen)| std::iter::repeat_n(*pen, s.len()))
            .collect()
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics (momentum 0.1, unbiased variance). No-op for LR or eval
    /// passes.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        let (Classifier::Wd(p), Cache::Wd(c)) = (self, &fwd.cache) else {
            return;
        };
        let n = fwd.logits.len();
        for (bn, cache) in [(&mut p.bn1, &c.bn1), (&mut p.bn2, &c.bn2)] {
            if !cache.train {
                continue;
            }
            let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
            for j in 0..bn.gamma.len() {
                bn.running_mean[j] = (1.0 - BN_MOMENTUM) * bn.running_mean[j] + BN_MOMENTUM * cache.batch_mean[j];
                bn.running_var[j] =
                    (1.0 - BN_MOMENTUM) * bn.running_var[j] + BN_MOMENTUM * cache.batch_var[j] * unbias;
            }
        }
    }

    /// JSON checkpoint with format tag, version and input dimension.
    pub fn to_checkpoint(&self) -> String {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_dim: self.input_dim(),
            num_params: self.num_params(),
            model: self.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("classifier serializes")
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, ClassifierError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(ClassifierError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.model.input_dim() != ck.input_dim || ck.model.num_params() != ck.num_params {
            return Err(ClassifierError::Checkpoint("shape metadata does not match parameters".into()));
        }
        if let Classifier::Wd(p) = &ck.model {
            let shapes_ok = p.deep1.weight.cols() == ck.input_dim
                && p.wide.weight.rows() == WIDE_UNITS
                && p.deep1.weight.rows() == DEEP_UNITS[0]
                && p.deep2.weight.cols() == DEEP_UNITS[0]
                && p.deep2.weight.rows() == DEEP_UNITS[1]
                && p.head.weight.cols() == WIDE_UNITS + DEEP_UNITS[1]
                && p.head.weight.rows() == 1
                && (0.0..1.0).contains(&p.dropout);
            if !shapes_ok {
                return Err(ClassifierError::Checkpoint("inconsistent layer shapes".into()));
            }
        }
        Ok(ck.model)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    input_dim: usize,
    num_params: usize,
    model: Classifier,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    /// Central differences of `sum_i upstream_i * logit_i`.
    fn fd_gradient(model: &Classifier, x: &Matrix, mode: Mode, upstream: &[f64], coords: &[usize]) -> Vec<f64> {
        let h = 1e-5;
        let base = model.flat_params();
        coords
            .iter()
            .map(|&k| {
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    let mut p = base.clone();
                    p[k] += delta;
                    m.set_flat_params(&p).unwrap();
                    let f = m.forward(x, mode).unwrap();
                    f.logits().iter().zip(upstream).map(|(z, u)| z * u).sum::<f64>()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + 1e-7
    }

    #[test]
    fn lr_zero_params_gives_half() {
        let m = Classifier::Lr(LrParams {
            weights: vec![0.0; 3],
            bias: 0.0,
        });
        assert_eq!(m.predict_proba(&[1.0, -4.0, 9.0], Mode::Eval).unwrap(), 0.5);
    }

    #[test]
    fn lr_large_logit_saturates() {
        assert!(sigmoid(50.0) >= 1.0 - 1e-15);
        let m = Classifier::Lr(LrParams {
            weights: vec![1.0],
            bias: 0.0,
        });
        assert_eq!(m.predict_proba(&[50.0], Mode::Eval).unwrap(), 1.0 - PROB_CLAMP);
        assert_eq!(m.predict_proba(&[-50.0], Mode::Eval).unwrap(), PROB_CLAMP);
    }

    #[test]
    fn dimension_mismatch() {
        let m = Classifier::init(ClassifierKind::Wd, 4, 1).unwrap();
        assert_eq!(
            m.predict_proba(&[1.0, 2.0], Mode::Eval),
            Err(ClassifierError::DimensionMismatch { expected: 4, found: 2 })
        );
        assert_eq!(Classifier::init(ClassifierKind::Lr, 0, 1), Err(ClassifierError::ZeroDimension));
    }

    #[test]
    fn wd_eval_is_deterministic_and_train_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Classifier::init(ClassifierKind::Wd, 5, 7).unwrap();
        let x = random_matrix(8, 5, &mut rng);
        assert_eq!(m.predict_proba_batch(&x, Mode::Eval).unwrap(), m.predict_proba_batch(&x, Mode::Eval).unwrap());
        let t1 = m.forward(&x, Mode::Train { dropout_seed: 11 }).unwrap();
        let t2 = m.forward(&x, Mode::Train { dropout_seed: 11 }).unwrap();
        let t3 = m.forward(&x, Mode::Train { dropout_seed: 12 }).unwrap();
        assert_eq!(t1.logits(), t2.logits());
        assert_ne!(t1.logits(), t3.logits());
    }

    #[test]
    fn lr_gradient_is_upstream_times_features() {
        let m = Classifier::init(ClassifierKind::Lr, 3, 5).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]], 3);
        let g = m.param_gradient(&x, Mode::Eval, &[0.5]).unwrap();
        assert_eq!(g, vec![0.5, 1.0, 1.5, 0.5]);
        let z = m.param_gradient(&x, Mode::Eval, &[0.0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
        let w = Classifier::init(ClassifierKind::Wd, 3, 5).unwrap();
        let z = w.param_gradient(&x, Mode::Eval, &[0.0]).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut trials = 0;
        while trials < 100 {
            let kind = if trials % 2 == 0 { ClassifierKind::Lr } else { ClassifierKind::Wd };
            let dim = rng.random_range(1..6);
            let n = rng.random_range(2..7);
            let mut m = Classifier::init(kind, dim, rng.random()).unwrap();
            // move batch-norm parameters away from their initial values
            let mut p = m.flat_params();
            for v in p.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
            m.set_flat_params(&p).unwrap();
            let x = random_matrix(n, dim, &mut rng);
            let upstream: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mode = if rng.random_bool(0.5) {
                Mode::Train { dropout_seed: rng.random() }
            } else {
                Mode::Eval
            };
            let fwd = m.forward(&x, mode).unwrap();
            if fwd.min_relu_margin() < 1e-3 {
                continue;
            }
            let analytic = m.backward(&fwd, &upstream).unwrap();
            let coords: Vec<usize> = (0..m.num_params()).collect();
            let numeric = fd_gradient(&m, &x, mode, &upstream, &coords);
            for (k, (a, b)) in analytic.iter().zip(&numeric).enumerate() {
                assert!(close(*a, *b), "{kind:?} {mode:?} coord {k}: analytic {a} vs numeric {b}");
            }
            trials += 1;
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Classifier::init(ClassifierKind::Lr, 10, 1).unwrap();
        let b = Classifier::init(ClassifierKind::Lr, 10, 1).unwrap();
        let c = Classifier::init(ClassifierKind::Lr, 10, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let Classifier::Lr(p) = &a else { unreachable!() };
        assert_eq!(p.bias, 0.0);
        let w1 = Classifier::init(ClassifierKind::Wd, 10, 1).unwrap();
        let w2 = Classifier::init(ClassifierKind::Wd, 10, 1).unwrap();
        assert_eq!(w1, w2);
        assert_ne!(w1, Classifier::init(ClassifierKind::Wd, 10, 2).unwrap());
    }

    #[test]
    fn kaiming_scale() {
        let Classifier::Wd(p) = Classifier::init(ClassifierKind::Wd, 200, 4).unwrap() else { unreachable!() };
        let w = p.deep1.weight.as_slice();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 200.0).abs() < 0.1 * 2.0 / 200.0);
    }

    #[test]
    fn flat_params_round_trip_and_mask() {
        let mut m = Classifier::init(ClassifierKind::Wd, 3, 9).unwrap();
        let p: Vec<f64> = (0..m.num_params()).map(|i| i as f64).collect();
        m.set_flat_params(&p).unwrap();
        assert_eq!(m.flat_params(), p);
        let mask = m.penalty_mask();
        let penalized = mask.iter().filter(|&&b| b).count();
        assert_eq!(penalized, 3 * 64 + 3 * 32 + 32 * 16 + 80);
        assert!(m.set_flat_params(&p[1..]).is_err());
    }

    #[test]
    fn running_stats_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Classifier::init(ClassifierKind::Wd, 3, 2).unwrap();
        let x = random_matrix(10, 3, &mut rng);
        let fwd = m.forward(&x, Mode::Train { dropout_seed: 0 }).unwrap();
        m.update_running_stats(&fwd);
        let Classifier::Wd(p) = &m else { unreachable!() };
        assert!(p.bn1.running_mean.iter().any(|&v| v != 0.0));
        assert!(p.bn1.running_var.iter().all(|v| v.is_finite() && *v > 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [ClassifierKind::Lr, ClassifierKind::Wd] {
            let mut m = Classifier::init(kind, 4, 3).unwrap();
            let x = random_matrix(6, 4, &mut rng);
            let fwd = m.forward(&x, Mode::Train { dropout_seed: 1 }).unwrap();
            m.update_running_stats(&fwd);
            let text = m.to_checkpoint();
            let back = Classifier::from_checkpoint(&text).unwrap();
            assert_eq!(back, m);
            let bits = |c: &Classifier| c.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&m));
            assert_eq!(
                back.predict_proba_batch(&x, Mode::Eval).unwrap(),
                m.predict_proba_batch(&x, Mode::Eval).unwrap()
            );
        }
        assert!(Classifier::from_checkpoint("{}").is_err());
    }
}
