//! Likelihoods and the training loop.
//!
//! Three objectives share one optimizer:
//!
//! * Evo-PU: observed sequences contribute `log p_a(x) + log prior(x)` and
//!   candidates contribute `log(1 - p_a(x') prior(x'))`, where
//!   `prior(x) = 1 - prod_{y in Y^(x)} (1 - p_o p_e(y; alpha))` with
//!   `p_e = 1` for observed nucleotide sequences and `1 - exp(-alpha S(y))`
//!   otherwise.
//! * Classical: positives `log p_a`, negatives `log(1 - p_a)`.
//! * Protein-PU: positives `log(q p_a)`, unlabeled `log(1 - q p_a)`.
//!
//! `p_o` and `alpha` are optimized through unconstrained raw values mapped
//! into open intervals by a scaled sigmoid.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{CandidateError, CandidateSet};
use crate::classifiers::{clamp_prob, sigmoid, Classifier, ClassifierError, Forward, Mode};
use crate::features::{Encoder, FeatureError};
use crate::matrix::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid bounds ({lo}, {hi})")]
    InvalidBounds { lo: f64, hi: f64 },
    #[error("Protein-PU labeling efficiency q must lie in (0, 1], got {0}")]
    InvalidQ(f64),
    #[error("sequence {0} has no restricted encodings")]
    MissingEncodings(String),
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("objective and training data do not match")]
    ObjectiveDataMismatch,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Candidate(#[from] CandidateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub fn new(lo: f64, hi: f64) -> Result<Self, TrainError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(TrainError::InvalidBounds { lo, hi });
        }
        Ok(Bounds { lo, hi })
    }

    pub fn map(&self, raw: f64) -> f64 {
        self.lo + (self.hi - self.lo) * sigmoid(raw)
    }

    /// Derivative of [`Bounds::map`] with respect to `raw`.
    pub fn map_derivative(&self, raw: f64) -> f64 {
        let s = sigmoid(raw);
        (self.hi - self.lo) * s * (1.0 - s)
    }
}

pub const DEFAULT_PO_BOUNDS: Bounds = Bounds { lo: 0.01, hi: 0.99 };
pub const DEFAULT_ALPHA_BOUNDS: Bounds = Bounds { lo: 0.00075, hi: 0.99 };

/// `lo + (hi - lo) * sigmoid(raw)`.
pub fn bound_map(raw: f64, lo: f64, hi: f64) -> Result<f64, TrainError> {
    Ok(Bounds::new(lo, hi)?.map(raw))
}

/// Observability efficiency and emergence scale, stored unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    pub po_raw: f64,
    pub alpha_raw: f64,
    pub po_bounds: Bounds,
    pub alpha_bounds: Bounds,
}

impl Nuisance {
    /// Raw values start at 0, the midpoint of each interval.
    pub fn new(po_bounds: Bounds, alpha_bounds: Bounds) -> Self {
        Nuisance {
            po_raw: 0.0,
            alpha_raw: 0.0,
            po_bounds,
            alpha_bounds,
        }
    }

    pub fn po(&self) -> f64 {
        self.po_bounds.map(self.po_raw)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_bounds.map(self.alpha_raw)
    }
}

/// Classifier parameters plus bounded nuisance parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvoPuParams {
    pub classifier: Classifier,
    pub nuisance: Nuisance,
}

/// `log(1 - exp(q))` for `q <= 0`.
fn log1mexp(q: f64) -> f64 {
    if q > -std::f64::consts::LN_2 {
        (-q.exp_m1()).ln()
    } else {
        (-q.exp()).ln_1p()
    }
}

/// `(observed, S)` pairs of a restricted encoding set.
pub type Encodings = [(bool, f64)];

#[derive(Debug, Clone, Copy)]
struct PriorEval {
    /// `Q = sum ln(1 - p_o p_e)`, so `prior = 1 - exp(Q)`.
    log_complement: f64,
    dq_dpo: f64,
    dq_dalpha: f64,
}

fn prior_eval(encodings: &Encodings, po: f64, alpha: f64) -> PriorEval {
    let mut q = 0.0;
    let mut dq_dpo = 0.0;
    let mut dq_dalpha = 0.0;
    for &(observed, s) in encodings {
        let (pe, dpe_dalpha) = if observed {
            (1.0, 0.0)
        } else {
            let decay = (-alpha * s).exp();
            (-(-alpha * s).exp_m1(), s * decay)
        };
        let u = po * pe;
        q += (-u).ln_1p();
        let inv = 1.0 / (1.0 - u);
        dq_dpo -= pe * inv;
        dq_dalpha -= po * dpe_dalpha * inv;
    }
    PriorEval {
        log_complement: q,
        dq_dpo,
        dq_dalpha,
    }
}

/// Sequence-dependent class prior `1 - prod (1 - p_o p_e)`; empty input
/// gives 0.
pub fn class_prior(encodings: &Encodings, po: f64, alpha: f64) -> f64 {
    -prior_eval(encodings, po, alpha).log_complement.exp_m1()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodTerms {
    pub observed: Vec<f64>,
    pub unobserved: Vec<f64>,
    pub total: f64,
}

fn sum_terms(a: &[f64], b: &[f64]) -> f64 {
    a.iter().chain(b).fold(0.0, |acc, v| acc + v)
}

fn observed_term(p: f64, prior: f64) -> f64 {
    p.ln() + prior.ln()
}

fn unobserved_term(p: f64, prior: f64) -> f64 {
    (-p * prior).ln_1p()
}

/// Evo-PU terms from precomputed classifier probabilities and priors.
pub fn evopu_terms(p_observed: &[f64], prior_observed: &[f64], p_candidates: &[f64], prior_candidates: &[f64]) -> LikelihoodTerms {
    let observed: Vec<f64> = p_observed
        .iter()
        .zip(prior_observed)
        .map(|(&p, &r)| observed_term(clamp_prob(p), r))
        .collect();
    let unobserved: Vec<f64> = p_candidates
        .iter()
        .zip(prior_candidates)
        .map(|(&p, &r)| unobserved_term(clamp_prob(p), r))
        .collect();
    let total = sum_terms(&observed, &unobserved);
    LikelihoodTerms {
        observed,
        unobserved,
        total,
    }
}

/// `sum log p + sum log(1 - p)` over clamped probabilities.
pub fn classical_loglik(p_positive: &[f64], p_negative: &[f64]) -> f64 {
    let pos: Vec<f64> = p_positive.iter().map(|&p| clamp_prob(p).ln()).collect();
    let neg: Vec<f64> = p_negative.iter().map(|&p| (-clamp_prob(p)).ln_1p()).collect();
    sum_terms(&pos, &neg)
}

/// `sum log(q p) + sum log(1 - q p)` over clamped probabilities.
pub fn proteinpu_loglik(p_positive: &[f64], p_unlabeled: &[f64], q: f64) -> Result<f64, TrainError> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(TrainError::InvalidQ(q));
    }
    let pos: Vec<f64> = p_positive.iter().map(|&p| (q * clamp_prob(p)).ln()).collect();
    let unl: Vec<f64> = p_unlabeled.iter().map(|&p| (-q * clamp_prob(p)).ln_1p()).collect();
    Ok(sum_terms(&pos, &unl))
}

/// Features and restricted encodings for the Evo-PU objective. Observed
/// amino-acid sequences occupy the first `n_observed` rows.
#[derive(Debug, Clone)]
pub struct EvoPuData {
    pub features: Matrix,
    pub n_observed: usize,
    pub encodings: Vec<Vec<(bool, f64)>>,
}

impl EvoPuData {
    pub fn new(features: Matrix, n_observed: usize, encodings: Vec<Vec<(bool, f64)>>) -> Result<Self, TrainError> {
        if features.rows() != encodings.len() || n_observed > encodings.len() {
            return Err(TrainError::InvalidConfig("row counts of features and encodings differ".into()));
        }
        Ok(EvoPuData {
            features,
            n_observed,
            encodings,
        })
    }

    /// Rows for every observed sequence, then every candidate sequence, in
    /// sorted order.
    pub fn build(cs: &CandidateSet, encoder: &Encoder) -> Result<Self, TrainError> {
        let features = encoder.encode_all(cs.observed_aa().iter().chain(cs.aa_candidates()))?;
        EvoPuData::new(features, cs.observed_aa().len(), encoding_rows(cs)?)
    }

    pub fn n_candidates(&self) -> usize {
        self.encodings.len() - self.n_observed
    }
}

/// `(observed, S)` restricted encodings of every observed sequence, then
/// every candidate sequence, in sorted order.
pub fn encoding_rows(cs: &CandidateSet) -> Result<Vec<Vec<(bool, f64)>>, TrainError> {
    let mut rows = Vec::with_capacity(cs.observed_aa().len() + cs.aa_candidates().len());
    for x in cs.observed_aa().iter().chain(cs.aa_candidates()) {
        let entries = cs
            .restricted_encodings(x)
            .map_err(|_| TrainError::MissingEncodings(x.to_string()))?;
        if entries.is_empty() {
            return Err(TrainError::MissingEncodings(x.to_string()));
        }
        rows.push(entries.iter().map(|e| (e.observed, e.intensity.value())).collect());
    }
    Ok(rows)
}

/// Features with binary labels: observed/positive (`true`) versus
/// negative or unlabeled (`false`).
#[derive(Debug, Clone)]
pub struct LabeledData {
    pub features: Matrix,
    pub labels: Vec<bool>,
}

impl LabeledData {
    pub fn new(features: Matrix, labels: Vec<bool>) -> Result<Self, TrainError> {
        if features.rows() != labels.len() {
            return Err(TrainError::InvalidConfig("row counts of features and labels differ".into()));
        }
        Ok(LabeledData { features, labels })
    }

    pub fn from_parts(positives: &Matrix, negatives: &Matrix) -> Self {
        let features = positives.vstack(negatives);
        let labels = std::iter::repeat_n(true, positives.rows())
            .chain(std::iter::repeat_n(false, negatives.rows()))
            .collect();
        LabeledData { features, labels }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        LabeledData {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum TrainingData {
    EvoPu(EvoPuData),
    Labeled(LabeledData),
}

impl TrainingData {
    pub fn features(&self) -> &Matrix {
        match self {
            TrainingData::EvoPu(d) => &d.features,
            TrainingData::Labeled(d) => &d.features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Objective {
    EvoPu { po_bounds: Bounds, alpha_bounds: Bounds },
    Classical,
    ProteinPu { q: f64 },
}

impl Objective {
    pub fn evopu_default() -> Self {
        Objective::EvoPu {
            po_bounds: DEFAULT_PO_BOUNDS,
            alpha_bounds: DEFAULT_ALPHA_BOUNDS,
        }
    }
}

/// Everything the optimizer updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub classifier: Classifier,
    pub nuisance: Option<Nuisance>,
}

impl ModelState {
    /// Adds nuisance parameters at their interval midpoints for Evo-PU.
    pub fn new(objective: &Objective, classifier: Classifier) -> Self {
        let nuisance = match objective {
            Objective::EvoPu { po_bounds, alpha_bounds } => Some(Nuisance::new(*po_bounds, *alpha_bounds)),
            _ => None,
        };
        ModelState { classifier, nuisance }
    }

    pub fn num_params(&self) -> usize {
        self.classifier.num_params() + if self.nuisance.is_some() { 2 } else { 0 }
    }

    /// Classifier parameters followed by `po_raw, alpha_raw` when present.
    pub fn flat(&self) -> Vec<f64> {
        let mut p = self.classifier.flat_params();
        if let Some(n) = &self.nuisance {
            p.push(n.po_raw);
            p.push(n.alpha_raw);
        }
        p
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), TrainError> {
        let k = self.classifier.num_params();
        if flat.len() != self.num_params() {
            return Err(ClassifierError::ParamLength {
                expected: self.num_params(),
                found: flat.len(),
            }
            .into());
        }
        self.classifier.set_flat_params(&flat[..k])?;
        if let Some(n) = &mut self.nuisance {
            n.po_raw = flat[k];
            n.alpha_raw = flat[k + 1];
        }
        Ok(())
    }

    fn penalty_mask(&self) -> Vec<bool> {
        let mut m = self.classifier.penalty_mask();
        if self.nuisance.is_some() {
            m.extend([false, false]);
        }
        m
    }

    pub fn evopu_params(&self) -> Option<EvoPuParams> {
        self.nuisance.map(|nuisance| EvoPuParams {
            classifier: self.classifier.clone(),
            nuisance,
        })
    }
}

/// Loss `-loglik + lambda * ||w||^2` and its gradient at one state.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub loglik: f64,
    pub penalty: f64,
    pub grad: Vec<f64>,
    pub forward: Forward,
}

/// Per-row log-likelihood and its derivatives with respect to the logit and
/// the two priors' nuisance inputs.
struct RowGrads {
    loglik: f64,
    dlogit: Vec<f64>,
    dpo: f64,
    dalpha: f64,
}

fn prob_and_slope(z: f64) -> (f64, f64) {
    let s = sigmoid(z);
    let p = clamp_prob(s);
    let slope = if p == s { s * (1.0 - s) } else { 0.0 };
    (p, slope)
}

fn evopu_row_grads(data: &EvoPuData, logits: &[f64], nuisance: &Nuisance) -> RowGrads {
    let po = nuisance.po();
    let alpha = nuisance.alpha();
    let mut observed = Vec::with_capacity(data.n_observed);
    let mut unobserved = Vec::with_capacity(data.n_candidates());
    let mut dlogit = vec![0.0; logits.len()];
    let mut dpo = 0.0;
    let mut dalpha = 0.0;
    for (i, (&z, enc)) in logits.iter().zip(&data.encodings).enumerate() {
        let (p, slope) = prob_and_slope(z);
        let pr = prior_eval(enc, po, alpha);
        let eq = pr.log_complement.exp();
        if i < data.n_observed {
            let log_prior = log1mexp(pr.log_complement);
            observed.push(p.ln() + log_prior);
            dlogit[i] = slope / p;
            // d log(1 - e^Q) / dQ
            let dq = -eq / (-pr.log_complement.exp_m1());
            dpo += dq * pr.dq_dpo;
            dalpha += dq * pr.dq_dalpha;
        } else {
            let prior = -pr.log_complement.exp_m1();
            let one_minus = 1.0 - p * prior;
            unobserved.push(unobserved_term(p, prior));
            dlogit[i] = -prior / one_minus * slope;
            let dq = (-p / one_minus) * (-eq);
            dpo += dq * pr.dq_dpo;
            dalpha += dq * pr.dq_dalpha;
        }
    }
    RowGrads {
        loglik: sum_terms(&observed, &unobserved),
        dlogit,
        dpo: dpo * nuisance.po_bounds.map_derivative(nuisance.po_raw),
        dalpha: dalpha * nuisance.alpha_bounds.map_derivative(nuisance.alpha_raw),
    }
}

fn labeled_row_grads(data: &LabeledData, logits: &[f64], q: f64) -> RowGrads {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut dlogit = vec![0.0; logits.len()];
    for (i, (&z, &label)) in logits.iter().zip(&data.labels).enumerate() {
        let (p, slope) = prob_and_slope(z);
        if label {
            pos.push((q * p).ln());
            dlogit[i] = slope / p;
        } else {
            neg.push((-q * p).ln_1p());
            dlogit[i] = -q / (1.0 - q * p) * slope;
        }
    }
    RowGrads {
        loglik: sum_terms(&pos, &neg),
        dlogit,
        dpo: 0.0,
        dalpha: 0.0,
    }
}

/// Evaluates the penalized loss and its full gradient, including nuisance
/// raws for Evo-PU.
pub fn loss_and_gradient(
    objective: &Objective,
    data: &TrainingData,
    state: &ModelState,
    lambda: f64,
    mode: Mode,
) -> Result<LossEval, TrainError> {
    let fwd = state.classifier.forward(data.features(), mode)?;
    let rows = match (objective, data, &state.nuisance) {
        (Objective::EvoPu { .. }, TrainingData::EvoPu(d), Some(n)) => evopu_row_grads(d, fwd.logits(), n),
        (Objective::Classical, TrainingData::Labeled(d), None) => labeled_row_grads(d, fwd.logits(), 1.0),
        (Objective::ProteinPu { q }, TrainingData::Labeled(d), None) => {
            if !(*q > 0.0 && *q <= 1.0) {
                return Err(TrainError::InvalidQ(*q));
            }
            labeled_row_grads(d, fwd.logits(), *q)
        }
        _ => return Err(TrainError::ObjectiveDataMismatch),
    };
    let upstream: Vec<f64> = rows.dlogit.iter().map(|g| -g).collect();
    let mut grad = state.classifier.backward(&fwd, &upstream)?;
    if state.nuisance.is_some() {
        grad.push(-rows.dpo);
        grad.push(-rows.dalpha);
    }
    let flat = state.flat();
    let mut penalty = 0.0;
    for ((g, &w), pen) in grad.iter_mut().zip(&flat).zip(state.penalty_mask()) {
        if pen {
            penalty += w * w;
            *g += 2.0 * lambda * w;
        }
    }
    let penalty = lambda * penalty;
    Ok(LossEval {
        loss: -rows.loglik + penalty,
        loglik: rows.loglik,
        penalty,
        grad,
        forward: fwd,
    })
}

/// Eval-mode Evo-PU log-likelihood terms.
pub fn evopu_loglik(data: &EvoPuData, params: &EvoPuParams) -> Result<LikelihoodTerms, TrainError> {
    let p = params.classifier.predict_proba_batch(&data.features, Mode::Eval)?;
    let po = params.nuisance.po();
    let alpha = params.nuisance.alpha();
    let mut observed = Vec::with_capacity(data.n_observed);
    let mut unobserved = Vec::with_capacity(data.n_candidates());
    for (i, enc) in data.encodings.iter().enumerate() {
        let q = prior_eval(enc, po, alpha).log_complement;
        if i < data.n_observed {
            observed.push(p[i].ln() + log1mexp(q));
        } else {
            unobserved.push(unobserved_term(p[i], -q.exp_m1()));
        }
    }
    let total = sum_terms(&observed, &unobserved);
    Ok(LikelihoodTerms {
        observed,
        unobserved,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub base_lr: f64,
    pub max_lr: f64,
    pub step_size: usize,
    pub grad_clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 50.0,
            base_lr: 1e-3,
            max_lr: 1e-1,
            step_size: 50,
            grad_clip_norm: 1.0,
            max_epochs: 2000,
            patience: 100,
            min_delta: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(self.base_lr > 0.0 && self.max_lr >= self.base_lr) {
            return bad("learning-rate range must satisfy 0 < base_lr <= max_lr");
        }
        if self.step_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("step_size, max_epochs and patience must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        if !(self.grad_clip_norm > 0.0 && self.min_delta >= 0.0) {
            return bad("grad_clip_norm must be positive and min_delta non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("Adam constants out of range");
        }
        Ok(())
    }

    /// Triangular cyclic schedule between `base_lr` and `max_lr`, half-cycle
    /// of `step_size` iterations, starting at `base_lr`.
    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let step = self.step_size as f64;
        let it = iteration as f64;
        let cycle = (1.0 + it / (2.0 * step)).floor();
        let x = (it / step - 2.0 * cycle + 1.0).abs();
        self.base_lr + (self.max_lr - self.base_lr) * (1.0 - x).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub po: Option<f64>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub state: ModelState,
    pub trace: Vec<TraceRow>,
    pub best_loss: f64,
    pub stopped_early: bool,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Full-batch Adam on the penalized negative log-likelihood with a cyclic
/// learning rate, global-norm gradient clipping and early stopping on the
/// training loss.
pub fn fit(objective: &Objective, data: &TrainingData, init: ModelState, cfg: &TrainConfig) -> Result<FitResult, TrainError> {
    cfg.validate()?;
    let mut state = init;
    let mut params = state.flat();
    let n = params.len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let mode = Mode::Train {
            dropout_seed: splitmix(cfg.seed ^ splitmix(epoch as u64)),
        };
        let eval = loss_and_gradient(objective, data, &state, cfg.lambda, mode)?;
        if !eval.loss.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        let lr = cfg.learning_rate(epoch);
        let grad_norm = eval.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        trace.push(TraceRow {
            epoch,
            loss: eval.loss,
            lr,
            grad_norm,
            po: state.nuisance.map(|n| n.po()),
            alpha: state.nuisance.map(|n| n.alpha()),
        });
        if eval.loss < best - cfg.min_delta {
            best = eval.loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
        let scale = if grad_norm > cfg.grad_clip_norm {
            cfg.grad_clip_norm / grad_norm
        } else {
            1.0
        };
        let t = (epoch + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..n {
            let g = eval.grad[k] * scale;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            params[k] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
        state.classifier.update_running_stats(&eval.forward);
        state.set_flat(&params)?;
    }
    Ok(FitResult {
        state,
        trace,
        best_loss: best,
        stopped_early,
    })
}

/// Writes `epoch,loss,lr,grad_norm,p_o,alpha`; nuisance columns are empty
/// for objectives without them.
pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    w.write_record(["epoch", "loss", "lr", "grad_norm", "p_o", "alpha"]).map_err(io)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.16e}", r.loss),
            format!("{:.16e}", r.lr),
            format!("{:.16e}", r.grad_norm),
            opt(r.po),
            opt(r.alpha),
        ])
        .map_err(io)?;
    }
    w.flush()
}
