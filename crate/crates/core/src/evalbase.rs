//! Ranking metrics and the PU baselines used for comparison.

use std::cmp::Ordering;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifiers::{Classifier, ClassifierKind, Mode};
use crate::matrix::Matrix;
use crate::training::{fit, LabeledData, ModelState, Objective, TrainConfig, TrainError, TrainingData};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("both classes are required")]
    SingleClass,
    #[error("at least one positive is required")]
    NoPositives,
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("length mismatch: {0} scores versus {1} labels")]
    LengthMismatch(usize, usize),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no unlabeled sequence scored below the spy threshold")]
    NoReliableNegatives,
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn check_inputs(scores: &[f64], n: usize) -> Result<(), EvalError> {
    if scores.len() != n {
        return Err(EvalError::LengthMismatch(scores.len(), n));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(i));
    }
    Ok(())
}

/// 1-based ranks in ascending order, tied values sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let mean = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = mean;
        }
        i = j;
    }
    ranks
}

/// Mann-Whitney area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Step-integrated average precision over a stable descending order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / n_pos as f64)
}

/// Pearson correlation of average ranks.
pub fn spearman_rho(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::DegenerateInput("fewer than two values"));
    }
    check_inputs(a, a.len())?;
    check_inputs(b, b.len())?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::DegenerateInput("constant input"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Fold index per row: shuffled within each class, then dealt round-robin.
pub fn stratified_folds(labels: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            assignment[i] = j % folds;
        }
    }
    assignment
}

fn fold_split(assignment: &[usize], fold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != fold)
}

/// Shared settings for baseline fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub classifier: ClassifierKind,
    pub train: TrainConfig,
    pub folds: usize,
    pub spy_fraction: f64,
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            classifier: ClassifierKind::Lr,
            train: TrainConfig::default(),
            folds: 10,
            spy_fraction: 0.2,
            k_min: 2,
            k_max: 10,
        }
    }
}

fn fit_labeled(objective: Objective, data: &LabeledData, cfg: &BaselineConfig, seed: u64) -> Result<Classifier, EvalError> {
    let classifier = Classifier::init(cfg.classifier, data.features.cols(), seed).map_err(TrainError::from)?;
    let init = ModelState::new(&objective, classifier);
    let train = TrainConfig { seed, ..cfg.train };
    let result = fit(&objective, &TrainingData::Labeled(data.clone()), init, &train)?;
    Ok(result.state.classifier)
}

fn scores(classifier: &Classifier, x: &Matrix) -> Result<Vec<f64>, EvalError> {
    Ok(classifier.predict_proba_batch(x, Mode::Eval).map_err(TrainError::from)?)
}

/// Indices of unlabeled scores strictly below the lowest spy score.
pub fn reliable_negatives(unlabeled_scores: &[f64], spy_scores: &[f64]) -> Result<(f64, Vec<usize>), EvalError> {
    let threshold = spy_scores.iter().copied().fold(f64::INFINITY, f64::min);
    let picked: Vec<usize> = (0..unlabeled_scores.len()).filter(|&i| unlabeled_scores[i] < threshold).collect();
    if picked.is_empty() {
        return Err(EvalError::NoReliableNegatives);
    }
    Ok((threshold, picked))
}

#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub classifier: Classifier,
    /// Positive row indices planted among the unlabeled.
    pub spies: Vec<usize>,
    pub threshold: f64,
    pub reliable_negatives: Vec<usize>,
    /// Set when no unlabeled row fell below the threshold and every
    /// unlabeled row was used as a negative instead.
    pub fell_back: bool,
}

/// Spy-based two-step PU learning.
pub fn two_step_fit(positives: &Matrix, unlabeled: &Matrix, cfg: &BaselineConfig, seed: u64) -> Result<TwoStepResult, EvalError> {
    let n_pos = positives.rows();
    if n_pos < 5 || unlabeled.rows() == 0 {
        return Err(EvalError::InsufficientData(format!(
            "two-step needs at least 5 positives and one unlabeled row, got {n_pos} and {}",
            unlabeled.rows()
        )));
    }
    let n_spies = ((cfg.spy_fraction * n_pos as f64).round() as usize).clamp(1, n_pos - 1);
    let mut order: Vec<usize> = (0..n_pos).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut spies = order[..n_spies].to_vec();
    let mut kept = order[n_spies..].to_vec();
    spies.sort_unstable();
    kept.sort_unstable();

    let spy_rows = positives.select_rows(&spies);
    let first = LabeledData::from_parts(&positives.select_rows(&kept), &unlabeled.vstack(&spy_rows));
    let primary = fit_labeled(Objective::Classical, &first, cfg, seed)?;
    let unl_scores = scores(&primary, unlabeled)?;
    let spy_scores = scores(&primary, &spy_rows)?;

    let (threshold, negatives, fell_back) = match reliable_negatives(&unl_scores, &spy_scores) {
        Ok((t, idx)) => (t, idx, false),
        Err(EvalError::NoReliableNegatives) => {
            log::warn!("two-step: no reliable negatives below the spy threshold, using all unlabeled rows");
            let t = spy_scores.iter().copied().fold(f64::INFINITY, f64::min);
            (t, (0..unlabeled.rows()).collect(), true)
        }
        Err(e) => return Err(e),
    };
    let second = LabeledData::from_parts(positives, &unlabeled.select_rows(&negatives));
    let classifier = fit_labeled(Objective::Classical, &second, cfg, seed)?;
    Ok(TwoStepResult {
        classifier,
        spies,
        threshold,
        reliable_negatives: negatives,
        fell_back,
    })
}

/// `n_obs / (pi (n_obs + n_unl))`.
pub fn labeling_efficiency(n_obs: usize, n_unl: usize, pi: f64) -> f64 {
    n_obs as f64 / (pi * (n_obs + n_unl) as f64)
}

/// `(auc_pu - pi / 2) / (1 - pi)`.
pub fn corrected_auc(auc_pu: f64, pi: f64) -> f64 {
    (auc_pu - pi / 2.0) / (1.0 - pi)
}

/// Class-prior grid from `min(2 n_obs / (n_obs + n_unl), 0.5)` in steps of
/// 0.1, stopping before 1.
pub fn prior_grid(n_obs: usize, n_unl: usize) -> Vec<f64> {
    let start = (2.0 * n_obs as f64 / (n_obs + n_unl) as f64).min(0.5);
    (0..)
        .map(|j| start + 0.1 * j as f64)
        .take_while(|&pi| pi < 1.0 - 1e-9)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PuSelectionResult {
    pub pi: f64,
    pub q: f64,
    /// `(pi, q, mean corrected AUC)` for every evaluated grid point.
    pub grid: Vec<(f64, f64, f64)>,
}

/// Protein-PU with the class prior chosen by cross-validated corrected AUC,
/// then refit on all rows.
pub fn proteinpu_select(
    positives: &Matrix,
    unlabeled: &Matrix,
    cfg: &BaselineConfig,
    seed: u64,
) -> Result<(PuSelectionResult, Classifier), EvalError> {
    let (n_obs, n_unl) = (positives.rows(), unlabeled.rows());
    if n_obs < cfg.folds || n_unl < cfg.folds {
        return Err(EvalError::InsufficientData(format!(
            "{} folds need at least that many rows per class, got {n_obs} and {n_unl}",
            cfg.folds
        )));
    }
    let data = LabeledData::from_parts(positives, unlabeled);
    let assignment = stratified_folds(&data.labels, cfg.folds, seed);
    let mut grid = Vec::new();
    for pi in prior_grid(n_obs, n_unl) {
        let q = labeling_efficiency(n_obs, n_unl, pi);
        if q > 1.0 {
            continue;
        }
        let mut total = 0.0;
        for fold in 0..cfg.folds {
            let (train_idx, test_idx) = fold_split(&assignment, fold);
            let model = fit_labeled(Objective::ProteinPu { q }, &data.subset(&train_idx), cfg, seed)?;
            let test = data.subset(&test_idx);
            total += auc(&scores(&model, &test.features)?, &test.labels)?;
        }
        grid.push((pi, q, corrected_auc(total / cfg.folds as f64, pi)));
    }
    let best = grid
        .iter()
        .fold(None::<(f64, f64, f64)>, |best, &g| match best {
            Some(b) if b.2 >= g.2 => Some(b),
            _ => Some(g),
        })
        .ok_or_else(|| EvalError::InsufficientData("no admissible class prior in the grid".into()))?;
    let classifier = fit_labeled(Objective::ProteinPu { q: best.1 }, &data, cfg, seed)?;
    Ok((
        PuSelectionResult {
            pi: best.0,
            q: best.1,
            grid,
        },
        classifier,
    ))
}

/// Euclidean k-nearest-neighbour scorer.
#[derive(Debug, Clone)]
pub struct KnnModel {
    pub k: usize,
    features: Matrix,
    labels: Vec<bool>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Neighbour labels ordered by distance, ties by training index.
fn neighbour_labels(features: &Matrix, labels: &[bool], query: &[f64], max_k: usize) -> Vec<bool> {
    let mut d: Vec<(f64, usize)> = (0..features.rows()).map(|i| (sq_dist(features.row(i), query), i)).collect();
    d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
    d.iter().take(max_k).map(|&(_, i)| labels[i]).collect()
}

fn fraction_positive(neigh: &[bool], k: usize) -> f64 {
    let k = k.min(neigh.len());
    neigh[..k].iter().filter(|&&l| l).count() as f64 / k as f64
}

impl KnnModel {
    pub fn new(features: Matrix, labels: Vec<bool>, k: usize) -> Result<Self, EvalError> {
        if k == 0 || features.rows() != labels.len() || features.rows() == 0 {
            return Err(EvalError::InsufficientData("kNN needs k >= 1 and labeled rows".into()));
        }
        Ok(KnnModel { k, features, labels })
    }

    /// Fraction of positive labels among the `k` nearest training rows.
    pub fn score(&self, query: &[f64]) -> f64 {
        fraction_positive(&neighbour_labels(&self.features, &self.labels, query, self.k), self.k)
    }

    pub fn score_batch(&self, x: &Matrix) -> Vec<f64> {
        (0..x.rows()).map(|i| self.score(x.row(i))).collect()
    }
}

/// kNN with `k` chosen by cross-validated AUC; ties go to the smaller `k`.
pub fn knn_select_fit(positives: &Matrix, unlabeled: &Matrix, cfg: &BaselineConfig, seed: u64) -> Result<(KnnModel, Vec<(usize, f64)>), EvalError> {
    let (n_obs, n_unl) = (positives.rows(), unlabeled.rows());
    if n_obs < cfg.folds || n_unl < cfg.folds || cfg.k_min == 0 || cfg.k_min > cfg.k_max {
        return Err(EvalError::InsufficientData(format!(
            "kNN selection needs at least {} rows per class, got {n_obs} and {n_unl}",
            cfg.folds
        )));
    }
    let data = LabeledData::from_parts(positives, unlabeled);
    let assignment = stratified_folds(&data.labels, cfg.folds, seed);
    let ks: Vec<usize> = (cfg.k_min..=cfg.k_max).collect();
    let mut totals = vec![0.0; ks.len()];
    for fold in 0..cfg.folds {
        let (train_idx, test_idx) = fold_split(&assignment, fold);
        let train = data.subset(&train_idx);
        let test = data.subset(&test_idx);
        let neigh: Vec<Vec<bool>> = (0..test.features.rows())
            .map(|i| neighbour_labels(&train.features, &train.labels, test.features.row(i), cfg.k_max))
            .collect();
        for (t, &k) in totals.iter_mut().zip(&ks) {
            let s: Vec<f64> = neigh.iter().map(|n| fraction_positive(n, k)).collect();
            *t += auc(&s, &test.labels)?;
        }
    }
    let cv: Vec<(usize, f64)> = ks.iter().zip(&totals).map(|(&k, &t)| (k, t / cfg.folds as f64)).collect();
    let mut best = cv[0];
    for &c in &cv[1..] {
        if c.1 > best.1 {
            best = c;
        }
    }
    Ok((KnnModel::new(data.features, data.labels, best.0)?, cv))
}

/// One row of the metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub classifier: String,
    pub seed: u64,
    pub auc: f64,
    pub ap: f64,
    pub spearman: Option<f64>,
}

pub const METRICS_HEADER: [&str; 6] = ["method", "classifier", "seed", "auc", "ap", "spearman"];

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricsRow {
    pub fn fields(&self) -> [String; 6] {
        [
            self.method.clone(),
            self.classifier.clone(),
            self.seed.to_string(),
            format_float(self.auc),
            format_float(self.ap),
            self.spearman.map(format_float).unwrap_or_default(),
        ]
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    w.write_record(METRICS_HEADER).map_err(io)?;
    for r in rows {
        w.write_record(r.fields()).map_err(io)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn quadratic_auc(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        let l = [true, true, false, false];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &l).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 0.0);
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass));
        assert!(matches!(auc(&[f64::NAN, 0.2], &[true, false]), Err(EvalError::NonFiniteScore(0))));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.2], &[true, true, false]).unwrap(), 1.0);
        assert!((average_precision(&[0.1, 0.5, 0.6, 0.7], &[true, false, false, false]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3, 0.3], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.3, 0.3], &[false, false]), Err(EvalError::NoPositives));
    }

    #[test]
    fn spearman_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman_rho(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(spearman_rho(&[1.0; 4], &a), Err(EvalError::DegenerateInput(_))));
    }

    #[test]
    fn auc_matches_pairwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(2..40);
            let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            l[0] = true;
            l[1] = false;
            assert!((auc(&s, &l).unwrap() - quadratic_auc(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn protein_pu_arithmetic() {
        assert!((labeling_efficiency(50, 450, 0.2) - 0.5).abs() < 1e-12);
        assert!((corrected_auc(0.6, 0.5) - 0.7).abs() < 1e-12);
        assert!((prior_grid(100, 100)[0] - 0.5).abs() < 1e-15);
        let g = prior_grid(50, 450);
        assert_eq!(g.len(), 8);
        assert!((g[7] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let labels: Vec<bool> = (0..53).map(|i| i % 3 == 0).collect();
        let a = stratified_folds(&labels, 10, 5);
        assert_eq!(a, stratified_folds(&labels, 10, 5));
        for f in 0..10 {
            let pos = (0..53).filter(|&i| a[i] == f && labels[i]).count();
            assert!((1..=2).contains(&pos));
        }
    }

    #[test]
    fn reliable_negative_threshold() {
        assert_eq!(reliable_negatives(&[0.6, 0.7], &[0.5, 0.9]), Err(EvalError::NoReliableNegatives));
        let (t, idx) = reliable_negatives(&[0.1, 0.7, 0.4, 0.5], &[0.5, 0.9]).unwrap();
        assert_eq!(t, 0.5);
        assert_eq!(idx, vec![0, 2]);
    }

    fn blobs(seed: u64, n_pos: usize, n_neg: usize, sep: f64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize, c: f64| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            Matrix::from_rows(&rows, 2)
        };
        (draw(n_pos, sep), draw(n_neg, -sep))
    }

    #[test]
    fn two_step_selects_separated_negatives() {
        let (pos, neg) = blobs(1, 40, 40, 3.0);
        let cfg = BaselineConfig {
            train: TrainConfig {
                max_epochs: 400,
                lambda: 0.1,
                ..TrainConfig::default()
            },
            ..BaselineConfig::default()
        };
        let a = two_step_fit(&pos, &neg, &cfg, 3).unwrap();
        let b = two_step_fit(&pos, &neg, &cfg, 3).unwrap();
        assert_eq!(a.spies, b.spies);
        assert_eq!(a.spies.len(), 8);
        assert!(!a.fell_back);
        assert_eq!(a.reliable_negatives, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn knn_examples() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]], 2);
        let m = KnnModel::new(x, vec![true, true, false], 2).unwrap();
        assert_eq!(m.score(&[0.0, 0.0]), 1.0);
        let (pos, neg) = blobs(2, 60, 60, 2.0);
        let cfg = BaselineConfig::default();
        let (model, cv) = knn_select_fit(&pos, &neg, &cfg, 1).unwrap();
        assert_eq!(cv.len(), 9);
        let best = cv.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(model.k, cv.iter().find(|c| c.1 == best).unwrap().0);
        let (tp, tn) = blobs(3, 50, 50, 2.0);
        let test = tp.vstack(&tn);
        let labels: Vec<bool> = (0..100).map(|i| i < 50).collect();
        assert!(auc(&model.score_batch(&test), &labels).unwrap() > 0.9);
    }

    #[test]
    fn metrics_csv_layout() {
        let row = MetricsRow {
            method: "evopu".into(),
            classifier: "lr".into(),
            seed: 3,
            auc: 0.75,
            ap: 0.5,
            spearman: None,
        };
        let mut out = Vec::new();
        write_metrics_csv(&[row], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "method,classifier,seed,auc,ap,spearman\nevopu,lr,3,7.5000000000000000e-1,5.0000000000000000e-1,\n"
        );
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(raw in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..30)) {
            let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let mut l: Vec<bool> = raw.iter().map(|r| r.1).collect();
            l[0] = true;
            l[1] = false;
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            let a = auc(&s, &l).unwrap();
            prop_assert!((a - auc(&t, &l).unwrap()).abs() < 1e-12);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let mut sorted = s.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                prop_assert!((a + auc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
            }
            prop_assert!((average_precision(&s, &l).unwrap() - average_precision(&t, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn spearman_is_rank_invariant(a in proptest::collection::vec(-5.0f64..5.0, 3..30), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random::<f64>()).collect();
            if let Ok(r) = spearman_rho(&a, &b) {
                let t: Vec<f64> = a.iter().map(|v| v.powi(3)).collect();
                prop_assert!((r - spearman_rho(&t, &b).unwrap()).abs() < 1e-12);
            }
        }
    }
}
