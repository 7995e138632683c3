//! Ingestion, experiment configuration, end-to-end runs and sweeps.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::candidates::{default_epsilon, generate_neighborhood, CandidateSet};
use crate::classifiers::{Classifier, ClassifierKind, Mode};
use crate::evalbase::{
    auc, average_precision, format_float, knn_select_fit, proteinpu_select, spearman_rho, two_step_fit, write_metrics_csv,
    BaselineConfig, KnnModel, MetricsRow,
};
use crate::evomodel::{MutationRates, PrevalenceTable, DEFAULT_TRANSITION_RATE, DEFAULT_TRANSVERSION_RATE};
use crate::features::{Encoder, ExternalFeatures, PropertyTable};
use crate::matrix::Matrix;
use crate::seqcore::{translate, AaSeq, Alphabet, NucSeq, SeqError, AMINO_ACIDS};
use crate::simgen::{make_pu_dataset, simulate, write_observed_csv, write_test_csv, DatasetConfig, SimConfig};
use crate::training::{
    encoding_rows, fit, write_trace_csv, Bounds, EvoPuData, LabeledData, ModelState, Objective, TrainConfig, TraceRow, TrainingData,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    ParseError { line: u64, message: String },
    #[error("line {line}: record {record} has length {found}, expected {expected}")]
    LengthMismatch {
        line: u64,
        record: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: record {record} contains a stop codon")]
    StopCodonPresent { line: u64, record: String },
    #[error("{0} contains no records")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("ingest {path}")]
    Ingest {
        path: PathBuf,
        #[source]
        source: IngestError,
    },
    #[error("{stage}: {message}")]
    Stage { stage: Stage, message: String },
    #[error("sweep parameter {0:?} is not sweepable or has no values")]
    InvalidSweepParameter(String),
    #[error("write {path}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Candidates,
    Features,
    Fit,
    Score,
    Metrics,
    Simulate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Candidates => "candidate generation",
            Stage::Features => "feature encoding",
            Stage::Fit => "fit",
            Stage::Score => "scoring",
            Stage::Metrics => "metrics",
            Stage::Simulate => "simulation",
        };
        f.write_str(s)
    }
}

fn stage<E: fmt::Display>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Fasta,
}

impl InputFormat {
    fn infer(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("fa" | "fasta" | "fna") => InputFormat::Fasta,
            _ => InputFormat::Csv,
        }
    }
}

fn parse_nuc(s: &str, line: u64) -> Result<NucSeq, IngestError> {
    NucSeq::parse(s).map_err(|e| match e {
        SeqError::StopCodonPresent { .. } => IngestError::StopCodonPresent {
            line,
            record: s.to_string(),
        },
        other => IngestError::ParseError {
            line,
            message: other.to_string(),
        },
    })
}

fn add_record(table: &mut PrevalenceTable, y: NucSeq, count: u64, line: u64, record: &str) -> Result<(), IngestError> {
    if let Some(expected) = table.sequence_len() {
        if expected != y.len() {
            return Err(IngestError::LengthMismatch {
                line,
                record: record.to_string(),
                expected,
                found: y.len(),
            });
        }
    }
    table.add(y, count).map_err(|e| IngestError::ParseError {
        line,
        message: e.to_string(),
    })
}

/// Reads `sequence,count` rows; repeated sequences accumulate.
pub fn read_observed_csv<R: std::io::Read>(input: R, hosts: f64) -> Result<PrevalenceTable, IngestError> {
    let mut table = PrevalenceTable::new(hosts).map_err(|e| IngestError::ParseError {
        line: 0,
        message: e.to_string(),
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    if headers.get(0) != Some("sequence") || headers.get(1) != Some("count") {
        return Err(IngestError::ParseError {
            line: 1,
            message: "expected header sequence,count".into(),
        });
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        let seq = rec.get(0).unwrap_or_default();
        let count: u64 = rec
            .get(1)
            .unwrap_or_default()
            .parse()
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| IngestError::ParseError {
                line,
                message: format!("count must be a positive integer, got {:?}", rec.get(1).unwrap_or_default()),
            })?;
        let y = parse_nuc(seq, line)?;
        add_record(&mut table, y, count, line, seq)?;
    }
    Ok(table)
}

/// Reads FASTA records; each record counts once and duplicates accumulate.
pub fn read_observed_fasta<R: BufRead>(input: R, hosts: f64) -> Result<PrevalenceTable, IngestError> {
    let mut table = PrevalenceTable::new(hosts).map_err(|e| IngestError::ParseError {
        line: 0,
        message: e.to_string(),
    })?;
    let mut current: Option<(u64, String)> = None;
    let finish = |rec: Option<(u64, String)>, table: &mut PrevalenceTable| -> Result<(), IngestError> {
        if let Some((line, seq)) = rec {
            if seq.is_empty() {
                return Err(IngestError::ParseError {
                    line,
                    message: "record has no sequence".into(),
                });
            }
            let y = parse_nuc(&seq, line)?;
            add_record(table, y, 1, line, &seq)?;
        }
        Ok(())
    };
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let n = i as u64 + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('>') {
            finish(current.take(), &mut table)?;
            current = Some((n, String::new()));
        } else {
            match current.as_mut() {
                Some((_, seq)) => seq.push_str(t),
                None => {
                    return Err(IngestError::ParseError {
                        line: n,
                        message: "sequence data before the first header".into(),
                    })
                }
            }
        }
    }
    finish(current, &mut table)?;
    Ok(table)
}

fn csv_error(e: csv::Error, fallback: u64) -> IngestError {
    let line = e.position().map_or(fallback, |p| p.line());
    IngestError::ParseError {
        line,
        message: e.to_string(),
    }
}

/// One labeled evaluation sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TestRecord {
    pub seq: AaSeq,
    pub label: bool,
    pub frequency: Option<f64>,
}

/// Reads `aa_sequence,label[,frequency]` with labels 0/1.
pub fn read_test_csv<R: std::io::Read>(input: R) -> Result<Vec<TestRecord>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(input);
    let headers = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    let has_freq = headers.get(2) == Some("frequency");
    if headers.get(0) != Some("aa_sequence") || headers.get(1) != Some("label") {
        return Err(IngestError::ParseError {
            line: 1,
            message: "expected header aa_sequence,label[,frequency]".into(),
        });
    }
    let mut out = Vec::new();
    let mut len = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| IngestError::ParseError { line, message };
        let raw = rec.get(0).unwrap_or_default();
        let seq = AaSeq::parse(raw).map_err(|e| bad(e.to_string()))?;
        match len {
            None => len = Some(seq.len()),
            Some(l) if l != seq.len() => {
                return Err(IngestError::LengthMismatch {
                    line,
                    record: raw.to_string(),
                    expected: l,
                    found: seq.len(),
                })
            }
            _ => {}
        }
        let label = match rec.get(1).unwrap_or_default() {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("label must be 0 or 1, got {other:?}"))),
        };
        let frequency = match (has_freq, rec.get(2).unwrap_or_default()) {
            (true, v) if !v.is_empty() => Some(
                v.parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite())
                    .ok_or_else(|| bad(format!("bad frequency {v:?}")))?,
            ),
            _ => None,
        };
        out.push(TestRecord { seq, label, frequency });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    EvoPu,
    Classical,
    ProteinPu,
    TwoStep,
    Knn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::EvoPu => "evopu",
            Method::Classical => "classical",
            Method::ProteinPu => "proteinpu",
            Method::TwoStep => "twostep",
            Method::Knn => "knn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Chem,
    OneHot,
    External,
}

impl std::str::FromStr for EncoderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "chem" => Ok(EncoderKind::Chem),
            "onehot" => Ok(EncoderKind::OneHot),
            "external" => Ok(EncoderKind::External),
            other => Err(format!("unknown encoder {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub observed: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<InputFormat>,
    /// Segment lengths of a non-consecutive motif stored as one
    /// concatenated string.
    #[serde(default)]
    pub motif_segments: Option<Vec<usize>>,
    #[serde(default)]
    pub alphabet: Alphabet,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub method: Method,
    pub classifier: ClassifierKind,
    pub encoder: EncoderKind,
    pub external_features: Option<PathBuf>,
    pub chem_table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    /// Estimated reproducing hosts `T`.
    pub hosts: f64,
    pub epsilon: f64,
    pub alpha_gen: f64,
    pub transition_rate: f64,
    pub transversion_rate: f64,
    pub po_bounds: [f64; 2],
    pub alpha_bounds: [f64; 2],
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            hosts: 24e9,
            epsilon: default_epsilon(),
            alpha_gen: 1.0,
            transition_rate: DEFAULT_TRANSITION_RATE,
            transversion_rate: DEFAULT_TRANSVERSION_RATE,
            po_bounds: [0.01, 0.99],
            alpha_bounds: [0.00075, 0.99],
        }
    }
}

impl EvolutionConfig {
    pub fn rates(&self) -> Result<MutationRates, PipelineError> {
        MutationRates::new(self.transition_rate, self.transversion_rate).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub folds: usize,
    pub spy_fraction: f64,
    pub k_min: usize,
    pub k_max: usize,
    /// Residues from which uniform unlabeled sequences are drawn.
    pub unlabeled_alphabet: String,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            folds: 10,
            spy_fraction: 0.2,
            k_min: 2,
            k_max: 10,
            unlabeled_alphabet: String::from_utf8_lossy(AMINO_ACIDS).into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub baseline: BaselineSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    /// Parses TOML and resolves relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.data.observed);
        if let Some(p) = cfg.data.test.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.model.external_features.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.model.chem_table.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let mut files = vec![&self.data.observed];
        files.extend(self.data.test.iter());
        files.extend(self.model.external_features.iter());
        files.extend(self.model.chem_table.iter());
        for f in files {
            if !f.is_file() {
                return bad(format!("referenced file {} does not exist", f.display()));
            }
        }
        let ev = &self.evolution;
        if !(0.0..1.0).contains(&ev.epsilon) {
            return bad(format!("epsilon must lie in [0, 1), got {}", ev.epsilon));
        }
        if !(ev.hosts.is_finite() && ev.hosts > 0.0) {
            return bad("hosts must be positive".into());
        }
        if !(ev.alpha_gen > 0.0 && ev.alpha_gen <= 1.0) {
            return bad("alpha_gen must lie in (0, 1]".into());
        }
        for (name, b) in [("po_bounds", ev.po_bounds), ("alpha_bounds", ev.alpha_bounds)] {
            if !(b[0] < b[1] && b[0] >= 0.0 && b[1] <= 1.0) {
                return bad(format!("{name} must satisfy 0 <= lo < hi <= 1"));
            }
        }
        ev.rates()?;
        TrainConfig { seed: 0, ..self.training }
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.model.encoder == EncoderKind::External && self.model.external_features.is_none() {
            return bad("encoder = \"external\" requires model.external_features".into());
        }
        if self.baseline.unlabeled_alphabet.bytes().any(|b| !AMINO_ACIDS.contains(&b)) || self.baseline.unlabeled_alphabet.is_empty() {
            return bad("baseline.unlabeled_alphabet must list standard residues".into());
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        let ev = &self.evolution;
        Objective::EvoPu {
            po_bounds: Bounds {
                lo: ev.po_bounds[0],
                hi: ev.po_bounds[1],
            },
            alpha_bounds: Bounds {
                lo: ev.alpha_bounds[0],
                hi: ev.alpha_bounds[1],
            },
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.training
        }
    }

    fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig {
            classifier: self.model.classifier,
            train: self.train_config(),
            folds: self.baseline.folds,
            spy_fraction: self.baseline.spy_fraction,
            k_min: self.baseline.k_min,
            k_max: self.baseline.k_max,
        }
    }
}

/// The config text as read plus its parsed form.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub raw: String,
    pub config: ExperimentConfig,
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, PipelineError> {
    let raw = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let config = ExperimentConfig::from_toml_str(&raw, base)?;
    Ok(LoadedConfig { raw, config })
}

/// Observed table, its translations and the optional test set.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub table: PrevalenceTable,
    pub observed_aa: BTreeSet<AaSeq>,
    pub test: Option<Vec<TestRecord>>,
}

pub fn ingest(data: &DataConfig, hosts: f64) -> Result<Ingested, PipelineError> {
    let wrap = |path: &Path| {
        let path = path.to_path_buf();
        move |source: IngestError| PipelineError::Ingest { path, source }
    };
    let observed = &data.observed;
    let file = fs::File::open(observed).map_err(|e| wrap(observed)(e.into()))?;
    let table = match data.format.unwrap_or_else(|| InputFormat::infer(observed)) {
        InputFormat::Csv => read_observed_csv(file, hosts),
        InputFormat::Fasta => read_observed_fasta(std::io::BufReader::new(file), hosts),
    }
    .map_err(wrap(observed))?;
    if table.is_empty() {
        return Err(wrap(observed)(IngestError::Empty(observed.display().to_string())));
    }
    let observed_aa: BTreeSet<AaSeq> = table.iter().map(|(y, _)| translate(y)).collect();
    if let Some(segs) = &data.motif_segments {
        let len = table.sequence_len().unwrap_or(0) / 3;
        if segs.iter().sum::<usize>() != len || segs.contains(&0) {
            return Err(PipelineError::Config(format!(
                "motif_segments {segs:?} do not sum to the motif length {len}"
            )));
        }
    }
    let test = match &data.test {
        Some(p) => {
            let file = fs::File::open(p).map_err(|e| wrap(p)(e.into()))?;
            let t = read_test_csv(file).map_err(wrap(p))?;
            if t.is_empty() {
                return Err(wrap(p)(IngestError::Empty(p.display().to_string())));
            }
            Some(t)
        }
        None => None,
    };
    Ok(Ingested {
        table,
        observed_aa,
        test,
    })
}

fn build_encoder(cfg: &ExperimentConfig) -> Result<Encoder, PipelineError> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())));
    match cfg.model.encoder {
        EncoderKind::Chem => match &cfg.model.chem_table {
            Some(p) => Ok(Encoder::Chem(
                PropertyTable::from_csv_str(&read(p)?).map_err(|e| PipelineError::Config(e.to_string()))?,
            )),
            None => Ok(Encoder::Chem(PropertyTable::default_chem())),
        },
        EncoderKind::OneHot => Ok(Encoder::OneHot),
        EncoderKind::External => {
            let p = cfg
                .model
                .external_features
                .as_ref()
                .ok_or_else(|| PipelineError::Config("missing external_features".into()))?;
            Ok(Encoder::External(
                ExternalFeatures::from_csv_str(&read(p)?).map_err(|e| PipelineError::Config(e.to_string()))?,
            ))
        }
    }
}

/// Splits concatenated motifs into their segments before encoding.
#[derive(Debug, Clone)]
struct MotifEncoder {
    encoder: Encoder,
    segments: Option<Vec<usize>>,
}

impl MotifEncoder {
    fn encode_all<'a, I: IntoIterator<Item = &'a AaSeq>>(&self, xs: I) -> Result<Matrix, PipelineError> {
        let Some(segs) = &self.segments else {
            return self.encoder.encode_all(xs).map_err(stage(Stage::Features));
        };
        let mut rows = Vec::new();
        for x in xs {
            let mut parts = Vec::with_capacity(segs.len());
            let mut start = 0;
            for &len in segs {
                let part = x
                    .residues()
                    .get(start..start + len)
                    .ok_or_else(|| stage(Stage::Features)(format!("{x} is shorter than the motif segments")))?;
                parts.push(AaSeq::parse(std::str::from_utf8(part).unwrap_or_default()).map_err(stage(Stage::Features))?);
                start += len;
            }
            rows.push(self.encoder.encode_motifs(&parts).map_err(stage(Stage::Features))?.into_inner());
        }
        let dim = rows.first().map_or(0, Vec::len);
        Ok(Matrix::from_rows(&rows, dim))
    }
}

/// Counts of the observed and candidate sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateCounts {
    pub observed_nuc: usize,
    pub observed_aa: usize,
    pub candidate_nuc: usize,
    pub candidate_aa: usize,
}

impl CandidateCounts {
    pub fn of(cs: &CandidateSet, table: &PrevalenceTable) -> Self {
        CandidateCounts {
            observed_nuc: table.len(),
            observed_aa: cs.observed_aa().len(),
            candidate_nuc: cs.nuc_candidates().len(),
            candidate_aa: cs.aa_candidates().len(),
        }
    }
}

pub fn generate_candidates(cfg: &ExperimentConfig, table: &PrevalenceTable) -> Result<CandidateSet, PipelineError> {
    let ev = &cfg.evolution;
    generate_neighborhood(table, &ev.rates()?, ev.epsilon, ev.alpha_gen).map_err(stage(Stage::Candidates))
}

/// Uniform random sequences of length `len` over `alphabet`.
pub fn uniform_unlabeled(alphabet: &[u8], len: usize, n: usize, seed: u64) -> Vec<AaSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r: Vec<u8> = (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect();
            AaSeq::parse(std::str::from_utf8(&r).unwrap_or_default()).expect("alphabet holds standard residues")
        })
        .collect()
}

/// A fitted scorer for any method.
#[derive(Debug, Clone)]
pub enum FittedModel {
    Parametric {
        state: ModelState,
        trace: Vec<TraceRow>,
    },
    Knn(KnnModel),
}

impl FittedModel {
    pub fn score(&self, x: &Matrix) -> Result<Vec<f64>, PipelineError> {
        match self {
            FittedModel::Parametric { state, .. } => state.classifier.predict_proba_batch(x, Mode::Eval).map_err(stage(Stage::Score)),
            FittedModel::Knn(m) => Ok(m.score_batch(x)),
        }
    }

    pub fn classifier(&self) -> Option<&Classifier> {
        match self {
            FittedModel::Parametric { state, .. } => Some(&state.classifier),
            FittedModel::Knn(_) => None,
        }
    }
}

/// Everything produced by fitting.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: FittedModel,
    pub candidates: CandidateSet,
    pub counts: CandidateCounts,
    pub notes: Vec<String>,
    encoder: MotifEncoder,
}

/// Generates candidates, encodes features and fits the configured method.
pub fn fit_experiment(cfg: &ExperimentConfig, data: &Ingested) -> Result<FitOutcome, PipelineError> {
    let cs = generate_candidates(cfg, &data.table)?;
    let counts = CandidateCounts::of(&cs, &data.table);
    let encoder = MotifEncoder {
        encoder: build_encoder(cfg)?,
        segments: cfg.data.motif_segments.clone(),
    };
    let mut notes = Vec::new();
    let dim_of = |m: &Matrix| m.cols();
    let model = match cfg.model.method {
        Method::EvoPu => {
            let features = encoder.encode_all(cs.observed_aa().iter().chain(cs.aa_candidates()))?;
            let rows = encoding_rows(&cs).map_err(stage(Stage::Features))?;
            let evo = EvoPuData::new(features, cs.observed_aa().len(), rows).map_err(stage(Stage::Features))?;
            let objective = cfg.objective();
            let classifier = Classifier::init(cfg.model.classifier, dim_of(&evo.features), cfg.seed).map_err(stage(Stage::Fit))?;
            let init = ModelState::new(&objective, classifier);
            let result = fit(&objective, &TrainingData::EvoPu(evo), init, &cfg.train_config()).map_err(stage(Stage::Fit))?;
            FittedModel::Parametric {
                state: result.state,
                trace: result.trace,
            }
        }
        method => {
            let positives = encoder.encode_all(cs.observed_aa().iter())?;
            let len = data.table.sequence_len().unwrap_or(0) / 3;
            let unl_seqs = uniform_unlabeled(cfg.baseline.unlabeled_alphabet.as_bytes(), len, cs.aa_candidates().len().max(1), cfg.seed);
            let unlabeled = encoder.encode_all(unl_seqs.iter())?;
            let bcfg = cfg.baseline_config();
            match method {
                Method::Classical => {
                    let data = LabeledData::from_parts(&positives, &unlabeled);
                    let classifier = Classifier::init(cfg.model.classifier, positives.cols(), cfg.seed).map_err(stage(Stage::Fit))?;
                    let init = ModelState::new(&Objective::Classical, classifier);
                    let result = fit(&Objective::Classical, &TrainingData::Labeled(data), init, &cfg.train_config())
                        .map_err(stage(Stage::Fit))?;
                    FittedModel::Parametric {
                        state: result.state,
                        trace: result.trace,
                    }
                }
                Method::ProteinPu => {
                    let (sel, classifier) = proteinpu_select(&positives, &unlabeled, &bcfg, cfg.seed).map_err(stage(Stage::Fit))?;
                    notes.push(format!("proteinpu selected pi={} q={}", format_float(sel.pi), format_float(sel.q)));
                    FittedModel::Parametric {
                        state: ModelState {
                            classifier,
                            nuisance: None,
                        },
                        trace: Vec::new(),
                    }
                }
                Method::TwoStep => {
                    let r = two_step_fit(&positives, &unlabeled, &bcfg, cfg.seed).map_err(stage(Stage::Fit))?;
                    if r.fell_back {
                        notes.push("twostep found no reliable negatives; all unlabeled rows used as negatives".into());
                    }
                    FittedModel::Parametric {
                        state: ModelState {
                            classifier: r.classifier,
                            nuisance: None,
                        },
                        trace: Vec::new(),
                    }
                }
                Method::Knn => {
                    let (m, _) = knn_select_fit(&positives, &unlabeled, &bcfg, cfg.seed).map_err(stage(Stage::Fit))?;
                    notes.push(format!("knn selected k={}", m.k));
                    FittedModel::Knn(m)
                }
                Method::EvoPu => unreachable!(),
            }
        }
    };
    Ok(FitOutcome {
        model,
        candidates: cs,
        counts,
        notes,
        encoder,
    })
}

/// AUC, AP and, when frequencies are given, Spearman over those rows.
pub fn score_test(model: &FittedModel, encoder_features: &Matrix, test: &[TestRecord]) -> Result<(f64, f64, Option<f64>), PipelineError> {
    let scores = model.score(encoder_features)?;
    let labels: Vec<bool> = test.iter().map(|t| t.label).collect();
    let a = auc(&scores, &labels).map_err(stage(Stage::Metrics))?;
    let ap = average_precision(&scores, &labels).map_err(stage(Stage::Metrics))?;
    let (s, f): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .zip(test)
        .filter_map(|(&s, t)| t.frequency.map(|f| (s, f)))
        .unzip();
    let rho = if f.len() >= 2 {
        Some(spearman_rho(&s, &f).map_err(stage(Stage::Metrics))?)
    } else {
        None
    };
    Ok((a, ap, rho))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    /// Config file text exactly as read.
    pub config_text: String,
    /// The config with every default filled in.
    pub resolved_config: ExperimentConfig,
    /// Set for sweep members: parameter name and value.
    pub override_value: Option<(String, String)>,
    pub counts: CandidateCounts,
    pub fitted_po: Option<f64>,
    pub fitted_alpha: Option<f64>,
    pub metrics: MetricsRow,
    pub wall_time_secs: f64,
    pub seed: u64,
    pub notes: Vec<String>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let err = |source| PipelineError::Output {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(err)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(err)?;
    fs::rename(&tmp, path).map_err(err)
}

fn csv_bytes<F>(write: F) -> Result<Vec<u8>, PipelineError>
where
    F: FnOnce(&mut Vec<u8>) -> Result<(), String>,
{
    let mut buf = Vec::new();
    write(&mut buf).map_err(|m| PipelineError::Output {
        path: PathBuf::from("<buffer>"),
        source: std::io::Error::other(m),
    })?;
    Ok(buf)
}

/// Writes `candidates.csv`.
pub fn persist_candidates(cs: &CandidateSet, cfg: &ExperimentConfig, dir: &Path) -> Result<(), PipelineError> {
    let bytes = csv_bytes(|b| cs.write_csv(b, cfg.data.alphabet).map_err(|e| e.to_string()))?;
    write_atomic(&dir.join("candidates.csv"), &bytes)
}

/// Writes `model.json` and `trace.csv` for parametric fits.
pub fn persist_model(model: &FittedModel, dir: &Path) -> Result<(), PipelineError> {
    if let FittedModel::Parametric { state, trace } = model {
        write_atomic(&dir.join("model.json"), state.classifier.to_checkpoint().as_bytes())?;
        if let Some(n) = state.nuisance {
            let text = format!("p_o,alpha\n{},{}\n", format_float(n.po()), format_float(n.alpha()));
            write_atomic(&dir.join("nuisance.csv"), text.as_bytes())?;
        }
        if !trace.is_empty() {
            let bytes = csv_bytes(|b| write_trace_csv(trace, b).map_err(|e| e.to_string()))?;
            write_atomic(&dir.join("trace.csv"), &bytes)?;
        }
    }
    Ok(())
}

fn persist_scores(test: &[TestRecord], scores: &[f64], dir: &Path) -> Result<(), PipelineError> {
    let mut text = String::from("aa_sequence,label,score\n");
    for (t, s) in test.iter().zip(scores) {
        text.push_str(&format!("{},{},{}\n", t.seq, u8::from(t.label), format_float(*s)));
    }
    write_atomic(&dir.join("scores.csv"), text.as_bytes())
}

fn test_features(out: &FitOutcome, test: &[TestRecord]) -> Result<Matrix, PipelineError> {
    out.encoder.encode_all(test.iter().map(|t| &t.seq))
}

/// Ingest, fit, score and persist one run.
pub fn run_experiment(loaded: &LoadedConfig) -> Result<RunRecord, PipelineError> {
    run_with_override(loaded, &loaded.config, None)
}

fn run_with_override(loaded: &LoadedConfig, cfg: &ExperimentConfig, override_value: Option<(String, String)>) -> Result<RunRecord, PipelineError> {
    let start = Instant::now();
    let data = ingest(&cfg.data, cfg.evolution.hosts)?;
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| PipelineError::Config("run_experiment needs data.test".into()))?;
    let out = fit_experiment(cfg, &data)?;
    let x = test_features(&out, test)?;
    let scores = out.model.score(&x)?;
    let (auc_v, ap, rho) = score_test(&out.model, &x, test)?;
    let metrics = MetricsRow {
        method: cfg.model.method.name().to_string(),
        classifier: match cfg.model.classifier {
            ClassifierKind::Lr => "lr".into(),
            ClassifierKind::Wd => "wd".into(),
        },
        seed: cfg.seed,
        auc: auc_v,
        ap,
        spearman: rho,
    };
    for n in &out.notes {
        log::info!("{n}");
    }
    let dir = &cfg.output_dir;
    persist_candidates(&out.candidates, cfg, dir)?;
    persist_model(&out.model, dir)?;
    persist_scores(test, &scores, dir)?;
    let metrics_bytes = csv_bytes(|b| write_metrics_csv(std::slice::from_ref(&metrics), b).map_err(|e| e.to_string()))?;
    write_atomic(&dir.join("metrics.csv"), &metrics_bytes)?;
    let nuisance = match &out.model {
        FittedModel::Parametric { state, .. } => state.nuisance,
        FittedModel::Knn(_) => None,
    };
    let record = RunRecord {
        config_text: loaded.raw.clone(),
        resolved_config: cfg.clone(),
        override_value,
        counts: out.counts,
        fitted_po: nuisance.map(|n| n.po()),
        fitted_alpha: nuisance.map(|n| n.alpha()),
        metrics,
        wall_time_secs: start.elapsed().as_secs_f64(),
        seed: cfg.seed,
        notes: out.notes,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| PipelineError::Config(e.to_string()))?;
    write_atomic(&dir.join("run_record.json"), json.as_bytes())?;
    Ok(record)
}

/// Writes `candidates.csv` and a `counts.json` summary.
pub fn run_generate(cfg: &ExperimentConfig) -> Result<CandidateCounts, PipelineError> {
    let data = ingest(&cfg.data, cfg.evolution.hosts)?;
    let cs = generate_candidates(cfg, &data.table)?;
    let counts = CandidateCounts::of(&cs, &data.table);
    persist_candidates(&cs, cfg, &cfg.output_dir)?;
    let json = serde_json::to_string_pretty(&counts).map_err(|e| PipelineError::Config(e.to_string()))?;
    write_atomic(&cfg.output_dir.join("counts.json"), json.as_bytes())?;
    Ok(counts)
}

/// Fits and writes the model checkpoint and trace without scoring.
pub fn run_train(cfg: &ExperimentConfig) -> Result<FitOutcome, PipelineError> {
    let data = ingest(&cfg.data, cfg.evolution.hosts)?;
    let out = fit_experiment(cfg, &data)?;
    if matches!(out.model, FittedModel::Knn(_)) {
        return Err(PipelineError::Config("knn has no checkpoint; run eval instead".into()));
    }
    persist_candidates(&out.candidates, cfg, &cfg.output_dir)?;
    persist_model(&out.model, &cfg.output_dir)?;
    Ok(out)
}

/// Scores the test set with a saved classifier checkpoint.
pub fn run_eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsRow, PipelineError> {
    let text = fs::read_to_string(checkpoint).map_err(|e| PipelineError::Config(format!("{}: {e}", checkpoint.display())))?;
    let classifier = Classifier::from_checkpoint(&text).map_err(stage(Stage::Score))?;
    let data = ingest(&cfg.data, cfg.evolution.hosts)?;
    let test = data
        .test
        .as_ref()
        .ok_or_else(|| PipelineError::Config("eval needs data.test".into()))?;
    let encoder = MotifEncoder {
        encoder: build_encoder(cfg)?,
        segments: cfg.data.motif_segments.clone(),
    };
    let x = encoder.encode_all(test.iter().map(|t| &t.seq))?;
    let model = FittedModel::Parametric {
        state: ModelState {
            classifier,
            nuisance: None,
        },
        trace: Vec::new(),
    };
    let (auc_v, ap, rho) = score_test(&model, &x, test)?;
    let row = MetricsRow {
        method: cfg.model.method.name().to_string(),
        classifier: match cfg.model.classifier {
            ClassifierKind::Lr => "lr".into(),
            ClassifierKind::Wd => "wd".into(),
        },
        seed: cfg.seed,
        auc: auc_v,
        ap,
        spearman: rho,
    };
    let bytes = csv_bytes(|b| write_metrics_csv(std::slice::from_ref(&row), b).map_err(|e| e.to_string()))?;
    write_atomic(&cfg.output_dir.join("metrics.csv"), &bytes)?;
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Lambda,
    Hosts,
    Epsilon,
    Encoder,
}

impl std::str::FromStr for SweepParameter {
    type Err = PipelineError;
    fn from_str(s: &str) -> Result<Self, PipelineError> {
        match s {
            "lambda" => Ok(SweepParameter::Lambda),
            "T" | "hosts" => Ok(SweepParameter::Hosts),
            "epsilon" => Ok(SweepParameter::Epsilon),
            "encoder" => Ok(SweepParameter::Encoder),
            other => Err(PipelineError::InvalidSweepParameter(other.to_string())),
        }
    }
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Lambda => "lambda",
            SweepParameter::Hosts => "T",
            SweepParameter::Epsilon => "epsilon",
            SweepParameter::Encoder => "encoder",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: &str) -> Result<(), PipelineError> {
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| PipelineError::Config(format!("sweep value {value:?} is not a number")))
        };
        match self {
            SweepParameter::Lambda => cfg.training.lambda = num()?,
            SweepParameter::Hosts => cfg.evolution.hosts = num()?,
            SweepParameter::Epsilon => cfg.evolution.epsilon = num()?,
            SweepParameter::Encoder => cfg.model.encoder = value.parse().map_err(PipelineError::Config)?,
        }
        cfg.validate()
    }
}

/// One run per value under `output_dir/<param>_<index>`, plus a summary
/// `sweep.csv` in `output_dir`.
pub fn run_sweep(loaded: &LoadedConfig, param: SweepParameter, values: &[String]) -> Result<Vec<RunRecord>, PipelineError> {
    if values.is_empty() {
        return Err(PipelineError::InvalidSweepParameter(param.name().to_string()));
    }
    let mut records = Vec::with_capacity(values.len());
    let mut summary = String::from("parameter,value,candidate_nuc,candidate_aa,auc,ap,spearman\n");
    for (i, value) in values.iter().enumerate() {
        let mut cfg = loaded.config.clone();
        param.apply(&mut cfg, value)?;
        cfg.output_dir = loaded.config.output_dir.join(format!("{}_{i}", param.name()));
        let rec = run_with_override(loaded, &cfg, Some((param.name().to_string(), value.clone())))?;
        summary.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            param.name(),
            value,
            rec.counts.candidate_nuc,
            rec.counts.candidate_aa,
            format_float(rec.metrics.auc),
            format_float(rec.metrics.ap),
            rec.metrics.spearman.map(format_float).unwrap_or_default()
        ));
        records.push(rec);
    }
    write_atomic(&loaded.config.output_dir.join("sweep.csv"), summary.as_bytes())?;
    Ok(records)
}

/// Simulation plus test-set sampling, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationFile {
    pub simulation: SimConfig,
    #[serde(default)]
    pub dataset: DatasetConfig,
}

/// Runs the simulator and writes `observed.csv`, `test.csv` and
/// `labels.csv` into `dir`.
pub fn run_simulation(text: &str, seed: Option<u64>, dir: &Path) -> Result<usize, PipelineError> {
    let mut file: SimulationFile = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
    if let Some(s) = seed {
        file.simulation.seed = s;
        file.dataset.seed = s;
    }
    let out = simulate(&file.simulation).map_err(stage(Stage::Simulate))?;
    let ds = make_pu_dataset(&out, &file.dataset).map_err(stage(Stage::Simulate))?;
    let mut obs = Vec::new();
    write_observed_csv(&ds.table, &mut obs, Alphabet::Rna).map_err(stage(Stage::Simulate))?;
    write_atomic(&dir.join("observed.csv"), &obs)?;
    let mut test = Vec::new();
    write_test_csv(&ds.test, &mut test).map_err(stage(Stage::Simulate))?;
    write_atomic(&dir.join("test.csv"), &test)?;
    let mut labels = String::from("aa_sequence,label\n");
    for (x, l) in &out.labels {
        labels.push_str(&format!("{x},{}\n", u8::from(*l)));
    }
    write_atomic(&dir.join("labels.csv"), labels.as_bytes())?;
    Ok(ds.table.len())
}
