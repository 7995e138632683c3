//! Sequence encoders: z-normalized physicochemical properties (CHEM),
//! one-hot, or externally supplied vectors.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::seqcore::{AaSeq, AMINO_ACIDS};

const DEFAULT_PROPERTY_TABLE: &str = include_str!("../data/chem_properties.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("residue {0:?} is not in the property table")]
    UnknownResidue(char),
    #[error("property table: {0}")]
    InvalidTable(String),
    #[error("no external feature vector for sequence {0}")]
    MissingExternal(String),
    #[error("feature dimension {found} does not match expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

fn residue_slot(r: u8) -> Option<usize> {
    AMINO_ACIDS.iter().position(|&a| a == r)
}

/// Per-residue property values, z-normalized over the 20 residues.
#[derive(Debug, Clone, PartialEq)]
pub struct PropertyTable {
    names: Vec<String>,
    raw: Vec<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
    normalized: Vec<Vec<f64>>,
}

impl PropertyTable {
    /// Parses `residue,prop1,...,propK` with a header row naming the
    /// properties. Every one of the 20 residues must appear exactly once and
    /// every property must vary across residues.
    pub fn from_csv_str(text: &str) -> Result<Self, FeatureError> {
        let bad = |m: String| FeatureError::InvalidTable(m);
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        if header.len() < 2 {
            return Err(bad("expected a residue column and at least one property".into()));
        }
        let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let k = names.len();
        let mut raw: Vec<Option<Vec<f64>>> = vec![None; AMINO_ACIDS.len()];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
            if rec.len() != k + 1 {
                return Err(bad(format!("row {}: expected {} fields", i + 2, k + 1)));
            }
            let r = rec[0].as_bytes();
            let slot = match r {
                [b] => residue_slot(b.to_ascii_uppercase()),
                _ => None,
            }
            .ok_or_else(|| bad(format!("row {}: unknown residue {:?}", i + 2, &rec[0])))?;
            if raw[slot].is_some() {
                return Err(bad(format!("row {}: duplicate residue {}", i + 2, &rec[0])));
            }
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or_else(|| bad(format!("row {}: non-numeric value", i + 2)))?;
            raw[slot] = Some(values);
        }
        let raw = raw
            .into_iter()
            .enumerate()
            .map(|(i, v)| v.ok_or_else(|| bad(format!("missing residue {}", AMINO_ACIDS[i] as char))))
            .collect::<Result<Vec<_>, _>>()?;
        let n = raw.len() as f64;
        let mut mean = vec![0.0; k];
        let mut std = vec![0.0; k];
        for j in 0..k {
            mean[j] = raw.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = raw.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = var.sqrt();
            if !(std[j] > 0.0) {
                return Err(bad(format!("property {} is constant", names[j])));
            }
        }
        let normalized = raw
            .iter()
            .map(|r| (0..k).map(|j| (r[j] - mean[j]) / std[j]).collect())
            .collect();
        Ok(PropertyTable {
            names,
            raw,
            mean,
            std,
            normalized,
        })
    }

    /// Hydropathy, side-chain volume and isoelectric point.
    pub fn default_chem() -> Self {
        PropertyTable::from_csv_str(DEFAULT_PROPERTY_TABLE).expect("shipped property table is valid")
    }

    pub fn property_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_properties(&self) -> usize {
        self.names.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn raw(&self, residue: u8) -> Option<&[f64]> {
        residue_slot(residue).map(|i| self.raw[i].as_slice())
    }

    pub fn normalized(&self, residue: u8) -> Option<&[f64]> {
        residue_slot(residue).map(|i| self.normalized[i].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Position-major concatenation of normalized property values; `K * L`
/// coordinates.
pub fn encode_chem(x: &AaSeq, table: &PropertyTable) -> Result<FeatureVector, FeatureError> {
    let mut v = Vec::with_capacity(x.len() * table.num_properties());
    for &r in x.residues() {
        let props = table.normalized(r).ok_or(FeatureError::UnknownResidue(r as char))?;
        v.extend_from_slice(props);
    }
    Ok(FeatureVector(v))
}

/// `20 * L` indicator coordinates, residues in [`AMINO_ACIDS`] order.
pub fn encode_onehot(x: &AaSeq) -> FeatureVector {
    let mut v = vec![0.0; x.len() * AMINO_ACIDS.len()];
    for (pos, &r) in x.residues().iter().enumerate() {
        let slot = residue_slot(r).expect("AaSeq residues are valid");
        v[pos * AMINO_ACIDS.len() + slot] = 1.0;
    }
    FeatureVector(v)
}

/// Precomputed vectors keyed by amino-acid sequence, read from CSV
/// `aa_sequence,f1,...,fD`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalFeatures {
    dim: usize,
    vectors: BTreeMap<AaSeq, Vec<f64>>,
}

impl ExternalFeatures {
    pub fn from_csv_str(text: &str) -> Result<Self, FeatureError> {
        let bad = |m: String| FeatureError::InvalidTable(m);
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let dim = rdr.headers().map_err(|e| bad(e.to_string()))?.len().saturating_sub(1);
        if dim == 0 {
            return Err(bad("external features need at least one value column".into()));
        }
        let mut vectors = BTreeMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
            let x = AaSeq::parse(&rec[0]).map_err(|e| bad(format!("row {}: {e}", i + 2)))?;
            let v = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().ok().filter(|f| f.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| bad(format!("row {}: non-numeric value", i + 2)))?;
            if v.len() != dim {
                return Err(FeatureError::DimensionMismatch { expected: dim, found: v.len() });
            }
            vectors.insert(x, v);
        }
        Ok(ExternalFeatures { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    Chem(PropertyTable),
    OneHot,
    External(ExternalFeatures),
}

impl Encoder {
    /// Output dimension for sequences of length `len`.
    pub fn dim(&self, len: usize) -> usize {
        match self {
            Encoder::Chem(t) => t.num_properties() * len,
            Encoder::OneHot => AMINO_ACIDS.len() * len,
            Encoder::External(e) => e.dim,
        }
    }

    pub fn encode(&self, x: &AaSeq) -> Result<FeatureVector, FeatureError> {
        match self {
            Encoder::Chem(t) => encode_chem(x, t),
            Encoder::OneHot => Ok(encode_onehot(x)),
            Encoder::External(e) => e
                .vectors
                .get(x)
                .map(|v| FeatureVector(v.clone()))
                .ok_or_else(|| FeatureError::MissingExternal(x.to_string())),
        }
    }

    /// Encodes motif segments separately and concatenates them in the given
    /// order.
    pub fn encode_motifs(&self, segments: &[AaSeq]) -> Result<FeatureVector, FeatureError> {
        let mut v = Vec::new();
        for s in segments {
            v.extend(self.encode(s)?.0);
        }
        Ok(FeatureVector(v))
    }

    /// Encodes a batch into a matrix with one row per sequence; all sequences
    /// must share a length.
    pub fn encode_all<'a, I>(&self, xs: I) -> Result<Matrix, FeatureError>
    where
        I: IntoIterator<Item = &'a AaSeq>,
    {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut dim = None;
        for x in xs {
            let v = self.encode(x)?.0;
            match dim {
                None => dim = Some(v.len()),
                Some(d) if d != v.len() => return Err(FeatureError::DimensionMismatch { expected: d, found: v.len() }),
                _ => {}
            }
            rows.push(v);
        }
        Ok(Matrix::from_rows(&rows, dim.unwrap_or(0)))
    }
}
