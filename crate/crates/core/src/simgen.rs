//! Forward simulator of mutation, selection and surveillance.
//!
//! Each generation, every sequence not yet in the population is exposed to
//! all extant Hamming-1 ancestors and emerges with probability
//! `1 - prod (1 - P alpha)^c`. Functional emergents join the population with
//! a fixed count and are surveilled once, with probability `p_o`. Seeds are
//! always observed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evomodel::{EvoError, MutationRates, PrevalenceTable};
use crate::features::{encode_chem, FeatureError, PropertyTable};
use crate::seqcore::{single_site_mutants, to_valid, translate, AaSeq, Alphabet, NucSeq, SeqError, AMINO_ACIDS};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("reachable universe exceeds the cap of {cap} sequences")]
    UniverseCapExceeded { cap: usize },
    #[error("no sequence was observed")]
    EmptyObservation,
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("seed {0} is not functional under the ground truth")]
    NonFunctionalSeed(String),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Evo(#[from] EvoError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hard functionality filter on amino-acid sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GroundTruth {
    /// Functional when `w . chem(x) + b > 0` over normalized CHEM features.
    Linear { weights: Vec<f64>, bias: f64 },
    /// Functional exactly when listed.
    Lookup { functional: BTreeSet<String> },
}

impl GroundTruth {
    pub fn is_functional(&self, x: &AaSeq, chem: &PropertyTable) -> Result<bool, SimError> {
        match self {
            GroundTruth::Linear { weights, bias } => {
                let f = encode_chem(x, chem)?;
                if f.dim() != weights.len() {
                    return Err(SimError::InvalidConfig(format!(
                        "ground-truth weights have length {}, features {}",
                        weights.len(),
                        f.dim()
                    )));
                }
                let s: f64 = f.as_slice().iter().zip(weights).map(|(a, b)| a * b).sum();
                Ok(s + bias > 0.0)
            }
            GroundTruth::Lookup { functional } => Ok(functional.contains(x.as_str())),
        }
    }
}

/// A founding nucleotide sequence and its population count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub sequence: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Residues spanning the labeled universe used for evaluation.
    pub alphabet: String,
    pub motif_len: usize,
    pub generations: usize,
    pub seeds: Vec<SeedSpec>,
    pub po: f64,
    pub alpha: f64,
    pub rates: MutationRates,
    pub ground_truth: GroundTruth,
    /// Population count given to every newly emerged functional sequence.
    pub emerged_count: u64,
    pub seed: u64,
    /// Upper bound on both the labeled universe and the population size.
    pub universe_cap: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmergenceRecord {
    pub generation: usize,
    pub functional: bool,
    pub observed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub extant: usize,
    pub emerged_functional: usize,
    pub emerged_nonfunctional: usize,
    pub newly_observed: usize,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub observed: PrevalenceTable,
    /// Ground-truth labels over the alphabet universe and every emerged
    /// sequence.
    pub labels: BTreeMap<AaSeq, bool>,
    /// Every emergence event, keyed by nucleotide sequence; a sequence that
    /// fails selection can emerge again in a later generation and keeps its
    /// first record.
    pub emerged: BTreeMap<NucSeq, EmergenceRecord>,
    pub population: BTreeMap<NucSeq, u64>,
    pub log: Vec<GenerationLog>,
    pub alphabet: Vec<u8>,
}

fn parse_alphabet(alphabet: &str) -> Result<Vec<u8>, SimError> {
    let mut res: Vec<u8> = alphabet.bytes().map(|b| b.to_ascii_uppercase()).collect();
    res.sort_unstable();
    res.dedup();
    if res.is_empty() || res.iter().any(|r| !AMINO_ACIDS.contains(r)) || res.len() != alphabet.len() {
        return Err(SimError::InvalidConfig(format!("bad residue alphabet {alphabet:?}")));
    }
    Ok(res)
}

/// All sequences of length `len` over `alphabet`, in lexicographic order.
pub fn enumerate_universe(alphabet: &[u8], len: usize, cap: usize) -> Result<Vec<AaSeq>, SimError> {
    let size = (alphabet.len() as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if size > cap as u128 {
        return Err(SimError::UniverseCapExceeded { cap });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut idx = vec![0usize; len];
    loop {
        out.push(AaSeq::from_residues_unchecked(idx.iter().map(|&i| alphabet[i]).collect()));
        let mut pos = len;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < alphabet.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<Vec<u8>, SimError> {
        let alphabet = parse_alphabet(&self.alphabet)?;
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.motif_len == 0 || self.generations == 0 {
            return bad("motif_len and generations must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.po) || !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("po must lie in [0, 1] and alpha in (0, 1]");
        }
        if self.seeds.is_empty() || self.seeds.iter().any(|s| s.count == 0) {
            return bad("at least one seed with a positive count is required");
        }
        self.rates.validate()?;
        Ok(alphabet)
    }
}

struct Labeler<'a> {
    truth: &'a GroundTruth,
    chem: PropertyTable,
    labels: BTreeMap<AaSeq, bool>,
}

impl Labeler<'_> {
    fn label(&mut self, x: AaSeq) -> Result<bool, SimError> {
        if let Some(&l) = self.labels.get(&x) {
            return Ok(l);
        }
        let l = self.truth.is_functional(&x, &self.chem)?;
        self.labels.insert(x, l);
        Ok(l)
    }
}

/// Runs the simulation; deterministic under `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    let alphabet = cfg.validate()?;
    let mut labeler = Labeler {
        truth: &cfg.ground_truth,
        chem: PropertyTable::default_chem(),
        labels: BTreeMap::new(),
    };
    for x in enumerate_universe(&alphabet, cfg.motif_len, cfg.universe_cap)? {
        labeler.label(x)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut population: BTreeMap<NucSeq, u64> = BTreeMap::new();
    let mut observed: BTreeMap<NucSeq, u64> = BTreeMap::new();
    for SeedSpec { sequence: s, count } in &cfg.seeds {
        let y = NucSeq::parse(s)?;
        if y.codon_count() != cfg.motif_len {
            return Err(SimError::InvalidConfig(format!("seed {s} does not encode {} residues", cfg.motif_len)));
        }
        if !labeler.label(translate(&y))? {
            return Err(SimError::NonFunctionalSeed(s.clone()));
        }
        *population.entry(y.clone()).or_insert(0) += count;
        *observed.entry(y).or_insert(0) += count;
    }

    let mut emerged = BTreeMap::new();
    let mut log = Vec::with_capacity(cfg.generations);
    for generation in 1..=cfg.generations {
        // log survival of every candidate target against all extant ancestors
        let mut survival: BTreeMap<NucSeq, f64> = BTreeMap::new();
        for (ancestor, &count) in &population {
            for (pos, base, bases) in single_site_mutants(ancestor.bases()) {
                let Some(target) = to_valid(bases) else { continue };
                if population.contains_key(&target) {
                    continue;
                }
                let p = cfg.rates.site_rate(ancestor.bases()[pos], base);
                *survival.entry(target).or_insert(0.0) += count as f64 * (-p * cfg.alpha).ln_1p();
            }
        }
        let mut entry = GenerationLog {
            generation,
            extant: population.len(),
            ..GenerationLog::default()
        };
        let mut joined = Vec::new();
        for (target, log_survival) in survival {
            let prob = -log_survival.exp_m1();
            if rng.random::<f64>() >= prob {
                continue;
            }
            let functional = labeler.label(translate(&target))?;
            let mut seen = false;
            if functional {
                seen = rng.random::<f64>() < cfg.po;
                entry.emerged_functional += 1;
                if seen {
                    entry.newly_observed += 1;
                }
                joined.push((target.clone(), seen));
            } else {
                entry.emerged_nonfunctional += 1;
            }
            emerged.entry(target).or_insert(EmergenceRecord {
                generation,
                functional,
                observed: seen,
            });
        }
        for (y, seen) in joined {
            if seen {
                observed.insert(y.clone(), cfg.emerged_count);
            }
            population.insert(y, cfg.emerged_count);
        }
        if population.len() > cfg.universe_cap {
            return Err(SimError::UniverseCapExceeded { cap: cfg.universe_cap });
        }
        log.push(entry);
    }

    let total: u64 = observed.values().sum();
    let table = PrevalenceTable::from_counts(observed, total as f64)?;
    Ok(SimOutput {
        observed: table,
        labels: labeler.labels,
        emerged,
        population,
        log,
        alphabet,
    })
}

/// Test-set sampling for [`make_pu_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub test_size: usize,
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            test_size: 200,
            positive_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PuDataset {
    pub table: PrevalenceTable,
    pub observed_aa: BTreeSet<AaSeq>,
    pub test: Vec<(AaSeq, bool)>,
}

/// Packages the observations and samples a labeled test set from the
/// alphabet universe, excluding every observed amino-acid sequence. A class
/// with too few members contributes all of them.
pub fn make_pu_dataset(out: &SimOutput, cfg: &DatasetConfig) -> Result<PuDataset, SimError> {
    if out.observed.is_empty() {
        return Err(SimError::EmptyObservation);
    }
    if !(0.0..=1.0).contains(&cfg.positive_fraction) {
        return Err(SimError::InvalidConfig("positive_fraction must lie in [0, 1]".into()));
    }
    let observed_aa: BTreeSet<AaSeq> = out.observed.iter().map(|(y, _)| translate(y)).collect();
    let in_alphabet = |x: &AaSeq| x.residues().iter().all(|r| out.alphabet.contains(r));
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (x, &l) in &out.labels {
        if observed_aa.contains(x) || !in_alphabet(x) {
            continue;
        }
        if l {
            pos.push(x.clone());
        } else {
            neg.push(x.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n_pos = ((cfg.test_size as f64 * cfg.positive_fraction).round() as usize).min(pos.len());
    let n_neg = (cfg.test_size - n_pos.min(cfg.test_size)).min(neg.len());
    let mut test: Vec<(AaSeq, bool)> = pos
        .into_iter()
        .take(n_pos)
        .map(|x| (x, true))
        .chain(neg.into_iter().take(n_neg).map(|x| (x, false)))
        .collect();
    test.sort();
    Ok(PuDataset {
        table: out.observed.clone(),
        observed_aa,
        test,
    })
}

/// `sequence,count` rows in table order.
pub fn write_observed_csv<W: Write>(table: &PrevalenceTable, out: W, alphabet: Alphabet) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sequence", "count"]).map_err(csv_io)?;
    for (y, c) in table.iter() {
        w.write_record([y.to_string_in(alphabet), c.to_string()]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// `aa_sequence,label` rows with labels written as 0/1.
pub fn write_test_csv<W: Write>(test: &[(AaSeq, bool)], out: W) -> Result<(), SimError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["aa_sequence", "label"]).map_err(csv_io)?;
    for (x, l) in test {
        w.write_record([x.as_str(), if *l { "1" } else { "0" }]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> SimError {
    SimError::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lookup_all(alphabet: &[u8], len: usize) -> GroundTruth {
        GroundTruth::Lookup {
            functional: enumerate_universe(alphabet, len, 1 << 20)
                .unwrap()
                .into_iter()
                .map(|x| x.as_str().to_string())
                .collect(),
        }
    }

    fn seed(s: &str, count: u64) -> SeedSpec {
        SeedSpec {
            sequence: s.into(),
            count,
        }
    }

    fn base_cfg() -> SimConfig {
        SimConfig {
            alphabet: "ADGV".into(),
            motif_len: 2,
            generations: 2,
            seeds: vec![seed("GCUGGU", 1_000_000)],
            po: 0.5,
            alpha: 0.5,
            rates: MutationRates::default(),
            ground_truth: GroundTruth::Linear {
                weights: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
                bias: 0.5,
            },
            emerged_count: 100_000,
            seed: 9,
            universe_cap: 100_000,
        }
    }

    #[test]
    fn universe_enumeration() {
        let u = enumerate_universe(b"AC", 3, 100).unwrap();
        assert_eq!(u.len(), 8);
        assert_eq!(u[0].as_str(), "AAA");
        assert_eq!(u[7].as_str(), "CCC");
        assert!(matches!(enumerate_universe(b"AC", 10, 100), Err(SimError::UniverseCapExceeded { .. })));
    }

    #[test]
    fn full_observability_observes_every_emergent() {
        let mut cfg = base_cfg();
        cfg.po = 1.0;
        cfg.ground_truth = lookup_all(AMINO_ACIDS, 2);
        cfg.universe_cap = 1_000_000;
        let out = simulate(&cfg).unwrap();
        assert!(!out.emerged.is_empty());
        for (y, r) in &out.emerged {
            assert!(r.functional && r.observed);
            assert!(out.observed.contains(y));
        }
    }

    #[test]
    fn zero_observability_keeps_only_seeds() {
        let mut cfg = base_cfg();
        cfg.po = 0.0;
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.observed.len(), 1);
        assert!(out.observed.contains(&NucSeq::parse("GCUGGU").unwrap()));
        assert!(out.population.len() > 1);
    }

    #[test]
    fn observed_sequences_are_functional_and_reachable() {
        let out = simulate(&base_cfg()).unwrap();
        for (y, _) in out.observed.iter() {
            assert!(out.labels[&translate(y)]);
        }
        for (y, r) in &out.emerged {
            assert_eq!(r.functional, out.labels[&translate(y)]);
            assert!(out.population.contains_key(y) == r.functional);
        }
        assert_eq!(out.log.len(), 2);
        let again = simulate(&base_cfg()).unwrap();
        assert_eq!(again.observed, out.observed);
    }

    #[test]
    fn nonfunctional_seed_is_rejected() {
        let mut cfg = base_cfg();
        cfg.ground_truth = GroundTruth::Lookup {
            functional: BTreeSet::new(),
        };
        assert!(matches!(simulate(&cfg), Err(SimError::NonFunctionalSeed(_))));
    }

    #[test]
    fn dataset_is_disjoint_and_balanced() {
        let mut cfg = base_cfg();
        cfg.motif_len = 3;
        cfg.seeds = vec![seed("GCUGGUGUU", 1_000_000)];
        cfg.ground_truth = GroundTruth::Linear {
            weights: vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            bias: 0.0,
        };
        let out = simulate(&cfg).unwrap();
        let ds = make_pu_dataset(
            &out,
            &DatasetConfig {
                test_size: 20,
                positive_fraction: 0.5,
                seed: 1,
            },
        )
        .unwrap();
        assert!(ds.test.iter().all(|(x, _)| !ds.observed_aa.contains(x)));
        assert!(ds.test.iter().all(|(x, l)| out.labels[x] == *l));
        let pos = ds.test.iter().filter(|t| t.1).count();
        assert_eq!(ds.test.len(), 20);
        assert_eq!(pos, 10);
    }

    #[test]
    fn csv_writers() {
        let out = simulate(&base_cfg()).unwrap();
        let mut buf = Vec::new();
        write_observed_csv(&out.observed, &mut buf, Alphabet::Rna).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("sequence,count\n"));
        assert_eq!(text.lines().count(), out.observed.len() + 1);
        let mut buf = Vec::new();
        write_test_csv(&[(AaSeq::parse("AD").unwrap(), true)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "aa_sequence,label\nAD,1\n");
    }
}
