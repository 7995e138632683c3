//! Unobserved candidate sequences one point mutation away from the observed
//! set, filtered by emergence probability, and the restricted encoding index
//! used by the approximate likelihood.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use thiserror::Error;

use crate::evomodel::{emergence_intensity, emergence_prob_approx, EmergenceIntensity, MutationRates, PrevalenceTable};
use crate::seqcore::{single_site_mutants, to_valid, translate, AaSeq, Alphabet, NucSeq};

/// `1 - exp(-10)`: keep candidates whose emergence probability at
/// `alpha = 1` exceeds this.
pub fn default_epsilon() -> f64 {
    -(-10.0f64).exp_m1()
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CandidateError {
    #[error("observed nucleotide set is empty")]
    EmptyObservedSet,
    #[error("amino-acid sequence {0} has no entry in the encoding index")]
    UnknownAminoSequence(String),
    #[error("epsilon must lie in [0, 1], got {0}")]
    InvalidEpsilon(f64),
    #[error("generation alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("candidate {0} is already observed")]
    CandidateObserved(String),
    #[error("candidate {0} has a different length than the observed sequences")]
    LengthMismatch(String),
    #[error("csv output failed: {0}")]
    Io(String),
}

/// One member of the restricted encoding set of an amino-acid sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingEntry {
    pub nuc: NucSeq,
    /// Observed sequences have emergence probability 1 regardless of `intensity`.
    pub observed: bool,
    pub intensity: EmergenceIntensity,
}

/// Counters from neighborhood generation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NeighborhoodStats {
    /// `9 * L` raw single-site mutants per observed sequence, summed.
    pub raw_mutants: usize,
    pub stop_mutants: usize,
    pub observed_mutants: usize,
    /// Distinct unobserved valid mutants before the epsilon filter.
    pub unique_unobserved: usize,
    pub below_threshold: usize,
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    nuc_candidates: BTreeMap<NucSeq, EmergenceIntensity>,
    observed_aa: BTreeSet<AaSeq>,
    aa_candidates: BTreeSet<AaSeq>,
    encoding_index: BTreeMap<AaSeq, Vec<EncodingEntry>>,
    stats: NeighborhoodStats,
}

/// Builds the Hamming-1 candidate set of `table`.
///
/// Every observed sequence contributes its `3 * 3L` single-site mutants.
/// Mutants with a stop codon or already observed are dropped; survivors are
/// kept when `1 - exp(-alpha_gen * S(y)) > epsilon`. Intensities from
/// several ancestors are summed.
pub fn generate_neighborhood(
    table: &PrevalenceTable,
    rates: &MutationRates,
    epsilon: f64,
    alpha_gen: f64,
) -> Result<CandidateSet, CandidateError> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(CandidateError::InvalidEpsilon(epsilon));
    }
    if !(alpha_gen > 0.0 && alpha_gen <= 1.0) {
        return Err(CandidateError::InvalidAlpha(alpha_gen));
    }
    if table.is_empty() {
        return Err(CandidateError::EmptyObservedSet);
    }
    let mut stats = NeighborhoodStats::default();
    let mut unobserved: BTreeSet<NucSeq> = BTreeSet::new();
    for (y, _) in table.iter() {
        for (_, _, bases) in single_site_mutants(y.bases()) {
            stats.raw_mutants += 1;
            let Some(mutant) = to_valid(bases) else {
                stats.stop_mutants += 1;
                continue;
            };
            if table.contains(&mutant) {
                stats.observed_mutants += 1;
                continue;
            }
            unobserved.insert(mutant);
        }
    }
    stats.unique_unobserved = unobserved.len();
    let mut kept = BTreeMap::new();
    for y in unobserved {
        let s = emergence_intensity(table, &y, rates);
        if emergence_prob_approx(s, alpha_gen) > epsilon {
            kept.insert(y, s);
        } else {
            stats.below_threshold += 1;
        }
    }
    let mut cs = CandidateSet::assemble(table, rates, kept);
    cs.stats = stats;
    Ok(cs)
}

impl CandidateSet {
    /// Builds a candidate set from an explicit list of unobserved nucleotide
    /// sequences and their intensities, bypassing neighborhood generation.
    pub fn from_parts<I>(table: &PrevalenceTable, rates: &MutationRates, candidates: I) -> Result<Self, CandidateError>
    where
        I: IntoIterator<Item = (NucSeq, EmergenceIntensity)>,
    {
        if table.is_empty() {
            return Err(CandidateError::EmptyObservedSet);
        }
        let mut kept = BTreeMap::new();
        for (y, s) in candidates {
            if table.contains(&y) {
                return Err(CandidateError::CandidateObserved(y.to_string()));
            }
            if table.sequence_len() != Some(y.len()) {
                return Err(CandidateError::LengthMismatch(y.to_string()));
            }
            kept.insert(y, s);
        }
        Ok(CandidateSet::assemble(table, rates, kept))
    }

    fn assemble(table: &PrevalenceTable, rates: &MutationRates, kept: BTreeMap<NucSeq, EmergenceIntensity>) -> Self {
        let mut encoding_index: BTreeMap<AaSeq, Vec<EncodingEntry>> = BTreeMap::new();
        let mut observed_aa = BTreeSet::new();
        for (y, _) in table.iter() {
            let x = translate(y);
            observed_aa.insert(x.clone());
            encoding_index.entry(x).or_default().push(EncodingEntry {
                nuc: y.clone(),
                observed: true,
                intensity: emergence_intensity(table, y, rates),
            });
        }
        let mut aa_candidates = BTreeSet::new();
        for (y, &s) in &kept {
            let x = translate(y);
            if !observed_aa.contains(&x) {
                aa_candidates.insert(x.clone());
            }
            encoding_index.entry(x).or_default().push(EncodingEntry {
                nuc: y.clone(),
                observed: false,
                intensity: s,
            });
        }
        for entries in encoding_index.values_mut() {
            entries.sort_by(|a, b| a.nuc.cmp(&b.nuc));
        }
        let stats = NeighborhoodStats {
            unique_unobserved: kept.len(),
            ..NeighborhoodStats::default()
        };
        CandidateSet {
            nuc_candidates: kept,
            observed_aa,
            aa_candidates,
            encoding_index,
            stats,
        }
    }

    /// The restricted encodings `Y(x) ∩ (observed ∪ candidates)` of `x`.
    pub fn restricted_encodings(&self, x: &AaSeq) -> Result<&[EncodingEntry], CandidateError> {
        self.encoding_index
            .get(x)
            .map(Vec::as_slice)
            .ok_or_else(|| CandidateError::UnknownAminoSequence(x.to_string()))
    }

    pub fn nuc_candidates(&self) -> &BTreeMap<NucSeq, EmergenceIntensity> {
        &self.nuc_candidates
    }

    /// Distinct translations of the observed table.
    pub fn observed_aa(&self) -> &BTreeSet<AaSeq> {
        &self.observed_aa
    }

    /// Candidate translations not already observed.
    pub fn aa_candidates(&self) -> &BTreeSet<AaSeq> {
        &self.aa_candidates
    }

    pub fn encoding_index(&self) -> &BTreeMap<AaSeq, Vec<EncodingEntry>> {
        &self.encoding_index
    }

    pub fn stats(&self) -> NeighborhoodStats {
        self.stats
    }

    /// Writes `nuc_sequence,aa_sequence,intensity,observed` rows for every
    /// index entry, ordered by amino-acid then nucleotide sequence.
    /// Intensities carry 17 significant digits.
    pub fn write_csv<W: Write>(&self, out: W, alphabet: Alphabet) -> Result<(), CandidateError> {
        let io = |e: csv::Error| CandidateError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["nuc_sequence", "aa_sequence", "intensity", "observed"]).map_err(io)?;
        for (x, entries) in &self.encoding_index {
            for e in entries {
                w.write_record([
                    e.nuc.to_string_in(alphabet),
                    x.to_string(),
                    format!("{:.16e}", e.intensity.value()),
                    e.observed.to_string(),
                ])
                .map_err(io)?;
            }
        }
        w.flush().map_err(|e| CandidateError::Io(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqcore::{hamming_distance, GeneticCode, Nucleotide};
    use proptest::prelude::*;

    fn nuc(s: &str) -> NucSeq {
        NucSeq::parse(s).unwrap()
    }

    fn aa(s: &str) -> AaSeq {
        AaSeq::parse(s).unwrap()
    }

    fn table(entries: &[(&str, u64)], hosts: f64) -> PrevalenceTable {
        PrevalenceTable::from_counts(entries.iter().map(|&(s, c)| (nuc(s), c)), hosts).unwrap()
    }

    /// Brute force over all 4^(3L) nucleotide strings.
    fn brute_force_neighbors(observed: &[NucSeq]) -> BTreeSet<NucSeq> {
        let n = observed[0].len();
        let code = GeneticCode::standard();
        let mut out = BTreeSet::new();
        for idx in 0..4usize.pow(n as u32) {
            let bases: Vec<Nucleotide> = (0..n).map(|i| Nucleotide::ALL[(idx >> (2 * (n - 1 - i))) & 3]).collect();
            if bases.chunks(3).any(|c| code.is_stop(&[c[0], c[1], c[2]])) {
                continue;
            }
            let near = observed.iter().any(|o| hamming_distance(o.bases(), &bases) == Some(1));
            let seen = observed.iter().any(|o| o.bases() == bases.as_slice());
            if near && !seen {
                out.insert(NucSeq::from_bases(bases).unwrap());
            }
        }
        out
    }

    #[test]
    fn aug_neighborhood() {
        let cs = generate_neighborhood(&table(&[("AUG", 1)], 1.0), &MutationRates::default(), 0.0, 1.0).unwrap();
        assert_eq!(cs.nuc_candidates().len(), 9);
        let aas: Vec<String> = cs.aa_candidates().iter().map(|x| x.to_string()).collect();
        let mut expected = vec!["I", "K", "L", "R", "T", "V"];
        expected.sort();
        assert_eq!(aas, expected);
        assert_eq!(cs.restricted_encodings(&aa("I")).unwrap().len(), 3);
        assert_eq!(cs.restricted_encodings(&aa("L")).unwrap().len(), 2);
        assert_eq!(cs.stats().raw_mutants, 9);
        assert_eq!(cs.stats().stop_mutants, 0);
    }

    #[test]
    fn epsilon_one_is_empty() {
        let cs = generate_neighborhood(&table(&[("AUG", 1)], 1e12), &MutationRates::default(), 1.0, 1.0).unwrap();
        assert!(cs.nuc_candidates().is_empty());
        assert!(cs.aa_candidates().is_empty());
    }

    #[test]
    fn observed_mutants_are_excluded() {
        // AUG and GUG are one transition apart
        let cs = generate_neighborhood(&table(&[("AUG", 1), ("GUG", 1)], 1.0), &MutationRates::default(), 0.0, 1.0)
            .unwrap();
        assert!(!cs.nuc_candidates().contains_key(&nuc("GUG")));
        assert!(!cs.nuc_candidates().contains_key(&nuc("AUG")));
        assert!(!cs.aa_candidates().contains(&aa("V")));
        assert_eq!(cs.stats().observed_mutants, 2);
    }

    #[test]
    fn restricted_encoding_examples() {
        let cs = generate_neighborhood(&table(&[("UGG", 1)], 1.0), &MutationRates::default(), 0.0, 1.0).unwrap();
        let w = cs.restricted_encodings(&aa("W")).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].observed);
        for x in cs.aa_candidates() {
            assert!(cs.restricted_encodings(x).unwrap().iter().all(|e| !e.observed));
        }
        assert!(matches!(
            cs.restricted_encodings(&aa("M")),
            Err(CandidateError::UnknownAminoSequence(_))
        ));
        assert!(matches!(
            generate_neighborhood(&PrevalenceTable::new(1.0).unwrap(), &MutationRates::default(), 0.0, 1.0),
            Err(CandidateError::EmptyObservedSet)
        ));
    }

    #[test]
    fn intensities_sum_over_ancestors() {
        let rates = MutationRates::default();
        // GUG is reachable from AUG (A->G transition) and from GCG (C->U transition)
        let t = table(&[("AUG", 1), ("GCG", 1)], 2e6);
        let cs = generate_neighborhood(&t, &rates, 0.0, 1.0).unwrap();
        let s = cs.nuc_candidates()[&nuc("GUG")].value();
        assert!((s - 52.0).abs() < 1e-9);
    }

    #[test]
    fn csv_output_is_stable() {
        let cs = generate_neighborhood(&table(&[("AUG", 3)], 1e6), &MutationRates::default(), 0.0, 1.0).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        cs.write_csv(&mut a, Alphabet::Rna).unwrap();
        cs.write_csv(&mut b, Alphabet::Rna).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("nuc_sequence,aa_sequence,intensity,observed\n"));
        assert!(text.contains("GUG,V,2.6000000000000000e1,false"));
        assert!(text.contains("AUG,M,0.0000000000000000e0,true"));
        assert_eq!(text.lines().count(), 11);
    }

    fn small_table() -> impl Strategy<Value = Vec<(String, u64)>> {
        let codon = prop::sample::select(
            (0..64)
                .map(|i| {
                    let b = |k: usize| Nucleotide::ALL[k].symbol(Alphabet::Rna);
                    format!("{}{}{}", b(i / 16), b((i / 4) % 4), b(i % 4))
                })
                .filter(|c| !["UAA", "UAG", "UGA"].contains(&c.as_str()))
                .collect::<Vec<_>>(),
        );
        prop::collection::vec((prop::collection::vec(codon, 2), 1u64..1000), 1..4)
            .prop_map(|v| v.into_iter().map(|(cs, n)| (cs.concat(), n)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn neighborhood_matches_brute_force(entries in small_table()) {
            let refs: Vec<(&str, u64)> = entries.iter().map(|(s, c)| (s.as_str(), *c)).collect();
            let t = table(&refs, 1.0);
            let cs = generate_neighborhood(&t, &MutationRates::default(), 0.0, 1.0).unwrap();
            let observed: Vec<NucSeq> = t.iter().map(|(y, _)| y.clone()).collect();
            let oracle = brute_force_neighbors(&observed);
            let got: BTreeSet<NucSeq> = cs.nuc_candidates().keys().cloned().collect();
            prop_assert_eq!(got, oracle);
            prop_assert_eq!(cs.stats().raw_mutants, 18 * t.len());
            for (x, entries) in cs.encoding_index() {
                for e in entries {
                    prop_assert_eq!(&translate(&e.nuc), x);
                }
            }
            for x in cs.aa_candidates() {
                prop_assert!(!cs.observed_aa().contains(x));
            }
        }

        #[test]
        fn epsilon_and_hosts_monotonicity(entries in small_table(), e1 in 0.0f64..1.0, de in 0.0f64..0.5, h in 1e2f64..1e7, dh in 1.0f64..100.0) {
            let refs: Vec<(&str, u64)> = entries.iter().map(|(s, c)| (s.as_str(), *c)).collect();
            let rates = MutationRates::default();
            let t = table(&refs, h);
            let lo = generate_neighborhood(&t, &rates, e1, 1.0).unwrap();
            let hi = generate_neighborhood(&t, &rates, (e1 + de).min(1.0), 1.0).unwrap();
            prop_assert!(hi.nuc_candidates().keys().all(|k| lo.nuc_candidates().contains_key(k)));
            let more = generate_neighborhood(&t.with_hosts(h * dh).unwrap(), &rates, e1, 1.0).unwrap();
            prop_assert!(lo.nuc_candidates().keys().all(|k| more.nuc_candidates().contains_key(k)));
        }
    }
}
