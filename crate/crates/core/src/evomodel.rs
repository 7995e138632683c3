//! Point-mutation probabilities, prevalence-derived opportunity counts and
//! emergence probabilities.
//!
//! The emergence probability of an unobserved sequence `y` given observed
//! ancestors `y'` with opportunity counts `c(y')` is
//!
//! ```text
//! p_e(y; a) = 1 - prod_{y'} (1 - P(y' -> y) a)^{c(y')}        (exact)
//!           ~ 1 - exp(-a * S(y)),  S(y) = sum_{y'} P(y' -> y) c(y')
//! ```
//!
//! Only ancestors one substitution away contribute; `P(y' -> y)` is zero at
//! Hamming distance two or more.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seqcore::{hamming_distance, single_site_mutants, NucSeq, Nucleotide};

pub const DEFAULT_TRANSITION_RATE: f64 = 2.6e-5;
pub const DEFAULT_TRANSVERSION_RATE: f64 = 1.4e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvoError {
    #[error("mutation requires two different nucleotides")]
    SameNucleotide,
    #[error("sequences are identical")]
    IdenticalSequences,
    #[error("sequence length {found} does not match expected length {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("sequence {0} is not in the prevalence table")]
    UnknownSequence(String),
    #[error("invalid mutation rates: transition {transition}, transversion {transversion}")]
    InvalidRates { transition: f64, transversion: f64 },
    #[error("host count must be positive and finite, got {0}")]
    InvalidHostCount(f64),
    #[error("mutation probability times alpha must lie in [0, 1), got {0}")]
    InvalidProbability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationKind {
    Transition,
    Transversion,
}

/// Purine<->purine and pyrimidine<->pyrimidine substitutions are transitions.
pub fn classify_mutation(from: Nucleotide, to: Nucleotide) -> Result<MutationKind, EvoError> {
    if from == to {
        return Err(EvoError::SameNucleotide);
    }
    Ok(if from.is_purine() == to.is_purine() {
        MutationKind::Transition
    } else {
        MutationKind::Transversion
    })
}

/// Per-site, per-generation substitution probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MutationRates {
    pub transition: f64,
    pub transversion: f64,
}

impl MutationRates {
    pub fn new(transition: f64, transversion: f64) -> Result<Self, EvoError> {
        let ok = transversion > 0.0 && transversion <= transition && transition < 1.0;
        if !ok {
            return Err(EvoError::InvalidRates { transition, transversion });
        }
        Ok(MutationRates { transition, transversion })
    }

    pub fn validate(&self) -> Result<(), EvoError> {
        MutationRates::new(self.transition, self.transversion).map(|_| ())
    }

    pub fn rate(&self, kind: MutationKind) -> f64 {
        match kind {
            MutationKind::Transition => self.transition,
            MutationKind::Transversion => self.transversion,
        }
    }

    /// Rate of the substitution `from -> to`; panics if they are equal.
    pub(crate) fn site_rate(&self, from: Nucleotide, to: Nucleotide) -> f64 {
        self.rate(classify_mutation(from, to).expect("distinct nucleotides"))
    }
}

impl Default for MutationRates {
    fn default() -> Self {
        MutationRates {
            transition: DEFAULT_TRANSITION_RATE,
            transversion: DEFAULT_TRANSVERSION_RATE,
        }
    }
}

/// Single-generation mutation probability `P(from -> to)`.
///
/// Distance one yields the rate of the differing site; larger distances are
/// treated as zero.
pub fn single_gen_mutation_prob(from: &NucSeq, to: &NucSeq, rates: &MutationRates) -> Result<f64, EvoError> {
    let d = hamming_distance(from.bases(), to.bases()).ok_or(EvoError::LengthMismatch {
        expected: from.len(),
        found: to.len(),
    })?;
    match d {
        0 => Err(EvoError::IdenticalSequences),
        1 => {
            let (a, b) = from
                .bases()
                .iter()
                .zip(to.bases())
                .find(|(a, b)| a != b)
                .expect("one differing site");
            Ok(rates.site_rate(*a, *b))
        }
        _ => Ok(0.0),
    }
}

/// Observed nucleotide sequences with their empirical counts, plus the
/// estimated number of reproducing hosts `T` over the collection period.
#[derive(Debug, Clone, PartialEq)]
pub struct PrevalenceTable {
    entries: BTreeMap<NucSeq, u64>,
    total: u64,
    hosts: f64,
    seq_len: Option<usize>,
}

impl PrevalenceTable {
    pub fn new(hosts: f64) -> Result<Self, EvoError> {
        if !(hosts.is_finite() && hosts > 0.0) {
            return Err(EvoError::InvalidHostCount(hosts));
        }
        Ok(PrevalenceTable {
            entries: BTreeMap::new(),
            total: 0,
            hosts,
            seq_len: None,
        })
    }

    pub fn from_counts<I>(counts: I, hosts: f64) -> Result<Self, EvoError>
    where
        I: IntoIterator<Item = (NucSeq, u64)>,
    {
        let mut table = PrevalenceTable::new(hosts)?;
        for (y, c) in counts {
            table.add(y, c)?;
        }
        Ok(table)
    }

    /// Accumulates `count` observations of `y`. A zero count records nothing.
    pub fn add(&mut self, y: NucSeq, count: u64) -> Result<(), EvoError> {
        match self.seq_len {
            Some(expected) if expected != y.len() => {
                return Err(EvoError::LengthMismatch { expected, found: y.len() });
            }
            _ => {}
        }
        if count == 0 {
            return Ok(());
        }
        self.seq_len = Some(y.len());
        *self.entries.entry(y).or_insert(0) += count;
        self.total += count;
        Ok(())
    }

    pub fn with_hosts(&self, hosts: f64) -> Result<Self, EvoError> {
        let mut t = PrevalenceTable::new(hosts)?;
        t.entries = self.entries.clone();
        t.total = self.total;
        t.seq_len = self.seq_len;
        Ok(t)
    }

    pub fn hosts(&self) -> f64 {
        self.hosts
    }

    pub fn total_count(&self) -> u64 {
        self.total
    }

    pub fn count(&self, y: &NucSeq) -> u64 {
        self.entries.get(y).copied().unwrap_or(0)
    }

    pub fn contains(&self, y: &NucSeq) -> bool {
        self.entries.contains_key(y)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nucleotide length shared by every entry.
    pub fn sequence_len(&self) -> Option<usize> {
        self.seq_len
    }

    /// Entries in sequence order.
    pub fn iter(&self) -> impl Iterator<Item = (&NucSeq, u64)> {
        self.entries.iter().map(|(y, &c)| (y, c))
    }

    pub(crate) fn count_of_bases(&self, bases: &[Nucleotide]) -> u64 {
        // NucSeq ordering is the ordering of its bases, so a probe key is cheap
        // to build without re-validating.
        self.entries.get(&NucSeq::from_bases_unchecked(bases.to_vec())).copied().unwrap_or(0)
    }

    fn opportunity_from_count(&self, count: u64) -> f64 {
        count as f64 / self.total as f64 * self.hosts
    }
}

/// `c(y) = count(y) / total * T`.
pub fn opportunity_count(table: &PrevalenceTable, y: &NucSeq) -> Result<f64, EvoError> {
    match table.count(y) {
        0 => Err(EvoError::UnknownSequence(y.to_string())),
        c => Ok(table.opportunity_from_count(c)),
    }
}

/// `S(y) = sum over observed ancestors of P(y' -> y) c(y')`, with the
/// emergence-rate scale factored out.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
pub struct EmergenceIntensity(pub f64);

impl EmergenceIntensity {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Sums rate-weighted opportunity counts over every observed sequence one
/// substitution away from `y`. Summation follows the position-major mutant
/// order so the result is reproducible.
pub fn emergence_intensity(table: &PrevalenceTable, y: &NucSeq, rates: &MutationRates) -> EmergenceIntensity {
    if table.sequence_len() != Some(y.len()) {
        return EmergenceIntensity(0.0);
    }
    let mut s = 0.0;
    for (pos, ancestor_base, ancestor) in single_site_mutants(y.bases()) {
        let c = table.count_of_bases(&ancestor);
        if c > 0 {
            s += rates.site_rate(ancestor_base, y.bases()[pos]) * table.opportunity_from_count(c);
        }
    }
    EmergenceIntensity(s)
}

/// `1 - exp(-alpha * S)`.
pub fn emergence_prob_approx(s: EmergenceIntensity, alpha: f64) -> f64 {
    -(-alpha * s.0).exp_m1()
}

/// `1 - prod (1 - P alpha)^c`, evaluated as `-expm1(sum c * ln_1p(-P alpha))`.
pub fn emergence_prob_exact(ancestors: &[(f64, f64)], alpha: f64) -> Result<f64, EvoError> {
    let mut log_survival = 0.0;
    for &(p, c) in ancestors {
        let u = p * alpha;
        if !(0.0..1.0).contains(&u) {
            return Err(EvoError::InvalidProbability(u));
        }
        log_survival += c * (-u).ln_1p();
    }
    Ok(-log_survival.exp_m1())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn nuc(s: &str) -> NucSeq {
        NucSeq::parse(s).unwrap()
    }

    #[test]
    fn classify_examples() {
        use Nucleotide::*;
        assert_eq!(classify_mutation(A, G), Ok(MutationKind::Transition));
        assert_eq!(classify_mutation(A, C), Ok(MutationKind::Transversion));
        assert_eq!(classify_mutation(A, A), Err(EvoError::SameNucleotide));
    }

    #[test]
    fn mutation_prob_examples() {
        let r = MutationRates::default();
        assert_eq!(single_gen_mutation_prob(&nuc("AUG"), &nuc("GUG"), &r), Ok(2.6e-5));
        assert_eq!(single_gen_mutation_prob(&nuc("AUG"), &nuc("CUG"), &r), Ok(1.4e-7));
        assert_eq!(single_gen_mutation_prob(&nuc("AUG"), &nuc("GUA"), &r), Ok(0.0));
        assert_eq!(
            single_gen_mutation_prob(&nuc("AUG"), &nuc("AUG"), &r),
            Err(EvoError::IdenticalSequences)
        );
        assert!(matches!(
            single_gen_mutation_prob(&nuc("AUG"), &nuc("AUGAAA"), &r),
            Err(EvoError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn rates_validation() {
        assert!(MutationRates::new(1e-5, 1e-4).is_err());
        assert!(MutationRates::new(1.0, 1e-4).is_err());
        assert!(MutationRates::new(1e-5, 0.0).is_err());
        assert!(MutationRates::new(1e-5, 1e-5).is_ok());
    }

    #[test]
    fn opportunity_examples() {
        let t = PrevalenceTable::from_counts([(nuc("AUG"), 50), (nuc("AAA"), 50)], 1e9).unwrap();
        assert_relative_eq!(opportunity_count(&t, &nuc("AUG")).unwrap(), 5e8);
        let t = PrevalenceTable::from_counts([(nuc("AUG"), 100)], 24e9).unwrap();
        assert_relative_eq!(opportunity_count(&t, &nuc("AUG")).unwrap(), 24e9);
        let t = PrevalenceTable::from_counts([(nuc("AUG"), 100), (nuc("AAA"), 0)], 24e9).unwrap();
        assert!(matches!(opportunity_count(&t, &nuc("AAA")), Err(EvoError::UnknownSequence(_))));
    }

    #[test]
    fn table_rejects_mixed_lengths_and_bad_hosts() {
        let mut t = PrevalenceTable::new(1.0).unwrap();
        t.add(nuc("AUG"), 1).unwrap();
        assert!(matches!(t.add(nuc("AUGAAA"), 1), Err(EvoError::LengthMismatch { expected: 3, found: 6 })));
        assert!(PrevalenceTable::new(0.0).is_err());
        assert!(PrevalenceTable::new(f64::NAN).is_err());
    }

    #[test]
    fn intensity_examples() {
        let r = MutationRates::default();
        // one transition ancestor with c = 1e6
        let t = PrevalenceTable::from_counts([(nuc("AUG"), 1)], 1e6).unwrap();
        assert_relative_eq!(emergence_intensity(&t, &nuc("GUG"), &r).value(), 26.0, max_relative = 1e-12);
        assert_eq!(emergence_intensity(&t, &nuc("GUA"), &r).value(), 0.0);
        // two transition ancestors (AUG->GUG and GCG->GUG), c = 1e6 each
        let t = PrevalenceTable::from_counts([(nuc("AUG"), 1), (nuc("GCG"), 1)], 2e6).unwrap();
        assert_relative_eq!(emergence_intensity(&t, &nuc("GUG"), &r).value(), 52.0, max_relative = 1e-12);
    }

    #[test]
    fn approx_examples() {
        assert_relative_eq!(emergence_prob_approx(EmergenceIntensity(10.0), 1.0), 0.9999546, max_relative = 1e-7);
        assert_eq!(emergence_prob_approx(EmergenceIntensity(0.0), 1.0), 0.0);
        let exact = emergence_prob_exact(&[(2.6e-5, 1e6)], 1.0).unwrap();
        let approx = emergence_prob_approx(EmergenceIntensity(26.0), 1.0);
        assert!((exact - approx).abs() / exact < 1e-3);
    }

    #[test]
    fn exact_examples() {
        assert_relative_eq!(emergence_prob_exact(&[(0.5, 1.0)], 1.0).unwrap(), 0.5, max_relative = 1e-15);
        assert_relative_eq!(emergence_prob_exact(&[(0.5, 1.0), (0.5, 1.0)], 1.0).unwrap(), 0.75, max_relative = 1e-15);
        assert_eq!(emergence_prob_exact(&[], 1.0).unwrap(), 0.0);
        assert_eq!(emergence_prob_exact(&[(1.0, 1.0)], 1.0), Err(EvoError::InvalidProbability(1.0)));
    }

    #[test]
    fn table_a1_partition() {
        let mut transitions = 0;
        let mut transversions = 0;
        for a in Nucleotide::ALL {
            for b in Nucleotide::ALL {
                match classify_mutation(a, b) {
                    Ok(MutationKind::Transition) => transitions += 1,
                    Ok(MutationKind::Transversion) => transversions += 1,
                    Err(_) => assert_eq!(a, b),
                }
            }
        }
        assert_eq!((transitions, transversions), (4, 8));
    }

    proptest! {
        #[test]
        fn exact_and_approx_agree_in_small_rate_regime(
            p in 1e-9f64..1e-4, cp in 1e-6f64..50.0, alpha in 0.01f64..1.0
        ) {
            // choose c so that c * p * alpha stays within [1e-6, 50]
            let c = cp / (p * alpha);
            let exact = emergence_prob_exact(&[(p, c)], alpha).unwrap();
            let approx = emergence_prob_approx(EmergenceIntensity(p * c), alpha);
            prop_assert!((exact - approx).abs() / exact.max(1e-300) < 1e-3);
        }

        #[test]
        fn monotone_in_alpha_and_count(
            p in 1e-7f64..1e-3, c in 0.0f64..1e5, a1 in 0.001f64..0.5, da in 0.0f64..0.5, dc in 0.0f64..1e5
        ) {
            let a2 = a1 + da;
            let e1 = emergence_prob_exact(&[(p, c)], a1).unwrap();
            let e2 = emergence_prob_exact(&[(p, c)], a2).unwrap();
            let e3 = emergence_prob_exact(&[(p, c + dc)], a1).unwrap();
            prop_assert!(e1 <= e2 && e1 <= e3);
            prop_assert!((0.0..=1.0).contains(&e1));
            let s1 = emergence_prob_approx(EmergenceIntensity(p * c), a1);
            let s2 = emergence_prob_approx(EmergenceIntensity(p * c), a2);
            prop_assert!(s1 <= s2 && (0.0..=1.0).contains(&s1));
        }
    }
}
