//! Nucleotide and amino-acid alphabets, the genetic code and translation.
//!
//! Nucleotides are stored in a canonical RNA form; `T` is accepted at
//! ingestion and mapped to `U`. Rendering back to DNA letters is a display
//! concern handled by [`Alphabet`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

/// The 20 natural amino acids in one-letter code.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Default cap on the number of encodings materialized by [`encodings_of`].
pub const DEFAULT_ENCODING_CAP: u128 = 10_000_000;

const STANDARD_CODE_TABLE: &str = include_str!("../data/standard_genetic_code.tsv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqError {
    #[error("invalid symbol {symbol:?} at position {position}")]
    InvalidSymbol { symbol: char, position: usize },
    #[error("stop codon at codon index {codon_index}")]
    StopCodonPresent { codon_index: usize },
    #[error("nucleotide sequence length {0} is not a multiple of 3")]
    LengthNotMultipleOfThree(usize),
    #[error("{degeneracy} encodings exceed the enumeration cap {cap}")]
    EnumerationCapExceeded { degeneracy: u128, cap: u128 },
    #[error("invalid genetic code table: {0}")]
    InvalidCodeTable(String),
}

/// Letter set used when reading and writing nucleotide sequences.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alphabet {
    #[default]
    Rna,
    Dna,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Nucleotide {
    A,
    C,
    G,
    U,
}

impl Nucleotide {
    pub const ALL: [Nucleotide; 4] = [Nucleotide::A, Nucleotide::C, Nucleotide::G, Nucleotide::U];

    /// Parses one letter; accepts lowercase and maps `T` to `U`.
    pub fn from_byte(b: u8) -> Option<Self> {
        match b.to_ascii_uppercase() {
            b'A' => Some(Nucleotide::A),
            b'C' => Some(Nucleotide::C),
            b'G' => Some(Nucleotide::G),
            b'U' | b'T' => Some(Nucleotide::U),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_purine(self) -> bool {
        matches!(self, Nucleotide::A | Nucleotide::G)
    }

    pub fn is_pyrimidine(self) -> bool {
        !self.is_purine()
    }

    pub fn symbol(self, alphabet: Alphabet) -> char {
        match (self, alphabet) {
            (Nucleotide::A, _) => 'A',
            (Nucleotide::C, _) => 'C',
            (Nucleotide::G, _) => 'G',
            (Nucleotide::U, Alphabet::Rna) => 'U',
            (Nucleotide::U, Alphabet::Dna) => 'T',
        }
    }
}

pub type Codon = [Nucleotide; 3];

pub fn codon_index(codon: &Codon) -> usize {
    codon[0].index() * 16 + codon[1].index() * 4 + codon[2].index()
}

fn codon_from_index(i: usize) -> Codon {
    [
        Nucleotide::ALL[i / 16],
        Nucleotide::ALL[(i / 4) % 4],
        Nucleotide::ALL[i % 4],
    ]
}

/// A codon table mapping each of the 64 codons to a residue or stop.
#[derive(Debug, Clone)]
pub struct GeneticCode {
    table: [Option<u8>; 64],
    synonyms: BTreeMap<u8, Vec<Codon>>,
}

impl GeneticCode {
    /// Parses `CODON<TAB>RESIDUE` records; `*` marks stop. Blank lines and
    /// `#` comments are ignored. All 64 codons must appear exactly once.
    pub fn from_table_str(text: &str) -> Result<Self, SeqError> {
        let mut table: [Option<Option<u8>>; 64] = [None; 64];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| SeqError::InvalidCodeTable(format!("line {}: {msg}", lineno + 1));
            let (codon, residue) = line.split_once('\t').ok_or_else(|| bad("expected CODON<TAB>RESIDUE"))?;
            let codon = codon.trim().as_bytes();
            if codon.len() != 3 {
                return Err(bad("codon must have 3 letters"));
            }
            let mut c = [Nucleotide::A; 3];
            for (slot, &b) in c.iter_mut().zip(codon) {
                *slot = Nucleotide::from_byte(b).ok_or_else(|| bad("invalid nucleotide"))?;
            }
            let residue = residue.trim().as_bytes();
            let value = match residue {
                [b'*'] => None,
                [r] if AMINO_ACIDS.contains(&r.to_ascii_uppercase()) => Some(r.to_ascii_uppercase()),
                _ => return Err(bad("residue must be one amino-acid letter or '*'")),
            };
            let idx = codon_index(&c);
            if table[idx].is_some() {
                return Err(bad("duplicate codon"));
            }
            table[idx] = Some(value);
        }
        let mut full = [None; 64];
        let mut synonyms: BTreeMap<u8, Vec<Codon>> = BTreeMap::new();
        for (i, entry) in table.iter().enumerate() {
            let value = entry.ok_or_else(|| {
                SeqError::InvalidCodeTable(format!("missing codon {}", codon_string(&codon_from_index(i))))
            })?;
            full[i] = value;
            if let Some(r) = value {
                synonyms.entry(r).or_default().push(codon_from_index(i));
            }
        }
        Ok(GeneticCode { table: full, synonyms })
    }

    /// The standard code shipped in `data/standard_genetic_code.tsv`.
    pub fn standard() -> &'static GeneticCode {
        static CODE: OnceLock<GeneticCode> = OnceLock::new();
        CODE.get_or_init(|| {
            GeneticCode::from_table_str(STANDARD_CODE_TABLE).expect("shipped genetic code table is valid")
        })
    }

    pub fn residue(&self, codon: &Codon) -> Option<u8> {
        self.table[codon_index(codon)]
    }

    pub fn is_stop(&self, codon: &Codon) -> bool {
        self.residue(codon).is_none()
    }

    /// Codons encoding `residue`, in lexicographic (A<C<G<U) order.
    pub fn synonymous_codons(&self, residue: u8) -> &[Codon] {
        self.synonyms.get(&residue).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn stop_count(&self) -> usize {
        self.table.iter().filter(|r| r.is_none()).count()
    }
}

fn codon_string(c: &Codon) -> String {
    c.iter().map(|n| n.symbol(Alphabet::Rna)).collect()
}

/// A validated amino-acid sequence over the 20-letter alphabet.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AaSeq(Vec<u8>);

impl AaSeq {
    pub fn parse(s: &str) -> Result<Self, SeqError> {
        let mut residues = Vec::with_capacity(s.len());
        for (position, ch) in s.chars().enumerate() {
            let up = ch.to_ascii_uppercase();
            if !up.is_ascii() || !AMINO_ACIDS.contains(&(up as u8)) {
                return Err(SeqError::InvalidSymbol { symbol: ch, position });
            }
            residues.push(up as u8);
        }
        Ok(AaSeq(residues))
    }

    /// Builds from residue bytes that are already known to be valid.
    pub(crate) fn from_residues_unchecked(residues: Vec<u8>) -> Self {
        AaSeq(residues)
    }

    pub fn residues(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_str(&self) -> &str {
        // residues are ASCII by construction
        std::str::from_utf8(&self.0).expect("ASCII residues")
    }
}

impl fmt::Display for AaSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A nucleotide sequence of whole codons, none of which is a stop codon.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NucSeq(Vec<Nucleotide>);

impl NucSeq {
    pub fn parse(s: &str) -> Result<Self, SeqError> {
        let mut bases = Vec::with_capacity(s.len());
        for (position, ch) in s.chars().enumerate() {
            let n = if ch.is_ascii() { Nucleotide::from_byte(ch as u8) } else { None };
            bases.push(n.ok_or(SeqError::InvalidSymbol { symbol: ch, position })?);
        }
        NucSeq::from_bases(bases)
    }

    pub fn from_bases(bases: Vec<Nucleotide>) -> Result<Self, SeqError> {
        if bases.len() % 3 != 0 {
            return Err(SeqError::LengthNotMultipleOfThree(bases.len()));
        }
        if let Some(codon_index) = first_stop(&bases) {
            return Err(SeqError::StopCodonPresent { codon_index });
        }
        Ok(NucSeq(bases))
    }

    /// Wraps bases without the stop-codon check; only for lookup keys and
    /// bases already known to be valid.
    pub(crate) fn from_bases_unchecked(bases: Vec<Nucleotide>) -> Self {
        NucSeq(bases)
    }

    pub fn bases(&self) -> &[Nucleotide] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of codons, i.e. the length of the translated sequence.
    pub fn codon_count(&self) -> usize {
        self.0.len() / 3
    }

    pub fn to_string_in(&self, alphabet: Alphabet) -> String {
        self.0.iter().map(|n| n.symbol(alphabet)).collect()
    }
}

impl fmt::Display for NucSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_string_in(Alphabet::Rna))
    }
}

fn first_stop(bases: &[Nucleotide]) -> Option<usize> {
    let code = GeneticCode::standard();
    bases
        .chunks_exact(3)
        .position(|c| code.is_stop(&[c[0], c[1], c[2]]))
}

/// Translation under the standard code. Total on `NucSeq` because stop
/// frames are rejected at construction.
pub fn translate(y: &NucSeq) -> AaSeq {
    let code = GeneticCode::standard();
    let residues = y
        .bases()
        .chunks_exact(3)
        .map(|c| code.residue(&[c[0], c[1], c[2]]).expect("NucSeq holds no stop codons"))
        .collect();
    AaSeq(residues)
}

/// Parses and translates a raw nucleotide string.
pub fn translate_str(s: &str) -> Result<AaSeq, SeqError> {
    NucSeq::parse(s).map(|y| translate(&y))
}

/// Number of nucleotide sequences encoding `x`, saturating at `u128::MAX`.
pub fn degeneracy(x: &AaSeq) -> u128 {
    let code = GeneticCode::standard();
    x.residues()
        .iter()
        .fold(1u128, |acc, &r| acc.saturating_mul(code.synonymous_codons(r).len() as u128))
}

/// All nucleotide encodings of `x` in lexicographic order.
pub fn encodings_of(x: &AaSeq, cap: u128) -> Result<Vec<NucSeq>, SeqError> {
    let degeneracy = degeneracy(x);
    if degeneracy > cap {
        return Err(SeqError::EnumerationCapExceeded { degeneracy, cap });
    }
    let code = GeneticCode::standard();
    let mut out: Vec<Vec<Nucleotide>> = vec![Vec::with_capacity(3 * x.len())];
    for &r in x.residues() {
        let codons = code.synonymous_codons(r);
        let mut next = Vec::with_capacity(out.len() * codons.len());
        for prefix in &out {
            for codon in codons {
                let mut v = prefix.clone();
                v.extend_from_slice(codon);
                next.push(v);
            }
        }
        out = next;
    }
    Ok(out.into_iter().map(NucSeq).collect())
}

/// Number of differing sites, or `None` when lengths differ.
pub fn hamming_distance(a: &[Nucleotide], b: &[Nucleotide]) -> Option<usize> {
    (a.len() == b.len()).then(|| a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Every single-site substitution of `bases`: `3 * len` raw mutants, in
/// position-major order with replacement bases in A<C<G<U order. Mutants may
/// contain stop codons.
pub fn single_site_mutants(bases: &[Nucleotide]) -> impl Iterator<Item = (usize, Nucleotide, Vec<Nucleotide>)> + '_ {
    (0..bases.len()).flat_map(move |pos| {
        Nucleotide::ALL
            .into_iter()
            .filter(move |&n| n != bases[pos])
            .map(move |n| {
                let mut v = bases.to_vec();
                v[pos] = n;
                (pos, n, v)
            })
    })
}

/// Wraps raw bases as a [`NucSeq`] if no codon frame is a stop.
pub fn to_valid(bases: Vec<Nucleotide>) -> Option<NucSeq> {
    NucSeq::from_bases(bases).ok()
}
