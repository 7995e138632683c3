//! Evolution-aware positive-unlabeled learning for short protein motifs.
//!
//! Observed nucleotide sequences define which unobserved sequences were
//! likely to have emerged by point mutation; the resulting sequence-dependent
//! class prior enters a likelihood that is maximized jointly over a
//! classifier and two nuisance parameters (observability and emergence
//! scale).

pub mod candidates;
pub mod evomodel;
pub mod seqcore;
pub mod classifiers;
pub mod features;
pub mod matrix;
pub mod training;
pub mod evalbase;
pub mod simgen;
pub mod pipeline;
