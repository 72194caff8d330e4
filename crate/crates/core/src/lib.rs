//! Desk-scale laboratory for CTC speech recognition with condition-indexed
//! adapter adaptation.
//!
//! The crate builds a miniature SSL-style acoustic model (CNN feature encoder,
//! pre-norm transformer blocks, CTC head) on top of a small reverse-mode
//! differentiation engine, and wires it into three procedures: baseline
//! fine-tuning, supervised adaptive fine-tuning with speaker- and
//! deficiency-conditioned adapters, and two-stage test-time unsupervised
//! adaptation on pseudo-labels. A deterministic synthetic multi-speaker corpus,
//! WER scoring with subgroup breakdowns, and a matched-pairs significance test
//! close the loop so experiment orderings can be checked end to end.

pub mod adapters;
pub mod backbone;
pub mod classifier;
pub mod corpus;
pub mod ctc;
pub mod diffcore;
pub mod error;
pub mod eval;
pub mod pipelines;
pub mod rng;

pub use error::{Error, Result};
