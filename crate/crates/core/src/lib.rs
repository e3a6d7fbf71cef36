//! Translation-suggestion toolkit.
//!
//! Builds synthetic suggestion corpora from parallel text, trains a
//! segment-aware Transformer that fills a masked span of a machine translation,
//! and decodes ranked suggestions with beam search.

pub mod aligner;
pub mod corpus_io;
pub mod decoder_search;
pub mod encoding;
pub mod evaluator;
pub mod error;
pub mod model;
pub mod ngram_lm;
pub mod subword;
pub mod suggest;
pub mod synth;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
