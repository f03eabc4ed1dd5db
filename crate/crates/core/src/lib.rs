//! Memorization-factor analysis over tokenized corpora.
//!
//! The crate computes per-sample features (exact duplicate counts, token
//! frequency statistics, Huffman compressibility, template detection,
//! semantic and textual match counts, perplexities), sorts memorized
//! samples into the recitation / reconstruction / recollection taxonomy,
//! fits per-category logistic regressions and produces the statistical
//! reports used to compare them.
//!
//! Module map:
//!
//! - [`corpus`]: corpus loading, sample extraction, label attachment.
//! - [`dupindex`]: rolling-hash 32-gram index with verified counts.
//! - [`features`]: per-sample datum and corpus-relational features.
//! - [`perplexity`]: log-prob ingestion and a reference n-gram model.
//! - [`taxonomy`]: category assignment.
//! - [`stats`]: histograms, KL divergence, bootstrap, dependency tests.
//! - [`predictor`]: baseline / taxonomic / partitioned regressions.
//! - [`synthgen`]: seeded synthetic corpora with planted structure.
//! - [`cohort`]: per-cohort category counts for memorized sets.
//! - [`pipeline`]: the staged command pipeline driven by [`config::RunConfig`].

pub mod cohort;
pub mod config;
pub mod corpus;
pub mod dupindex;
pub mod features;
pub mod perplexity;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod taxonomy;

#[cfg(test)]
pub(crate) mod test_util;

pub use corpus::{Corpus, Document, Sample, TokenId};
pub use dupindex::{DuplicateIndex, HashParams, WindowHash};
pub use features::{FeatureRecord, FrequencyStats, TemplateKind, TemplateVerdict};
pub use taxonomy::{TaxonomyCategory, TaxonomyConfig};

/// Tokens in a sample prompt or continuation.
pub const HALF_WINDOW: usize = 32;
/// Tokens in a full sample.
pub const SAMPLE_LEN: usize = 2 * HALF_WINDOW;
