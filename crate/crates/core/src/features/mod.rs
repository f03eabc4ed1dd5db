//! Per-sample memorization factors.
//!
//! Feature files are JSONL with one [`FeatureRecord`] per line, keyed by the
//! record's field names (`frequency_stats` and `template` are nested
//! objects). The CSV export flattens those two into `frequency_stats_<stat>`
//! and `template_kind` / `template_stride` columns.

pub mod frequency;
pub mod huffman;
pub mod levenshtein;
pub mod matching;
pub mod template;
pub mod vocab;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use frequency::{token_frequency_stats, FrequencyStats};
pub use huffman::huffman_length;
pub use levenshtein::levenshtein;
pub use matching::{
    hashed_embeddings, semantic_match_count, textual_match_count, EmbeddingTable,
};
pub use template::{detect_template, TemplateKind, TemplateVerdict};
pub use vocab::Vocabulary;

use crate::corpus::{Corpus, Sample};
use crate::dupindex::{DuplicateIndex, IndexError};
use crate::taxonomy::TaxonomyCategory;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("token {0} has no vocabulary entry")]
    MissingToken(u32),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// Every factor computed for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub sample_id: u64,
    /// Verified corpus occurrences of the continuation (inclusive).
    pub duplicate_count: u64,
    pub prompt_duplicate_count: u64,
    pub frequency_stats: FrequencyStats,
    /// Huffman-coded length of the full 64-token sequence.
    pub huffman_bits: u64,
    pub template: TemplateVerdict,
    pub semantic_match_count: u64,
    pub textual_match_count: u64,
    pub prompt_perplexity: Option<f64>,
    pub continuation_perplexity: Option<f64>,
    pub full_perplexity: Option<f64>,
    pub memorized: Option<bool>,
    #[serde(default)]
    pub modality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub taxonomy: Option<TaxonomyCategory>,
}

/// Numeric feature columns in canonical order.
pub const FEATURE_NAMES: [&str; 16] = [
    "duplicate_count",
    "prompt_duplicate_count",
    "frequency_stats_min",
    "frequency_stats_q25",
    "frequency_stats_median",
    "frequency_stats_mean",
    "frequency_stats_q75",
    "frequency_stats_max",
    "huffman_bits",
    "is_incrementing",
    "is_repeating",
    "semantic_match_count",
    "textual_match_count",
    "prompt_perplexity",
    "continuation_perplexity",
    "full_perplexity",
];

impl FeatureRecord {
    /// Value of a [`FEATURE_NAMES`] column; `None` for unknown names and
    /// absent perplexities.
    pub fn feature(&self, name: &str) -> Option<f64> {
        let f = &self.frequency_stats;
        let flag = |k| if self.template.kind == k { 1.0 } else { 0.0 };
        Some(match name {
            "duplicate_count" => self.duplicate_count as f64,
            "prompt_duplicate_count" => self.prompt_duplicate_count as f64,
            "frequency_stats_min" => f.min,
            "frequency_stats_q25" => f.q25,
            "frequency_stats_median" => f.median,
            "frequency_stats_mean" => f.mean,
            "frequency_stats_q75" => f.q75,
            "frequency_stats_max" => f.max,
            "huffman_bits" => self.huffman_bits as f64,
            "is_incrementing" => flag(TemplateKind::Incrementing),
            "is_repeating" => flag(TemplateKind::Repeating),
            "semantic_match_count" => self.semantic_match_count as f64,
            "textual_match_count" => self.textual_match_count as f64,
            "prompt_perplexity" => return self.prompt_perplexity,
            "continuation_perplexity" => return self.continuation_perplexity,
            "full_perplexity" => return self.full_perplexity,
            _ => return None,
        })
    }
}

pub fn is_feature_name(name: &str) -> bool {
    FEATURE_NAMES.contains(&name)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub semantic_threshold: f64,
    pub textual_relative_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            semantic_threshold: matching::DEFAULT_SEMANTIC_THRESHOLD,
            textual_relative_threshold: matching::DEFAULT_TEXTUAL_THRESHOLD,
        }
    }
}

/// Shared read-only inputs for feature assembly.
pub struct FeatureContext<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a DuplicateIndex<'a>,
    pub vocabulary: &'a Vocabulary,
    /// One row per sample, in sample order.
    pub embeddings: &'a EmbeddingTable,
    pub config: FeatureConfig,
}

/// Computes every feature except perplexities for each sample.
pub fn assemble_features(
    samples: &[Sample],
    ctx: &FeatureContext<'_>,
) -> Result<Vec<FeatureRecord>, FeatureError> {
    if ctx.embeddings.len() != samples.len() {
        return Err(FeatureError::Dimension(format!(
            "{} embedding rows for {} samples",
            ctx.embeddings.len(),
            samples.len()
        )));
    }
    let texts: Vec<(String, String)> = samples
        .par_iter()
        .map(|s| {
            Ok((
                ctx.vocabulary.decode(&s.tokens())?,
                ctx.vocabulary.decode(&s.prompt)?,
            ))
        })
        .collect::<Result<_, FeatureError>>()?;
    let matches = matching::all_semantic_matches(ctx.embeddings, ctx.config.semantic_threshold);

    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let full = s.tokens();
            let (full_text, prompt_text) = &texts[i];
            let textual = textual_match_count(
                prompt_text,
                matches[i].iter().map(|&j| texts[j].1.as_str()),
                ctx.config.textual_relative_threshold,
            );
            Ok(FeatureRecord {
                sample_id: s.id,
                duplicate_count: ctx.index.duplicate_count(&s.continuation)? as u64,
                prompt_duplicate_count: ctx.index.duplicate_count(&s.prompt)? as u64,
                frequency_stats: token_frequency_stats(&ctx.corpus.token_counts, &s.continuation),
                huffman_bits: huffman_length(&full)?,
                template: detect_template(full_text),
                semantic_match_count: matches[i].len() as u64,
                textual_match_count: textual as u64,
                prompt_perplexity: None,
                continuation_perplexity: None,
                full_perplexity: None,
                memorized: s.memorized,
                modality: s.modality.clone(),
                taxonomy: None,
            })
        })
        .collect()
}

pub fn write_jsonl(records: &[FeatureRecord], path: &Path) -> Result<(), FeatureError> {
    let io = |e| FeatureError::Io(path.display().to_string(), e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<FeatureRecord>, FeatureError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| FeatureError::Format(format!("feature line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_jsonl(path: &Path) -> Result<Vec<FeatureRecord>, FeatureError> {
    let text =
        fs::read_to_string(path).map_err(|e| FeatureError::Io(path.display().to_string(), e))?;
    parse_jsonl(&text)
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    sample_id: u64,
    duplicate_count: u64,
    prompt_duplicate_count: u64,
    frequency_stats_min: f64,
    frequency_stats_q25: f64,
    frequency_stats_median: f64,
    frequency_stats_mean: f64,
    frequency_stats_q75: f64,
    frequency_stats_max: f64,
    huffman_bits: u64,
    template_kind: TemplateKind,
    template_stride: Option<usize>,
    semantic_match_count: u64,
    textual_match_count: u64,
    prompt_perplexity: Option<f64>,
    continuation_perplexity: Option<f64>,
    full_perplexity: Option<f64>,
    memorized: Option<bool>,
    modality: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    taxonomy: Option<TaxonomyCategory>,
}

impl From<&FeatureRecord> for CsvRow {
    fn from(r: &FeatureRecord) -> Self {
        let f = &r.frequency_stats;
        CsvRow {
            sample_id: r.sample_id,
            duplicate_count: r.duplicate_count,
            prompt_duplicate_count: r.prompt_duplicate_count,
            frequency_stats_min: f.min,
            frequency_stats_q25: f.q25,
            frequency_stats_median: f.median,
            frequency_stats_mean: f.mean,
            frequency_stats_q75: f.q75,
            frequency_stats_max: f.max,
            huffman_bits: r.huffman_bits,
            template_kind: r.template.kind,
            template_stride: r.template.stride,
            semantic_match_count: r.semantic_match_count,
            textual_match_count: r.textual_match_count,
            prompt_perplexity: r.prompt_perplexity,
            continuation_perplexity: r.continuation_perplexity,
            full_perplexity: r.full_perplexity,
            memorized: r.memorized,
            modality: r.modality.clone(),
            taxonomy: r.taxonomy,
        }
    }
}

impl From<CsvRow> for FeatureRecord {
    fn from(r: CsvRow) -> Self {
        FeatureRecord {
            sample_id: r.sample_id,
            duplicate_count: r.duplicate_count,
            prompt_duplicate_count: r.prompt_duplicate_count,
            frequency_stats: FrequencyStats {
                min: r.frequency_stats_min,
                q25: r.frequency_stats_q25,
                median: r.frequency_stats_median,
                mean: r.frequency_stats_mean,
                q75: r.frequency_stats_q75,
                max: r.frequency_stats_max,
            },
            huffman_bits: r.huffman_bits,
            template: TemplateVerdict {
                kind: r.template_kind,
                stride: r.template_stride,
            },
            semantic_match_count: r.semantic_match_count,
            textual_match_count: r.textual_match_count,
            prompt_perplexity: r.prompt_perplexity,
            continuation_perplexity: r.continuation_perplexity,
            full_perplexity: r.full_perplexity,
            memorized: r.memorized,
            modality: r.modality,
            taxonomy: r.taxonomy,
        }
    }
}

pub fn encode_csv(records: &[FeatureRecord]) -> Result<Vec<u8>, FeatureError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(CsvRow::from(r))
            .map_err(|e| FeatureError::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| FeatureError::Format(e.to_string()))
}

pub fn decode_csv(bytes: &[u8]) -> Result<Vec<FeatureRecord>, FeatureError> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize::<CsvRow>()
        .map(|row| {
            row.map(FeatureRecord::from)
                .map_err(|e| FeatureError::Format(e.to_string()))
        })
        .collect()
}

pub fn write_csv(records: &[FeatureRecord], path: &Path) -> Result<(), FeatureError> {
    fs::write(path, encode_csv(records)?).map_err(|e| FeatureError::Io(path.display().to_string(), e))
}
