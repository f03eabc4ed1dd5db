//! Semantic matches (embedding cosine similarity) and textual matches
//! (low prompt edit distance among semantic matches).
//!
//! Embedding files: `b"MTXE"`, dim `u32`, count `u64`, then `count * dim`
//! little-endian `f32`, one row per sample in sample order.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::levenshtein::levenshtein_at_most;
use super::FeatureError;
use crate::corpus::TokenId;
use crate::rng::splitmix64;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"MTXE";
pub const DEFAULT_SEMANTIC_THRESHOLD: f64 = 0.8;
pub const DEFAULT_TEXTUAL_THRESHOLD: f64 = 0.2;
pub const DEFAULT_EMBEDDING_DIM: usize = 256;
/// Slack for `f32` storage when comparing a cosine against its threshold.
pub const SIMILARITY_TOLERANCE: f64 = 1e-6;

/// Row-major table of unit-length embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(FeatureError::Dimension(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        Ok(EmbeddingTable { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(FeatureError::Dimension(format!(
                "row {bad} has dimension {}, expected {dim}",
                rows[bad].len()
            )));
        }
        EmbeddingTable::new(dim, rows.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FeatureError> {
        let bad = |m: &str| FeatureError::Format(format!("embedding file: {m}"));
        if bytes.len() < 16 || &bytes[0..4] != EMBEDDING_MAGIC {
            return Err(bad("missing MTXE header"));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() != 16 + dim * count * 4 {
            return Err(bad("length does not match header"));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingTable::new(dim.max(1), data)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let bytes = fs::read(path).map_err(|e| FeatureError::Io(path.display().to_string(), e))?;
        EmbeddingTable::decode(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        fs::write(path, self.encode()).map_err(|e| FeatureError::Io(path.display().to_string(), e))
    }
}

/// L2-normalized hashed bag-of-tokens embedding.
pub fn hashed_embedding(tokens: &[TokenId], dim: usize) -> Vec<f32> {
    let mut v = vec![0f64; dim];
    for &t in tokens {
        v[(splitmix64(u64::from(t)) % dim as u64) as usize] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter()
        .map(|x| if norm > 0.0 { (x / norm) as f32 } else { 0.0 })
        .collect()
}

pub fn hashed_embeddings<'a>(
    sequences: impl IntoIterator<Item = &'a [TokenId]>,
    dim: usize,
) -> EmbeddingTable {
    let mut data = Vec::new();
    for s in sequences {
        data.extend(hashed_embedding(s, dim));
    }
    EmbeddingTable::new(dim, data).expect("rows have uniform dimension")
}

fn cosine_unit(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Indices of every other row whose cosine similarity with row `query` is at
/// least `threshold`.
pub fn semantic_matches(
    table: &EmbeddingTable,
    query: usize,
    threshold: f64,
) -> Result<Vec<usize>, FeatureError> {
    if query >= table.len() {
        return Err(FeatureError::Dimension(format!(
            "query row {query} outside table of {} rows",
            table.len()
        )));
    }
    let q = table.row(query);
    Ok((0..table.len())
        .filter(|&j| j != query && cosine_unit(q, table.row(j)) + SIMILARITY_TOLERANCE >= threshold)
        .collect())
}

pub fn semantic_match_count(
    table: &EmbeddingTable,
    query: usize,
    threshold: f64,
) -> Result<usize, FeatureError> {
    semantic_matches(table, query, threshold).map(|m| m.len())
}

/// Semantic matches of every row, computed in parallel.
pub fn all_semantic_matches(table: &EmbeddingTable, threshold: f64) -> Vec<Vec<usize>> {
    (0..table.len())
        .into_par_iter()
        .map(|i| semantic_matches(table, i, threshold).expect("row in range"))
        .collect()
}

/// True when `a` and `b` are within `relative_threshold` times the longer
/// prompt's character length of each other.
pub fn is_textual_match(a: &str, b: &str, relative_threshold: f64) -> bool {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let bound = relative_threshold * a.len().max(b.len()) as f64;
    // Distances are integers, so `d <= bound` iff `d <= floor(bound)`.
    levenshtein_at_most(&a, &b, bound.floor() as usize)
}

/// Number of semantic matches whose prompt is a textual match of the
/// query's prompt.
pub fn textual_match_count(
    query_prompt: &str,
    match_prompts: impl IntoIterator<Item = impl AsRef<str>>,
    relative_threshold: f64,
) -> usize {
    match_prompts
        .into_iter()
        .filter(|p| is_textual_match(query_prompt, p.as_ref(), relative_threshold))
        .count()
}
