//! Prompt, continuation and full-sequence perplexities.
//!
//! Perplexity over a span is `exp(-mean(logprobs))` with natural logs.
//! Per-token log-probabilities come either from an external JSONL file
//! (`{"id": u64, "logprobs": [64 reals]}`) or from [`ReferenceLM`], an
//! add-k smoothed n-gram model trained on the corpus itself. Both feed the
//! same [`perplexity_stats`] path.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Sample, TokenId};
use crate::features::FeatureRecord;
use crate::{HALF_WINDOW, SAMPLE_LEN};

/// Context filler before the first token of a document or sample.
pub const BOS: TokenId = TokenId::MAX;

#[derive(Debug, Error)]
pub enum PerplexityError {
    #[error("sample {id}: expected {SAMPLE_LEN} logprobs, got {len}")]
    Length { id: u64, len: usize },
    #[error("sample {id}: logprob at position {position} is {value}, must be <= 0")]
    Positive { id: u64, position: usize, value: f64 },
    #[error("n-gram order must be at least 1, got {0}")]
    Order(usize),
    #[error("add-k constant must be finite and nonnegative, got {0}")]
    Smoothing(f64),
    #[error("reference model needs a nonempty corpus")]
    EmptyCorpus,
    #[error("log-prob line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("log-prob file lists sample {0} twice")]
    DuplicateId(u64),
    #[error("{missing} samples have no log-probs (first: {first})")]
    Missing { missing: usize, first: u64 },
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    #[serde(rename = "id")]
    pub sample_id: u64,
    pub logprobs: Vec<f64>,
}

impl TokenLogProbs {
    pub fn validate(&self) -> Result<(), PerplexityError> {
        if self.logprobs.len() != SAMPLE_LEN {
            return Err(PerplexityError::Length { id: self.sample_id, len: self.logprobs.len() });
        }
        if let Some((position, &value)) =
            self.logprobs.iter().enumerate().find(|(_, v)| !(**v <= 0.0))
        {
            return Err(PerplexityError::Positive { id: self.sample_id, position, value });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityStats {
    pub prompt: f64,
    pub continuation: f64,
    pub full: f64,
}

/// `exp(-mean(logprobs))`; 1.0 for an empty span.
pub fn span_perplexity(logprobs: &[f64]) -> f64 {
    if logprobs.is_empty() {
        return 1.0;
    }
    (-logprobs.iter().sum::<f64>() / logprobs.len() as f64).exp()
}

pub fn perplexity_stats(lp: &TokenLogProbs) -> Result<PerplexityStats, PerplexityError> {
    lp.validate()?;
    let v = &lp.logprobs;
    Ok(PerplexityStats {
        prompt: span_perplexity(&v[..HALF_WINDOW]),
        continuation: span_perplexity(&v[HALF_WINDOW..]),
        full: span_perplexity(v),
    })
}

/// Add-k smoothed n-gram model:
/// `P(t | ctx) = (count(ctx, t) + k) / (count(ctx) + k * V)`.
///
/// With `k = 0`, an unseen context falls back to the uniform distribution.
/// n-grams and contexts are stored as sorted flat arrays.
#[derive(Clone, Debug)]
pub struct ReferenceLM {
    order: usize,
    k: f64,
    vocabulary_size: u32,
    grams: Vec<TokenId>,
    gram_counts: Vec<u64>,
    contexts: Vec<TokenId>,
    context_counts: Vec<u64>,
}

fn padded(tokens: &[TokenId], order: usize) -> Vec<TokenId> {
    let mut v = vec![BOS; order - 1];
    v.extend_from_slice(tokens);
    v
}

/// Distinct `width`-grams (flattened) with their counts, sorted.
fn count_grams(seqs: &[Vec<TokenId>], width: usize) -> (Vec<TokenId>, Vec<u64>) {
    debug_assert!(width > 0);
    let mut refs: Vec<&[TokenId]> = seqs.iter().flat_map(|s| s.windows(width)).collect();
    refs.par_sort_unstable();
    let mut flat = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut prev: Option<&[TokenId]> = None;
    for r in refs {
        if prev == Some(r) {
            *counts.last_mut().unwrap() += 1;
        } else {
            flat.extend_from_slice(r);
            counts.push(1);
            prev = Some(r);
        }
    }
    (flat, counts)
}

fn lookup(flat: &[TokenId], counts: &[u64], width: usize, key: &[TokenId]) -> u64 {
    if width == 0 {
        return counts[0];
    }
    let (mut lo, mut hi) = (0usize, counts.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        match flat[mid * width..(mid + 1) * width].cmp(key) {
            Ordering::Less => lo = mid + 1,
            Ordering::Greater => hi = mid,
            Ordering::Equal => return counts[mid],
        }
    }
    0
}

impl ReferenceLM {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn smoothing(&self) -> f64 {
        self.k
    }

    pub fn vocabulary_size(&self) -> u32 {
        self.vocabulary_size
    }

    /// `P(token | context)`; `context` holds exactly `order - 1` tokens.
    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        debug_assert_eq!(context.len(), self.order - 1);
        let width = self.order - 1;
        let ctx = lookup(&self.contexts, &self.context_counts, width, context);
        let v = f64::from(self.vocabulary_size);
        if ctx == 0 && self.k == 0.0 {
            return 1.0 / v;
        }
        let mut key = context.to_vec();
        key.push(token);
        let joint = lookup(&self.grams, &self.gram_counts, self.order, &key);
        (joint as f64 + self.k) / (ctx as f64 + self.k * v)
    }

    /// Natural-log probabilities of each token, conditioning on preceding
    /// tokens of the same sequence padded with [`BOS`].
    pub fn score_tokens(&self, tokens: &[TokenId]) -> Vec<f64> {
        let seq = padded(tokens, self.order);
        seq.windows(self.order)
            .map(|w| self.prob(&w[..self.order - 1], w[self.order - 1]).ln())
            .collect()
    }
}

pub fn train_reference_lm(corpus: &Corpus, order: usize, k: f64) -> Result<ReferenceLM, PerplexityError> {
    if order < 1 {
        return Err(PerplexityError::Order(order));
    }
    if !(k.is_finite() && k >= 0.0) {
        return Err(PerplexityError::Smoothing(k));
    }
    if corpus.total_tokens() == 0 {
        return Err(PerplexityError::EmptyCorpus);
    }
    let seqs: Vec<Vec<TokenId>> = corpus.documents.iter().map(|d| padded(&d.tokens, order)).collect();
    let (grams, gram_counts) = count_grams(&seqs, order);
    // Context counts only over positions that are followed by a token.
    let trimmed: Vec<Vec<TokenId>> = seqs
        .iter()
        .filter(|s| s.len() >= order)
        .map(|s| s[..s.len() - 1].to_vec())
        .collect();
    let (contexts, context_counts) = if order == 1 {
        (Vec::new(), vec![gram_counts.iter().sum()])
    } else {
        count_grams(&trimmed, order - 1)
    };
    Ok(ReferenceLM {
        order,
        k,
        vocabulary_size: corpus.vocabulary_size.max(1),
        grams,
        gram_counts,
        contexts,
        context_counts,
    })
}

pub fn score_sample(lm: &ReferenceLM, sample: &Sample) -> TokenLogProbs {
    TokenLogProbs {
        sample_id: sample.id,
        logprobs: lm.score_tokens(&sample.tokens()),
    }
}

pub fn parse_logprobs(text: &str) -> Result<Vec<TokenLogProbs>, PerplexityError> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lp: TokenLogProbs = serde_json::from_str(line)
            .map_err(|e| PerplexityError::Line { line: i + 1, reason: e.to_string() })?;
        lp.validate()
            .map_err(|e| PerplexityError::Line { line: i + 1, reason: e.to_string() })?;
        if seen.insert(lp.sample_id, ()).is_some() {
            return Err(PerplexityError::DuplicateId(lp.sample_id));
        }
        out.push(lp);
    }
    Ok(out)
}

pub fn read_logprobs(path: &Path) -> Result<Vec<TokenLogProbs>, PerplexityError> {
    let text =
        fs::read_to_string(path).map_err(|e| PerplexityError::Io(path.display().to_string(), e))?;
    parse_logprobs(&text)
}

pub fn write_logprobs(path: &Path, lps: &[TokenLogProbs]) -> Result<(), PerplexityError> {
    let io = |e| PerplexityError::Io(path.display().to_string(), e);
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    for lp in lps {
        writeln!(w, "{}", serde_json::to_string(lp).expect("logprobs serialize")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Fills the three perplexity columns of every record from `logprobs`.
pub fn attach_perplexities(
    records: &mut [FeatureRecord],
    logprobs: &[TokenLogProbs],
) -> Result<(), PerplexityError> {
    let by_id: HashMap<u64, &TokenLogProbs> = logprobs.iter().map(|l| (l.sample_id, l)).collect();
    let missing: Vec<u64> = records
        .iter()
        .filter(|r| !by_id.contains_key(&r.sample_id))
        .map(|r| r.sample_id)
        .collect();
    if let Some(&first) = missing.first() {
        return Err(PerplexityError::Missing { missing: missing.len(), first });
    }
    for r in records.iter_mut() {
        let s = perplexity_stats(by_id[&r.sample_id])?;
        r.prompt_perplexity = Some(s.prompt);
        r.continuation_perplexity = Some(s.continuation);
        r.full_perplexity = Some(s.full);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;

    fn corpus(docs: Vec<Vec<TokenId>>, v: u32) -> Corpus {
        let docs = docs
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Document { id: i as u64, tokens, modality: None })
            .collect();
        Corpus::new(docs, v).unwrap()
    }

    fn lp(values: Vec<f64>) -> TokenLogProbs {
        TokenLogProbs { sample_id: 1, logprobs: values }
    }

    #[test]
    fn certain_and_uniform() {
        let s = perplexity_stats(&lp(vec![0.0; 64])).unwrap();
        assert_eq!((s.prompt, s.continuation, s.full), (1.0, 1.0, 1.0));
        let v = 50_000f64;
        let s = perplexity_stats(&lp(vec![-v.ln(); 64])).unwrap();
        for x in [s.prompt, s.continuation, s.full] {
            assert!((x - v).abs() < 1e-6 * v);
        }
    }

    #[test]
    fn two_token_window() {
        let p = span_perplexity(&[(0.5f64).ln(), (0.125f64).ln()]);
        assert!((p - 4.0).abs() < 1e-12);
    }

    #[test]
    fn spans_use_their_halves() {
        let mut v = vec![0.0; 32];
        v.extend(vec![-(2f64).ln(); 32]);
        let s = perplexity_stats(&lp(v)).unwrap();
        assert_eq!(s.prompt, 1.0);
        assert!((s.continuation - 2.0).abs() < 1e-12);
        assert!((s.full - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        let mut v = vec![0.0; 64];
        v[7] = 0.1;
        assert!(matches!(perplexity_stats(&lp(v)), Err(PerplexityError::Positive { position: 7, .. })));
        assert!(matches!(perplexity_stats(&lp(vec![0.0; 63])), Err(PerplexityError::Length { len: 63, .. })));
        let mut v = vec![0.0; 64];
        v[0] = f64::NAN;
        assert!(perplexity_stats(&lp(v)).is_err());
    }

    #[test]
    fn deterministic_corpus_k0() {
        let ab: Vec<TokenId> = (0..128).map(|i| i % 2).collect();
        let c = corpus(vec![ab.clone()], 2);
        let lm = train_reference_lm(&c, 2, 0.0).unwrap();
        assert_eq!(lm.prob(&[0], 1), 1.0);
        let scores = lm.score_tokens(&ab[..64]);
        assert!(scores.iter().all(|&x| x == 0.0));
        assert_eq!(span_perplexity(&scores), 1.0);
    }

    #[test]
    fn smoothing_fixtures() {
        // Context [1, 2] seen 3 times, followed by 3 once. V = 10.
        let c = corpus(vec![vec![1, 2, 3], vec![1, 2, 4], vec![1, 2, 4]], 10);
        let lm = train_reference_lm(&c, 3, 1.0).unwrap();
        assert!((lm.prob(&[1, 2], 3) - 2.0 / 13.0).abs() < 1e-15);
        // unseen context
        assert!((lm.prob(&[7, 7], 9) - 0.1).abs() < 1e-15);
        assert!(matches!(train_reference_lm(&c, 0, 1.0), Err(PerplexityError::Order(0))));
        assert!(matches!(train_reference_lm(&corpus(vec![], 10), 3, 1.0), Err(PerplexityError::EmptyCorpus)));
    }

    #[test]
    fn unigram_model() {
        let c = corpus(vec![vec![0, 0, 1, 2]], 4);
        let lm = train_reference_lm(&c, 1, 1.0).unwrap();
        // (count + 1) / (4 + 4)
        assert!((lm.prob(&[], 0) - 3.0 / 8.0).abs() < 1e-15);
        assert!((lm.prob(&[], 3) - 1.0 / 8.0).abs() < 1e-15);
    }

    /// Chain-rule product over a 3-symbol vocabulary from raw counts.
    #[test]
    fn chain_rule_matches_brute_force() {
        let docs = vec![vec![0, 1, 2, 0, 1, 1, 2, 2, 0], vec![2, 2, 1, 0, 0, 1]];
        let c = corpus(docs.clone(), 3);
        let (n, k) = (3usize, 0.5f64);
        let lm = train_reference_lm(&c, n, k).unwrap();
        let count = |ctx: &[u32], t: Option<u32>| -> f64 {
            let mut total = 0.0;
            for d in &docs {
                let mut p = vec![BOS; n - 1];
                p.extend(d);
                for i in 0..d.len() {
                    if &p[i..i + n - 1] == ctx && t.is_none_or(|t| p[i + n - 1] == t) {
                        total += 1.0;
                    }
                }
            }
            total
        };
        let seq = [1, 2, 0, 0, 2, 1];
        let mut product = 1.0;
        let mut p = vec![BOS; n - 1];
        p.extend(seq);
        for i in 0..seq.len() {
            let ctx = &p[i..i + n - 1];
            product *= (count(ctx, Some(p[i + n - 1])) + k) / (count(ctx, None) + 3.0 * k);
        }
        let got: f64 = lm.score_tokens(&seq).iter().sum::<f64>().exp();
        assert!((got - product).abs() < 1e-12 * product);
    }

    #[test]
    fn logprob_file_round_trip_and_errors() {
        let a = TokenLogProbs { sample_id: 3, logprobs: vec![-0.25; 64] };
        let line = serde_json::to_string(&a).unwrap();
        assert!(line.starts_with("{\"id\":3"));
        assert_eq!(parse_logprobs(&line).unwrap(), vec![a.clone()]);
        let twice = format!("{line}\n{line}\n");
        assert!(matches!(parse_logprobs(&twice), Err(PerplexityError::DuplicateId(3))));
        assert!(matches!(parse_logprobs("{\"id\": 1, \"logprobs\": [0.5]}"), Err(PerplexityError::Line { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn distributions_sum_to_one(
            docs in prop::collection::vec(prop::collection::vec(0u32..5, 0..30), 1..5),
            order in 1usize..4,
            k in prop_oneof![Just(0.0), 0.01f64..3.0],
        ) {
            prop_assume!(docs.iter().any(|d| !d.is_empty()));
            let c = corpus(docs.clone(), 5);
            let lm = train_reference_lm(&c, order, k).unwrap();
            let mut ctxs: Vec<Vec<u32>> = vec![vec![BOS; order - 1], vec![4; order - 1]];
            for d in &docs {
                let p = padded(d, order);
                for w in p.windows(order) {
                    ctxs.push(w[..order - 1].to_vec());
                }
            }
            for ctx in ctxs {
                let total: f64 = (0..5).map(|t| lm.prob(&ctx, t)).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn permutation_invariant(mut v in prop::collection::vec(-10.0f64..=0.0, 64), seed in any::<u64>()) {
            let before = perplexity_stats(&lp(v.clone())).unwrap();
            let mut rng = crate::rng::seeded(seed);
            use rand::seq::SliceRandom;
            v[..32].shuffle(&mut rng);
            let after = perplexity_stats(&lp(v)).unwrap();
            prop_assert!((before.prompt - after.prompt).abs() <= 1e-9 * before.prompt);
            prop_assert_eq!(before.continuation, after.continuation);
        }
    }
}
