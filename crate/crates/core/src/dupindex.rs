//! Exact duplicate counting for fixed-length token windows.
//!
//! Windows are hashed with
//! `H(c_1..c_w) = (c_1 + c_2 P + ... + c_w P^(w-1)) mod MOD`.
//! The first token is the constant term, so the rolling update runs from the
//! end of a document toward its start:
//! `H(j-1) = c_{j-1} + P * (H(j) - c_{j+w-1} P^(w-1))`, which needs no
//! modular inverse and therefore does not depend on `MOD` being prime.
//!
//! The index stores every window of every document as a `(hash, doc, offset)`
//! entry sorted by hash and then by window contents. Token-identical windows
//! are therefore contiguous, and each run of identical windows is one
//! verified equivalence class. Counts are class sizes, never bucket sizes.

use std::cmp::Ordering;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, TokenId};
use crate::HALF_WINDOW;

pub const INDEX_MAGIC: &[u8; 4] = b"MTXI";
pub const DEFAULT_BASE: u64 = 60013;
pub const DEFAULT_MODULUS: u64 = 1_000_000_000_000_000_003;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("window must have {expected} tokens, got {got}")]
    WindowLength { expected: usize, got: usize },
    #[error("invalid hash parameters: {0}")]
    Params(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("index entry {entry} does not match the corpus: {reason}")]
    Stale { entry: usize, reason: String },
}

/// Polynomial window hash, always `< modulus`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowHash(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashParams {
    pub base: u64,
    pub modulus: u64,
    pub window: usize,
}

impl Default for HashParams {
    fn default() -> Self {
        HashParams {
            base: DEFAULT_BASE,
            modulus: DEFAULT_MODULUS,
            window: HALF_WINDOW,
        }
    }
}

impl HashParams {
    pub fn validate(&self) -> Result<(), IndexError> {
        if self.modulus < 2 {
            return Err(IndexError::Params(format!("modulus {} < 2", self.modulus)));
        }
        if self.window == 0 {
            return Err(IndexError::Params("window length 0".into()));
        }
        Ok(())
    }

    fn mul(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.modulus as u128) as u64
    }

    fn add(&self, a: u64, b: u64) -> u64 {
        ((a as u128 + b as u128) % self.modulus as u128) as u64
    }

    fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            (a as u128 + self.modulus as u128 - b as u128) as u64
        }
    }

    fn reduce(&self, t: TokenId) -> u64 {
        u64::from(t) % self.modulus
    }

    /// `base^(window-1) mod modulus`.
    fn top_power(&self) -> u64 {
        let p = self.base % self.modulus;
        let mut acc = 1 % self.modulus;
        for _ in 1..self.window {
            acc = self.mul(acc, p);
        }
        acc
    }
}

/// Hash of `tokens` from scratch. Any nonempty length is accepted.
pub fn window_hash(tokens: &[TokenId], params: &HashParams) -> WindowHash {
    // Horner from the last coefficient down to the constant term.
    let p = params.base % params.modulus;
    let mut h = 0u64;
    for &t in tokens.iter().rev() {
        h = params.add(params.mul(h, p), params.reduce(t));
    }
    WindowHash(h)
}

/// Hashes of every `params.window`-token window of `tokens`, indexed by
/// start offset, computed with the right-to-left rolling update.
pub fn rolling_hashes(tokens: &[TokenId], params: &HashParams) -> Vec<WindowHash> {
    let w = params.window;
    if tokens.len() < w {
        return Vec::new();
    }
    let n = tokens.len() - w + 1;
    let mut out = vec![WindowHash(0); n];
    let p = params.base % params.modulus;
    let top = params.top_power();
    let mut h = window_hash(&tokens[n - 1..], params).0;
    out[n - 1] = WindowHash(h);
    for j in (0..n - 1).rev() {
        let dropped = params.mul(params.reduce(tokens[j + w]), top);
        h = params.add(params.mul(params.sub(h, dropped), p), params.reduce(tokens[j]));
        out[j] = WindowHash(h);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Entry {
    hash: u64,
    doc: u32,
    offset: u32,
}

/// Location of a window occurrence: document id and token offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Occurrence {
    pub doc_id: u64,
    pub offset: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub base: u64,
    pub modulus: u64,
    pub window: usize,
    pub windows: usize,
    pub distinct_windows: usize,
    pub distinct_hashes: usize,
    /// Hash values shared by token-unequal windows.
    pub colliding_hashes: usize,
    pub max_count: usize,
}

/// Verified window-occurrence index over one corpus.
#[derive(Clone, Debug)]
pub struct DuplicateIndex<'c> {
    corpus: &'c Corpus,
    params: HashParams,
    entries: Vec<Entry>,
    /// Size of the equivalence class each entry belongs to.
    class_len: Vec<u32>,
}

impl<'c> DuplicateIndex<'c> {
    /// Indexes every window of every document.
    pub fn build(corpus: &'c Corpus, params: HashParams) -> Result<Self, IndexError> {
        params.validate()?;
        log::info!(
            "building duplicate index with P={} MOD={} window={}",
            params.base,
            params.modulus,
            params.window
        );
        let entries: Vec<Entry> = corpus
            .documents
            .par_iter()
            .enumerate()
            .flat_map_iter(|(d, doc)| {
                rolling_hashes(&doc.tokens, &params)
                    .into_iter()
                    .enumerate()
                    .map(move |(o, h)| Entry {
                        hash: h.0,
                        doc: d as u32,
                        offset: o as u32,
                    })
            })
            .collect();
        Ok(Self::from_entries(corpus, params, entries))
    }

    fn from_entries(corpus: &'c Corpus, params: HashParams, mut entries: Vec<Entry>) -> Self {
        let w = params.window;
        let window = |e: &Entry| {
            let t = &corpus.documents[e.doc as usize].tokens;
            &t[e.offset as usize..e.offset as usize + w]
        };
        // Total order, so the result is independent of the sort's scheduling.
        entries.par_sort_unstable_by(|a, b| {
            a.hash
                .cmp(&b.hash)
                .then_with(|| window(a).cmp(window(b)))
                .then_with(|| a.doc.cmp(&b.doc))
                .then_with(|| a.offset.cmp(&b.offset))
        });
        let mut class_len = vec![0u32; entries.len()];
        let mut start = 0;
        while start < entries.len() {
            let mut end = start + 1;
            while end < entries.len()
                && entries[end].hash == entries[start].hash
                && window(&entries[end]) == window(&entries[start])
            {
                end += 1;
            }
            for c in &mut class_len[start..end] {
                *c = (end - start) as u32;
            }
            start = end;
        }
        DuplicateIndex {
            corpus,
            params,
            entries,
            class_len,
        }
    }

    pub fn params(&self) -> &HashParams {
        &self.params
    }

    pub fn corpus(&self) -> &'c Corpus {
        self.corpus
    }

    /// Number of indexed windows.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn window_of(&self, e: &Entry) -> &[TokenId] {
        let t = &self.corpus.documents[e.doc as usize].tokens;
        &t[e.offset as usize..e.offset as usize + self.params.window]
    }

    fn bucket(&self, hash: WindowHash) -> std::ops::Range<usize> {
        let lo = self.entries.partition_point(|e| e.hash < hash.0);
        let hi = self.entries.partition_point(|e| e.hash <= hash.0);
        lo..hi
    }

    /// Start of the class in `bucket` whose window equals `window`.
    fn find_class(&self, window: &[TokenId]) -> Option<usize> {
        let range = self.bucket(window_hash(window, &self.params));
        let mut i = range.start;
        while i < range.end {
            match self.window_of(&self.entries[i]).cmp(window) {
                Ordering::Equal => return Some(i),
                Ordering::Greater => return None,
                Ordering::Less => i += self.class_len[i] as usize,
            }
        }
        None
    }

    /// Verified number of occurrences of `window` in the corpus, including
    /// the queried occurrence itself (a unique window returns 1, an absent
    /// one 0).
    pub fn duplicate_count(&self, window: &[TokenId]) -> Result<usize, IndexError> {
        if window.len() != self.params.window {
            return Err(IndexError::WindowLength {
                expected: self.params.window,
                got: window.len(),
            });
        }
        Ok(self
            .find_class(window)
            .map_or(0, |i| self.class_len[i] as usize))
    }

    /// Every occurrence of `window`, in (document position, offset) order.
    pub fn occurrences(&self, window: &[TokenId]) -> Result<Vec<Occurrence>, IndexError> {
        if window.len() != self.params.window {
            return Err(IndexError::WindowLength {
                expected: self.params.window,
                got: window.len(),
            });
        }
        Ok(match self.find_class(window) {
            None => Vec::new(),
            Some(i) => self.entries[i..i + self.class_len[i] as usize]
                .iter()
                .map(|e| Occurrence {
                    doc_id: self.corpus.documents[e.doc as usize].id,
                    offset: e.offset,
                })
                .collect(),
        })
    }

    /// Every verified class as (first occurrence, count), in index order.
    pub fn counts(&self) -> impl Iterator<Item = (Occurrence, usize)> + '_ {
        let mut i = 0;
        std::iter::from_fn(move || {
            if i >= self.entries.len() {
                return None;
            }
            let e = self.entries[i];
            let n = self.class_len[i] as usize;
            i += n;
            Some((
                Occurrence {
                    doc_id: self.corpus.documents[e.doc as usize].id,
                    offset: e.offset,
                },
                n,
            ))
        })
    }

    pub fn summary(&self) -> IndexSummary {
        let mut distinct_windows = 0;
        let mut max_count = 0;
        for (_, n) in self.counts() {
            distinct_windows += 1;
            max_count = max_count.max(n);
        }
        let mut distinct_hashes = 0;
        let mut colliding_hashes = 0;
        let mut i = 0;
        while i < self.entries.len() {
            let r = self.bucket(WindowHash(self.entries[i].hash));
            distinct_hashes += 1;
            if self.class_len[r.start] as usize != r.len() {
                colliding_hashes += 1;
            }
            i = r.end;
        }
        IndexSummary {
            base: self.params.base,
            modulus: self.params.modulus,
            window: self.params.window,
            windows: self.entries.len(),
            distinct_windows,
            distinct_hashes,
            colliding_hashes,
            max_count,
        }
    }

    /// Serializes the index: `MTXI`, P `u64`, MOD `u64`, window `u32`, entry
    /// count `u64`, then per entry hash as two `u64` (low, high), document id
    /// `u64` and offset `u32`, sorted by (hash, document id, offset).
    pub fn encode(&self) -> Vec<u8> {
        let mut triples: Vec<(u64, u64, u32)> = self
            .entries
            .iter()
            .map(|e| (e.hash, self.corpus.documents[e.doc as usize].id, e.offset))
            .collect();
        triples.sort_unstable();
        let mut out = Vec::with_capacity(32 + triples.len() * 28);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&self.params.base.to_le_bytes());
        out.extend_from_slice(&self.params.modulus.to_le_bytes());
        out.extend_from_slice(&(self.params.window as u32).to_le_bytes());
        out.extend_from_slice(&(triples.len() as u64).to_le_bytes());
        for (h, d, o) in triples {
            out.extend_from_slice(&h.to_le_bytes());
            out.extend_from_slice(&0u64.to_le_bytes());
            out.extend_from_slice(&d.to_le_bytes());
            out.extend_from_slice(&o.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        w.write_all(&self.encode()).map_err(io)?;
        w.flush().map_err(io)
    }

    /// Rebuilds an index from its serialized form. Every entry's hash is
    /// recomputed against `corpus` and counts are re-verified.
    pub fn decode(corpus: &'c Corpus, bytes: &[u8]) -> Result<Self, IndexError> {
        const HEAD: usize = 4 + 8 + 8 + 4 + 8;
        const ROW: usize = 8 + 8 + 8 + 4;
        let fmt = |offset, reason: &str| IndexError::Format {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < HEAD {
            return Err(fmt(bytes.len(), "short header"));
        }
        if &bytes[0..4] != INDEX_MAGIC {
            return Err(fmt(0, "bad magic"));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let params = HashParams {
            base: u64_at(4),
            modulus: u64_at(12),
            window: u32_at(20) as usize,
        };
        params.validate()?;
        let n = u64_at(24) as usize;
        if bytes.len() != HEAD + n * ROW {
            return Err(fmt(HEAD, "entry count does not match file length"));
        }
        let positions = corpus.position_map();
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let at = HEAD + i * ROW;
            if u64_at(at + 8) != 0 {
                return Err(fmt(at + 8, "hash exceeds 64 bits"));
            }
            let hash = u64_at(at);
            let doc_id = u64_at(at + 16);
            let offset = u32_at(at + 24);
            let stale = |reason: String| IndexError::Stale { entry: i, reason };
            let &doc = positions
                .get(&doc_id)
                .ok_or_else(|| stale(format!("unknown document {doc_id}")))?;
            let toks = &corpus.documents[doc].tokens;
            let end = offset as usize + params.window;
            if end > toks.len() {
                return Err(stale(format!("offset {offset} past end of document {doc_id}")));
            }
            if window_hash(&toks[offset as usize..end], &params).0 != hash {
                return Err(stale(format!("hash mismatch at document {doc_id} offset {offset}")));
            }
            entries.push(Entry {
                hash,
                doc: doc as u32,
                offset,
            });
        }
        Ok(Self::from_entries(corpus, params, entries))
    }

    pub fn load(corpus: &'c Corpus, path: &Path) -> Result<Self, IndexError> {
        let bytes = fs::read(path).map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(corpus, &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use proptest::prelude::*;
    use rand::Rng;

    fn corpus(docs: Vec<Vec<u32>>) -> Corpus {
        Corpus::from_documents(
            docs.into_iter()
                .enumerate()
                .map(|(i, tokens)| Document {
                    id: i as u64,
                    tokens,
                    modality: None,
                })
                .collect(),
        )
        .unwrap()
    }

    /// Direct evaluation of sum(c_i * P^i) with arbitrary precision-free
    /// u128 arithmetic on small inputs.
    fn naive_poly(tokens: &[u32], p: u128, m: u128) -> u64 {
        let mut acc = 0u128;
        let mut pow = 1u128;
        for &t in tokens {
            acc = (acc + (t as u128 % m) * pow) % m;
            pow = pow * p % m;
        }
        acc as u64
    }

    fn brute_count(c: &Corpus, window: &[u32]) -> usize {
        c.documents
            .iter()
            .map(|d| d.tokens.windows(window.len()).filter(|w| *w == window).count())
            .sum()
    }

    #[test]
    fn hash_fixtures() {
        let p = HashParams::default();
        assert_eq!(window_hash(&[0; 32], &p), WindowHash(0));
        assert_eq!(window_hash(&[0; 5], &p), WindowHash(0));
        assert_eq!(window_hash(&[1], &p), WindowHash(1));
        assert_eq!(window_hash(&[1, 2], &p), WindowHash(120_027));
        assert_eq!(window_hash(&[0, 1], &p), WindowHash(60_013));
        assert_eq!(window_hash(&[0, 0, 1], &p), WindowHash(60_013 * 60_013));
        assert_eq!(window_hash(&[3, 0, 2], &p), WindowHash(3 + 2 * 60_013 * 60_013));
    }

    #[test]
    fn hash_matches_naive_polynomial_with_wraparound() {
        let p = HashParams::default();
        let mut rng = crate::rng::seeded(11);
        for _ in 0..200 {
            let w: Vec<u32> = (0..32).map(|_| rng.random()).collect();
            assert_eq!(
                window_hash(&w, &p).0,
                naive_poly(&w, DEFAULT_BASE as u128, DEFAULT_MODULUS as u128)
            );
        }
    }

    #[test]
    fn window_arithmetic() {
        let c = corpus(vec![(0..32).collect()]);
        assert_eq!(DuplicateIndex::build(&c, HashParams::default()).unwrap().len(), 1);
        let c = corpus(vec![(0..64).collect()]);
        assert_eq!(DuplicateIndex::build(&c, HashParams::default()).unwrap().len(), 33);
        let c = corpus(vec![(0..31).collect()]);
        assert!(DuplicateIndex::build(&c, HashParams::default()).unwrap().is_empty());
    }

    #[test]
    fn shared_window_counted_twice() {
        let shared: Vec<u32> = (100..132).collect();
        let mut a: Vec<u32> = (0..10).collect();
        a.extend(&shared);
        let mut b = shared.clone();
        b.extend(200..240);
        let c = corpus(vec![a, b]);
        let idx = DuplicateIndex::build(&c, HashParams::default()).unwrap();
        assert_eq!(idx.duplicate_count(&shared).unwrap(), 2);
        assert_eq!(idx.duplicate_count(&[7; 32]).unwrap(), 0);
        let occ = idx.occurrences(&shared).unwrap();
        assert_eq!(
            occ,
            vec![Occurrence { doc_id: 0, offset: 10 }, Occurrence { doc_id: 1, offset: 0 }]
        );
        assert!(matches!(
            idx.duplicate_count(&shared[..31]),
            Err(IndexError::WindowLength { expected: 32, got: 31 })
        ));
    }

    #[test]
    fn tiny_modulus_collisions_never_inflate_counts() {
        let params = HashParams { base: 60013, modulus: 97, window: 32 };
        let mut rng = crate::rng::seeded(3);
        let docs: Vec<Vec<u32>> = (0..20)
            .map(|_| (0..200).map(|_| rng.random_range(0..5)).collect())
            .collect();
        let c = corpus(docs);
        let idx = DuplicateIndex::build(&c, params).unwrap();
        let s = idx.summary();
        assert!(s.colliding_hashes > 0, "test needs collisions: {s:?}");
        for d in &c.documents {
            for w in d.tokens.windows(32).step_by(7) {
                assert_eq!(idx.duplicate_count(w).unwrap(), brute_count(&c, w));
            }
        }
        let total: usize = idx.counts().map(|(_, n)| n).sum();
        assert_eq!(total, idx.len());
    }

    #[test]
    fn persistence_round_trip() {
        let mut rng = crate::rng::seeded(5);
        let docs: Vec<Vec<u32>> = (0..5)
            .map(|_| (0..120).map(|_| rng.random_range(0..3)).collect())
            .collect();
        let c = corpus(docs);
        let idx = DuplicateIndex::build(&c, HashParams { base: 7, modulus: 101, window: 32 }).unwrap();
        let bytes = idx.encode();
        let back = DuplicateIndex::decode(&c, &bytes).unwrap();
        assert_eq!(back.params(), idx.params());
        assert_eq!(back.summary(), idx.summary());
        for d in &c.documents {
            for w in d.tokens.windows(32) {
                assert_eq!(back.duplicate_count(w).unwrap(), idx.duplicate_count(w).unwrap());
            }
        }

        let mut corrupted = bytes.clone();
        let last = corrupted.len() - 28;
        corrupted[last] ^= 1;
        assert!(matches!(DuplicateIndex::decode(&c, &corrupted), Err(IndexError::Stale { .. })));
        assert!(matches!(DuplicateIndex::decode(&c, &bytes[..40]), Err(IndexError::Format { .. })));
    }

    proptest! {
        #[test]
        fn rolling_equals_recompute(
            tokens in prop::collection::vec(any::<u32>(), 32..120),
            small in any::<bool>(),
        ) {
            let params = if small {
                HashParams { base: 60013, modulus: 97, window: 32 }
            } else {
                HashParams::default()
            };
            let rolled = rolling_hashes(&tokens, &params);
            prop_assert_eq!(rolled.len(), tokens.len() - 31);
            for (j, h) in rolled.iter().enumerate() {
                prop_assert_eq!(*h, window_hash(&tokens[j..j + 32], &params));
                prop_assert!(h.0 < params.modulus);
            }
        }

        #[test]
        fn counts_match_brute_force(
            docs in prop::collection::vec(prop::collection::vec(0u32..3, 0..90), 1..6),
        ) {
            let c = corpus(docs);
            let idx = DuplicateIndex::build(&c, HashParams { base: 60013, modulus: 97, window: 32 }).unwrap();
            for d in &c.documents {
                for w in d.tokens.windows(32) {
                    prop_assert_eq!(idx.duplicate_count(w).unwrap(), brute_count(&c, w));
                }
            }
        }
    }
}
