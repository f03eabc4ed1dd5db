//! Tokenized corpora, prompt/continuation samples and memorization labels.
//!
//! Two on-disk corpus formats are supported:
//!
//! - binary (`MTXC`): a 16-byte header (`b"MTXC"`, version `u32`, vocabulary
//!   size `u32`, token width `u8` of 2 or 4, three reserved bytes) followed by
//!   `doc_len: u32` + `doc_len` tokens per document, all little-endian.
//!   Document ids are positional.
//! - JSONL: `{"id": u64, "tokens": [u32...], "modality": "code"}` per line.
//!
//! Label files carry one decimal sample id per line.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{HALF_WINDOW, SAMPLE_LEN};

pub type TokenId = u32;

pub const CORPUS_MAGIC: &[u8; 4] = b"MTXC";
pub const CORPUS_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header at byte {offset}: {reason}")]
    Header { offset: usize, reason: String },
    #[error("token {token} at byte {offset} is outside vocabulary of size {vocabulary_size}")]
    TokenOutOfRange {
        token: u32,
        offset: usize,
        vocabulary_size: u32,
    },
    #[error("truncated document {doc} at byte {offset}: expected {expected} more bytes, found {found}")]
    Truncated {
        doc: u64,
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
    #[error("duplicate document id {0}")]
    DuplicateDocument(u64),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Binary,
    Jsonl,
}

impl CorpusFormat {
    /// Guesses the format from a file extension; anything but `.jsonl`/`.json`
    /// is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Binary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub tokens: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
}

/// Corpus-wide occurrence counts, dense over the vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenCounts(Vec<u64>);

impl TokenCounts {
    pub fn from_documents(documents: &[Document], vocabulary_size: u32) -> Self {
        let mut counts = vec![0u64; vocabulary_size as usize];
        for doc in documents {
            for &t in &doc.tokens {
                counts[t as usize] += 1;
            }
        }
        TokenCounts(counts)
    }

    /// Count for `token`; tokens never seen (or beyond the vocabulary) count 0.
    pub fn get(&self, token: TokenId) -> u64 {
        self.0.get(token as usize).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Nonzero entries in token order.
    pub fn iter(&self) -> impl Iterator<Item = (TokenId, u64)> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(t, &c)| (t as TokenId, c))
    }

    pub fn is_empty(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }
}

/// An immutable tokenized corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocabulary_size: u32,
    pub token_counts: TokenCounts,
}

impl Corpus {
    /// Builds a corpus, validating tokens against `vocabulary_size`.
    pub fn new(documents: Vec<Document>, vocabulary_size: u32) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(documents.len());
        for doc in &documents {
            if !seen.insert(doc.id) {
                return Err(CorpusError::DuplicateDocument(doc.id));
            }
            if let Some(&t) = doc.tokens.iter().find(|&&t| t >= vocabulary_size) {
                return Err(CorpusError::TokenOutOfRange {
                    token: t,
                    offset: 0,
                    vocabulary_size,
                });
            }
        }
        let token_counts = TokenCounts::from_documents(&documents, vocabulary_size);
        Ok(Corpus {
            documents,
            vocabulary_size,
            token_counts,
        })
    }

    /// Builds a corpus whose vocabulary is just large enough for its tokens.
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let vocab = documents
            .iter()
            .flat_map(|d| d.tokens.iter().copied())
            .max()
            .map_or(0, |m| m + 1);
        Corpus::new(documents, vocab)
    }

    pub fn total_tokens(&self) -> u64 {
        self.documents.iter().map(|d| d.tokens.len() as u64).sum()
    }

    /// Position of each document id in `documents`.
    pub fn position_map(&self) -> HashMap<u64, usize> {
        self.documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id, i))
            .collect()
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    match format {
        CorpusFormat::Binary => {
            let bytes = fs::read(path).map_err(io_err(path))?;
            parse_binary(&bytes)
        }
        CorpusFormat::Jsonl => {
            let file = fs::File::open(path).map_err(io_err(path))?;
            parse_jsonl(BufReader::new(file))
        }
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn parse_binary(bytes: &[u8]) -> Result<Corpus, CorpusError> {
    if bytes.len() < HEADER_LEN {
        return Err(CorpusError::Header {
            offset: bytes.len(),
            reason: format!("need {HEADER_LEN} header bytes, file has {}", bytes.len()),
        });
    }
    if &bytes[0..4] != CORPUS_MAGIC {
        return Err(CorpusError::Header {
            offset: 0,
            reason: format!("bad magic {:?}", &bytes[0..4]),
        });
    }
    let version = read_u32(bytes, 4);
    if version != CORPUS_VERSION {
        return Err(CorpusError::Header {
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let vocabulary_size = read_u32(bytes, 8);
    let width = bytes[12] as usize;
    if width != 2 && width != 4 {
        return Err(CorpusError::Header {
            offset: 12,
            reason: format!("token width must be 2 or 4, got {width}"),
        });
    }

    let mut documents = Vec::new();
    let mut pos = HEADER_LEN;
    while pos < bytes.len() {
        let doc = documents.len() as u64;
        if bytes.len() - pos < 4 {
            return Err(CorpusError::Truncated {
                doc,
                offset: pos,
                expected: 4,
                found: bytes.len() - pos,
            });
        }
        let len = read_u32(bytes, pos) as usize;
        pos += 4;
        let need = len * width;
        if bytes.len() - pos < need {
            return Err(CorpusError::Truncated {
                doc,
                offset: pos,
                expected: need,
                found: bytes.len() - pos,
            });
        }
        let mut tokens = Vec::with_capacity(len);
        for i in 0..len {
            let at = pos + i * width;
            let t = if width == 2 {
                u16::from_le_bytes([bytes[at], bytes[at + 1]]) as u32
            } else {
                read_u32(bytes, at)
            };
            if t >= vocabulary_size {
                return Err(CorpusError::TokenOutOfRange {
                    token: t,
                    offset: at,
                    vocabulary_size,
                });
            }
            tokens.push(t);
        }
        pos += need;
        documents.push(Document {
            id: doc,
            tokens,
            modality: None,
        });
    }
    let token_counts = TokenCounts::from_documents(&documents, vocabulary_size);
    Ok(Corpus {
        documents,
        vocabulary_size,
        token_counts,
    })
}

pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Corpus, CorpusError> {
    let mut documents = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Line {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Line {
            line: line_no,
            reason: e.to_string(),
        })?;
        documents.push(doc);
    }
    Corpus::from_documents(documents)
}

/// Token width used when writing: 2 bytes whenever the vocabulary fits.
pub fn binary_token_width(vocabulary_size: u32) -> u8 {
    if vocabulary_size <= 1 << 16 {
        2
    } else {
        4
    }
}

pub fn encode_binary(corpus: &Corpus) -> Vec<u8> {
    let width = binary_token_width(corpus.vocabulary_size);
    let mut out = Vec::with_capacity(HEADER_LEN + corpus.total_tokens() as usize * width as usize);
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
    out.extend_from_slice(&corpus.vocabulary_size.to_le_bytes());
    out.push(width);
    out.extend_from_slice(&[0, 0, 0]);
    for doc in &corpus.documents {
        out.extend_from_slice(&(doc.tokens.len() as u32).to_le_bytes());
        for &t in &doc.tokens {
            if width == 2 {
                out.extend_from_slice(&(t as u16).to_le_bytes());
            } else {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
    }
    out
}

pub fn write_binary(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    fs::write(path, encode_binary(corpus)).map_err(io_err(path))
}

pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for doc in &corpus.documents {
        let line = serde_json::to_string(doc).expect("document serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// A 64-token training excerpt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub doc_id: u64,
    pub offset: usize,
    pub prompt: [TokenId; HALF_WINDOW],
    pub continuation: [TokenId; HALF_WINDOW],
    /// `None` when memorization status is unknown (inference-only runs).
    pub memorized: Option<bool>,
    pub modality: Option<String>,
}

impl Sample {
    pub fn tokens(&self) -> Vec<TokenId> {
        let mut v = Vec::with_capacity(SAMPLE_LEN);
        v.extend_from_slice(&self.prompt);
        v.extend_from_slice(&self.continuation);
        v
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractOptions {
    /// Token offset of the (first) window inside each document.
    pub offset: usize,
    /// Take every non-overlapping 64-token window from `offset` onward
    /// instead of one per document.
    pub multi_window: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
    /// Documents too short to yield a window at the requested offset.
    pub skipped: usize,
}

/// Sample id for window `offset` of document `doc_id`.
///
/// Single-window extraction uses the document id itself; multi-window ids
/// pack the document id in the high 32 bits and the offset in the low 32.
pub fn sample_id(doc_id: u64, offset: usize, multi_window: bool) -> u64 {
    if multi_window {
        (doc_id << 32) | offset as u64
    } else {
        doc_id
    }
}

pub fn extract_samples(corpus: &Corpus, opts: ExtractOptions) -> SampleSet {
    let mut set = SampleSet::default();
    for doc in &corpus.documents {
        let mut start = opts.offset;
        if start + SAMPLE_LEN > doc.tokens.len() {
            set.skipped += 1;
            continue;
        }
        while start + SAMPLE_LEN <= doc.tokens.len() {
            let w = &doc.tokens[start..start + SAMPLE_LEN];
            set.samples.push(Sample {
                id: sample_id(doc.id, start, opts.multi_window),
                doc_id: doc.id,
                offset: start,
                prompt: w[..HALF_WINDOW].try_into().unwrap(),
                continuation: w[HALF_WINDOW..].try_into().unwrap(),
                memorized: None,
                modality: doc.modality.clone(),
            });
            if !opts.multi_window {
                break;
            }
            start += SAMPLE_LEN;
        }
    }
    set
}

pub fn read_label_file(path: &Path) -> Result<Vec<u64>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_labels(&text)
}

pub fn parse_labels(text: &str) -> Result<Vec<u64>, CorpusError> {
    let mut ids = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id = line.parse::<u64>().map_err(|e| CorpusError::Line {
            line: i + 1,
            reason: format!("bad sample id {line:?}: {e}"),
        })?;
        ids.push(id);
    }
    Ok(ids)
}

pub fn write_label_file(path: &Path, ids: &[u64]) -> Result<(), CorpusError> {
    let mut s = String::new();
    for id in ids {
        s.push_str(&id.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReport {
    pub labeled: usize,
    /// Ids listed more than once (each reported once).
    pub duplicates: Vec<u64>,
    /// Ids that match no sample.
    pub rejects: Vec<u64>,
}

/// Marks exactly the listed samples as memorized and every other sample as
/// not memorized.
pub fn attach_labels(samples: &mut [Sample], memorized_ids: &[u64]) -> LabelReport {
    let mut listed = HashSet::with_capacity(memorized_ids.len());
    let mut duplicates = BTreeSet::new();
    for &id in memorized_ids {
        if !listed.insert(id) {
            duplicates.insert(id);
        }
    }
    let mut matched = HashSet::new();
    for s in samples.iter_mut() {
        let m = listed.contains(&s.id);
        if m {
            matched.insert(s.id);
        }
        s.memorized = Some(m);
    }
    for &id in &duplicates {
        log::warn!("label file lists sample {id} more than once");
    }
    let rejects: BTreeSet<u64> = listed.difference(&matched).copied().collect();
    LabelReport {
        labeled: matched.len(),
        duplicates: duplicates.into_iter().collect(),
        rejects: rejects.into_iter().collect(),
    }
}
