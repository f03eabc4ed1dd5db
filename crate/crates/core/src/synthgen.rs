//! Seeded synthetic corpora with planted duplicates and templates, and a
//! known memorization-probability rule.
//!
//! Token layout:
//!
//! - `[0, 1024)`: numerals, text `" {i}"`. Only incrementing plants use them.
//! - `[1024, 2048)`: plant words (`" q..."`), used by random and repeating
//!   plants.
//! - `[2048, V)`: background words, drawn Zipf-distributed (or uniform).
//!
//! Every plant's first copy starts at offset 0 of its own document, so it
//! becomes that document's sample; further copies go to 65-token slots
//! (64 tokens plus a background gap) at offsets 65, 130, ... of random
//! documents. Because plant and background tokens never mix, a planted
//! continuation can only match inside planted copies, which makes the true
//! duplicate counts in the manifest exact.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Zipf};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Document, TokenId};
use crate::features::{FeatureRecord, FrequencyStats, TemplateKind, TemplateVerdict, Vocabulary};
use crate::predictor::sigmoid;
use crate::rng;
use crate::taxonomy::{assign_category, TaxonomyCategory, TaxonomyConfig};
use crate::{HALF_WINDOW, SAMPLE_LEN};

pub const NUMERAL_TOKENS: u32 = 1024;
pub const PLANT_START: u32 = NUMERAL_TOKENS;
pub const PLANT_TOKENS: u32 = 1024;
pub const BACKGROUND_START: u32 = PLANT_START + PLANT_TOKENS;
/// Smallest vocabulary leaving room for background words.
pub const MIN_VOCABULARY: u32 = BACKGROUND_START + 16;
const SLOT: usize = SAMPLE_LEN + 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("vocabulary_size must be at least {MIN_VOCABULARY}, got {0}")]
    Vocabulary(u32),
    #[error("document_length must be at least {SAMPLE_LEN}, got {0}")]
    DocumentLength(usize),
    #[error("zipf_exponent must be positive and finite, got {0}")]
    Exponent(f64),
    #[error("plant groups need duplicates >= 1")]
    Duplicates,
    #[error(
        "plant budget exceeded: {plants} plants need {plants} documents ({documents} available) \
         and {copies} extra copies need {copies} slots ({slots} available)"
    )]
    Budget { plants: usize, documents: usize, copies: usize, slots: usize },
    #[error("coefficients: {0}")]
    Coefficients(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    Random,
    Repeating,
    Incrementing,
}

impl PlantKind {
    pub fn expected_template(&self) -> TemplateKind {
        match self {
            PlantKind::Random => TemplateKind::None,
            PlantKind::Repeating => TemplateKind::Repeating,
            PlantKind::Incrementing => TemplateKind::Incrementing,
        }
    }
}

/// `count` distinct sequences of one kind, each planted `duplicates` times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantGroup {
    pub kind: PlantKind,
    pub duplicates: u64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryCoefficients {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Memorization-probability rule: within each taxonomy category,
/// `P(memorized) = sigmoid(weights . z + bias)` over z-scored `features`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub features: Vec<String>,
    pub recitation: CategoryCoefficients,
    pub reconstruction: CategoryCoefficients,
    pub recollection: CategoryCoefficients,
}

impl Coefficients {
    pub fn for_category(&self, c: TaxonomyCategory) -> &CategoryCoefficients {
        match c {
            TaxonomyCategory::Recitation => &self.recitation,
            TaxonomyCategory::Reconstruction => &self.reconstruction,
            TaxonomyCategory::Recollection => &self.recollection,
        }
    }

    pub fn zero(features: &[&str]) -> Self {
        let z = CategoryCoefficients { weights: vec![0.0; features.len()], bias: 0.0 };
        Coefficients {
            features: features.iter().map(|s| s.to_string()).collect(),
            recitation: z.clone(),
            reconstruction: z.clone(),
            recollection: z,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        for f in &self.features {
            if !crate::features::is_feature_name(f) {
                return Err(SynthError::Coefficients(format!("unknown feature {f:?}")));
            }
        }
        for c in TaxonomyCategory::ALL {
            let cc = self.for_category(c);
            if cc.weights.len() != self.features.len() {
                return Err(SynthError::Coefficients(format!(
                    "{c}: {} weights for {} features",
                    cc.weights.len(),
                    self.features.len()
                )));
            }
            if cc.weights.iter().chain([&cc.bias]).any(|w| !w.is_finite()) {
                return Err(SynthError::Coefficients(format!("{c}: non-finite coefficient")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub vocabulary_size: u32,
    pub documents: usize,
    pub document_length: usize,
    pub zipf_exponent: f64,
    pub uniform_background: bool,
    pub plants: Vec<PlantGroup>,
    pub coefficients: Coefficients,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            vocabulary_size: 8192,
            documents: 200,
            document_length: 2049,
            zipf_exponent: 1.1,
            uniform_background: false,
            plants: vec![
                PlantGroup { kind: PlantKind::Random, duplicates: 6, count: 10 },
                PlantGroup { kind: PlantKind::Repeating, duplicates: 1, count: 10 },
                PlantGroup { kind: PlantKind::Incrementing, duplicates: 2, count: 10 },
            ],
            coefficients: default_coefficients(),
        }
    }
}

/// Duplicates and low continuation perplexity raise memorization overall,
/// with category-specific emphasis.
pub fn default_coefficients() -> Coefficients {
    Coefficients {
        features: vec!["duplicate_count".into(), "continuation_perplexity".into(), "huffman_bits".into()],
        recitation: CategoryCoefficients { weights: vec![1.5, -1.0, -0.5], bias: 0.5 },
        reconstruction: CategoryCoefficients { weights: vec![0.5, -1.5, -1.0], bias: 0.0 },
        recollection: CategoryCoefficients { weights: vec![0.5, -2.0, 0.5], bias: -1.5 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub plant_id: usize,
    pub kind: PlantKind,
    pub requested_duplicates: u64,
    /// Document whose offset-0 sample is this plant.
    pub doc_id: u64,
    /// Every planted copy as (document id, offset), primary first.
    pub positions: Vec<(u64, usize)>,
    /// Inclusive corpus occurrences of the plant's continuation, counting
    /// matches inside other planted copies too.
    pub true_duplicate_count: u64,
    pub expected_template: TemplateKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: SynthSpec,
    pub plants: Vec<PlantRecord>,
}

/// Deterministic pronounceable word for `index` with no digits.
fn word(index: u32, prefix: &str) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let base = (CONS.len() * VOWELS.len()) as u32;
    let mut s = String::from(" ");
    s.push_str(prefix);
    let mut k = index;
    for _ in 0..2 {
        let syl = (k % base) as usize;
        s.push(CONS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
        k /= base;
    }
    while k > 0 {
        let syl = (k % base) as usize;
        s.push(CONS[syl / VOWELS.len()] as char);
        s.push(VOWELS[syl % VOWELS.len()] as char);
        k /= base;
    }
    s
}

pub fn synth_vocabulary(vocabulary_size: u32) -> Vocabulary {
    Vocabulary::from_pairs((0..vocabulary_size).map(|t| {
        let text = if t < PLANT_START {
            format!(" {t}")
        } else if t < BACKGROUND_START {
            word(t - PLANT_START, "q")
        } else {
            word(t - BACKGROUND_START, "")
        };
        (t, text)
    }))
}

fn plant_sequence(kind: PlantKind, r: &mut rng::Rng) -> Vec<TokenId> {
    match kind {
        PlantKind::Random => (0..SAMPLE_LEN).map(|_| PLANT_START + r.random_range(0..PLANT_TOKENS)).collect(),
        PlantKind::Repeating => {
            let unit: Vec<TokenId> = (0..r.random_range(1..=16usize))
                .map(|_| PLANT_START + r.random_range(0..PLANT_TOKENS))
                .collect();
            unit.iter().copied().cycle().take(SAMPLE_LEN).collect()
        }
        PlantKind::Incrementing => {
            let step = r.random_range(1..=3u32);
            let start = r.random_range(0..NUMERAL_TOKENS - step * (SAMPLE_LEN as u32 - 1));
            (0..SAMPLE_LEN as u32).map(|i| start + i * step).collect()
        }
    }
}

fn occurrences(haystack: &[TokenId], needle: &[TokenId]) -> u64 {
    haystack.windows(needle.len()).filter(|w| *w == needle).count() as u64
}

pub fn generate_corpus(spec: &SynthSpec) -> Result<(Corpus, Manifest), SynthError> {
    if spec.vocabulary_size < MIN_VOCABULARY {
        return Err(SynthError::Vocabulary(spec.vocabulary_size));
    }
    if spec.document_length < SAMPLE_LEN {
        return Err(SynthError::DocumentLength(spec.document_length));
    }
    if !(spec.zipf_exponent.is_finite() && spec.zipf_exponent > 0.0) {
        return Err(SynthError::Exponent(spec.zipf_exponent));
    }
    if spec.plants.iter().any(|g| g.duplicates == 0) {
        return Err(SynthError::Duplicates);
    }
    spec.coefficients.validate()?;

    let plants: usize = spec.plants.iter().map(|g| g.count).sum();
    let copies: usize = spec.plants.iter().map(|g| g.count * (g.duplicates as usize - 1)).sum();
    let slots_per_doc = (spec.document_length + 1) / SLOT - 1;
    let slots = slots_per_doc * spec.documents;
    if plants > spec.documents || copies > slots {
        return Err(SynthError::Budget { plants, documents: spec.documents, copies, slots });
    }

    let background = spec.vocabulary_size - BACKGROUND_START;
    let bg_seed = rng::subseed(spec.seed, "background");
    let zipf = Zipf::new(f64::from(background), spec.zipf_exponent).expect("validated exponent");
    let mut docs: Vec<Vec<TokenId>> = (0..spec.documents as u64)
        .into_par_iter()
        .map(|d| {
            let mut r = rng::derived(bg_seed, d);
            (0..spec.document_length)
                .map(|_| {
                    let k = if spec.uniform_background {
                        r.random_range(0..background)
                    } else {
                        (zipf.sample(&mut r) as u32 - 1).min(background - 1)
                    };
                    BACKGROUND_START + k
                })
                .collect()
        })
        .collect();

    let mut r = rng::seeded(rng::subseed(spec.seed, "plants"));
    let mut sequences = Vec::with_capacity(plants);
    for g in &spec.plants {
        for _ in 0..g.count {
            sequences.push((g.kind, g.duplicates, plant_sequence(g.kind, &mut r)));
        }
    }
    let mut primary: Vec<usize> = (0..spec.documents).collect();
    primary.shuffle(&mut r);
    let mut free: Vec<(usize, usize)> = (0..spec.documents)
        .flat_map(|d| (1..=slots_per_doc).map(move |k| (d, k * SLOT)))
        .collect();
    free.shuffle(&mut r);
    let mut free = free.into_iter();

    let mut records = Vec::with_capacity(plants);
    for (p, (kind, dups, seq)) in sequences.iter().enumerate() {
        let mut positions = vec![(primary[p], 0usize)];
        for _ in 1..*dups {
            positions.push(free.next().expect("budget checked"));
        }
        for &(d, off) in &positions {
            docs[d][off..off + SAMPLE_LEN].copy_from_slice(seq);
        }
        records.push(PlantRecord {
            plant_id: p,
            kind: *kind,
            requested_duplicates: *dups,
            doc_id: primary[p] as u64,
            positions: positions.into_iter().map(|(d, o)| (d as u64, o)).collect(),
            true_duplicate_count: 0,
            expected_template: kind.expected_template(),
        });
    }
    for (p, (_, _, seq)) in sequences.iter().enumerate() {
        let cont = &seq[HALF_WINDOW..];
        records[p].true_duplicate_count = sequences
            .iter()
            .map(|(_, d, other)| d * occurrences(other, cont))
            .sum();
    }

    let documents = docs
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| Document { id: i as u64, tokens, modality: None })
        .collect();
    let corpus = Corpus::new(documents, spec.vocabulary_size)?;
    Ok((corpus, Manifest { seed: spec.seed, spec: spec.clone(), plants: records }))
}

/// Column-wise population z-scores; constant columns become 0.
fn zscores(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norm = crate::predictor::Normalizer::fit(rows);
    rows.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| if norm.constant[j] { 0.0 } else { (v - norm.mean[j]) / norm.std[j] })
                .collect()
        })
        .collect()
}

/// Memorization probability of each record under `coefficients`, features
/// z-scored over `records`.
pub fn memorization_probabilities(
    records: &[FeatureRecord],
    coefficients: &Coefficients,
    taxonomy: &TaxonomyConfig,
) -> Result<Vec<f64>, SynthError> {
    coefficients.validate()?;
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            coefficients
                .features
                .iter()
                .map(|f| {
                    r.feature(f).ok_or_else(|| {
                        SynthError::Coefficients(format!("record {} lacks feature {f}", r.sample_id))
                    })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let z = zscores(&rows);
    Ok(records
        .iter()
        .zip(&z)
        .map(|(r, zr)| {
            let c = coefficients.for_category(assign_category(r, taxonomy));
            sigmoid(zr.iter().zip(&c.weights).map(|(a, w)| a * w).sum::<f64>() + c.bias)
        })
        .collect())
}

/// Seeded Bernoulli draws from [`memorization_probabilities`].
pub fn simulate_memorization(
    records: &[FeatureRecord],
    coefficients: &Coefficients,
    taxonomy: &TaxonomyConfig,
    seed: u64,
) -> Result<Vec<bool>, SynthError> {
    let p = memorization_probabilities(records, coefficients, taxonomy)?;
    let mut r = rng::seeded(rng::subseed(seed, "memorization"));
    Ok(p.into_iter().map(|p| r.random_bool(p)).collect())
}

/// Coefficients with opposite-signed slopes between categories: within
/// recitation and recollection, higher `huffman_bits` raises memorization;
/// within reconstruction it lowers it. Biases keep each category's rate near
/// one half, so a single pooled slope cannot fit all three.
pub fn simpson_coefficients() -> Coefficients {
    Coefficients {
        features: vec!["huffman_bits".into()],
        recitation: CategoryCoefficients { weights: vec![5.0], bias: -2.5 },
        reconstruction: CategoryCoefficients { weights: vec![-5.0], bias: -4.0 },
        recollection: CategoryCoefficients { weights: vec![5.0], bias: -2.5 },
    }
}

/// Feature-level synthetic records, a third in each taxonomy category, with
/// category-dependent feature distributions. Labels are left unset.
pub fn synthetic_feature_records(n: usize, seed: u64) -> Vec<FeatureRecord> {
    use rand_distr::Normal;
    let mut r = rng::seeded(rng::subseed(seed, "feature-records"));
    let unit: Normal<f64> = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|i| {
            let cat = TaxonomyCategory::ALL[i % 3];
            let (dup, template, huff_mean) = match cat {
                TaxonomyCategory::Recitation => (r.random_range(6..60u64), TemplateVerdict::NONE, 300.0),
                TaxonomyCategory::Reconstruction => {
                    let k = if r.random_bool(0.5) { TemplateKind::Repeating } else { TemplateKind::Incrementing };
                    (r.random_range(1..6u64), TemplateVerdict::new(k, r.random_range(1..5)), 230.0)
                }
                TaxonomyCategory::Recollection => (r.random_range(1..6u64), TemplateVerdict::NONE, 300.0),
            };
            let huff = (huff_mean + 40.0 * unit.sample(&mut r)).max(16.0).round() as u64;
            let ppl = (1.5 + 0.6 * unit.sample(&mut r)).exp();
            let freq: f64 = 10f64.powf(2.0 + unit.sample(&mut r));
            FeatureRecord {
                sample_id: i as u64,
                duplicate_count: dup,
                prompt_duplicate_count: dup,
                frequency_stats: FrequencyStats {
                    min: freq * 0.1,
                    q25: freq * 0.5,
                    median: freq,
                    mean: freq * 1.5,
                    q75: freq * 2.0,
                    max: freq * 10.0,
                },
                huffman_bits: huff,
                template,
                semantic_match_count: r.random_range(0..4),
                textual_match_count: 0,
                prompt_perplexity: Some((2.0 + 0.5 * unit.sample(&mut r)).exp()),
                continuation_perplexity: Some(ppl),
                full_perplexity: Some(ppl.sqrt() * 2.0),
                memorized: None,
                modality: None,
                taxonomy: Some(cat),
            }
        })
        .collect()
}
