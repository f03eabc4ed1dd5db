//! Python bindings: hashing, template and taxonomy helpers, logistic
//! regression, synthetic corpora, cohort tables and pipeline stages.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use memtax::config::LoadedConfig;
use memtax::features::{self, FrequencyStats};
use memtax::pipeline::{PipelineError, Run, Stage};
use memtax::predictor::{self, FitOptions, RegressionModel};
use memtax::synthgen::{self, PlantGroup, PlantKind, SynthSpec};
use memtax::taxonomy::{self, Precedence};
use memtax::{
    cohort, stats, Corpus, DuplicateIndex, Document, FeatureRecord, HashParams, TaxonomyCategory, TaxonomyConfig,
    TemplateKind, TemplateVerdict,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn hash_params(base: u64, modulus: u64, window: usize) -> PyResult<HashParams> {
    let p = HashParams { base, modulus, window };
    p.validate().map_err(value_err)?;
    Ok(p)
}

/// Polynomial hash `sum(t_i * base**i) mod modulus` of a token list.
#[pyfunction]
#[pyo3(signature = (tokens, base = memtax::dupindex::DEFAULT_BASE, modulus = memtax::dupindex::DEFAULT_MODULUS))]
fn window_hash(tokens: Vec<u32>, base: u64, modulus: u64) -> PyResult<u64> {
    let p = hash_params(base, modulus, tokens.len().max(1))?;
    Ok(memtax::dupindex::window_hash(&tokens, &p).0)
}

fn corpus_from(documents: Vec<Vec<u32>>) -> PyResult<Corpus> {
    let docs = documents
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| Document { id: i as u64, tokens, modality: None })
        .collect();
    Corpus::from_documents(docs).map_err(value_err)
}

/// Verified occurrence counts of each window (inclusive) in a corpus given
/// as token lists.
#[pyfunction]
#[pyo3(signature = (documents, windows, window = memtax::HALF_WINDOW))]
fn duplicate_counts(documents: Vec<Vec<u32>>, windows: Vec<Vec<u32>>, window: usize) -> PyResult<Vec<usize>> {
    let corpus = corpus_from(documents)?;
    let params = hash_params(memtax::dupindex::DEFAULT_BASE, memtax::dupindex::DEFAULT_MODULUS, window)?;
    let index = DuplicateIndex::build(&corpus, params).map_err(value_err)?;
    windows.iter().map(|w| index.duplicate_count(w).map_err(value_err)).collect()
}

/// `(kind, stride)` with kind one of "repeating", "incrementing", "none".
#[pyfunction]
fn detect_template(text: &str) -> (String, Option<usize>) {
    let v = features::detect_template(text);
    (v.kind.as_str().to_string(), v.stride)
}

/// Total Huffman-coded bits of a token sequence.
#[pyfunction]
fn huffman_length(tokens: Vec<u32>) -> PyResult<u64> {
    features::huffman_length(&tokens).map_err(value_err)
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    features::levenshtein(a, b)
}

fn taxonomy_config(threshold: u64, precedence: &str) -> PyResult<TaxonomyConfig> {
    let precedence = match precedence {
        "recitation_first" => Precedence::RecitationFirst,
        "reconstruction_first" => Precedence::ReconstructionFirst,
        other => return Err(PyValueError::new_err(format!("unknown precedence {other:?}"))),
    };
    let cfg = TaxonomyConfig { recitation_threshold: threshold, precedence };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Category of a sample from its duplicate count and template kind.
#[pyfunction]
#[pyo3(signature = (duplicate_count, template = "none", threshold = 6, precedence = "recitation_first"))]
fn assign_category(duplicate_count: u64, template: &str, threshold: u64, precedence: &str) -> PyResult<String> {
    let kind: TemplateKind = template.parse().map_err(PyValueError::new_err)?;
    let record = FeatureRecord {
        sample_id: 0,
        duplicate_count,
        prompt_duplicate_count: 0,
        frequency_stats: FrequencyStats::default(),
        huffman_bits: 0,
        template: match kind {
            TemplateKind::None => TemplateVerdict::NONE,
            k => TemplateVerdict::new(k, 1),
        },
        semantic_match_count: 0,
        textual_match_count: 0,
        prompt_perplexity: None,
        continuation_perplexity: None,
        full_perplexity: None,
        memorized: None,
        modality: None,
        taxonomy: None,
    };
    let cfg = taxonomy_config(threshold, precedence)?;
    Ok(taxonomy::assign_category(&record, &cfg).as_str().to_string())
}

/// KL(p || q) in nats between two mass vectors on shared bins.
#[pyfunction]
#[pyo3(signature = (p, q, epsilon = stats::DEFAULT_EPSILON))]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>, epsilon: f64) -> PyResult<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(PyValueError::new_err("p and q need the same nonzero length"));
    }
    Ok(stats::kl_masses(&p, &q, epsilon))
}

/// Balanced-class-weight L2 logistic regression on standardized features.
#[pyclass(name = "LogisticModel", module = "memtax")]
struct PyLogisticModel {
    inner: RegressionModel,
}

#[pymethods]
impl PyLogisticModel {
    #[new]
    #[pyo3(signature = (x, y, l2 = 1.0, tolerance = 1e-6, max_iterations = 1000, seed = 0))]
    fn fit(x: Vec<Vec<f64>>, y: Vec<bool>, l2: f64, tolerance: f64, max_iterations: usize, seed: u64) -> PyResult<Self> {
        if x.len() != y.len() {
            return Err(PyValueError::new_err(format!("{} rows but {} labels", x.len(), y.len())));
        }
        let d = x.first().map_or(0, Vec::len);
        let names: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
        let opts = FitOptions { lambda: l2, tolerance, max_iterations };
        let inner = predictor::train_logreg(&names, &x, &y, &opts, seed).map_err(value_err)?;
        Ok(PyLogisticModel { inner })
    }

    /// Weights in standardized feature space.
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    /// Weights per unit of each raw feature (0 for constant features).
    #[getter]
    fn raw_weights(&self) -> Vec<f64> {
        let n = &self.inner.normalizer;
        self.inner
            .weights
            .iter()
            .zip(&n.std)
            .zip(&n.constant)
            .map(|((w, s), &c)| if c { 0.0 } else { w / s })
            .collect()
    }

    #[getter]
    fn bias(&self) -> f64 {
        self.inner.bias
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.meta.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.meta.iterations
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        x.iter().map(|row| predictor::predict(&self.inner, row).map_err(value_err)).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(value_err)
    }
}

fn plant_kind(s: &str) -> PyResult<PlantKind> {
    match s {
        "random" => Ok(PlantKind::Random),
        "repeating" => Ok(PlantKind::Repeating),
        "incrementing" => Ok(PlantKind::Incrementing),
        other => Err(PyValueError::new_err(format!("unknown plant kind {other:?}"))),
    }
}

/// Seeded synthetic corpus. `plants` holds `(kind, duplicates, count)`
/// triples; the default plant mix is used when it is `None`. Returns the
/// documents as token lists and the planting manifest as JSON.
#[pyfunction]
#[pyo3(signature = (seed = 0, documents = 200, document_length = 2049, vocabulary_size = 8192, plants = None))]
fn synth_corpus(
    seed: u64,
    documents: usize,
    document_length: usize,
    vocabulary_size: u32,
    plants: Option<Vec<(String, u64, usize)>>,
) -> PyResult<(Vec<Vec<u32>>, String)> {
    let mut spec = SynthSpec { seed, documents, document_length, vocabulary_size, ..SynthSpec::default() };
    if let Some(p) = plants {
        spec.plants = p
            .into_iter()
            .map(|(kind, duplicates, count)| Ok(PlantGroup { kind: plant_kind(&kind)?, duplicates, count }))
            .collect::<PyResult<_>>()?;
    }
    let (corpus, manifest) = synthgen::generate_corpus(&spec).map_err(value_err)?;
    let manifest = serde_json::to_string(&manifest).map_err(value_err)?;
    Ok((corpus.documents.into_iter().map(|d| d.tokens).collect(), manifest))
}

fn category(s: &str) -> PyResult<TaxonomyCategory> {
    TaxonomyCategory::ALL
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| PyValueError::new_err(format!("unknown category {s:?}")))
}

/// Cohort table as CSV. `cohorts` maps a cohort name to its memorized ids,
/// `categories` maps each id to its category name.
#[pyfunction]
#[pyo3(signature = (cohorts, categories, label = "Model"))]
fn cohort_csv(cohorts: Vec<(String, Vec<u64>)>, categories: HashMap<u64, String>, label: &str) -> PyResult<String> {
    let cats: BTreeMap<u64, TaxonomyCategory> =
        categories.iter().map(|(&id, c)| Ok((id, category(c)?))).collect::<PyResult<_>>()?;
    let report = cohort::cohort_report(&cohorts, &cats).map_err(value_err)?;
    Ok(report.to_csv(label))
}

/// Runs one pipeline stage. Configuration problems raise `ValueError`,
/// other failures `RuntimeError`. Returns the written artifact paths.
#[pyfunction]
#[pyo3(signature = (stage, config, seed = None, out = None))]
fn run_stage(stage: &str, config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<Vec<PathBuf>> {
    let stage: Stage = stage.parse().map_err(PyValueError::new_err)?;
    let mut loaded = LoadedConfig::load(&config).map_err(value_err)?;
    if let Some(s) = seed {
        loaded.set_seed(s);
    }
    Run::new(loaded, out).execute(stage).map_err(|e: PipelineError| {
        if e.is_config() {
            PyValueError::new_err(e.to_string())
        } else {
            PyRuntimeError::new_err(e.to_string())
        }
    })
}

#[pymodule]
#[pyo3(name = "memtax")]
fn memtax_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(window_hash, m)?)?;
    m.add_function(wrap_pyfunction!(duplicate_counts, m)?)?;
    m.add_function(wrap_pyfunction!(detect_template, m)?)?;
    m.add_function(wrap_pyfunction!(huffman_length, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(assign_category, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(cohort_csv, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_class::<PyLogisticModel>()?;
    Ok(())
}
