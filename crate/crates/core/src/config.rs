//! Run configuration.
//!
//! Defaults come from the `default` entries of `config/schema.json`; a
//! config file is deep-merged over them and must not add unknown keys.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dupindex::HashParams;
use crate::features::{is_feature_name, FeatureConfig};
use crate::predictor::{FitOptions, SplitRatios};
use crate::stats::KlConfig;
use crate::synthgen::{Coefficients, PlantGroup, SynthSpec};
use crate::taxonomy::{Precedence, TaxonomyConfig};

pub const SCHEMA: &str = include_str!("../config/schema.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("config is not valid JSON: {0}")]
    Json(serde_json::Error),
    #[error("config does not match the schema: {0}")]
    Schema(serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{field}: path {path} does not exist")]
    MissingPath { field: &'static str, path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub logprobs: Option<PathBuf>,
    pub vocabulary: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub vocabulary_size: u32,
    pub documents: usize,
    pub document_length: usize,
    pub zipf_exponent: f64,
    pub uniform_background: bool,
    pub plants: Vec<PlantGroup>,
    pub coefficients: Coefficients,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub offset: usize,
    pub multi_window: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    pub semantic_threshold: f64,
    pub textual_relative_threshold: f64,
    pub embedding_dim: usize,
    pub lm_order: usize,
    pub lm_smoothing: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomySection {
    pub recitation_threshold: u64,
    pub precedence: Precedence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    pub histogram_bins: usize,
    pub histogram_features: Vec<String>,
    pub kl_bins: usize,
    pub epsilon: f64,
    pub bootstrap: usize,
    pub min_per_class: usize,
    pub duplicate_bins: Option<Vec<(u64, u64)>>,
    pub permutations: usize,
    pub dependency_features: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictorConfig {
    pub lambda: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub representative_fraction: f64,
    pub test_ratio: f64,
    pub validation_ratio: f64,
    pub features: Vec<String>,
    pub partition_candidates: Vec<String>,
    pub percentiles: Vec<u8>,
    pub bootstrap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortInput {
    pub name: String,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub index: HashParams,
    pub sampling: SamplingConfig,
    pub features: FeaturesConfig,
    pub taxonomy: TaxonomySection,
    pub stats: StatsConfig,
    pub predictor: PredictorConfig,
    pub cohorts: Vec<CohortInput>,
}

fn schema_defaults(node: &Value) -> Value {
    match node.get("properties").and_then(Value::as_object) {
        Some(props) => Value::Object(props.iter().map(|(k, v)| (k.clone(), schema_defaults(v))).collect()),
        None => node.get("default").cloned().unwrap_or(Value::Null),
    }
}

/// The configuration with every default filled in, as JSON.
pub fn default_value() -> Value {
    let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
    schema_defaults(&schema)
}

/// Objects merge key by key; anything else in `over` replaces `base`.
/// Keys absent from `base` are kept so deserialization can reject them.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// A parsed config together with the merged JSON it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// Merged JSON before path resolution; the config hash is taken over it.
    pub effective: Value,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn from_value(user: Value, base_dir: &Path) -> Result<Self, ConfigError> {
        if !user.is_object() {
            return Err(ConfigError::Invalid("top level must be a JSON object".into()));
        }
        let mut effective = default_value();
        merge(&mut effective, user);
        let config: RunConfig = serde_json::from_value(effective.clone()).map_err(ConfigError::Schema)?;
        let loaded = LoadedConfig { config, effective, base_dir: base_dir.to_path_buf() };
        loaded.config.validate()?;
        Ok(loaded)
    }

    pub fn from_str(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let user: Value = serde_json::from_str(text).map_err(ConfigError::Json)?;
        Self::from_value(user, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io(path.to_path_buf(), e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_str(&text, &dir)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.config.seed = seed;
        self.effective["seed"] = Value::from(seed);
    }

    /// Hex SHA-256 of the canonical effective config, output path excluded.
    pub fn hash(&self) -> String {
        let mut v = self.effective.clone();
        if let Some(paths) = v.get_mut("paths").and_then(Value::as_object_mut) {
            paths.remove("output");
        }
        let canonical = serde_json::to_vec(&sort_keys(v)).expect("serializable");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn resolve_opt(&self, p: &Option<PathBuf>) -> Option<PathBuf> {
        p.as_deref().map(|p| self.resolve(p))
    }

    /// Every explicitly configured input path must exist.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        let inputs: [(&'static str, &Option<PathBuf>); 6] = [
            ("paths.corpus", &c.paths.corpus),
            ("paths.labels", &c.paths.labels),
            ("paths.embeddings", &c.paths.embeddings),
            ("paths.logprobs", &c.paths.logprobs),
            ("paths.vocabulary", &c.paths.vocabulary),
            ("paths.manifest", &c.paths.manifest),
        ];
        for (field, p) in inputs {
            if let Some(path) = self.resolve_opt(p) {
                if !path.exists() {
                    return Err(ConfigError::MissingPath { field, path });
                }
            }
        }
        Ok(())
    }

    /// Every cohort label file must exist. Checked only by the cohort stage,
    /// since those files are often written by earlier stages.
    pub fn check_cohort_paths(&self) -> Result<(), ConfigError> {
        for cohort in &self.config.cohorts {
            let path = self.resolve(&cohort.labels);
            if !path.exists() {
                return Err(ConfigError::MissingPath { field: "cohorts.labels", path });
            }
        }
        Ok(())
    }
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(String, Value)> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect::<Map<_, _>>())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn check_features(field: &str, names: &[String]) -> Result<(), ConfigError> {
    for n in names {
        if !is_feature_name(n) {
            return Err(invalid(format!("{field}: unknown feature {n:?}")));
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth_spec().coefficients.validate().map_err(|e| invalid(format!("synth.{e}")))?;
        self.hash_params().validate().map_err(|e| invalid(format!("index: {e}")))?;
        self.taxonomy_config().validate().map_err(|e| invalid(format!("taxonomy: {e}")))?;
        let f = &self.features;
        if f.embedding_dim == 0 || f.lm_order == 0 {
            return Err(invalid("features: embedding_dim and lm_order must be positive"));
        }
        if !(f.lm_smoothing > 0.0 && f.lm_smoothing.is_finite()) {
            return Err(invalid("features.lm_smoothing must be positive"));
        }
        if !(f.textual_relative_threshold >= 0.0) || !f.semantic_threshold.is_finite() {
            return Err(invalid("features: thresholds must be finite and nonnegative"));
        }
        let s = &self.stats;
        if s.histogram_bins == 0 || s.kl_bins == 0 || s.permutations == 0 || s.min_per_class == 0 {
            return Err(invalid("stats: bins, permutations and min_per_class must be positive"));
        }
        if !(s.epsilon >= 0.0 && s.epsilon.is_finite()) {
            return Err(invalid("stats.epsilon must be finite and nonnegative"));
        }
        if let Some(bins) = &s.duplicate_bins {
            if bins.iter().any(|(lo, hi)| lo > hi) {
                return Err(invalid("stats.duplicate_bins: each range needs low <= high"));
            }
        }
        check_features("stats.histogram_features", &s.histogram_features)?;
        check_features("stats.dependency_features", &s.dependency_features)?;
        let p = &self.predictor;
        check_features("predictor.features", &p.features)?;
        check_features("predictor.partition_candidates", &p.partition_candidates)?;
        if p.features.is_empty() {
            return Err(invalid("predictor.features is empty"));
        }
        if p.partition_candidates.len() < 2 {
            return Err(invalid("predictor.partition_candidates needs at least 2 features"));
        }
        if p.percentiles.is_empty() || p.percentiles.iter().any(|&q| q == 0 || q >= 100) {
            return Err(invalid("predictor.percentiles must be nonempty and within 1..=99"));
        }
        if !(p.lambda >= 0.0 && p.lambda.is_finite()) || !(p.tolerance > 0.0) || p.max_iterations == 0 {
            return Err(invalid("predictor: lambda >= 0, tolerance > 0, max_iterations > 0 required"));
        }
        if !(p.representative_fraction > 0.0 && p.representative_fraction <= 1.0) {
            return Err(invalid("predictor.representative_fraction must be in (0, 1]"));
        }
        self.split_ratios().validate().map_err(|e| invalid(format!("predictor: {e}")))?;
        let mut names = HashSet::new();
        for c in &self.cohorts {
            if !names.insert(c.name.as_str()) {
                return Err(invalid(format!("cohorts: duplicate name {:?}", c.name)));
            }
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let s = &self.synth;
        SynthSpec {
            seed: self.seed,
            vocabulary_size: s.vocabulary_size,
            documents: s.documents,
            document_length: s.document_length,
            zipf_exponent: s.zipf_exponent,
            uniform_background: s.uniform_background,
            plants: s.plants.clone(),
            coefficients: s.coefficients.clone(),
        }
    }

    pub fn hash_params(&self) -> HashParams {
        self.index
    }

    pub fn taxonomy_config(&self) -> TaxonomyConfig {
        TaxonomyConfig {
            recitation_threshold: self.taxonomy.recitation_threshold,
            precedence: self.taxonomy.precedence,
        }
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            semantic_threshold: self.features.semantic_threshold,
            textual_relative_threshold: self.features.textual_relative_threshold,
        }
    }

    pub fn kl_config(&self) -> KlConfig {
        KlConfig {
            duplicate_bins: self.stats.duplicate_bins.clone(),
            bins: self.stats.kl_bins,
            epsilon: self.stats.epsilon,
            bootstrap: self.stats.bootstrap,
            min_per_class: self.stats.min_per_class,
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            lambda: self.predictor.lambda,
            tolerance: self.predictor.tolerance,
            max_iterations: self.predictor.max_iterations,
        }
    }

    pub fn split_ratios(&self) -> SplitRatios {
        SplitRatios { test: self.predictor.test_ratio, validation: self.predictor.validation_ratio }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn load(v: Value) -> Result<LoadedConfig, ConfigError> {
        LoadedConfig::from_value(v, Path::new("/base"))
    }

    #[test]
    fn defaults_match_module_defaults() {
        let c = load(json!({})).unwrap().config;
        assert_eq!(c.hash_params(), HashParams::default());
        assert_eq!(c.taxonomy_config(), TaxonomyConfig::default());
        assert_eq!(c.feature_config(), FeatureConfig::default());
        assert_eq!(c.kl_config(), KlConfig::default());
        assert_eq!(c.fit_options(), FitOptions::default());
        assert_eq!(c.split_ratios(), SplitRatios::default());
        assert_eq!(c.synth.coefficients, crate::synthgen::default_coefficients());
        assert_eq!(c.stats.permutations, crate::stats::DEFAULT_PERMUTATIONS);
        assert_eq!(c.predictor.features.len(), crate::features::FEATURE_NAMES.len());
    }

    #[test]
    fn partial_override_merges() {
        let c = load(json!({"seed": 9, "stats": {"bootstrap": 10}})).unwrap().config;
        assert_eq!(c.seed, 9);
        assert_eq!(c.stats.bootstrap, 10);
        assert_eq!(c.stats.kl_bins, 50);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(load(json!({"sede": 1})), Err(ConfigError::Schema(_))));
        assert!(matches!(load(json!({"stats": {"bins": 3}})), Err(ConfigError::Schema(_))));
        assert!(matches!(load(json!([1])), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn semantic_validation() {
        assert!(load(json!({"taxonomy": {"recitation_threshold": 0}})).is_err());
        assert!(load(json!({"predictor": {"features": ["nope"]}})).is_err());
        assert!(load(json!({"predictor": {"partition_candidates": ["huffman_bits"]}})).is_err());
        assert!(load(json!({"predictor": {"test_ratio": 1.0}})).is_err());
        assert!(load(json!({"cohorts": [{"name": "a", "labels": "x"}, {"name": "a", "labels": "y"}]})).is_err());
    }

    #[test]
    fn hash_ignores_output_and_key_order() {
        let a = load(json!({"seed": 1, "paths": {"output": "a"}, "stats": {"bootstrap": 5, "kl_bins": 7}})).unwrap();
        let b = load(json!({"stats": {"kl_bins": 7, "bootstrap": 5}, "paths": {"output": "b"}, "seed": 1})).unwrap();
        let c = load(json!({"seed": 2})).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        let mut d = load(json!({"seed": 1, "stats": {"bootstrap": 5, "kl_bins": 7}})).unwrap();
        assert_eq!(d.hash(), a.hash());
        d.set_seed(3);
        assert_ne!(d.hash(), a.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let l = load(json!({"paths": {"corpus": "c.bin"}})).unwrap();
        assert_eq!(l.resolve_opt(&l.config.paths.corpus), Some(PathBuf::from("/base/c.bin")));
        assert!(matches!(l.check_paths(), Err(ConfigError::MissingPath { field: "paths.corpus", .. })));
    }
}
