//! The staged pipeline behind the `memtax` command.
//!
//! Stages read their inputs from configured paths or from artifacts earlier
//! stages left in the output directory, and write new artifacts to a
//! staging directory that is promoted file by file with `rename` once the
//! stage succeeds. JSON reports embed an `meta` block (config hash, seed,
//! counting convention); every other artifact gets a `<name>.meta.json`
//! sidecar.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{cohort_report, CohortReport};
use crate::config::{ConfigError, LoadedConfig, RunConfig, StatsConfig};
use crate::corpus::{self, extract_samples, CorpusFormat, ExtractOptions};
use crate::dupindex::{DuplicateIndex, HashParams, IndexSummary};
use crate::features::{
    self, assemble_features, hashed_embeddings, EmbeddingTable, FeatureContext, FeatureRecord, Vocabulary,
};
use crate::perplexity::{self, attach_perplexities, score_sample, train_reference_lm, TokenLogProbs};
use crate::predictor::{
    evaluate, partition_search, report_weights, split_datasets, train_baseline, train_taxonomic, Architecture,
    EvalReport, FitOptions, PartitionSpec, Split, Splits,
};
use crate::rng;
use crate::stats::{
    build_histogram, dependency_matrix, estimate_unmemorized, kl_vs_duplicates, Bins, DependencyReport, Histogram,
    KlCurve, Scale, UnmemorizedEstimate,
};
use crate::synthgen::{generate_corpus, simulate_memorization, synth_vocabulary, Manifest};
use crate::taxonomy::{assign_all, assign_category, TaxonomyCategory};

pub const TOOL: &str = "memtax";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Duplicate counts include the sample's own occurrence.
pub const COUNTING: &str = "inclusive";

pub const CORPUS_FILE: &str = "corpus.bin";
pub const VOCAB_FILE: &str = "vocab.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.mtxi";
pub const FEATURES_FILE: &str = "features.jsonl";
pub const MODELS_FILE: &str = "models.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Index,
    Featurize,
    Taxonomy,
    Stats,
    Train,
    Evaluate,
    Cohort,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::Index,
        Stage::Featurize,
        Stage::Taxonomy,
        Stage::Stats,
        Stage::Train,
        Stage::Evaluate,
        Stage::Cohort,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Index => "index",
            Stage::Featurize => "featurize",
            Stage::Taxonomy => "taxonomy",
            Stage::Stats => "stats",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Cohort => "cohort",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    /// A stage's inputs are missing: an earlier stage has not run or a path
    /// is not configured.
    #[error("{0}")]
    Prerequisite(String),
    #[error("{context}: {source}")]
    Runtime { context: String, source: BoxError },
    #[error("{0}")]
    Failed(String),
}

impl PipelineError {
    /// Errors the command line reports as configuration problems.
    pub fn is_config(&self) -> bool {
        matches!(self, PipelineError::Config(_) | PipelineError::Prerequisite(_))
    }
}

trait Context<T> {
    fn ctx(self, context: impl Into<String>) -> Result<T, PipelineError>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> Context<T> for Result<T, E> {
    fn ctx(self, context: impl Into<String>) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Runtime { context: context.into(), source: Box::new(e) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub config_sha256: String,
    pub seed: u64,
    pub counting: String,
    pub recitation_threshold: u64,
    pub hash_params: HashParams,
}

#[derive(Serialize)]
struct WithMeta<'a, T> {
    meta: &'a ArtifactMeta,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    artifact: &'a str,
    #[serde(flatten)]
    meta: &'a ArtifactMeta,
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(v).expect("serializable artifact");
    bytes.push(b'\n');
    bytes
}

/// Files written for one stage, promoted into the output directory on
/// [`Staging::commit`] and discarded otherwise.
struct Staging {
    dir: PathBuf,
    out: PathBuf,
    files: Vec<String>,
    meta: ArtifactMeta,
    committed: bool,
}

impl Staging {
    fn new(out: &Path, meta: ArtifactMeta) -> Result<Self, PipelineError> {
        fs::create_dir_all(out).ctx(format!("creating {}", out.display()))?;
        let dir = out.join(format!(".staging-{}", meta.stage));
        if dir.exists() {
            fs::remove_dir_all(&dir).ctx(format!("clearing {}", dir.display()))?;
        }
        fs::create_dir(&dir).ctx(format!("creating {}", dir.display()))?;
        Ok(Staging { dir, out: out.to_path_buf(), files: Vec::new(), meta, committed: false })
    }

    /// Registers `name` and returns where to write it.
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let p = self.path(name);
        fs::write(&p, bytes).ctx(format!("writing {name}"))
    }

    fn report<T: Serialize>(&mut self, name: &str, body: &T) -> Result<(), PipelineError> {
        let bytes = to_json(&WithMeta { meta: &self.meta, body });
        self.bytes(name, &bytes)
    }

    /// Writes `<name>.meta.json` for a non-JSON artifact.
    fn sidecar(&mut self, name: &str) -> Result<(), PipelineError> {
        let bytes = to_json(&Sidecar { artifact: name, meta: &self.meta });
        self.bytes(&format!("{name}.meta.json"), &bytes)
    }

    fn commit(mut self) -> Result<Vec<PathBuf>, PipelineError> {
        let mut promoted = Vec::with_capacity(self.files.len());
        for f in &self.files {
            let dst = self.out.join(f);
            fs::rename(self.dir.join(f), &dst).ctx(format!("promoting {f}"))?;
            promoted.push(dst);
        }
        fs::remove_dir(&self.dir).ctx("removing staging directory")?;
        self.committed = true;
        Ok(promoted)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaxonomySummary {
    pub samples: usize,
    /// Per category in taxonomy order.
    pub counts: [usize; 3],
    pub memorized: [usize; 3],
    pub unlabeled: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureHistograms {
    pub feature: String,
    pub scale: Scale,
    pub representative: Histogram,
    pub memorized: Option<Histogram>,
    pub unmemorized: Option<UnmemorizedEstimate>,
    /// Why a population was left out, if one was.
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StatsReport {
    pub config: StatsConfig,
    pub histograms: Vec<FeatureHistograms>,
    pub kl_curve: KlCurve,
    pub dependency: DependencyReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchSummary {
    pub candidates: Vec<String>,
    pub percentiles: Vec<u8>,
    pub choices: Vec<Split>,
    pub total: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub best: PartitionSpec,
    pub best_f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelsFile {
    pub fit_options: FitOptions,
    pub representative: usize,
    pub memorized_extra: usize,
    pub splits: Splits,
    pub baseline: Architecture,
    pub taxonomic: Architecture,
    pub partitioned: Architecture,
    pub partition_search: SearchSummary,
}

/// A loaded config plus the directory artifacts go to.
pub struct Run {
    pub loaded: LoadedConfig,
    pub out: PathBuf,
}

impl Run {
    /// `out` overrides the configured output directory.
    pub fn new(loaded: LoadedConfig, out: Option<PathBuf>) -> Self {
        let out = out.unwrap_or_else(|| loaded.resolve(&loaded.config.paths.output));
        Run { loaded, out }
    }

    fn cfg(&self) -> &RunConfig {
        &self.loaded.config
    }

    fn seed(&self) -> u64 {
        self.cfg().seed
    }

    pub fn meta(&self, stage: Stage) -> ArtifactMeta {
        ArtifactMeta {
            tool: TOOL.into(),
            version: VERSION.into(),
            stage: stage.as_str().into(),
            config_sha256: self.loaded.hash(),
            seed: self.seed(),
            counting: COUNTING.into(),
            recitation_threshold: self.cfg().taxonomy.recitation_threshold,
            hash_params: self.cfg().hash_params(),
        }
    }

    /// Runs one stage and returns the artifact paths it promoted.
    pub fn execute(&self, stage: Stage) -> Result<Vec<PathBuf>, PipelineError> {
        self.loaded.check_paths()?;
        if stage == Stage::Cohort {
            if self.cfg().cohorts.is_empty() {
                return Err(ConfigError::Invalid("cohort needs a nonempty cohorts list".into()).into());
            }
            self.loaded.check_cohort_paths()?;
        }
        log::info!("stage {stage}: seed {}, config {}", self.seed(), &self.loaded.hash()[..12]);
        let mut st = Staging::new(&self.out, self.meta(stage))?;
        match stage {
            Stage::Synth => self.synth(&mut st)?,
            Stage::Index => self.index(&mut st)?,
            Stage::Featurize => self.featurize(&mut st)?,
            Stage::Taxonomy => self.taxonomy(&mut st)?,
            Stage::Stats => self.stats(&mut st)?,
            Stage::Train => self.train(&mut st)?,
            Stage::Evaluate => self.evaluate(&mut st)?,
            Stage::Cohort => self.cohort(&mut st)?,
        }
        let written = st.commit()?;
        log::info!("stage {stage}: wrote {} artifacts to {}", written.len(), self.out.display());
        Ok(written)
    }

    fn input(&self, configured: &Option<PathBuf>, default: &str, hint: &str) -> Result<PathBuf, PipelineError> {
        if let Some(p) = self.loaded.resolve_opt(configured) {
            return Ok(p);
        }
        let p = self.out.join(default);
        if p.exists() {
            Ok(p)
        } else {
            Err(PipelineError::Prerequisite(format!("{} not found; {hint}", p.display())))
        }
    }

    fn load_corpus(&self) -> Result<corpus::Corpus, PipelineError> {
        let path = self.input(&self.cfg().paths.corpus, CORPUS_FILE, "set paths.corpus or run synth")?;
        log::info!("loading corpus {}", path.display());
        corpus::load_corpus(&path, CorpusFormat::from_path(&path)).ctx(format!("loading {}", path.display()))
    }

    fn read_features(&self) -> Result<Vec<FeatureRecord>, PipelineError> {
        let path = self.out.join(FEATURES_FILE);
        if !path.exists() {
            return Err(PipelineError::Prerequisite(format!("{} not found; run featurize first", path.display())));
        }
        let mut records = features::read_jsonl(&path).ctx(format!("reading {}", path.display()))?;
        let tax = self.cfg().taxonomy_config();
        for r in records.iter_mut().filter(|r| r.taxonomy.is_none()) {
            r.taxonomy = Some(assign_category(r, &tax));
        }
        Ok(records)
    }

    fn synth(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let spec = self.cfg().synth_spec();
        let (corpus, manifest) = generate_corpus(&spec).ctx("generating synthetic corpus")?;
        log::info!(
            "synth: {} documents, {} tokens, {} plants",
            corpus.documents.len(),
            corpus.total_tokens(),
            manifest.plants.len()
        );
        corpus::write_binary(&corpus, &st.path(CORPUS_FILE)).ctx("writing corpus")?;
        st.sidecar(CORPUS_FILE)?;
        synth_vocabulary(spec.vocabulary_size).save(&st.path(VOCAB_FILE)).ctx("writing vocabulary")?;
        st.sidecar(VOCAB_FILE)?;
        st.report(MANIFEST_FILE, &manifest)
    }

    fn index(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let corpus = self.load_corpus()?;
        let params = self.cfg().hash_params();
        log::info!("hash parameters: P = {}, MOD = {}, window = {}", params.base, params.modulus, params.window);
        let idx = DuplicateIndex::build(&corpus, params).ctx("building duplicate index")?;
        let summary: IndexSummary = idx.summary();
        if summary.colliding_hashes > 0 {
            log::warn!("{} hash values are shared by distinct windows (resolved by verification)", summary.colliding_hashes);
        }
        idx.save(&st.path(INDEX_FILE)).ctx("writing index")?;
        st.sidecar(INDEX_FILE)?;
        st.report("index_summary.json", &summary)
    }

    fn featurize(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let cfg = self.cfg();
        let mut corpus = self.load_corpus()?;
        let vocab_path = self.input(&cfg.paths.vocabulary, VOCAB_FILE, "set paths.vocabulary or run synth")?;
        let vocabulary = Vocabulary::load(&vocab_path).ctx(format!("reading {}", vocab_path.display()))?;
        // JSONL corpora only know their largest token; the vocabulary file
        // fixes the size the reference model smooths over.
        if vocabulary.id_bound() > corpus.vocabulary_size {
            corpus = corpus::Corpus::new(corpus.documents, vocabulary.id_bound()).ctx("widening vocabulary")?;
        }
        let params = cfg.hash_params();
        let saved = self.out.join(INDEX_FILE);
        let idx = match saved.exists().then(|| DuplicateIndex::load(&corpus, &saved)) {
            Some(Ok(idx)) if *idx.params() == params => {
                log::info!("using saved index {}", saved.display());
                idx
            }
            other => {
                if let Some(Ok(_)) = other {
                    log::warn!("saved index uses different hash parameters; rebuilding");
                } else if let Some(Err(e)) = other {
                    log::warn!("saved index unusable ({e}); rebuilding");
                }
                DuplicateIndex::build(&corpus, params).ctx("building duplicate index")?
            }
        };

        let extracted = extract_samples(
            &corpus,
            ExtractOptions { offset: cfg.sampling.offset, multi_window: cfg.sampling.multi_window },
        );
        if extracted.skipped > 0 {
            log::warn!("{} documents too short for a sample at offset {}", extracted.skipped, cfg.sampling.offset);
        }
        let mut samples = extracted.samples;
        if samples.is_empty() {
            return Err(PipelineError::Failed("corpus yields no 64-token samples".into()));
        }
        let label_path = self.loaded.resolve_opt(&cfg.paths.labels);
        if let Some(p) = &label_path {
            let ids = corpus::read_label_file(p).ctx(format!("reading {}", p.display()))?;
            let report = corpus::attach_labels(&mut samples, &ids);
            log::info!("labels: {} memorized samples", report.labeled);
            if !report.rejects.is_empty() {
                log::warn!("{} label ids match no sample (first {})", report.rejects.len(), report.rejects[0]);
            }
        }

        let embeddings = match self.loaded.resolve_opt(&cfg.paths.embeddings) {
            Some(p) => EmbeddingTable::load(&p).ctx(format!("reading {}", p.display()))?,
            None => {
                let tokens: Vec<Vec<u32>> = samples.iter().map(|s| s.tokens()).collect();
                hashed_embeddings(tokens.iter().map(Vec::as_slice), cfg.features.embedding_dim)
            }
        };
        let ctx = FeatureContext {
            corpus: &corpus,
            index: &idx,
            vocabulary: &vocabulary,
            embeddings: &embeddings,
            config: cfg.feature_config(),
        };
        let mut records = assemble_features(&samples, &ctx).ctx("computing features")?;

        let logprobs: Vec<TokenLogProbs> = match self.loaded.resolve_opt(&cfg.paths.logprobs) {
            Some(p) => perplexity::read_logprobs(&p).ctx(format!("reading {}", p.display()))?,
            None => {
                let lm = train_reference_lm(&corpus, cfg.features.lm_order, cfg.features.lm_smoothing)
                    .ctx("training reference model")?;
                let lps: Vec<TokenLogProbs> = samples.par_iter().map(|s| score_sample(&lm, s)).collect();
                perplexity::write_logprobs(&st.path("logprobs.jsonl"), &lps).ctx("writing logprobs")?;
                st.sidecar("logprobs.jsonl")?;
                lps
            }
        };
        attach_perplexities(&mut records, &logprobs).ctx("attaching perplexities")?;

        if label_path.is_none() {
            let manifest_path = match self.loaded.resolve_opt(&cfg.paths.manifest) {
                Some(p) => Some(p),
                None => Some(self.out.join(MANIFEST_FILE)).filter(|p| p.exists()),
            };
            match manifest_path {
                Some(p) => {
                    let text = fs::read_to_string(&p).ctx(format!("reading {}", p.display()))?;
                    let manifest: Manifest = serde_json::from_str(&text).ctx(format!("parsing {}", p.display()))?;
                    let labels = simulate_memorization(
                        &records,
                        &manifest.spec.coefficients,
                        &cfg.taxonomy_config(),
                        rng::subseed(self.seed(), "labels"),
                    )
                    .ctx("simulating memorization")?;
                    let mut ids = Vec::new();
                    for (r, m) in records.iter_mut().zip(labels) {
                        r.memorized = Some(m);
                        if m {
                            ids.push(r.sample_id);
                        }
                    }
                    log::info!("simulated labels from {}: {} of {} memorized", p.display(), ids.len(), records.len());
                    corpus::write_label_file(&st.path("labels.txt"), &ids).ctx("writing labels")?;
                    st.sidecar("labels.txt")?;
                }
                None => log::warn!("no labels or manifest; records are unlabeled"),
            }
        }
        self.write_features(st, &records)
    }

    fn write_features(&self, st: &mut Staging, records: &[FeatureRecord]) -> Result<(), PipelineError> {
        features::write_jsonl(records, &st.path(FEATURES_FILE)).ctx("writing features")?;
        st.sidecar(FEATURES_FILE)?;
        features::write_csv(records, &st.path("features.csv")).ctx("writing features csv")?;
        st.sidecar("features.csv")
    }

    fn taxonomy(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let mut records = self.read_features()?;
        assign_all(&mut records, &self.cfg().taxonomy_config()).ctx("assigning taxonomy")?;
        let mut summary = TaxonomySummary { samples: records.len(), counts: [0; 3], memorized: [0; 3], unlabeled: 0 };
        for r in &records {
            let k = r.taxonomy.expect("assigned").index();
            summary.counts[k] += 1;
            match r.memorized {
                Some(true) => summary.memorized[k] += 1,
                Some(false) => {}
                None => summary.unlabeled += 1,
            }
        }
        log::info!("taxonomy counts (recitation, reconstruction, recollection): {:?}", summary.counts);
        self.write_features(st, &records)?;
        st.report("taxonomy_summary.json", &summary)
    }

    fn stats(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let cfg = self.cfg();
        let records: Vec<FeatureRecord> = self.read_features()?.into_iter().filter(|r| r.memorized.is_some()).collect();
        if records.is_empty() {
            return Err(PipelineError::Failed("no labeled records; provide paths.labels or a synth manifest".into()));
        }
        let histograms = cfg
            .stats
            .histogram_features
            .iter()
            .map(|f| feature_histograms(&records, f, cfg.stats.histogram_bins))
            .collect::<Result<Vec<_>, _>>()?;
        let kl_curve = kl_vs_duplicates(&records, &cfg.kl_config(), rng::subseed(self.seed(), "kl")).ctx("KL curve")?;
        log::info!("KL curve: {} bins reported, {} skipped", kl_curve.points.len(), kl_curve.skipped.len());
        let feats: Vec<&str> = cfg.stats.dependency_features.iter().map(String::as_str).collect();
        let dependency =
            dependency_matrix(&records, &feats, cfg.stats.permutations, rng::subseed(self.seed(), "dependency"));
        let report = StatsReport { config: cfg.stats.clone(), histograms, kl_curve, dependency };
        st.bytes("histograms.csv", histograms_csv(&report.histograms).as_bytes())?;
        st.sidecar("histograms.csv")?;
        st.bytes("kl_curve.csv", kl_csv(&report.kl_curve).as_bytes())?;
        st.sidecar("kl_curve.csv")?;
        st.bytes("dependency.csv", dependency_csv(&report.dependency).as_bytes())?;
        st.sidecar("dependency.csv")?;
        st.report("stats.json", &report)
    }

    fn train(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let cfg = self.cfg();
        let records: Vec<FeatureRecord> = self.read_features()?.into_iter().filter(|r| r.memorized.is_some()).collect();
        if records.is_empty() {
            return Err(PipelineError::Failed("no labeled records; provide paths.labels or a synth manifest".into()));
        }
        let mut ids: Vec<u64> = records.iter().map(|r| r.sample_id).collect();
        ids.shuffle(&mut rng::seeded(rng::subseed(self.seed(), "representative")));
        let n_rep = ((ids.len() as f64 * cfg.predictor.representative_fraction).round() as usize).min(ids.len());
        let mut representative = ids[..n_rep].to_vec();
        representative.sort_unstable();
        let in_rep: HashSet<u64> = representative.iter().copied().collect();
        let memorized: Vec<u64> = records
            .iter()
            .filter(|r| r.memorized == Some(true) && !in_rep.contains(&r.sample_id))
            .map(|r| r.sample_id)
            .collect();
        let splits = split_datasets(&representative, &memorized, cfg.split_ratios(), rng::subseed(self.seed(), "split"))
            .ctx("splitting")?;
        log::info!(
            "splits: {} train, {} validation, {} test",
            splits.train.len(),
            splits.validation.len(),
            splits.test.len()
        );
        let by_id: HashMap<u64, &FeatureRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
        let pick = |ids: &[u64]| -> Vec<&FeatureRecord> { ids.iter().map(|id| by_id[id]).collect() };
        let (train, validation) = (pick(&splits.train), pick(&splits.validation));
        let opts = cfg.fit_options();
        let features = &cfg.predictor.features;
        let tax = cfg.taxonomy_config();

        let baseline =
            train_baseline(&train, features, &opts, rng::subseed(self.seed(), "baseline")).ctx("training baseline")?;
        let taxonomic = train_taxonomic(&train, features, &tax, &opts, rng::subseed(self.seed(), "taxonomic"))
            .ctx("training taxonomic model")?;
        let search = partition_search(
            &train,
            &validation,
            &cfg.predictor.partition_candidates,
            &cfg.predictor.percentiles,
            features,
            &opts,
            rng::subseed(self.seed(), "partition"),
        )
        .ctx("partition search")?;
        log::info!(
            "partition search: {} of {} pairs evaluated, best validation F1 {:.4}",
            search.evaluated,
            search.total,
            search.best_f1
        );
        let weights = report_weights(&[&baseline, &taxonomic, &search.architecture]);
        st.bytes("weights.csv", weights.to_csv().as_bytes())?;
        st.sidecar("weights.csv")?;
        st.bytes("partition_grid.csv", grid_csv(&search).as_bytes())?;
        st.sidecar("partition_grid.csv")?;
        let file = ModelsFile {
            fit_options: opts,
            representative: representative.len(),
            memorized_extra: memorized.len(),
            splits,
            baseline,
            taxonomic,
            partition_search: SearchSummary {
                candidates: search.candidates,
                percentiles: search.percentiles,
                choices: search.choices,
                total: search.total,
                evaluated: search.evaluated,
                skipped: search.skipped,
                best: search.best,
                best_f1: search.best_f1,
            },
            partitioned: search.architecture,
        };
        st.report(MODELS_FILE, &file)
    }

    fn evaluate(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let path = self.out.join(MODELS_FILE);
        if !path.exists() {
            return Err(PipelineError::Prerequisite(format!("{} not found; run train first", path.display())));
        }
        let text = fs::read_to_string(&path).ctx(format!("reading {}", path.display()))?;
        let models: ModelsFile = serde_json::from_str(&text).ctx(format!("parsing {}", path.display()))?;
        let records = self.read_features()?;
        let by_id: HashMap<u64, &FeatureRecord> = records.iter().map(|r| (r.sample_id, r)).collect();
        let mut test = Vec::with_capacity(models.splits.test.len());
        for id in &models.splits.test {
            match by_id.get(id) {
                Some(r) => test.push(*r),
                None => return Err(PipelineError::Failed(format!("test sample {id} missing from features"))),
            }
        }
        let report: EvalReport = evaluate(
            &[&models.baseline, &models.taxonomic, &models.partitioned],
            &test,
            &self.cfg().taxonomy_config(),
            self.cfg().predictor.bootstrap,
            rng::subseed(self.seed(), "evaluate"),
        )
        .ctx("evaluating")?;
        for r in report.rows.iter().filter(|r| r.subset == "all") {
            if let Some(m) = r.metrics {
                log::info!("{}: F1 {:.4}, accuracy {:.4}, ECE {:.4}", r.model, m.f1, m.accuracy, m.ece);
            }
        }
        st.bytes("eval.csv", report.to_csv().as_bytes())?;
        st.sidecar("eval.csv")?;
        st.report("eval.json", &report)
    }

    fn cohort(&self, st: &mut Staging) -> Result<(), PipelineError> {
        let records = self.read_features()?;
        let categories: BTreeMap<u64, TaxonomyCategory> =
            records.iter().map(|r| (r.sample_id, r.taxonomy.expect("assigned on read"))).collect();
        let mut cohorts = Vec::new();
        for c in &self.cfg().cohorts {
            let p = self.loaded.resolve(&c.labels);
            let ids = corpus::read_label_file(&p).ctx(format!("reading {}", p.display()))?;
            cohorts.push((c.name.clone(), ids));
        }
        let report: CohortReport = cohort_report(&cohorts, &categories).ctx("cohort report")?;
        st.bytes("cohort.csv", report.to_csv("Cohort").as_bytes())?;
        st.sidecar("cohort.csv")?;
        st.bytes("cohort.md", report.to_markdown("Cohort").as_bytes())?;
        st.sidecar("cohort.md")?;
        st.report("cohort.json", &report)
    }
}

fn feature_histograms(records: &[FeatureRecord], feature: &str, bins: usize) -> Result<FeatureHistograms, PipelineError> {
    let rows: Vec<(f64, bool)> =
        records.iter().filter_map(|r| Some((r.feature(feature)?, r.memorized?))).collect();
    let all: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let mem: Vec<f64> = rows.iter().filter(|r| r.1).map(|r| r.0).collect();
    let scale = if all.iter().all(|&v| v > 0.0) { Scale::Log } else { Scale::Linear };
    let context = format!("histogram of {feature}");
    let representative = build_histogram(&all, &Bins::Count(bins), scale).ctx(context.clone())?;
    let mut out = FeatureHistograms {
        feature: feature.to_string(),
        scale,
        representative,
        memorized: None,
        unmemorized: None,
        note: None,
    };
    if mem.is_empty() {
        out.note = Some("no memorized samples".into());
        return Ok(out);
    }
    let edges = Bins::Edges(out.representative.edges.clone());
    let memorized = build_histogram(&mem, &edges, scale).ctx(context.clone())?;
    if mem.len() < all.len() {
        out.unmemorized = Some(
            estimate_unmemorized(&out.representative, &memorized, all.len() as u64, mem.len() as u64)
                .ctx(context)?,
        );
    } else {
        out.note = Some("every sample is memorized".into());
    }
    out.memorized = Some(memorized);
    Ok(out)
}

fn histograms_csv(hists: &[FeatureHistograms]) -> String {
    let mut out = String::from("feature,population,bin,low,high,mass\n");
    for h in hists {
        let pops = [
            ("representative", Some(&h.representative)),
            ("memorized", h.memorized.as_ref()),
            ("unmemorized", h.unmemorized.as_ref().map(|u| &u.histogram)),
        ];
        for (name, hist) in pops {
            let Some(hist) = hist else { continue };
            for (i, m) in hist.masses.iter().enumerate() {
                out.push_str(&format!("{},{name},{i},{},{},{m}\n", h.feature, hist.edges[i], hist.edges[i + 1]));
            }
        }
    }
    out
}

fn kl_csv(curve: &KlCurve) -> String {
    let mut out = String::from("dup_low,dup_high,n_memorized,n_unmemorized,kl,kl_point,stddev,ci_low,ci_high,skipped\n");
    for p in &curve.points {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},false\n",
            p.dup_low, p.dup_high, p.n_memorized, p.n_unmemorized, p.kl, p.kl_point, p.stddev, p.ci_low, p.ci_high
        ));
    }
    for s in &curve.skipped {
        out.push_str(&format!("{},{},{},{},,,,,,true\n", s.dup_low, s.dup_high, s.n_memorized, s.n_unmemorized));
    }
    out
}

fn dependency_csv(dep: &DependencyReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["category", "feature", "n", "rho", "p_value", "degenerate"]).expect("in-memory write");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &dep.results {
        w.write_record([
            r.category.map_or("all", |c| c.as_str()).to_string(),
            r.feature.clone(),
            r.n.to_string(),
            opt(r.rho),
            opt(r.p_value),
            r.degenerate.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn grid_csv(search: &crate::predictor::PartitionSearch) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "first_feature",
        "first_percentile",
        "first_direction",
        "second_feature",
        "second_percentile",
        "second_direction",
        "validation_f1",
        "skipped",
    ])
    .expect("in-memory write");
    let dir = |s: &Split| format!("{:?}", s.direction).to_lowercase();
    for g in &search.grid {
        let (a, b) = (&search.choices[g.first], &search.choices[g.second]);
        w.write_record([
            a.feature.clone(),
            a.percentile.to_string(),
            dir(a),
            b.feature.clone(),
            b.percentile.to_string(),
            dir(b),
            g.f1.map(|f| f.to_string()).unwrap_or_default(),
            g.skipped.clone().unwrap_or_default(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Runs `stages` in order, stopping at the first failure.
pub fn run_stages(run: &Run, stages: &[Stage]) -> Result<Vec<PathBuf>, PipelineError> {
    let mut all = Vec::new();
    for &s in stages {
        all.extend(run.execute(s)?);
    }
    Ok(all)
}
