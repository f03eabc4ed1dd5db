//! Routing samples to per-cell regressions: a single aggregate model, one
//! model per taxonomy category, or one model per cell of a two-split
//! partition found by exhaustive percentile search.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::confusion_f1;
use super::{design_matrix, labels, predict, train_logreg, FitOptions, PredictorError, RegressionModel};
use crate::features::frequency::percentile_sorted;
use crate::features::{FeatureRecord, FEATURE_NAMES};
use crate::rng;
use crate::taxonomy::{assign_category, TaxonomyCategory, TaxonomyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Baseline,
    Taxonomic,
    Partitioned,
}

impl ArchitectureKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureKind::Baseline => "baseline",
            ArchitectureKind::Taxonomic => "taxonomic",
            ArchitectureKind::Partitioned => "partitioned",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// value <= threshold
    Le,
    /// value > threshold
    Gt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: String,
    pub percentile: u8,
    pub threshold: f64,
    pub direction: Direction,
}

impl Split {
    pub fn matches(&self, record: &FeatureRecord) -> Result<bool, PredictorError> {
        let v = record.feature(&self.feature).ok_or_else(|| PredictorError::MissingFeature {
            sample_id: record.sample_id,
            feature: self.feature.clone(),
        })?;
        Ok(match self.direction {
            Direction::Le => v <= self.threshold,
            Direction::Gt => v > self.threshold,
        })
    }

    fn describe(&self) -> String {
        let op = match self.direction {
            Direction::Le => "<=",
            Direction::Gt => ">",
        };
        format!("{} {op} {}", self.feature, self.threshold)
    }
}

/// Cell A takes samples matching the first split; of the rest, cell B takes
/// those matching the second split and cell C everything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub splits: [Split; 2],
}

impl PartitionSpec {
    pub fn cell(&self, record: &FeatureRecord) -> Result<usize, PredictorError> {
        if self.splits[0].matches(record)? {
            Ok(0)
        } else if self.splits[1].matches(record)? {
            Ok(1)
        } else {
            Ok(2)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Router {
    Single,
    Taxonomy { config: TaxonomyConfig },
    Partition { spec: PartitionSpec },
}

impl Router {
    pub fn cells(&self) -> usize {
        match self {
            Router::Single => 1,
            _ => 3,
        }
    }

    pub fn cell_names(&self) -> Vec<String> {
        match self {
            Router::Single => vec!["all".into()],
            Router::Taxonomy { .. } => TaxonomyCategory::ALL.iter().map(|c| c.as_str().to_string()).collect(),
            Router::Partition { spec } => vec![
                spec.splits[0].describe(),
                format!("not A, {}", spec.splits[1].describe()),
                "rest".into(),
            ],
        }
    }

    pub fn cell(&self, record: &FeatureRecord) -> Result<usize, PredictorError> {
        match self {
            Router::Single => Ok(0),
            Router::Taxonomy { config } => Ok(assign_category(record, config).index()),
            Router::Partition { spec } => spec.cell(record),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellModel {
    pub name: String,
    pub n_train: usize,
    pub model: Option<RegressionModel>,
    /// Probability used when no model could be trained for this cell.
    pub fallback_probability: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: ArchitectureKind,
    pub features: Vec<String>,
    pub router: Router,
    pub cells: Vec<CellModel>,
}

impl Architecture {
    pub fn predict(&self, record: &FeatureRecord) -> Result<f64, PredictorError> {
        let cell = &self.cells[self.router.cell(record)?];
        match &cell.model {
            Some(m) => {
                let row = design_matrix(&[record], &self.features)?;
                predict(m, &row[0])
            }
            None => Ok(cell.fallback_probability),
        }
    }

    pub fn predict_all(&self, records: &[&FeatureRecord]) -> Result<Vec<f64>, PredictorError> {
        records.par_iter().map(|r| self.predict(r)).collect()
    }
}

fn group_by_cell<'a>(
    router: &Router,
    records: &[&'a FeatureRecord],
) -> Result<Vec<Vec<&'a FeatureRecord>>, PredictorError> {
    let mut cells = vec![Vec::new(); router.cells()];
    for &r in records {
        cells[router.cell(r)?].push(r);
    }
    Ok(cells)
}

fn train_cell(
    name: String,
    records: &[&FeatureRecord],
    features: &[String],
    opts: &FitOptions,
    seed: u64,
) -> Result<CellModel, PredictorError> {
    let x = design_matrix(records, features)?;
    let y = labels(records)?;
    let positives = y.iter().filter(|&&v| v).count();
    let fallback = if y.is_empty() { 0.5 } else { positives as f64 / y.len() as f64 };
    Ok(match train_logreg(features, &x, &y, opts, seed) {
        Ok(m) => CellModel { name, n_train: y.len(), model: Some(m), fallback_probability: fallback, error: None },
        Err(e @ PredictorError::SingleClass { .. }) => {
            log::warn!("cell {name}: {e}");
            CellModel { name, n_train: y.len(), model: None, fallback_probability: fallback, error: Some(e.to_string()) }
        }
        Err(e) => return Err(e),
    })
}

fn train_routed(
    kind: ArchitectureKind,
    router: Router,
    train: &[&FeatureRecord],
    features: &[String],
    opts: &FitOptions,
    seed: u64,
) -> Result<Architecture, PredictorError> {
    let groups = group_by_cell(&router, train)?;
    let cells = router
        .cell_names()
        .into_iter()
        .zip(&groups)
        .enumerate()
        .map(|(i, (name, g))| train_cell(name, g, features, opts, rng::subseed(seed, &format!("{}/{i}", kind.as_str()))))
        .collect::<Result<_, _>>()?;
    Ok(Architecture { kind, features: features.to_vec(), router, cells })
}

pub fn train_baseline(
    train: &[&FeatureRecord],
    features: &[String],
    opts: &FitOptions,
    seed: u64,
) -> Result<Architecture, PredictorError> {
    let arch = train_routed(ArchitectureKind::Baseline, Router::Single, train, features, opts, seed)?;
    match &arch.cells[0].model {
        Some(_) => Ok(arch),
        None => {
            let y = labels(train)?;
            let positive = y.iter().filter(|&&v| v).count();
            Err(PredictorError::SingleClass { positive, negative: y.len() - positive })
        }
    }
}

/// One model per taxonomy category; a category that is empty or has a
/// single class keeps a constant fallback and records the error.
pub fn train_taxonomic(
    train: &[&FeatureRecord],
    features: &[String],
    taxonomy: &TaxonomyConfig,
    opts: &FitOptions,
    seed: u64,
) -> Result<Architecture, PredictorError> {
    train_routed(ArchitectureKind::Taxonomic, Router::Taxonomy { config: *taxonomy }, train, features, opts, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub first: usize,
    pub second: usize,
    pub f1: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSearch {
    pub candidates: Vec<String>,
    pub percentiles: Vec<u8>,
    /// Every (feature, percentile, direction) split, in search order.
    pub choices: Vec<Split>,
    pub total: usize,
    pub evaluated: usize,
    pub skipped: usize,
    pub grid: Vec<GridEntry>,
    pub best: PartitionSpec,
    pub best_f1: f64,
    pub architecture: Architecture,
}

fn canonical_index(name: &str) -> Result<usize, PredictorError> {
    FEATURE_NAMES
        .iter()
        .position(|f| *f == name)
        .ok_or_else(|| PredictorError::UnknownFeature(name.to_string()))
}

fn cell_problem(records: &[&FeatureRecord]) -> Option<String> {
    let pos = records.iter().filter(|r| r.memorized == Some(true)).count();
    if records.is_empty() {
        Some("empty cell".into())
    } else if pos == 0 || pos == records.len() {
        Some(format!("single-class cell ({pos} of {} memorized)", records.len()))
    } else {
        None
    }
}

/// Exhaustive search over ordered pairs of percentile splits. Each pair
/// defines three cells with one regression each; the pair with the highest
/// validation F1 wins, earlier pairs in search order winning ties. Search
/// order is canonical feature order, then ascending percentile, then `<=`
/// before `>`.
pub fn partition_search(
    train: &[&FeatureRecord],
    validation: &[&FeatureRecord],
    candidates: &[String],
    percentiles: &[u8],
    features: &[String],
    opts: &FitOptions,
    seed: u64,
) -> Result<PartitionSearch, PredictorError> {
    if candidates.len() < 2 {
        return Err(PredictorError::Candidates(candidates.len()));
    }
    let mut cands = candidates.to_vec();
    let mut keyed = Vec::new();
    for c in &cands {
        keyed.push((canonical_index(c)?, c.clone()));
    }
    keyed.sort();
    keyed.dedup();
    cands = keyed.into_iter().map(|(_, c)| c).collect();
    let mut pcts = percentiles.to_vec();
    pcts.sort_unstable();
    pcts.dedup();

    let mut choices = Vec::new();
    for f in &cands {
        let mut values: Vec<f64> = design_matrix(train, std::slice::from_ref(f))?.into_iter().map(|r| r[0]).collect();
        values.sort_by(f64::total_cmp);
        for &p in &pcts {
            let threshold = if values.is_empty() { 0.0 } else { percentile_sorted(&values, f64::from(p) / 100.0) };
            for direction in [Direction::Le, Direction::Gt] {
                choices.push(Split { feature: f.clone(), percentile: p, threshold, direction });
            }
        }
    }
    let y_val = labels(validation)?;

    // Cell A depends only on the first split.
    let first_cells: Vec<Result<(Vec<&FeatureRecord>, CellModel), String>> = choices
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let members: Vec<&FeatureRecord> = train
                .iter()
                .copied()
                .filter(|r| s.matches(r).unwrap_or(false))
                .collect();
            if let Some(reason) = cell_problem(&members) {
                return Err(format!("cell A: {reason}"));
            }
            let m = train_cell(s.describe(), &members, features, opts, rng::subseed(seed, &format!("partition/{i}")))
                .map_err(|e| e.to_string())?;
            Ok((members, m))
        })
        .collect();

    let n = choices.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let results: Vec<(GridEntry, Option<Architecture>)> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let skip = |reason: String| (GridEntry { first: i, second: j, f1: None, skipped: Some(reason) }, None);
            let (a_members, a_model) = match &first_cells[i] {
                Ok(v) => v,
                Err(reason) => return skip(reason.clone()),
            };
            let spec = PartitionSpec { splits: [choices[i].clone(), choices[j].clone()] };
            let rest: Vec<&FeatureRecord> = train
                .iter()
                .copied()
                .filter(|r| !choices[i].matches(r).unwrap_or(false))
                .collect();
            let (b, c): (Vec<&FeatureRecord>, Vec<&FeatureRecord>) =
                rest.into_iter().partition(|r| choices[j].matches(r).unwrap_or(false));
            for (name, cell) in [("B", &b), ("C", &c)] {
                if let Some(reason) = cell_problem(cell) {
                    return skip(format!("cell {name}: {reason}"));
                }
            }
            debug_assert_eq!(a_members.len() + b.len() + c.len(), train.len());
            let router = Router::Partition { spec };
            let names = router.cell_names();
            let mut cells = vec![a_model.clone()];
            for (k, members) in [(1usize, &b), (2, &c)] {
                let s = rng::subseed(seed, &format!("partition/{i}/{j}/{k}"));
                match train_cell(names[k].clone(), members, features, opts, s) {
                    Ok(m) => cells.push(m),
                    Err(e) => return skip(e.to_string()),
                }
            }
            let arch = Architecture {
                kind: ArchitectureKind::Partitioned,
                features: features.to_vec(),
                router,
                cells,
            };
            match arch.predict_all(validation) {
                Ok(p) => {
                    let f1 = confusion_f1(&p, &y_val);
                    (GridEntry { first: i, second: j, f1: Some(f1), skipped: None }, Some(arch))
                }
                Err(e) => skip(e.to_string()),
            }
        })
        .collect();

    let mut best: Option<(f64, Architecture)> = None;
    let mut grid = Vec::with_capacity(results.len());
    for (entry, arch) in results {
        if let (Some(f1), Some(arch)) = (entry.f1, arch) {
            if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
                best = Some((f1, arch));
            }
        }
        grid.push(entry);
    }
    let evaluated = grid.iter().filter(|g| g.f1.is_some()).count();
    let skipped = grid.len() - evaluated;
    log::info!(
        "partition search: {} candidate splits, {} partitions, {evaluated} evaluated, {skipped} skipped",
        n,
        n * n
    );
    let (best_f1, architecture) = best.ok_or(PredictorError::NoPartition)?;
    let best = match &architecture.router {
        Router::Partition { spec } => spec.clone(),
        _ => unreachable!("partition search builds partition routers"),
    };
    Ok(PartitionSearch {
        candidates: cands,
        percentiles: pcts,
        choices,
        total: n * n,
        evaluated,
        skipped,
        grid,
        best,
        best_f1,
        architecture,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub model: String,
    pub cell: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub features: Vec<String>,
    pub rows: Vec<WeightRow>,
}

/// Normalized-space weights of every cell model, untrained cells as zeros.
pub fn report_weights(architectures: &[&Architecture]) -> WeightTable {
    let features = architectures.first().map(|a| a.features.clone()).unwrap_or_default();
    let mut rows = Vec::new();
    for a in architectures {
        for cell in &a.cells {
            let (weights, bias, trained) = match &cell.model {
                Some(m) => (m.weights.clone(), m.bias, true),
                None => (vec![0.0; a.features.len()], 0.0, false),
            };
            rows.push(WeightRow { model: a.kind.as_str().into(), cell: cell.name.clone(), weights, bias, trained });
        }
    }
    WeightTable { features, rows }
}

impl WeightTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("model,cell,{},bias\n", self.features.join(","));
        for r in &self.rows {
            let w: Vec<String> = r.weights.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},\"{}\",{},{}\n", r.model, r.cell, w.join(","), r.bias));
        }
        out
    }
}
