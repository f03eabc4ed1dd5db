//! Histograms, unmemorized-distribution estimation, KL divergence against
//! duplicate count, rank dependency tests and the bootstrap.
//!
//! Every random draw comes from streams derived from one root seed, one
//! stream per resample or permutation batch, so results do not depend on
//! the number of worker threads.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::frequency::percentile_sorted;
use crate::features::FeatureRecord;
use crate::rng;
use crate::taxonomy::TaxonomyCategory;

pub const DEFAULT_EPSILON: f64 = 1e-10;
pub const DEFAULT_KL_BINS: usize = 50;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
pub const DEFAULT_PERMUTATIONS: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("log scale needs positive values; {count} offenders, first {first:?}")]
    NonPositive { count: usize, first: Vec<f64> },
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("invalid bin edges: {0}")]
    Edges(String),
    #[error("histograms have different edges")]
    EdgeMismatch,
    #[error("memorized count {n_mem} must be below total {n_total}")]
    Counts { n_mem: u64, n_total: u64 },
    #[error("no mass remains after subtracting the memorized distribution")]
    NoMass,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Linear,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bins {
    Count(usize),
    Edges(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    /// Number of underlying values.
    pub count: usize,
    /// Values outside the edges that were clamped into an end bin.
    pub clamped: usize,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.masses.len()
    }
}

fn check_edges(edges: &[f64]) -> Result<(), StatsError> {
    if edges.len() < 2 {
        return Err(StatsError::Edges(format!("need at least 2 edges, got {}", edges.len())));
    }
    if edges.iter().any(|e| !e.is_finite()) {
        return Err(StatsError::Edges("non-finite edge".into()));
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(StatsError::Edges("edges must be strictly increasing".into()));
    }
    Ok(())
}

/// `bins + 1` edges spanning `[lo, hi]`, evenly spaced in value or in log.
/// A degenerate range is widened around the single value.
pub fn make_edges(lo: f64, hi: f64, bins: usize, scale: Scale) -> Result<Vec<f64>, StatsError> {
    if bins == 0 {
        return Err(StatsError::Edges("bin count must be positive".into()));
    }
    let (lo, hi) = match (scale, lo < hi) {
        (_, true) => (lo, hi),
        (Scale::Linear, false) => (lo - 0.5, hi + 0.5),
        (Scale::Log, false) => (lo / 2.0, hi * 2.0),
    };
    let edges: Vec<f64> = match scale {
        Scale::Linear => (0..=bins)
            .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
            .collect(),
        Scale::Log => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..=bins)
                .map(|i| (a + (b - a) * i as f64 / bins as f64).exp())
                .collect()
        }
    };
    let mut edges = edges;
    // Pin the ends exactly so no in-range value is reported as clamped.
    edges[0] = lo;
    edges[bins] = hi;
    check_edges(&edges)?;
    Ok(edges)
}

/// Normalized histogram of `values`. Bins are closed on the left, the last
/// bin also on the right; values outside the edges go to the nearest end
/// bin and are counted in `clamped`.
pub fn build_histogram(values: &[f64], bins: &Bins, scale: Scale) -> Result<Histogram, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty("histogram values"));
    }
    if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(v));
    }
    if scale == Scale::Log {
        let bad: Vec<f64> = values.iter().copied().filter(|&v| v <= 0.0).collect();
        if !bad.is_empty() {
            return Err(StatsError::NonPositive {
                count: bad.len(),
                first: bad.into_iter().take(5).collect(),
            });
        }
    }
    let edges = match bins {
        Bins::Edges(e) => {
            check_edges(e)?;
            if scale == Scale::Log && e[0] <= 0.0 {
                return Err(StatsError::Edges("log-scale edges must be positive".into()));
            }
            e.clone()
        }
        Bins::Count(n) => {
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            make_edges(lo, hi, *n, scale)?
        }
    };
    let b = edges.len() - 1;
    let mut counts = vec![0usize; b];
    let mut clamped = 0;
    for &v in values {
        if v < edges[0] || v > edges[b] {
            clamped += 1;
        }
        let i = edges.partition_point(|&e| e <= v).saturating_sub(1).min(b - 1);
        counts[i] += 1;
    }
    let n = values.len() as f64;
    Ok(Histogram {
        edges,
        masses: counts.into_iter().map(|c| c as f64 / n).collect(),
        count: values.len(),
        clamped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnmemorizedEstimate {
    pub histogram: Histogram,
    /// Mass (as a fraction of the unmemorized population) removed by
    /// flooring negative bins at zero.
    pub clipped_mass: f64,
}

/// Distribution of the unmemorized population, inferred by subtracting the
/// memorized histogram from the representative one at population rates.
pub fn estimate_unmemorized(
    rep: &Histogram,
    mem: &Histogram,
    n_total: u64,
    n_mem: u64,
) -> Result<UnmemorizedEstimate, StatsError> {
    if rep.edges != mem.edges {
        return Err(StatsError::EdgeMismatch);
    }
    if n_mem >= n_total {
        return Err(StatsError::Counts { n_mem, n_total });
    }
    let rest = (n_total - n_mem) as f64;
    let raw: Vec<f64> = rep
        .masses
        .iter()
        .zip(&mem.masses)
        .map(|(r, m)| (n_total as f64 * r - n_mem as f64 * m) / rest)
        .collect();
    let clipped_mass = raw.iter().filter(|&&x| x < 0.0).map(|x| -x).sum();
    let floored: Vec<f64> = raw.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = floored.iter().sum();
    if total <= 0.0 {
        return Err(StatsError::NoMass);
    }
    Ok(UnmemorizedEstimate {
        histogram: Histogram {
            edges: rep.edges.clone(),
            masses: floored.iter().map(|x| x / total).collect(),
            count: (n_total - n_mem) as usize,
            clamped: 0,
        },
        clipped_mass,
    })
}

/// KL(p ‖ q) in nats between mass vectors after adding `epsilon` to every
/// bin and renormalizing.
pub fn kl_masses(p: &[f64], q: &[f64], epsilon: f64) -> f64 {
    let ps: f64 = p.iter().map(|x| x + epsilon).sum();
    let qs: f64 = q.iter().map(|x| x + epsilon).sum();
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let a = (pi + epsilon) / ps;
            let b = (qi + epsilon) / qs;
            if a > 0.0 {
                a * (a / b).ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
        .max(0.0)
}

pub fn kl_divergence(p: &Histogram, q: &Histogram, epsilon: f64) -> Result<f64, StatsError> {
    if p.edges != q.edges {
        return Err(StatsError::EdgeMismatch);
    }
    Ok(kl_masses(&p.masses, &q.masses, epsilon))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub mean: f64,
    pub stddev: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub resamples: usize,
}

impl BootstrapSummary {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        let b = values.len();
        let mean = values.iter().sum::<f64>() / b as f64;
        let var = if b > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64
        } else {
            0.0
        };
        values.sort_by(f64::total_cmp);
        BootstrapSummary {
            mean,
            stddev: var.sqrt(),
            ci_low: percentile_sorted(&values, 0.025),
            ci_high: percentile_sorted(&values, 0.975),
            resamples: b,
        }
    }
}

/// Resample indices `0..n` with replacement from stream `stream` of `seed`.
pub fn resample_indices(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut r = rng::derived(seed, stream);
    (0..n).map(|_| r.random_range(0..n)).collect()
}

/// Nonparametric bootstrap of `statistic` over `data`: `b` resamples with
/// replacement, each drawn from its own derived stream of `seed`.
pub fn bootstrap<T, F>(data: &[T], statistic: F, b: usize, seed: u64) -> Result<BootstrapSummary, StatsError>
where
    T: Clone + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    if data.is_empty() {
        return Err(StatsError::Empty("bootstrap data"));
    }
    if b == 0 {
        return Err(StatsError::Empty("bootstrap resamples"));
    }
    let values: Vec<f64> = (0..b as u64)
        .into_par_iter()
        .map(|i| {
            let sample: Vec<T> = resample_indices(data.len(), seed, i)
                .into_iter()
                .map(|j| data[j].clone())
                .collect();
            statistic(&sample)
        })
        .collect();
    Ok(BootstrapSummary::from_values(values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlConfig {
    /// Inclusive duplicate-count ranges; `None` uses 1..10 then doubling.
    pub duplicate_bins: Option<Vec<(u64, u64)>>,
    pub bins: usize,
    pub epsilon: f64,
    pub bootstrap: usize,
    /// Minimum memorized and unmemorized samples for a bin to be reported.
    pub min_per_class: usize,
}

impl Default for KlConfig {
    fn default() -> Self {
        KlConfig {
            duplicate_bins: None,
            bins: DEFAULT_KL_BINS,
            epsilon: DEFAULT_EPSILON,
            bootstrap: DEFAULT_BOOTSTRAP,
            min_per_class: 5,
        }
    }
}

/// Singleton bins 1..=10, then [11, 20], [21, 40], ... until `max` is
/// covered.
pub fn default_duplicate_bins(max: u64) -> Vec<(u64, u64)> {
    let mut bins: Vec<(u64, u64)> = (1..=10.min(max.max(1))).map(|d| (d, d)).collect();
    let (mut lo, mut hi) = (11u64, 20u64);
    while lo <= max {
        bins.push((lo, hi));
        lo = hi + 1;
        hi *= 2;
    }
    bins
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlPoint {
    pub dup_low: u64,
    pub dup_high: u64,
    pub n_memorized: usize,
    pub n_unmemorized: usize,
    /// Bootstrap mean.
    pub kl: f64,
    /// Plug-in estimate on the full bin population.
    pub kl_point: f64,
    pub stddev: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedBin {
    pub dup_low: u64,
    pub dup_high: u64,
    pub n_memorized: usize,
    pub n_unmemorized: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlCurve {
    pub edges: Vec<f64>,
    pub points: Vec<KlPoint>,
    pub skipped: Vec<SkippedBin>,
    pub seed: u64,
}

/// KL(memorized ‖ unmemorized) of continuation perplexity per duplicate-count
/// bin. Records lacking a label or continuation perplexity are ignored.
pub fn kl_vs_duplicates(records: &[FeatureRecord], config: &KlConfig, seed: u64) -> Result<KlCurve, StatsError> {
    let usable: Vec<(u64, f64, bool)> = records
        .iter()
        .filter_map(|r| Some((r.duplicate_count, r.continuation_perplexity?, r.memorized?)))
        .collect();
    if usable.is_empty() {
        return Err(StatsError::Empty("labeled records with continuation perplexity"));
    }
    let pooled: Vec<f64> = usable.iter().map(|u| u.1).collect();
    let edges = build_histogram(&pooled, &Bins::Count(config.bins), Scale::Log)?.edges;
    let max_dup = usable.iter().map(|u| u.0).max().unwrap_or(1);
    let dup_bins = config
        .duplicate_bins
        .clone()
        .unwrap_or_else(|| default_duplicate_bins(max_dup));

    let edges_bins = Bins::Edges(edges.clone());
    let hist = |v: &[f64]| -> Vec<f64> {
        build_histogram(v, &edges_bins, Scale::Log)
            .expect("values share the pooled range")
            .masses
    };
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (bin_no, &(lo, hi)) in dup_bins.iter().enumerate() {
        let in_bin = |d: u64| lo <= d && d <= hi;
        let mem: Vec<f64> = usable.iter().filter(|u| in_bin(u.0) && u.2).map(|u| u.1).collect();
        let unmem: Vec<f64> = usable.iter().filter(|u| in_bin(u.0) && !u.2).map(|u| u.1).collect();
        if mem.len() < config.min_per_class.max(1) || unmem.len() < config.min_per_class.max(1) {
            skipped.push(SkippedBin { dup_low: lo, dup_high: hi, n_memorized: mem.len(), n_unmemorized: unmem.len() });
            continue;
        }
        let kl_point = kl_masses(&hist(&mem), &hist(&unmem), config.epsilon);
        let bin_seed = rng::subseed(seed, &format!("kl/{bin_no}"));
        let values: Vec<f64> = (0..config.bootstrap.max(1) as u64)
            .into_par_iter()
            .map(|b| {
                let m: Vec<f64> = resample_indices(mem.len(), bin_seed, 2 * b).into_iter().map(|i| mem[i]).collect();
                let u: Vec<f64> = resample_indices(unmem.len(), bin_seed, 2 * b + 1).into_iter().map(|i| unmem[i]).collect();
                kl_masses(&hist(&m), &hist(&u), config.epsilon)
            })
            .collect();
        let s = BootstrapSummary::from_values(values);
        points.push(KlPoint {
            dup_low: lo,
            dup_high: hi,
            n_memorized: mem.len(),
            n_unmemorized: unmem.len(),
            kl: s.mean,
            kl_point,
            stddev: s.stddev,
            ci_low: s.ci_low.min(s.mean),
            ci_high: s.ci_high.max(s.mean),
        });
    }
    Ok(KlCurve { edges, points, skipped, seed })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn centered(v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.into_iter().map(|x| x - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    let rx = centered(average_ranks(x));
    let ry = centered(average_ranks(y));
    let denom = (dot(&rx, &rx) * dot(&ry, &ry)).sqrt();
    (denom > 0.0).then(|| (dot(&rx, &ry) / denom).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyResult {
    /// `None` for the pooled sample set.
    pub category: Option<TaxonomyCategory>,
    pub feature: String,
    pub n: usize,
    pub rho: Option<f64>,
    pub p_value: Option<f64>,
    /// Reason the test could not be run.
    pub degenerate: Option<String>,
}

const PERMUTATION_BATCH: usize = 250;

/// Spearman correlation between `x` and binary `labels` with a two-sided
/// permutation p-value `(1 + #{|rho_perm| >= |rho|}) / (1 + permutations)`.
pub fn spearman_permutation(x: &[f64], labels: &[bool], permutations: usize, seed: u64) -> Result<(f64, f64), String> {
    if x.len() != labels.len() {
        return Err(format!("{} values for {} labels", x.len(), labels.len()));
    }
    if x.len() < 10 {
        return Err(format!("only {} samples", x.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err("single-class labels".into());
    }
    let rx = centered(average_ranks(x));
    let ry = centered(average_ranks(&labels.iter().map(|&l| f64::from(u8::from(l))).collect::<Vec<_>>()));
    let sxx = dot(&rx, &rx);
    if sxx == 0.0 {
        return Err("constant feature".into());
    }
    let denom = (sxx * dot(&ry, &ry)).sqrt();
    let rho = (dot(&rx, &ry) / denom).clamp(-1.0, 1.0);
    let target = rho.abs() - 1e-12;
    let batches = permutations.div_ceil(PERMUTATION_BATCH);
    let hits: usize = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::derived(seed, b as u64);
            let mut perm = ry.clone();
            let todo = PERMUTATION_BATCH.min(permutations - b * PERMUTATION_BATCH);
            (0..todo)
                .filter(|_| {
                    perm.shuffle(&mut r);
                    (dot(&rx, &perm) / denom).abs() >= target
                })
                .count()
        })
        .sum();
    Ok((rho, (hits + 1) as f64 / (permutations + 1) as f64))
}

/// Dependency between one feature and the memorized label within
/// `category` (all labeled records when `None`).
pub fn dependency_test(
    records: &[FeatureRecord],
    category: Option<TaxonomyCategory>,
    feature: &str,
    permutations: usize,
    seed: u64,
) -> DependencyResult {
    let rows: Vec<(f64, bool)> = records
        .iter()
        .filter(|r| category.is_none() || r.taxonomy == category)
        .filter_map(|r| Some((r.feature(feature)?, r.memorized?)))
        .collect();
    let (x, y): (Vec<f64>, Vec<bool>) = rows.into_iter().unzip();
    let mut out = DependencyResult {
        category,
        feature: feature.to_string(),
        n: x.len(),
        rho: None,
        p_value: None,
        degenerate: None,
    };
    match spearman_permutation(&x, &y, permutations, seed) {
        Ok((rho, p)) => {
            out.rho = Some(rho);
            out.p_value = Some(p);
        }
        Err(reason) => out.degenerate = Some(reason),
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyReport {
    pub permutations: usize,
    pub seed: u64,
    pub results: Vec<DependencyResult>,
}

/// Dependency tests for every (category, feature) pair, categories first
/// pooled then in taxonomy order.
pub fn dependency_matrix(records: &[FeatureRecord], features: &[&str], permutations: usize, seed: u64) -> DependencyReport {
    let cats: Vec<Option<TaxonomyCategory>> =
        std::iter::once(None).chain(TaxonomyCategory::ALL.map(Some)).collect();
    let results = cats
        .iter()
        .flat_map(|&c| features.iter().map(move |&f| (c, f)))
        .map(|(c, f)| {
            let tag = format!("dep/{}/{f}", c.map_or("all", |c| c.as_str()));
            dependency_test(records, c, f, permutations, rng::subseed(seed, &tag))
        })
        .collect();
    DependencyReport { permutations, seed, results }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn hist(masses: Vec<f64>) -> Histogram {
        let edges = (0..=masses.len()).map(|i| i as f64).collect();
        Histogram { edges, masses, count: 10, clamped: 0 }
    }

    #[test]
    fn histogram_fixtures() {
        let h = build_histogram(&[3.0; 7], &Bins::Count(2), Scale::Linear).unwrap();
        assert_eq!(h.masses.iter().filter(|&&m| m == 1.0).count(), 1);
        let h = build_histogram(&[1.0, 2.0, 3.0, 4.0], &Bins::Edges(vec![1.0, 2.5, 4.0]), Scale::Linear).unwrap();
        assert_eq!(h.masses, vec![0.5, 0.5]);
        assert_eq!(h.clamped, 0);
        let h = build_histogram(&[0.0, 5.0, 9.0], &Bins::Edges(vec![1.0, 2.0, 3.0]), Scale::Linear).unwrap();
        assert_eq!(h.clamped, 3);
        assert_eq!(h.masses, vec![1.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn histogram_errors() {
        assert_eq!(build_histogram(&[], &Bins::Count(3), Scale::Linear), Err(StatsError::Empty("histogram values")));
        match build_histogram(&[1.0, -2.0, 0.0], &Bins::Count(3), Scale::Log) {
            Err(StatsError::NonPositive { count, first }) => {
                assert_eq!(count, 2);
                assert_eq!(first, vec![-2.0, 0.0]);
            }
            other => panic!("{other:?}"),
        }
        assert!(build_histogram(&[1.0], &Bins::Edges(vec![2.0, 1.0]), Scale::Linear).is_err());
    }

    #[test]
    fn log_edges_cover_range() {
        let v = [0.5, 3.0, 100.0, 7.0];
        let h = build_histogram(&v, &Bins::Count(50), Scale::Log).unwrap();
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.edges[0], 0.5);
        assert_eq!(h.edges[50], 100.0);
        assert_eq!(h.clamped, 0);
        let ratio = h.edges[1] / h.edges[0];
        assert!((h.edges[25] / h.edges[24] - ratio).abs() < 1e-9);
    }

    #[test]
    fn unmemorized_fixtures() {
        let rep = hist(vec![0.5, 0.5]);
        let mem = hist(vec![1.0, 0.0]);
        let u = estimate_unmemorized(&rep, &mem, 100, 0).unwrap();
        assert_eq!(u.histogram.masses, rep.masses);
        let u = estimate_unmemorized(&rep, &mem, 100, 50).unwrap();
        assert_eq!(u.histogram.masses, vec![0.0, 1.0]);
        assert_eq!(u.clipped_mass, 0.0);
        // memorized mass exceeds representative mass in bin 0
        let rep = hist(vec![0.2, 0.8]);
        let u = estimate_unmemorized(&rep, &mem, 100, 50).unwrap();
        assert_eq!(u.histogram.masses, vec![0.0, 1.0]);
        assert!((u.clipped_mass - 0.6).abs() < 1e-12);
        assert_eq!(estimate_unmemorized(&rep, &mem, 10, 10), Err(StatsError::Counts { n_mem: 10, n_total: 10 }));
    }

    #[test]
    fn unmemorized_composes_back() {
        let rep = hist(vec![0.1, 0.3, 0.4, 0.2]);
        let mem = hist(vec![0.05, 0.45, 0.3, 0.2]);
        let (nt, nm) = (1000u64, 200u64);
        let u = estimate_unmemorized(&rep, &mem, nt, nm).unwrap();
        for i in 0..4 {
            let mix = (nm as f64 * mem.masses[i] + (nt - nm) as f64 * u.histogram.masses[i]) / nt as f64;
            assert!((mix - rep.masses[i]).abs() <= u.clipped_mass + 1e-12);
        }
    }

    #[test]
    fn kl_fixtures() {
        let p = hist(vec![1.0, 0.0]);
        let q = hist(vec![0.5, 0.5]);
        assert!((kl_divergence(&p, &q, DEFAULT_EPSILON).unwrap() - 2f64.ln()).abs() < 1e-6);
        assert!(kl_divergence(&p, &p, DEFAULT_EPSILON).unwrap() <= 1e-9);
        let back = kl_divergence(&q, &p, DEFAULT_EPSILON).unwrap();
        assert!((back - 2f64.ln()).abs() > 1.0);
        let mut other = q.clone();
        other.edges[1] = 0.5;
        assert_eq!(kl_divergence(&p, &other, DEFAULT_EPSILON), Err(StatsError::EdgeMismatch));
    }

    #[test]
    fn bootstrap_basics() {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let s = bootstrap(&[4.0; 30], mean, 200, 1).unwrap();
        assert_eq!(s.stddev, 0.0);
        assert_eq!((s.mean, s.ci_low, s.ci_high), (4.0, 4.0, 4.0));
        let data: Vec<f64> = (0..50).map(|i| (i * 7 % 13) as f64).collect();
        assert_eq!(bootstrap(&data, mean, 300, 9).unwrap(), bootstrap(&data, mean, 300, 9).unwrap());
        assert_ne!(bootstrap(&data, mean, 300, 9).unwrap(), bootstrap(&data, mean, 300, 10).unwrap());
        assert!(bootstrap::<f64, _>(&[], mean, 10, 1).is_err());
    }

    #[test]
    fn bootstrap_is_thread_count_invariant() {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let data: Vec<f64> = (0..40).map(|i| (i * i % 17) as f64).collect();
        let a = bootstrap(&data, mean, 200, 5).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| bootstrap(&data, mean, 200, 5).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn default_bins() {
        assert_eq!(default_duplicate_bins(3), vec![(1, 1), (2, 2), (3, 3)]);
        let b = default_duplicate_bins(50);
        assert_eq!(b.len(), 13);
        assert_eq!(&b[10..], &[(11, 20), (21, 40), (41, 80)]);
    }

    fn records_with(ppl: impl Fn(u64, bool, usize) -> f64, per_bin: usize) -> Vec<FeatureRecord> {
        let mut out = Vec::new();
        for dup in 1..=8u64 {
            for i in 0..per_bin {
                for mem in [false, true] {
                    let mut r = crate::test_util::record(dup, crate::TemplateKind::None);
                    r.memorized = Some(mem);
                    r.continuation_perplexity = Some(ppl(dup, mem, i));
                    out.push(r);
                }
            }
        }
        out
    }

    fn lognormal(seed: u64, i: usize, shift: f64) -> f64 {
        let mut r = rng::derived(seed, i as u64);
        let z: f64 = Normal::new(0.0, 0.5).unwrap().sample(&mut r);
        (2.0 + shift + z).exp()
    }

    #[test]
    fn kl_curve_planted_shift() {
        let recs = records_with(|dup, mem, i| lognormal(dup * 2 + u64::from(mem), i, if dup == 6 && mem { 1.5 } else { 0.0 }), 200);
        let cfg = KlConfig { bootstrap: 100, ..Default::default() };
        let curve = kl_vs_duplicates(&recs, &cfg, 3).unwrap();
        assert_eq!(curve.points.len(), 8);
        let best = curve.points.iter().max_by(|a, b| a.kl.total_cmp(&b.kl)).unwrap();
        assert_eq!(best.dup_low, 6);
        for p in &curve.points {
            assert!(p.ci_low <= p.kl && p.kl <= p.ci_high);
            assert!(p.kl >= 0.0);
        }
    }

    #[test]
    fn kl_curve_identical_generators_and_skips() {
        let recs = records_with(|dup, mem, i| lognormal(dup * 2 + u64::from(mem), i, 0.0), 400);
        let cfg = KlConfig { bins: 10, bootstrap: 100, duplicate_bins: Some(vec![(1, 1), (2, 2), (9, 12)]), ..Default::default() };
        let curve = kl_vs_duplicates(&recs, &cfg, 3).unwrap();
        assert_eq!(curve.points.len(), 2);
        assert_eq!(curve.skipped.len(), 1);
        for p in &curve.points {
            assert!(p.kl_point < 0.1, "{p:?}");
            assert!(p.ci_low < 0.1);
        }
    }

    #[test]
    fn kl_ci_shrinks_with_population() {
        // A coarse epsilon keeps empty-bin terms from dominating the spread.
        let width = |n: usize| {
            let recs = records_with(|dup, mem, i| lognormal(dup * 2 + u64::from(mem), i, if mem { 0.6 } else { 0.0 }), n);
            let cfg = KlConfig { bins: 8, epsilon: 1e-3, bootstrap: 400, duplicate_bins: Some(vec![(1, 1)]), ..Default::default() };
            let p = &kl_vs_duplicates(&recs, &cfg, 11).unwrap().points[0];
            p.ci_high - p.ci_low
        };
        let (a, b) = (width(400), width(1600));
        let ratio = b / a;
        assert!((0.3..0.75).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]), None);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 5.0, 9.0]), Some(1.0));
    }

    #[test]
    fn dependency_monotone_and_degenerate() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let (rho, p) = spearman_permutation(&x, &y, 2000, 1).unwrap();
        // Perfect separation: rank correlation with a binary label.
        let expected = spearman(&x, &y.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>()).unwrap();
        assert!((rho - expected).abs() < 1e-12);
        assert!(p < 0.01);
        let rev: Vec<bool> = y.iter().map(|b| !b).collect();
        let (rho_rev, _) = spearman_permutation(&x, &rev, 200, 1).unwrap();
        assert!((rho_rev + rho).abs() < 1e-12);
        assert!(spearman_permutation(&[1.0; 20], &y, 100, 1).unwrap_err().contains("constant"));
        assert!(spearman_permutation(&x, &[true; 20], 100, 1).unwrap_err().contains("single-class"));
        assert!(spearman_permutation(&x[..5], &y[..5], 100, 1).is_err());
    }

    #[test]
    fn label_aligned_feature_gives_unit_rho() {
        let y: Vec<bool> = (0..24).map(|i| i % 3 == 0).collect();
        let x: Vec<f64> = y.iter().map(|&b| if b { 9.0 } else { 2.0 }).collect();
        let (rho, _) = spearman_permutation(&x, &y, 100, 2).unwrap();
        assert!((rho - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let (rho, _) = spearman_permutation(&neg, &y, 100, 2).unwrap();
        assert!((rho + 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfectly_ordered_ranks_give_unit_rho() {
        // Strictly increasing in both: rho = 1, reversed: rho = -1.
        let x: Vec<f64> = (0..30).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v * 2.0 + 1.0).collect();
        assert_eq!(spearman(&x, &y), Some(1.0));
        let yr: Vec<f64> = y.iter().rev().copied().collect();
        assert_eq!(spearman(&x, &yr), Some(-1.0));
    }

    #[test]
    fn dependency_matrix_flags_missing_categories() {
        let recs = records_with(|dup, mem, i| lognormal(dup * 2 + u64::from(mem), i, 0.0), 10);
        let rep = dependency_matrix(&recs, &["continuation_perplexity", "duplicate_count"], 100, 4);
        assert_eq!(rep.results.len(), 8);
        assert!(rep.results[0].rho.is_some());
        // records carry no taxonomy, so per-category tests are degenerate
        assert!(rep.results[2..].iter().all(|r| r.degenerate.is_some()));
    }
}
