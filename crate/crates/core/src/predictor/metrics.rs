//! Classification and calibration metrics with bootstrap spread.
//!
//! Positive class = memorized; a prediction is positive when its
//! probability is at least 0.5. Precision is 0 when nothing is predicted
//! positive, F1 is 0 when precision and recall are both 0. ECE uses 10
//! equal-width probability bins.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Architecture, PredictorError};
use crate::features::FeatureRecord;
use crate::rng;
use crate::stats::resample_indices;
use crate::taxonomy::{assign_category, TaxonomyCategory, TaxonomyConfig};

pub const DECISION_THRESHOLD: f64 = 0.5;
pub const ECE_BINS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub brier: f64,
    pub ece: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["accuracy", "precision", "recall", "f1", "brier", "ece"];

    pub fn values(&self) -> [f64; 6] {
        [self.accuracy, self.precision, self.recall, self.f1, self.brier, self.ece]
    }

    fn from_values(v: [f64; 6]) -> Self {
        Metrics { accuracy: v[0], precision: v[1], recall: v[2], f1: v[3], brier: v[4], ece: v[5] }
    }
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        0.0
    }
}

/// F1 at the decision threshold.
pub fn confusion_f1(p: &[f64], y: &[bool]) -> f64 {
    compute_metrics_indexed(p, y, None).f1
}

pub fn compute_metrics(p: &[f64], y: &[bool]) -> Metrics {
    compute_metrics_indexed(p, y, None)
}

fn compute_metrics_indexed(p: &[f64], y: &[bool], idx: Option<&[usize]>) -> Metrics {
    let n = idx.map_or(p.len(), <[usize]>::len);
    let at = |k: usize| idx.map_or(k, |ix| ix[k]);
    let (mut tp, mut fp, mut tn, mut fne) = (0f64, 0f64, 0f64, 0f64);
    let mut brier = 0.0;
    let mut bin_n = [0f64; ECE_BINS];
    let mut bin_p = [0f64; ECE_BINS];
    let mut bin_y = [0f64; ECE_BINS];
    for k in 0..n {
        let i = at(k);
        let (prob, label) = (p[i], y[i]);
        let yv = f64::from(u8::from(label));
        match (prob >= DECISION_THRESHOLD, label) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fne += 1.0,
        }
        brier += (prob - yv).powi(2);
        let b = ((prob * ECE_BINS as f64) as usize).min(ECE_BINS - 1);
        bin_n[b] += 1.0;
        bin_p[b] += prob;
        bin_y[b] += yv;
    }
    let nf = n as f64;
    let precision = safe_div(tp, tp + fp);
    let recall = safe_div(tp, tp + fne);
    let ece = (0..ECE_BINS)
        .filter(|&b| bin_n[b] > 0.0)
        .map(|b| bin_n[b] / nf * (bin_y[b] / bin_n[b] - bin_p[b] / bin_n[b]).abs())
        .sum();
    Metrics {
        accuracy: safe_div(tp + tn, nf),
        precision,
        recall,
        f1: safe_div(2.0 * precision * recall, precision + recall),
        brier: safe_div(brier, nf),
        ece,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    /// `all` or a taxonomy category name.
    pub subset: String,
    pub n: usize,
    /// `None` when the subset is empty.
    pub metrics: Option<Metrics>,
    pub stddev: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bootstrap: usize,
    pub seed: u64,
    pub decision_threshold: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, model: &str, subset: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model && r.subset == subset)
    }

    /// Long-format grid: one line per (model, subset, metric).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,subset,n,metric,value,stddev\n");
        for r in &self.rows {
            for (k, name) in Metrics::NAMES.iter().enumerate() {
                let (v, s) = match (r.metrics, r.stddev) {
                    (Some(m), Some(s)) => (m.values()[k].to_string(), s.values()[k].to_string()),
                    _ => (String::new(), String::new()),
                };
                out.push_str(&format!("{},{},{},{name},{v},{s}\n", r.model, r.subset, r.n));
            }
        }
        out
    }
}

fn bootstrap_stddev(p: &[f64], y: &[bool], b: usize, seed: u64) -> Metrics {
    if b < 2 {
        return Metrics::default();
    }
    let samples: Vec<[f64; 6]> = (0..b as u64)
        .into_par_iter()
        .map(|i| compute_metrics_indexed(p, y, Some(&resample_indices(p.len(), seed, i))).values())
        .collect();
    let mut out = [0.0; 6];
    for (k, o) in out.iter_mut().enumerate() {
        let mean = samples.iter().map(|s| s[k]).sum::<f64>() / b as f64;
        let var = samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (b - 1) as f64;
        *o = var.sqrt();
    }
    Metrics::from_values(out)
}

/// Metrics of every architecture on the test records, over the whole set
/// and per taxonomy category.
pub fn evaluate(
    architectures: &[&Architecture],
    test: &[&FeatureRecord],
    taxonomy: &TaxonomyConfig,
    bootstrap: usize,
    seed: u64,
) -> Result<EvalReport, PredictorError> {
    let y = super::labels(test)?;
    let cats: Vec<TaxonomyCategory> = test.iter().map(|r| assign_category(r, taxonomy)).collect();
    let mut rows = Vec::new();
    for arch in architectures {
        let p = arch.predict_all(test)?;
        let subsets = std::iter::once(("all".to_string(), None))
            .chain(TaxonomyCategory::ALL.iter().map(|c| (c.as_str().to_string(), Some(*c))));
        for (name, cat) in subsets {
            let idx: Vec<usize> = (0..test.len()).filter(|&i| cat.is_none_or(|c| cats[i] == c)).collect();
            let sp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let sy: Vec<bool> = idx.iter().map(|&i| y[i]).collect();
            let (metrics, stddev) = if idx.is_empty() {
                (None, None)
            } else {
                let s = rng::subseed(seed, &format!("eval/{}/{name}", arch.kind.as_str()));
                (Some(compute_metrics(&sp, &sy)), Some(bootstrap_stddev(&sp, &sy, bootstrap, s)))
            };
            rows.push(EvalRow { model: arch.kind.as_str().into(), subset: name, n: idx.len(), metrics, stddev });
        }
    }
    Ok(EvalReport { bootstrap, seed, decision_threshold: DECISION_THRESHOLD, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let m = compute_metrics(&[1.0, 0.0, 1.0, 0.0], &[true, false, true, false]);
        assert_eq!(m, Metrics { accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 1.0, brier: 0.0, ece: 0.0 });
    }

    #[test]
    fn always_positive_on_balanced() {
        let m = compute_metrics(&[0.9; 4], &[true, false, true, false]);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_half_brier() {
        let m = compute_metrics(&[0.5; 6], &[true, false, true, false, true, false]);
        assert_eq!(m.brier, 0.25);
        assert_eq!(m.ece, 0.0);
    }

    #[test]
    fn no_positive_predictions() {
        let m = compute_metrics(&[0.1, 0.2], &[true, false]);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn ece_hand_value() {
        // bin 0.2-0.3: p 0.25, 0.25 with one positive -> gap 0.25
        // bin 0.9-1.0: p 0.95, 0.95 both positive -> gap 0.05
        let m = compute_metrics(&[0.25, 0.25, 0.95, 0.95], &[true, false, true, true]);
        assert!((m.ece - (0.5 * 0.25 + 0.5 * 0.05)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn metrics_in_unit_interval(p in prop::collection::vec(0.0f64..=1.0, 1..50), seed in any::<u64>()) {
            let mut r = crate::rng::seeded(seed);
            use rand::Rng;
            let y: Vec<bool> = p.iter().map(|_| r.random_bool(0.5)).collect();
            for v in compute_metrics(&p, &y).values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
