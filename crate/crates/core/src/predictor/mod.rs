//! Logistic-regression predictors of memorization: one aggregate baseline,
//! one model per taxonomy category, and one model per cell of a searched
//! two-split partition.

pub mod architecture;
pub mod logreg;
pub mod metrics;
pub mod split;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use architecture::{
    partition_search, report_weights, train_baseline, train_taxonomic, Architecture, ArchitectureKind,
    CellModel, Direction, PartitionSearch, PartitionSpec, Router, Split, WeightTable,
};
pub use logreg::{sigmoid, FitOptions};
pub use metrics::{evaluate, EvalReport, Metrics};
pub use split::{split_datasets, SplitRatios, Splits};

use crate::features::FeatureRecord;
use logreg::{balanced_weights, Problem};

#[derive(Debug, Error, PartialEq)]
pub enum PredictorError {
    #[error("training data needs both classes (memorized {positive}, unmemorized {negative})")]
    SingleClass { positive: usize, negative: usize },
    #[error("expected {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("record {sample_id} has no value for feature {feature:?}")]
    MissingFeature { sample_id: u64, feature: String },
    #[error("record {0} has no memorization label")]
    MissingLabel(u64),
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("{count} ids appear in both inputs (first: {first:?})")]
    Overlap { count: usize, first: Vec<u64> },
    #[error("invalid ratio {name} = {value}")]
    Ratio { name: &'static str, value: f64 },
    #[error("partition search needs at least 2 candidate features, got {0}")]
    Candidates(usize),
    #[error("no partition had trainable cells")]
    NoPartition,
    #[error("record {0} has no taxonomy category")]
    MissingCategory(u64),
}

/// Per-feature standardization fitted on training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with zero spread; passed through unchanged.
    pub constant: Vec<bool>,
}

impl Normalizer {
    /// Population mean and standard deviation per column.
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        let constant: Vec<bool> = std
            .iter()
            .zip(&mean)
            .map(|(s, m)| *s <= 1e-12 * m.abs().max(1.0))
            .collect();
        Normalizer { mean, std, constant }
    }

    pub fn identity(d: usize) -> Self {
        Normalizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
            constant: vec![true; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(i, &v)| if self.constant[i] { v } else { (v - self.mean[i]) / self.std[i] })
            .collect()
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.apply_row(r)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub n_train: usize,
    pub n_positive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub features: Vec<String>,
    /// Weights in normalized feature space.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    /// `(unmemorized, memorized)` loss weights.
    pub class_weights: (f64, f64),
    pub normalizer: Normalizer,
    pub meta: TrainingMeta,
}

impl RegressionModel {
    /// All-zero model over `features`; predicts 0.5 everywhere.
    pub fn zero(features: &[String]) -> Self {
        let d = features.len();
        RegressionModel {
            features: features.to_vec(),
            weights: vec![0.0; d],
            bias: 0.0,
            lambda: 0.0,
            class_weights: (1.0, 1.0),
            normalizer: Normalizer::identity(d),
            meta: TrainingMeta {
                seed: 0,
                iterations: 0,
                gradient_norm: 0.0,
                converged: false,
                tolerance: 0.0,
                max_iterations: 0,
                initial_objective: 0.0,
                final_objective: 0.0,
                n_train: 0,
                n_positive: 0,
            },
        }
    }
}

/// Trains on raw feature rows: fits a normalizer, applies balanced class
/// weights and minimizes the regularized weighted log loss.
pub fn train_logreg(
    features: &[String],
    x: &[Vec<f64>],
    y: &[bool],
    opts: &FitOptions,
    seed: u64,
) -> Result<RegressionModel, PredictorError> {
    if let Some(bad) = x.iter().find(|r| r.len() != features.len()) {
        return Err(PredictorError::Dimension { expected: features.len(), got: bad.len() });
    }
    let positive = y.iter().filter(|&&v| v).count();
    let (wn, wp) = balanced_weights(y).ok_or(PredictorError::SingleClass {
        positive,
        negative: y.len() - positive,
    })?;
    let normalizer = Normalizer::fit(x);
    // A constant column duplicates the unregularized bias, so its optimal
    // weight is exactly 0; leaving it out keeps raw pass-through values
    // from wrecking the Hessian's conditioning.
    let active: Vec<usize> = (0..features.len()).filter(|&j| !normalizer.constant[j]).collect();
    let xn: Vec<Vec<f64>> = normalizer
        .apply(x)
        .into_iter()
        .map(|r| active.iter().map(|&j| r[j]).collect())
        .collect();
    let s: Vec<f64> = y.iter().map(|&l| if l { wp } else { wn }).collect();
    let fit = Problem { x: &xn, y, sample_weights: &s, lambda: opts.lambda }.fit(opts);
    let mut weights = vec![0.0; features.len()];
    for (k, &j) in active.iter().enumerate() {
        weights[j] = fit.weights[k];
    }
    if !fit.converged {
        log::warn!(
            "logistic regression stopped after {} iterations with gradient norm {:.3e}",
            fit.iterations,
            fit.gradient_norm
        );
    }
    Ok(RegressionModel {
        features: features.to_vec(),
        weights,
        bias: fit.bias,
        lambda: opts.lambda,
        class_weights: (wn, wp),
        normalizer,
        meta: TrainingMeta {
            seed,
            iterations: fit.iterations,
            gradient_norm: fit.gradient_norm,
            converged: fit.converged,
            tolerance: opts.tolerance,
            max_iterations: opts.max_iterations,
            initial_objective: fit.objective_trace[0],
            final_objective: *fit.objective_trace.last().unwrap(),
            n_train: y.len(),
            n_positive: positive,
        },
    })
}

/// Memorization probability for one raw feature row.
pub fn predict(model: &RegressionModel, x: &[f64]) -> Result<f64, PredictorError> {
    if x.len() != model.weights.len() {
        return Err(PredictorError::Dimension { expected: model.weights.len(), got: x.len() });
    }
    let z: f64 = model
        .normalizer
        .apply_row(x)
        .iter()
        .zip(&model.weights)
        .map(|(a, w)| a * w)
        .sum::<f64>()
        + model.bias;
    Ok(sigmoid(z))
}

/// Feature rows for `records` in the order of `features`.
pub fn design_matrix(records: &[&FeatureRecord], features: &[String]) -> Result<Vec<Vec<f64>>, PredictorError> {
    records
        .iter()
        .map(|r| {
            features
                .iter()
                .map(|f| {
                    r.feature(f).ok_or_else(|| {
                        if crate::features::is_feature_name(f) {
                            PredictorError::MissingFeature { sample_id: r.sample_id, feature: f.clone() }
                        } else {
                            PredictorError::UnknownFeature(f.clone())
                        }
                    })
                })
                .collect()
        })
        .collect()
}

pub fn labels(records: &[&FeatureRecord]) -> Result<Vec<bool>, PredictorError> {
    records
        .iter()
        .map(|r| r.memorized.ok_or(PredictorError::MissingLabel(r.sample_id)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    #[test]
    fn normalizer_fixtures() {
        let n = Normalizer::fit(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        assert_eq!(n.apply_row(&[1.0, 5.0]), vec![-1.0, 5.0]);
        assert_eq!(n.apply_row(&[3.0, 5.0]), vec![1.0, 5.0]);
        assert_eq!(n.constant, vec![false, true]);
    }

    #[test]
    fn constant_column_weight_is_zero() {
        let mut r = crate::rng::seeded(8);
        let raw: Vec<(f64, bool)> = (0..400)
            .map(|_| {
                let v: f64 = r.random_range(-2.0..2.0);
                (v, r.random_bool(crate::predictor::sigmoid(1.5 * v)))
            })
            .collect();
        let y: Vec<bool> = raw.iter().map(|p| p.1).collect();
        // Reference: the full problem with a unit constant column, solved
        // directly; its optimum puts no weight on the constant.
        let xs: Vec<Vec<f64>> = raw.iter().map(|p| vec![p.0, 1.0]).collect();
        let norm = Normalizer::fit(&xs);
        let xn = norm.apply(&xs);
        let (wn, wp) = logreg::balanced_weights(&y).unwrap();
        let s: Vec<f64> = y.iter().map(|&l| if l { wp } else { wn }).collect();
        let full = logreg::Problem { x: &xn, y: &y, sample_weights: &s, lambda: 1.0 }.fit(&FitOptions::default());
        assert!(full.weights[1].abs() < 1e-6, "{}", full.weights[1]);
        for k in [1.0, 2.0e5] {
            let xk: Vec<Vec<f64>> = raw.iter().map(|p| vec![p.0, k]).collect();
            let m = train_logreg(&names(2), &xk, &y, &FitOptions::default(), 0).unwrap();
            assert!(m.meta.converged && m.meta.iterations < 50);
            assert_eq!(m.weights[1], 0.0);
            assert!((m.weights[0] - full.weights[0]).abs() < 1e-6);
            assert!((m.bias - (full.bias + full.weights[1])).abs() < 1e-6);
        }
    }

    #[test]
    fn normalized_training_columns_are_standard() {
        let mut r = crate::rng::seeded(2);
        let rows: Vec<Vec<f64>> = (0..200).map(|_| vec![r.random_range(0.0..100.0), r.random_range(-3.0..1.0)]).collect();
        let n = Normalizer::fit(&rows);
        let t = n.apply(&rows);
        for j in 0..2 {
            let m = t.iter().map(|r| r[j]).sum::<f64>() / 200.0;
            let v = t.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
        // idempotent on standardized data
        let again = Normalizer::fit(&t).apply(&t);
        for (a, b) in again.iter().flatten().zip(t.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_model_and_prediction_values() {
        let f = names(3);
        let m = RegressionModel::zero(&f);
        assert_eq!(predict(&m, &[4.0, -2.0, 9.0]).unwrap(), 0.5);
        let mut m = RegressionModel::zero(&names(1));
        m.weights = vec![1.0];
        assert!((predict(&m, &[3f64.ln()]).unwrap() - 0.75).abs() < 1e-15);
        assert!(predict(&m, &[0.1]).unwrap() < predict(&m, &[0.2]).unwrap());
        assert_eq!(predict(&m, &[1.0, 2.0]), Err(PredictorError::Dimension { expected: 1, got: 2 }));
    }

    #[test]
    fn single_class_is_an_error() {
        let err = train_logreg(&names(1), &[vec![1.0], vec![2.0]], &[true, true], &FitOptions::default(), 0);
        assert_eq!(err, Err(PredictorError::SingleClass { positive: 2, negative: 0 }));
    }

    #[test]
    fn planted_coefficients_recovered() {
        let truth = [1.5, -0.8, 0.0, 0.4];
        let bias = -0.3;
        let mut r = crate::rng::seeded(99);
        let n = 10_000;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| truth.iter().map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<bool> = x
            .iter()
            .map(|row| {
                let z: f64 = row.iter().zip(&truth).map(|(a, b)| a * b).sum::<f64>() + bias;
                r.random_bool(sigmoid(z))
            })
            .collect();
        let m = train_logreg(&names(4), &x, &y, &FitOptions { lambda: 1.0, ..Default::default() }, 0).unwrap();
        assert!(m.meta.converged);
        // normalized-space weights divided by the column std give raw-space weights
        for j in [0usize, 1, 3] {
            let raw = m.weights[j] / m.normalizer.std[j];
            assert!(raw.signum() == truth[j].signum(), "feature {j}: {raw}");
            assert!((raw - truth[j]).abs() <= 0.2 * truth[j].abs(), "feature {j}: {raw}");
        }
        assert!((m.weights[2] / m.normalizer.std[2]).abs() < 0.1);
    }

    #[test]
    fn model_json_round_trip() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0], vec![3.0, 1.0]];
        let m = train_logreg(&names(2), &x, &[false, false, true, true], &FitOptions::default(), 7).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<RegressionModel>(&json).unwrap(), m);
    }
}
