//! Train / validation / test splits over sample ids.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::PredictorError;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    /// Fraction of the representative sample held out for testing.
    pub test: f64,
    /// Fraction of the merged training pool held out for validation.
    pub validation: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { test: 0.2, validation: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), PredictorError> {
        for (name, value) in [("test", self.test), ("validation", self.validation)] {
            if !(0.0..1.0).contains(&value) {
                return Err(PredictorError::Ratio { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

/// Shuffles the representative ids, holds out the test fraction, merges the
/// rest with the memorized ids, shuffles again and holds out the validation
/// fraction. Memorized ids never reach the test split.
pub fn split_datasets(
    representative: &[u64],
    memorized: &[u64],
    ratios: SplitRatios,
    seed: u64,
) -> Result<Splits, PredictorError> {
    ratios.validate()?;
    let rep: HashSet<u64> = representative.iter().copied().collect();
    let mut overlap: Vec<u64> = memorized.iter().copied().filter(|id| rep.contains(id)).collect();
    if !overlap.is_empty() {
        overlap.sort_unstable();
        return Err(PredictorError::Overlap {
            count: overlap.len(),
            first: overlap.into_iter().take(10).collect(),
        });
    }
    let mut r = rng::seeded(seed);
    let mut rep = representative.to_vec();
    rep.shuffle(&mut r);
    let n_test = (rep.len() as f64 * ratios.test).round() as usize;
    let test = rep[..n_test].to_vec();
    let mut pool: Vec<u64> = rep[n_test..].iter().chain(memorized).copied().collect();
    pool.shuffle(&mut r);
    let n_val = (pool.len() as f64 * ratios.validation).round() as usize;
    let validation = pool[..n_val].to_vec();
    let train = pool[n_val..].to_vec();
    Ok(Splits { train, validation, test })
}
