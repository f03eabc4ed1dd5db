use serde::{Deserialize, Serialize};

use crate::corpus::{TokenCounts, TokenId};

/// Order statistics of the corpus counts of a sequence's tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyStats {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub mean: f64,
    pub q75: f64,
    pub max: f64,
}

/// Percentile `p` in `[0, 1]` of sorted `values` by linear interpolation
/// between closest ranks (position `p * (n - 1)`).
pub fn percentile_sorted(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty slice");
    let pos = p.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

impl FrequencyStats {
    pub fn from_counts(counts: &[f64]) -> Self {
        if counts.is_empty() {
            return FrequencyStats::default();
        }
        let mut v = counts.to_vec();
        v.sort_by(f64::total_cmp);
        FrequencyStats {
            min: v[0],
            q25: percentile_sorted(&v, 0.25),
            median: percentile_sorted(&v, 0.5),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q75: percentile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        }
    }
}

/// Frequency statistics of `tokens` (normally a 32-token continuation)
/// under corpus-wide counts; tokens never seen count 0.
pub fn token_frequency_stats(token_counts: &TokenCounts, tokens: &[TokenId]) -> FrequencyStats {
    let counts: Vec<f64> = tokens.iter().map(|&t| token_counts.get(t) as f64).collect();
    FrequencyStats::from_counts(&counts)
}
