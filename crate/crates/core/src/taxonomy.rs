//! Recitation / reconstruction / recollection assignment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureRecord;

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("recitation_threshold must be at least 1, got {0}")]
    Threshold(u64),
    #[error("unknown taxonomy category {0:?}")]
    UnknownCategory(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaxonomyCategory {
    Recitation,
    Reconstruction,
    Recollection,
}

impl TaxonomyCategory {
    pub const ALL: [TaxonomyCategory; 3] = [
        TaxonomyCategory::Recitation,
        TaxonomyCategory::Reconstruction,
        TaxonomyCategory::Recollection,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaxonomyCategory::Recitation => "recitation",
            TaxonomyCategory::Reconstruction => "reconstruction",
            TaxonomyCategory::Recollection => "recollection",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for TaxonomyCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaxonomyCategory {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaxonomyCategory::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| TaxonomyError::UnknownCategory(s.to_string()))
    }
}

/// Which rule wins when a sample is both highly duplicated and templated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precedence {
    #[default]
    RecitationFirst,
    ReconstructionFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyConfig {
    /// Minimum inclusive duplicate count for recitation.
    pub recitation_threshold: u64,
    #[serde(default)]
    pub precedence: Precedence,
}

impl Default for TaxonomyConfig {
    fn default() -> Self {
        TaxonomyConfig {
            recitation_threshold: 6,
            precedence: Precedence::RecitationFirst,
        }
    }
}

impl TaxonomyConfig {
    pub fn validate(&self) -> Result<(), TaxonomyError> {
        if self.recitation_threshold == 0 {
            return Err(TaxonomyError::Threshold(0));
        }
        Ok(())
    }
}

/// Category of one sample from its duplicate count and template verdict.
pub fn assign_category(record: &FeatureRecord, config: &TaxonomyConfig) -> TaxonomyCategory {
    let recites = record.duplicate_count >= config.recitation_threshold;
    let templated = record.template.is_template();
    match (config.precedence, recites, templated) {
        (Precedence::RecitationFirst, true, _) => TaxonomyCategory::Recitation,
        (Precedence::ReconstructionFirst, _, true) => TaxonomyCategory::Reconstruction,
        (_, true, _) => TaxonomyCategory::Recitation,
        (_, _, true) => TaxonomyCategory::Reconstruction,
        _ => TaxonomyCategory::Recollection,
    }
}

/// Sets `taxonomy` on every record.
pub fn assign_all(records: &mut [FeatureRecord], config: &TaxonomyConfig) -> Result<(), TaxonomyError> {
    config.validate()?;
    for r in records.iter_mut() {
        r.taxonomy = Some(assign_category(r, config));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::TemplateKind;

    use crate::test_util::record as rec;

    #[test]
    fn rules() {
        let c = TaxonomyConfig::default();
        assert_eq!(assign_category(&rec(10, TemplateKind::None), &c), TaxonomyCategory::Recitation);
        assert_eq!(assign_category(&rec(2, TemplateKind::Repeating), &c), TaxonomyCategory::Reconstruction);
        assert_eq!(assign_category(&rec(1, TemplateKind::None), &c), TaxonomyCategory::Recollection);
        assert_eq!(assign_category(&rec(7, TemplateKind::Incrementing), &c), TaxonomyCategory::Recitation);
    }

    #[test]
    fn threshold_boundary() {
        let c = TaxonomyConfig::default();
        assert_eq!(assign_category(&rec(6, TemplateKind::None), &c), TaxonomyCategory::Recitation);
        assert_eq!(assign_category(&rec(5, TemplateKind::None), &c), TaxonomyCategory::Recollection);
    }

    #[test]
    fn reconstruction_first_precedence() {
        let c = TaxonomyConfig { precedence: Precedence::ReconstructionFirst, ..Default::default() };
        assert_eq!(assign_category(&rec(7, TemplateKind::Incrementing), &c), TaxonomyCategory::Reconstruction);
        assert_eq!(assign_category(&rec(7, TemplateKind::None), &c), TaxonomyCategory::Recitation);
    }

    #[test]
    fn zero_threshold_rejected() {
        let c = TaxonomyConfig { recitation_threshold: 0, ..Default::default() };
        assert_eq!(assign_all(&mut [], &c), Err(TaxonomyError::Threshold(0)));
    }

    #[test]
    fn names_round_trip() {
        for c in TaxonomyCategory::ALL {
            assert_eq!(c.as_str().parse::<TaxonomyCategory>().unwrap(), c);
            assert_eq!(serde_json::to_string(&c).unwrap(), format!("\"{c}\""));
        }
        assert!("memorized".parse::<TaxonomyCategory>().is_err());
    }

    #[test]
    fn monotone_in_duplicates() {
        let c = TaxonomyConfig::default();
        for kind in [TemplateKind::None, TemplateKind::Repeating, TemplateKind::Incrementing] {
            let mut seen = false;
            for d in 0..50 {
                let is_rec = assign_category(&rec(d, kind), &c) == TaxonomyCategory::Recitation;
                assert!(!seen || is_rec);
                seen |= is_rec;
            }
        }
    }
}
