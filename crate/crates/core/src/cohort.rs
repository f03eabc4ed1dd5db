//! Per-cohort category counts and proportions of memorized samples, one
//! cohort per model size or checkpoint.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::TaxonomyCategory;

/// Shown in place of a percentage when a cohort has no memorized samples.
pub const UNDEFINED: &str = "n/a";

#[derive(Debug, Error, PartialEq)]
pub enum CohortError {
    #[error("cohort {cohort:?}: {count} sample ids not in the feature set (first: {first:?})")]
    UnknownIds { cohort: String, count: usize, first: Vec<u64> },
    #[error("duplicate cohort name {0:?}")]
    DuplicateName(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub name: String,
    pub memorized: u64,
    /// Indexed by [`TaxonomyCategory::index`].
    pub counts: [u64; 3],
    /// Percent of the cohort's memorized samples; `None` when there are none.
    pub percents: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub rows: Vec<CohortRow>,
}

/// Counts each cohort's memorized ids by category. Repeated ids in one
/// cohort count once.
pub fn cohort_report(
    cohorts: &[(String, Vec<u64>)],
    categories: &BTreeMap<u64, TaxonomyCategory>,
) -> Result<CohortReport, CohortError> {
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(cohorts.len());
    for (name, ids) in cohorts {
        if !seen.insert(name.as_str()) {
            return Err(CohortError::DuplicateName(name.clone()));
        }
        let mut ids = ids.clone();
        ids.sort_unstable();
        ids.dedup();
        let unknown: Vec<u64> = ids.iter().copied().filter(|id| !categories.contains_key(id)).collect();
        if !unknown.is_empty() {
            return Err(CohortError::UnknownIds {
                cohort: name.clone(),
                count: unknown.len(),
                first: unknown.into_iter().take(10).collect(),
            });
        }
        let mut counts = [0u64; 3];
        for id in &ids {
            counts[categories[id].index()] += 1;
        }
        let total = ids.len() as u64;
        let percents = (total > 0).then(|| counts.map(|c| 100.0 * c as f64 / total as f64));
        rows.push(CohortRow { name: name.clone(), memorized: total, counts, percents });
    }
    Ok(CohortReport { rows })
}

/// `1566369` -> `"1,566,369"`.
pub fn format_count(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// `84.5612` -> `"84.56%"`.
pub fn format_percent(p: f64) -> String {
    format!("{p:.2}%")
}

impl CohortRow {
    fn cells(&self) -> Vec<String> {
        let mut cells = vec![self.name.clone()];
        for k in 0..3 {
            cells.push(format_count(self.counts[k]));
            cells.push(self.percents.map_or_else(|| UNDEFINED.to_string(), |p| format_percent(p[k])));
        }
        cells
    }
}

fn header(label: &str) -> Vec<String> {
    let mut h = vec![label.to_string()];
    for c in TaxonomyCategory::ALL {
        let mut name = c.as_str().to_string();
        name[..1].make_ascii_uppercase();
        h.push(format!("{name} Count"));
        h.push(format!("{name} Percent"));
    }
    h
}

impl CohortReport {
    pub fn to_csv(&self, label: &str) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header(label)).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.cells()).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }

    /// Markdown table with right-aligned numeric columns.
    pub fn to_markdown(&self, label: &str) -> String {
        let mut out = format!("| {} |\n|---|", header(label).join(" | "));
        out.push_str(&"---:|".repeat(6));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", r.cells().join(" | ")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TaxonomyCategory::*;

    fn cats(spec: &[(u64, TaxonomyCategory)]) -> BTreeMap<u64, TaxonomyCategory> {
        spec.iter().copied().collect()
    }

    #[test]
    fn hand_built_ten() {
        let mut m = Vec::new();
        for i in 0..6 {
            m.push((i, Recitation));
        }
        for i in 6..9 {
            m.push((i, Recollection));
        }
        m.push((9, Reconstruction));
        let r = cohort_report(&[("12b".into(), (0..10).collect())], &cats(&m)).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.counts, [6, 1, 3]);
        assert_eq!(row.percents, Some([60.0, 10.0, 30.0]));
        assert_eq!(
            r.to_csv("Model"),
            "Model,Recitation Count,Recitation Percent,Reconstruction Count,Reconstruction Percent,\
             Recollection Count,Recollection Percent\n12b,6,60.00%,1,10.00%,3,30.00%\n"
        );
    }

    #[test]
    fn empty_and_pure_cohorts() {
        let c = cats(&[(1, Recitation), (2, Recitation), (3, Recollection)]);
        let r = cohort_report(&[("none".into(), vec![]), ("pure".into(), vec![1, 2, 2])], &c).unwrap();
        assert_eq!(r.rows[0].counts, [0, 0, 0]);
        assert_eq!(r.rows[0].percents, None);
        assert!(r.to_csv("Model").contains("none,0,n/a,0,n/a,0,n/a"));
        assert_eq!(r.rows[1].memorized, 2);
        assert_eq!(r.rows[1].percents, Some([100.0, 0.0, 0.0]));
    }

    #[test]
    fn unknown_ids_and_duplicate_names() {
        let c = cats(&[(1, Recitation)]);
        assert_eq!(
            cohort_report(&[("a".into(), vec![1, 7, 5])], &c),
            Err(CohortError::UnknownIds { cohort: "a".into(), count: 2, first: vec![5, 7] })
        );
        assert_eq!(
            cohort_report(&[("a".into(), vec![]), ("a".into(), vec![])], &c),
            Err(CohortError::DuplicateName("a".into()))
        );
    }

    #[test]
    fn table_number_format() {
        assert_eq!(format_count(1_566_369), "1,566,369");
        assert_eq!(format_count(55_114), "55,114");
        assert_eq!(format_count(999), "999");
        assert_eq!(format_count(1000), "1,000");
        assert_eq!(format_count(0), "0");
        assert_eq!(format_percent(84.56), "84.56%");
        assert_eq!(format_percent(4.1), "4.10%");
    }

    #[test]
    fn markdown_shape() {
        let r = cohort_report(&[("70m".into(), vec![1])], &cats(&[(1, Reconstruction)])).unwrap();
        let md = r.to_markdown("Model");
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "|---|---:|---:|---:|---:|---:|---:|");
        assert_eq!(lines[2], "| 70m | 0 | 0.00% | 1 | 100.00% | 0 | 0.00% |");
    }

    proptest! {
        #[test]
        fn percents_sum_to_hundred(assign in prop::collection::vec(0usize..3, 1..500)) {
            let c: BTreeMap<u64, TaxonomyCategory> =
                assign.iter().enumerate().map(|(i, &k)| (i as u64, TaxonomyCategory::ALL[k])).collect();
            let r = cohort_report(&[("x".into(), c.keys().copied().collect())], &c).unwrap();
            let p = r.rows[0].percents.unwrap();
            prop_assert!((p.iter().sum::<f64>() - 100.0).abs() <= 0.01);
        }
    }
}
