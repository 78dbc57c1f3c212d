// SPDX-License-Identifier: MIT OR Apache-2.0

//! Outcome categories, per-feature impact and selection diversity.
//!
//! Impact of feature `i` with `n_i` selections, `c_i` of them in corrected
//! samples and `m_i` in misguided ones:
//!
//! ```text
//! Impact_i = (c_i + m_i) / n_i
//! ```
//!
//! A `log(n_i + ε)` weight in numerator and denominator cancels, so no ε is
//! needed. Counts are per steered step, not per sample.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::report::{InterventionRecord, SampleResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeCategory {
    UnchangedCorrect,
    UnchangedIncorrect,
    /// Baseline wrong, steered right.
    Corrected,
    /// Baseline right, steered wrong.
    Misguided,
}

impl OutcomeCategory {
    pub fn from_pair(baseline_correct: bool, steered_correct: bool) -> Self {
        match (baseline_correct, steered_correct) {
            (true, true) => OutcomeCategory::UnchangedCorrect,
            (false, false) => OutcomeCategory::UnchangedIncorrect,
            (false, true) => OutcomeCategory::Corrected,
            (true, false) => OutcomeCategory::Misguided,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OutcomeCategory::UnchangedCorrect => "unchanged-correct",
            OutcomeCategory::UnchangedIncorrect => "unchanged-incorrect",
            OutcomeCategory::Corrected => "corrected",
            OutcomeCategory::Misguided => "misguided",
        }
    }

    pub const ALL: [OutcomeCategory; 4] = [
        OutcomeCategory::UnchangedCorrect,
        OutcomeCategory::UnchangedIncorrect,
        OutcomeCategory::Corrected,
        OutcomeCategory::Misguided,
    ];
}

/// Per-sample category, indexed like the inputs. Both runs must list the same
/// sample ids in the same order.
pub fn categorize_outcomes(baseline: &[SampleResult], steered: &[SampleResult]) -> Result<Vec<OutcomeCategory>> {
    if baseline.len() != steered.len() {
        return Err(Error::SampleMismatch(format!(
            "{} baseline samples vs {} steered",
            baseline.len(),
            steered.len()
        )));
    }
    baseline
        .iter()
        .zip(steered)
        .map(|(b, s)| {
            if b.sample_id != s.sample_id || b.answer != s.answer {
                return Err(Error::SampleMismatch(format!(
                    "baseline sample {} paired with steered sample {}",
                    b.sample_id, s.sample_id
                )));
            }
            Ok(OutcomeCategory::from_pair(b.correct, s.correct))
        })
        .collect()
}

pub fn category_counts(categories: &[OutcomeCategory]) -> BTreeMap<OutcomeCategory, usize> {
    let mut m: BTreeMap<_, _> = OutcomeCategory::ALL.iter().map(|c| (*c, 0)).collect();
    for c in categories {
        *m.get_mut(c).expect("all categories present") += 1;
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature: usize,
    /// Selections (steps).
    pub n: usize,
    /// `n / N`.
    pub share: f64,
    pub corrected: usize,
    pub misguided: usize,
    pub impact: f64,
    #[serde(default)]
    pub label: Option<String>,
}

/// Aggregates records per feature. `categories[sample_id]` must exist for every
/// record. Sorted by impact, then selection count (both descending), then index.
pub fn impact_scores(records: &[InterventionRecord], categories: &[OutcomeCategory]) -> Result<Vec<FeatureStats>> {
    let mut per: BTreeMap<usize, (usize, usize, usize, Option<String>)> = BTreeMap::new();
    for r in records {
        let cat = categories.get(r.sample_id).ok_or(Error::OrphanRecord(r.sample_id))?;
        let e = per.entry(r.feature).or_insert((0, 0, 0, None));
        e.0 += 1;
        match cat {
            OutcomeCategory::Corrected => e.1 += 1,
            OutcomeCategory::Misguided => e.2 += 1,
            _ => {}
        }
        if e.3.is_none() {
            e.3 = r.label.clone();
        }
    }
    let total = records.len() as f64;
    let mut out: Vec<FeatureStats> = per
        .into_iter()
        .map(|(feature, (n, c, m, label))| FeatureStats {
            feature,
            n,
            share: n as f64 / total,
            corrected: c,
            misguided: m,
            impact: impact(n, c, m),
            label,
        })
        .collect();
    out.sort_by(|a, b| {
        b.impact
            .total_cmp(&a.impact)
            .then(b.n.cmp(&a.n))
            .then(a.feature.cmp(&b.feature))
    });
    Ok(out)
}

pub fn impact(n: usize, corrected: usize, misguided: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        (corrected + misguided) as f64 / n as f64
    }
}

/// Shannon entropy (nats) of a count vector; zero counts are skipped.
pub fn entropy_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    let h = -counts
        .iter()
        .filter(|c| **c > 0)
        .map(|&c| {
            let p = c as f64 / t;
            p * p.ln()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Entropy of the empirical selection distribution over `records`.
pub fn feature_diversity(records: &[InterventionRecord]) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(r.feature).or_default() += 1;
    }
    entropy_of_counts(&counts.into_values().collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvalidCount {
    pub count: usize,
    pub rate: f64,
}

/// Outputs whose final token lies outside `valid`.
pub fn count_invalid_outputs(results: &[SampleResult], valid: &[usize]) -> InvalidCount {
    let count = results.iter().filter(|r| !valid.contains(&r.final_token)).count();
    InvalidCount {
        count,
        rate: if results.is_empty() {
            0.0
        } else {
            count as f64 / results.len() as f64
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    pub(crate) fn result(id: usize, final_token: usize, answer: usize) -> SampleResult {
        SampleResult {
            sample_id: id,
            emitted: vec![final_token],
            final_token,
            answer,
            correct: final_token == answer,
            valid: true,
        }
    }

    fn record(sample_id: usize, feature: usize) -> InterventionRecord {
        InterventionRecord {
            sample_id,
            step: 1,
            layer: 2,
            feature,
            activation: 0.0,
            coefficient: 1.0,
            emitted_token: None,
            baseline_token: None,
            label: None,
        }
    }

    #[test]
    fn categories_cover_all_cells() {
        let base = [result(0, 1, 2), result(1, 2, 2), result(2, 2, 2), result(3, 1, 2)];
        let steer = [result(0, 2, 2), result(1, 1, 2), result(2, 2, 2), result(3, 1, 2)];
        let cats = categorize_outcomes(&base, &steer).unwrap();
        assert_eq!(
            cats,
            vec![
                OutcomeCategory::Corrected,
                OutcomeCategory::Misguided,
                OutcomeCategory::UnchangedCorrect,
                OutcomeCategory::UnchangedIncorrect
            ]
        );
        let counts = category_counts(&cats);
        assert!(counts.values().all(|c| *c == 1));
        assert_eq!(counts.values().sum::<usize>(), 4);
        assert!(categorize_outcomes(&base, &steer[..3]).is_err());
        assert!(categorize_outcomes(&base[..1], &steer[1..2]).is_err());
    }

    #[test]
    fn impact_fixture() {
        // 491 selections of one feature: 15 in corrected samples, 4 in misguided.
        let mut cats = vec![OutcomeCategory::Corrected; 15];
        cats.extend(vec![OutcomeCategory::Misguided; 4]);
        cats.extend(vec![OutcomeCategory::UnchangedCorrect; 300]);
        cats.extend(vec![OutcomeCategory::UnchangedIncorrect; 172]);
        let records: Vec<_> = (0..491).map(|i| record(i, 4504)).collect();
        let stats = impact_scores(&records, &cats).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!((stats[0].n, stats[0].corrected, stats[0].misguided), (491, 15, 4));
        assert_abs_diff_eq!(stats[0].impact, 19.0 / 491.0, epsilon = 1e-15);
        assert_abs_diff_eq!(stats[0].impact, 0.03870, epsilon = 1e-5);
        assert_eq!(stats[0].share, 1.0);
    }

    #[test]
    fn impact_bounds_and_orphans() {
        let cats = [OutcomeCategory::UnchangedCorrect, OutcomeCategory::Corrected];
        let stats = impact_scores(&[record(0, 3), record(1, 5), record(1, 5)], &cats).unwrap();
        assert_eq!(stats[0].feature, 5);
        assert_eq!(stats[0].impact, 1.0);
        assert_eq!(stats[1].impact, 0.0);
        assert_abs_diff_eq!(stats.iter().map(|s| s.share).sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(matches!(impact_scores(&[record(7, 1)], &cats), Err(Error::OrphanRecord(7))));
    }

    #[test]
    fn entropy_fixtures() {
        assert_eq!(feature_diversity(&[record(0, 3), record(1, 3)]), 0.0);
        assert_abs_diff_eq!(entropy_of_counts(&[1; 128]), 128f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(128f64.ln(), 4.8520, epsilon = 1e-4);
        let h = entropy_of_counts(&[3, 1]);
        assert_abs_diff_eq!(h, -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(h, 0.5623, epsilon = 1e-4);
    }

    #[test]
    fn invalid_counting() {
        let rs: Vec<_> = (0..10).map(|i| result(i, if i < 3 { 9 } else { 1 }, 1)).collect();
        let c = count_invalid_outputs(&rs, &[1, 2]);
        assert_eq!(c.count, 3);
        assert_abs_diff_eq!(c.rate, 0.3, epsilon = 1e-15);
        assert_eq!(count_invalid_outputs(&rs[3..], &[1, 2]).count, 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stats_invariants(
                outcomes in prop::collection::vec((any::<bool>(), any::<bool>()), 1..30),
                picks in prop::collection::vec((0usize..30, 0usize..6), 1..80),
            ) {
                let cats: Vec<_> = outcomes.iter().map(|(b, s)| OutcomeCategory::from_pair(*b, *s)).collect();
                prop_assert_eq!(category_counts(&cats).values().sum::<usize>(), cats.len());
                let records: Vec<_> = picks
                    .iter()
                    .map(|(s, f)| record(s % cats.len(), *f))
                    .collect();
                let stats = impact_scores(&records, &cats).unwrap();
                prop_assert_eq!(stats.iter().map(|s| s.n).sum::<usize>(), records.len());
                prop_assert!((stats.iter().map(|s| s.share).sum::<f64>() - 1.0).abs() < 1e-12);
                for s in &stats {
                    prop_assert!(s.corrected + s.misguided <= s.n);
                    prop_assert!((0.0..=1.0).contains(&s.impact));
                }
                let h = feature_diversity(&records);
                prop_assert!(h >= 0.0);
                prop_assert!(h <= (stats.len() as f64).ln() + 1e-12);
            }
        }
    }
}
