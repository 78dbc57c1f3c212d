// SPDX-License-Identifier: MIT OR Apache-2.0

//! Critic value trajectories along generated tokens, grouped by outcome.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::outcomes::OutcomeCategory;
use crate::agent::{critic_value, AgentParams};
use crate::error::{Error, Result};
use crate::ppo::Episode;

/// Least-squares line through `(t, values[t])`, `t` zero-based. `None` for
/// fewer than two points.
pub fn ols(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let v_mean = values.iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (t, v) in values.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (v - v_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    Some((slope, v_mean - slope * t_mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticTrajectory {
    pub sample_id: usize,
    pub values: Vec<f64>,
    /// `None` when the trace has a single token.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub final_value: f64,
    pub category: OutcomeCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySummary {
    pub category: OutcomeCategory,
    pub count: usize,
    pub mean_slope: Option<f64>,
    pub mean_final_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryGap {
    pub from: OutcomeCategory,
    pub to: OutcomeCategory,
    /// `mean_final(from) − mean_final(to)`.
    pub final_value_gap: Option<f64>,
    pub slope_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub trajectories: Vec<CriticTrajectory>,
    pub summaries: Vec<CategorySummary>,
    pub gaps: Vec<CategoryGap>,
}

impl CriticReport {
    pub fn summary(&self, c: OutcomeCategory) -> &CategorySummary {
        self.summaries.iter().find(|s| s.category == c).expect("every category summarised")
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// `V(x_t)` at `layer` for every generated step of each episode, with per-trace
/// regression and per-category means. `categories[i]` belongs to `episodes[i]`.
pub fn critic_trajectory_stats(
    episodes: &[Episode],
    categories: &[OutcomeCategory],
    agent: &AgentParams,
    layer: usize,
) -> Result<CriticReport> {
    if episodes.len() != categories.len() {
        return Err(Error::SampleMismatch(format!(
            "{} episodes vs {} categories",
            episodes.len(),
            categories.len()
        )));
    }
    let mut trajectories = Vec::with_capacity(episodes.len());
    for (ep, &category) in episodes.iter().zip(categories) {
        let values = ep
            .trace
            .steps
            .iter()
            .map(|s| {
                let site = s
                    .site(layer)
                    .ok_or_else(|| Error::Invalid(format!("trace has no residual for layer {layer}")))?;
                critic_value(agent, &site.residual)
            })
            .collect::<Result<Vec<f64>>>()?;
        let fit = ols(&values);
        trajectories.push(CriticTrajectory {
            sample_id: ep.sample_id,
            final_value: *values.last().expect("at least one step"),
            slope: fit.map(|f| f.0),
            intercept: fit.map(|f| f.1),
            values,
            category,
        });
    }
    let mut by_cat: BTreeMap<OutcomeCategory, Vec<&CriticTrajectory>> = BTreeMap::new();
    for t in &trajectories {
        by_cat.entry(t.category).or_default().push(t);
    }
    let summaries: Vec<CategorySummary> = OutcomeCategory::ALL
        .iter()
        .map(|&c| {
            let ts = by_cat.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            CategorySummary {
                category: c,
                count: ts.len(),
                mean_slope: mean(ts.iter().filter_map(|t| t.slope)),
                mean_final_value: mean(ts.iter().map(|t| t.final_value)),
            }
        })
        .collect();
    let mut gaps = Vec::new();
    for (i, a) in summaries.iter().enumerate() {
        for b in &summaries[i + 1..] {
            let diff = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x - y);
            gaps.push(CategoryGap {
                from: a.category,
                to: b.category,
                final_value_gap: diff(a.mean_final_value, b.mean_final_value),
                slope_gap: diff(a.mean_slope, b.mean_slope),
            });
        }
    }
    Ok(CriticReport {
        trajectories,
        summaries,
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;
    use rand::Rng as _;

    #[test]
    fn ols_fixtures() {
        assert_eq!(ols(&[2.5; 6]), Some((0.0, 2.5)));
        let (s, i) = ols(&[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(i, 0.0, epsilon = 1e-12);
        assert_eq!(ols(&[1.0]), None);
    }

    #[test]
    fn ols_matches_normal_equations() {
        let mut rng = substream(8, "ols");
        for _ in 0..50 {
            let n = rng.random_range(2..20);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            // Closed form: slope = (nΣtv − ΣtΣv) / (nΣt² − (Σt)²).
            let nf = n as f64;
            let st: f64 = (0..n).map(|t| t as f64).sum();
            let stt: f64 = (0..n).map(|t| (t * t) as f64).sum();
            let sv: f64 = v.iter().sum();
            let stv: f64 = v.iter().enumerate().map(|(t, x)| t as f64 * x).sum();
            let slope = (nf * stv - st * sv) / (nf * stt - st * st);
            let intercept = (sv - slope * st) / nf;
            let (s, i) = ols(&v).unwrap();
            assert_abs_diff_eq!(s, slope, epsilon = 1e-12);
            assert_abs_diff_eq!(i, intercept, epsilon = 1e-12);
        }
    }
}
