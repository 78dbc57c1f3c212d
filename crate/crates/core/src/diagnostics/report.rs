// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation reports and per-step intervention logs.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::outcomes::{feature_diversity, InvalidCount};
use crate::error::{Error, Result};
use crate::ppo::{run_episode, Chooser, Env, Episode, RewardSpec};
use crate::rng::indexed;
use crate::sae::FeatureLabels;
use crate::toylm::Sample;

/// One steered site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub sample_id: usize,
    /// 1-based generation step; 0 for prompt positions.
    pub step: usize,
    pub layer: usize,
    pub feature: usize,
    /// Natural activation of the selected feature before steering.
    pub activation: f64,
    pub coefficient: f64,
    /// Token emitted at this step (none for prompt positions).
    pub emitted_token: Option<usize>,
    /// Token the unsteered run emitted at the same step, when paired.
    pub baseline_token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: usize,
    pub emitted: Vec<usize>,
    pub final_token: usize,
    pub answer: usize,
    pub correct: bool,
    /// Final token lies in the valid answer set.
    pub valid: bool,
}

/// Shared schema for CRL evaluation and every heuristic baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_samples: usize,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub invalid: InvalidCount,
    /// Entropy (nats) of the selected features; `None` when nothing was steered.
    pub feature_diversity: Option<f64>,
    pub coefficient: f64,
    pub results: Vec<SampleResult>,
    pub records: Vec<InterventionRecord>,
}

impl EvalReport {
    /// The report without per-sample results and records.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "mean_reward": self.mean_reward,
            "invalid_count": self.invalid.count,
            "invalid_rate": self.invalid.rate,
            "feature_diversity": self.feature_diversity,
            "coefficient": self.coefficient,
        })
    }
}

pub fn records_from_episode(episode: &Episode, coefficient: f64) -> Vec<InterventionRecord> {
    episode
        .decisions
        .iter()
        .map(|d| InterventionRecord {
            sample_id: episode.sample_id,
            step: d.step,
            layer: d.layer,
            feature: d.feature,
            activation: d.activation,
            coefficient,
            emitted_token: (d.step > 0).then(|| episode.trace.emitted[d.step - 1]),
            baseline_token: None,
            label: None,
        })
        .collect()
}

/// Runs every sample under `chooser` (sample id = position in `samples`) and
/// returns the report plus the raw episodes.
pub fn evaluate_episodes(
    env: &Env<'_>,
    samples: &[Sample],
    chooser: Chooser<'_>,
    reward: &RewardSpec,
    seed: u64,
    label: &str,
) -> Result<(EvalReport, Vec<Episode>)> {
    env.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one sample".into()));
    }
    let mut episodes = Vec::with_capacity(samples.len());
    let mut results = Vec::with_capacity(samples.len());
    let mut records = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let mut rng = indexed(seed, "eval", i as u64);
        let ep = run_episode(env, i, s, chooser, reward, &mut rng)?;
        let final_token = ep.final_token();
        results.push(SampleResult {
            sample_id: i,
            emitted: ep.trace.emitted.clone(),
            final_token,
            answer: s.answer,
            correct: final_token == s.answer,
            valid: reward.is_valid(final_token),
        });
        records.extend(records_from_episode(&ep, env.coefficient));
        episodes.push(ep);
    }
    let n = samples.len() as f64;
    let correct = results.iter().filter(|r| r.correct).count();
    let invalid = super::outcomes::count_invalid_outputs(&results, &reward.answers);
    let report = EvalReport {
        label: label.to_string(),
        n_samples: samples.len(),
        accuracy: correct as f64 / n,
        mean_reward: episodes.iter().map(|e| e.reward).sum::<f64>() / n,
        invalid,
        feature_diversity: (!records.is_empty()).then(|| feature_diversity(&records)),
        coefficient: env.coefficient,
        results,
        records,
    };
    Ok((report, episodes))
}

pub fn evaluate(
    env: &Env<'_>,
    samples: &[Sample],
    chooser: Chooser<'_>,
    reward: &RewardSpec,
    seed: u64,
    label: &str,
) -> Result<EvalReport> {
    Ok(evaluate_episodes(env, samples, chooser, reward, seed, label)?.0)
}

/// Fills `baseline_token` from an unsteered report over the same samples.
pub fn pair_with_baseline(records: &mut [InterventionRecord], baseline: &EvalReport) -> Result<()> {
    for r in records.iter_mut() {
        let b = baseline
            .results
            .get(r.sample_id)
            .filter(|b| b.sample_id == r.sample_id)
            .ok_or_else(|| Error::SampleMismatch(format!("baseline has no sample {}", r.sample_id)))?;
        r.baseline_token = if r.step > 0 { b.emitted.get(r.step - 1).copied() } else { None };
    }
    Ok(())
}

pub fn attach_labels(records: &mut [InterventionRecord], labels: &FeatureLabels) {
    for r in records {
        r.label = labels.get(r.feature).map(str::to_string);
    }
}

pub fn write_records_jsonl(path: &Path, records: &[InterventionRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<InterventionRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}
