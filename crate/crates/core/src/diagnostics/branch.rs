// SPDX-License-Identifier: MIT OR Apache-2.0

//! Where two runs on the same prompt part ways.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ppo::Episode;

/// The parts of a trajectory the branch tracker compares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub prompt: Vec<usize>,
    /// Features chosen at each generated step, one per hook layer.
    pub features: Vec<Vec<usize>>,
    pub tokens: Vec<usize>,
    pub correct: bool,
}

impl TraceSummary {
    pub fn from_episode(ep: &Episode, answer: usize) -> Self {
        let steps = ep.trace.steps.len();
        let mut features = vec![Vec::new(); steps];
        for d in ep.decisions.iter().filter(|d| d.step > 0) {
            features[d.step - 1].push(d.feature);
        }
        TraceSummary {
            prompt: ep.trace.prompt.clone(),
            features,
            tokens: ep.trace.emitted.clone(),
            correct: ep.final_token() == answer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchReport {
    pub pair: usize,
    pub prompt: Vec<usize>,
    pub common_prefix: usize,
    /// Zero-based index of the first differing step.
    pub divergence_step: usize,
    /// `[arm a, arm b]`; `None` when that arm ended before the divergence.
    pub features: [Option<Vec<usize>>; 2],
    pub tokens: [Option<usize>; 2],
    pub correct: [bool; 2],
}

impl BranchReport {
    pub fn swapped(&self) -> BranchReport {
        let sw = |[a, b]: [Option<Vec<usize>>; 2]| [b, a];
        BranchReport {
            features: sw(self.features.clone()),
            tokens: [self.tokens[1], self.tokens[0]],
            correct: [self.correct[1], self.correct[0]],
            ..self.clone()
        }
    }
}

/// First step where the chosen features or the emitted token differ. Pairs
/// that never diverge are left out.
pub fn find_branch_points(pairs: &[(TraceSummary, TraceSummary)]) -> Result<Vec<BranchReport>> {
    let mut out = Vec::new();
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.prompt != b.prompt {
            return Err(Error::PromptMismatch(i));
        }
        let len_a = a.tokens.len().max(a.features.len());
        let len_b = b.tokens.len().max(b.features.len());
        let shared = len_a.min(len_b);
        let same = |t: usize| a.features.get(t) == b.features.get(t) && a.tokens.get(t) == b.tokens.get(t);
        let divergence = match (0..shared).find(|&t| !same(t)) {
            Some(t) => t,
            None if len_a != len_b => shared,
            None => continue,
        };
        out.push(BranchReport {
            pair: i,
            prompt: a.prompt.clone(),
            common_prefix: divergence,
            divergence_step: divergence,
            features: [a.features.get(divergence).cloned(), b.features.get(divergence).cloned()],
            tokens: [a.tokens.get(divergence).copied(), b.tokens.get(divergence).copied()],
            correct: [a.correct, b.correct],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(features: &[usize], tokens: &[usize]) -> TraceSummary {
        TraceSummary {
            prompt: vec![1, 2, 3],
            features: features.iter().map(|f| vec![*f]).collect(),
            tokens: tokens.to_vec(),
            correct: false,
        }
    }

    #[test]
    fn identical_pairs_are_excluded() {
        let a = summary(&[1, 2, 3], &[4, 5, 6]);
        assert!(find_branch_points(&[(a.clone(), a)]).unwrap().is_empty());
    }

    #[test]
    fn divergence_on_feature_or_token() {
        let a = summary(&[1, 2, 3, 4, 5, 6, 7], &[9; 7]);
        let mut b = a.clone();
        b.features[5] = vec![0];
        let r = find_branch_points(&[(a.clone(), b)]).unwrap();
        assert_eq!((r[0].common_prefix, r[0].divergence_step), (5, 5));
        assert_eq!(r[0].features, [Some(vec![6]), Some(vec![0])]);

        let mut c = a.clone();
        c.tokens[2] = 1;
        let r = find_branch_points(&[(a.clone(), c)]).unwrap();
        assert_eq!(r[0].divergence_step, 2);
        assert_eq!(r[0].tokens, [Some(9), Some(1)]);

        let short = summary(&[1, 2, 3], &[9; 3]);
        let r = find_branch_points(&[(a, short)]).unwrap();
        assert_eq!(r[0].divergence_step, 3);
        assert_eq!(r[0].tokens, [Some(9), None]);
    }

    #[test]
    fn prompt_mismatch() {
        let a = summary(&[1], &[2]);
        let mut b = a.clone();
        b.prompt = vec![0];
        assert!(matches!(find_branch_points(&[(a.clone(), a.clone()), (a, b)]), Err(Error::PromptMismatch(1))));
    }
}
