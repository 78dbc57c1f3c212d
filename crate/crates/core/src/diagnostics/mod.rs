// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretability outputs, heuristic baselines and the ground-truth oracle.

mod baseline;
mod branch;
mod critic;
mod oracle;
mod outcomes;
mod report;

pub use baseline::{
    measure_overhead, run_baseline, sweep, write_overhead_csv, write_sweep_csv, BaselineKind, Overhead, SweepCell,
    SweepSpec,
};
pub use branch::{find_branch_points, BranchReport, TraceSummary};
pub use critic::{critic_trajectory_stats, ols, CategoryGap, CategorySummary, CriticReport, CriticTrajectory};
pub use oracle::{brute_force_flipping_features, steered_answer};
pub use outcomes::{
    categorize_outcomes, category_counts, count_invalid_outputs, entropy_of_counts, feature_diversity, impact,
    impact_scores, FeatureStats, InvalidCount, OutcomeCategory,
};
pub use report::{
    attach_labels, evaluate, evaluate_episodes, pair_with_baseline, read_records_jsonl, records_from_episode,
    write_records_jsonl, EvalReport, InterventionRecord, SampleResult,
};
