// SPDX-License-Identifier: MIT OR Apache-2.0

//! The training loop: rollout → advantage → `epochs` Adam steps on both
//! losses, with periodic greedy evaluation and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use super::{compute_advantage, critic_loss_and_grad, policy_loss_and_grad, rollout, Env, PpoConfig, RewardSpec, Transition};
use crate::agent::{policy_logits, AgentParams, SelectionMode};
use crate::diagnostics::{evaluate, EvalReport};
use crate::error::{Error, Result};
use crate::numkit::{AdamState, MlpParams};
use crate::rng::substream;
use crate::sae::{FeatureActivations, SaeParams};
use crate::steering::{calibrate_coefficient, Calibration, CalibrationMode, MostActive};
use crate::toylm::{generate, GenerateOptions, GenerationTrace, Identity, Sample, ToyLmParams};

/// `samples` repeated in order until there are `n` of them (never fewer than
/// one full copy).
pub fn cycle(samples: &[Sample], n: usize) -> Vec<Sample> {
    if samples.is_empty() {
        return Vec::new();
    }
    let n = n.max(samples.len());
    samples.iter().cycle().take(n).cloned().collect()
}

/// The held-out set cycled to exactly `n` samples; sample ids are positions in it.
pub fn eval_set(heldout: &[Sample], n: usize) -> Vec<Sample> {
    let mut v = cycle(heldout, n);
    v.truncate(n);
    v
}

/// Unsteered greedy traces for every training prompt, residuals kept at `layers`.
pub fn baseline_traces(lm: &ToyLmParams, train: &[Sample], layers: &[usize], horizon: usize) -> Result<Vec<GenerationTrace>> {
    let opts = GenerateOptions::tokens(horizon);
    train
        .iter()
        .map(|s| generate(lm, &s.prompt, layers, &mut Identity, &opts))
        .collect()
}

/// Unsteered traces of `train` and the coefficient calibrated on the correct
/// ones. The traces double as the AFM frequency sample.
pub fn calibrate_for_run(
    lm: &ToyLmParams,
    sae: &SaeParams,
    train: &[Sample],
    layers: &[usize],
    mode: CalibrationMode,
    horizon: usize,
) -> Result<(Calibration, Vec<GenerationTrace>)> {
    let traces = baseline_traces(lm, train, layers, horizon)?;
    let correct: Vec<GenerationTrace> = traces
        .iter()
        .zip(train)
        .filter(|(t, s)| t.final_token() == s.answer)
        .map(|(t, _)| t.clone())
        .collect();
    let layer = *layers.iter().max().ok_or_else(|| Error::Invalid("no hook layers".into()))?;
    let calib = calibrate_coefficient(&correct, layer, &mut MostActive, sae, mode)?;
    Ok((calib, traces))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub step: usize,
    pub mean_reward: Option<f64>,
    pub policy_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub feature_diversity: Option<f64>,
}

pub struct TrainSetup<'a> {
    pub env: Env<'a>,
    pub train: &'a [Sample],
    pub heldout: &'a [Sample],
    pub reward: RewardSpec,
    pub config: PpoConfig,
    /// Recalibrate `c` from the current greedy policy every N steps (0 = never).
    pub recalibrate_every: usize,
    pub calibration_mode: CalibrationMode,
    /// Checkpoints and divergence dumps go here when set.
    pub out_dir: Option<&'a Path>,
    pub config_hash: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: AgentParams,
    pub best_agent: AgentParams,
    pub best_step: usize,
    pub history: Vec<MetricRow>,
    pub baseline: EvalReport,
    pub final_eval: EvalReport,
    pub best_eval: EvalReport,
    pub coefficient: f64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    epoch: usize,
    policy_loss: f64,
    critic_loss: f64,
    advantages: &'a [f64],
    transitions: &'a [Transition],
}

fn dump_divergence(out_dir: Option<&Path>, dump: &DivergenceDump<'_>) -> Error {
    let msg = format!(
        "non-finite loss at step {} epoch {} (policy {}, critic {})",
        dump.step, dump.epoch, dump.policy_loss, dump.critic_loss
    );
    if let Some(dir) = out_dir {
        let path = dir.join("divergence_dump.json");
        match serde_json::to_vec_pretty(dump) {
            Ok(bytes) => {
                if let Err(e) = std::fs::write(&path, bytes) {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => log::error!("could not serialise divergence dump: {e}"),
        }
        return Error::Divergence(format!("{msg}; batch dumped to {}", path.display()));
    }
    Error::Divergence(msg)
}

fn greedy_selector<'a>(agent: &'a AgentParams) -> impl FnMut(&[f64], &FeatureActivations) -> Result<usize> + 'a {
    move |x: &[f64], _z: &FeatureActivations| {
        let logits = policy_logits(agent, x)?;
        crate::numkit::argmax(&logits).ok_or(Error::InvalidMask)
    }
}

fn eval_policy(setup: &TrainSetup<'_>, agent: &AgentParams, eval_set: &[Sample], label: &str) -> Result<EvalReport> {
    evaluate(
        &setup.env,
        eval_set,
        super::Chooser::Policy {
            agent,
            mode: SelectionMode::Greedy,
        },
        &setup.reward,
        setup.config.seed,
        label,
    )
}

fn save_checkpoint(dir: &Path, name: &str, agent: &AgentParams, hash: u64) -> Result<PathBuf> {
    let path = dir.join(name);
    agent.save(&path, hash)?;
    Ok(path)
}

/// Trains `agent` in place on `setup` and returns the final and best agents.
///
/// Step 0 of the history is the unsteered baseline: before the first update
/// no intervention has been learned, so a zero-step run reports the baseline.
pub fn train(mut setup: TrainSetup<'_>, mut agent: AgentParams) -> Result<TrainOutcome> {
    let cfg = setup.config.clone();
    let problems = cfg.violations();
    if !problems.is_empty() {
        return Err(Error::ConfigInvalid(problems));
    }
    setup.env.validate()?;
    agent.validate()?;
    if agent.d() != setup.env.sae.d() || agent.d_dict() != setup.env.sae.d_dict() {
        return Err(Error::shape(
            "agent vs SAE",
            format!("{}→{}", setup.env.sae.d(), setup.env.sae.d_dict()),
            format!("{}→{}", agent.d(), agent.d_dict()),
        ));
    }
    if setup.env.layers.len() > 1 && !agent.shared {
        return Err(Error::Invalid("several hook layers need a shared (CRL-Layer) agent".into()));
    }
    if setup.train.is_empty() || setup.heldout.is_empty() {
        return Err(Error::Invalid("training and held-out sets must be nonempty".into()));
    }

    let checkpoint_dir = match setup.out_dir {
        Some(dir) => {
            let d = dir.join("checkpoints");
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            Some(d)
        }
        None => None,
    };

    let mut data = cycle(setup.train, cfg.cycle_to);
    data.shuffle(&mut substream(cfg.seed, "data-order"));
    let eval_set = eval_set(setup.heldout, cfg.eval_samples);
    let eval_set = &eval_set[..];

    let baseline = evaluate(&setup.env, eval_set, super::Chooser::Unsteered, &setup.reward, cfg.seed, "none")?;
    let mut history = vec![MetricRow {
        step: 0,
        mean_reward: None,
        policy_loss: None,
        critic_loss: None,
        eval_accuracy: Some(baseline.accuracy),
        feature_diversity: None,
    }];
    let mut best = (baseline.accuracy, 0usize, agent.clone(), baseline.clone());
    let mut last_eval = baseline.clone();
    let mut checkpoints = Vec::new();

    let mut adam_pi = AdamState::new(&agent.policy, cfg.learning_rate);
    let mut adam_v = AdamState::new(&agent.critic, cfg.learning_rate);
    let mut cursor = 0usize;

    for step in 1..=cfg.max_steps {
        if setup.recalibrate_every > 0 && step > 1 && (step - 1) % setup.recalibrate_every == 0 {
            let opts = GenerateOptions::tokens(setup.env.horizon);
            let layer = setup.env.deepest_layer();
            let mut correct: Vec<GenerationTrace> = Vec::new();
            for s in setup.train {
                let t = generate(setup.env.lm, &s.prompt, &[layer], &mut Identity, &opts)?;
                if t.final_token() == s.answer {
                    correct.push(t);
                }
            }
            let mut sel = greedy_selector(&agent);
            match calibrate_coefficient(&correct, layer, &mut sel, setup.env.sae, setup.calibration_mode) {
                Ok(c) => {
                    log::info!("step {step}: recalibrated c = {:.4}", c.coefficient);
                    setup.env.coefficient = c.coefficient;
                }
                Err(e) => log::warn!("step {step}: recalibration skipped: {e}"),
            }
        }

        let batch: Vec<(usize, &Sample)> = (0..cfg.batch_size)
            .map(|i| {
                let idx = (cursor + i) % data.len();
                (idx, &data[idx])
            })
            .collect();
        cursor = (cursor + cfg.batch_size) % data.len();
        let base = ((step - 1) * cfg.batch_size) as u64;
        let (transitions, episodes) = rollout(&setup.env, &agent, &batch, &setup.reward, cfg.seed, base)?;
        let advantages = compute_advantage(&transitions, cfg.standardize_advantages);

        let mut first_losses = None;
        for epoch in 0..cfg.epochs {
            let (pl, gp) = policy_loss_and_grad(&agent.policy, &transitions, &advantages, cfg.clip_eps, cfg.entropy_coef)
                .map_err(|e| match e {
                    Error::Divergence(_) => dump_divergence(
                        setup.out_dir,
                        &DivergenceDump {
                            step,
                            epoch,
                            policy_loss: f64::NAN,
                            critic_loss: f64::NAN,
                            advantages: &advantages,
                            transitions: &transitions,
                        },
                    ),
                    other => other,
                })?;
            let (cl, gc) = critic_loss_and_grad(&agent.critic, &transitions)?;
            if !pl.is_finite() || !cl.is_finite() || !finite(&gp) || !finite(&gc) {
                return Err(dump_divergence(
                    setup.out_dir,
                    &DivergenceDump {
                        step,
                        epoch,
                        policy_loss: pl,
                        critic_loss: cl,
                        advantages: &advantages,
                        transitions: &transitions,
                    },
                ));
            }
            first_losses.get_or_insert((pl, cl));
            adam_pi.step(&mut agent.policy, &gp)?;
            adam_v.step(&mut agent.critic, &gc)?;
        }
        let (pl, cl) = first_losses.expect("epochs >= 1");
        let mean_reward = episodes.iter().map(|e| e.reward).sum::<f64>() / episodes.len() as f64;
        let mut row = MetricRow {
            step,
            mean_reward: Some(mean_reward),
            policy_loss: Some(pl),
            critic_loss: Some(cl),
            eval_accuracy: None,
            feature_diversity: None,
        };

        if step % cfg.eval_interval == 0 || step == cfg.max_steps {
            let report = eval_policy(&setup, &agent, eval_set, "crl")?;
            log::info!("step {step}: eval accuracy {:.4}, mean reward {:.3}", report.accuracy, mean_reward);
            row.eval_accuracy = Some(report.accuracy);
            row.feature_diversity = report.feature_diversity;
            if let Some(dir) = &checkpoint_dir {
                checkpoints.push(save_checkpoint(dir, &format!("step_{step:06}.crla"), &agent, setup.config_hash)?);
            }
            if report.accuracy > best.0 {
                best = (report.accuracy, step, agent.clone(), report.clone());
            }
            last_eval = report;
        }
        history.push(row);
    }

    if let Some(dir) = &checkpoint_dir {
        checkpoints.push(save_checkpoint(dir, "final.crla", &agent, setup.config_hash)?);
        checkpoints.push(save_checkpoint(dir, "best.crla", &best.2, setup.config_hash)?);
    }
    Ok(TrainOutcome {
        agent,
        best_agent: best.2,
        best_step: best.1,
        history,
        baseline,
        final_eval: last_eval,
        best_eval: best.3,
        coefficient: setup.env.coefficient,
        checkpoints,
    })
}

fn finite(p: &MlpParams) -> bool {
    p.is_finite()
}
