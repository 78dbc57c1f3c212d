// SPDX-License-Identifier: MIT OR Apache-2.0

//! Heuristic steering baselines, sweeps and the runtime-overhead measurement.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::report::{evaluate, EvalReport};
use crate::agent::AgentParams;
use crate::error::{Error, Result};
use crate::ppo::{baseline_traces, train, Chooser, Env, PpoConfig, RewardSpec, TrainSetup};
use crate::rng::{derive_seed, substream};
use crate::sae::SaeParams;
use crate::steering::{afm_init, CalibrationMode};
use crate::toylm::{Sample, ToyLmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    None,
    Random,
    MostActive,
    Constrained,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BaselineKind::None),
            "random" => Ok(BaselineKind::Random),
            "most-active" => Ok(BaselineKind::MostActive),
            "constrained" => Ok(BaselineKind::Constrained),
            _ => Err(Error::Invalid(format!(
                "unknown baseline {s:?} (expected none, random, most-active or constrained)"
            ))),
        }
    }
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::None => "none",
            BaselineKind::Random => "random",
            BaselineKind::MostActive => "most-active",
            BaselineKind::Constrained => "constrained",
        }
    }
}

/// Evaluates a heuristic. Random draws uniformly from the current mask, so
/// whether AFM applies is decided by `env.mask_seed`.
pub fn run_baseline(
    kind: BaselineKind,
    env: &Env<'_>,
    samples: &[Sample],
    reward: &RewardSpec,
    seed: u64,
) -> Result<EvalReport> {
    match kind {
        BaselineKind::None => evaluate(env, samples, Chooser::Unsteered, reward, seed, kind.as_str()),
        BaselineKind::Random => evaluate(env, samples, Chooser::Random, reward, seed, kind.as_str()),
        BaselineKind::MostActive => evaluate(env, samples, Chooser::MostActive, reward, seed, kind.as_str()),
        BaselineKind::Constrained => {
            if reward.answers.is_empty() {
                return Err(Error::Invalid("constrained decoding needs an answer set".into()));
            }
            let constrained = Env {
                allowed_tokens: Some(reward.answers.clone()),
                ..env.clone()
            };
            evaluate(&constrained, samples, Chooser::Unsteered, reward, seed, kind.as_str())
        }
    }
}

/// Everything a sweep cell needs besides its layer and coefficient.
pub struct SweepSpec<'a> {
    pub lm: &'a ToyLmParams,
    pub sae: &'a SaeParams,
    pub train: &'a [Sample],
    pub heldout: &'a [Sample],
    pub reward: RewardSpec,
    pub horizon: usize,
    pub afm: bool,
    pub afm_seed_size: usize,
    pub steer_prompt: bool,
    /// Per-cell training budget lives in `ppo.max_steps`.
    pub ppo: PpoConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub coefficient: f64,
    pub accuracy: Option<f64>,
    pub diversity: Option<f64>,
    pub error: Option<String>,
}

/// Short training run plus greedy evaluation for every `(layer, c)` cell.
/// A failing cell is recorded and the sweep moves on.
pub fn sweep(spec: &SweepSpec<'_>, layers: &[usize], coefficients: &[f64]) -> Result<Vec<SweepCell>> {
    if layers.is_empty() || coefficients.is_empty() {
        return Err(Error::Invalid("sweep grid must be nonempty".into()));
    }
    let mut cells = Vec::with_capacity(layers.len() * coefficients.len());
    let mut index = 0u64;
    for &layer in layers {
        for &c in coefficients {
            let cell_seed = derive_seed(spec.seed, "sweep-cell", index);
            index += 1;
            let outcome = sweep_cell(spec, layer, c, cell_seed);
            cells.push(match outcome {
                Ok(r) => SweepCell {
                    layer,
                    coefficient: c,
                    accuracy: Some(r.accuracy),
                    diversity: r.feature_diversity,
                    error: None,
                },
                Err(e) => {
                    log::warn!("sweep cell layer {layer}, c {c} failed: {e}");
                    SweepCell {
                        layer,
                        coefficient: c,
                        accuracy: None,
                        diversity: None,
                        error: Some(e.to_string()),
                    }
                }
            });
        }
    }
    Ok(cells)
}

fn sweep_cell(spec: &SweepSpec<'_>, layer: usize, c: f64, seed: u64) -> Result<EvalReport> {
    let traces = baseline_traces(spec.lm, spec.train, &[layer], spec.horizon)?;
    let mask_seed = if spec.afm {
        Some(afm_init(&traces, layer, spec.sae, spec.afm_seed_size)?)
    } else {
        None
    };
    let env = Env {
        lm: spec.lm,
        sae: spec.sae,
        layers: vec![layer],
        coefficient: c,
        horizon: spec.horizon,
        steer_prompt: spec.steer_prompt,
        mask_seed: mask_seed.as_ref(),
        allowed_tokens: None,
    };
    let agent = AgentParams::init(spec.sae.d(), spec.sae.d_dict(), false, &mut substream(seed, "init"))?;
    let setup = TrainSetup {
        env,
        train: spec.train,
        heldout: spec.heldout,
        reward: spec.reward.clone(),
        config: PpoConfig {
            seed,
            ..spec.ppo.clone()
        },
        recalibrate_every: 0,
        calibration_mode: CalibrationMode::Activation,
        out_dir: None,
        config_hash: 0,
    };
    Ok(train(setup, agent)?.final_eval)
}

pub fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["layer", "coefficient", "accuracy", "diversity", "error"])?;
    for c in cells {
        w.write_record([
            c.layer.to_string(),
            c.coefficient.to_string(),
            c.accuracy.map(|v| v.to_string()).unwrap_or_default(),
            c.diversity.map(|v| v.to_string()).unwrap_or_default(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Wall-clock seconds for unsteered and steered generation over `samples`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Overhead {
    pub unsteered_seconds: f64,
    pub steered_seconds: f64,
}

pub fn measure_overhead(env: &Env<'_>, samples: &[Sample], chooser: Chooser<'_>, reward: &RewardSpec, seed: u64) -> Result<Overhead> {
    let t0 = Instant::now();
    evaluate(env, samples, Chooser::Unsteered, reward, seed, "none")?;
    let unsteered = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    evaluate(env, samples, chooser, reward, seed, "steered")?;
    Ok(Overhead {
        unsteered_seconds: unsteered,
        steered_seconds: t1.elapsed().as_secs_f64(),
    })
}

pub fn write_overhead_csv(path: &Path, o: &Overhead) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mode", "seconds"])?;
    w.write_record(["unsteered", &o.unsteered_seconds.to_string()])?;
    w.write_record(["steered", &o.steered_seconds.to_string()])?;
    w.flush().map_err(|e| Error::io(path, e))
}
