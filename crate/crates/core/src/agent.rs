// SPDX-License-Identifier: MIT OR Apache-2.0

//! Policy and critic networks plus masked feature selection.
//!
//! The policy maps a residual `x` (dim `d`) to one logit per SAE feature; the
//! critic maps the same `x` to a scalar value. Both are single-hidden-layer
//! tanh MLPs with hidden width `d`.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{log_softmax_masked_at, softmax_masked, MlpParams};
use crate::rng::Rng;
use crate::steering::ActionVector;

const MAGIC: &[u8; 4] = b"CRLA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    Sampled,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSample {
    pub feature: usize,
    pub log_prob: f64,
    pub mode: SelectionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    /// θ: d → d_dict
    pub policy: MlpParams,
    /// φ: d → 1
    pub critic: MlpParams,
    /// One policy shared across several hook layers (CRL-Layer).
    pub shared: bool,
}

impl AgentParams {
    pub fn init(d: usize, d_dict: usize, shared: bool, rng: &mut Rng) -> Result<Self> {
        Ok(AgentParams {
            policy: MlpParams::init(d, d, d_dict, rng)?,
            critic: MlpParams::init(d, d, 1, rng)?,
            shared,
        })
    }

    pub fn zeros(d: usize, d_dict: usize, shared: bool) -> Self {
        AgentParams {
            policy: MlpParams::zeros(d, d, d_dict),
            critic: MlpParams::zeros(d, d, 1),
            shared,
        }
    }

    pub fn d(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn d_dict(&self) -> usize {
        self.policy.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.critic.output_dim() != 1 {
            return Err(Error::shape("critic output", 1, self.critic.output_dim()));
        }
        if self.critic.input_dim() != self.policy.input_dim() {
            return Err(Error::shape("critic input", self.policy.input_dim(), self.critic.input_dim()));
        }
        if !self.policy.is_finite() || !self.critic.is_finite() {
            return Err(Error::Invalid("non-finite agent parameter".into()));
        }
        Ok(())
    }

    /// Checkpoint: magic `CRLA`, version, d, policy hidden, d_dict, critic
    /// hidden, shared flag, θ then φ (W1, b1, W2, b2 each), run-config hash.
    pub fn to_bytes(&self, config_hash: u64) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.d() as u32);
        w.u32(self.policy.hidden_dim() as u32);
        w.u32(self.d_dict() as u32);
        w.u32(self.critic.hidden_dim() as u32);
        w.u8(self.shared as u8);
        for net in [&self.policy, &self.critic] {
            w.mat(&net.w1);
            w.f64s(&net.b1);
            w.mat(&net.w2);
            w.f64s(&net.b2);
        }
        w.u64(config_hash);
        w.bytes().to_vec()
    }

    pub fn save(&self, path: &Path, config_hash: u64) -> Result<()> {
        std::fs::write(path, self.to_bytes(config_hash)).map_err(|e| Error::io(path, e))
    }

    /// Returns the agent and the run-config hash it was saved with.
    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let mut r = Reader::open(path)?;
        r.header(MAGIC, VERSION)?;
        let d = r.dim()?;
        let hp = r.dim()?;
        let n = r.dim()?;
        let hc = r.dim()?;
        let shared = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(r.err(format!("bad shared flag {b}"))),
        };
        let mut read_mlp = |input: usize, hidden: usize, output: usize| -> Result<MlpParams> {
            Ok(MlpParams {
                w1: r.mat(input, hidden)?,
                b1: r.f64s(hidden)?,
                w2: r.mat(hidden, output)?,
                b2: r.f64s(output)?,
            })
        };
        let policy = read_mlp(d, hp, n)?;
        let critic = read_mlp(d, hc, 1)?;
        let hash = r.u64()?;
        r.finish()?;
        let agent = AgentParams { policy, critic, shared };
        agent.validate().map_err(|e| r.err(e.to_string()))?;
        Ok((agent, hash))
    }
}

/// Raw, unmasked policy logits `μ = π_θ(x)`.
pub fn policy_logits(agent: &AgentParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(agent.policy.forward(x)?.0)
}

pub fn critic_value(agent: &AgentParams, x: &[f64]) -> Result<f64> {
    Ok(agent.critic.forward(x)?.0[0])
}

/// Picks one feature from the masked categorical over `logits`.
///
/// Greedy takes the masked argmax (ties to the lowest index); sampled draws by
/// inverse CDF from one uniform. The log-probability always comes from the
/// masked distribution.
pub fn select_action(
    logits: &[f64],
    mask: &[bool],
    mode: SelectionMode,
    rng: &mut Rng,
    k: usize,
) -> Result<(ActionSample, ActionVector)> {
    if k != 1 {
        return Err(Error::Invalid(format!("only k = 1 is supported, got {k}")));
    }
    if mask.len() != logits.len() {
        return Err(Error::shape("select_action mask", logits.len(), mask.len()));
    }
    let feature = match mode {
        SelectionMode::Greedy => {
            let mut best: Option<usize> = None;
            for (i, (&l, &m)) in logits.iter().zip(mask).enumerate() {
                if m && best.is_none_or(|b| l > logits[b]) {
                    best = Some(i);
                }
            }
            best.ok_or(Error::InvalidMask)?
        }
        SelectionMode::Sampled => {
            let p = softmax_masked(logits, mask)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &pi) in p.iter().enumerate() {
                if pi > 0.0 {
                    acc += pi;
                    pick = Some(i);
                    if u < acc {
                        break;
                    }
                }
            }
            pick.ok_or(Error::InvalidMask)?
        }
    };
    let log_prob = log_softmax_masked_at(logits, mask, feature)?;
    Ok((
        ActionSample {
            feature,
            log_prob,
            mode,
        },
        ActionVector::one_hot(feature),
    ))
}

/// `∂ log p_j / ∂ logits = e_j − p` on the mask, zero off it.
pub fn log_prob_grad(logits: &[f64], mask: &[bool], j: usize) -> Result<Vec<f64>> {
    let p = softmax_masked(logits, mask)?;
    if j >= p.len() || !mask[j] {
        return Err(Error::ActionRange {
            index: j,
            d_dict: p.len(),
        });
    }
    let mut g: Vec<f64> = p.iter().map(|v| -v).collect();
    g[j] += 1.0;
    Ok(g)
}

/// Joint log-probability of one action per layer under the shared policy:
/// `Σ_ℓ log π_θ(a_ℓ | x_ℓ)`.
pub fn crl_layer_logprob(agent: &AgentParams, states: &[Vec<f64>], actions: &[usize], masks: &[&[bool]]) -> Result<f64> {
    if !agent.shared {
        return Err(Error::Invalid("CRL-Layer log-prob needs a shared agent".into()));
    }
    if states.is_empty() || actions.len() != states.len() || masks.len() != states.len() {
        return Err(Error::shape(
            "crl_layer_logprob layers",
            format!("{} states, actions and masks", states.len()),
            format!("{} actions, {} masks", actions.len(), masks.len()),
        ));
    }
    let mut total = 0.0;
    for ((x, &a), mask) in states.iter().zip(actions).zip(masks) {
        let logits = policy_logits(agent, x)?;
        total += log_softmax_masked_at(&logits, mask, a)?;
    }
    Ok(total)
}
