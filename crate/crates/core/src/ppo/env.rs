// SPDX-License-Identifier: MIT OR Apache-2.0

//! One steered generation per sample, driven by a policy or a heuristic.

use rand::Rng as _;

use crate::agent::{policy_logits, select_action, AgentParams, SelectionMode};
use crate::error::{Error, Result};
use crate::numkit::argmax;
use crate::rng::Rng;
use crate::sae::SaeParams;
use crate::steering::{apply_steering, ActionVector, FeatureMask, MaskSeed};
use crate::toylm::{generate, Edit, GenerateOptions, GenerationTrace, Intervention, Sample, Site, ToyLmParams};

/// Binary exact match of the final emitted token against the sample's answer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewardSpec {
    /// Valid answer tokens; anything else counts as an invalid output.
    pub answers: Vec<usize>,
}

impl RewardSpec {
    pub fn new(answers: Vec<usize>) -> Result<Self> {
        if answers.is_empty() {
            return Err(Error::Invalid("reward needs a nonempty answer set".into()));
        }
        Ok(RewardSpec { answers })
    }

    pub fn reward(&self, sample: &Sample, final_token: usize) -> f64 {
        if final_token == sample.answer {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_valid(&self, token: usize) -> bool {
        self.answers.contains(&token)
    }
}

/// Frozen model, SAE and steering settings shared by every episode of a run.
#[derive(Debug, Clone)]
pub struct Env<'a> {
    pub lm: &'a ToyLmParams,
    pub sae: &'a SaeParams,
    /// Hook layers, each visited once per position in forward order.
    pub layers: Vec<usize>,
    pub coefficient: f64,
    pub horizon: usize,
    pub steer_prompt: bool,
    /// AFM seed; `None` disables masking (every feature selectable).
    pub mask_seed: Option<&'a MaskSeed>,
    /// Constrained decoding: greedy over these tokens only.
    pub allowed_tokens: Option<Vec<usize>>,
}

impl Env<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("no hook layers".into()));
        }
        for &l in &self.layers {
            self.lm.check_hook(l)?;
        }
        if self.sae.d() != self.lm.d() {
            return Err(Error::shape("SAE vs model width", self.lm.d(), self.sae.d()));
        }
        if self.horizon == 0 {
            return Err(Error::Invalid("horizon must be at least 1".into()));
        }
        if !self.coefficient.is_finite() {
            return Err(Error::Invalid(format!("non-finite coefficient {}", self.coefficient)));
        }
        if let Some(seed) = self.mask_seed {
            if seed.bits.len() != self.sae.d_dict() {
                return Err(Error::shape("AFM seed", self.sae.d_dict(), seed.bits.len()));
            }
        }
        Ok(())
    }

    /// Layers in the order a forward pass visits them.
    pub fn ordered_layers(&self) -> Vec<usize> {
        let mut l = self.layers.clone();
        l.sort_unstable();
        l
    }

    pub fn deepest_layer(&self) -> usize {
        *self.layers.iter().max().expect("validated nonempty")
    }
}

/// How each steered site picks its feature.
#[derive(Debug, Clone, Copy)]
pub enum Chooser<'a> {
    Policy { agent: &'a AgentParams, mode: SelectionMode },
    /// Uniform over the current mask.
    Random,
    /// `argmax z` of the pre-steering activations.
    MostActive,
    /// The same feature everywhere.
    Forced(usize),
    /// No intervention at all.
    Unsteered,
}

/// What happened at one steered site.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// 1-based generation step; 0 for prompt positions.
    pub step: usize,
    pub layer: usize,
    /// Pre-steering residual.
    pub state: Vec<f64>,
    pub feature: usize,
    /// Masked policy log-probability (policy choosers only).
    pub log_prob: Option<f64>,
    /// Natural activation `z_{j*}` before steering.
    pub activation: f64,
    /// Mask in force when the feature was chosen.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub sample_id: usize,
    pub trace: GenerationTrace,
    /// Sites in visit order: for each position, one entry per hook layer.
    pub decisions: Vec<Decision>,
    pub reward: f64,
}

impl Episode {
    pub fn final_token(&self) -> usize {
        self.trace.final_token()
    }

    pub fn popcounts(&self) -> Vec<usize> {
        self.decisions.iter().map(|d| d.mask.iter().filter(|b| **b).count()).collect()
    }
}

struct Hook<'e, 'a, 'c> {
    env: &'e Env<'a>,
    chooser: Chooser<'c>,
    sample_id: usize,
    rng: &'e mut Rng,
    /// One mask per hook layer.
    masks: Vec<FeatureMask>,
    decisions: Vec<Decision>,
}

impl Intervention for Hook<'_, '_, '_> {
    fn intervene(&mut self, site: Site, x: &[f64]) -> Result<Edit> {
        if matches!(self.chooser, Chooser::Unsteered) {
            return Ok(Edit::none());
        }
        let env = self.env;
        let slot = env.layers.iter().position(|&l| l == site.layer).expect("hook layer");
        let z = env.sae.encode(x)?;
        if env.mask_seed.is_some() {
            self.masks[slot].update(self.sample_id, &z)?;
        }
        let mask = self.masks[slot].bits();
        let (feature, log_prob) = match self.chooser {
            Chooser::Policy { agent, mode } => {
                let logits = policy_logits(agent, x)?;
                let (s, _) = select_action(&logits, mask, mode, self.rng, 1)?;
                (s.feature, Some(s.log_prob))
            }
            Chooser::Random => {
                let allowed = self.masks[slot].indices();
                if allowed.is_empty() {
                    return Err(Error::InvalidMask);
                }
                (allowed[self.rng.random_range(0..allowed.len())], None)
            }
            Chooser::MostActive => (argmax(&z.values).ok_or(Error::InvalidMask)?, None),
            Chooser::Forced(j) => (j, None),
            Chooser::Unsteered => unreachable!(),
        };
        let steered = apply_steering(x, &ActionVector::one_hot(feature), env.coefficient, env.sae)?;
        self.decisions.push(Decision {
            step: site.step,
            layer: site.layer,
            state: x.to_vec(),
            feature,
            log_prob,
            activation: z.values[feature],
            mask: mask.to_vec(),
        });
        Ok(Edit {
            residual: Some(steered),
            action: Some(feature),
        })
    }
}

/// Runs one sample to completion under `chooser`.
pub fn run_episode(
    env: &Env<'_>,
    sample_id: usize,
    sample: &Sample,
    chooser: Chooser<'_>,
    reward: &RewardSpec,
    rng: &mut Rng,
) -> Result<Episode> {
    let d_dict = env.sae.d_dict();
    let masks = env
        .layers
        .iter()
        .map(|_| match env.mask_seed {
            Some(seed) => seed.for_sample(sample_id),
            None => FeatureMask::full(d_dict, sample_id),
        })
        .collect();
    let mut hook = Hook {
        env,
        chooser,
        sample_id,
        rng,
        masks,
        decisions: Vec::new(),
    };
    let opts = GenerateOptions {
        max_tokens: env.horizon,
        steer_prompt: env.steer_prompt,
        allowed_tokens: env.allowed_tokens.clone(),
    };
    let trace = generate(env.lm, &sample.prompt, &env.ordered_layers(), &mut hook, &opts)
        .inspect_err(|e| log::error!("episode for sample {sample_id} failed: {e}"))?;
    let r = reward.reward(sample, trace.final_token());
    Ok(Episode {
        sample_id,
        trace,
        decisions: hook.decisions,
        reward: r,
    })
}
