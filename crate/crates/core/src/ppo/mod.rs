// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rollouts, advantages, the clipped surrogate and the critic regression.
//!
//! ```text
//! ρ_t      = exp(log π_new − log π_old)
//! A_t      = r − V_old(x_t)              (terminal reward on every step)
//! L_policy = −mean_t min(ρ_t A_t, clip(ρ_t, 1−ε, 1+ε) A_t)
//! L_critic = mean_t (V(x_t) − r)²
//! ```
//!
//! A transition covers one generated position. Under CRL-Layer it carries one
//! state/action/mask per hook layer and its log-probability is the sum over
//! layers; the critic reads the deepest layer's state.

mod env;
mod train;

pub use env::{run_episode, Chooser, Decision, Env, Episode, RewardSpec};
pub use train::{baseline_traces, calibrate_for_run, cycle, eval_set, train, MetricRow, TrainOutcome, TrainSetup};

use serde::{Deserialize, Serialize};

use crate::agent::{log_prob_grad, AgentParams, SelectionMode};
use crate::error::{Error, Result};
use crate::numkit::{log_softmax_masked_at, softmax_masked, MlpParams};
use crate::rng::{indexed, Rng};
use crate::toylm::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Samples per rollout batch.
    pub batch_size: usize,
    /// Training steps; one step is one rollout batch plus its updates.
    pub max_steps: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    /// Training data is repeated up to this many samples.
    pub cycle_to: usize,
    pub entropy_coef: f64,
    pub standardize_advantages: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            learning_rate: 3e-4,
            epochs: 4,
            batch_size: 8,
            max_steps: 5000,
            eval_interval: 100,
            eval_samples: 500,
            cycle_to: 4000,
            entropy_coef: 0.0,
            standardize_advantages: false,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            v.push(format!("ppo.clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(format!("ppo.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            v.push("ppo.epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            v.push("ppo.batch_size must be >= 1".into());
        }
        if self.eval_interval == 0 {
            v.push("ppo.eval_interval must be >= 1".into());
        }
        if self.eval_samples == 0 {
            v.push("ppo.eval_samples must be >= 1".into());
        }
        if !(self.entropy_coef >= 0.0) {
            v.push(format!("ppo.entropy_coef must be >= 0, got {}", self.entropy_coef));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Pre-steering residual per hook layer, in forward order.
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    /// Summed over layers; ≤ 0.
    pub old_log_prob: f64,
    pub old_value: f64,
    /// Terminal reward of the sample, ∈ {0, 1}.
    pub reward: f64,
    pub sample_id: usize,
    pub step: usize,
}

impl Transition {
    /// State the critic reads: the deepest layer's.
    pub fn critic_state(&self) -> &[f64] {
        self.states.last().expect("at least one layer")
    }
}

/// Groups an episode's decisions into one transition per position.
pub fn transitions_from_episode(episode: &Episode, n_layers: usize, agent: &AgentParams) -> Result<Vec<Transition>> {
    if n_layers == 0 || episode.decisions.len() % n_layers != 0 {
        return Err(Error::shape("episode decisions", format!("multiple of {n_layers}"), episode.decisions.len()));
    }
    episode
        .decisions
        .chunks(n_layers)
        .map(|chunk| {
            let mut old_log_prob = 0.0;
            for d in chunk {
                old_log_prob += d
                    .log_prob
                    .ok_or_else(|| Error::Invalid("transition needs policy log-probabilities".into()))?;
            }
            let states: Vec<Vec<f64>> = chunk.iter().map(|d| d.state.clone()).collect();
            let old_value = crate::agent::critic_value(agent, states.last().expect("nonempty"))?;
            Ok(Transition {
                states,
                actions: chunk.iter().map(|d| d.feature).collect(),
                masks: chunk.iter().map(|d| d.mask.clone()).collect(),
                old_log_prob,
                old_value,
                reward: episode.reward,
                sample_id: episode.sample_id,
                step: chunk[0].step,
            })
        })
        .collect()
}

/// Sampled-mode rollouts for a batch of `(sample id, sample)` pairs. Each
/// sample draws from its own stream keyed by `episode_base + position`.
pub fn rollout(
    env: &Env<'_>,
    agent: &AgentParams,
    batch: &[(usize, &Sample)],
    reward: &RewardSpec,
    seed: u64,
    episode_base: u64,
) -> Result<(Vec<Transition>, Vec<Episode>)> {
    let chooser = Chooser::Policy {
        agent,
        mode: SelectionMode::Sampled,
    };
    let mut transitions = Vec::new();
    let mut episodes = Vec::with_capacity(batch.len());
    for (i, &(id, sample)) in batch.iter().enumerate() {
        let mut rng = indexed(seed, "rollout", episode_base + i as u64);
        let ep = run_episode(env, id, sample, chooser, reward, &mut rng)?;
        transitions.extend(transitions_from_episode(&ep, env.layers.len(), agent)?);
        episodes.push(ep);
    }
    Ok((transitions, episodes))
}

/// `A_t = r − V_old(x_t)`, optionally standardised over the batch.
pub fn compute_advantage(batch: &[Transition], standardize: bool) -> Vec<f64> {
    let mut a: Vec<f64> = batch.iter().map(|t| t.reward - t.old_value).collect();
    if standardize && a.len() > 1 {
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for v in &mut a {
            *v = (*v - mean) / (std + 1e-8);
        }
    }
    a
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyLoss {
    pub loss: f64,
    pub ratios: Vec<f64>,
    /// `ρ A` per transition.
    pub unclipped: Vec<f64>,
    /// `clip(ρ, 1−ε, 1+ε) A` per transition.
    pub clipped: Vec<f64>,
}

pub fn ppo_policy_loss(new_log_probs: &[f64], old_log_probs: &[f64], advantages: &[f64], eps: f64) -> Result<PolicyLoss> {
    let n = new_log_probs.len();
    if old_log_probs.len() != n || advantages.len() != n {
        return Err(Error::shape(
            "ppo_policy_loss",
            n,
            format!("{} old log-probs, {} advantages", old_log_probs.len(), advantages.len()),
        ));
    }
    if n == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut ratios = Vec::with_capacity(n);
    let mut unclipped = Vec::with_capacity(n);
    let mut clipped = Vec::with_capacity(n);
    let mut total = 0.0;
    for i in 0..n {
        let rho = (new_log_probs[i] - old_log_probs[i]).exp();
        if !rho.is_finite() {
            return Err(Error::Divergence(format!(
                "policy ratio {rho} at transition {i} (new {}, old {})",
                new_log_probs[i], old_log_probs[i]
            )));
        }
        let u = rho * advantages[i];
        let c = rho.clamp(1.0 - eps, 1.0 + eps) * advantages[i];
        total += u.min(c);
        ratios.push(rho);
        unclipped.push(u);
        clipped.push(c);
    }
    Ok(PolicyLoss {
        loss: -total / n as f64,
        ratios,
        unclipped,
        clipped,
    })
}

/// Masked entropy `−Σ p log p` (nats) and its gradient w.r.t. the logits.
fn entropy_and_grad(logits: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let p = softmax_masked(logits, mask)?;
    let h: f64 = -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
    let g = p
        .iter()
        .map(|&pi| if pi > 0.0 { -pi * (pi.ln() + h) } else { 0.0 })
        .collect();
    Ok((h, g))
}

/// Joint log-probability of a transition under `policy`.
pub fn transition_log_prob(policy: &MlpParams, t: &Transition) -> Result<f64> {
    let mut lp = 0.0;
    for ((x, &a), mask) in t.states.iter().zip(&t.actions).zip(&t.masks) {
        let logits = policy.forward(x)?.0;
        lp += log_softmax_masked_at(&logits, mask, a)?;
    }
    Ok(lp)
}

/// Clipped-surrogate loss (minus the entropy bonus) and its gradient w.r.t.
/// the policy parameters.
pub fn policy_loss_and_grad(
    policy: &MlpParams,
    batch: &[Transition],
    advantages: &[f64],
    eps: f64,
    entropy_coef: f64,
) -> Result<(f64, MlpParams)> {
    let n = batch.len();
    let mut caches = Vec::with_capacity(n);
    let mut new_lp = Vec::with_capacity(n);
    for t in batch {
        let mut lp = 0.0;
        let mut per_layer = Vec::with_capacity(t.states.len());
        for ((x, &a), mask) in t.states.iter().zip(&t.actions).zip(&t.masks) {
            let (logits, cache) = policy.forward(x)?;
            lp += log_softmax_masked_at(&logits, mask, a)?;
            per_layer.push((logits, cache));
        }
        new_lp.push(lp);
        caches.push(per_layer);
    }
    let old: Vec<f64> = batch.iter().map(|t| t.old_log_prob).collect();
    let pl = ppo_policy_loss(&new_lp, &old, advantages, eps)?;
    let mut loss = pl.loss;
    let mut grad = policy.zeros_like();
    let scale = 1.0 / n as f64;
    for (i, t) in batch.iter().enumerate() {
        let rho = pl.ratios[i];
        let a = advantages[i];
        // d min(ρA, clip(ρ)A)/dρ is A where the unclipped branch is active, 0 otherwise.
        let inside = rho >= 1.0 - eps && rho <= 1.0 + eps;
        let d_obj_d_rho = if inside || pl.unclipped[i] < pl.clipped[i] { a } else { 0.0 };
        let d_loss_d_lp = -scale * d_obj_d_rho * rho;
        for (((logits, cache), &act), mask) in caches[i].iter().zip(&t.actions).zip(&t.masks) {
            let mut g: Vec<f64> = log_prob_grad(logits, mask, act)?.iter().map(|v| v * d_loss_d_lp).collect();
            if entropy_coef > 0.0 {
                let (h, gh) = entropy_and_grad(logits, mask)?;
                loss -= entropy_coef * scale * h;
                for (gi, ghi) in g.iter_mut().zip(gh) {
                    *gi -= entropy_coef * scale * ghi;
                }
            }
            let (gp, _) = policy.backward(cache, &g)?;
            grad.add_scaled(1.0, &gp)?;
        }
    }
    Ok((loss, grad))
}

/// Value of [`policy_loss_and_grad`]'s loss without the gradient.
pub fn policy_loss_value(policy: &MlpParams, batch: &[Transition], advantages: &[f64], eps: f64, entropy_coef: f64) -> Result<f64> {
    let mut new_lp = Vec::with_capacity(batch.len());
    let mut entropy = 0.0;
    for t in batch {
        new_lp.push(transition_log_prob(policy, t)?);
        if entropy_coef > 0.0 {
            for (x, mask) in t.states.iter().zip(&t.masks) {
                entropy += entropy_and_grad(&policy.forward(x)?.0, mask)?.0;
            }
        }
    }
    let old: Vec<f64> = batch.iter().map(|t| t.old_log_prob).collect();
    let pl = ppo_policy_loss(&new_lp, &old, advantages, eps)?;
    Ok(pl.loss - entropy_coef * entropy / batch.len() as f64)
}

/// `mean_t (V(x_t) − r)²` and its gradient w.r.t. the critic parameters.
pub fn critic_loss_and_grad(critic: &MlpParams, batch: &[Transition]) -> Result<(f64, MlpParams)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = critic.zeros_like();
    for t in batch {
        let (v, cache) = critic.forward(t.critic_state())?;
        let err = v[0] - t.reward;
        loss += err * err / n;
        let (g, _) = critic.backward(&cache, &[2.0 * err / n])?;
        grad.add_scaled(1.0, &g)?;
    }
    Ok((loss, grad))
}

pub fn critic_loss_value(critic: &MlpParams, batch: &[Transition]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut loss = 0.0;
    for t in batch {
        let v = critic.forward(t.critic_state())?.0[0];
        loss += (v - t.reward).powi(2);
    }
    Ok(loss / batch.len() as f64)
}

/// A random batch of transitions for gradient checks and property tests.
pub fn random_transitions(agent: &AgentParams, n: usize, n_layers: usize, rng: &mut Rng) -> Result<Vec<Transition>> {
    use rand::Rng as _;
    let (d, d_dict) = (agent.d(), agent.d_dict());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..n_layers {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut mask: Vec<bool> = (0..d_dict).map(|_| rng.random_bool(0.6)).collect();
            let a = rng.random_range(0..d_dict);
            mask[a] = true;
            states.push(x);
            actions.push(a);
            masks.push(mask);
        }
        let mut t = Transition {
            states,
            actions,
            masks,
            old_log_prob: 0.0,
            old_value: 0.0,
            reward: if rng.random_bool(0.5) { 1.0 } else { 0.0 },
            sample_id: i,
            step: 1,
        };
        // Old log-prob near the current one so ratios land on both sides of the clip.
        t.old_log_prob = transition_log_prob(&agent.policy, &t)? + rng.random_range(-0.5..0.5);
        t.old_value = rng.random_range(-0.5..1.5);
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{compare_gradients, finite_difference};
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    fn tr(reward: f64, value: f64) -> Transition {
        Transition {
            states: vec![vec![0.0; 2]],
            actions: vec![0],
            masks: vec![vec![true; 3]],
            old_log_prob: -1.0,
            old_value: value,
            reward,
            sample_id: 0,
            step: 1,
        }
    }

    #[test]
    fn advantage_examples() {
        assert_abs_diff_eq!(compute_advantage(&[tr(1.0, 0.3)], false)[0], 0.7, epsilon = 1e-15);
        let perfect = [tr(1.0, 1.0), tr(0.0, 0.0)];
        assert_eq!(compute_advantage(&perfect, false), vec![0.0, 0.0]);
        let mut rng = substream(3, "adv");
        let agent = AgentParams::init(4, 9, false, &mut rng).unwrap();
        let batch = random_transitions(&agent, 50, 1, &mut rng).unwrap();
        for (a, t) in compute_advantage(&batch, false).iter().zip(&batch) {
            assert_eq!(*a, t.reward - t.old_value);
        }
        let s = compute_advantage(&batch, true);
        assert_abs_diff_eq!(s.iter().sum::<f64>() / 50.0, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn policy_loss_examples() {
        let adv = [0.5, -1.0, 2.0];
        let l = ppo_policy_loss(&[-1.0, -2.0, -0.1], &[-1.0, -2.0, -0.1], &adv, 0.2).unwrap();
        assert_abs_diff_eq!(l.loss, -(0.5 - 1.0 + 2.0) / 3.0, epsilon = 1e-15);

        let l = ppo_policy_loss(&[1.5f64.ln()], &[0.0], &[1.0], 0.2).unwrap();
        assert_abs_diff_eq!(l.unclipped[0], 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(l.clipped[0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(l.loss, -1.2, epsilon = 1e-12);

        assert!(matches!(ppo_policy_loss(&[1000.0], &[-1000.0], &[1.0], 0.2), Err(Error::Divergence(_))));
        assert!(ppo_policy_loss(&[0.0], &[0.0, 1.0], &[1.0], 0.2).is_err());
    }

    #[test]
    fn policy_loss_matches_literal_formula() {
        use rand::Rng as _;
        let mut rng = substream(11, "literal");
        let n = 1000;
        let new: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
        let old: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = 0.2;
        let mut expect = 0.0;
        for i in 0..n {
            let r = (new[i] - old[i]).exp();
            let c = if r < 1.0 - eps {
                1.0 - eps
            } else if r > 1.0 + eps {
                1.0 + eps
            } else {
                r
            };
            let a = r * adv[i];
            let b = c * adv[i];
            expect += if a < b { a } else { b };
        }
        let got = ppo_policy_loss(&new, &old, &adv, eps).unwrap().loss;
        assert_abs_diff_eq!(got, -expect / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn critic_loss_is_mse() {
        let mut rng = substream(4, "critic");
        let agent = AgentParams::init(4, 9, false, &mut rng).unwrap();
        let batch = random_transitions(&agent, 20, 1, &mut rng).unwrap();
        let (l, _) = critic_loss_and_grad(&agent.critic, &batch).unwrap();
        let expect: f64 = batch
            .iter()
            .map(|t| (crate::agent::critic_value(&agent, &t.states[0]).unwrap() - t.reward).powi(2))
            .sum::<f64>()
            / 20.0;
        assert_abs_diff_eq!(l, expect, epsilon = 1e-14);
        assert_abs_diff_eq!(critic_loss_value(&agent.critic, &batch).unwrap(), expect, epsilon = 1e-14);

        let zero = AgentParams::zeros(4, 9, false);
        let zero_reward: Vec<Transition> = batch.iter().map(|t| Transition { reward: 0.0, ..t.clone() }).collect();
        assert_eq!(critic_loss_value(&zero.critic, &zero_reward).unwrap(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, layers, beta) in [(1u64, 1usize, 0.0), (2, 2, 0.0), (3, 1, 0.05)] {
            let mut rng = substream(seed, "gc");
            let agent = AgentParams::init(5, 7, layers > 1, &mut rng).unwrap();
            let batch = random_transitions(&agent, 6, layers, &mut rng).unwrap();
            let adv = compute_advantage(&batch, false);
            let (_, g) = policy_loss_and_grad(&agent.policy, &batch, &adv, 0.2, beta).unwrap();
            let num = finite_difference(&agent.policy, 1e-5, |p| policy_loss_value(p, &batch, &adv, 0.2, beta)).unwrap();
            let c = compare_gradients(&g, &num);
            assert!(c.max_rel_error < 1e-4, "policy {c:?}");
            let (_, g) = critic_loss_and_grad(&agent.critic, &batch).unwrap();
            let num = finite_difference(&agent.critic, 1e-5, |p| critic_loss_value(p, &batch)).unwrap();
            let c = compare_gradients(&g, &num);
            assert!(c.max_rel_error < 1e-4, "critic {c:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clipping_inactive_inside_band(lp in -3.0f64..0.0, delta in -0.18f64..0.18, a in -2.0f64..2.0) {
                let new = lp + (1.0 + delta).ln();
                let l = ppo_policy_loss(&[new], &[lp], &[a], 0.2).unwrap();
                prop_assert!((l.unclipped[0] - l.clipped[0]).abs() < 1e-12);
            }

            #[test]
            fn critic_loss_nonnegative(seed in any::<u64>()) {
                let mut rng = substream(seed, "cl");
                let agent = AgentParams::init(3, 5, false, &mut rng).unwrap();
                let batch = random_transitions(&agent, 4, 1, &mut rng).unwrap();
                prop_assert!(critic_loss_value(&agent.critic, &batch).unwrap() >= 0.0);
            }
        }
    }
}
