// SPDX-License-Identifier: MIT OR Apache-2.0

//! Control reinforcement learning over sparse-autoencoder features.
//!
//! A PPO actor-critic picks one SAE feature per generated token, the feature's
//! decoder row is added to the residual stream of a frozen toy transformer, and
//! the terminal answer is scored with a binary reward. Everything needed to
//! audit that loop lives here as well: intervention logs, outcome categories,
//! critic trajectories, branch points, impact/diversity metrics and a
//! brute-force steering oracle that defines which features *can* flip an
//! answer.
//!
//! Module map:
//!
//! - [`numkit`]: dense vectors/matrices, tanh MLP with analytic backward, Adam.
//! - [`toylm`]: frozen toy transformer, residual hooks, planted tasks.
//! - [`sae`]: sparse autoencoder encode/decode/loss and weight files.
//! - [`steering`]: the additive intervention, adaptive feature masking,
//!   coefficient calibration.
//! - [`agent`]: policy/critic networks and action selection.
//! - [`ppo`]: rollouts, advantages, clipped surrogate and the training loop.
//! - [`diagnostics`]: oracle, baselines, sweeps and analysis reports.
//! - [`cli`]: run configuration, manifests and subcommands.

pub mod agent;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod numkit;
pub mod ppo;
pub mod rng;
pub mod sae;
pub mod steering;
pub mod toylm;

mod binio;

pub use error::{Error, Result};
