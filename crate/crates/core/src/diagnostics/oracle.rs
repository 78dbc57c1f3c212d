// SPDX-License-Identifier: MIT OR Apache-2.0

//! Brute-force steering oracle.

use crate::error::Result;
use crate::sae::SaeParams;
use crate::steering::{apply_steering, ActionVector};
use crate::toylm::{generate, Edit, GenerateOptions, Identity, Sample, Site, ToyLmParams};

/// Final answer when feature `feature` (or nothing) is amplified by `c` at
/// `layer` on every generated step.
pub fn steered_answer(
    lm: &ToyLmParams,
    sae: &SaeParams,
    sample: &Sample,
    layer: usize,
    c: f64,
    feature: Option<usize>,
    horizon: usize,
) -> Result<usize> {
    let opts = GenerateOptions::tokens(horizon);
    let trace = match feature {
        None => generate(lm, &sample.prompt, &[layer], &mut Identity, &opts)?,
        Some(j) => {
            let action = ActionVector::one_hot(j);
            let mut steer = |_: Site, x: &[f64]| -> Result<Edit> {
                Ok(Edit {
                    residual: Some(apply_steering(x, &action, c, sae)?),
                    action: Some(j),
                })
            };
            generate(lm, &sample.prompt, &[layer], &mut steer, &opts)?
        }
    };
    Ok(trace.final_token())
}

/// Every feature whose one-hot amplification at coefficient `c` turns an
/// incorrect greedy answer into the correct one. Costs `d_dict` generations.
///
/// For `horizon > 1` the same feature is applied at every generated step and
/// the last token is judged. Contexts already answered correctly have no
/// flipping features.
pub fn brute_force_flipping_features(
    lm: &ToyLmParams,
    sae: &SaeParams,
    sample: &Sample,
    layer: usize,
    c: f64,
    horizon: usize,
) -> Result<Vec<usize>> {
    if c == 0.0 {
        return Ok(Vec::new());
    }
    if steered_answer(lm, sae, sample, layer, c, None, horizon)? == sample.answer {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for j in 0..sae.d_dict() {
        if steered_answer(lm, sae, sample, layer, c, Some(j), horizon)? == sample.answer {
            out.push(j);
        }
    }
    Ok(out)
}
