// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic tasks with known steerable features.
//!
//! The residual space is split into named directions (answers, distractor,
//! per-class cue, blocker, query marker) plus a noise subspace. Prompts are a
//! handful of cue/filler/modifier tokens followed by a query token whose
//! embedding leans toward a distractor, so the unsteered model mostly answers
//! wrong. SAE decoder rows for the "answer" features point along answer
//! unembedding directions; amplifying the right one raises the correct
//! answer's logit. Context kinds:
//!
//! - `Plain`: baseline emits a distractor (invalid output).
//! - `LureWrong`: a lure token makes the baseline emit a wrong answer.
//! - `Easy`: a lure toward the correct answer; baseline is already right.
//! - `Blocked`: a blocker token pushes the distractor beyond reach of any
//!   single feature.
//!
//! Nothing is trusted analytically: after building, the coefficient is
//! calibrated exactly as a run would, and every context's flipping set is
//! enumerated. Coverage below the target triggers a rebuild from a derived seed.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{generate, GenerateOptions, Identity, Sample, ToyLmDims, ToyLmParams};
use crate::diagnostics::brute_force_flipping_features;
use crate::error::{Error, Result};
use crate::numkit::{dot, random_orthonormal, DenseMat};
use crate::rng::{derive_seed, substream, Rng};
use crate::sae::{Activation, SaeParams};
use crate::steering::{calibrate_coefficient, CalibrationMode, MostActive};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedTaskSpec {
    pub n_train: usize,
    pub n_heldout: usize,
    pub n_answers: usize,
    pub n_distractors: usize,
    pub vocab: usize,
    pub d: usize,
    pub d_mlp: usize,
    pub d_dict: usize,
    pub n_layers: usize,
    /// Generated tokens per rollout; the answer is read from the last one.
    pub horizon: usize,
    /// Layer whose residual the SAE is fitted to and coverage is verified at.
    pub hook_layer: usize,
    pub easy_fraction: f64,
    pub blocked_fraction: f64,
    pub min_coverage: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PlantedTaskSpec {
    fn default() -> Self {
        PlantedTaskSpec {
            n_train: 64,
            n_heldout: 64,
            n_answers: 2,
            n_distractors: 4,
            vocab: 64,
            d: 32,
            d_mlp: 64,
            d_dict: 128,
            n_layers: 2,
            horizon: 1,
            hook_layer: 2,
            easy_fraction: 0.125,
            blocked_fraction: 0.0625,
            min_coverage: 0.8,
            max_attempts: 8,
            seed: 42,
        }
    }
}

const CUES_PER_CLASS: usize = 6;
const PROMPT_SLOTS: usize = 5;

/// Fixed token-id layout of a planted vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub query: usize,
    pub answers: Vec<usize>,
    pub distractors: Vec<usize>,
    /// `cues[k]` signal class `k`.
    pub cues: Vec<Vec<usize>>,
    /// `lures[k]` lean toward answer `k`.
    pub lures: Vec<usize>,
    pub blocker: usize,
    pub fillers: Vec<usize>,
}

impl TokenLayout {
    fn new(spec: &PlantedTaskSpec) -> Result<Self> {
        let k = spec.n_answers;
        let mut next = 0usize;
        let mut take = |n: usize| {
            let r: Vec<usize> = (next..next + n).collect();
            next += n;
            r
        };
        let query = take(1)[0];
        let answers = take(k);
        let distractors = take(spec.n_distractors);
        let cues = (0..k).map(|_| take(CUES_PER_CLASS)).collect();
        let lures = take(k);
        let blocker = take(1)[0];
        let used = next;
        if used + 4 > spec.vocab {
            return Err(Error::Invalid(format!(
                "vocab {} too small for planted layout ({} special tokens + 4 fillers)",
                spec.vocab, used
            )));
        }
        Ok(TokenLayout {
            query,
            answers,
            distractors,
            cues,
            lures,
            blocker,
            fillers: (used..spec.vocab).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextKind {
    Plain,
    LureWrong,
    Easy,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureRole {
    /// Fires on class-`k` cues, decodes to answer `k`.
    Answer(usize),
    /// Never fires naturally, decodes to answer `k`.
    SilentAnswer(usize),
    Query,
    Distractor,
    Blocker,
    Noise,
}

/// Everything a run needs to know about a task beyond the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub answers: Vec<usize>,
    pub horizon: usize,
    pub hook_layer: usize,
    pub layout: Option<TokenLayout>,
    pub feature_roles: Vec<FeatureRole>,
    pub train_kinds: Vec<ContextKind>,
    pub heldout_kinds: Vec<ContextKind>,
    /// Coefficient calibrated during construction.
    pub coefficient: f64,
    pub train_coverage: f64,
    pub heldout_coverage: f64,
    pub train_baseline_accuracy: f64,
    pub heldout_baseline_accuracy: f64,
    pub attempts: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub spec: PlantedTaskSpec,
    pub lm: ToyLmParams,
    pub sae: SaeParams,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
    pub info: TaskInfo,
}

struct Directions {
    answers: Vec<Vec<f64>>,
    dist: Vec<f64>,
    classes: Vec<Vec<f64>>,
    block: Vec<f64>,
    query: Vec<f64>,
    noise: Vec<Vec<f64>>,
}

impl Directions {
    fn draw(d: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        let mut basis = random_orthonormal(d, d, rng)?;
        let answers: Vec<_> = basis.drain(..k).collect();
        let classes: Vec<_> = basis.drain(..k).collect();
        let dist = basis.remove(0);
        let block = basis.remove(0);
        let query = basis.remove(0);
        Ok(Directions {
            answers,
            dist,
            classes,
            block,
            query,
            noise: basis,
        })
    }

    fn noise_vec(&self, scale: f64, rng: &mut Rng) -> Vec<f64> {
        let n = self.noise.len() as f64;
        let mut v = vec![0.0; self.dist.len()];
        for dir in &self.noise {
            let w: f64 = rng.sample(rand_distr::StandardNormal);
            for (vi, di) in v.iter_mut().zip(dir) {
                *vi += scale * w / n.sqrt() * di;
            }
        }
        v
    }
}

fn combo(d: usize, parts: &[(f64, &[f64])]) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for (s, dir) in parts {
        for (vi, di) in v.iter_mut().zip(dir.iter()) {
            *vi += s * di;
        }
    }
    v
}

fn add(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn build_lm(spec: &PlantedTaskSpec, layout: &TokenLayout, dirs: &Directions, rng: &mut Rng) -> Result<ToyLmParams> {
    let d = spec.d;
    let dims = ToyLmDims {
        vocab: spec.vocab,
        d,
        d_mlp: spec.d_mlp,
        n_layers: spec.n_layers,
    };
    let mut lm = ToyLmParams::zeros(dims)?;

    let set_embed = |lm: &mut ToyLmParams, tok: usize, mut v: Vec<f64>, noise: f64, rng: &mut Rng| {
        add(&mut v, &dirs.noise_vec(noise, rng));
        lm.embed.row_mut(tok).copy_from_slice(&v);
    };
    set_embed(&mut lm, layout.query, combo(d, &[(1.2, &dirs.dist), (2.0, &dirs.query)]), 0.3, rng);
    for (k, &a) in layout.answers.iter().enumerate() {
        set_embed(&mut lm, a, combo(d, &[(3.0, &dirs.answers[k]), (2.0, &dirs.query)]), 0.3, rng);
    }
    for &t in &layout.distractors {
        set_embed(&mut lm, t, combo(d, &[(1.6, &dirs.dist), (2.0, &dirs.query)]), 0.3, rng);
    }
    for (k, cues) in layout.cues.iter().enumerate() {
        for &t in cues {
            set_embed(&mut lm, t, combo(d, &[(3.0, &dirs.classes[k])]), 1.0, rng);
        }
    }
    for (k, &t) in layout.lures.iter().enumerate() {
        set_embed(&mut lm, t, combo(d, &[(4.0, &dirs.answers[k])]), 0.5, rng);
    }
    set_embed(&mut lm, layout.blocker, combo(d, &[(30.0, &dirs.dist), (3.0, &dirs.block)]), 0.5, rng);
    for &t in &layout.fillers {
        set_embed(&mut lm, t, vec![0.0; d], 1.5, rng);
    }

    let attn_scale = 0.05 / (d as f64).sqrt();
    for b in &mut lm.blocks {
        b.w_q = DenseMat::gaussian(d, d, attn_scale, rng);
        b.w_k = DenseMat::gaussian(d, d, attn_scale, rng);
        b.w_v = DenseMat::identity(d);
        b.w_o = DenseMat::identity(d);
        b.w_in = DenseMat::gaussian(d, spec.d_mlp, 0.3 / (d as f64).sqrt(), rng);
        b.w_out = DenseMat::gaussian(spec.d_mlp, d, 0.3 / (spec.d_mlp as f64).sqrt(), rng);
    }

    let gain = 2.0;
    for (k, &a) in layout.answers.iter().enumerate() {
        lm.unembed.set_column(a, &combo(d, &[(gain, &dirs.answers[k])]));
    }
    for (i, &t) in layout.distractors.iter().enumerate() {
        lm.unembed.set_column(t, &combo(d, &[(gain, &dirs.dist)]));
        lm.unembed_bias[t] = -0.05 * i as f64;
    }
    let others = std::iter::once(layout.query)
        .chain(layout.cues.iter().flatten().copied())
        .chain(layout.lures.iter().copied())
        .chain([layout.blocker])
        .chain(layout.fillers.iter().copied());
    for t in others {
        lm.unembed.set_column(t, &dirs.noise_vec(0.3, rng));
        lm.unembed_bias[t] = -6.0;
    }
    lm.validate()?;
    Ok(lm)
}

fn build_contexts(
    n: usize,
    spec: &PlantedTaskSpec,
    layout: &TokenLayout,
    rng: &mut Rng,
) -> (Vec<Sample>, Vec<ContextKind>, Vec<usize>) {
    let n_easy = (spec.easy_fraction * n as f64).round() as usize;
    let n_blocked = (spec.blocked_fraction * n as f64).round() as usize;
    let n_normal = n.saturating_sub(n_easy + n_blocked);
    let mut kinds: Vec<ContextKind> = std::iter::repeat_n(ContextKind::Easy, n_easy)
        .chain(std::iter::repeat_n(ContextKind::Blocked, n_blocked))
        .chain((0..n_normal).map(|i| if i % 2 == 0 { ContextKind::Plain } else { ContextKind::LureWrong }))
        .take(n)
        .collect();
    kinds.shuffle(rng);

    let k = spec.n_answers;
    let mut samples = Vec::with_capacity(n);
    let mut cue_counts = Vec::with_capacity(n);
    for &kind in &kinds {
        let class = rng.random_range(0..k);
        let wrong = (class + rng.random_range(1..k)) % k;
        let two_cues = rng.random_bool(0.5);
        let filler = |rng: &mut Rng| layout.fillers[rng.random_range(0..layout.fillers.len())];
        let cue = |rng: &mut Rng| layout.cues[class][rng.random_range(0..CUES_PER_CLASS)];
        let mut slots = Vec::with_capacity(PROMPT_SLOTS);
        slots.push(cue(rng));
        slots.push(if two_cues { cue(rng) } else { filler(rng) });
        slots.push(match kind {
            ContextKind::Plain => filler(rng),
            ContextKind::LureWrong => layout.lures[wrong],
            ContextKind::Easy => layout.lures[class],
            ContextKind::Blocked => layout.blocker,
        });
        while slots.len() < PROMPT_SLOTS {
            slots.push(filler(rng));
        }
        slots.shuffle(rng);
        slots.push(layout.query);
        samples.push(Sample {
            prompt: slots,
            answer: layout.answers[class],
        });
        cue_counts.push(if two_cues { 2 } else { 1 });
    }
    (samples, kinds, cue_counts)
}

/// Residuals at the hook layer for the first generated step of every sample.
fn first_step_residuals(lm: &ToyLmParams, samples: &[Sample], layer: usize) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let t = generate(lm, &s.prompt, &[layer], &mut Identity, &GenerateOptions::tokens(1))?;
            Ok(t.steps[0].sites[0].residual.clone())
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn quantile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let i = ((xs.len() as f64 - 1.0) * q).round() as usize;
    xs[i.min(xs.len() - 1)]
}

fn build_sae(
    spec: &PlantedTaskSpec,
    dirs: &Directions,
    residuals: &[Vec<f64>],
    classes: &[usize],
    cue_counts: &[usize],
    rng: &mut Rng,
) -> Result<(SaeParams, Vec<FeatureRole>)> {
    let (d, n, k) = (spec.d, spec.d_dict, spec.n_answers);
    let n_special = 2 * k + 3;
    if n < n_special + 1 || n <= d {
        return Err(Error::Invalid(format!("d_dict {n} too small for planted SAE")));
    }
    let mut roles: Vec<FeatureRole> = (0..k)
        .map(FeatureRole::Answer)
        .chain((0..k).map(FeatureRole::SilentAnswer))
        .chain([FeatureRole::Query, FeatureRole::Distractor, FeatureRole::Blocker])
        .chain(std::iter::repeat_n(FeatureRole::Noise, n - n_special))
        .collect();
    roles.shuffle(rng);

    // Scale encoders from measured projections so activation levels land where
    // intended: query marker ≈ 3, class cue ≈ 3 between the one- and two-cue means.
    let proj = |dir: &[f64]| -> Vec<f64> { residuals.iter().map(|x| dot(x, dir)).collect() };
    let q_proj = mean(proj(&dirs.query).into_iter());
    let class_proj = |count: usize| {
        mean(
            residuals
                .iter()
                .zip(classes)
                .zip(cue_counts)
                .filter(|(_, c)| **c == count)
                .map(|((x, &y), _)| dot(x, &dirs.classes[y])),
        )
    };
    let (c1, c2) = (class_proj(1), class_proj(2));
    let dist_proj = mean(proj(&dirs.dist).into_iter());
    let kappa_q = 3.0 / q_proj.max(1e-6);
    let kappa_c = 3.0 / (0.5 * (c1 + c2)).max(1e-6);
    let kappa_d = 1.5 / dist_proj.abs().max(1e-6);

    let mut w_enc = DenseMat::zeros(d, n);
    let mut b_enc = vec![0.0; n];
    let mut w_dec = DenseMat::zeros(n, d);
    let mut thresholds = vec![0.0; n];
    for (j, role) in roles.iter().enumerate() {
        let (enc, dec, bias, thr): (Vec<f64>, Vec<f64>, f64, f64) = match *role {
            FeatureRole::Answer(c) => (combo(d, &[(kappa_c, &dirs.classes[c])]), dirs.answers[c].clone(), 0.0, 0.5),
            FeatureRole::SilentAnswer(c) => {
                let dec = unit(combo(d, &[(1.0, &dirs.answers[c])]).into_iter().zip(dirs.noise_vec(0.3, rng)).map(|(a, b)| a + b).collect());
                (vec![0.0; d], dec, -1.0, 0.0)
            }
            FeatureRole::Query => (combo(d, &[(kappa_q, &dirs.query)]), dirs.query.clone(), 0.0, 0.5),
            FeatureRole::Distractor => (combo(d, &[(kappa_d, &dirs.dist)]), dirs.dist.clone(), 0.0, 0.3),
            FeatureRole::Blocker => (combo(d, &[(1.0, &dirs.block)]), dirs.block.clone(), 0.0, 0.5),
            FeatureRole::Noise => {
                let dir = unit(dirs.noise_vec(1.0, rng));
                let p = proj(&dir);
                let rate = rng.random_range(0.05..0.4);
                let cut = quantile(p, 1.0 - rate);
                let scale = 1.0 / p_std(residuals, &dir).max(1e-6);
                let enc = dir.iter().map(|v| v * scale).collect();
                (enc, unit(dirs.noise_vec(1.0, rng)), -cut * scale, 0.05)
            }
        };
        w_enc.set_column(j, &enc);
        b_enc[j] = bias;
        w_dec.row_mut(j).copy_from_slice(&dec);
        thresholds[j] = thr;
    }
    let sae = SaeParams::new(w_enc, b_enc, w_dec, vec![0.0; d], Activation::JumpRelu, thresholds)?;
    Ok((sae, roles))
}

fn p_std(residuals: &[Vec<f64>], dir: &[f64]) -> f64 {
    let p: Vec<f64> = residuals.iter().map(|x| dot(x, dir)).collect();
    let m = mean(p.iter().copied());
    mean(p.iter().map(|v| (v - m) * (v - m))).sqrt()
}

struct Verified {
    coefficient: f64,
    train_coverage: f64,
    heldout_coverage: f64,
    train_acc: f64,
    heldout_acc: f64,
}

fn verify(
    spec: &PlantedTaskSpec,
    lm: &ToyLmParams,
    sae: &SaeParams,
    train: &[Sample],
    heldout: &[Sample],
) -> Result<Verified> {
    let opts = GenerateOptions::tokens(spec.horizon);
    let layer = spec.hook_layer;
    let baseline = |set: &[Sample]| -> Result<Vec<(bool, crate::toylm::GenerationTrace)>> {
        set.iter()
            .map(|s| {
                let t = generate(lm, &s.prompt, &[layer], &mut Identity, &opts)?;
                Ok((t.final_token() == s.answer, t))
            })
            .collect()
    };
    let base_train = baseline(train)?;
    let base_held = baseline(heldout)?;
    let correct: Vec<_> = base_train.iter().filter(|(ok, _)| *ok).map(|(_, t)| t.clone()).collect();
    let calib = calibrate_coefficient(&correct, layer, &mut MostActive, sae, CalibrationMode::Activation)?;
    let c = calib.coefficient;
    let coverage = |set: &[Sample]| -> Result<f64> {
        let mut hit = 0usize;
        for s in set {
            if !brute_force_flipping_features(lm, sae, s, layer, c, spec.horizon)?.is_empty() {
                hit += 1;
            }
        }
        Ok(hit as f64 / set.len() as f64)
    };
    let acc = |b: &[(bool, _)]| b.iter().filter(|(ok, _)| *ok).count() as f64 / b.len() as f64;
    Ok(Verified {
        coefficient: c,
        train_coverage: coverage(train)?,
        heldout_coverage: coverage(heldout)?,
        train_acc: acc(&base_train),
        heldout_acc: acc(&base_held),
    })
}

impl PlantedTaskSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_answers < 2 {
            v.push(format!("task needs at least 2 answer tokens, got {}", self.n_answers));
        }
        if self.n_distractors == 0 {
            v.push("task needs at least one distractor token".into());
        }
        if self.n_train == 0 || self.n_heldout == 0 {
            v.push("task needs nonempty train and held-out sets".into());
        }
        if self.n_layers < 2 {
            v.push(format!("toy LM needs at least 2 layers, got {}", self.n_layers));
        }
        if self.hook_layer == 0 || self.hook_layer > self.n_layers {
            v.push(format!("hook layer {} outside [1, {}]", self.hook_layer, self.n_layers));
        }
        if self.d_dict <= self.d {
            v.push(format!("d_dict ({}) must exceed d ({})", self.d_dict, self.d));
        }
        if self.d < 2 * self.n_answers + 3 + 4 {
            v.push(format!("d = {} too small for {} answers", self.d, self.n_answers));
        }
        if self.horizon == 0 {
            v.push("horizon must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&(self.easy_fraction + self.blocked_fraction)) || self.easy_fraction < 0.0 || self.blocked_fraction < 0.0 {
            v.push("easy_fraction + blocked_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.min_coverage) {
            v.push("min_coverage must lie in [0, 1]".into());
        }
        if self.max_attempts == 0 {
            v.push("max_attempts must be at least 1".into());
        }
        v
    }
}

/// Builds a planted task, retrying with derived seeds until every split has
/// flip coverage ≥ `min_coverage` and baseline accuracy < 0.5.
pub fn make_planted_task(spec: &PlantedTaskSpec) -> Result<PlantedTask> {
    let problems = spec.violations();
    if !problems.is_empty() {
        return Err(Error::ConfigInvalid(problems));
    }
    let layout = TokenLayout::new(spec)?;
    let mut best = 0.0f64;
    for attempt in 0..spec.max_attempts {
        let seed = if attempt == 0 { spec.seed } else { derive_seed(spec.seed, "planting-retry", attempt as u64) };
        let mut rng = substream(seed, "planting");
        let dirs = Directions::draw(spec.d, spec.n_answers, &mut rng)?;
        let lm = build_lm(spec, &layout, &dirs, &mut rng)?;
        let (train, train_kinds, train_cues) = build_contexts(spec.n_train, spec, &layout, &mut rng);
        let (heldout, heldout_kinds, _) = build_contexts(spec.n_heldout, spec, &layout, &mut rng);

        let residuals = first_step_residuals(&lm, &train, spec.hook_layer)?;
        let classes: Vec<usize> = train
            .iter()
            .map(|s| layout.answers.iter().position(|a| *a == s.answer).expect("answer in layout"))
            .collect();
        let (sae, roles) = build_sae(spec, &dirs, &residuals, &classes, &train_cues, &mut rng)?;

        let v = match verify(spec, &lm, &sae, &train, &heldout) {
            Ok(v) => v,
            Err(Error::CalibrationUnavailable(msg)) => {
                log::debug!("planting attempt {attempt}: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let coverage = v.train_coverage.min(v.heldout_coverage);
        log::debug!(
            "planting attempt {attempt}: c={:.3} coverage {:.3}/{:.3} baseline {:.3}/{:.3}",
            v.coefficient,
            v.train_coverage,
            v.heldout_coverage,
            v.train_acc,
            v.heldout_acc
        );
        if coverage >= spec.min_coverage && v.train_acc < 0.5 && v.heldout_acc < 0.5 {
            let info = TaskInfo {
                answers: layout.answers.clone(),
                horizon: spec.horizon,
                hook_layer: spec.hook_layer,
                layout: Some(layout),
                feature_roles: roles,
                train_kinds,
                heldout_kinds,
                coefficient: v.coefficient,
                train_coverage: v.train_coverage,
                heldout_coverage: v.heldout_coverage,
                train_baseline_accuracy: v.train_acc,
                heldout_baseline_accuracy: v.heldout_acc,
                attempts: attempt + 1,
                seed,
            };
            return Ok(PlantedTask {
                spec: spec.clone(),
                lm,
                sae,
                train,
                heldout,
                info,
            });
        }
        best = best.max(coverage);
    }
    Err(Error::ConstructionFailed {
        attempts: spec.max_attempts,
        best_coverage: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylm::generate;

    #[test]
    fn default_task_meets_its_guarantees() {
        let t = make_planted_task(&PlantedTaskSpec::default()).unwrap();
        let info = &t.info;
        assert_eq!((t.train.len(), t.heldout.len()), (64, 64));
        assert_eq!((t.sae.d(), t.sae.d_dict()), (32, 128));
        assert!(info.train_coverage >= 0.8 && info.heldout_coverage >= 0.8);
        assert!(info.train_baseline_accuracy < 0.5 && info.heldout_baseline_accuracy < 0.5);

        // Recount held-out coverage and baseline accuracy independently.
        let opts = GenerateOptions::tokens(info.horizon);
        let mut covered = 0;
        let mut correct = 0;
        for s in &t.heldout {
            let base = generate(&t.lm, &s.prompt, &[], &mut Identity, &opts).unwrap();
            correct += usize::from(base.final_token() == s.answer);
            let mut any = false;
            for j in 0..t.sae.d_dict() {
                let steered = crate::diagnostics::steered_answer(
                    &t.lm,
                    &t.sae,
                    s,
                    info.hook_layer,
                    info.coefficient,
                    Some(j),
                    info.horizon,
                )
                .unwrap();
                if base.final_token() != s.answer && steered == s.answer {
                    any = true;
                    break;
                }
            }
            covered += usize::from(any);
        }
        assert_eq!(covered as f64 / 64.0, info.heldout_coverage);
        assert_eq!(correct as f64 / 64.0, info.heldout_baseline_accuracy);
        assert!(t.heldout.iter().all(|s| info.answers.contains(&s.answer)));
    }

    #[test]
    fn construction_is_deterministic() {
        let spec = PlantedTaskSpec {
            n_train: 16,
            n_heldout: 16,
            min_coverage: 0.0,
            ..Default::default()
        };
        let a = make_planted_task(&spec).unwrap();
        let b = make_planted_task(&spec).unwrap();
        assert_eq!(a.lm.to_bytes(), b.lm.to_bytes());
        assert_eq!(a.sae.to_bytes(), b.sae.to_bytes());
        assert_eq!((a.train, a.heldout), (b.train, b.heldout));
        assert_eq!(a.info, b.info);
    }

    #[test]
    fn rejects_bad_specs() {
        let one_answer = PlantedTaskSpec {
            n_answers: 1,
            ..Default::default()
        };
        assert!(matches!(make_planted_task(&one_answer), Err(Error::ConfigInvalid(_))));
        let unreachable = PlantedTaskSpec {
            n_train: 8,
            n_heldout: 8,
            min_coverage: 1.01,
            max_attempts: 2,
            ..Default::default()
        };
        assert!(matches!(
            make_planted_task(&unreachable),
            Err(Error::ConstructionFailed { attempts: 2, .. }) | Err(Error::ConfigInvalid(_))
        ));
    }
}
