// SPDX-License-Identifier: MIT OR Apache-2.0

//! Frozen toy transformer with residual-stream hooks.
//!
//! Each block is single-head causal attention followed by a ReLU MLP, both
//! added to the residual stream (no normalisation). Hook layer `ℓ ∈ [1, L]`
//! addresses the residual *after* block `ℓ`. Generation is greedy
//! (temperature 0) with ties going to the lowest token id. Keys and values of
//! earlier positions are cached, so an edit made at step `t` persists in the
//! context that later steps attend to, and never touches positions `< t`.

mod planted;

pub use planted::{make_planted_task, ContextKind, PlantedTask, PlantedTaskSpec, TaskInfo};

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{argmax, axpy, dot, norm, DenseMat};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"CRLM";
const VERSION: u32 = 1;

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub w_q: DenseMat,
    pub w_k: DenseMat,
    pub w_v: DenseMat,
    pub w_o: DenseMat,
    /// d × d_mlp
    pub w_in: DenseMat,
    pub b_in: Vec<f64>,
    /// d_mlp × d
    pub w_out: DenseMat,
    pub b_out: Vec<f64>,
}

impl BlockParams {
    fn zeros(d: usize, d_mlp: usize) -> Self {
        BlockParams {
            w_q: DenseMat::zeros(d, d),
            w_k: DenseMat::zeros(d, d),
            w_v: DenseMat::zeros(d, d),
            w_o: DenseMat::zeros(d, d),
            w_in: DenseMat::zeros(d, d_mlp),
            b_in: vec![0.0; d_mlp],
            w_out: DenseMat::zeros(d_mlp, d),
            b_out: vec![0.0; d],
        }
    }

    fn random(d: usize, d_mlp: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        BlockParams {
            w_q: DenseMat::gaussian(d, d, s, rng),
            w_k: DenseMat::gaussian(d, d, s, rng),
            w_v: DenseMat::gaussian(d, d, s, rng),
            w_o: DenseMat::gaussian(d, d, s, rng),
            w_in: DenseMat::gaussian(d, d_mlp, s, rng),
            b_in: vec![0.0; d_mlp],
            w_out: DenseMat::gaussian(d_mlp, d, 1.0 / (d_mlp as f64).sqrt(), rng),
            b_out: vec![0.0; d],
        }
    }

    fn is_finite(&self) -> bool {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.w_in, &self.w_out]
            .iter()
            .all(|m| m.is_finite())
            && self.b_in.iter().chain(&self.b_out).all(|v| v.is_finite())
    }
}

/// Frozen toy language model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLmParams {
    vocab: usize,
    d: usize,
    d_mlp: usize,
    /// V × d
    pub embed: DenseMat,
    pub blocks: Vec<BlockParams>,
    /// d × V
    pub unembed: DenseMat,
    pub unembed_bias: Vec<f64>,
}

/// Sizes for [`ToyLmParams::random`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLmDims {
    pub vocab: usize,
    pub d: usize,
    pub d_mlp: usize,
    pub n_layers: usize,
}

impl Default for ToyLmDims {
    fn default() -> Self {
        ToyLmDims {
            vocab: 64,
            d: 32,
            d_mlp: 64,
            n_layers: 2,
        }
    }
}

impl ToyLmParams {
    pub fn zeros(dims: ToyLmDims) -> Result<Self> {
        let lm = ToyLmParams {
            vocab: dims.vocab,
            d: dims.d,
            d_mlp: dims.d_mlp,
            embed: DenseMat::zeros(dims.vocab, dims.d),
            blocks: (0..dims.n_layers).map(|_| BlockParams::zeros(dims.d, dims.d_mlp)).collect(),
            unembed: DenseMat::zeros(dims.d, dims.vocab),
            unembed_bias: vec![0.0; dims.vocab],
        };
        lm.validate()?;
        Ok(lm)
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`.
    pub fn random(dims: ToyLmDims, rng: &mut Rng) -> Result<Self> {
        let mut lm = ToyLmParams::zeros(dims)?;
        lm.embed = DenseMat::gaussian(dims.vocab, dims.d, 1.0, rng);
        for b in &mut lm.blocks {
            *b = BlockParams::random(dims.d, dims.d_mlp, rng);
        }
        lm.unembed = DenseMat::gaussian(dims.d, dims.vocab, 1.0 / (dims.d as f64).sqrt(), rng);
        Ok(lm)
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn d_mlp(&self) -> usize {
        self.d_mlp
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn dims(&self) -> ToyLmDims {
        ToyLmDims {
            vocab: self.vocab,
            d: self.d,
            d_mlp: self.d_mlp,
            n_layers: self.n_layers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers() < 2 {
            return Err(Error::Invalid(format!(
                "toy LM needs at least 2 layers, got {}",
                self.n_layers()
            )));
        }
        if self.vocab == 0 || self.d == 0 || self.d_mlp == 0 {
            return Err(Error::Invalid("toy LM dims must be positive".into()));
        }
        let (d, m, v) = (self.d, self.d_mlp, self.vocab);
        let shapes_ok = self.embed.shape() == (v, d)
            && self.unembed.shape() == (d, v)
            && self.unembed_bias.len() == v
            && self.blocks.iter().all(|b| {
                b.w_q.shape() == (d, d)
                    && b.w_k.shape() == (d, d)
                    && b.w_v.shape() == (d, d)
                    && b.w_o.shape() == (d, d)
                    && b.w_in.shape() == (d, m)
                    && b.b_in.len() == m
                    && b.w_out.shape() == (m, d)
                    && b.b_out.len() == d
            });
        if !shapes_ok {
            return Err(Error::shape("ToyLmParams", format!("V={v}, d={d}, d_mlp={m}"), "inconsistent tensors"));
        }
        let finite = self.embed.is_finite()
            && self.unembed.is_finite()
            && self.unembed_bias.iter().all(|x| x.is_finite())
            && self.blocks.iter().all(BlockParams::is_finite);
        if !finite {
            return Err(Error::Invalid("non-finite toy LM parameter".into()));
        }
        Ok(())
    }

    pub fn check_hook(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers() {
            return Err(Error::Invalid(format!(
                "hook layer {layer} outside [1, {}]",
                self.n_layers()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, residual: &[f64]) -> Result<Vec<f64>> {
        let mut l = self.unembed.vec_mul(residual)?;
        axpy(1.0, &self.unembed_bias, &mut l);
        Ok(l)
    }

    /// Model file: magic `CRLM`, version, V, d, d_mlp, L, then embedding,
    /// per-block tensors, unembedding and its bias, little-endian f64 row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        for dim in [self.vocab, self.d, self.d_mlp, self.n_layers()] {
            w.u32(dim as u32);
        }
        w.mat(&self.embed);
        for b in &self.blocks {
            for m in [&b.w_q, &b.w_k, &b.w_v, &b.w_o, &b.w_in] {
                w.mat(m);
            }
            w.f64s(&b.b_in);
            w.mat(&b.w_out);
            w.f64s(&b.b_out);
        }
        w.mat(&self.unembed);
        w.f64s(&self.unembed_bias);
        w.bytes().to_vec()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.header(MAGIC, VERSION)?;
        let (v, d, m, l) = (r.dim()?, r.dim()?, r.dim()?, r.dim()?);
        let embed = r.mat(v, d)?;
        let mut blocks = Vec::with_capacity(l);
        for _ in 0..l {
            blocks.push(BlockParams {
                w_q: r.mat(d, d)?,
                w_k: r.mat(d, d)?,
                w_v: r.mat(d, d)?,
                w_o: r.mat(d, d)?,
                w_in: r.mat(d, m)?,
                b_in: r.f64s(m)?,
                w_out: r.mat(m, d)?,
                b_out: r.f64s(d)?,
            });
        }
        let unembed = r.mat(d, v)?;
        let unembed_bias = r.f64s(v)?;
        r.finish()?;
        let lm = ToyLmParams {
            vocab: v,
            d,
            d_mlp: m,
            embed,
            blocks,
            unembed,
            unembed_bias,
        };
        lm.validate().map_err(|e| r.err(e.to_string()))?;
        Ok(lm)
    }
}

/// Incremental forward state: cached keys/values per layer.
pub struct Session<'a> {
    lm: &'a ToyLmParams,
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

/// Output of pushing one token through the model.
#[derive(Debug, Clone)]
pub struct PositionOutput {
    /// Post-block residuals, `residuals[ℓ - 1]` for layer ℓ (after any edit).
    pub residuals: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl<'a> Session<'a> {
    pub fn new(lm: &'a ToyLmParams) -> Self {
        let l = lm.n_layers();
        Session {
            lm,
            keys: vec![Vec::new(); l],
            values: vec![Vec::new(); l],
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Runs one position. `hook(layer, residual)` may edit the post-block
    /// residual of any layer before the next block reads it.
    pub fn push<H>(&mut self, token: usize, mut hook: H) -> Result<PositionOutput>
    where
        H: FnMut(usize, &mut Vec<f64>) -> Result<()>,
    {
        let lm = self.lm;
        if token >= lm.vocab {
            return Err(Error::Vocab {
                token,
                vocab: lm.vocab,
            });
        }
        let scale = 1.0 / (lm.d as f64).sqrt();
        let mut x = lm.embed.row(token).to_vec();
        let mut residuals = Vec::with_capacity(lm.n_layers());
        for (l, block) in lm.blocks.iter().enumerate() {
            let q = block.w_q.vec_mul(&x)?;
            self.keys[l].push(block.w_k.vec_mul(&x)?);
            self.values[l].push(block.w_v.vec_mul(&x)?);
            let scores: Vec<f64> = self.keys[l].iter().map(|k| dot(&q, k) * scale).collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut mixed = vec![0.0; lm.d];
            for (w, v) in weights.iter().zip(&self.values[l]) {
                axpy(w / total, v, &mut mixed);
            }
            axpy(1.0, &block.w_o.vec_mul(&mixed)?, &mut x);

            let mut h = block.w_in.vec_mul(&x)?;
            for (hi, b) in h.iter_mut().zip(&block.b_in) {
                *hi = (*hi + b).max(0.0);
            }
            axpy(1.0, &block.w_out.vec_mul(&h)?, &mut x);
            axpy(1.0, &block.b_out, &mut x);

            hook(l + 1, &mut x)?;
            if x.len() != lm.d {
                return Err(Error::shape("residual hook", lm.d, x.len()));
            }
            residuals.push(x.clone());
        }
        let logits = lm.logits(&x)?;
        Ok(PositionOutput { residuals, logits })
    }
}

/// Unhooked forward over a whole sequence; per-position outputs.
pub fn forward(lm: &ToyLmParams, tokens: &[usize]) -> Result<Vec<PositionOutput>> {
    let mut s = Session::new(lm);
    tokens.iter().map(|&t| s.push(t, |_, _| Ok(()))).collect()
}

/// Where an intervention is being asked to act.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    /// Generation step, 1-based. Prompt positions (when steered) report 0.
    pub step: usize,
    pub layer: usize,
}

/// What an intervention did at one site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Edit {
    /// Replacement residual; `None` leaves the residual untouched.
    pub residual: Option<Vec<f64>>,
    /// Feature index chosen, if any.
    pub action: Option<usize>,
}

impl Edit {
    pub fn none() -> Self {
        Edit::default()
    }
}

/// Per-site residual transform applied during generation.
pub trait Intervention {
    fn intervene(&mut self, site: Site, residual: &[f64]) -> Result<Edit>;

    /// Called once the step's token is chosen.
    fn observe_token(&mut self, _step: usize, _token: usize) {}
}

/// The no-op intervention.
pub struct Identity;

impl Intervention for Identity {
    fn intervene(&mut self, _site: Site, _residual: &[f64]) -> Result<Edit> {
        Ok(Edit::none())
    }
}

impl<F> Intervention for F
where
    F: FnMut(Site, &[f64]) -> Result<Edit>,
{
    fn intervene(&mut self, site: Site, residual: &[f64]) -> Result<Edit> {
        self(site, residual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteRecord {
    pub layer: usize,
    /// Residual before the edit.
    pub residual: Vec<f64>,
    /// Residual after the edit (equal to `residual` when untouched).
    pub steered: Vec<f64>,
    pub action: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub step: usize,
    pub sites: Vec<SiteRecord>,
    pub logits: Vec<f64>,
    pub token: usize,
}

impl TraceStep {
    pub fn site(&self, layer: usize) -> Option<&SiteRecord> {
        self.sites.iter().find(|s| s.layer == layer)
    }
}

/// One greedy rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub prompt: Vec<usize>,
    pub steps: Vec<TraceStep>,
    pub emitted: Vec<usize>,
}

impl GenerationTrace {
    pub fn final_token(&self) -> usize {
        *self.emitted.last().expect("at least one generated token")
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub max_tokens: usize,
    /// Also offer prompt positions (all but the last) to the intervention.
    pub steer_prompt: bool,
    /// Constrained decoding: greedy argmax over these tokens only.
    pub allowed_tokens: Option<Vec<usize>>,
}

impl GenerateOptions {
    pub fn tokens(max_tokens: usize) -> Self {
        GenerateOptions {
            max_tokens,
            ..Default::default()
        }
    }
}

/// Greedy choice over `logits`, optionally restricted to `allowed`.
pub fn greedy_token(logits: &[f64], allowed: Option<&[usize]>) -> Option<usize> {
    match allowed {
        None => argmax(logits),
        Some(set) => {
            let mut best: Option<(usize, f64)> = None;
            for &t in set {
                let v = *logits.get(t)?;
                match best {
                    Some((bt, bv)) if v < bv || (v == bv && t > bt) => {}
                    _ => best = Some((t, v)),
                }
            }
            best.map(|(t, _)| t)
        }
    }
}

/// Greedy generation with `intervention` applied at every hook layer of every
/// generated position.
pub fn generate(
    lm: &ToyLmParams,
    prompt: &[usize],
    hooks: &[usize],
    intervention: &mut dyn Intervention,
    opts: &GenerateOptions,
) -> Result<GenerationTrace> {
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    if opts.max_tokens == 0 {
        return Err(Error::Invalid("max_tokens must be at least 1".into()));
    }
    for &h in hooks {
        lm.check_hook(h)?;
    }
    if let Some(&bad) = prompt.iter().find(|&&t| t >= lm.vocab()) {
        return Err(Error::Vocab {
            token: bad,
            vocab: lm.vocab(),
        });
    }
    let mut session = Session::new(lm);
    for &tok in &prompt[..prompt.len() - 1] {
        if opts.steer_prompt {
            session.push(tok, |layer, x| {
                if hooks.contains(&layer) {
                    if let Some(r) = intervention.intervene(Site { step: 0, layer }, x)?.residual {
                        *x = r;
                    }
                }
                Ok(())
            })?;
        } else {
            session.push(tok, |_, _| Ok(()))?;
        }
    }

    let mut steps = Vec::with_capacity(opts.max_tokens);
    let mut emitted = Vec::with_capacity(opts.max_tokens);
    let mut current = *prompt.last().expect("nonempty");
    for step in 1..=opts.max_tokens {
        let mut sites = Vec::with_capacity(hooks.len());
        let out = session.push(current, |layer, x| {
            if hooks.contains(&layer) {
                let edit = intervention.intervene(Site { step, layer }, x)?;
                let residual = x.clone();
                if let Some(r) = edit.residual {
                    *x = r;
                }
                sites.push(SiteRecord {
                    layer,
                    residual,
                    steered: x.clone(),
                    action: edit.action,
                });
            }
            Ok(())
        })?;
        let token = greedy_token(&out.logits, opts.allowed_tokens.as_deref())
            .ok_or_else(|| Error::Invalid("no admissible token".into()))?;
        intervention.observe_token(step, token);
        steps.push(TraceStep {
            step,
            sites,
            logits: out.logits,
            token,
        });
        emitted.push(token);
        current = token;
    }
    Ok(GenerationTrace {
        prompt: prompt.to_vec(),
        steps,
        emitted,
    })
}

/// One task context: prompt tokens and the correct final answer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<usize>,
    pub answer: usize,
}

/// Line-delimited JSON, one `{"prompt": [...], "answer": n}` per line.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(s);
    }
    Ok(out)
}

/// Mean ℓ2 norm of the post-block residual of every layer, averaged over all
/// prompt positions of all samples.
pub fn residual_norm_profile(lm: &ToyLmParams, dataset: &[Sample]) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let mut sums = vec![0.0; lm.n_layers()];
    let mut count = 0usize;
    for s in dataset {
        for pos in forward(lm, &s.prompt)? {
            for (acc, r) in sums.iter_mut().zip(&pos.residuals) {
                *acc += norm(r);
            }
            count += 1;
        }
    }
    Ok(sums.into_iter().map(|s| s / count as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn model(seed: u64) -> ToyLmParams {
        let mut rng = substream(seed, "toylm-test");
        ToyLmParams::random(
            ToyLmDims {
                vocab: 16,
                d: 8,
                d_mlp: 12,
                n_layers: 3,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn identity_hook_matches_unhooked() {
        let lm = model(42);
        let prompt = [1, 5, 3];
        let a = generate(&lm, &prompt, &[], &mut Identity, &GenerateOptions::tokens(6)).unwrap();
        let b = generate(&lm, &prompt, &[2], &mut Identity, &GenerateOptions::tokens(6)).unwrap();
        assert_eq!(a.emitted, b.emitted);
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.logits, sb.logits);
            let site = sb.site(2).unwrap();
            assert_eq!(site.residual, site.steered);
        }
        let c = generate(&lm, &prompt, &[2], &mut Identity, &GenerateOptions::tokens(6)).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn emitted_token_is_greedy() {
        let lm = model(7);
        let t = generate(&lm, &[0, 2], &[1], &mut Identity, &GenerateOptions::tokens(5)).unwrap();
        for s in &t.steps {
            assert_eq!(Some(s.token), argmax(&s.logits));
        }
        assert_eq!(t.steps.iter().map(|s| s.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn hook_only_touches_later_positions() {
        let lm = model(3);
        let prompt = [4, 2, 9];
        let base = generate(&lm, &prompt, &[1, 2, 3], &mut Identity, &GenerateOptions::tokens(5)).unwrap();
        let mut bump = |site: Site, x: &[f64]| -> Result<Edit> {
            if site.step == 3 && site.layer == 1 {
                let mut y = x.to_vec();
                y[0] += 5.0;
                return Ok(Edit { residual: Some(y), action: Some(0) });
            }
            Ok(Edit::none())
        };
        let hit = generate(&lm, &prompt, &[1, 2, 3], &mut bump, &GenerateOptions::tokens(5)).unwrap();
        for t in 0..2 {
            assert_eq!(base.steps[t], hit.steps[t]);
        }
        assert_ne!(base.steps[2].sites[1].residual, hit.steps[2].sites[1].residual);
    }

    #[test]
    fn constrained_decoding_stays_in_set() {
        let lm = model(11);
        let opts = GenerateOptions {
            max_tokens: 4,
            allowed_tokens: Some(vec![3, 7]),
            ..Default::default()
        };
        let t = generate(&lm, &[1], &[], &mut Identity, &opts).unwrap();
        assert!(t.emitted.iter().all(|x| *x == 3 || *x == 7));
        assert_eq!(greedy_token(&[0.0, 1.0, 1.0], Some(&[2, 1])), Some(1));
    }

    #[test]
    fn input_validation() {
        let lm = model(1);
        let opts = GenerateOptions::tokens(2);
        assert!(matches!(
            generate(&lm, &[99], &[], &mut Identity, &opts),
            Err(Error::Vocab { token: 99, .. })
        ));
        assert!(generate(&lm, &[], &[], &mut Identity, &opts).is_err());
        assert!(generate(&lm, &[1], &[0], &mut Identity, &opts).is_err());
        assert!(generate(&lm, &[1], &[4], &mut Identity, &opts).is_err());
        assert!(generate(&lm, &[1], &[], &mut Identity, &GenerateOptions::tokens(0)).is_err());
        let one_layer = ToyLmDims {
            n_layers: 1,
            ..ToyLmDims::default()
        };
        assert!(ToyLmParams::zeros(one_layer).is_err());
    }

    #[test]
    fn norm_profile_matches_independent_loop() {
        let lm = model(42);
        let data = vec![
            Sample { prompt: vec![1, 2, 3], answer: 0 },
            Sample { prompt: vec![7, 7], answer: 1 },
        ];
        let profile = residual_norm_profile(&lm, &data).unwrap();
        let mut expect = vec![0.0; 3];
        let mut n = 0.0;
        for s in &data {
            for p in 0..s.prompt.len() {
                let out = forward(&lm, &s.prompt[..=p]).unwrap();
                let last = out.last().unwrap();
                for l in 0..3 {
                    expect[l] += last.residuals[l].iter().map(|v| v * v).sum::<f64>().sqrt();
                }
                n += 1.0;
            }
        }
        for l in 0..3 {
            assert!((profile[l] - expect[l] / n).abs() < 1e-12);
            assert!(profile[l] >= 0.0 && profile[l].is_finite());
        }
        let zero = ToyLmParams::zeros(ToyLmDims::default()).unwrap();
        assert!(residual_norm_profile(&zero, &data).unwrap().iter().all(|v| *v == 0.0));
        assert!(residual_norm_profile(&zero, &[]).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let lm = model(5);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.crlm");
        lm.save(&p).unwrap();
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"CRLM");
        assert_eq!(ToyLmParams::load(&p).unwrap(), lm);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(ToyLmParams::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let data = vec![Sample { prompt: vec![3, 1], answer: 2 }];
        write_dataset(&p, &data).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), data);
    }
}
