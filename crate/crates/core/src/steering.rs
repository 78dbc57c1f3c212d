// SPDX-License-Identifier: MIT OR Apache-2.0

//! The intervention: `x̃ = x + c · a · W_dec`, adaptive feature masking and
//! coefficient calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{argmax, axpy, norm};
use crate::sae::{FeatureActivations, SaeParams};
use crate::toylm::GenerationTrace;

/// Selected SAE features (binary over the dictionary). Empty means no steering.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActionVector {
    pub features: Vec<usize>,
}

impl ActionVector {
    pub fn one_hot(feature: usize) -> Self {
        ActionVector {
            features: vec![feature],
        }
    }

    pub fn empty() -> Self {
        ActionVector::default()
    }

    pub fn k(&self) -> usize {
        self.features.len()
    }

    /// Dense `{0,1}^{d_dict}` form.
    pub fn to_dense(&self, d_dict: usize) -> Result<Vec<f64>> {
        let mut a = vec![0.0; d_dict];
        for &j in &self.features {
            *a.get_mut(j).ok_or(Error::ActionRange { index: j, d_dict })? = 1.0;
        }
        Ok(a)
    }
}

/// `x + c · Σ_{j∈a} W_dec[j]`. Returns an untouched copy when `c == 0` or `a` is empty.
pub fn apply_steering(x: &[f64], action: &ActionVector, c: f64, sae: &SaeParams) -> Result<Vec<f64>> {
    if x.len() != sae.d() {
        return Err(Error::shape("apply_steering", sae.d(), x.len()));
    }
    if !c.is_finite() {
        return Err(Error::Invalid(format!("non-finite steering coefficient {c}")));
    }
    for &j in &action.features {
        if j >= sae.d_dict() {
            return Err(Error::ActionRange {
                index: j,
                d_dict: sae.d_dict(),
            });
        }
    }
    let mut out = x.to_vec();
    if c == 0.0 || action.features.is_empty() {
        return Ok(out);
    }
    for &j in &action.features {
        axpy(c, sae.w_dec.row(j), &mut out);
    }
    Ok(out)
}

/// Per-sample set of selectable features. Only ever grows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMask {
    bits: Vec<bool>,
    owner: usize,
    step: usize,
}

impl FeatureMask {
    pub fn full(d_dict: usize, owner: usize) -> Self {
        FeatureMask {
            bits: vec![true; d_dict],
            owner,
            step: 0,
        }
    }

    pub fn from_bits(bits: Vec<bool>, owner: usize) -> Result<Self> {
        if !bits.iter().any(|b| *b) {
            return Err(Error::InvalidMask);
        }
        Ok(FeatureMask { bits, owner, step: 0 })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.bits.get(i).copied().unwrap_or(false)
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_subset_of(&self, other: &FeatureMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    /// `mask ← mask ∨ [z > 0]`, step counter +1.
    pub fn update(&mut self, sample: usize, z: &FeatureActivations) -> Result<()> {
        if sample != self.owner {
            return Err(Error::MaskOwnership {
                owner: self.owner,
                got: sample,
            });
        }
        if z.values.len() != self.bits.len() {
            return Err(Error::shape("afm_update", self.bits.len(), z.values.len()));
        }
        for (b, v) in self.bits.iter_mut().zip(&z.values) {
            *b |= *v > 0.0;
        }
        self.step += 1;
        Ok(())
    }
}

/// Initial AFM mask shared by all samples of a run, plus how it was chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSeed {
    pub bits: Vec<bool>,
    /// Activation counts (`z_i > 0`) over the calibration residuals.
    pub frequencies: Vec<usize>,
    /// `M` exceeded the dictionary and was clamped.
    pub clamped: bool,
}

impl MaskSeed {
    pub fn for_sample(&self, sample: usize) -> FeatureMask {
        FeatureMask {
            bits: self.bits.clone(),
            owner: sample,
            step: 0,
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// The `m` features most often active (`z_i > 0`) at `layer` over the
/// calibration traces; ties go to the lowest index.
pub fn afm_init(traces: &[GenerationTrace], layer: usize, sae: &SaeParams, m: usize) -> Result<MaskSeed> {
    if traces.is_empty() {
        return Err(Error::Invalid("AFM initialisation needs at least one trace".into()));
    }
    if m == 0 {
        return Err(Error::Invalid("AFM seed-set size must be at least 1".into()));
    }
    let n = sae.d_dict();
    let clamped = m > n;
    let m = m.min(n);
    let mut frequencies = vec![0usize; n];
    for trace in traces {
        for step in &trace.steps {
            let site = step
                .site(layer)
                .ok_or_else(|| Error::Invalid(format!("trace has no residual for layer {layer}")))?;
            for i in sae.encode(&site.residual)?.active() {
                frequencies[i] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| frequencies[b].cmp(&frequencies[a]).then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in &order[..m] {
        bits[i] = true;
    }
    if clamped {
        log::warn!("AFM seed-set size clamped to dictionary size {n}");
    }
    Ok(MaskSeed {
        bits,
        frequencies,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Mean natural activation `z_{t,j*}` of the selected feature.
    #[default]
    Activation,
    /// Mean `‖a_t W_dec‖` of the selected action.
    DecoderNorm,
}

impl std::fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CalibrationMode::Activation => "activation",
            CalibrationMode::DecoderNorm => "decoder-norm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub coefficient: f64,
    pub mode: CalibrationMode,
    pub steps: usize,
}

/// Chooses the feature whose activation / decoder norm is averaged.
pub trait CalibrationSelector {
    fn select(&mut self, residual: &[f64], z: &FeatureActivations) -> Result<usize>;
}

/// Picks `argmax z`, ties lowest index.
pub struct MostActive;

impl CalibrationSelector for MostActive {
    fn select(&mut self, _residual: &[f64], z: &FeatureActivations) -> Result<usize> {
        argmax(&z.values).ok_or(Error::InvalidMask)
    }
}

impl<F> CalibrationSelector for F
where
    F: FnMut(&[f64], &FeatureActivations) -> Result<usize>,
{
    fn select(&mut self, residual: &[f64], z: &FeatureActivations) -> Result<usize> {
        self(residual, z)
    }
}

/// Averages the selected feature's activation (or decoder norm) over every
/// step of the correctly answered baseline traces.
pub fn calibrate_coefficient(
    correct_traces: &[GenerationTrace],
    layer: usize,
    selector: &mut dyn CalibrationSelector,
    sae: &SaeParams,
    mode: CalibrationMode,
) -> Result<Calibration> {
    if correct_traces.is_empty() {
        return Err(Error::CalibrationUnavailable(
            "no correctly answered baseline samples; supply a fixed coefficient".into(),
        ));
    }
    let mut total = 0.0;
    let mut steps = 0usize;
    for trace in correct_traces {
        for step in &trace.steps {
            let site = step
                .site(layer)
                .ok_or_else(|| Error::Invalid(format!("trace has no residual for layer {layer}")))?;
            let z = sae.encode(&site.residual)?;
            let j = selector.select(&site.residual, &z)?;
            if j >= sae.d_dict() {
                return Err(Error::ActionRange {
                    index: j,
                    d_dict: sae.d_dict(),
                });
            }
            total += match mode {
                CalibrationMode::Activation => z.values[j],
                CalibrationMode::DecoderNorm => norm(sae.w_dec.row(j)),
            };
            steps += 1;
        }
    }
    if steps == 0 {
        return Err(Error::CalibrationUnavailable("correct traces contain no steps".into()));
    }
    Ok(Calibration {
        coefficient: total / steps as f64,
        mode,
        steps,
    })
}

/// Steering coefficient setting: a fixed positive number or `"calibrated"`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "CoefficientRepr", into = "CoefficientRepr")]
pub enum Coefficient {
    Fixed(f64),
    #[default]
    Calibrated,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CoefficientRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<CoefficientRepr> for Coefficient {
    type Error = String;

    fn try_from(r: CoefficientRepr) -> std::result::Result<Self, String> {
        match r {
            CoefficientRepr::Number(v) => Ok(Coefficient::Fixed(v)),
            CoefficientRepr::Word(w) if w == "calibrated" => Ok(Coefficient::Calibrated),
            CoefficientRepr::Word(w) => Err(format!("coefficient must be a number or \"calibrated\", got {w:?}")),
        }
    }
}

impl From<Coefficient> for CoefficientRepr {
    fn from(c: Coefficient) -> Self {
        match c {
            Coefficient::Fixed(v) => CoefficientRepr::Number(v),
            Coefficient::Calibrated => CoefficientRepr::Word("calibrated".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    /// Hook layers; one for CRL-Token, two or more for CRL-Layer.
    pub layers: Vec<usize>,
    pub coefficient: Coefficient,
    pub calibration_mode: CalibrationMode,
    /// Recalibrate from the current policy every N training steps (0 = never).
    pub recalibrate_every: usize,
    pub k: usize,
    pub afm: bool,
    pub afm_seed_size: usize,
    pub steer_prompt: bool,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            layers: vec![2],
            coefficient: Coefficient::Calibrated,
            calibration_mode: CalibrationMode::Activation,
            recalibrate_every: 0,
            k: 1,
            afm: true,
            afm_seed_size: 16,
            steer_prompt: false,
        }
    }
}

impl SteeringConfig {
    /// Semantic problems, all of them.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.layers.is_empty() {
            v.push("steering.layers must name at least one layer".into());
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            v.push("steering.layers contains duplicates".into());
        }
        if let Coefficient::Fixed(c) = self.coefficient {
            if !(c >= 0.0) || !c.is_finite() {
                v.push(format!("steering.coefficient must be finite and >= 0, got {c}"));
            }
        }
        if self.k != 1 {
            v.push(format!("steering.k must be 1, got {}", self.k));
        }
        if self.afm_seed_size == 0 {
            v.push("steering.afm_seed_size must be >= 1".into());
        }
        v
    }
}
