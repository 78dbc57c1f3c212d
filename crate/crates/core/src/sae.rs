// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over residual-stream activations.
//!
//! ```text
//! encode:  z = act(x · W_enc + b_enc)        act ∈ {ReLU, JumpReLU(θ)}
//! decode:  x̂ = z · W_dec + b_dec
//! loss:    ‖x − x̂‖² + λ · ‖z‖₁
//! ```
//!
//! Weights are planted or loaded, never trained here. The loss exists to sanity
//! check loaded weights against sample activations.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{axpy, DenseMat};

const MAGIC: &[u8; 4] = b"CRLS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    JumpRelu,
}

impl Activation {
    fn to_byte(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::JumpRelu => 1,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Activation::Relu),
            1 => Some(Activation::JumpRelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    /// d × d_dict
    pub w_enc: DenseMat,
    pub b_enc: Vec<f64>,
    /// d_dict × d
    pub w_dec: DenseMat,
    pub b_dec: Vec<f64>,
    pub activation: Activation,
    /// Per-feature JumpReLU thresholds; ignored for ReLU.
    pub thresholds: Vec<f64>,
}

/// Feature activations `z` for one residual vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureActivations {
    pub values: Vec<f64>,
    pub step: usize,
    pub layer: usize,
}

impl FeatureActivations {
    pub fn new(values: Vec<f64>) -> Self {
        FeatureActivations {
            values,
            step: 0,
            layer: 0,
        }
    }

    pub fn at(mut self, step: usize, layer: usize) -> Self {
        self.step = step;
        self.layer = layer;
        self
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
    }
}

/// Loss terms for one input vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub sparsity: f64,
}

impl SaeParams {
    pub fn new(
        w_enc: DenseMat,
        b_enc: Vec<f64>,
        w_dec: DenseMat,
        b_dec: Vec<f64>,
        activation: Activation,
        thresholds: Vec<f64>,
    ) -> Result<Self> {
        let sae = SaeParams {
            w_enc,
            b_enc,
            w_dec,
            b_dec,
            activation,
            thresholds,
        };
        sae.validate()?;
        Ok(sae)
    }

    pub fn d(&self) -> usize {
        self.w_enc.rows()
    }

    pub fn d_dict(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = self.w_enc.shape();
        if n <= d {
            return Err(Error::Invalid(format!(
                "SAE dictionary ({n}) must be larger than the residual dim ({d})"
            )));
        }
        if self.b_enc.len() != n
            || self.w_dec.shape() != (n, d)
            || self.b_dec.len() != d
            || self.thresholds.len() != n
        {
            return Err(Error::shape(
                "SaeParams",
                format!("d={d}, d_dict={n}"),
                format!(
                    "b_enc {}, w_dec {:?}, b_dec {}, thresholds {}",
                    self.b_enc.len(),
                    self.w_dec.shape(),
                    self.b_dec.len(),
                    self.thresholds.len()
                ),
            ));
        }
        if self.thresholds.iter().any(|t| *t < 0.0) {
            return Err(Error::Invalid("negative JumpReLU threshold".into()));
        }
        let finite = self.w_enc.is_finite()
            && self.w_dec.is_finite()
            && self.b_enc.iter().chain(&self.b_dec).chain(&self.thresholds).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Invalid("non-finite SAE parameter".into()));
        }
        Ok(())
    }

    /// Pre-activations `x · W_enc + b_enc`.
    pub fn pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d() {
            return Err(Error::shape("sae encode", self.d(), x.len()));
        }
        let mut v = self.w_enc.vec_mul(x)?;
        axpy(1.0, &self.b_enc, &mut v);
        Ok(v)
    }

    pub fn encode(&self, x: &[f64]) -> Result<FeatureActivations> {
        let pre = self.pre_activations(x)?;
        let values = match self.activation {
            Activation::Relu => pre.into_iter().map(|v| v.max(0.0)).collect(),
            Activation::JumpRelu => pre
                .into_iter()
                .zip(&self.thresholds)
                .map(|(v, t)| if v > *t && v > 0.0 { v } else { 0.0 })
                .collect(),
        };
        Ok(FeatureActivations::new(values))
    }

    pub fn decode(&self, z: &FeatureActivations) -> Result<Vec<f64>> {
        if z.values.len() != self.d_dict() {
            return Err(Error::shape("sae decode", self.d_dict(), z.values.len()));
        }
        let mut x = self.w_dec.vec_mul(&z.values)?;
        axpy(1.0, &self.b_dec, &mut x);
        Ok(x)
    }

    pub fn loss(&self, x: &[f64], lambda: f64) -> Result<SaeLoss> {
        if !(lambda >= 0.0) {
            return Err(Error::Invalid(format!("sparsity weight must be >= 0, got {lambda}")));
        }
        let z = self.encode(x)?;
        let x_hat = self.decode(&z)?;
        let reconstruction: f64 = x.iter().zip(&x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
        let sparsity = lambda * z.values.iter().map(|v| v.abs()).sum::<f64>();
        Ok(SaeLoss {
            total: reconstruction + sparsity,
            reconstruction,
            sparsity,
        })
    }

    /// Weight file: magic `CRLS`, version, d, d_dict, activation byte, then
    /// W_enc, b_enc, W_dec, b_dec, thresholds as little-endian f64 row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.d() as u32);
        w.u32(self.d_dict() as u32);
        w.u8(self.activation.to_byte());
        w.mat(&self.w_enc);
        w.f64s(&self.b_enc);
        w.mat(&self.w_dec);
        w.f64s(&self.b_dec);
        w.f64s(&self.thresholds);
        w.bytes().to_vec()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = Reader::open(path)?;
        r.header(MAGIC, VERSION)?;
        let d = r.dim()?;
        let n = r.dim()?;
        let kind = r.u8()?;
        let activation =
            Activation::from_byte(kind).ok_or_else(|| r.err(format!("unknown activation {kind}")))?;
        let w_enc = r.mat(d, n)?;
        let b_enc = r.f64s(n)?;
        let w_dec = r.mat(n, d)?;
        let b_dec = r.f64s(d)?;
        let thresholds = r.f64s(n)?;
        r.finish()?;
        SaeParams::new(w_enc, b_enc, w_dec, b_dec, activation, thresholds).map_err(|e| r.err(e.to_string()))
    }
}

/// Optional human-readable feature labels, one `index<TAB>text` per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureLabels(pub BTreeMap<usize, String>);

impl FeatureLabels {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (idx, label) = line.split_once('\t').ok_or_else(|| Error::ConfigParse {
                line: n + 1,
                message: "expected `index<TAB>label`".into(),
            })?;
            let idx = idx.trim().parse::<usize>().map_err(|e| Error::ConfigParse {
                line: n + 1,
                message: format!("bad feature index: {e}"),
            })?;
            map.insert(idx, label.to_string());
        }
        Ok(FeatureLabels(map))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FeatureLabels::parse(&text)
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.0.get(&index).map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    fn random_sae(activation: Activation, seed: u64) -> SaeParams {
        let mut rng = substream(seed, "sae-test");
        let (d, n) = (4, 9);
        SaeParams::new(
            DenseMat::gaussian(d, n, 0.7, &mut rng),
            DenseMat::gaussian(1, n, 0.2, &mut rng).as_slice().to_vec(),
            DenseMat::gaussian(n, d, 0.5, &mut rng),
            DenseMat::gaussian(1, d, 0.1, &mut rng).as_slice().to_vec(),
            activation,
            vec![0.1; n],
        )
        .unwrap()
    }

    fn zero_sae(d: usize, n: usize) -> SaeParams {
        SaeParams::new(
            DenseMat::zeros(d, n),
            vec![0.0; n],
            DenseMat::zeros(n, d),
            vec![0.0; d],
            Activation::JumpRelu,
            vec![0.0; n],
        )
        .unwrap()
    }

    #[test]
    fn zero_input_encodes_to_zero() {
        let sae = random_sae(Activation::Relu, 1);
        let sae = SaeParams {
            b_enc: vec![0.0; 9],
            ..sae
        };
        assert!(sae.encode(&[0.0; 4]).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn jumprelu_threshold() {
        let mut sae = zero_sae(2, 3);
        sae.thresholds = vec![0.5; 3];
        sae.b_enc = vec![0.4, 0.6, 0.5];
        let z = sae.encode(&[0.0, 0.0]).unwrap();
        assert_eq!(z.values, vec![0.0, 0.6, 0.0]);
    }

    #[test]
    fn encode_decode_match_recomputation() {
        for act in [Activation::Relu, Activation::JumpRelu] {
            let sae = random_sae(act, 7);
            let x = [0.3, -1.2, 0.8, 0.05];
            let z = sae.encode(&x).unwrap();
            for j in 0..sae.d_dict() {
                let mut pre = sae.b_enc[j];
                for i in 0..4 {
                    pre += x[i] * sae.w_enc[(i, j)];
                }
                let expect = match act {
                    Activation::Relu => pre.max(0.0),
                    Activation::JumpRelu => {
                        if pre > sae.thresholds[j] {
                            pre
                        } else {
                            0.0
                        }
                    }
                };
                assert_abs_diff_eq!(z.values[j], expect, epsilon = 1e-14);
            }
            let x_hat = sae.decode(&z).unwrap();
            for i in 0..4 {
                let mut acc = sae.b_dec[i];
                for j in 0..sae.d_dict() {
                    acc += z.values[j] * sae.w_dec[(j, i)];
                }
                assert_abs_diff_eq!(x_hat[i], acc, epsilon = 1e-14);
            }
            let loss = sae.loss(&x, 0.3).unwrap();
            let rec: f64 = x.iter().zip(&x_hat).map(|(a, b)| (a - b).powi(2)).sum();
            let l1: f64 = z.values.iter().sum();
            assert_abs_diff_eq!(loss.reconstruction, rec, epsilon = 1e-14);
            assert_abs_diff_eq!(loss.sparsity, 0.3 * l1, epsilon = 1e-14);
            assert_abs_diff_eq!(loss.total, rec + 0.3 * l1, epsilon = 1e-14);
        }
    }

    #[test]
    fn decode_edge_cases() {
        let sae = random_sae(Activation::JumpRelu, 3);
        let zero = FeatureActivations::new(vec![0.0; 9]);
        assert_eq!(sae.decode(&zero).unwrap(), sae.b_dec);
        let sae = SaeParams {
            b_dec: vec![0.0; 4],
            ..sae
        };
        let mut one_hot = vec![0.0; 9];
        one_hot[5] = 2.5;
        let x = sae.decode(&FeatureActivations::new(one_hot)).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(x[i], 2.5 * sae.w_dec[(5, i)], epsilon = 1e-15);
        }
    }

    #[test]
    fn loss_edge_cases() {
        let sae = zero_sae(3, 5);
        let l = sae.loss(&[0.0; 3], 1.0).unwrap();
        assert_eq!((l.total, l.reconstruction, l.sparsity), (0.0, 0.0, 0.0));
        let sae = random_sae(Activation::Relu, 11);
        let l = sae.loss(&[1.0, 0.5, -0.5, 2.0], 0.0).unwrap();
        assert_eq!(l.total, l.reconstruction);
        assert!(sae.loss(&[0.0; 4], -1.0).is_err());
    }

    #[test]
    fn dimension_errors() {
        let sae = random_sae(Activation::Relu, 2);
        assert!(matches!(sae.encode(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(
            sae.decode(&FeatureActivations::new(vec![0.0; 3])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn rejects_undercomplete_dictionary() {
        let r = SaeParams::new(
            DenseMat::zeros(4, 4),
            vec![0.0; 4],
            DenseMat::zeros(4, 4),
            vec![0.0; 4],
            Activation::Relu,
            vec![0.0; 4],
        );
        assert!(r.is_err());
    }

    #[test]
    fn weight_file_round_trip() {
        let sae = random_sae(Activation::JumpRelu, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sae.crls");
        sae.save(&path).unwrap();
        assert_eq!(&std::fs::read(&path).unwrap()[..4], b"CRLS");
        assert_eq!(SaeParams::load(&path).unwrap(), sae);
        std::fs::write(&path, b"CRLMxxxx").unwrap();
        assert!(matches!(SaeParams::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn labels_parse() {
        let labels = FeatureLabels::parse("3\tanswer B\n# comment\n10\tquery marker\n").unwrap();
        assert_eq!(labels.get(3), Some("answer B"));
        assert_eq!(labels.get(4), None);
        assert!(FeatureLabels::parse("x\ty").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn activations_nonnegative_and_decode_affine(
                x in prop::collection::vec(-3.0f64..3.0, 4),
                z1 in prop::collection::vec(0.0f64..2.0, 9),
                z2 in prop::collection::vec(0.0f64..2.0, 9),
                a in -2.0f64..2.0, b in -2.0f64..2.0,
                l1 in 0.0f64..1.0, dl in 0.0f64..1.0,
            ) {
                let sae = random_sae(Activation::JumpRelu, 13);
                let z = sae.encode(&x).unwrap();
                for (v, t) in z.values.iter().zip(&sae.thresholds) {
                    prop_assert!(*v == 0.0 || *v > *t);
                }
                let relu = SaeParams { activation: Activation::Relu, ..sae.clone() };
                prop_assert!(relu.encode(&x).unwrap().values.iter().all(|v| *v >= 0.0));

                let mix: Vec<f64> = z1.iter().zip(&z2).map(|(p, q)| a * p + b * q).collect();
                let dm = sae.decode(&FeatureActivations::new(mix)).unwrap();
                let d1 = sae.decode(&FeatureActivations::new(z1)).unwrap();
                let d2 = sae.decode(&FeatureActivations::new(z2)).unwrap();
                for i in 0..4 {
                    let lhs = dm[i] - sae.b_dec[i];
                    let rhs = a * (d1[i] - sae.b_dec[i]) + b * (d2[i] - sae.b_dec[i]);
                    prop_assert!((lhs - rhs).abs() < 1e-10);
                }

                let lo = sae.loss(&x, l1).unwrap();
                let hi = sae.loss(&x, l1 + dl).unwrap();
                prop_assert!(lo.total >= 0.0);
                prop_assert!(hi.total >= lo.total);
            }
        }
    }
}
