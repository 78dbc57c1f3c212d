// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small dense linear algebra and the tanh MLP used by the policy and critic.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Matrices are row-major [`DenseMat`].
//! The MLP keeps its own analytic backward pass; there is no general autodiff.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMat::from_vec",
                format!("{} elements", rows * cols),
                data.len(),
            ));
        }
        Ok(DenseMat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("DenseMat::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Entries drawn from `uniform(-bound, bound)`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        DenseMat { rows, cols, data }
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std * z
            })
            .collect::<Vec<f64>>();
        DenseMat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self.data[i * self.cols + j] = *v;
        }
    }

    /// `xᵀ · self`, i.e. `y_j = Σ_i x_i M[i][j]`.
    pub fn vec_mul(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::shape("vec_mul", self.rows, x.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += xi * m;
            }
        }
        Ok(out)
    }

    /// `self · y`, i.e. `out_i = Σ_j M[i][j] y_j`.
    pub fn mul_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.cols {
            return Err(Error::shape("mul_vec", self.cols, y.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), y)).collect())
    }

    pub fn transpose(&self) -> DenseMat {
        let mut t = DenseMat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for DenseMat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Index of the largest entry; ties go to the lowest index. NaN entries never win.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `count` orthonormal vectors of length `dim` (Gram-Schmidt on Gaussian draws).
pub fn random_orthonormal(count: usize, dim: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    if count > dim {
        return Err(Error::Invalid(format!(
            "cannot draw {count} orthonormal vectors in dimension {dim}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let p = dot(&v, b);
            axpy(-p, b, &mut v);
        }
        let n = norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Ok(basis)
}

/// Probabilities of `logits` restricted to `mask`.
///
/// Masked-out logits are excluded before exponentiation, so they get exactly
/// zero mass. The maximum unmasked logit is subtracted for stability.
pub fn softmax_masked(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::shape("softmax_masked", logits.len(), mask.len()));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidMask);
    }
    if !max.is_finite() {
        return Err(Error::Divergence(format!("non-finite logit {max}")));
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Log-probability of entry `index` under [`softmax_masked`], computed as
/// `l_j - max - ln Σ exp(l_i - max)` to stay accurate for tiny probabilities.
pub fn log_softmax_masked_at(logits: &[f64], mask: &[bool], index: usize) -> Result<f64> {
    if logits.len() != mask.len() {
        return Err(Error::shape("log_softmax_masked_at", logits.len(), mask.len()));
    }
    if index >= mask.len() || !mask[index] {
        return Ok(f64::NEG_INFINITY);
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| (l - max).exp())
        .sum();
    Ok(logits[index] - max - sum.ln())
}

/// Two-layer MLP: `W2ᵀ · tanh(W1ᵀ x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: DenseMat,
    pub b1: Vec<f64>,
    pub w2: DenseMat,
    pub b2: Vec<f64>,
}

/// Hidden activations saved by [`MlpParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        MlpParams {
            w1: DenseMat::zeros(input, hidden),
            b1: vec![0.0; hidden],
            w2: DenseMat::zeros(hidden, output),
            b2: vec![0.0; output],
        }
    }

    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` for every weight and bias.
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(Error::Invalid(format!(
                "MLP dims must be positive, got {input}x{hidden}x{output}"
            )));
        }
        let bound1 = 1.0 / (input as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let w1 = DenseMat::uniform(input, hidden, bound1, rng);
        let b1 = (0..hidden).map(|_| rng.random_range(-bound1..bound1)).collect();
        let w2 = DenseMat::uniform(hidden, output, bound2, rng);
        let b2 = (0..output).map(|_| rng.random_range(-bound2..bound2)).collect();
        Ok(MlpParams { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams::zeros(self.input_dim(), self.hidden_dim(), self.output_dim())
    }

    pub fn num_params(&self) -> usize {
        self.w1.as_slice().len() + self.b1.len() + self.w2.as_slice().len() + self.b2.len()
    }

    /// All parameters in a fixed order: W1, b1, W2, b2.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1
            .as_slice()
            .iter()
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .as_mut_slice()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.as_mut_slice().iter_mut())
            .chain(self.b2.iter_mut())
    }

    /// Mutable access to parameter `k` in [`MlpParams::iter`] order.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        let n1 = self.w1.as_slice().len();
        if k < n1 {
            return &mut self.w1.as_mut_slice()[k];
        }
        k -= n1;
        if k < self.b1.len() {
            return &mut self.b1[k];
        }
        k -= self.b1.len();
        let n2 = self.w2.as_slice().len();
        if k < n2 {
            return &mut self.w2.as_mut_slice()[k];
        }
        &mut self.b2[k - n2]
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.w1.shape() == other.w1.shape()
            && self.b1.len() == other.b1.len()
            && self.w2.shape() == other.w2.shape()
            && self.b2.len() == other.b2.len()
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &MlpParams) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape("MlpParams::add_scaled", "matching shapes", "different"));
        }
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("mlp_forward", self.input_dim(), x.len()));
        }
        let mut hidden_pre = self.w1.vec_mul(x)?;
        axpy(1.0, &self.b1, &mut hidden_pre);
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.tanh()).collect();
        let mut out = self.w2.vec_mul(&hidden)?;
        axpy(1.0, &self.b2, &mut out);
        Ok((
            out,
            MlpCache {
                input: x.to_vec(),
                hidden_pre,
                hidden,
            },
        ))
    }

    /// Gradients of `output · grad_output` w.r.t. parameters and input.
    pub fn backward(&self, cache: &MlpCache, grad_output: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        if grad_output.len() != self.output_dim() {
            return Err(Error::shape("mlp_backward", self.output_dim(), grad_output.len()));
        }
        if cache.input.len() != self.input_dim() || cache.hidden.len() != self.hidden_dim() {
            return Err(Error::shape(
                "mlp_backward",
                format!("cache for {}x{}", self.input_dim(), self.hidden_dim()),
                format!("{}x{}", cache.input.len(), cache.hidden.len()),
            ));
        }
        let mut grads = self.zeros_like();
        for (j, &a) in cache.hidden.iter().enumerate() {
            axpy(a, grad_output, grads.w2.row_mut(j));
        }
        grads.b2.copy_from_slice(grad_output);

        let grad_hidden = self.w2.mul_vec(grad_output)?;
        let grad_pre: Vec<f64> = grad_hidden
            .iter()
            .zip(&cache.hidden)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        for (i, &xi) in cache.input.iter().enumerate() {
            axpy(xi, &grad_pre, grads.w1.row_mut(i));
        }
        grads.b1.copy_from_slice(&grad_pre);
        let grad_input = self.w1.mul_vec(&grad_pre)?;
        Ok((grads, grad_input))
    }
}

/// Adam optimizer state for one [`MlpParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        let n = params.num_params();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update, applied in place.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<()> {
        if !params.same_shape(grads) || self.m.len() != params.num_params() {
            return Err(Error::shape("adam_step", params.num_params(), grads.num_params()));
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!("non-finite gradient {bad}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Result of comparing an analytic gradient against central finite differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

/// Relative error with an absolute floor on the denominator so that
/// near-zero gradients compare on absolute terms.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `loss` over every parameter of `params`.
pub fn finite_difference<F>(params: &MlpParams, h: f64, mut loss: F) -> Result<MlpParams>
where
    F: FnMut(&MlpParams) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    for k in 0..params.num_params() {
        let orig = *probe.param_mut(k);
        *probe.param_mut(k) = orig + h;
        let up = loss(&probe)?;
        *probe.param_mut(k) = orig - h;
        let down = loss(&probe)?;
        *probe.param_mut(k) = orig;
        *out.param_mut(k) = (up - down) / (2.0 * h);
    }
    Ok(out)
}

pub fn compare_gradients(analytic: &MlpParams, numeric: &MlpParams) -> GradCheck {
    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let rel = relative_error(*a, *n);
        report.max_abs_error = report.max_abs_error.max((a - n).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_mlp_maps_to_zero() {
        let mlp = MlpParams::zeros(3, 4, 2);
        let (out, _) = mlp.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_mlp_is_tanh() {
        let mut mlp = MlpParams::zeros(1, 1, 1);
        mlp.w1[(0, 0)] = 1.0;
        mlp.w2[(0, 0)] = 1.0;
        let (out, cache) = mlp.forward(&[0.5]).unwrap();
        assert_abs_diff_eq!(out[0], 0.46211715726, epsilon = 1e-11);
        let (_, gx) = mlp.backward(&cache, &[1.0]).unwrap();
        let t = 0.5f64.tanh();
        assert_abs_diff_eq!(gx[0], 1.0 - t * t, epsilon = 1e-15);
    }

    #[test]
    fn forward_matches_handwritten_matmuls() {
        let mut rng = substream(42, "test");
        let mlp = MlpParams::init(5, 7, 3, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|i| (i as f64 * 0.37).sin()).collect();
        let (out, _) = mlp.forward(&x).unwrap();
        for k in 0..3 {
            let mut acc = mlp.b2[k];
            for j in 0..7 {
                let mut pre = mlp.b1[j];
                for i in 0..5 {
                    pre += x[i] * mlp.w1[(i, j)];
                }
                acc += pre.tanh() * mlp.w2[(j, k)];
            }
            assert_abs_diff_eq!(out[k], acc, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = substream(1, "test");
        let mlp = MlpParams::init(4, 3, 2, &mut rng).unwrap();
        let (_, cache) = mlp.forward(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let (g, gx) = mlp.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = substream(42, "gradcheck");
        let mut worst = 0.0f64;
        for trial in 0..100 {
            let (i, h, o) = (1 + trial % 5, 1 + trial % 7, 1 + trial % 3);
            let mlp = MlpParams::init(i, h, o, &mut rng).unwrap();
            let x: Vec<f64> = DenseMat::gaussian(1, i, 1.0, &mut rng).as_slice().to_vec();
            let g: Vec<f64> = DenseMat::gaussian(1, o, 1.0, &mut rng).as_slice().to_vec();
            let (_, cache) = mlp.forward(&x).unwrap();
            let (analytic, gx) = mlp.backward(&cache, &g).unwrap();
            let numeric = finite_difference(&mlp, 1e-6, |p| {
                Ok(dot(&p.forward(&x)?.0, &g))
            })
            .unwrap();
            worst = worst.max(compare_gradients(&analytic, &numeric).max_rel_error);
            for k in 0..i {
                let mut xp = x.clone();
                xp[k] += 1e-6;
                let mut xm = x.clone();
                xm[k] -= 1e-6;
                let fd = (dot(&mlp.forward(&xp).unwrap().0, &g) - dot(&mlp.forward(&xm).unwrap().0, &g)) / 2e-6;
                worst = worst.max(relative_error(gx[k], fd));
            }
        }
        assert!(worst <= 1e-5, "max relative error {worst}");
    }

    #[test]
    fn shape_errors() {
        let mlp = MlpParams::zeros(3, 2, 1);
        assert!(matches!(mlp.forward(&[1.0]), Err(Error::Shape { .. })));
        let (_, cache) = mlp.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(mlp.backward(&cache, &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_fixtures() {
        let p = softmax_masked(&[1.0, 2.0, 3.0], &[true; 3]).unwrap();
        // exp-normalize computed directly
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..3 {
            assert_abs_diff_eq!(p[k], e[k] / s, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p[0], 0.09003057, epsilon = 1e-8);
        assert_abs_diff_eq!(p[1], 0.24472847, epsilon = 1e-8);
        assert_abs_diff_eq!(p[2], 0.66524096, epsilon = 1e-8);

        let uniform = softmax_masked(&[0.7; 8], &[true; 8]).unwrap();
        assert!(uniform.iter().all(|v| (v - 0.125).abs() < 1e-15));

        let single = softmax_masked(&[3.0, -1.0, 9.0], &[false, true, false]).unwrap();
        assert_eq!(single, vec![0.0, 1.0, 0.0]);

        assert!(matches!(softmax_masked(&[1.0, 2.0], &[false, false]), Err(Error::InvalidMask)));
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(argmax(&[]), None);
        assert_eq!(argmax(&[f64::NAN, 1.0]), Some(1));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut rng = substream(3, "adam");
        let mut p = MlpParams::init(2, 2, 2, &mut rng).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p, 0.1);
        st.step(&mut p, &before.zeros_like()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_scalar_hand_trace() {
        let mut p = MlpParams::zeros(1, 1, 1);
        p.b2[0] = 1.0;
        let mut g = p.zeros_like();
        g.b2[0] = 1.0;
        let mut st = AdamState::new(&p, 0.1);
        st.step(&mut p, &g).unwrap();
        // m = 0.1, v = 0.001, both bias-correct to 1: update = 0.1 / (1 + 1e-8)
        assert_abs_diff_eq!(p.b2[0], 1.0 - 0.1 / (1.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn adam_is_deterministic_and_rejects_nan() {
        let mut rng = substream(5, "adam");
        let p0 = MlpParams::init(3, 2, 2, &mut rng).unwrap();
        let mut g = p0.zeros_like();
        g.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64).cos());
        let st0 = AdamState::new(&p0, 0.01);
        let (mut pa, mut sa) = (p0.clone(), st0.clone());
        let (mut pb, mut sb) = (p0.clone(), st0.clone());
        sa.step(&mut pa, &g).unwrap();
        sb.step(&mut pb, &g).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(sa, sb);
        g.b1[0] = f64::NAN;
        assert!(matches!(sa.step(&mut pa, &g), Err(Error::Divergence(_))));
    }

    #[test]
    fn orthonormal_basis() {
        let mut rng = substream(9, "ortho");
        let basis = random_orthonormal(6, 8, &mut rng).unwrap();
        for (i, a) in basis.iter().enumerate() {
            for (j, b) in basis.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(dot(a, b), expect, epsilon = 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_masked_properties(
                logits in prop::collection::vec(-30.0f64..30.0, 1..40),
                bits in prop::collection::vec(any::<bool>(), 40),
                shift in -100.0f64..100.0,
            ) {
                let mut mask: Vec<bool> = bits[..logits.len()].to_vec();
                mask[0] = true;
                let p = softmax_masked(&logits, &mask).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                for (pi, m) in p.iter().zip(&mask) {
                    prop_assert!(*pi >= 0.0);
                    if !m { prop_assert_eq!(*pi, 0.0); }
                }
                let restricted: Vec<f64> = logits.iter().zip(&mask)
                    .map(|(l, m)| if *m { *l } else { f64::NEG_INFINITY }).collect();
                prop_assert_eq!(argmax(&p), argmax(&restricted));
                let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
                let ps = softmax_masked(&shifted, &mask).unwrap();
                for (a, b) in p.iter().zip(&ps) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
