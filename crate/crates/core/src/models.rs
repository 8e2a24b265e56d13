//! Softmax classifiers: multinomial logistic regression and a one-hidden-layer
//! tanh network.
//!
//! Parameter layout, row-major:
//! - linear: `W (C × d)` then `b (C)`.
//! - mlp: `W1 (H × d)`, `b1 (H)`, `W2 (C × H)`, `b2 (C)`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::rng::Stream;
use crate::types::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub feature_dim: usize,
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_width: Option<usize>,
}

impl ModelSpec {
    pub fn linear(feature_dim: usize, class_count: usize) -> Self {
        ModelSpec { kind: ModelKind::Linear, feature_dim, class_count, hidden_width: None }
    }

    pub fn mlp(feature_dim: usize, class_count: usize, hidden_width: usize) -> Self {
        ModelSpec { kind: ModelKind::Mlp, feature_dim, class_count, hidden_width: Some(hidden_width) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.class_count == 0 {
            return Err(invalid("model dimensions must be >= 1"));
        }
        if self.kind == ModelKind::Mlp && self.hidden_width.unwrap_or(0) == 0 {
            return Err(invalid("mlp needs hidden_width >= 1"));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        self.hidden_width.unwrap_or(0)
    }
}

/// A minibatch of `(x, y)` pairs; features row-major `b × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
    pub dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(invalid("batch must hold at least one sample"));
        }
        if features.len() != labels.len() * dim {
            return Err(mismatch(format!("{} features for {} rows of width {dim}", features.len(), labels.len())));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(invalid("batch has non-finite features"));
        }
        Ok(Batch { features, labels, dim })
    }

    /// Gathers rows `indices` of a row-major matrix.
    pub fn gather(features: &[f64], labels: &[u32], dim: usize, indices: &[usize]) -> Batch {
        let mut f = Vec::with_capacity(indices.len() * dim);
        let mut l = Vec::with_capacity(indices.len());
        for &i in indices {
            f.extend_from_slice(&features[i * dim..(i + 1) * dim]);
            l.push(labels[i]);
        }
        Batch { features: f, labels: l, dim }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    pub loss: f64,
    pub correct: bool,
}

/// A differentiable per-sample loss the training engine can optimize.
pub trait Objective: Send + Sync {
    fn param_len(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Per-sample loss and correctness.
    fn evaluate(&self, theta: &[f64], batch: &Batch) -> Result<Vec<SampleEval>>;
    /// Mean loss; writes the gradient of the mean loss into `grad`.
    fn loss_grad(&self, theta: &[f64], batch: &Batch, grad: &mut [f64]) -> Result<f64>;
    fn init_params(&self, stream: &mut Stream) -> ModelParams;
}

fn log_softmax_stats(logits: &[f64]) -> (f64, usize) {
    let mut top = f64::NEG_INFINITY;
    let mut arg = 0;
    for (c, &z) in logits.iter().enumerate() {
        // strict comparison keeps the lowest index on ties
        if z > top {
            top = z;
            arg = c;
        }
    }
    let lse = top + logits.iter().map(|z| (z - top).exp()).sum::<f64>().ln();
    (lse, arg)
}

impl ModelSpec {
    fn check(&self, theta: &[f64], batch: &Batch) -> Result<()> {
        if theta.len() != self.param_len() {
            return Err(mismatch(format!("theta has {} entries, model needs {}", theta.len(), self.param_len())));
        }
        if batch.dim != self.feature_dim {
            return Err(mismatch(format!("batch width {} vs model input {}", batch.dim, self.feature_dim)));
        }
        if let Some(&y) = batch.labels.iter().find(|&&y| y as usize >= self.class_count) {
            return Err(invalid(format!("label {y} out of range")));
        }
        Ok(())
    }

    /// Logits of one row; `hidden` receives tanh activations for the mlp.
    fn forward(&self, theta: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (d, c) = (self.feature_dim, self.class_count);
        match self.kind {
            ModelKind::Linear => {
                let (w, b) = theta.split_at(c * d);
                for k in 0..c {
                    logits[k] = b[k] + dot(&w[k * d..(k + 1) * d], x);
                }
            }
            ModelKind::Mlp => {
                let h = self.hidden();
                let (w1, rest) = theta.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    hidden[j] = (b1[j] + dot(&w1[j * d..(j + 1) * d], x)).tanh();
                }
                for k in 0..c {
                    logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden);
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Objective for ModelSpec {
    fn param_len(&self) -> usize {
        let (d, c) = (self.feature_dim, self.class_count);
        match self.kind {
            ModelKind::Linear => c * d + c,
            ModelKind::Mlp => {
                let h = self.hidden();
                h * d + h + c * h + c
            }
        }
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn evaluate(&self, theta: &[f64], batch: &Batch) -> Result<Vec<SampleEval>> {
        self.check(theta, batch)?;
        let mut hidden = vec![0.0; self.hidden()];
        let mut logits = vec![0.0; self.class_count];
        Ok((0..batch.len())
            .map(|i| {
                self.forward(theta, batch.row(i), &mut hidden, &mut logits);
                let (lse, arg) = log_softmax_stats(&logits);
                let y = batch.labels[i] as usize;
                SampleEval { loss: (lse - logits[y]).max(0.0), correct: arg == y }
            })
            .collect())
    }

    fn loss_grad(&self, theta: &[f64], batch: &Batch, grad: &mut [f64]) -> Result<f64> {
        self.check(theta, batch)?;
        if grad.len() != theta.len() {
            return Err(mismatch("gradient buffer length"));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (d, c, h) = (self.feature_dim, self.class_count, self.hidden());
        let inv_b = 1.0 / batch.len() as f64;
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut delta = vec![0.0; c];
        let mut dhidden = vec![0.0; h];
        let mut total = 0.0;
        for i in 0..batch.len() {
            let x = batch.row(i);
            let y = batch.labels[i] as usize;
            self.forward(theta, x, &mut hidden, &mut logits);
            let (lse, _) = log_softmax_stats(&logits);
            total += (lse - logits[y]).max(0.0);
            for k in 0..c {
                delta[k] = ((logits[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) * inv_b;
            }
            match self.kind {
                ModelKind::Linear => {
                    let (gw, gb) = grad.split_at_mut(c * d);
                    for k in 0..c {
                        for (gwj, xj) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                            *gwj += delta[k] * xj;
                        }
                        gb[k] += delta[k];
                    }
                }
                ModelKind::Mlp => {
                    let w2 = &theta[h * d + h..h * d + h + c * h];
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    dhidden.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        for j in 0..h {
                            gw2[k * h + j] += delta[k] * hidden[j];
                            dhidden[j] += w2[k * h + j] * delta[k];
                        }
                        gb2[k] += delta[k];
                    }
                    for j in 0..h {
                        let da = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                        for (g, xj) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *g += da * xj;
                        }
                        gb1[j] += da;
                    }
                }
            }
        }
        Ok(total * inv_b)
    }

    /// Zeros for the linear model; scaled Gaussian weights for the mlp.
    fn init_params(&self, stream: &mut Stream) -> ModelParams {
        let mut theta = vec![0.0; self.param_len()];
        if self.kind == ModelKind::Mlp {
            let (d, c, h) = (self.feature_dim, self.class_count, self.hidden());
            let s1 = 1.0 / (d as f64).sqrt();
            let s2 = 1.0 / (h as f64).sqrt();
            for v in &mut theta[..h * d] {
                *v = s1 * {
                    let z: f64 = StandardNormal.sample(stream);
                    z
                };
            }
            for v in &mut theta[h * d + h..h * d + h + c * h] {
                *v = s2 * {
                    let z: f64 = StandardNormal.sample(stream);
                    z
                };
            }
        }
        ModelParams::new(theta).expect("finite initialization")
    }
}

/// Mean cross-entropy of `theta` on `batch`.
pub fn loss(theta: &ModelParams, batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    let evals = spec.evaluate(theta.as_slice(), batch)?;
    Ok(evals.iter().map(|e| e.loss).sum::<f64>() / evals.len() as f64)
}

/// Analytic gradient of [`loss`].
pub fn grad_loss(theta: &ModelParams, batch: &Batch, spec: &ModelSpec) -> Result<Vec<f64>> {
    let mut g = vec![0.0; theta.len()];
    spec.loss_grad(theta.as_slice(), batch, &mut g)?;
    Ok(g)
}

/// Fraction of rows whose arg-max logit (lowest index on ties) equals the label.
pub fn accuracy(theta: &ModelParams, batch: &Batch, spec: &ModelSpec) -> Result<f64> {
    let evals = spec.evaluate(theta.as_slice(), batch)?;
    Ok(evals.iter().filter(|e| e.correct).count() as f64 / evals.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::central_difference;
    use crate::rng::rng_stream;
    use rand::Rng;

    fn random_case(spec: &ModelSpec, seed: u64) -> (ModelParams, Batch) {
        let mut s = rng_stream(seed, 0, 0);
        let theta: Vec<f64> = (0..spec.param_len()).map(|_| s.random_range(-1.0..1.0)).collect();
        let b = s.random_range(1..8);
        let feats: Vec<f64> = (0..b * spec.feature_dim).map(|_| s.random_range(-2.0..2.0)).collect();
        let labels = (0..b).map(|_| s.random_range(0..spec.class_count as u32)).collect();
        (ModelParams::new(theta).unwrap(), Batch::new(feats, labels, spec.feature_dim).unwrap())
    }

    #[test]
    fn zero_theta_gives_log_class_count() {
        for c in [2usize, 3, 10] {
            let spec = ModelSpec::linear(3, c);
            let (_, batch) = random_case(&spec, c as u64);
            let l = loss(&ModelParams::zeros(spec.param_len()), &batch, &spec).unwrap();
            assert!((l - (c as f64).ln()).abs() < 1e-15, "{c}");
        }
    }

    #[test]
    fn single_sample_hand_value() {
        // d = 1, C = 2: w = (1, 0), b = (0, 0), x = 1 → logits (1, 0), label 0.
        let spec = ModelSpec::linear(1, 2);
        let theta = ModelParams::new(vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(vec![1.0], vec![0], 1).unwrap();
        let scalar = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss(&theta, &batch, &spec).unwrap() - scalar).abs() < 1e-15);
        assert!((scalar - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn balanced_symmetric_batch_has_zero_bias_gradient() {
        let spec = ModelSpec::linear(2, 2);
        let batch = Batch::new(vec![1.0, -1.0, -1.0, 1.0, 0.5, 0.5, -0.5, -0.5], vec![0, 0, 1, 1], 2).unwrap();
        let g = grad_loss(&ModelParams::zeros(6), &batch, &spec).unwrap();
        assert!(g[4].abs() < 1e-15 && g[5].abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for spec in [ModelSpec::linear(3, 4), ModelSpec::mlp(3, 3, 5)] {
            for seed in 0..20 {
                let (theta, batch) = random_case(&spec, seed);
                let g = grad_loss(&theta, &batch, &spec).unwrap();
                let fd = central_difference(theta.as_slice(), 1e-5, |t| {
                    loss(&ModelParams::new(t.to_vec()).unwrap(), &batch, &spec).unwrap()
                });
                let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
                assert!(num / den <= 1e-5, "{spec:?} seed {seed}: {}", num / den);
            }
        }
    }

    #[test]
    fn duplicated_batch_keeps_gradient() {
        let spec = ModelSpec::linear(2, 3);
        let (theta, batch) = random_case(&spec, 9);
        let mut feats = batch.features.clone();
        feats.extend_from_slice(&batch.features);
        let mut labels = batch.labels.clone();
        labels.extend_from_slice(&batch.labels);
        let doubled = Batch::new(feats, labels, 2).unwrap();
        let a = grad_loss(&theta, &batch, &spec).unwrap();
        let b = grad_loss(&theta, &doubled, &spec).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn accuracy_tie_break_and_hand_count() {
        let spec = ModelSpec::linear(1, 2);
        let zero = ModelParams::zeros(4);
        let b0 = Batch::new(vec![0.3, -1.0], vec![0, 0], 1).unwrap();
        let b1 = Batch::new(vec![0.3, -1.0], vec![1, 1], 1).unwrap();
        assert_eq!(accuracy(&zero, &b0, &spec).unwrap(), 1.0);
        assert_eq!(accuracy(&zero, &b1, &spec).unwrap(), 0.0);
        // logits = (x, -x): rows x=2 → class 0, x=-1 → 1, x=0.5 → 0, x=-3 → 1.
        let theta = ModelParams::new(vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let batch = Batch::new(vec![2.0, -1.0, 0.5, -3.0], vec![0, 0, 0, 1], 1).unwrap();
        assert_eq!(accuracy(&theta, &batch, &spec).unwrap(), 0.75);
    }

    #[test]
    fn dimension_errors() {
        let spec = ModelSpec::linear(2, 2);
        let batch = Batch::new(vec![1.0, 2.0], vec![0], 2).unwrap();
        assert!(loss(&ModelParams::zeros(5), &batch, &spec).is_err());
        let wide = Batch::new(vec![1.0, 2.0, 3.0], vec![0], 3).unwrap();
        assert!(loss(&ModelParams::zeros(6), &wide, &spec).is_err());
        let bad_label = Batch::new(vec![1.0, 2.0], vec![2], 2).unwrap();
        assert!(loss(&ModelParams::zeros(6), &bad_label, &spec).is_err());
        assert!(Batch::new(vec![f64::NAN, 0.0], vec![0], 2).is_err());
        assert!(Batch::new(vec![], vec![], 2).is_err());
    }

    #[test]
    fn linear_loss_is_convex_on_random_chords() {
        let spec = ModelSpec::linear(3, 3);
        for seed in 0..100 {
            let (t1, batch) = random_case(&spec, seed);
            let (t2, _) = random_case(&spec, seed + 1000);
            let mid = ModelParams::new(t1.as_slice().iter().zip(t2.as_slice()).map(|(a, b)| 0.5 * (a + b)).collect())
                .unwrap();
            let lm = loss(&mid, &batch, &spec).unwrap();
            let avg = 0.5 * (loss(&t1, &batch, &spec).unwrap() + loss(&t2, &batch, &spec).unwrap());
            assert!(lm <= avg + 1e-10);
        }
    }

    #[test]
    fn accuracy_is_size_weighted_mean_over_partition() {
        let spec = ModelSpec::mlp(2, 3, 4);
        let (theta, batch) = random_case(&spec, 5);
        let whole = accuracy(&theta, &batch, &spec).unwrap();
        let split = batch.len() / 2;
        if split == 0 {
            return;
        }
        let part = |r: std::ops::Range<usize>| {
            let idx: Vec<usize> = r.collect();
            Batch::gather(&batch.features, &batch.labels, 2, &idx)
        };
        let (a, b) = (part(0..split), part(split..batch.len()));
        let weighted = (accuracy(&theta, &a, &spec).unwrap() * a.len() as f64
            + accuracy(&theta, &b, &spec).unwrap() * b.len() as f64)
            / batch.len() as f64;
        assert!((whole - weighted).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&whole));
    }
}
