//! Convex quadratic saddle-point toy: groups of Gaussian points, loss
//! `½‖θ − x‖²`. Every group risk is `½‖θ − m_g‖² + ½ s_g` with `m_g` the group
//! mean and `s_g` the mean squared spread, so minimax values are checkable.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, mismatch, Result};
use crate::models::{Batch, Objective, SampleEval};
use crate::rng::{keyed_stream, Purpose, Stream};
use crate::types::{ClientData, FederatedDataset, ModelParams};

/// Squared-distance objective over `dim`-dimensional points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadraticToy {
    pub dim: usize,
}

impl Objective for QuadraticToy {
    fn param_len(&self) -> usize {
        self.dim
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    /// A point counts as correct when it lies within unit distance of `θ`.
    fn evaluate(&self, theta: &[f64], batch: &Batch) -> Result<Vec<SampleEval>> {
        if theta.len() != self.dim || batch.dim != self.dim {
            return Err(mismatch("toy dimensions disagree"));
        }
        Ok((0..batch.len())
            .map(|i| {
                let sq: f64 = batch.row(i).iter().zip(theta).map(|(x, t)| (t - x) * (t - x)).sum();
                SampleEval { loss: 0.5 * sq, correct: sq <= 1.0 }
            })
            .collect())
    }

    fn loss_grad(&self, theta: &[f64], batch: &Batch, grad: &mut [f64]) -> Result<f64> {
        if theta.len() != self.dim || batch.dim != self.dim || grad.len() != self.dim {
            return Err(mismatch("toy dimensions disagree"));
        }
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        grad.fill(0.0);
        let mut loss = 0.0;
        for i in 0..batch.len() {
            for ((g, x), t) in grad.iter_mut().zip(batch.row(i)).zip(theta) {
                *g += t - x;
                loss += 0.5 * (t - x) * (t - x);
            }
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok(loss / n)
    }

    fn init_params(&self, _stream: &mut Stream) -> ModelParams {
        ModelParams::zeros(self.dim)
    }
}

/// Group `g` is attribute `g`; `counts[i][g]` points of it live on client `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySpec {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<Vec<usize>>,
    pub spread: f64,
}

impl ToySpec {
    /// Two unit-variance 1-d groups centred at −1 and 1, the first three
    /// times as large, held by a single client.
    pub fn two_groups() -> ToySpec {
        ToySpec { means: vec![vec![-1.0], vec![1.0]], counts: vec![vec![300, 100]], spread: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }
}

pub fn toy_dataset(spec: &ToySpec, seed: u64) -> Result<FederatedDataset> {
    let groups = spec.means.len();
    let dim = spec.dim();
    if groups == 0 || dim == 0 || spec.means.iter().any(|m| m.len() != dim) {
        return Err(invalid("toy spec needs non-empty means of one dimension"));
    }
    if spec.counts.is_empty() || spec.counts.iter().any(|row| row.len() != groups) {
        return Err(invalid("toy counts need one row per client and one column per group"));
    }
    let clients = spec
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut stream = keyed_stream(seed, 0, i as u64, Purpose::Data, 0);
            let (mut features, mut attributes) = (Vec::new(), Vec::new());
            for (g, &n) in row.iter().enumerate() {
                for _ in 0..n {
                    for m in &spec.means[g] {
                        let z: f64 = StandardNormal.sample(&mut stream);
                        features.push(m + spec.spread * z);
                    }
                    attributes.push(g as u32);
                }
            }
            ClientData { client_id: i, features, labels: vec![0; attributes.len()], attributes }
        })
        .collect();
    let data = FederatedDataset { clients, attribute_arity: groups, feature_dim: dim, class_count: 1 };
    data.validate()?;
    Ok(data)
}

/// Empirical group risk `½‖θ − mean‖² + ½ spread`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRisk {
    pub mean: Vec<f64>,
    pub spread: f64,
}

impl GroupRisk {
    pub fn value(&self, theta: &[f64]) -> f64 {
        0.5 * theta.iter().zip(&self.mean).map(|(t, m)| (t - m) * (t - m)).sum::<f64>() + 0.5 * self.spread
    }
}

/// Empirical risk of each attribute group pooled over clients.
pub fn group_risks(data: &FederatedDataset) -> Vec<GroupRisk> {
    let dim = data.feature_dim;
    (0..data.attribute_arity)
        .map(|a| {
            let rows: Vec<&[f64]> = data
                .clients
                .iter()
                .flat_map(|c| (0..c.len()).filter(move |&s| c.attributes[s] as usize == a).map(move |s| c.row(s, dim)))
                .collect();
            let n = rows.len() as f64;
            let mut mean = vec![0.0; dim];
            for r in &rows {
                mean.iter_mut().zip(*r).for_each(|(m, x)| *m += x / n);
            }
            let spread =
                rows.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>()).sum::<f64>() / n;
            GroupRisk { mean, spread }
        })
        .collect()
}

pub fn max_group_risk(risks: &[GroupRisk], theta: &[f64]) -> f64 {
    risks.iter().map(|r| r.value(theta)).fold(f64::NEG_INFINITY, f64::max)
}

/// Minimax value of two 1-d group risks by a grid over `(θ, λ)`:
/// `min_θ max_λ λ f_0(θ) + (1 − λ) f_1(θ)`.
pub fn grid_minimax_2d(
    risks: &[GroupRisk],
    theta_lo: f64,
    theta_hi: f64,
    theta_step: f64,
    lambda_step: f64,
) -> (f64, f64) {
    assert!(risks.len() == 2 && risks[0].mean.len() == 1, "two 1-d groups");
    let nt = ((theta_hi - theta_lo) / theta_step).round() as usize;
    let nl = (1.0 / lambda_step).round() as usize;
    let mut best = (f64::NAN, f64::INFINITY);
    for i in 0..=nt {
        let t = theta_lo + i as f64 * theta_step;
        let (a, b) = (risks[0].value(&[t]), risks[1].value(&[t]));
        let inner = (0..=nl)
            .map(|j| {
                let l = j as f64 / nl as f64;
                l * a + (1.0 - l) * b
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if inner < best.1 {
            best = (t, inner);
        }
    }
    best
}

/// `max_λ F(θ̄, λ) − min_θ F(θ, λ̄)` with `F(θ, λ) = Σ λ_g f_g(θ)`. The inner
/// minimum is found by gradient descent run to a gradient norm of `1e-8`.
pub fn duality_gap(risks: &[GroupRisk], theta_bar: &[f64], lambda_bar: &[f64]) -> Result<f64> {
    if lambda_bar.len() != risks.len() {
        return Err(mismatch("weights vs groups"));
    }
    let dim = theta_bar.len();
    let upper = max_group_risk(risks, theta_bar);
    let total: f64 = lambda_bar.iter().sum();
    // ∇F = Σ λ_g (θ − m_g); curvature Σ λ_g, so a step of 1/Σλ is stable.
    let mut theta = theta_bar.to_vec();
    let step = 1.0 / total;
    for _ in 0..100_000 {
        let mut grad = vec![0.0; dim];
        for (r, &l) in risks.iter().zip(lambda_bar) {
            for ((g, t), m) in grad.iter_mut().zip(&theta).zip(&r.mean) {
                *g += l * (t - m);
            }
        }
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() <= 1e-8 {
            break;
        }
        theta.iter_mut().zip(&grad).for_each(|(t, g)| *t -= step * g);
    }
    let lower: f64 = risks.iter().zip(lambda_bar).map(|(r, &l)| l * r.value(&theta)).sum();
    Ok(upper - lower)
}
