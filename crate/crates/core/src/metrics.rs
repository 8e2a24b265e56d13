//! Fairness metrics, level risks and risk identity checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::models::{Batch, Objective};
use crate::oracle;
use crate::types::{FederatedDataset, GroupIndex, ModelParams};

/// Population standard deviation of the group accuracies.
pub fn disparity(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(invalid("disparity of an empty accuracy list"));
    }
    // the rounded mean of equal entries can differ from them
    if accs.iter().all(|&a| a == accs[0]) {
        return Ok(0.0);
    }
    let n = accs.len() as f64;
    let mean = accs.iter().sum::<f64>() / n;
    Ok((accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt())
}

/// Worst group accuracy.
pub fn robustness(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(invalid("robustness of an empty accuracy list"));
    }
    Ok(accs.iter().copied().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Attribute,
    Client,
    Agnostic,
}

impl Level {
    pub fn name(self) -> &'static str {
        match self {
            Level::Attribute => "attribute",
            Level::Client => "client",
            Level::Agnostic => "agnostic",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attribute" => Ok(Level::Attribute),
            "client" => Ok(Level::Client),
            "agnostic" => Ok(Level::Agnostic),
            _ => Err(Error::Config(format!("unknown level `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setting: Option<String>,
    /// Client or attribute id of each reported group.
    pub group_ids: Vec<usize>,
    pub group_accuracies: Vec<f64>,
    pub group_losses: Vec<f64>,
    pub avg_acc: f64,
    pub disparity: f64,
    pub robustness: f64,
}

impl MetricsReport {
    pub fn new(
        level: Level,
        group_ids: Vec<usize>,
        group_accuracies: Vec<f64>,
        group_losses: Vec<f64>,
    ) -> Result<Self> {
        if group_ids.len() != group_accuracies.len() || group_losses.len() != group_accuracies.len() {
            return Err(mismatch("report columns differ in length"));
        }
        let avg_acc = group_accuracies.iter().sum::<f64>() / group_accuracies.len().max(1) as f64;
        Ok(MetricsReport {
            level,
            setting: None,
            disparity: disparity(&group_accuracies)?,
            robustness: robustness(&group_accuracies)?,
            avg_acc,
            group_ids,
            group_accuracies,
            group_losses,
        })
    }
}

/// Per-(client, attribute) loss sums and hit counts of one model on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEvaluation {
    pub index: GroupIndex,
    pub loss_sums: Vec<f64>,
    pub correct: Vec<usize>,
}

impl GroupEvaluation {
    /// Mean loss of each indexed subgroup.
    pub fn group_losses(&self) -> Vec<f64> {
        self.index.entries.iter().zip(&self.loss_sums).map(|(e, s)| s / e.size as f64).collect()
    }

    pub fn group_accuracies(&self) -> Vec<f64> {
        self.index.entries.iter().zip(&self.correct).map(|(e, &c)| c as f64 / e.size as f64).collect()
    }

    fn pooled(&self, key: impl Fn(usize) -> usize, slots: usize, level: Level) -> Result<MetricsReport> {
        let mut size = vec![0usize; slots];
        let mut loss = vec![0.0; slots];
        let mut hits = vec![0usize; slots];
        for (j, e) in self.index.entries.iter().enumerate() {
            let g = key(j);
            size[g] += e.size;
            loss[g] += self.loss_sums[j];
            hits[g] += self.correct[j];
        }
        let ids: Vec<usize> = (0..slots).filter(|&g| size[g] > 0).collect();
        MetricsReport::new(
            level,
            ids.clone(),
            ids.iter().map(|&g| hits[g] as f64 / size[g] as f64).collect(),
            ids.iter().map(|&g| loss[g] / size[g] as f64).collect(),
        )
    }

    /// Groups are attribute values pooled over clients.
    pub fn attribute_report(&self) -> Result<MetricsReport> {
        self.pooled(|j| self.index.entries[j].attribute, self.index.attribute_arity(), Level::Attribute)
    }

    /// Groups are clients holding data.
    pub fn client_report(&self) -> Result<MetricsReport> {
        self.pooled(|j| self.index.entries[j].client, self.index.client_count(), Level::Client)
    }

    pub fn report(&self, level: Level) -> Result<MetricsReport> {
        match level {
            Level::Attribute => self.attribute_report(),
            Level::Client => self.client_report(),
            Level::Agnostic => {
                let mut r = self.client_report()?;
                r.level = Level::Agnostic;
                Ok(r)
            }
        }
    }

    /// Largest subgroup mean loss.
    pub fn max_group_loss(&self) -> f64 {
        self.group_losses().into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Evaluates `theta` on every sample, grouped by `(client, attribute)`.
pub fn evaluate_groups(model: &dyn Objective, theta: &ModelParams, data: &FederatedDataset) -> Result<GroupEvaluation> {
    if data.feature_dim != model.feature_dim() {
        return Err(mismatch(format!("dataset width {} vs model input {}", data.feature_dim, model.feature_dim())));
    }
    let index = GroupIndex::build(data);
    let mut loss_sums = Vec::with_capacity(index.group_count());
    let mut correct = Vec::with_capacity(index.group_count());
    for e in &index.entries {
        let c = &data.clients[e.client];
        let batch = Batch::gather(&c.features, &c.labels, data.feature_dim, &e.indices);
        let evals = model.evaluate(theta.as_slice(), &batch)?;
        loss_sums.push(evals.iter().map(|s| s.loss).sum());
        correct.push(evals.iter().filter(|s| s.correct).count());
    }
    Ok(GroupEvaluation { index, loss_sums, correct })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelRisks {
    pub client: f64,
    pub attribute: f64,
    pub unified: f64,
}

/// Worst-case empirical risks of the client, attribute and unified uncertainty
/// sets for the given subgroup losses.
pub fn level_risks(group_losses: &[f64], index: &GroupIndex) -> Result<LevelRisks> {
    if group_losses.len() != index.group_count() {
        return Err(mismatch(format!("{} losses for {} groups", group_losses.len(), index.group_count())));
    }
    if group_losses.is_empty() {
        return Err(invalid("no groups"));
    }
    let unified = group_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut client = vec![0.0; index.client_count()];
    let mut client_top = vec![f64::NEG_INFINITY; index.client_count()];
    let mut attribute = vec![0.0; index.attribute_arity()];
    let mut attribute_top = vec![f64::NEG_INFINITY; index.attribute_arity()];
    for (e, &f) in index.entries.iter().zip(group_losses) {
        client[e.client] += e.size as f64 / index.client_size(e.client) as f64 * f;
        client_top[e.client] = client_top[e.client].max(f);
        attribute[e.attribute] += e.size as f64 / index.attribute_size(e.attribute) as f64 * f;
        attribute_top[e.attribute] = attribute_top[e.attribute].max(f);
    }
    // A mixture never exceeds its largest term; rounding in the weights can
    // push the computed sum a few ulps past it.
    let worst = |mix: Vec<f64>, top: Vec<f64>| {
        mix.iter().zip(&top).filter(|(_, t)| t.is_finite()).map(|(m, t)| m.min(*t)).fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(LevelRisks { client: worst(client, client_top), attribute: worst(attribute, attribute_top), unified })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallIdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub ok: bool,
}

/// Agreement required between the brute-force maximum and the closed form.
pub const BALL_IDENTITY_TOL: f64 = 2e-3;

/// Compares the maximum of `Σ λ_i R_i` over `{λ ∈ Δ : ‖Mλ − 1‖₂ ≤ ρ}` with
/// `mean + (ρ/M)·√(M·Var)`, the value where the ball touches the risk
/// direction. Requires `ρ² ≤ min_i Σ_j d_j / d_i`, `d_i = (R_i − mean)²`, so
/// that the ball lies inside the simplex.
pub fn verify_ball_identity(risks: &[f64], rho: f64) -> Result<BallIdentityCheck> {
    let m = risks.len();
    if m < 2 {
        return Err(invalid("need at least two risks"));
    }
    if !(rho >= 0.0 && rho.is_finite()) || risks.iter().any(|r| !r.is_finite()) {
        return Err(invalid("risks and radius must be finite, radius >= 0"));
    }
    let mf = m as f64;
    let mean = risks.iter().sum::<f64>() / mf;
    let d: Vec<f64> = risks.iter().map(|r| (r - mean) * (r - mean)).collect();
    let total: f64 = d.iter().sum();
    let bound = d.iter().filter(|&&di| di > 0.0).map(|di| total / di).fold(f64::INFINITY, f64::min);
    if rho * rho > bound * (1.0 + 1e-12) {
        return Err(invalid(format!("condition violated: rho^2 = {} exceeds {bound}", rho * rho)));
    }
    let var = total / mf;
    let rhs = mean + rho / mf * (mf * var).sqrt();
    let lhs = if m <= 3 { oracle::grid_ball_linear_max(risks, rho, 1e-3) } else { ball_simplex_ascent(risks, rho) };
    Ok(BallIdentityCheck { lhs, rhs, ok: (lhs - rhs).abs() <= BALL_IDENTITY_TOL })
}

/// Projected ascent on `Δ ∩ {‖Mλ − 1‖ ≤ ρ}`, projecting with Dykstra's
/// alternating scheme.
fn ball_simplex_ascent(risks: &[f64], rho: f64) -> f64 {
    let m = risks.len();
    let mf = m as f64;
    let center = 1.0 / mf;
    let radius = rho / mf;
    let project = |x: &[f64]| -> Vec<f64> {
        let mut y = x.to_vec();
        let mut p = vec![0.0; m];
        let mut q = vec![0.0; m];
        for _ in 0..2000 {
            let a: Vec<f64> = y.iter().zip(&p).map(|(u, v)| u + v).collect();
            let s = crate::simplex::project_simplex(&a).expect("finite").into_vec();
            p = a.iter().zip(&s).map(|(u, v)| u - v).collect();
            let b: Vec<f64> = s.iter().zip(&q).map(|(u, v)| u + v).collect();
            let norm = b.iter().map(|v| (v - center) * (v - center)).sum::<f64>().sqrt();
            let scale = if norm > radius { radius / norm } else { 1.0 };
            let z: Vec<f64> = b.iter().map(|v| center + (v - center) * scale).collect();
            q = b.iter().zip(&z).map(|(u, v)| u - v).collect();
            let moved = z.iter().zip(&y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            y = z;
            if moved < 1e-14 {
                break;
            }
        }
        y
    };
    let value = |x: &[f64]| x.iter().zip(risks).map(|(a, b)| a * b).sum::<f64>();
    let mut x = vec![center; m];
    let mut best = value(&x);
    let mut step = radius.max(1e-3);
    for _ in 0..400 {
        let cand = project(&x.iter().zip(risks).map(|(a, r)| a + step * r).collect::<Vec<_>>());
        let v = value(&cand);
        if v > best {
            best = v;
            x = cand;
        } else {
            step *= 0.5;
        }
    }
    best
}

/// Least-squares slope of `ln gap` against `ln T`.
pub fn fit_convergence_rate(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 5 {
        return Err(invalid(format!("need at least 5 points, got {}", points.len())));
    }
    if points.iter().any(|&(t, g)| t.is_nan() || t <= 0.0 || g.is_nan() || g <= 0.0 || !g.is_finite()) {
        return Err(invalid("horizons and gaps must be positive"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(invalid("all horizons equal"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// Cosine similarity; errors on a zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(mismatch("cosine of vectors with different lengths"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(invalid("zero-norm direction"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Server-side parameters of one round: before it, after plain aggregation,
/// and after the momentum step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaStep {
    pub before: Vec<f64>,
    pub aggregated: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionCosines {
    pub raw: f64,
    pub momentum: f64,
}

/// For each round, the cosine between `θ_current − θ_final` and the raw
/// aggregated descent direction `θ_current − θ̃`, and between it and the
/// momentum-modified direction `θ_current − θ_next`. Rounds where any of the
/// directions vanishes are an error.
pub fn momentum_direction_diagnostic(trace: &[ThetaStep], theta_final: &[f64]) -> Result<Vec<DirectionCosines>> {
    if trace.is_empty() {
        return Err(invalid("empty parameter trace"));
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    trace
        .iter()
        .map(|s| {
            let opt = diff(&s.before, theta_final);
            Ok(DirectionCosines {
                raw: cosine(&opt, &diff(&s.before, &s.aggregated))?,
                momentum: cosine(&opt, &diff(&s.before, &s.after))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ClientData;
    use proptest::prelude::*;

    fn index_from(cells: &[Vec<usize>]) -> GroupIndex {
        let arity = cells[0].len();
        let clients = cells
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let attributes: Vec<u32> =
                    row.iter().enumerate().flat_map(|(a, &n)| std::iter::repeat_n(a as u32, n)).collect();
                ClientData {
                    client_id: i,
                    features: vec![0.0; attributes.len()],
                    labels: vec![0; attributes.len()],
                    attributes,
                }
            })
            .collect();
        GroupIndex::build(&FederatedDataset { clients, attribute_arity: arity, feature_dim: 1, class_count: 1 })
    }

    #[test]
    fn disparity_examples() {
        assert_eq!(disparity(&[0.7, 0.7, 0.7]).unwrap(), 0.0);
        assert!((disparity(&[0.8, 0.6]).unwrap() - 0.1).abs() < 1e-15);
        assert!(disparity(&[]).is_err());
    }

    #[test]
    fn robustness_examples() {
        assert_eq!(robustness(&[0.7]).unwrap(), 0.7);
        assert_eq!(robustness(&[0.9, 0.4, 0.6]).unwrap(), 0.4);
        assert_eq!(robustness(&[0.6, 0.9, 0.4]).unwrap(), 0.4);
        assert!(robustness(&[]).is_err());
    }

    #[test]
    fn level_risk_examples() {
        let idx = index_from(&[vec![3, 3], vec![3, 3]]);
        let r = level_risks(&[2.5; 4], &idx).unwrap();
        assert_eq!((r.client, r.attribute, r.unified), (2.5, 2.5, 2.5));
        let r = level_risks(&[1.0, 0.0, 0.0, 1.0], &idx).unwrap();
        assert_eq!((r.client, r.attribute, r.unified), (0.5, 0.5, 1.0));
        assert!(level_risks(&[1.0], &idx).is_err());
    }

    #[test]
    fn ball_identity_examples() {
        let c = verify_ball_identity(&[1.0, 1.0, 1.0], 0.5).unwrap();
        assert!(c.ok && (c.lhs - 1.0).abs() < 1e-12 && c.rhs == 1.0);
        let c = verify_ball_identity(&[0.0, 1.0], 2f64.sqrt()).unwrap();
        assert!((c.lhs - 1.0).abs() < 1e-12 && (c.rhs - 1.0).abs() < 1e-12 && c.ok, "{c:?}");
        assert!(verify_ball_identity(&[0.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn ball_identity_ascent_matches_closed_form() {
        let risks = [0.3, 0.9, 0.1, 0.5, 0.45];
        let c = verify_ball_identity(&risks, 0.8).unwrap();
        assert!(c.ok && (c.lhs - c.rhs).abs() < 1e-6, "{c:?}");
    }

    #[test]
    fn rate_fit_examples() {
        let ts = [10.0, 100.0, 1e3, 1e4, 1e5];
        let half: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 1.0 / f64::sqrt(t))).collect();
        assert!((fit_convergence_rate(&half).unwrap() + 0.5).abs() < 1e-9);
        let one: Vec<(f64, f64)> = ts.iter().map(|&t| (t, 3.0 / t)).collect();
        assert!((fit_convergence_rate(&one).unwrap() + 1.0).abs() < 1e-9);
        assert!(fit_convergence_rate(&one[..4]).is_err());
        assert!(fit_convergence_rate(&[(1.0, 0.0); 5]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let step = ThetaStep { before: vec![1.0, 1.0], aggregated: vec![0.0, 1.0], after: vec![0.0, 0.0] };
        let c = momentum_direction_diagnostic(&[step], &[0.0, 0.0]).unwrap();
        assert!((c[0].momentum - 1.0).abs() < 1e-15);
        assert!((c[0].raw - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(momentum_direction_diagnostic(&[], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn disparity_matches_two_pass(accs in prop::collection::vec(0.0f64..=1.0, 10)) {
            prop_assert!((disparity(&accs).unwrap() - oracle::two_pass_std(&accs)).abs() <= 1e-12);
        }

        #[test]
        fn disparity_shift_and_scale(accs in prop::collection::vec(0.0f64..=1.0, 1..12), c in -2.0f64..2.0) {
            let base = disparity(&accs).unwrap();
            let shifted: Vec<f64> = accs.iter().map(|a| a + c).collect();
            let scaled: Vec<f64> = accs.iter().map(|a| a * c).collect();
            prop_assert!((disparity(&shifted).unwrap() - base).abs() <= 1e-12);
            prop_assert!((disparity(&scaled).unwrap() - c.abs() * base).abs() <= 1e-12);
        }

        #[test]
        fn level_risks_bounded_by_unified(
            cells in prop::collection::vec(prop::collection::vec(0usize..4, 3), 1..4),
            seed in any::<u64>(),
        ) {
            prop_assume!(cells.iter().flatten().any(|&c| c > 0));
            let idx = index_from(&cells);
            let mut s = seed;
            let losses: Vec<f64> = (0..idx.group_count()).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 * 3.0
            }).collect();
            let r = level_risks(&losses, &idx).unwrap();
            prop_assert!(r.client <= r.unified && r.attribute <= r.unified);
        }

        #[test]
        fn unified_risk_is_grid_supremum(losses in prop::collection::vec(0.0f64..2.0, 2..5)) {
            let cells = vec![vec![1usize; losses.len()]];
            let r = level_risks(&losses, &index_from(&cells)).unwrap();
            let grid = oracle::grid_minimize(losses.len(), 1e-2, |w| Some(-w.iter().zip(&losses).map(|(a, b)| a * b).sum::<f64>()));
            let sup: f64 = grid.iter().zip(&losses).map(|(a, b)| a * b).sum();
            prop_assert!((r.unified - sup).abs() <= 2e-3);
        }
    }
}
