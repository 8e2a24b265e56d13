//! Oracle suite: every update rule and risk identity the trainer relies on, checked
//! against brute-force or independently derived values on random instances.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::metrics::{level_risks, verify_ball_identity};
use crate::models::{Batch, ModelSpec, Objective};
use crate::oracle;
use crate::rng::{keyed_stream, Purpose, Stream, SERVER};
use crate::simplex::{
    kl_divergence, mirror_step_entropy, momentum_weights, project_simplex, projection_kkt_residual,
    solve_mirror_subproblem, tilt_weights_kl,
};
use crate::types::{ClientData, FederatedDataset, GroupIndex, SimplexWeights};

pub const PROJECTION_KKT_TOL: f64 = 1e-10;
pub const PROJECTION_GRID_TOL: f64 = 2e-3;
pub const MIRROR_TOL: f64 = 1e-7;
pub const GRADIENT_REL_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

/// Deliberate defects used to confirm the suite can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Mirror updates move against the gradient.
    FlipMirrorSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub trials: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, trials: 1, fault: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    /// Largest error seen, in the check's own units.
    pub worst: f64,
    pub tolerance: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(CheckResult::ok)
    }

    pub fn table(&self) -> String {
        let mut out =
            format!("{:<26} {:>9} {:>12} {:>10} {:>8}  status\n", "check", "passed", "worst", "tolerance", "ms");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{:<26} {:>9} {:>12.3e} {:>10.1e} {:>8}  {}",
                c.name,
                format!("{}/{}", c.passed, c.total),
                c.worst,
                c.tolerance,
                c.elapsed.as_millis(),
                if c.ok() { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

/// Generator for check `n` of a suite seeded with `seed`.
pub fn check_stream(seed: u64, n: u32) -> Stream {
    keyed_stream(seed, 0, SERVER, Purpose::Truth, n)
}

fn timed(name: &'static str, tolerance: f64, run: impl FnOnce() -> Result<(usize, usize, f64)>) -> Result<CheckResult> {
    let start = Instant::now();
    let (passed, total, worst) = run()?;
    Ok(CheckResult { name, passed, total, worst, tolerance, elapsed: start.elapsed() })
}

fn random_weights(rng: &mut Stream, m: usize) -> SimplexWeights {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    SimplexWeights::from_positive(raw).expect("positive weights")
}

fn mirror_update(lambda: &SimplexWeights, g: &[f64], step: f64, fault: Option<Fault>) -> Result<SimplexWeights> {
    let g: Vec<f64> = match fault {
        Some(Fault::FlipMirrorSign) => g.iter().map(|x| -x).collect(),
        None => g.to_vec(),
    };
    Ok(mirror_step_entropy(lambda, &g, step)?.weights)
}

/// Projection of random vectors (dims 2 to 50): KKT residual below
/// [`PROJECTION_KKT_TOL`], and for dims up to 4 within
/// [`PROJECTION_GRID_TOL`] of a 1e-3 lattice search.
pub fn check_projection(rng: &mut Stream, count: usize) -> Result<CheckResult> {
    timed("projection_kkt", PROJECTION_KKT_TOL, || {
        let (mut passed, mut worst) = (0, 0.0f64);
        for _ in 0..count {
            let m = rng.random_range(2..=50);
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
            let p = project_simplex(&v)?;
            let res = projection_kkt_residual(&v, p.as_slice());
            worst = worst.max(res);
            let mut ok = res < PROJECTION_KKT_TOL;
            if m <= 4 {
                let grid = oracle::grid_project(&v, 1e-3);
                let dist = grid.iter().zip(p.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                ok &= dist <= PROJECTION_GRID_TOL;
            }
            passed += ok as usize;
        }
        Ok((passed, count, worst))
    })
}

/// The closed-form mirror step against a Newton solve of its defining
/// subproblem, L∞ within [`MIRROR_TOL`].
pub fn check_mirror(rng: &mut Stream, count: usize, fault: Option<Fault>) -> Result<CheckResult> {
    timed("mirror_vs_subproblem", MIRROR_TOL, || {
        let (mut passed, mut worst) = (0, 0.0f64);
        for _ in 0..count {
            let m = rng.random_range(2..=20);
            let lambda = random_weights(rng, m);
            let g: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let step = rng.random_range(0.01..2.0);
            let closed = mirror_update(&lambda, &g, step, fault)?;
            let numeric = solve_mirror_subproblem(&lambda, &g, step, 1e-13)?;
            let err = closed.as_slice().iter().zip(numeric.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
            passed += (err <= MIRROR_TOL) as usize;
        }
        Ok((passed, count, worst))
    })
}

/// A mirror ascent step never lowers the linear objective it ascends.
pub fn check_mirror_ascent(rng: &mut Stream, count: usize, fault: Option<Fault>) -> Result<CheckResult> {
    timed("mirror_ascent", 0.0, || {
        let (mut passed, mut worst) = (0, 0.0f64);
        for _ in 0..count {
            let m = rng.random_range(2..=20);
            let lambda = random_weights(rng, m);
            let g: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let next = mirror_update(&lambda, &g, rng.random_range(0.01..2.0), fault)?;
            let dot = |w: &[f64]| w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
            let drop = dot(lambda.as_slice()) - dot(next.as_slice());
            worst = worst.max(drop);
            passed += (drop <= 1e-12) as usize;
        }
        Ok((passed, count, worst))
    })
}

/// Random small federations (up to 4 clients, up to 4 attributes) with random
/// subgroup losses: the client and attribute worst-case risks never exceed
/// the unified one. No tolerance.
pub fn check_risk_ordering(rng: &mut Stream, count: usize) -> Result<CheckResult> {
    timed("risk_ordering", 0.0, || {
        let (mut passed, mut worst) = (0, f64::NEG_INFINITY);
        for _ in 0..count {
            let index = random_index(rng);
            let losses: Vec<f64> = (0..index.group_count()).map(|_| rng.random_range(0.0..5.0)).collect();
            let r = level_risks(&losses, &index)?;
            worst = worst.max((r.client - r.unified).max(r.attribute - r.unified));
            passed += (r.client <= r.unified && r.attribute <= r.unified) as usize;
        }
        Ok((passed, count, worst))
    })
}

/// A group index with between 1 and 4 clients and attributes and random cell
/// sizes; every client holds at least one sample.
pub fn random_index(rng: &mut Stream) -> GroupIndex {
    let n = rng.random_range(1..=4);
    let a = rng.random_range(1..=4usize);
    let clients = (0..n)
        .map(|i| {
            let mut attributes: Vec<u32> = Vec::new();
            for k in 0..a {
                let size = rng.random_range(0..=6);
                attributes.extend(std::iter::repeat_n(k as u32, size));
            }
            if attributes.is_empty() {
                attributes.push(rng.random_range(0..a) as u32);
            }
            ClientData {
                client_id: i,
                features: vec![0.0; attributes.len()],
                labels: vec![0; attributes.len()],
                attributes,
            }
        })
        .collect();
    GroupIndex::build(&FederatedDataset { clients, attribute_arity: a, feature_dim: 1, class_count: 1 })
}

/// Random feasible `(risks, ρ)` with 2 or 3 groups plus the worked instance
/// `(0, 1), ρ = √2`, which must give exactly 1.
pub fn check_ball_identity(rng: &mut Stream, count: usize) -> Result<CheckResult> {
    timed("ball_identity", crate::metrics::BALL_IDENTITY_TOL, || {
        let (mut passed, mut worst) = (0, 0.0f64);
        for _ in 0..count {
            let m = rng.random_range(2..=3);
            let risks: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            let mean = risks.iter().sum::<f64>() / m as f64;
            let d: Vec<f64> = risks.iter().map(|r| (r - mean) * (r - mean)).collect();
            let total: f64 = d.iter().sum();
            let bound = d.iter().map(|di| total / di).fold(f64::INFINITY, f64::min);
            let rho = rng.random_range(0.0..1.0) * bound.sqrt();
            let c = verify_ball_identity(&risks, rho)?;
            worst = worst.max((c.lhs - c.rhs).abs());
            passed += c.ok as usize;
        }
        let worked = verify_ball_identity(&[0.0, 1.0], 2f64.sqrt())?;
        worst = worst.max((worked.lhs - worked.rhs).abs());
        passed += (worked.ok && worked.lhs == 1.0 && worked.rhs == 1.0) as usize;
        Ok((passed, count + 1, worst))
    })
}

/// Relative L2 error between the analytic gradient and central differences.
pub fn gradient_error(model: &dyn Objective, theta: &[f64], batch: &Batch) -> Result<f64> {
    let mut g = vec![0.0; theta.len()];
    model.loss_grad(theta, batch, &mut g)?;
    let n = batch.len() as f64;
    let fd = oracle::central_difference(theta, FD_STEP, |t| {
        model.evaluate(t, batch).expect("dims checked").iter().map(|s| s.loss).sum::<f64>() / n
    });
    let diff = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let scale = g.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|b| b * b).sum::<f64>().sqrt());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

/// A random model of the given kind with a matching random `(θ, batch)`.
pub fn random_gradient_case(rng: &mut Stream, mlp: bool) -> (ModelSpec, Vec<f64>, Batch) {
    let d = rng.random_range(1..=6);
    let c = rng.random_range(2..=5);
    let spec = if mlp { ModelSpec::mlp(d, c, rng.random_range(1..=5)) } else { ModelSpec::linear(d, c) };
    let theta: Vec<f64> = (0..spec.param_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b = rng.random_range(1..=8);
    let features: Vec<f64> = (0..b * d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<u32> = (0..b).map(|_| rng.random_range(0..c) as u32).collect();
    (spec, theta, Batch::new(features, labels, d).expect("consistent batch"))
}

/// `count` random cases for each model kind.
pub fn check_gradients(rng: &mut Stream, count: usize) -> Result<CheckResult> {
    timed("gradient_fd", GRADIENT_REL_TOL, || {
        let (mut passed, mut worst) = (0, 0.0f64);
        for mlp in [false, true] {
            for _ in 0..count {
                let (spec, theta, batch) = random_gradient_case(rng, mlp);
                let err = gradient_error(&spec, &theta, &batch)?;
                worst = worst.max(err);
                passed += (err <= GRADIENT_REL_TOL) as usize;
            }
        }
        Ok((passed, 2 * count, worst))
    })
}

fn simplex_violation(w: &[f64]) -> f64 {
    let neg = w.iter().map(|x| (-x).max(0.0)).fold(0.0, f64::max);
    neg.max((w.iter().sum::<f64>() - 1.0).abs())
}

/// Outputs of projection, mirror step, momentum mixing and KL tilting stay on
/// the simplex, and the tilt stays inside its ball.
pub fn check_simplex_invariants(rng: &mut Stream, count: usize, fault: Option<Fault>) -> Result<CheckResult> {
    timed("simplex_invariants", 1e-12, || {
        let (mut passed, mut worst) = (0, 0.0f64);
        for _ in 0..count {
            let m = rng.random_range(2..=30);
            let lambda = random_weights(rng, m);
            let other = random_weights(rng, m);
            let g: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let radius = rng.random_range(0.0..1.0);
            let tilt = tilt_weights_kl(&lambda, &g, radius)?;
            let outs = [
                project_simplex(&g)?,
                mirror_update(&lambda, &g, rng.random_range(0.0..3.0), fault)?,
                momentum_weights(&lambda, &other, rng.random_range(0.0..=1.0))?,
                tilt.clone(),
            ];
            let v = outs.iter().map(|w| simplex_violation(w.as_slice())).fold(0.0, f64::max);
            let excess = kl_divergence(&tilt, &lambda)? - radius;
            worst = worst.max(v).max(excess);
            passed += (v <= 1e-12 && excess <= 1e-9) as usize;
        }
        Ok((passed, count, worst))
    })
}

/// The whole suite; instance counts scale with `trials`.
pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    let t = opts.trials.max(1);
    let s = opts.seed;
    let checks = vec![
        check_projection(&mut check_stream(s, 0), 50 * t)?,
        check_mirror(&mut check_stream(s, 1), 20 * t, opts.fault)?,
        check_mirror_ascent(&mut check_stream(s, 2), 20 * t, opts.fault)?,
        check_ball_identity(&mut check_stream(s, 3), 2 * t)?,
        check_risk_ordering(&mut check_stream(s, 4), 10 * t)?,
        check_gradients(&mut check_stream(s, 5), 10 * t)?,
        check_simplex_invariants(&mut check_stream(s, 6), 20 * t, opts.fault)?,
    ];
    Ok(VerifyReport { checks })
}
