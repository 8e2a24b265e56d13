//! Update rules for weights constrained to the probability simplex.

use crate::error::{invalid, mismatch, Error, Result};
use crate::types::{ModelParams, SimplexWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorStepResult {
    pub weights: SimplexWeights,
    /// Largest absolute per-coordinate change.
    pub max_shift: f64,
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Euclidean projection onto the simplex by sorting and thresholding, `O(M log M)`.
pub fn project_simplex(v: &[f64]) -> Result<SimplexWeights> {
    if v.is_empty() {
        return Err(invalid("cannot project an empty vector"));
    }
    check_finite(v, "projection input")?;
    let tau = projection_threshold(v);
    let out: Vec<f64> = v.iter().map(|x| (x - tau).max(0.0)).collect();
    // The threshold makes the positive part sum to one up to rounding; renormalize
    // the rounding away so downstream invariants hold at full precision.
    let sum: f64 = out.iter().sum();
    SimplexWeights::new(out.into_iter().map(|x| x / sum).collect())
}

/// The `τ` with `Σ max(v_j − τ, 0) = 1`.
pub fn projection_threshold(v: &[f64]) -> f64 {
    let mut u = v.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    tau
}

/// KKT residual of a candidate projection `out` of `v`: the threshold is
/// re-derived from the support of `out` and compared coordinate-wise.
pub fn projection_kkt_residual(v: &[f64], out: &[f64]) -> f64 {
    let support: Vec<usize> = (0..v.len()).filter(|&j| out[j] > 0.0).collect();
    if support.is_empty() {
        return f64::INFINITY;
    }
    let tau = (support.iter().map(|&j| v[j]).sum::<f64>() - 1.0) / support.len() as f64;
    let mass = (out.iter().sum::<f64>() - 1.0).abs();
    v.iter().zip(out).map(|(x, o)| (o - (x - tau).max(0.0)).abs()).fold(mass, f64::max)
}

/// Entropic mirror ascent step `λ'_j ∝ λ_j · exp(step · g_j)`.
pub fn mirror_step_entropy(lambda: &SimplexWeights, g: &[f64], step: f64) -> Result<MirrorStepResult> {
    let mask = vec![true; lambda.len()];
    mirror_step_masked(lambda, g, step, &mask)
}

/// Mirror step restricted to the coordinates where `mask` is set.
///
/// Unmasked coordinates keep their weight; masked ones share their previous
/// total mass multiplicatively, so the result stays on the simplex.
pub fn mirror_step_masked(lambda: &SimplexWeights, g: &[f64], step: f64, mask: &[bool]) -> Result<MirrorStepResult> {
    let lam = lambda.as_slice();
    if g.len() != lam.len() || mask.len() != lam.len() {
        return Err(mismatch(format!("weights {} vs gradient {} vs mask {}", lam.len(), g.len(), mask.len())));
    }
    check_finite(g, "mirror gradient")?;
    if !(step >= 0.0 && step.is_finite()) {
        return Err(invalid("mirror step size must be >= 0"));
    }
    let active = |j: usize| mask[j] && lam[j] > 0.0;
    let top = (0..lam.len()).filter(|&j| active(j)).map(|j| step * g[j]).fold(f64::NEG_INFINITY, f64::max);
    let mass: f64 = (0..lam.len()).filter(|&j| active(j)).map(|j| lam[j]).sum();
    if top == f64::NEG_INFINITY {
        if lam.iter().all(|&l| l == 0.0) {
            return Err(invalid("mirror step on all-zero weights"));
        }
        return Ok(MirrorStepResult { weights: lambda.clone(), max_shift: 0.0 });
    }
    let tilted: Vec<f64> =
        (0..lam.len()).map(|j| if active(j) { lam[j] * (step * g[j] - top).exp() } else { 0.0 }).collect();
    let tilted_mass: f64 = (0..lam.len()).filter(|&j| active(j)).map(|j| tilted[j]).sum();
    if tilted_mass.is_nan() || tilted_mass <= 0.0 {
        return Err(Error::Numerical("mirror step underflowed".into()));
    }
    let scale = mass / tilted_mass;
    let out: Vec<f64> = (0..lam.len()).map(|j| if active(j) { tilted[j] * scale } else { lam[j] }).collect();
    let max_shift = out.iter().zip(lam).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(MirrorStepResult { weights: SimplexWeights::new(out)?, max_shift })
}

/// Numerically maximizes `step·⟨g, x⟩ − KL(x ‖ λ)` over the simplex with a
/// damped Newton method on the support of `λ`. Serves as an independent check
/// of [`mirror_step_entropy`]; `tol` bounds the gradient norm at termination.
pub fn solve_mirror_subproblem(lambda: &SimplexWeights, g: &[f64], step: f64, tol: f64) -> Result<SimplexWeights> {
    const MAX_ITERS: usize = 500;
    let lam = lambda.as_slice();
    if g.len() != lam.len() {
        return Err(mismatch("gradient length differs from weights"));
    }
    check_finite(g, "mirror gradient")?;
    if step.is_nan() || step <= 0.0 {
        return Err(invalid("step must be positive"));
    }
    let support: Vec<usize> = (0..lam.len()).filter(|&j| lam[j] > 0.0).collect();
    let m = support.len();
    let embed = |x: &[f64]| {
        let mut out = vec![0.0; lam.len()];
        for (k, &j) in support.iter().enumerate() {
            out[j] = x[k];
        }
        SimplexWeights::from_positive(out)
    };
    let base: Vec<f64> = support.iter().map(|&j| lam[j]).collect();
    let lin: Vec<f64> = support.iter().map(|&j| step * g[j]).collect();
    if m == 1 {
        return embed(&[1.0]);
    }
    let objective =
        |x: &[f64]| -> f64 { x.iter().zip(&base).zip(&lin).map(|((xi, bi), li)| li * xi - xi * (xi / bi).ln()).sum() };
    let mut x = base.clone();
    let last = m - 1;
    for _ in 0..MAX_ITERS {
        let anchor = lin[last] - (x[last] / base[last]).ln();
        let grad: Vec<f64> = (0..last).map(|j| lin[j] - (x[j] / base[j]).ln() - anchor).collect();
        if grad.iter().all(|d| d.abs() <= tol) {
            return embed(&x);
        }
        // (diag(1/x) + 1/x_m · 11ᵀ)^{-1} ∇ by Sherman–Morrison.
        let c = 1.0 / x[last];
        let sx: f64 = x[..last].iter().sum();
        let sxg: f64 = (0..last).map(|j| x[j] * grad[j]).sum();
        let coef = c * sxg / (1.0 + c * sx);
        let dir: Vec<f64> = (0..last).map(|j| x[j] * grad[j] - x[j] * coef).collect();
        let dlast = -dir.iter().sum::<f64>();
        let f0 = objective(&x);
        let mut t = 1.0;
        loop {
            let mut cand: Vec<f64> = (0..last).map(|j| x[j] + t * dir[j]).collect();
            cand.push(x[last] + t * dlast);
            if cand.iter().all(|&v| v > 0.0) && objective(&cand) >= f0 - 1e-15 {
                x = cand;
                break;
            }
            t *= 0.5;
            if t < 1e-20 {
                return Err(Error::Numerical("mirror subproblem line search stalled".into()));
            }
        }
    }
    Err(Error::Numerical("mirror subproblem did not converge".into()))
}

/// `KL(p ‖ q) = Σ p_j ln(p_j / q_j)` with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &SimplexWeights, q: &SimplexWeights) -> Result<f64> {
    if p.len() != q.len() {
        return Err(mismatch("KL arguments differ in length"));
    }
    let mut total = 0.0;
    for (&pj, &qj) in p.as_slice().iter().zip(q.as_slice()) {
        if pj > 0.0 {
            if qj <= 0.0 {
                return Err(invalid("KL support violation: p_j > 0 where q_j = 0"));
            }
            total += pj * (pj / qj).ln();
        }
    }
    Ok(total.max(0.0))
}

/// `θ̃_new + β (θ̃_new − θ̃_prev)`.
pub fn momentum_params(theta_new: &ModelParams, theta_prev: &ModelParams, beta: f64) -> Result<ModelParams> {
    theta_new.check_len(theta_prev)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(invalid("momentum coefficient must be >= 0"));
    }
    ModelParams::new(theta_new.as_slice().iter().zip(theta_prev.as_slice()).map(|(n, p)| n + beta * (n - p)).collect())
}

/// `λ + β (λ̃ − λ)`, a convex combination for `β ∈ [0, 1]`.
pub fn momentum_weights(
    lambda_prev: &SimplexWeights,
    lambda_tilde: &SimplexWeights,
    beta: f64,
) -> Result<SimplexWeights> {
    if lambda_prev.len() != lambda_tilde.len() {
        return Err(mismatch("weight vectors differ in length"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(invalid(format!("weight momentum {beta} outside [0, 1]")));
    }
    SimplexWeights::new(
        lambda_prev
            .as_slice()
            .iter()
            .zip(lambda_tilde.as_slice())
            .map(|(p, t)| (p + beta * (t - p)).max(0.0))
            .collect(),
    )
}

/// Worst-case reweighting of `base` inside the KL ball of the given radius:
/// `w_j ∝ base_j · exp(loss_j / τ)` with `τ` found by bisection so that
/// `KL(w ‖ base) = radius`.
pub fn tilt_weights_kl(base: &SimplexWeights, losses: &[f64], radius: f64) -> Result<SimplexWeights> {
    const TAU_LO: f64 = 1e-8;
    const TAU_HI: f64 = 1e8;
    const MAX_ITERS: usize = 200;
    if losses.len() != base.len() {
        return Err(mismatch("losses and base weights differ in length"));
    }
    check_finite(losses, "losses")?;
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(invalid("KL radius must be >= 0"));
    }
    if radius == 0.0 {
        return Ok(base.clone());
    }
    let b = base.as_slice();
    let top = (0..b.len()).filter(|&j| b[j] > 0.0).map(|j| losses[j]).fold(f64::NEG_INFINITY, f64::max);

    // τ → 0 limit: base restricted to the arg-max set.
    let vertex_mass: f64 = (0..b.len()).filter(|&j| b[j] > 0.0 && losses[j] == top).map(|j| b[j]).sum();
    if -vertex_mass.ln() <= radius {
        let w = (0..b.len()).map(|j| if b[j] > 0.0 && losses[j] == top { b[j] } else { 0.0 }).collect();
        return SimplexWeights::from_positive(w);
    }

    let tilt = |tau: f64| -> Result<SimplexWeights> {
        let w = (0..b.len()).map(|j| if b[j] > 0.0 { b[j] * ((losses[j] - top) / tau).exp() } else { 0.0 }).collect();
        SimplexWeights::from_positive(w)
    };
    let kl_at = |tau: f64| -> Result<f64> { kl_divergence(&tilt(tau)?, base) };

    // KL(w_τ ‖ base) decreases in τ; bisect on log τ.
    let (mut lo, mut hi) = (TAU_LO.ln(), TAU_HI.ln());
    if kl_at(TAU_LO)? <= radius {
        return tilt(TAU_LO);
    }
    if kl_at(TAU_HI)? > radius {
        return Err(Error::Numerical("KL tilt: radius below the bracket".into()));
    }
    for _ in 0..MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        if kl_at(mid.exp())? > radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            return tilt(hi.exp());
        }
    }
    Err(Error::Numerical("KL tilt bisection did not converge".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn sw(v: &[f64]) -> SimplexWeights {
        SimplexWeights::new(v.to_vec()).unwrap()
    }

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn projection_examples() {
        let p = project_simplex(&[1.0, 1.0, 1.0]).unwrap();
        assert!(linf(p.as_slice(), &[1.0 / 3.0; 3]) < 1e-15);
        assert_eq!(project_simplex(&[2.0, 0.0, 0.0]).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        // Grid oracle over Δ_1 at step 1e-4 gives (1, 0).
        let grid = oracle::grid_project(&[1.2, -0.2], 1e-4);
        assert!(linf(&grid, &[1.0, 0.0]) < 1e-12);
        let p = project_simplex(&[1.2, -0.2]).unwrap();
        assert!(linf(p.as_slice(), &grid) < 1e-12);
    }

    #[test]
    fn projection_errors() {
        assert!(project_simplex(&[]).is_err());
        assert!(project_simplex(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn projection_matches_grid_oracle_small_dims() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let m = rng.random_range(2..=4);
            let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..2.0)).collect();
            let p = project_simplex(&v).unwrap();
            let g = oracle::grid_project(&v, 1e-3);
            assert!(linf(p.as_slice(), &g) <= 2e-3, "{v:?}");
        }
    }

    #[test]
    fn mirror_step_examples() {
        let r = mirror_step_entropy(&sw(&[0.5, 0.5]), &[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(linf(r.weights.as_slice(), &[2.0 / 3.0, 1.0 / 3.0]) < 1e-15);
        assert!((r.max_shift - 1.0 / 6.0).abs() < 1e-15);
        let r = mirror_step_entropy(&sw(&[0.3, 0.7]), &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(r.weights.as_slice(), &[0.3, 0.7]);

        let lam = sw(&[0.2, 0.3, 0.5]);
        let g = [1.0, -0.5, 0.1];
        let closed = mirror_step_entropy(&lam, &g, 1.0).unwrap();
        let numeric = solve_mirror_subproblem(&lam, &g, 1.0, 1e-12).unwrap();
        assert!(linf(closed.weights.as_slice(), numeric.as_slice()) < 1e-8);
    }

    #[test]
    fn mirror_step_keeps_zero_coordinates() {
        let r = mirror_step_entropy(&sw(&[0.0, 0.4, 0.6]), &[50.0, 0.0, 1.0], 1.0).unwrap();
        assert_eq!(r.weights.as_slice()[0], 0.0);
    }

    #[test]
    fn mirror_step_errors() {
        assert!(mirror_step_entropy(&sw(&[0.5, 0.5]), &[f64::INFINITY, 0.0], 1.0).is_err());
        assert!(mirror_step_entropy(&sw(&[0.5, 0.5]), &[0.0], 1.0).is_err());
        assert!(mirror_step_entropy(&sw(&[0.5, 0.5]), &[0.0, 0.0], -1.0).is_err());
        let lam = sw(&[0.1, 0.3, 0.6]);
        assert_eq!(mirror_step_entropy(&lam, &[5.0, -1.0, 2.0], 0.0).unwrap().weights, lam);
    }

    #[test]
    fn mirror_step_survives_huge_exponents() {
        let r = mirror_step_entropy(&sw(&[0.5, 0.5]), &[1e4, 0.0], 10.0).unwrap();
        assert_eq!(r.weights.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_step_preserves_unmasked_weights() {
        let lam = sw(&[0.1, 0.2, 0.3, 0.4]);
        let r = mirror_step_masked(&lam, &[1.0, 0.0, 2.0, 0.0], 1.0, &[true, false, true, false]).unwrap();
        let w = r.weights.as_slice();
        assert_eq!(w[1], 0.2);
        assert_eq!(w[3], 0.4);
        assert!((w[0] + w[2] - 0.4).abs() < 1e-15);
        assert!(w[2] > 0.3);
    }

    #[test]
    fn subproblem_examples() {
        let out = solve_mirror_subproblem(&sw(&[0.5, 0.5]), &[0.0, 0.0], 1.0, 1e-12).unwrap();
        assert!(linf(out.as_slice(), &[0.5, 0.5]) < 1e-15);
        let out = solve_mirror_subproblem(&sw(&[0.5, 0.5]), &[2f64.ln(), 0.0], 1.0, 1e-9).unwrap();
        assert!(linf(out.as_slice(), &[2.0 / 3.0, 1.0 / 3.0]) < 1e-8);
        // Grid over Δ_1 at step 1e-5.
        let grid = oracle::grid_mirror_objective_2d(&[0.5, 0.5], &[2f64.ln(), 0.0], 1.0, 1e-5);
        assert!((grid - 2.0 / 3.0).abs() < 2e-5);
    }

    #[test]
    fn kl_examples() {
        let p = sw(&[0.2, 0.8]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&sw(&[1.0, 0.0]), &sw(&[0.5, 0.5])).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&sw(&[0.5, 0.5]), &sw(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn kl_matches_bregman_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = rng.random_range(2..8);
            let p = SimplexWeights::from_positive((0..m).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
            let q = SimplexWeights::from_positive((0..m).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            let breg = oracle::negentropy_bregman(p.as_slice(), q.as_slice());
            assert!(kl >= 0.0);
            assert!((kl - breg).abs() < 1e-12);
        }
    }

    #[test]
    fn momentum_examples() {
        let a = ModelParams::new(vec![1.0, 2.0]).unwrap();
        let z = ModelParams::zeros(2);
        assert_eq!(momentum_params(&a, &a, 0.7).unwrap(), a);
        assert_eq!(momentum_params(&a, &z, 0.0).unwrap(), a);
        assert_eq!(momentum_params(&a, &z, 0.5).unwrap().as_slice(), &[1.5, 3.0]);
        assert!(momentum_params(&a, &ModelParams::zeros(3), 0.5).is_err());

        let prev = sw(&[0.5, 0.5]);
        let tilde = sw(&[1.0, 0.0]);
        assert_eq!(momentum_weights(&prev, &tilde, 1.0).unwrap(), tilde);
        assert_eq!(momentum_weights(&prev, &tilde, 0.0).unwrap(), prev);
        let mixed = momentum_weights(&prev, &tilde, 0.4).unwrap();
        assert!(linf(mixed.as_slice(), &[0.7, 0.3]) < 1e-15);
        assert!(momentum_weights(&prev, &tilde, 1.1).is_err());
        assert!(momentum_weights(&prev, &tilde, -0.1).is_err());
    }

    #[test]
    fn tilt_examples() {
        let u3 = SimplexWeights::uniform(3);
        assert_eq!(tilt_weights_kl(&u3, &[0.9, 0.2, 0.4], 0.0).unwrap(), u3);
        let u2 = SimplexWeights::uniform(2);
        assert_eq!(tilt_weights_kl(&u2, &[1.0, 0.0], 2f64.ln()).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(tilt_weights_kl(&u2, &[1.0, 0.0], 5.0).unwrap().as_slice(), &[1.0, 0.0]);

        let losses = [0.9, 0.2, 0.4];
        let w = tilt_weights_kl(&u3, &losses, 0.1).unwrap();
        let step = 1e-3;
        let near = oracle::grid_kl_ball_near_max(u3.as_slice(), &losses, 0.1, step, step * (0.9 - 0.2));
        let dist = near.iter().map(|g| linf(w.as_slice(), g)).fold(f64::INFINITY, f64::min);
        assert!(dist <= 2e-3, "{w:?} is {dist} from the grid maximizers");
        assert!(kl_divergence(&w, &u3).unwrap() <= 0.1 + 1e-6);
        assert!(tilt_weights_kl(&u3, &losses, -1.0).is_err());
    }

    #[test]
    fn tilt_with_equal_losses_returns_base() {
        let base = sw(&[0.2, 0.3, 0.5]);
        let w = tilt_weights_kl(&base, &[1.0, 1.0, 1.0], 0.3).unwrap();
        assert!(linf(w.as_slice(), base.as_slice()) < 1e-15);
    }

    proptest! {
        #[test]
        fn projection_satisfies_kkt(v in prop::collection::vec(-5.0f64..5.0, 2..50)) {
            let p = project_simplex(&v).unwrap();
            prop_assert!(projection_kkt_residual(&v, p.as_slice()) < 1e-10);
        }

        #[test]
        fn mirror_step_matches_subproblem(
            raw in prop::collection::vec(0.05f64..1.0, 4),
            g in prop::collection::vec(-2.0f64..2.0, 4),
            step in 0.1f64..2.0,
        ) {
            let lam = SimplexWeights::from_positive(raw).unwrap();
            let closed = mirror_step_entropy(&lam, &g, step).unwrap();
            let numeric = solve_mirror_subproblem(&lam, &g, step, 1e-12).unwrap();
            prop_assert!(linf(closed.weights.as_slice(), numeric.as_slice()) < 1e-7);
        }

        #[test]
        fn mirror_step_is_shift_invariant(
            raw in prop::collection::vec(0.05f64..1.0, 2..10),
            shift in -50.0f64..50.0,
        ) {
            let lam = SimplexWeights::from_positive(raw.clone()).unwrap();
            let g: Vec<f64> = raw.iter().map(|x| 3.0 * x - 1.0).collect();
            let shifted: Vec<f64> = g.iter().map(|x| x + shift).collect();
            let a = mirror_step_entropy(&lam, &g, 1.0).unwrap();
            let b = mirror_step_entropy(&lam, &shifted, 1.0).unwrap();
            prop_assert!(linf(a.weights.as_slice(), b.weights.as_slice()) < 1e-12);
        }

        #[test]
        fn momentum_weights_stay_on_simplex(
            a in prop::collection::vec(0.0f64..1.0, 1..20),
            b in prop::collection::vec(0.0f64..1.0, 1..20),
            beta in 0.0f64..=1.0,
        ) {
            let m = a.len().min(b.len());
            let mut a = a[..m].to_vec();
            let mut b = b[..m].to_vec();
            a[0] += 0.1;
            b[0] += 0.1;
            let pa = SimplexWeights::from_positive(a).unwrap();
            let pb = SimplexWeights::from_positive(b).unwrap();
            prop_assert!(momentum_weights(&pa, &pb, beta).is_ok());
        }

        #[test]
        fn tilt_stays_in_ball_and_matches_grid(
            losses in prop::collection::vec(0.0f64..2.0, 3),
            radius in 0.01f64..0.5,
        ) {
            let base = SimplexWeights::uniform(3);
            let w = tilt_weights_kl(&base, &losses, radius).unwrap();
            prop_assert!(kl_divergence(&w, &base).unwrap() <= radius + 1e-6);
            let grid = oracle::grid_kl_ball_max(base.as_slice(), &losses, radius, 1e-3);
            let obj = |x: &[f64]| x.iter().zip(&losses).map(|(a, b)| a * b).sum::<f64>();
            prop_assert!(obj(w.as_slice()) >= obj(&grid) - 2e-3);
        }
    }
}
