//! Brute-force reference computations.
//!
//! Nothing here calls into the update rules it is used to check: every routine
//! is an exhaustive or coarse-to-fine grid search, or a direct formula
//! evaluation written out independently.

/// Calls `f` on every lattice point of the simplex with `m` coordinates and
/// spacing `1/k`, as integer counts summing to `k`.
pub fn for_each_lattice_point(m: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(pos: usize, left: usize, buf: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if pos + 1 == buf.len() {
            buf[pos] = left;
            f(buf);
            return;
        }
        for c in 0..=left {
            buf[pos] = c;
            rec(pos + 1, left - c, buf, f);
        }
    }
    let mut buf = vec![0usize; m];
    rec(0, k, &mut buf, f);
}

fn for_each_in_box(center: &[usize], radius: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(
        pos: usize,
        used: usize,
        center: &[usize],
        radius: usize,
        k: usize,
        buf: &mut Vec<usize>,
        f: &mut impl FnMut(&[usize]),
    ) {
        let m = buf.len();
        if pos + 1 == m {
            buf[pos] = k - used;
            f(buf);
            return;
        }
        let lo = center[pos].saturating_sub(radius);
        let hi = (center[pos] + radius).min(k - used);
        for c in lo..=hi {
            buf[pos] = c;
            rec(pos + 1, used + c, center, radius, k, buf, f);
        }
    }
    let mut buf = vec![0usize; center.len()];
    rec(0, 0, center, radius, k, &mut buf, f);
}

/// Coarse-to-fine grid minimization over the simplex; `f` returns `None` for
/// infeasible points. The final lattice spacing is `step` (which must be a
/// power of ten no larger than 0.1). Valid for convex objectives on convex
/// feasible sets, where the lattice minimum lies next to the coarse one.
pub fn grid_minimize(m: usize, step: f64, f: impl Fn(&[f64]) -> Option<f64>) -> Vec<f64> {
    let final_k = (1.0 / step).round() as usize;
    let mut k = 10usize;
    let to_point = |c: &[usize], k: usize| -> Vec<f64> { c.iter().map(|&v| v as f64 / k as f64).collect() };
    let mut best: Option<(f64, Vec<usize>)> = None;
    let consider = |c: &[usize], k: usize, best: &mut Option<(f64, Vec<usize>)>| {
        if let Some(v) = f(&to_point(c, k)) {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                *best = Some((v, c.to_vec()));
            }
        }
    };
    for_each_lattice_point(m, k, &mut |c| consider(c, k, &mut best));
    while k < final_k {
        let (_, center) = best.take().expect("feasible point on coarse grid");
        let center: Vec<usize> = center.iter().map(|&c| c * 10).collect();
        k *= 10;
        for_each_in_box(&center, 15, k, &mut |c| consider(c, k, &mut best));
    }
    to_point(&best.expect("feasible point").1, k)
}

/// Grid-search Euclidean projection of `v` onto the simplex.
pub fn grid_project(v: &[f64], step: f64) -> Vec<f64> {
    grid_minimize(v.len(), step, |x| Some(x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()))
}

/// Negative-entropy Bregman divergence `h(p) − h(q) − ⟨∇h(q), p − q⟩`
/// with `h(x) = Σ x ln x − x`.
pub fn negentropy_bregman(p: &[f64], q: &[f64]) -> f64 {
    let h = |x: &[f64]| x.iter().map(|&v| if v > 0.0 { v * v.ln() - v } else { 0.0 }).sum::<f64>();
    let lin: f64 = p.iter().zip(q).map(|(pj, qj)| qj.ln() * (pj - qj)).sum();
    h(p) - h(q) - lin
}

/// First coordinate of the maximizer of `step·⟨g, x⟩ − D_h(x ‖ λ)` over a
/// full `h`-spaced grid of the one-dimensional simplex.
pub fn grid_mirror_objective_2d(lambda: &[f64], g: &[f64], step: f64, h: f64) -> f64 {
    let n = (1.0 / h).round() as usize;
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 1..n {
        let x0 = i as f64 / n as f64;
        let x = [x0, 1.0 - x0];
        let val = step * (g[0] * x[0] + g[1] * x[1]) - negentropy_bregman(&x, lambda);
        if val > best.0 {
            best = (val, x0);
        }
    }
    best.1
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

/// Grid maximizer of `⟨w, losses⟩` over `{w : KL(w ‖ base) ≤ radius}`.
pub fn grid_kl_ball_max(base: &[f64], losses: &[f64], radius: f64, step: f64) -> Vec<f64> {
    grid_minimize(base.len(), step, |w| {
        if w.iter().zip(base).any(|(a, b)| *a > 0.0 && *b <= 0.0) || kl(w, base) > radius {
            return None;
        }
        Some(-w.iter().zip(losses).map(|(a, b)| a * b).sum::<f64>())
    })
}

/// Every point of the full `step` lattice inside `{w : KL(w ‖ base) ≤ radius}`
/// whose value `⟨w, losses⟩` is within `slack` of the lattice maximum.
///
/// Along the ball boundary the objective is flat to second order, so the raw
/// lattice arg-max is only determined up to such near-ties.
pub fn grid_kl_ball_near_max(base: &[f64], losses: &[f64], radius: f64, step: f64, slack: f64) -> Vec<Vec<f64>> {
    let k = (1.0 / step).round() as usize;
    let mut feasible: Vec<(f64, Vec<f64>)> = Vec::new();
    for_each_lattice_point(base.len(), k, &mut |c| {
        let w: Vec<f64> = c.iter().map(|&v| v as f64 / k as f64).collect();
        if w.iter().zip(base).any(|(a, b)| *a > 0.0 && *b <= 0.0) || kl(&w, base) > radius {
            return;
        }
        let val = w.iter().zip(losses).map(|(a, b)| a * b).sum::<f64>();
        feasible.push((val, w));
    });
    let top = feasible.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    feasible.into_iter().filter(|(v, _)| *v >= top - slack).map(|(_, w)| w).collect()
}

/// Exhaustive maximum of `Σ λ_i r_i` over `{λ ∈ Δ : ‖Mλ − 1‖₂ ≤ ρ}` on the
/// full lattice with spacing `step`.
pub fn grid_ball_linear_max(risks: &[f64], rho: f64, step: f64) -> f64 {
    let m = risks.len();
    let k = (1.0 / step).round() as usize;
    let mut best = f64::NEG_INFINITY;
    for_each_lattice_point(m, k, &mut |c| {
        let lam: Vec<f64> = c.iter().map(|&v| v as f64 / k as f64).collect();
        let dev: f64 = lam.iter().map(|l| (m as f64 * l - 1.0).powi(2)).sum::<f64>().sqrt();
        if dev <= rho {
            let val: f64 = lam.iter().zip(risks).map(|(l, r)| l * r).sum();
            best = best.max(val);
        }
    });
    best
}

/// Population standard deviation by the two-pass formula.
pub fn two_pass_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_difference(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}
