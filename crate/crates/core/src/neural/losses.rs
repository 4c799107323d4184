//! Training losses: the noise-prediction MSE plus the physics penalties
//! applied to the closed-form clean-signal estimate.
//!
//! Physics terms operate on speed in physical units (m/s) over the valid
//! region only; each is exactly zero on its analytic kernel (linear ramps
//! for the curvature term, in-cap accelerations, constant-acceleration
//! jerk, matched acceleration spread).

use crate::neural::autodiff::{Graph, Tensor, VarId};

/// Mean squared error over all elements.
pub fn loss_simple(g: &Graph, eps: VarId, eps_hat: VarId) -> VarId {
    let d = g.sub(eps, eps_hat);
    let sq = g.mul(d, d);
    g.mean(sq)
}

/// Forward difference along columns of a `(1, L)` sequence.
pub fn diff_cols(g: &Graph, v: VarId) -> VarId {
    let (_, l) = g.shape(v);
    let hi = g.slice_cols(v, 1, l - 1);
    let lo = g.slice_cols(v, 0, l - 1);
    g.sub(hi, lo)
}

/// Curvature penalty `sum_t (v_{t+2} - 2 v_{t+1} + v_t)^2`; zero for
/// sequences shorter than 3.
pub fn loss_smooth(g: &Graph, v: VarId) -> VarId {
    let (_, l) = g.shape(v);
    if l < 3 {
        return g.leaf(Tensor::scalar(0.0));
    }
    let a = g.slice_cols(v, 2, l - 2);
    let b = g.scale(g.slice_cols(v, 1, l - 2), -2.0);
    let c = g.slice_cols(v, 0, l - 2);
    let d2 = g.add(g.add(a, b), c);
    let sq = g.mul(d2, d2);
    g.sum(sq)
}

/// Threshold-activated acceleration penalty:
/// `sum_t relu(a_t - cap_pos)^2 + relu(-a_t - cap_neg)^2`.
pub fn loss_accel(g: &Graph, v: VarId, cap_pos: f64, cap_neg: f64) -> VarId {
    let a = diff_cols(g, v);
    let over = g.relu(g.add_scalar(a, -cap_pos));
    let under = g.relu(g.add_scalar(g.scale(a, -1.0), -cap_neg));
    let sq = g.add(g.mul(over, over), g.mul(under, under));
    g.sum(sq)
}

/// Jerk comfort penalty `sum_t relu(|j_t| - cap)^2`, written as the sum of
/// the two one-sided excesses (identical since they cannot both fire).
pub fn loss_jerk(g: &Graph, v: VarId, cap: f64) -> VarId {
    let (_, l) = g.shape(v);
    if l < 3 {
        return g.leaf(Tensor::scalar(0.0));
    }
    let j = diff_cols(g, diff_cols(g, v));
    let over = g.relu(g.add_scalar(j, -cap));
    let under = g.relu(g.add_scalar(g.scale(j, -1.0), -cap));
    let sq = g.add(g.mul(over, over), g.mul(under, under));
    g.sum(sq)
}

/// Squared gap between the acceleration standard deviation and a target
/// spread: `(sigma_a - sigma_target)^2` with the population deviation
/// computed as `E[a^2] - (E[a])^2` (clamped at zero against cancellation).
pub fn loss_accel_dist(g: &Graph, v: VarId, sigma_target: f64) -> VarId {
    let a = diff_cols(g, v);
    let m = g.mean(a);
    let mean_sq = g.mean(g.mul(a, a));
    let var = g.relu(g.sub(mean_sq, g.mul(m, m)));
    let sigma = g.sqrt(var);
    let gap = g.add_scalar(sigma, -sigma_target);
    g.mul(gap, gap)
}

/// Component nodes of the combined training objective.
pub struct CsdiLossParts {
    pub total: VarId,
    pub mse: VarId,
    pub smooth: VarId,
    pub accel: VarId,
    pub jerk: VarId,
    pub accel_dist: VarId,
}

/// Loss weights and kinematic caps.
#[derive(Debug, Clone, Copy)]
pub struct PhysicsWeights {
    pub lambda_smooth: f64,
    pub lambda_accel: f64,
    pub lambda_jerk: f64,
    pub lambda_accel_dist: f64,
    pub accel_cap_pos: f64,
    pub accel_cap_neg: f64,
    pub jerk_cap: f64,
    pub sigma_a_target: f64,
}

impl Default for PhysicsWeights {
    fn default() -> Self {
        PhysicsWeights {
            lambda_smooth: 0.1,
            lambda_accel: 0.03,
            lambda_jerk: 0.02,
            lambda_accel_dist: 0.05,
            accel_cap_pos: 4.0,
            accel_cap_neg: 5.0,
            jerk_cap: 2.0,
            sigma_a_target: 0.5,
        }
    }
}

/// Combined objective: noise MSE plus weighted physics penalties on the
/// clean-speed estimate `v0_hat` (physical units, `(1, L)` valid region).
pub fn loss_csdi(
    g: &Graph,
    eps: VarId,
    eps_hat: VarId,
    v0_hat: VarId,
    w: &PhysicsWeights,
) -> CsdiLossParts {
    let mse = loss_simple(g, eps, eps_hat);
    let smooth = loss_smooth(g, v0_hat);
    let accel = loss_accel(g, v0_hat, w.accel_cap_pos, w.accel_cap_neg);
    let jerk = loss_jerk(g, v0_hat, w.jerk_cap);
    let accel_dist = loss_accel_dist(g, v0_hat, w.sigma_a_target);
    let mut total = mse;
    total = g.add(total, g.scale(smooth, w.lambda_smooth));
    total = g.add(total, g.scale(accel, w.lambda_accel));
    total = g.add(total, g.scale(jerk, w.lambda_jerk));
    total = g.add(total, g.scale(accel_dist, w.lambda_accel_dist));
    CsdiLossParts {
        total,
        mse,
        smooth,
        accel,
        jerk,
        accel_dist,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::autodiff::grad_check;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn row(vals: &[f64]) -> Tensor {
        Tensor::from_vec(1, vals.len(), vals.to_vec()).unwrap()
    }

    fn eval(build: impl Fn(&Graph, VarId) -> VarId, vals: &[f64]) -> f64 {
        let g = Graph::new();
        let v = g.leaf(row(vals));
        let out = build(&g, v);
        g.value(out).item()
    }

    #[test]
    fn mse_examples() {
        let g = Graph::new();
        let a = g.leaf(row(&[1.0, 2.0, 3.0]));
        let b = g.leaf(row(&[1.0, 2.0, 3.0]));
        assert_eq!(g.value(loss_simple(&g, a, b)).item(), 0.0);
        let c = g.leaf(row(&[2.0, 3.0, 4.0]));
        assert_eq!(g.value(loss_simple(&g, a, c)).item(), 1.0);
        // random pair matches the direct formula
        let mut rng = seeded_rng(1);
        let xs: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let expect =
            xs.iter().zip(&ys).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / xs.len() as f64;
        let x = g.leaf(row(&xs));
        let y = g.leaf(row(&ys));
        assert!((g.value(loss_simple(&g, x, y)).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn smooth_kernel_and_unit_excess() {
        assert_eq!(
            eval(|g, v| loss_smooth(g, v), &[0.0, 1.0, 2.0, 3.0, 4.0]),
            0.0
        );
        assert_eq!(eval(|g, v| loss_smooth(g, v), &[0.0, 0.0, 1.0]), 1.0);
        // random sequence matches direct summation
        let mut rng = seeded_rng(2);
        let xs: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..10.0)).collect();
        let direct: f64 = xs
            .windows(3)
            .map(|w| {
                let d2 = w[2] - 2.0 * w[1] + w[0];
                d2 * d2
            })
            .sum();
        assert!((eval(|g, v| loss_smooth(g, v), &xs) - direct).abs() < 1e-9);
    }

    #[test]
    fn accel_kernel_and_unit_excess() {
        // all within caps
        assert_eq!(
            eval(|g, v| loss_accel(g, v, 4.0, 5.0), &[0.0, 3.0, 6.0, 2.0]),
            0.0
        );
        // one step of +5: relu(5-4)^2 = 1
        assert_eq!(
            eval(|g, v| loss_accel(g, v, 4.0, 5.0), &[0.0, 5.0, 5.0]),
            1.0
        );
        // one step of -6: relu(6-5)^2 = 1
        assert_eq!(
            eval(|g, v| loss_accel(g, v, 4.0, 5.0), &[6.0, 0.0]),
            1.0
        );
    }

    #[test]
    fn jerk_kernel_and_unit_excess() {
        // constant acceleration
        assert_eq!(
            eval(|g, v| loss_jerk(g, v, 2.0), &[0.0, 2.0, 4.0, 6.0]),
            0.0
        );
        // single jerk of 3: relu(3-2)^2 = 1
        assert_eq!(
            eval(|g, v| loss_jerk(g, v, 2.0), &[0.0, 0.0, 3.0]),
            1.0
        );
        // random sequence matches direct evaluation
        let mut rng = seeded_rng(3);
        let xs: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..8.0)).collect();
        let a: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let direct: f64 = a
            .windows(2)
            .map(|w| {
                let j = (w[1] - w[0]).abs();
                let ex = (j - 2.0).max(0.0);
                ex * ex
            })
            .sum();
        assert!((eval(|g, v| loss_jerk(g, v, 2.0), &xs) - direct).abs() < 1e-9);
    }

    #[test]
    fn accel_dist_kernel() {
        // alternating +-0.5 acceleration has sigma exactly 0.5
        let v = [0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0];
        let got = eval(|g, v| loss_accel_dist(g, v, 0.5), &v);
        assert!(got.abs() < 1e-12, "{got}");
        // constant speed: sigma 0 -> (0.5)^2
        assert_eq!(
            eval(|g, v| loss_accel_dist(g, v, 0.5), &[3.0, 3.0, 3.0, 3.0]),
            0.25
        );
        // random case matches the direct formula
        let mut rng = seeded_rng(4);
        let xs: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..12.0)).collect();
        let a: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let sigma = crate::trip::population_std(&a);
        let expect = (sigma - 0.5) * (sigma - 0.5);
        assert!((eval(|g, v| loss_accel_dist(g, v, 0.5), &xs) - expect).abs() < 1e-9);
    }

    #[test]
    fn csdi_weight_application() {
        // a case where only the curvature term is nonzero and equals 1
        let g = Graph::new();
        let eps = g.leaf(row(&[0.0; 8]));
        let eps_hat = g.leaf(row(&[0.0; 8]));
        // second difference of 1 exactly once; steps within caps; sigma_a
        // matched by alternating accelerations would disturb it, so instead
        // verify against the independently computed component values
        let v = g.leaf(row(&[0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0, 0.5, 0.0]));
        let parts = loss_csdi(&g, eps, eps_hat, v, &PhysicsWeights::default());
        let total = g.value(parts.total).item();
        let expect = g.value(parts.mse).item()
            + 0.1 * g.value(parts.smooth).item()
            + 0.03 * g.value(parts.accel).item()
            + 0.02 * g.value(parts.jerk).item()
            + 0.05 * g.value(parts.accel_dist).item();
        assert!((total - expect).abs() < 1e-12);
        // pure weight check: all parts zero except smooth == 1 -> total 0.1
        let lin = g.leaf(row(&[0.0, 0.0, 1.0]));
        let parts2 = loss_csdi(&g, eps, eps_hat, lin, &PhysicsWeights::default());
        let smooth_only = g.value(parts2.smooth).item();
        assert_eq!(smooth_only, 1.0);
        // contribution of the curvature term to the total is its weight
        let t2 = g.value(parts2.total).item();
        let rest = g.value(parts2.mse).item()
            + 0.03 * g.value(parts2.accel).item()
            + 0.02 * g.value(parts2.jerk).item()
            + 0.05 * g.value(parts2.accel_dist).item();
        assert!((t2 - rest - 0.1).abs() < 1e-12);
    }

    #[test]
    fn random_weighted_sum_matches_hand_weighting() {
        let mut rng = seeded_rng(5);
        let xs: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..15.0)).collect();
        let es: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hs: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = Graph::new();
        let eps = g.leaf(row(&es));
        let eps_hat = g.leaf(row(&hs));
        let v = g.leaf(row(&xs));
        let w = PhysicsWeights::default();
        let parts = loss_csdi(&g, eps, eps_hat, v, &w);
        let hand = g.value(parts.mse).item()
            + w.lambda_smooth * g.value(parts.smooth).item()
            + w.lambda_accel * g.value(parts.accel).item()
            + w.lambda_jerk * g.value(parts.jerk).item()
            + w.lambda_accel_dist * g.value(parts.accel_dist).item();
        assert!((g.value(parts.total).item() - hand).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_fd() {
        let build = |g: &Graph, ids: &[VarId]| {
            let parts = loss_csdi(g, ids[0], ids[1], ids[2], &PhysicsWeights::default());
            parts.total
        };
        let mut rng = seeded_rng(6);
        let eps = Tensor::from_vec(1, 16, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let eps_hat =
            Tensor::from_vec(1, 16, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let v = Tensor::from_vec(1, 16, (0..16).map(|_| rng.random_range(0.0..14.0)).collect())
            .unwrap();
        let report = grad_check(&build, &[eps, eps_hat, v], 16, 9).unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
