//! Training objectives.
//!
//! ```text
//! L = l_r + λ1 l_surf + λ2 l_vol
//!   + w_eik eikonal + w_hess hessian + w_light light + w_mask mask
//! ```
//!
//! `l_surf` compares the surface shading with the radiance rendering, which
//! acts as a detached pseudo ground truth, and is scaled per ray by
//! `1 - w_max` (also detached).

use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::config::{HessianMode, LossConfig};
use crate::diffengine::{concat, Graph, Tensor, Var};

/// BCE clamp for the mask loss.
pub const MASK_EPS: f64 = 1e-6;

pub struct ColorLosses<'g> {
    pub l_r: Var<'g>,
    pub l_surf: Var<'g>,
    pub l_vol: Var<'g>,
}

/// Mean L1 color losses over a batch of `[R, 3]` renders. `w_max` is
/// `[R, 1]`. With `surface_factor` each ray's `l_surf` term is scaled by
/// `1 - w_max`.
pub fn color_losses<'g>(
    l_r: Var<'g>,
    l_surf: Var<'g>,
    l_vol: Var<'g>,
    l_gt: Var<'g>,
    w_max: Var<'g>,
    surface_factor: bool,
) -> ColorLosses<'g> {
    color_losses_against(l_r, l_surf, l_vol, l_gt, l_r, w_max, surface_factor)
}

/// [`color_losses`] with the pseudo ground truth and the confidence weight
/// given separately. Both enter without gradient, so passing constants
/// equal to `l_r` and `w_max` gives the same value and gradient.
pub fn color_losses_against<'g>(
    l_r: Var<'g>,
    l_surf: Var<'g>,
    l_vol: Var<'g>,
    l_gt: Var<'g>,
    pseudo: Var<'g>,
    w_max: Var<'g>,
    surface_factor: bool,
) -> ColorLosses<'g> {
    assert!(l_r.rows() > 0, "empty batch");
    let mut surf = (l_surf - pseudo.detach()).abs();
    if surface_factor {
        surf = surf * (1.0 - w_max.detach());
    }
    ColorLosses {
        l_r: (l_r - l_gt).abs().mean(),
        l_surf: surf.mean(),
        l_vol: (l_vol - l_gt).abs().mean(),
    }
}

/// `l_r + λ1 l_surf + λ2 l_vol`, for plain numbers or graph nodes.
pub fn total_color<T>(l_r: T, l_surf: T, l_vol: T, lambda1: f64, lambda2: f64) -> T
where
    T: Add<Output = T>,
    f64: Mul<T, Output = T>,
{
    l_r + lambda1 * l_surf + lambda2 * l_vol
}

/// `mean |1 - ‖∇f‖|` over `[N, 3]` gradients.
pub fn eikonal_loss(gradients: Var<'_>) -> Var<'_> {
    (1.0 - gradients.l2_norm()).abs().mean()
}

/// Rows of the Hessian of `sdf` at `points`, as `[N, 3]` blocks for
/// `∂/∂x`, `∂/∂y`, `∂/∂z` of the gradient.
pub fn hessian_rows<'g>(
    graph: &'g Graph,
    sdf: &dyn Fn(Var<'g>) -> Var<'g>,
    points: &Tensor,
    mode: HessianMode,
    step: f64,
) -> Vec<Var<'g>> {
    match mode {
        HessianMode::Exact => {
            let x = graph.input(points.clone());
            let g = graph.grad_wrt_input(sdf(x), x).expect("points feed the sdf");
            (0..3)
                .map(|j| {
                    // zero rows where the gradient does not depend on x at all
                    let gj = g.slice_cols(j, j + 1);
                    let seed = Tensor::ones(gj.rows(), 1);
                    graph.grad_with_seed(gj, seed, &[x], true).expect("same graph")[0]
                })
                .collect()
        }
        HessianMode::FiniteDifference => {
            let grad_at = |shift: f64, j: usize| {
                let mut p = points.clone();
                for r in 0..p.rows() {
                    p.set(r, j, p.get(r, j) + shift);
                }
                let x = graph.input(p);
                graph.grad_wrt_input(sdf(x), x).expect("points feed the sdf")
            };
            (0..3)
                .map(|j| (grad_at(step, j) - grad_at(-step, j)) * (0.5 / step))
                .collect()
        }
    }
}

/// Mean absolute Hessian entry.
pub fn hessian_loss<'g>(rows: &[Var<'g>]) -> Var<'g> {
    concat(rows).abs().mean()
}

/// Mean of per-column population variances of a `[B, C]` batch.
pub fn batch_variance(v: Var<'_>) -> Var<'_> {
    v.variance().mean()
}

/// `λ3 |var(x) - var(I)| + λ4 |var(n) - var(l)| + λ5 |var(x) - var(l)|` over
/// the surface points of a batch; zero below two points.
pub fn light_variance_loss<'g>(x: Var<'g>, n: Var<'g>, l: Var<'g>, intensity: Var<'g>, config: &LossConfig) -> Var<'g> {
    if x.rows() < 2 {
        return x.constant_like(Tensor::scalar(0.0));
    }
    let (vx, vn, vl, vi) = (batch_variance(x), batch_variance(n), batch_variance(l), batch_variance(intensity));
    config.lambda3 * (vx - vi).abs() + config.lambda4 * (vn - vl).abs() + config.lambda5 * (vx - vl).abs()
}

/// Mean binary cross-entropy of the accumulated weight against the mask.
pub fn mask_loss<'g>(w_sum: Var<'g>, mask: &[bool]) -> Var<'g> {
    assert_eq!(w_sum.rows(), mask.len());
    let w = w_sum.clamp(MASK_EPS, 1.0 - MASK_EPS);
    let m = Tensor::column(&mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>());
    let m = w.constant_like(m);
    let bce = -(m * w.ln() + (1.0 - m) * (1.0 - w).ln());
    bce.mean()
}

/// Hessian weight after linear decay to zero over the first
/// `hessian_decay_fraction` of training.
pub fn hessian_weight_at(config: &LossConfig, step: usize, max_steps: usize) -> f64 {
    let span = config.hessian_decay_fraction * max_steps as f64;
    if span <= 0.0 {
        return config.hessian_weight;
    }
    config.hessian_weight * (1.0 - step as f64 / span).max(0.0)
}

/// Every loss component as a graph node.
pub struct LossTerms<'g> {
    pub l_r: Var<'g>,
    pub l_surf: Var<'g>,
    pub l_vol: Var<'g>,
    pub eikonal: Var<'g>,
    pub hessian: Var<'g>,
    pub light: Var<'g>,
    pub mask: Var<'g>,
}

impl<'g> LossTerms<'g> {
    /// The weighted sum, with the Hessian weight passed explicitly because
    /// it follows a schedule.
    pub fn total(&self, config: &LossConfig, hessian_weight: f64) -> Var<'g> {
        total_color(self.l_r, self.l_surf, self.l_vol, config.lambda1, config.lambda2)
            + config.eikonal_weight * self.eikonal
            + hessian_weight * self.hessian
            + config.light_weight * self.light
            + config.mask_weight * self.mask
    }

    pub fn breakdown(&self, total: Var<'g>) -> LossBreakdown {
        LossBreakdown {
            l_r: self.l_r.item(),
            l_surf: self.l_surf.item(),
            l_vol: self.l_vol.item(),
            eikonal: self.eikonal.item(),
            hessian: self.hessian.item(),
            light: self.light.item(),
            mask: self.mask.item(),
            total: total.item(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_surf: f64,
    pub l_vol: f64,
    pub eikonal: f64,
    pub hessian: f64,
    pub light: f64,
    pub mask: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes `total` from the components.
    pub fn weighted_total(&self, config: &LossConfig, hessian_weight: f64) -> f64 {
        total_color(self.l_r, self.l_surf, self.l_vol, config.lambda1, config.lambda2)
            + config.eikonal_weight * self.eikonal
            + hessian_weight * self.hessian
            + config.light_weight * self.light
            + config.mask_weight * self.mask
    }

    pub fn is_finite(&self) -> bool {
        [self.l_r, self.l_surf, self.l_vol, self.eikonal, self.hessian, self.light, self.mask, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rows<'g>(g: &'g Graph, v: &[[f64; 3]]) -> Var<'g> {
        g.input(Tensor::from_rows(v))
    }

    #[test]
    fn color_loss_examples() {
        let g = Graph::new();
        let a = rows(&g, &[[0.2, 0.4, 0.6]]);
        let w = g.input(Tensor::scalar(0.8));
        let c = color_losses(a, a, a, a, w, true);
        assert_eq!((c.l_r.item(), c.l_surf.item(), c.l_vol.item()), (0.0, 0.0, 0.0));
        let surf = rows(&g, &[[0.3, 0.5, 0.7]]);
        let c = color_losses(a, surf, a, a, w, true);
        assert!((c.l_surf.item() - 0.02).abs() < 1e-15);
        let c = color_losses(a, surf, a, a, w, false);
        assert!((c.l_surf.item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn pseudo_ground_truth_and_confidence_are_detached() {
        let g = Graph::new();
        let lr = g.param(Tensor::from_rows(&[[0.2, 0.4, 0.6], [0.1, 0.1, 0.1]]));
        let surf = g.param(Tensor::from_rows(&[[0.3, 0.3, 0.3], [0.5, 0.0, 0.2]]));
        let w = g.param(Tensor::column(&[0.8, 0.3]));
        let gt = g.constant(Tensor::zeros(2, 3));
        let c = color_losses(lr, surf, lr, gt, w, true);
        let grads = g.grad(c.l_surf, &[lr, surf, w], false).unwrap();
        assert!(grads[0].value().data().iter().all(|&v| v == 0.0));
        assert!(grads[1].value().data().iter().any(|&v| v != 0.0));
        assert!(grads[2].value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn total_color_uses_the_published_weights() {
        let cfg = LossConfig::default();
        assert_eq!((cfg.lambda1, cfg.lambda2), (0.0003, 0.0001));
        let total = total_color(0.1, 0.2, 0.3, cfg.lambda1, cfg.lambda2);
        assert!((total - 0.10009).abs() < 1e-15);
        assert_eq!(total_color(0.0, 0.0, 0.0, cfg.lambda1, cfg.lambda2), 0.0);
        assert_eq!(total_color(0.1, 0.2, 0.3, 0.0, 0.0), 0.1);
    }

    #[test]
    fn eikonal_examples() {
        let g = Graph::new();
        assert_eq!(eikonal_loss(rows(&g, &[[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]])).item(), 0.0);
        assert!((eikonal_loss(rows(&g, &[[1.5, 0.0, 0.0], [0.0, 0.0, -1.5]])).item() - 0.5).abs() < 1e-15);
        assert!((eikonal_loss(rows(&g, &[[0.5, 0.0, 0.0], [0.0, 1.5, 0.0]])).item() - 0.5).abs() < 1e-15);
    }

    fn quadratic<'g>(a: [[f64; 3]; 3], b: [f64; 3]) -> impl Fn(Var<'g>) -> Var<'g> {
        move |x: Var<'g>| {
            let g = x.graph();
            let at = x.matmul(g.constant(Tensor::from_rows(&a)));
            (at * x).sum_cols() * 0.5 + x.matmul(g.constant(Tensor::column(&b)))
        }
    }

    #[test]
    fn hessian_examples() {
        let g = Graph::new();
        let pts = Tensor::from_rows(&[[0.1, 0.2, 0.3], [-0.4, 0.5, 0.0]]);
        fn linear<'g>(x: Var<'g>) -> Var<'g> {
            x.matmul(x.constant_like(Tensor::column(&[0.3, -1.0, 2.0])))
        }
        fn half_norm<'g>(x: Var<'g>) -> Var<'g> {
            x.square().sum_cols() * 0.5
        }
        for mode in [HessianMode::Exact, HessianMode::FiniteDifference] {
            assert_eq!(hessian_loss(&hessian_rows(&g, &linear, &pts, mode, 1e-4)).item(), 0.0);
        }
        let h = hessian_loss(&hessian_rows(&g, &half_norm, &pts, HessianMode::Exact, 1e-4)).item();
        assert!((h - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn exact_hessian_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut a = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in i..3 {
                a[i][j] = rng.random_range(-2.0..2.0);
                a[j][i] = a[i][j];
            }
        }
        let b = [0.1, -0.3, 0.7];
        let pts = Tensor::from_rows(&[[0.3, -0.2, 0.5], [0.0, 0.9, -0.1], [0.4, 0.4, 0.4]]);
        let g = Graph::new();
        let f = quadratic(a, b);
        let exact = hessian_rows(&g, &f, &pts, HessianMode::Exact, 0.0);
        let fd = hessian_rows(&g, &f, &pts, HessianMode::FiniteDifference, 1e-3);
        for j in 0..3 {
            let (e, d) = (exact[j].value(), fd[j].value());
            for r in 0..3 {
                for k in 0..3 {
                    assert!((e.get(r, k) - a[j][k]).abs() < 1e-12);
                    assert!((d.get(r, k) - a[j][k]).abs() < 1e-3);
                }
            }
        }
    }

    fn scalar_variance(v: &[Vec<f64>]) -> f64 {
        let cols = v[0].len();
        let n = v.len() as f64;
        (0..cols)
            .map(|c| {
                let mean = v.iter().map(|r| r[c]).sum::<f64>() / n;
                v.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n
            })
            .sum::<f64>()
            / cols as f64
    }

    #[test]
    fn light_variance_matches_scalar_reference() {
        let cfg = LossConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let batch = |rng: &mut rand_chacha::ChaCha8Rng, c: usize| -> Vec<Vec<f64>> {
            (0..17).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
        };
        let (x, n, l, i) = (batch(&mut rng, 3), batch(&mut rng, 3), batch(&mut rng, 3), batch(&mut rng, 3));
        let g = Graph::new();
        let t = |v: &Vec<Vec<f64>>| g.input(Tensor::from_vec(v.len(), v[0].len(), v.concat()));
        let got = light_variance_loss(t(&x), t(&n), t(&l), t(&i), &cfg).item();
        let (vx, vn, vl, vi) = (scalar_variance(&x), scalar_variance(&n), scalar_variance(&l), scalar_variance(&i));
        let want = cfg.lambda3 * (vx - vi).abs() + cfg.lambda4 * (vn - vl).abs() + cfg.lambda5 * (vx - vl).abs();
        assert!((got - want).abs() < 1e-12);
        // constant batch and a single point
        let c = g.input(Tensor::full(5, 3, 0.3));
        assert_eq!(light_variance_loss(c, c, c, c, &cfg).item(), 0.0);
        let one = g.input(Tensor::from_rows(&[[0.1, 0.2, 0.3]]));
        assert_eq!(light_variance_loss(one, one, one, one, &cfg).item(), 0.0);
    }

    #[test]
    fn light_variance_worked_example() {
        // var(x) = 0.2, var(I) = 0.1, var(n) = var(l) = 0.2
        let cfg = LossConfig::default();
        let g = Graph::new();
        let spread = |v: f64| {
            let d = v.sqrt();
            g.input(Tensor::from_rows(&[[d, d, d], [-d, -d, -d]]))
        };
        let got = light_variance_loss(spread(0.2), spread(0.2), spread(0.2), spread(0.1), &cfg).item();
        assert!((got - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mask_examples() {
        let g = Graph::new();
        let w = g.input(Tensor::column(&[1.0 - MASK_EPS]));
        assert!(mask_loss(w, &[true]).item() < 2e-6);
        let half = g.input(Tensor::column(&[0.5, 0.5]));
        assert!((mask_loss(half, &[true, false]).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let wrong = g.input(Tensor::column(&[0.0]));
        assert!((mask_loss(wrong, &[true]).item() + MASK_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn hessian_weight_decays_linearly() {
        let cfg = LossConfig::default();
        assert_eq!(hessian_weight_at(&cfg, 0, 1000), cfg.hessian_weight);
        assert!((hessian_weight_at(&cfg, 250, 1000) - cfg.hessian_weight / 2.0).abs() < 1e-18);
        assert_eq!(hessian_weight_at(&cfg, 500, 1000), 0.0);
        assert_eq!(hessian_weight_at(&cfg, 900, 1000), 0.0);
    }

    #[test]
    fn total_examples() {
        let cfg = LossConfig::default();
        let g = Graph::new();
        let z = || g.constant(Tensor::scalar(0.0));
        let mut terms = LossTerms { l_r: z(), l_surf: z(), l_vol: z(), eikonal: z(), hessian: z(), light: z(), mask: z() };
        assert_eq!(terms.total(&cfg, 1.0).item(), 0.0);
        terms.l_r = g.constant(Tensor::scalar(1.0));
        assert_eq!(terms.total(&cfg, 1.0).item(), 1.0);
        let back: LossConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    proptest! {
        #[test]
        fn components_are_nonnegative_and_sum_to_total(vals in proptest::collection::vec(0.0f64..10.0, 7), hw in 0.0f64..1e-3) {
            let cfg = LossConfig::default();
            let g = Graph::new();
            let c = |v: f64| g.constant(Tensor::scalar(v));
            let terms = LossTerms { l_r: c(vals[0]), l_surf: c(vals[1]), l_vol: c(vals[2]), eikonal: c(vals[3]), hessian: c(vals[4]), light: c(vals[5]), mask: c(vals[6]) };
            let total = terms.total(&cfg, hw);
            let b = terms.breakdown(total);
            prop_assert!(b.total >= 0.0);
            prop_assert!((b.weighted_total(&cfg, hw) - b.total).abs() <= 1e-12 * b.total.max(1.0));
        }
    }
}
