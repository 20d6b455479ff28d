//! Disney-style diffuse lobe with retro-reflection plus a Schlick
//! microfacet specular lobe.
//!
//! ```text
//! f_d = c/π (1 - f_l/2)(1 - f_v/2) + c/π R [f_l + f_v + f_l f_v (R - 1)]
//! f_l = (1 - n·l)^5,  f_v = (1 - n·v)^5,  R = 2 r (h·v)²
//! f_s = F G D / (4 (n·v)(n·l))
//! F   = F0 + (1 - F0)(1 - h·v)^5,  F0 = 0.04 (1 - m) + c m
//! G   = G1(v) G1(l),  G1(v) = n·v / (2 [α + (1 - α) n·v])
//! D   = α² / (π ((n·h)² (α² - 1) + 1)²),  α = r²
//! ```
//!
//! Cosines are clamped to `[1e-4, 1]` and `α` to at least `1e-3`. When
//! `n·l ≤ 0` the light is below the surface and both lobes vanish. With
//! `metallic_scales_diffuse` the diffuse lobe is scaled by `1 - m`.
//!
//! The scalar functions and the batched graph version [`bsdf_var`] share
//! these definitions.

use std::f64::consts::PI;

use crate::diffengine::{Tensor, Var};

pub const COS_EPS: f64 = 1e-4;
pub const ALPHA_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Material {
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

/// Shading vectors with their clamped cosines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingFrame {
    pub n: [f64; 3],
    pub v: [f64; 3],
    pub l: [f64; 3],
    pub h: [f64; 3],
    pub n_dot_l: f64,
    pub n_dot_v: f64,
    pub n_dot_h: f64,
    pub h_dot_v: f64,
    /// `n·l ≤ 0` before clamping.
    pub below_horizon: bool,
    /// `l = -v`; `h` fell back to `n`.
    pub degenerate: bool,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn clamp_cos(x: f64) -> f64 {
    x.clamp(COS_EPS, 1.0)
}

impl ShadingFrame {
    pub fn new(n: [f64; 3], v: [f64; 3], l: [f64; 3]) -> Self {
        let (h, degenerate) = half_vector(l, v, n);
        let raw_nl = dot(n, l);
        Self {
            n,
            v,
            l,
            h,
            n_dot_l: clamp_cos(raw_nl),
            n_dot_v: clamp_cos(dot(n, v)),
            n_dot_h: clamp_cos(dot(n, h)),
            h_dot_v: clamp_cos(dot(h, v)),
            below_horizon: raw_nl <= 0.0,
            degenerate,
        }
    }
}

/// `normalize(l + v)`; falls back to `n` with the flag set when `l = -v`.
pub fn half_vector(l: [f64; 3], v: [f64; 3], n: [f64; 3]) -> ([f64; 3], bool) {
    let s = [l[0] + v[0], l[1] + v[1], l[2] + v[2]];
    let len = dot(s, s).sqrt();
    if len < 1e-12 {
        return (n, true);
    }
    ([s[0] / len, s[1] / len, s[2] / len], false)
}

/// `(f_l, f_v) = ((1 - n·l)^5, (1 - n·v)^5)`.
pub fn schlick_weights(n_dot_l: f64, n_dot_v: f64) -> (f64, f64) {
    ((1.0 - n_dot_l).powi(5), (1.0 - n_dot_v).powi(5))
}

pub fn retro_r(roughness: f64, h_dot_v: f64) -> f64 {
    2.0 * roughness * h_dot_v * h_dot_v
}

pub fn f_diffuse(albedo: [f64; 3], roughness: f64, frame: &ShadingFrame) -> [f64; 3] {
    let (fl, fv) = schlick_weights(frame.n_dot_l, frame.n_dot_v);
    let r = retro_r(roughness, frame.h_dot_v);
    let lobe = (1.0 - fl / 2.0) * (1.0 - fv / 2.0) + r * (fl + fv + fl * fv * (r - 1.0));
    albedo.map(|c| c / PI * lobe)
}

pub fn fresnel(h_dot_v: f64, albedo: [f64; 3], metallic: f64) -> [f64; 3] {
    let k = (1.0 - h_dot_v).powi(5);
    albedo.map(|c| {
        let f0 = 0.04 * (1.0 - metallic) + c * metallic;
        f0 + (1.0 - f0) * k
    })
}

pub fn specular_alpha(roughness: f64) -> f64 {
    (roughness * roughness).max(ALPHA_FLOOR)
}

pub fn geometry_term(n_dot_l: f64, n_dot_v: f64, alpha: f64) -> f64 {
    let g1 = |c: f64| c / (2.0 * (alpha + (1.0 - alpha) * c));
    g1(n_dot_v) * g1(n_dot_l)
}

pub fn ndf(n_dot_h: f64, alpha: f64) -> f64 {
    let alpha = alpha.max(ALPHA_FLOOR);
    let a2 = alpha * alpha;
    let d = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

pub fn f_specular(frame: &ShadingFrame, albedo: [f64; 3], roughness: f64, metallic: f64) -> [f64; 3] {
    let alpha = specular_alpha(roughness);
    let g = geometry_term(frame.n_dot_l, frame.n_dot_v, alpha);
    let d = ndf(frame.n_dot_h, alpha);
    let denom = 4.0 * frame.n_dot_v * frame.n_dot_l;
    fresnel(frame.h_dot_v, albedo, metallic).map(|f| f * g * d / denom)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BsdfValue {
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
    pub total: [f64; 3],
}

pub fn bsdf_eval(n: [f64; 3], v: [f64; 3], l: [f64; 3], material: &Material, metallic_scales_diffuse: bool) -> BsdfValue {
    let frame = ShadingFrame::new(n, v, l);
    if frame.below_horizon {
        return BsdfValue {
            diffuse: [0.0; 3],
            specular: [0.0; 3],
            total: [0.0; 3],
        };
    }
    let mut diffuse = f_diffuse(material.albedo, material.roughness, &frame);
    if metallic_scales_diffuse {
        diffuse = diffuse.map(|d| d * (1.0 - material.metallic));
    }
    let specular = f_specular(&frame, material.albedo, material.roughness, material.metallic);
    BsdfValue {
        diffuse,
        specular,
        total: std::array::from_fn(|k| diffuse[k] + specular[k]),
    }
}

pub struct BsdfVars<'g> {
    pub diffuse: Var<'g>,
    pub specular: Var<'g>,
    pub total: Var<'g>,
}

/// Batched evaluation on the graph. `n`, `v`, `l`, `albedo` are `[N, 3]`,
/// `roughness` and `metallic` are `[N, 1]`.
pub fn bsdf_var<'g>(
    n: Var<'g>,
    v: Var<'g>,
    l: Var<'g>,
    albedo: Var<'g>,
    roughness: Var<'g>,
    metallic: Var<'g>,
    metallic_scales_diffuse: bool,
) -> BsdfVars<'g> {
    let h = (l + v).normalize(1e-12);
    let raw_nl = n.dot(l);
    let nl = raw_nl.clamp(COS_EPS, 1.0);
    let nv = n.dot(v).clamp(COS_EPS, 1.0);
    let nh = n.dot(h).clamp(COS_EPS, 1.0);
    let hv = h.dot(v).clamp(COS_EPS, 1.0);

    let fl = (1.0 - nl).pow(5.0);
    let fv = (1.0 - nv).pow(5.0);
    let r = roughness * hv.square() * 2.0;
    let lobe = (1.0 - fl * 0.5) * (1.0 - fv * 0.5) + r * (fl + fv + fl * fv * (r - 1.0));
    let mut diffuse = albedo * (lobe * (1.0 / PI));
    if metallic_scales_diffuse {
        diffuse = diffuse * (1.0 - metallic);
    }

    let f0 = (1.0 - metallic) * 0.04 + albedo * metallic;
    let f = f0 + (1.0 - f0) * (1.0 - hv).pow(5.0);
    let alpha = roughness.square().max(n.constant_like(Tensor::scalar(ALPHA_FLOOR)));
    let g1 = |c: Var<'g>| c / ((alpha + (1.0 - alpha) * c) * 2.0);
    let g = g1(nv) * g1(nl);
    let a2 = alpha.square();
    let dd = nh.square() * (a2 - 1.0) + 1.0;
    let d = a2 / (dd.square() * PI);
    let specular = f * (g * d / (nv * nl * 4.0));

    // light below the surface contributes nothing
    let lit = raw_nl.value().map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    let diffuse = diffuse.mask_mul(lit.broadcast_cols(3));
    let specular = specular.mask_mul(lit.broadcast_cols(3));
    BsdfVars {
        diffuse,
        specular,
        total: diffuse + specular,
    }
}

trait BroadcastCols {
    fn broadcast_cols(&self, cols: usize) -> Tensor;
}

impl BroadcastCols for Tensor {
    fn broadcast_cols(&self, cols: usize) -> Tensor {
        let data = self.data().iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect();
        Tensor::from_vec(self.rows(), cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffengine::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent transcription of the model, written from the equations
    /// with no shared helpers.
    fn oracle(n: [f64; 3], v: [f64; 3], l: [f64; 3], c: [f64; 3], r: f64, m: f64, scale_diffuse: bool) -> [f64; 3] {
        let d3 = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let nl_raw = d3(n, l);
        if nl_raw <= 0.0 {
            return [0.0; 3];
        }
        let hs = [l[0] + v[0], l[1] + v[1], l[2] + v[2]];
        let hn = d3(hs, hs).sqrt();
        let h = [hs[0] / hn, hs[1] / hn, hs[2] / hn];
        let cl = |x: f64| f64::min(f64::max(x, 1e-4), 1.0);
        let nl = cl(nl_raw);
        let nv = cl(d3(n, v));
        let nh = cl(d3(n, h));
        let hv = cl(d3(h, v));
        let f_l = (1.0 - nl) * (1.0 - nl) * (1.0 - nl) * (1.0 - nl) * (1.0 - nl);
        let f_v = (1.0 - nv) * (1.0 - nv) * (1.0 - nv) * (1.0 - nv) * (1.0 - nv);
        let big_r = 2.0 * r * hv * hv;
        let a = f64::max(r * r, 1e-3);
        let g = (nv / (2.0 * (a + (1.0 - a) * nv))) * (nl / (2.0 * (a + (1.0 - a) * nl)));
        let q = nh * nh * (a * a - 1.0) + 1.0;
        let d = a * a / (PI * q * q);
        let k5 = (1.0 - hv) * (1.0 - hv) * (1.0 - hv) * (1.0 - hv) * (1.0 - hv);
        std::array::from_fn(|i| {
            let base = c[i] / PI * (1.0 - f_l / 2.0) * (1.0 - f_v / 2.0);
            let retro = c[i] / PI * big_r * (f_l + f_v + f_l * f_v * (big_r - 1.0));
            let mut diff = base + retro;
            if scale_diffuse {
                diff *= 1.0 - m;
            }
            let f0 = 0.04 * (1.0 - m) + c[i] * m;
            let f = f0 + (1.0 - f0) * k5;
            diff + f * g * d / (4.0 * nv * nl)
        })
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs().max(1.0)
    }

    fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        crate::quadrature::random_unit(rng)
    }

    #[test]
    fn half_vector_examples() {
        let l = [0.0, 0.6, 0.8];
        assert_eq!(half_vector(l, l, [0.0, 0.0, 1.0]).0, l);
        let (h, _) = half_vector([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((h[0] - s).abs() < 1e-15 && h[1] == 0.0 && (h[2] - s).abs() < 1e-15);
        let (h, flag) = half_vector([0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]);
        assert!(flag);
        assert_eq!(h, [1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (h, _) = half_vector(unit(&mut rng), unit(&mut rng), [0.0, 0.0, 1.0]);
            assert!((dot(h, h) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn term_examples() {
        assert_eq!(schlick_weights(1.0, 1.0), (0.0, 0.0));
        assert!((schlick_weights(COS_EPS, 1.0).0 - 1.0).abs() < 1e-3);
        assert_eq!(schlick_weights(0.5, 0.5).0, 0.03125);
        assert_eq!(retro_r(0.0, 0.7), 0.0);
        assert_eq!(retro_r(0.5, 1.0), 1.0);
        assert_eq!(retro_r(1.0, 0.5), 0.5);
        assert!((fresnel(1.0, [0.3; 3], 0.0)[0] - 0.04).abs() < 1e-15);
        assert_eq!(fresnel(0.0, [0.3, 0.5, 0.9], 0.2), [1.0; 3]);
        assert_eq!(fresnel(1.0, [0.3, 0.5, 0.9], 1.0), [0.3, 0.5, 0.9]);
        assert!((geometry_term(1.0, 1.0, 0.37) - 0.25).abs() < 1e-15);
        assert_eq!(geometry_term(0.6, 0.6, 0.2), geometry_term(0.6, 0.6, 0.2));
        for nh in [0.1, 0.5, 0.99] {
            assert!((ndf(nh, 1.0) - 1.0 / PI).abs() < 1e-15);
        }
        assert!((ndf(1.0, 0.3) - 1.0 / (PI * 0.09)).abs() < 1e-12);
        assert!(ndf(0.8, 0.0).is_finite());
    }

    #[test]
    fn frozen_scalar_values() {
        // independent evaluations of the formulas at fixed arguments
        let g = geometry_term(0.8, 0.5, 0.25);
        let want_g = (0.5 / (2.0 * (0.25 + 0.75 * 0.5))) * (0.8 / (2.0 * (0.25 + 0.75 * 0.8)));
        assert!((g - want_g).abs() < 1e-12);
        assert!((g - 0.18823529411764706).abs() < 1e-12);
        let d = ndf(0.9, 0.25);
        assert!((d - 0.0625 / (PI * (0.81f64 * (0.0625 - 1.0) + 1.0).powi(2))).abs() < 1e-12);
        assert!((d - 0.3435964364270974).abs() < 1e-12);
    }

    #[test]
    fn diffuse_examples() {
        let n = [0.0, 0.0, 1.0];
        let f = ShadingFrame::new(n, n, n);
        let c = [0.2, 0.5, 0.9];
        let d = f_diffuse(c, 0.7, &f);
        for k in 0..3 {
            assert!((d[k] - c[k] / PI).abs() < 1e-15);
        }
        assert_eq!(f_diffuse([0.0; 3], 0.7, &f), [0.0; 3]);
        // hand-built frame at n·l = n·v = 0.5, h·v = 0.7
        let frame = ShadingFrame {
            n_dot_l: 0.5,
            n_dot_v: 0.5,
            n_dot_h: 0.9,
            h_dot_v: 0.7,
            ..f
        };
        let got = f_diffuse([0.8; 3], 0.4, &frame);
        let (fl, fv) = (0.03125, 0.03125);
        let r = 2.0 * 0.4 * 0.49;
        let want = 0.8 / PI * (1.0 - fl / 2.0) * (1.0 - fv / 2.0) + 0.8 / PI * r * (fl + fv + fl * fv * (r - 1.0));
        assert!((got[0] - want).abs() < 1e-12);
        assert!((got[0] - 0.25293193616047793).abs() < 1e-12);
    }

    #[test]
    fn specular_edge_cases() {
        let n = [0.0, 0.0, 1.0];
        let v = [0.6, 0.0, 0.8];
        let l = [-0.6, 0.0, 0.8];
        let f = ShadingFrame::new(n, v, l);
        // F vanishes for a black metal seen head-on (F0 = 0, h·v = 1)
        let spec_black_metal = f_specular(&ShadingFrame { h_dot_v: 1.0, ..f }, [0.0; 3], 0.5, 1.0);
        assert_eq!(spec_black_metal, [0.0; 3]);
        let grazing = ShadingFrame::new(n, v, [1.0, 0.0, 0.0]);
        assert!(f_specular(&grazing, [0.5; 3], 0.0, 0.0).iter().all(|x| x.is_finite()));
        let below = bsdf_eval(n, v, [0.0, 0.6, -0.8], &Material { albedo: [0.5; 3], roughness: 0.5, metallic: 0.0 }, true);
        assert_eq!(below.total, [0.0; 3]);
        let collapse = bsdf_eval(n, n, n, &Material { albedo: [0.5; 3], roughness: 0.0, metallic: 0.0 }, true);
        assert!((collapse.diffuse[0] - 0.5 / PI).abs() < 1e-15);
    }

    #[test]
    fn matches_oracle_on_random_configurations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..10_000 {
            let (n, v, l) = (unit(&mut rng), unit(&mut rng), unit(&mut rng));
            let c: [f64; 3] = std::array::from_fn(|_| rng.random());
            let (r, m) = (rng.random::<f64>(), rng.random::<f64>());
            let scale = i % 2 == 0;
            let got = bsdf_eval(n, v, l, &Material { albedo: c, roughness: r, metallic: m }, scale).total;
            let want = oracle(n, v, l, c, r, m, scale);
            for k in 0..3 {
                assert!(close(got[k], want[k]), "{got:?} vs {want:?}");
                assert!(got[k] >= 0.0 && got[k].is_finite());
            }
        }
    }

    #[test]
    fn graph_version_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let count = 500;
        let mut rows: [Vec<[f64; 3]>; 4] = Default::default();
        let mut rough = Vec::new();
        let mut metal = Vec::new();
        for _ in 0..count {
            rows[0].push(unit(&mut rng));
            rows[1].push(unit(&mut rng));
            rows[2].push(unit(&mut rng));
            rows[3].push(std::array::from_fn(|_| rng.random()));
            rough.push(rng.random::<f64>());
            metal.push(rng.random::<f64>());
        }
        let g = Graph::new();
        let c = |r: &Vec<[f64; 3]>| g.constant(Tensor::from_rows(r));
        let out = bsdf_var(
            c(&rows[0]),
            c(&rows[1]),
            c(&rows[2]),
            c(&rows[3]),
            g.constant(Tensor::column(&rough)),
            g.constant(Tensor::column(&metal)),
            true,
        );
        let total = out.total.value();
        for i in 0..count {
            let mat = Material { albedo: rows[3][i], roughness: rough[i], metallic: metal[i] };
            let want = bsdf_eval(rows[0][i], rows[1][i], rows[2][i], &mat, true).total;
            for k in 0..3 {
                assert!(close(total.get(i, k), want[k]), "row {i}");
            }
        }
    }

    #[test]
    fn specular_is_symmetric_in_light_and_view() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let (n, v, l) = (unit(&mut rng), unit(&mut rng), unit(&mut rng));
            let c = [0.3, 0.6, 0.2];
            let a = f_specular(&ShadingFrame::new(n, v, l), c, 0.4, 0.3);
            let b = f_specular(&ShadingFrame::new(n, l, v), c, 0.4, 0.3);
            for k in 0..3 {
                assert!(close(a[k], b[k]));
            }
        }
    }

    #[test]
    fn diffuse_depends_on_light_direction() {
        let n = [0.0, 0.0, 1.0];
        let v = [0.0, 0.6, 0.8];
        let vals: Vec<f64> = (0..50)
            .map(|i| {
                let th = i as f64 / 50.0 * 1.5;
                let f = ShadingFrame::new(n, v, [th.sin(), 0.0, th.cos()]);
                f_diffuse([0.5; 3], 0.6, &f)[0]
            })
            .collect();
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread > 0.0);
    }

    #[test]
    fn alpha_is_roughness_squared() {
        assert_eq!(specular_alpha(0.5), 0.25);
        assert_eq!(specular_alpha(0.9), 0.81);
        assert_eq!(specular_alpha(0.0), ALPHA_FLOOR);
    }
}
