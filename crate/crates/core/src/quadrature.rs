//! Rays, sample placement and the NeuS weight function.
//!
//! A ray with samples `t_0 < … < t_{n-1}` has `n - 1` intervals. Interval
//! `i` gets the discrete opacity
//!
//! ```text
//! α_i = clamp((Φ_s(f_i) - Φ_s(f_{i+1})) / Φ_s(f_i), 0, 1 - ε)
//! ```
//!
//! with `Φ_s(x) = sigmoid(s x)` and `f_i` the SDF at `t_i`, and the weight
//! `w_i = α_i ∏_{j<i} (1 - α_j)`. Per-interval quantities are evaluated at
//! the left end point `t_i`.
//!
//! The scene lives inside the unit sphere; `t_near` and `t_far` come from
//! the ray–sphere intersection.

use rand::Rng;

use crate::diffengine::{sigmoid, softplus, Tensor, Var};
use crate::sceneio::Camera;

/// Upper clamp on α keeps `ln(1 - α)` finite.
pub const ALPHA_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    /// Missing or grazing the bounding sphere.
    pub fn is_background(&self) -> bool {
        self.t_far - self.t_near <= 1e-9
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|k| self.origin[k] + t * self.dir[k])
    }
}

/// Ray of `origin + t dir` clipped to the unit sphere. A miss yields
/// `t_near == t_far` at the point of closest approach.
pub fn clip_to_unit_sphere(origin: [f64; 3], dir: [f64; 3]) -> Ray {
    let b = dot(origin, dir);
    let c = dot(origin, origin) - 1.0;
    let disc = b * b - c;
    let (mut t_near, mut t_far) = (-b, -b);
    if disc > 0.0 {
        let r = disc.sqrt();
        t_near = (-b - r).max(0.0);
        t_far = -b + r;
        if t_far <= 0.0 {
            t_near = t_far;
        }
    }
    Ray {
        origin,
        dir,
        t_near,
        t_far,
    }
}

/// Ray through the center of pixel `(px, py)`.
pub fn ray_from_pixel(camera: &Camera, px: usize, py: usize) -> Ray {
    let dir = camera.direction(px as f64 + 0.5, py as f64 + 0.5);
    clip_to_unit_sphere(camera.center(), dir)
}

/// `n` samples, one per equal stratum of `[t_near, t_far]`; midpoints when
/// `rng` is `None`, uniformly jittered otherwise.
pub fn stratified_samples(ray: &Ray, n: usize, rng: Option<&mut dyn rand::RngCore>) -> Vec<f64> {
    assert!(n >= 2, "need at least two samples");
    let span = ray.t_far - ray.t_near;
    let step = span / n as f64;
    match rng {
        None => (0..n).map(|i| ray.t_near + (i as f64 + 0.5) * step).collect(),
        Some(rng) => (0..n)
            .map(|i| ray.t_near + (i as f64 + rng.random::<f64>()) * step)
            .collect(),
    }
}

/// `Φ_s(x) = 1 / (1 + e^{-s x})`.
pub fn logistic_cdf(x: f64, s: f64) -> f64 {
    sigmoid(s * x)
}

/// `(Φ_s(f_i) - Φ_s(f_next)) / Φ_s(f_i)`, evaluated as
/// `1 - exp(ln Φ_s(f_next) - ln Φ_s(f_i))` so that deep inside the surface,
/// where both CDF values underflow, the ratio stays defined.
pub fn alpha_discrete(f_i: f64, f_next: f64, s: f64) -> f64 {
    let log_cdf = |x: f64| -softplus(-s * x, 1.0);
    (1.0 - (log_cdf(f_next) - log_cdf(f_i)).exp()).clamp(0.0, 1.0 - ALPHA_EPS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightProfile {
    pub alpha: Vec<f64>,
    pub w: Vec<f64>,
    pub w_sum: f64,
    /// Index of the largest weight; the nearest one on ties.
    pub argmax: usize,
}

pub fn weights(alphas: &[f64]) -> WeightProfile {
    let mut transmittance = 1.0;
    let w: Vec<f64> = alphas
        .iter()
        .map(|&a| {
            let wi = a * transmittance;
            transmittance *= 1.0 - a;
            wi
        })
        .collect();
    let w_sum = w.iter().sum();
    WeightProfile {
        alpha: alphas.to_vec(),
        argmax: argmax_first(&w),
        w,
        w_sum,
    }
}

pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax index of a ray, or `None` for a background ray whose weight mass
/// is at most `threshold`.
pub fn surface_index(profile: &WeightProfile, threshold: f64) -> Option<usize> {
    (profile.w_sum > threshold).then_some(profile.argmax)
}

/// Profile of the SDF values `f` at the samples of one ray.
pub fn profile_from_sdf(f: &[f64], s: f64) -> WeightProfile {
    let alphas: Vec<f64> = f.windows(2).map(|p| alpha_discrete(p[0], p[1], s)).collect();
    weights(&alphas)
}

/// Inverse-CDF placement of `n` new depths over the intervals of `t` with
/// interval weights `w` (`w.len() == t.len() - 1`). Quantiles are the fixed
/// midpoints `(j + 0.5) / n`; a small floor keeps the density positive so a
/// flat profile gives uniform samples.
pub fn sample_pdf(t: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(w.len() + 1, t.len());
    let padded: Vec<f64> = w.iter().map(|&x| x.max(0.0) + 1e-5).collect();
    let total: f64 = padded.iter().sum();
    let mut cdf = Vec::with_capacity(t.len());
    cdf.push(0.0);
    let mut acc = 0.0;
    for p in &padded {
        acc += p / total;
        cdf.push(acc);
    }
    let mut k = 0;
    (0..n)
        .map(|j| {
            let u = (j as f64 + 0.5) / n as f64;
            while k + 1 < w.len() && cdf[k + 1] <= u {
                k += 1;
            }
            let frac = ((u - cdf[k]) / (cdf[k + 1] - cdf[k])).clamp(0.0, 1.0);
            t[k] + frac * (t[k + 1] - t[k])
        })
        .collect()
}

/// Sorted union that keeps every entry; ties are nudged apart so the
/// result is strictly ascending.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b).copied().collect();
    out.sort_by(f64::total_cmp);
    for i in 1..out.len() {
        let floor = out[i - 1] + 1e-9 * out[i - 1].abs().max(1.0);
        if out[i] < floor {
            out[i] = floor;
        }
    }
    out
}

/// One refinement round: `n_extra` new depths drawn from the weight profile
/// of `t` with the SDF values `f` at sharpness `s`, merged into `t`.
pub fn importance_resample(t: &[f64], f: &[f64], s: f64, n_extra: usize) -> Vec<f64> {
    let profile = profile_from_sdf(f, s);
    let extra = sample_pdf(t, &profile.w, n_extra);
    merge_sorted(t, &extra)
}

/// Sharpness of up-sampling round `round`: `64 · 2^round`.
pub fn round_sharpness(round: usize) -> f64 {
    64.0 * f64::powi(2.0, round as i32)
}

/// Opacity and weights on the graph. `sdf` is `[R, n]`; both results are
/// `[R, n - 1]`.
pub fn alpha_weights<'g>(sdf: Var<'g>, s: Var<'g>) -> (Var<'g>, Var<'g>) {
    let n = sdf.cols();
    let log_cdf = -(-(sdf * s)).softplus(1.0);
    let ratio = (log_cdf.slice_cols(1, n) - log_cdf.slice_cols(0, n - 1)).exp();
    let alpha = (1.0 - ratio).clamp(0.0, 1.0 - ALPHA_EPS);
    let transmittance = (1.0 - alpha).ln().cumsum_excl().exp();
    (alpha, alpha * transmittance)
}

/// Row-wise argmax of a `[R, m]` tensor, nearest index on ties.
pub fn row_argmax(w: &Tensor) -> Vec<usize> {
    (0..w.rows()).map(|r| argmax_first(w.row(r))).collect()
}

pub fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let n2 = dot(p, p);
        if n2 > 1e-6 && n2 <= 1.0 {
            let n = n2.sqrt();
            return [p[0] / n, p[1] / n, p[2] / n];
        }
    }
}

pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}
