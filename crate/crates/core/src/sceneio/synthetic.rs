//! Analytic ground-truth scenes: a closed-form shape lit by one distant
//! light, rendered by exact ray intersection and the scalar BSDF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Camera, SceneDataset};
use crate::bsdf::{bsdf_eval, Material};
use crate::quadrature::dot;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    /// Box of half extents `half`, inflated by `radius`.
    RoundedBox { half: [f64; 3], radius: f64 },
}

impl Shape {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "sphere" => Some(Shape::Sphere { radius: 0.5 }),
            "rounded-box" | "rounded_box" => Some(Shape::RoundedBox {
                half: [0.3, 0.25, 0.2],
                radius: 0.15,
            }),
            _ => None,
        }
    }

    pub fn sdf(&self, p: [f64; 3]) -> f64 {
        match *self {
            Shape::Sphere { radius } => dot(p, p).sqrt() - radius,
            Shape::RoundedBox { half, radius } => {
                let q: [f64; 3] = std::array::from_fn(|k| p[k].abs() - half[k]);
                let outside = q.map(|c| c.max(0.0));
                dot(outside, outside).sqrt() + q[0].max(q[1]).max(q[2]).min(0.0) - radius
            }
        }
    }

    /// Unit outward normal, exact on the surface.
    pub fn normal(&self, p: [f64; 3]) -> [f64; 3] {
        let g = match *self {
            Shape::Sphere { .. } => p,
            Shape::RoundedBox { half, .. } => {
                let q: [f64; 3] = std::array::from_fn(|k| p[k].abs() - half[k]);
                if q.iter().any(|&c| c > 0.0) {
                    std::array::from_fn(|k| q[k].max(0.0) * p[k].signum())
                } else {
                    let k = (0..3).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap();
                    let mut g = [0.0; 3];
                    g[k] = p[k].signum();
                    g
                }
            }
        };
        let len = dot(g, g).sqrt();
        g.map(|c| c / len)
    }

    /// First positive hit distance along a unit direction.
    pub fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Sphere { radius } => {
                let b = dot(origin, dir);
                let disc = b * b - (dot(origin, origin) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let r = disc.sqrt();
                [-b - r, -b + r].into_iter().find(|&t| t > 0.0)
            }
            Shape::RoundedBox { .. } => {
                // sphere tracing, exact for a true distance field
                let mut t = 0.0;
                for _ in 0..512 {
                    let p: [f64; 3] = std::array::from_fn(|k| origin[k] + t * dir[k]);
                    let d = self.sdf(p);
                    if d < 1e-12 {
                        return Some(t);
                    }
                    t += d;
                    if t > 1e3 {
                        return None;
                    }
                }
                Some(t)
            }
        }
    }

    /// Area-uniform surface samples.
    pub fn sample_surface(&self, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
        match *self {
            Shape::Sphere { radius } => (0..n)
                .map(|_| crate::quadrature::random_unit(rng))
                .map(|u| {
                    let len = dot(u, u).sqrt();
                    u.map(|c| radius * c / len)
                })
                .collect(),
            Shape::RoundedBox { half, radius } => (0..n).map(|_| rounded_box_point(half, radius, rng)).collect(),
        }
    }
}

/// The surface splits into 6 flat faces, 12 quarter cylinders and 8 sphere
/// octants; pick one by area, then sample it uniformly.
fn rounded_box_point(h: [f64; 3], r: f64, rng: &mut impl Rng) -> [f64; 3] {
    use std::f64::consts::PI;
    let face = |k: usize| 8.0 * h[(k + 1) % 3] * h[(k + 2) % 3];
    let edge = |k: usize| 4.0 * PI * r * h[k];
    let areas = [face(0), face(1), face(2), edge(0), edge(1), edge(2), 4.0 * PI * r * r];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut part = 0;
    while part < 6 && pick >= areas[part] {
        pick -= areas[part];
        part += 1;
    }
    let sign = |rng: &mut dyn rand::RngCore| if rng.random::<bool>() { 1.0 } else { -1.0 };
    let mut p = [0.0; 3];
    match part {
        0..=2 => {
            let k = part;
            p[k] = sign(rng) * (h[k] + r);
            for j in [(k + 1) % 3, (k + 2) % 3] {
                p[j] = rng.random_range(-h[j]..=h[j]);
            }
        }
        3..=5 => {
            let k = part - 3;
            let (i, j) = ((k + 1) % 3, (k + 2) % 3);
            let theta = rng.random::<f64>() * PI / 2.0;
            p[k] = rng.random_range(-h[k]..=h[k]);
            p[i] = sign(rng) * (h[i] + r * theta.cos());
            p[j] = sign(rng) * (h[j] + r * theta.sin());
        }
        _ => {
            let u = crate::quadrature::random_unit(rng);
            let len = dot(u, u).sqrt();
            for k in 0..3 {
                p[k] = u[k].signum() * (h[k] + r * u[k].abs() / len);
            }
        }
    }
    p
}

/// Ground truth stored next to a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub shape: Shape,
    pub material: Material,
    /// Unit direction toward the light.
    pub light_dir: [f64; 3],
    /// Irradiance scale of the distant light.
    pub light_intensity: [f64; 3],
}

impl GroundTruth {
    /// Linear radiance seen along a unit ray, or `None` on a miss.
    pub fn shade(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<[f64; 3]> {
        let t = self.shape.intersect(origin, dir)?;
        let p: [f64; 3] = std::array::from_fn(|k| origin[k] + t * dir[k]);
        let n = self.shape.normal(p);
        let v = dir.map(|c| -c);
        let f = bsdf_eval(n, v, self.light_dir, &self.material, true).total;
        let cos = dot(n, self.light_dir).max(0.0);
        Some(std::array::from_fn(|k| f[k] * self.light_intensity[k] * cos))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub truth: GroundTruth,
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Camera distance from the origin.
    pub distance: f64,
    /// Focal length in pixels per pixel of image width.
    pub focal_scale: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            truth: GroundTruth {
                shape: Shape::Sphere { radius: 0.5 },
                material: Material {
                    albedo: [0.7, 0.3, 0.3],
                    roughness: 0.5,
                    metallic: 0.0,
                },
                light_dir: [0.0, 0.0, 1.0],
                light_intensity: [3.0; 3],
            },
            n_views: 24,
            width: 64,
            height: 64,
            seed: 0,
            distance: 2.5,
            focal_scale: 1.6,
        }
    }
}

/// Camera positions on a spiral between 15° below and 75° above the
/// horizon, so most views see the lit upper half. The seed rotates the
/// spiral about `z`.
pub fn view_positions(n: usize, distance: f64, seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random::<f64>() * std::f64::consts::TAU;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let (lo, hi) = ((-15f64).to_radians().sin(), 75f64.to_radians().sin());
    (0..n)
        .map(|i| {
            let z = lo + (hi - lo) * (i as f64 + 0.5) / n as f64;
            let ring = (1.0 - z * z).sqrt();
            let phi = offset + golden * i as f64;
            [distance * ring * phi.cos(), distance * ring * phi.sin(), distance * z]
        })
        .collect()
}

pub fn make_synthetic(spec: &SyntheticSpec) -> SceneDataset {
    let focal = spec.focal_scale * spec.width as f64;
    let cameras: Vec<Camera> = view_positions(spec.n_views, spec.distance, spec.seed)
        .into_iter()
        .map(|eye| Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], focal, spec.width, spec.height))
        .collect();
    let mut images = Vec::with_capacity(cameras.len());
    let mut masks = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let origin = cam.center();
        let (mut img, mut mask) = (Vec::new(), Vec::new());
        for py in 0..cam.height {
            for px in 0..cam.width {
                let dir = cam.direction(px as f64 + 0.5, py as f64 + 0.5);
                match spec.truth.shade(origin, dir) {
                    Some(c) => {
                        img.push(c);
                        mask.push(true);
                    }
                    None => {
                        img.push([0.0; 3]);
                        mask.push(false);
                    }
                }
            }
        }
        images.push(img);
        masks.push(mask);
    }
    SceneDataset {
        cameras,
        images,
        masks,
        scene_scale: 1.0,
        ground_truth: Some(spec.truth.clone()),
    }
}
