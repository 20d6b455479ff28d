//! The three per-ray renderings and whole-image rendering.
//!
//! For samples `t_0 < … < t_{n-1}` with interval weights `w_i`:
//!
//! ```text
//! L_r    = Σ w_i · radiance_i
//! L_vol  = Σ w_i · bsdf_i ⊙ I_i
//! L_surf = bsdf_k ⊙ I_k,   k = argmax_i w_i
//! ```
//!
//! All three share one sample set and one weight profile. Interval `i` is
//! shaded at its left sample `t_i`; the normal is `∇f / ‖∇f‖` there and
//! `v = -dir`. No cosine factor appears: the photon field's `I` already
//! stands for the incident radiance of the dominant light.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::bsdf::bsdf_var;
use crate::config::{Config, SamplingConfig};
use crate::diffengine::{Graph, Tensor, Var};
use crate::fields::{BoundFields, LightOutput, MaterialOutput, ParameterSnapshot, SdfOutput, NORMAL_FLOOR};
use crate::quadrature::{
    merge_sorted, profile_from_sdf, ray_from_pixel, round_sharpness, row_argmax, sample_pdf, stratified_samples, Ray,
};
use crate::sceneio::{marching_cubes, write_png, Camera, MaterialMesh, VertexMaterial};
use crate::Error;

/// What the renderer needs from a scene representation. Implemented by the
/// trained networks and by the analytic test scene.
pub trait FieldEval<'g> {
    fn graph(&self) -> &'g Graph;
    fn sharpness(&self) -> Var<'g>;
    fn eval_sdf(&self, x: Var<'g>) -> SdfOutput<'g>;
    fn eval_radiance(&self, x: Var<'g>, n: Var<'g>, v: Var<'g>, feature: Var<'g>) -> Var<'g>;
    fn eval_material(&self, x: Var<'g>, n: Var<'g>, feature: Var<'g>) -> MaterialOutput<'g>;
    fn eval_photon(&self, x: Var<'g>, n: Var<'g>, feature: Var<'g>) -> LightOutput<'g>;
}

impl<'g> FieldEval<'g> for BoundFields<'g> {
    fn graph(&self) -> &'g Graph {
        self.graph
    }
    fn sharpness(&self) -> Var<'g> {
        BoundFields::sharpness(self)
    }
    fn eval_sdf(&self, x: Var<'g>) -> SdfOutput<'g> {
        BoundFields::eval_sdf(self, x)
    }
    fn eval_radiance(&self, x: Var<'g>, n: Var<'g>, v: Var<'g>, feature: Var<'g>) -> Var<'g> {
        BoundFields::eval_radiance(self, x, n, v, feature)
    }
    fn eval_material(&self, x: Var<'g>, n: Var<'g>, feature: Var<'g>) -> MaterialOutput<'g> {
        BoundFields::eval_material(self, x, n, feature)
    }
    fn eval_photon(&self, x: Var<'g>, n: Var<'g>, feature: Var<'g>) -> LightOutput<'g> {
        BoundFields::eval_photon(self, x, n, feature)
    }
}

/// Values-only SDF queries used to place importance samples.
pub trait SdfQuery {
    fn sdf_at(&self, points: &[[f64; 3]]) -> Vec<f64>;
}

impl SdfQuery for ParameterSnapshot {
    fn sdf_at(&self, points: &[[f64; 3]]) -> Vec<f64> {
        crate::fields::sdf_values(self, points, 4096)
    }
}

/// Sample depths for every ray: stratified coarse samples (jittered when
/// `rng` is given), then `up_sample_rounds` rounds of importance sampling
/// with sharpness `64 · 2^round`.
pub fn place_samples(
    scene: &impl SdfQuery,
    rays: &[Ray],
    sampling: &SamplingConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Vec<Vec<f64>> {
    let mut t: Vec<Vec<f64>> = rays
        .iter()
        .map(|ray| stratified_samples(ray, sampling.n_coarse, rng.as_deref_mut().map(|r| r as _)))
        .collect();
    if sampling.n_importance == 0 || sampling.up_sample_rounds == 0 {
        return t;
    }
    let points = |t: &[Vec<f64>]| -> Vec<[f64; 3]> {
        rays.iter()
            .zip(t)
            .flat_map(|(ray, ts)| ts.iter().map(|&ti| ray.at(ti)))
            .collect()
    };
    let mut f = split(&scene.sdf_at(&points(&t)), &t);
    for round in 0..sampling.up_sample_rounds {
        let s = round_sharpness(round);
        let extra: Vec<Vec<f64>> = t
            .iter()
            .zip(&f)
            .map(|(ts, fs)| sample_pdf(ts, &profile_from_sdf(fs, s).w, sampling.n_importance))
            .collect();
        let f_extra = split(&scene.sdf_at(&points(&extra)), &extra);
        for r in 0..rays.len() {
            let (tm, fm) = merge_pairs(&t[r], &f[r], &extra[r], &f_extra[r]);
            t[r] = tm;
            f[r] = fm;
        }
    }
    t
}

fn split(flat: &[f64], like: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(like.len());
    let mut at = 0;
    for v in like {
        out.push(flat[at..at + v.len()].to_vec());
        at += v.len();
    }
    out
}

fn merge_pairs(t: &[f64], f: &[f64], te: &[f64], fe: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pairs: Vec<(f64, f64)> = t.iter().copied().zip(f.iter().copied()).collect();
    pairs.extend(te.iter().copied().zip(fe.iter().copied()));
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let ts: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    (merge_sorted(&ts, &[]), pairs.into_iter().map(|p| p.1).collect())
}

/// Per-sample shading inputs at the argmax samples of each ray.
pub struct SurfaceVars<'g> {
    pub x: Var<'g>,
    pub normal: Var<'g>,
    pub light_dir: Var<'g>,
    pub intensity: Var<'g>,
    pub albedo: Var<'g>,
    pub roughness: Var<'g>,
    pub metallic: Var<'g>,
}

pub struct BatchRender<'g> {
    /// `[R, 3]` each.
    pub l_r: Var<'g>,
    pub l_vol: Var<'g>,
    pub l_surf: Var<'g>,
    /// `[R, 1]` each.
    pub w_max: Var<'g>,
    pub w_sum: Var<'g>,
    /// `[R, n - 1]`.
    pub weights: Var<'g>,
    /// Argmax interval per ray.
    pub argmax: Vec<usize>,
    /// Midpoint depth of the argmax interval per ray.
    pub surface_depth: Vec<f64>,
    /// `∇f` at every sample, `[R n, 3]`.
    pub gradients: Var<'g>,
    /// Points of every sample, `[R n, 3]`.
    pub points: Var<'g>,
    pub surface: SurfaceVars<'g>,
}

/// Renders rays that all hit the bounding sphere, with `t[r]` holding the
/// same number of samples for every ray.
pub fn render_batch<'g, F: FieldEval<'g>>(
    fields: &F,
    rays: &[Ray],
    t: &[Vec<f64>],
    metallic_scales_diffuse: bool,
) -> BatchRender<'g> {
    let graph = fields.graph();
    let r_count = rays.len();
    assert!(r_count > 0 && t.len() == r_count);
    let n = t[0].len();
    assert!(n >= 2 && t.iter().all(|ts| ts.len() == n), "equal sample counts per ray");
    let m = n - 1;

    let mut pts = Vec::with_capacity(r_count * n * 3);
    let mut view = Vec::with_capacity(r_count * m * 3);
    for (ray, ts) in rays.iter().zip(t) {
        for &ti in ts {
            pts.extend_from_slice(&ray.at(ti));
        }
        for _ in 0..m {
            view.extend(ray.dir.iter().map(|d| -d));
        }
    }
    let x_all = graph.input(Tensor::from_vec(r_count * n, 3, pts));
    let sdf = fields.eval_sdf(x_all);
    let (_, weights) = crate::quadrature::alpha_weights(sdf.sdf.reshape([r_count, n]), fields.sharpness());

    let shade_rows: Vec<usize> = (0..r_count).flat_map(|r| (0..m).map(move |i| r * n + i)).collect();
    let x = x_all.index_rows(&shade_rows);
    let normal = sdf.normal.index_rows(&shade_rows);
    let feature = sdf.feature.index_rows(&shade_rows);
    let v = graph.constant(Tensor::from_vec(r_count * m, 3, view));

    let radiance = fields.eval_radiance(x, normal, v, feature);
    let material = fields.eval_material(x, normal, feature);
    let light = fields.eval_photon(x, normal, feature);
    let bsdf = bsdf_var(
        normal,
        v,
        light.direction,
        material.albedo,
        material.roughness,
        material.metallic,
        metallic_scales_diffuse,
    );
    let integrand = bsdf.total * light.intensity;

    let w_col = weights.reshape([r_count * m, 1]);
    let l_r = (radiance * w_col).segment_sum(m);
    let l_vol = (integrand * w_col).segment_sum(m);
    let w_sum = weights.sum_cols();

    let argmax = row_argmax(&weights.value());
    let surf_rows: Vec<usize> = argmax.iter().enumerate().map(|(r, &k)| r * m + k).collect();
    let surface_depth = argmax.iter().zip(t).map(|(&k, ts)| 0.5 * (ts[k] + ts[k + 1])).collect();
    let pick = |v: Var<'g>| v.index_rows(&surf_rows);
    BatchRender {
        l_r,
        l_vol,
        l_surf: pick(integrand),
        w_max: pick(w_col),
        w_sum,
        weights,
        argmax,
        surface_depth,
        gradients: sdf.gradient,
        points: x_all,
        surface: SurfaceVars {
            x: pick(x),
            normal: pick(normal),
            light_dir: pick(light.direction),
            intensity: pick(light.intensity),
            albedo: pick(material.albedo),
            roughness: pick(material.roughness),
            metallic: pick(material.metallic),
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRenderOutput {
    pub l_r: [f64; 3],
    pub l_vol: [f64; 3],
    pub l_surf: [f64; 3],
    pub w_max: f64,
    pub w_sum: f64,
    pub surface_x: [f64; 3],
    pub is_background: bool,
}

impl RayRenderOutput {
    fn background() -> Self {
        Self {
            l_r: [0.0; 3],
            l_vol: [0.0; 3],
            l_surf: [0.0; 3],
            w_max: 0.0,
            w_sum: 0.0,
            surface_x: [0.0; 3],
            is_background: true,
        }
    }
}

fn row3(t: &Tensor, r: usize) -> [f64; 3] {
    let row = t.row(r);
    if row.len() == 1 {
        [row[0]; 3]
    } else {
        [row[0], row[1], row[2]]
    }
}

/// Deterministic render of one ray with the trained fields.
pub fn render_ray(snapshot: &ParameterSnapshot, ray: &Ray, config: &Config) -> RayRenderOutput {
    if ray.is_background() {
        return RayRenderOutput::background();
    }
    let t = place_samples(snapshot, std::slice::from_ref(ray), &config.sampling, None);
    let graph = Graph::new();
    let fields = snapshot.bind(&graph, false);
    let out = render_batch(&fields, std::slice::from_ref(ray), &t, config.bsdf.metallic_scales_diffuse);
    let w_sum = out.w_sum.item();
    RayRenderOutput {
        l_r: row3(&out.l_r.value(), 0),
        l_vol: row3(&out.l_vol.value(), 0),
        l_surf: row3(&out.l_surf.value(), 0),
        w_max: out.w_max.item(),
        w_sum,
        surface_x: row3(&out.surface.x.value(), 0),
        is_background: false,
    }
}

/// One RGB-or-scalar image per map, row-major, `[0, 1]` for colors.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    pub l_surf: Vec<[f64; 3]>,
    pub l_r: Vec<[f64; 3]>,
    pub l_vol: Vec<[f64; 3]>,
    /// Unit normals in `[-1, 1]`.
    pub normal: Vec<[f64; 3]>,
    pub albedo: Vec<[f64; 3]>,
    pub roughness: Vec<f64>,
    pub metallic: Vec<f64>,
    /// Unit light directions in `[-1, 1]`.
    pub light_dir: Vec<[f64; 3]>,
    pub w_sum: Vec<f64>,
    pub foreground: Vec<bool>,
}

impl RenderedImage {
    fn blank(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            l_surf: vec![[0.0; 3]; n],
            l_r: vec![[0.0; 3]; n],
            l_vol: vec![[0.0; 3]; n],
            normal: vec![[0.0; 3]; n],
            albedo: vec![[0.0; 3]; n],
            roughness: vec![0.0; n],
            metallic: vec![0.0; n],
            light_dir: vec![[0.0; 3]; n],
            w_sum: vec![0.0; n],
            foreground: vec![false; n],
        }
    }

    /// Writes every map as PNG. Colors are gamma-2.2 encoded; normals and
    /// light directions map `[-1, 1]` linearly to `[0, 255]`; roughness and
    /// metallic are stored linearly as gray.
    pub fn save(&self, dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>, Error> {
        std::fs::create_dir_all(dir)?;
        let (w, h) = (self.width, self.height);
        let signed = |v: &Vec<[f64; 3]>| -> Vec<[f64; 3]> { v.iter().map(|p| p.map(|c| 0.5 * (c + 1.0))).collect() };
        let gray = |v: &Vec<f64>| -> Vec<[f64; 3]> { v.iter().map(|&c| [c; 3]).collect() };
        let maps: [(&str, Vec<[f64; 3]>, bool); 8] = [
            ("surf", self.l_surf.clone(), true),
            ("radiance", self.l_r.clone(), true),
            ("vol", self.l_vol.clone(), true),
            ("normal", signed(&self.normal), false),
            ("albedo", self.albedo.clone(), true),
            ("roughness", gray(&self.roughness), false),
            ("metallic", gray(&self.metallic), false),
            ("light", signed(&self.light_dir), false),
        ];
        let mut written = Vec::new();
        for (name, pixels, gamma) in maps {
            let path = dir.join(format!("{prefix}_{name}.png"));
            write_png(&path, w, h, &pixels, gamma)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Renders every pixel of `camera`, using `threads` worker threads over
/// chunks of `config.render.chunk_rays` rays. The result does not depend on
/// the thread count.
pub fn render_image(snapshot: &ParameterSnapshot, camera: &Camera, config: &Config, threads: usize) -> RenderedImage {
    let (w, h) = (camera.width, camera.height);
    let mut image = RenderedImage::blank(w, h);
    let rays: Vec<(usize, Ray)> = (0..w * h)
        .map(|i| (i, ray_from_pixel(camera, i % w, i / w)))
        .filter(|(_, r)| !r.is_background())
        .collect();
    let chunks: Vec<&[(usize, Ray)]> = rays.chunks(config.render.chunk_rays.max(1)).collect();
    let threads = threads.max(1);
    let mut results: Vec<Option<ChunkResult>> = (0..chunks.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (worker, slots) in results.chunks_mut(chunks.len().div_ceil(threads).max(1)).enumerate() {
            let base = worker * chunks.len().div_ceil(threads).max(1);
            let chunks = &chunks;
            handles.push(scope.spawn(move || {
                for (j, slot) in slots.iter_mut().enumerate() {
                    *slot = Some(render_chunk(snapshot, chunks[base + j], config));
                }
            }));
        }
        for h in handles {
            h.join().expect("render worker panicked");
        }
    });
    for (chunk, result) in chunks.iter().zip(results) {
        let result = result.expect("every chunk rendered");
        for (j, (pixel, _)) in chunk.iter().enumerate() {
            image.w_sum[*pixel] = result.w_sum[j];
            if result.w_sum[j] <= config.sampling.background_threshold {
                continue;
            }
            image.foreground[*pixel] = true;
            image.l_surf[*pixel] = result.l_surf[j].map(|c| c.clamp(0.0, 1.0));
            image.l_r[*pixel] = result.l_r[j].map(|c| c.clamp(0.0, 1.0));
            image.l_vol[*pixel] = result.l_vol[j].map(|c| c.clamp(0.0, 1.0));
            image.normal[*pixel] = result.normal[j];
            image.albedo[*pixel] = result.albedo[j];
            image.roughness[*pixel] = result.roughness[j];
            image.metallic[*pixel] = result.metallic[j];
            image.light_dir[*pixel] = result.light_dir[j];
        }
    }
    image
}

struct ChunkResult {
    l_surf: Vec<[f64; 3]>,
    l_r: Vec<[f64; 3]>,
    l_vol: Vec<[f64; 3]>,
    normal: Vec<[f64; 3]>,
    albedo: Vec<[f64; 3]>,
    roughness: Vec<f64>,
    metallic: Vec<f64>,
    light_dir: Vec<[f64; 3]>,
    w_sum: Vec<f64>,
}

fn render_chunk(snapshot: &ParameterSnapshot, chunk: &[(usize, Ray)], config: &Config) -> ChunkResult {
    let rays: Vec<Ray> = chunk.iter().map(|(_, r)| *r).collect();
    let t = place_samples(snapshot, &rays, &config.sampling, None);
    let graph = Graph::new();
    let fields = snapshot.bind(&graph, false);
    let out = render_batch(&fields, &rays, &t, config.bsdf.metallic_scales_diffuse);
    let rows = |v: Var<'_>| {
        let t = v.value();
        (0..t.rows()).map(|r| row3(&t, r)).collect::<Vec<_>>()
    };
    let col = |v: Var<'_>| v.value().data().to_vec();
    ChunkResult {
        l_surf: rows(out.l_surf),
        l_r: rows(out.l_r),
        l_vol: rows(out.l_vol),
        normal: rows(out.surface.normal),
        albedo: rows(out.surface.albedo),
        roughness: col(out.surface.roughness),
        metallic: col(out.surface.metallic),
        light_dir: rows(out.surface.light_dir),
        w_sum: col(out.w_sum),
    }
}

/// An analytic sphere with constant material and a constant distant light,
/// evaluated through the same graph code path as the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticSphere {
    pub radius: f64,
    pub sharpness: f64,
    pub albedo: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
    pub light_dir: [f64; 3],
    pub intensity: [f64; 3],
    /// Constant radiance returned by the radiance branch.
    pub radiance: [f64; 3],
}

impl SdfQuery for AnalyticSphere {
    fn sdf_at(&self, points: &[[f64; 3]]) -> Vec<f64> {
        points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() - self.radius)
            .collect()
    }
}

pub struct BoundSphere<'g> {
    graph: &'g Graph,
    scene: AnalyticSphere,
}

impl AnalyticSphere {
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundSphere<'g> {
        BoundSphere {
            graph,
            scene: self.clone(),
        }
    }
}

impl<'g> BoundSphere<'g> {
    fn rows(&self, rows: usize, value: &[f64]) -> Var<'g> {
        let data = (0..rows).flat_map(|_| value.iter().copied()).collect();
        self.graph.constant(Tensor::from_vec(rows, value.len(), data))
    }
}

impl<'g> FieldEval<'g> for BoundSphere<'g> {
    fn graph(&self) -> &'g Graph {
        self.graph
    }
    fn sharpness(&self) -> Var<'g> {
        self.graph.constant(Tensor::scalar(self.scene.sharpness))
    }
    fn eval_sdf(&self, x: Var<'g>) -> SdfOutput<'g> {
        let sdf = x.l2_norm() - self.scene.radius;
        let gradient = self.graph.grad_wrt_input(sdf, x).expect("x feeds the sdf");
        SdfOutput {
            sdf,
            feature: self.rows(x.rows(), &[0.0]),
            gradient,
            normal: gradient.normalize(NORMAL_FLOOR),
        }
    }
    fn eval_radiance(&self, x: Var<'g>, _n: Var<'g>, _v: Var<'g>, _f: Var<'g>) -> Var<'g> {
        self.rows(x.rows(), &self.scene.radiance)
    }
    fn eval_material(&self, x: Var<'g>, _n: Var<'g>, _f: Var<'g>) -> MaterialOutput<'g> {
        let n = x.rows();
        MaterialOutput {
            albedo: self.rows(n, &self.scene.albedo),
            roughness: self.rows(n, &[self.scene.roughness]),
            metallic: self.rows(n, &[self.scene.metallic]),
        }
    }
    fn eval_photon(&self, x: Var<'g>, _n: Var<'g>, _f: Var<'g>) -> LightOutput<'g> {
        let n = x.rows();
        let l = self.scene.light_dir;
        let rho = l[2].clamp(-1.0, 1.0).acos();
        let phi = l[1].atan2(l[0]).rem_euclid(2.0 * std::f64::consts::PI);
        LightOutput {
            rho: self.rows(n, &[rho]),
            phi: self.rows(n, &[phi]),
            direction: self.rows(n, &l),
            intensity: self.rows(n, &self.scene.intensity),
        }
    }
}

/// Zero level set of the SDF network with per-vertex normals (normalized
/// `∇f`) and materials from the material network.
pub fn material_mesh(snapshot: &ParameterSnapshot, resolution: usize, chunk: usize) -> Result<MaterialMesh, Error> {
    let mut sdf = |pts: &[[f64; 3]]| snapshot.sdf_at(pts);
    let mut mesh = marching_cubes(&mut sdf, resolution, -1.0, 1.0)?;
    let mut normals = Vec::with_capacity(mesh.vertices.len());
    let mut materials = Vec::with_capacity(mesh.vertices.len());
    for part in mesh.vertices.chunks(chunk.max(1)) {
        let graph = Graph::new();
        let fields = snapshot.bind(&graph, false);
        let x = graph.input(Tensor::from_rows(part));
        let out = fields.eval_sdf(x);
        let m = fields.eval_material(x, out.normal, out.feature);
        let n = tensor_rows3(&out.normal.value());
        let albedo = tensor_rows3(&m.albedo.value());
        let (r, met) = (m.roughness.value(), m.metallic.value());
        normals.extend(n);
        for (i, a) in albedo.into_iter().enumerate() {
            materials.push(VertexMaterial { albedo: a, roughness: r.get(i, 0), metallic: met.get(i, 0) });
        }
    }
    mesh.normals = normals;
    mesh.materials = materials;
    Ok(mesh)
}

/// Convenience for tests and tools: `[R, 3]` tensor rows as arrays.
pub fn tensor_rows3(t: &Tensor) -> Vec<[f64; 3]> {
    (0..t.rows()).map(|r| row3(t, r)).collect()
}
