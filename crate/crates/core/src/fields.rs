//! The four neural fields: SDF, outgoing radiance, material and photon
//! (illumination).
//!
//! Parameters live in a [`ParameterSnapshot`] of plain tensors. To evaluate,
//! the snapshot is bound to a [`Graph`], which produces a [`BoundFields`]
//! whose methods build the forward computation.
//!
//! Input wiring:
//!
//! | net       | input                      | output                      |
//! |-----------|----------------------------|-----------------------------|
//! | sdf       | PE(x)                      | f, feature                  |
//! | radiance  | x, n, v, feature           | RGB (sigmoid)               |
//! | material  | x, n, feature              | c, r, m (sigmoid)           |
//! | photon    | x, n, feature              | ρ, φ (scaled sigmoid), I (softplus) |
//!
//! `v` is the direction towards the camera, `-dir`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::{Activation, FieldsConfig, IntensityMode, NetConfig};
use crate::diffengine::{concat, Graph, NodeId, Tensor, Var};

const SOFTPLUS_BETA: f64 = 100.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden layers; there are `depth + 1` linear layers.
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    /// Layers whose input is `concat(h, network input) / √2`.
    pub skip: Vec<usize>,
    pub omega: f64,
}

impl MlpSpec {
    /// `(fan_in, fan_out)` of every linear layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..=self.depth)
            .map(|l| {
                let fan_in = if l == 0 {
                    self.input_dim
                } else if self.skip.contains(&l) {
                    self.width + self.input_dim
                } else {
                    self.width
                };
                let fan_out = if l == self.depth { self.output_dim } else { self.width };
                (fan_in, fan_out)
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Weights `[in, out]` and biases `[1, out]`, alternating.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Sdf,
    Radiance,
    Material,
    Photon,
}

/// Every trainable tensor: the four networks plus the sharpness variable.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot {
    pub config: FieldsConfig,
    pub sdf: Mlp,
    pub radiance: Mlp,
    pub material: Mlp,
    pub photon: Mlp,
    /// `[1, 1]`; the logistic sharpness is `s = exp(10 * variance)`.
    pub variance: Tensor,
}

impl ParameterSnapshot {
    pub fn sharpness(&self) -> f64 {
        (10.0 * self.variance.item()).exp()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for net in [&self.sdf, &self.radiance, &self.material, &self.photon] {
            out.extend(net.params.iter());
        }
        out.push(&self.variance);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for net in [&mut self.sdf, &mut self.radiance, &mut self.material, &mut self.photon] {
            out.extend(net.params.iter_mut());
        }
        out.push(&mut self.variance);
        out
    }

    /// Which field each entry of [`ParameterSnapshot::tensors`] belongs to;
    /// `None` marks the sharpness variable.
    pub fn owners(&self) -> Vec<Option<FieldKind>> {
        let mut out = Vec::new();
        for (kind, net) in [
            (FieldKind::Sdf, &self.sdf),
            (FieldKind::Radiance, &self.radiance),
            (FieldKind::Material, &self.material),
            (FieldKind::Photon, &self.photon),
        ] {
            out.extend(std::iter::repeat_n(Some(kind), net.params.len()));
        }
        out.push(None);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Places every tensor on `graph`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundFields<'g> {
        let leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let bind = |net: &Mlp| BoundMlp {
            spec: net.spec.clone(),
            params: net.params.iter().map(leaf).collect(),
        };
        BoundFields {
            graph,
            sdf: bind(&self.sdf),
            radiance: bind(&self.radiance),
            material: bind(&self.material),
            photon: bind(&self.photon),
            variance: leaf(&self.variance),
            pe_octaves: self.config.pe_octaves,
            intensity: self.config.intensity,
        }
    }
}

pub fn pe_dim(octaves: usize) -> usize {
    3 + 6 * octaves
}

pub fn mlp_specs(config: &FieldsConfig) -> [MlpSpec; 4] {
    let spec = |net: &NetConfig, input_dim, output_dim, skip: Vec<usize>| MlpSpec {
        input_dim,
        output_dim,
        depth: net.depth,
        width: net.width,
        activation: net.activation,
        skip,
        omega: config.siren_omega,
    };
    let f = config.feature_dim;
    [
        spec(&config.sdf, pe_dim(config.pe_octaves), 1 + f, config.sdf_skip.clone()),
        spec(&config.radiance, 9 + f, 3, Vec::new()),
        spec(&config.material, 6 + f, 5, Vec::new()),
        spec(&config.photon, 6 + f, 2 + config.intensity.channels(), Vec::new()),
    ]
}

/// Fresh parameters. The SDF net starts as an approximate sphere of radius
/// `init_radius`; sine nets use the SIREN initialization; relu and softplus
/// nets other than the SDF use the uniform `±1/√fan_in` rule.
pub fn init_fields(config: &FieldsConfig, seed: u64) -> ParameterSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [sdf, radiance, material, photon] = mlp_specs(config);
    let sdf = geometric_init(sdf, config.init_radius, &mut rng);
    let radiance = default_init(radiance, &mut rng);
    let material = default_init(material, &mut rng);
    let photon = default_init(photon, &mut rng);
    ParameterSnapshot {
        config: config.clone(),
        sdf,
        radiance,
        material,
        photon,
        variance: Tensor::scalar(config.init_variance),
    }
}

fn uniform_tensor(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn normal_tensor(rows: usize, cols: usize, mean: f64, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(mean, std).expect("finite std");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn default_init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Mlp {
    let mut params = Vec::new();
    for (l, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
        let n = fan_in as f64;
        let w_bound = match spec.activation {
            Activation::Sine if l == 0 => 1.0 / n,
            Activation::Sine => (6.0 / n).sqrt() / spec.omega,
            _ => 1.0 / n.sqrt(),
        };
        params.push(uniform_tensor(fan_in, fan_out, w_bound, rng));
        params.push(uniform_tensor(1, fan_out, 1.0 / n.sqrt(), rng));
    }
    Mlp { spec, params }
}

/// Geometric initialization: with the encoding columns of the first layer
/// zeroed, the net evaluates to exactly `-radius` at the origin and grows
/// roughly like `‖x‖ - radius`.
fn geometric_init(spec: MlpSpec, radius: f64, rng: &mut ChaCha8Rng) -> Mlp {
    let mut params = Vec::new();
    let last = spec.depth;
    for (l, (fan_in, fan_out)) in spec.layer_shapes().into_iter().enumerate() {
        let (mut w, b) = if l == last {
            let mean = PI.sqrt() / (fan_in as f64).sqrt();
            let mut b = Tensor::zeros(1, fan_out);
            b.set(0, 0, -radius);
            (normal_tensor(fan_in, fan_out, mean, 1e-4, rng), b)
        } else {
            let std = 2f64.sqrt() / (fan_out as f64).sqrt();
            (normal_tensor(fan_in, fan_out, 0.0, std, rng), Tensor::zeros(1, fan_out))
        };
        // only the raw coordinates feed the sphere; encoding rows start at zero
        let enc_rows = if l == 0 {
            Some(3..fan_in)
        } else if spec.skip.contains(&l) {
            Some(spec.width + 3..fan_in)
        } else {
            None
        };
        if let Some(rows) = enc_rows {
            for r in rows {
                for c in 0..fan_out {
                    w.set(r, c, 0.0);
                }
            }
        }
        params.push(w);
        params.push(b);
    }
    Mlp { spec, params }
}

pub struct BoundMlp<'g> {
    pub spec: MlpSpec,
    pub params: Vec<Var<'g>>,
}

impl<'g> BoundMlp<'g> {
    pub fn forward(&self, input: Var<'g>) -> Var<'g> {
        self.forward_cols(input, None)
    }

    /// Forward pass; `out_cols` restricts the last layer to a column range.
    pub fn forward_cols(&self, input: Var<'g>, out_cols: Option<(usize, usize)>) -> Var<'g> {
        let spec = &self.spec;
        let mut h = input;
        for l in 0..=spec.depth {
            if l > 0 && spec.skip.contains(&l) {
                h = concat(&[h, input]) * std::f64::consts::FRAC_1_SQRT_2;
            }
            let (mut w, mut b) = (self.params[2 * l], self.params[2 * l + 1]);
            if l == spec.depth {
                if let Some((a, z)) = out_cols {
                    w = w.slice_cols(a, z);
                    b = b.slice_cols(a, z);
                }
            }
            let z = h.matmul(w) + b;
            h = if l == spec.depth {
                z
            } else {
                match spec.activation {
                    Activation::Relu => z.relu(),
                    Activation::Softplus => z.softplus(SOFTPLUS_BETA),
                    Activation::Sine => (z * spec.omega).sin(),
                }
            };
        }
        h
    }
}

pub struct BoundFields<'g> {
    pub graph: &'g Graph,
    pub sdf: BoundMlp<'g>,
    pub radiance: BoundMlp<'g>,
    pub material: BoundMlp<'g>,
    pub photon: BoundMlp<'g>,
    pub variance: Var<'g>,
    pe_octaves: usize,
    intensity: IntensityMode,
}

pub struct SdfOutput<'g> {
    /// `[N, 1]`
    pub sdf: Var<'g>,
    /// `[N, feature_dim]`
    pub feature: Var<'g>,
    /// `∇f(x)`, `[N, 3]`, differentiable.
    pub gradient: Var<'g>,
    /// `∇f / ‖∇f‖`
    pub normal: Var<'g>,
}

pub struct MaterialOutput<'g> {
    pub albedo: Var<'g>,
    pub roughness: Var<'g>,
    pub metallic: Var<'g>,
}

pub struct LightOutput<'g> {
    pub rho: Var<'g>,
    pub phi: Var<'g>,
    /// Unit direction towards the light, `[N, 3]`.
    pub direction: Var<'g>,
    /// `[N, 3]` for RGB intensity, `[N, 1]` for scalar.
    pub intensity: Var<'g>,
}

pub const NORMAL_FLOOR: f64 = 1e-12;

impl<'g> BoundFields<'g> {
    /// Node ids of the bound tensors, in [`ParameterSnapshot::tensors`] order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for net in [&self.sdf, &self.radiance, &self.material, &self.photon] {
            out.extend(net.params.iter().map(|v| v.id()));
        }
        out.push(self.variance.id());
        out
    }

    /// `s = exp(10 * variance)`, `[1, 1]`.
    pub fn sharpness(&self) -> Var<'g> {
        (self.variance * 10.0).exp()
    }

    pub fn encode(&self, x: Var<'g>) -> Var<'g> {
        let mut parts = vec![x];
        for k in 0..self.pe_octaves {
            let scaled = x * f64::powi(2.0, k as i32);
            parts.push(scaled.sin());
            parts.push(scaled.cos());
        }
        concat(&parts)
    }

    /// SDF value and feature without the gradient.
    pub fn sdf_forward(&self, x: Var<'g>) -> (Var<'g>, Var<'g>) {
        let out = self.sdf.forward(self.encode(x));
        let cols = out.cols();
        (out.slice_cols(0, 1), out.slice_cols(1, cols))
    }

    /// SDF value only; skips the feature columns of the last layer.
    pub fn sdf_value(&self, x: Var<'g>) -> Var<'g> {
        self.sdf.forward_cols(self.encode(x), Some((0, 1)))
    }

    /// `x` must be a differentiable node (e.g. [`Graph::input`]).
    pub fn eval_sdf(&self, x: Var<'g>) -> SdfOutput<'g> {
        let (sdf, feature) = self.sdf_forward(x);
        let gradient = self
            .graph
            .grad_wrt_input(sdf, x)
            .expect("sample points feed the sdf");
        SdfOutput {
            sdf,
            feature,
            gradient,
            normal: gradient.normalize(NORMAL_FLOOR),
        }
    }

    pub fn eval_radiance(&self, x: Var<'g>, n: Var<'g>, v: Var<'g>, feature: Var<'g>) -> Var<'g> {
        self.radiance.forward(concat(&[x, n, v, feature])).sigmoid()
    }

    pub fn eval_material(&self, x: Var<'g>, n: Var<'g>, feature: Var<'g>) -> MaterialOutput<'g> {
        let out = self.material.forward(concat(&[x, n, feature])).sigmoid();
        MaterialOutput {
            albedo: out.slice_cols(0, 3),
            roughness: out.slice_cols(3, 4),
            metallic: out.slice_cols(4, 5),
        }
    }

    pub fn eval_photon(&self, x: Var<'g>, n: Var<'g>, feature: Var<'g>) -> LightOutput<'g> {
        let raw = self.photon.forward(concat(&[x, n, feature]));
        let rho = raw.slice_cols(0, 1).sigmoid() * PI;
        let phi = raw.slice_cols(1, 2).sigmoid() * (2.0 * PI);
        let channels = self.intensity.channels();
        let intensity = raw.slice_cols(2, 2 + channels).softplus(1.0);
        LightOutput {
            rho,
            phi,
            direction: spherical_to_unit_var(rho, phi),
            intensity,
        }
    }
}

/// `(sin ρ cos φ, sin ρ sin φ, cos ρ)` per row.
pub fn spherical_to_unit_var<'g>(rho: Var<'g>, phi: Var<'g>) -> Var<'g> {
    let s = rho.sin();
    concat(&[s * phi.cos(), s * phi.sin(), rho.cos()])
}

pub fn spherical_to_unit(rho: f64, phi: f64) -> [f64; 3] {
    let s = rho.sin();
    [s * phi.cos(), s * phi.sin(), rho.cos()]
}

/// Evaluates the SDF at many points in chunks, values only.
pub fn sdf_values(snapshot: &ParameterSnapshot, points: &[[f64; 3]], chunk: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    for block in points.chunks(chunk.max(1)) {
        let graph = Graph::new();
        let fields = snapshot.bind(&graph, false);
        let x = graph.constant(Tensor::from_rows(block));
        out.extend_from_slice(fields.sdf_value(x).value().data());
    }
    out
}

/// Uniform random points in the cube `[-r, r]³`, for tests and regularizers.
pub fn random_points(n: usize, r: f64, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-r..=r)))
        .collect()
}
