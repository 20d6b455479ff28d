//! Run configuration: one JSON document with a section per subsystem.
//!
//! Every key has a default, so `{}` is a valid config file. Unknown keys are
//! rejected both in files and in dotted command-line overrides such as
//! `loss.lambda1=0.0003`.
//!
//! Several defaults are assumptions rather than published values: the
//! sampling budget (64 coarse + 4 x 16 importance samples), the sharpness
//! initialization (`s = exp(10 * 0.3) ≈ 20`), warmup length (500) and the
//! learning-rate floor (0.05), and the eikonal, mask and Hessian weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sine,
    /// `softplus` with `beta = 100`: a smooth ReLU with non-zero curvature.
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Hidden layer count; the network has `depth + 1` linear layers.
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
}

impl NetConfig {
    pub fn new(depth: usize, width: usize, activation: Activation) -> Self {
        Self {
            depth,
            width,
            activation,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::new(8, 256, Activation::Relu)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    Rgb,
    Scalar,
}

impl IntensityMode {
    pub fn channels(self) -> usize {
        match self {
            IntensityMode::Rgb => 3,
            IntensityMode::Scalar => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldsConfig {
    pub sdf: NetConfig,
    pub radiance: NetConfig,
    pub material: NetConfig,
    pub photon: NetConfig,
    pub feature_dim: usize,
    /// Frequency octaves of the positional encoding on the SDF input.
    pub pe_octaves: usize,
    /// Hidden layers of the SDF net that also receive the encoded input.
    pub sdf_skip: Vec<usize>,
    /// Radius of the sphere the SDF net approximates at initialization.
    pub init_radius: f64,
    /// SIREN frequency `omega_0`.
    pub siren_omega: f64,
    pub intensity: IntensityMode,
    /// Sharpness is `s = exp(10 * variance)`.
    pub init_variance: f64,
}

impl Default for FieldsConfig {
    fn default() -> Self {
        Self {
            sdf: NetConfig::new(8, 256, Activation::Relu),
            radiance: NetConfig::new(8, 256, Activation::Sine),
            material: NetConfig::new(8, 256, Activation::Sine),
            photon: NetConfig::new(8, 256, Activation::Relu),
            feature_dim: 256,
            pe_octaves: 6,
            sdf_skip: vec![4],
            init_radius: 0.5,
            siren_omega: 30.0,
            intensity: IntensityMode::Rgb,
            init_variance: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_importance: usize,
    pub up_sample_rounds: usize,
    /// Jitter coarse samples during training.
    pub perturb: bool,
    /// Rays with accumulated weight below this are background.
    pub background_threshold: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_coarse: 64,
            n_importance: 16,
            up_sample_rounds: 4,
            perturb: true,
            background_threshold: 0.5,
        }
    }
}

impl SamplingConfig {
    pub fn total_samples(&self) -> usize {
        self.n_coarse + self.n_importance * self.up_sample_rounds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BsdfConfig {
    /// Scale the diffuse lobe by `1 - metallic`.
    pub metallic_scales_diffuse: bool,
}

impl Default for BsdfConfig {
    fn default() -> Self {
        Self {
            metallic_scales_diffuse: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    /// Differentiate the SDF gradient a second time through the graph.
    Exact,
    /// Central differences of the first gradient.
    FiniteDifference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eikonal_weight: f64,
    pub mask_weight: f64,
    pub hessian_weight: f64,
    /// Fraction of training over which the Hessian weight decays linearly to 0.
    pub hessian_decay_fraction: f64,
    pub hessian_mode: HessianMode,
    pub hessian_step: f64,
    /// Points per step at which the Hessian is evaluated.
    pub hessian_points: usize,
    pub light_weight: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    /// Multiply the surface loss by `1 - w_max`.
    pub surface_factor: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0003,
            lambda2: 0.0001,
            eikonal_weight: 0.1,
            mask_weight: 0.1,
            hessian_weight: 5e-4,
            hessian_decay_fraction: 0.5,
            hessian_mode: HessianMode::Exact,
            hessian_step: 1e-4,
            hessian_points: 64,
            light_weight: 0.0001,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 0.1,
            surface_factor: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rays_per_step: usize,
    pub max_steps: u64,
    pub lr_base: f64,
    pub warmup_steps: u64,
    /// Learning-rate floor as a fraction of `lr_base`.
    pub lr_alpha_min: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub validation_interval: u64,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    /// Dataset views excluded from training and used for validation.
    pub holdout_views: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_step: 512,
            max_steps: 20_000,
            lr_base: 0.0003,
            warmup_steps: 500,
            lr_alpha_min: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            validation_interval: 2500,
            log_interval: 100,
            checkpoint_interval: 5000,
            holdout_views: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Rays per graph when rendering whole images.
    pub chunk_rays: usize,
    /// Grid resolution for mesh extraction.
    pub mesh_resolution: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            chunk_rays: 512,
            mesh_resolution: 256,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub fields: FieldsConfig,
    pub sampling: SamplingConfig,
    pub bsdf: BsdfConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub render: RenderConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, Error> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they can
    /// and fall back to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, Error> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            let value: Value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train.rays_per_step == 0 {
            return bad("train.rays_per_step must be >= 1");
        }
        if !(self.train.lr_base > 0.0) {
            return bad("train.lr_base must be > 0");
        }
        if self.sampling.n_coarse < 2 {
            return bad("sampling.n_coarse must be >= 2");
        }
        for (name, net) in [
            ("sdf", &self.fields.sdf),
            ("radiance", &self.fields.radiance),
            ("material", &self.fields.material),
            ("photon", &self.fields.photon),
        ] {
            if net.depth == 0 || net.width == 0 {
                return bad(&format!("fields.{name}: depth and width must be >= 1"));
            }
        }
        if self.fields.feature_dim == 0 {
            return bad("fields.feature_dim must be >= 1");
        }
        if self.fields.sdf_skip.iter().any(|&s| s == 0 || s > self.fields.sdf.depth) {
            return bad("fields.sdf_skip entries must lie in 1..=depth");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = Config::from_json("{}").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.train.rays_per_step, 512);
        assert_eq!(c.train.lr_base, 0.0003);
        assert_eq!(c.train.validation_interval, 2500);
        assert_eq!(c.loss.lambda1, 0.0003);
        assert_eq!(c.loss.lambda2, 0.0001);
        assert_eq!(c.fields.feature_dim, 256);
    }

    #[test]
    fn overrides_round_trip() {
        let c = Config::default()
            .with_overrides(&["loss.lambda1=0.5", "fields.intensity=scalar", "train.holdout_views=[3]"])
            .unwrap();
        assert_eq!(c.loss.lambda1, 0.5);
        assert_eq!(c.fields.intensity, IntensityMode::Scalar);
        assert_eq!(c.train.holdout_views, vec![3]);
        let back = Config::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::default().with_overrides(&["loss.lambda9=1"]).is_err());
        assert!(Config::default().with_overrides(&["nonsense"]).is_err());
        assert!(Config::from_json(r#"{"train": {"bogus": 1}}"#).is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let c = Config::default().with_overrides(&["train.rays_per_step=0"]).unwrap();
        assert!(c.validate().is_err());
        assert!(Config::default().validate().is_ok());
    }
}
