//! Single-stage neural inverse rendering.
//!
//! Geometry (an SDF network), outgoing radiance, material and illumination
//! fields are optimized together from posed images. One set of NeuS
//! quadrature weights drives three renderings per ray: the radiance volume
//! rendering `L_r`, the physically based volume rendering `L_vol`, and the
//! surface shading `L_surf` at the sample of maximum weight.
//!
//! Module map:
//!
//! - [`diffengine`]: reverse-mode autodiff on dense `f64` matrices
//! - [`fields`]: the four networks and their initialization
//! - [`quadrature`]: rays, sampling and the weight function
//! - [`bsdf`]: the Disney-style diffuse + Schlick specular model
//! - [`renderer`]: the three per-ray renderings and image rendering
//! - [`losses`]: every training objective
//! - [`trainer`]: Adam, the schedule, checkpoints and logs
//! - [`sceneio`]: datasets, synthetic scenes, meshes and metrics

pub mod bsdf;
pub mod config;
pub mod diffengine;
pub mod fields;
pub mod losses;
pub mod quadrature;
pub mod renderer;
pub mod sceneio;
pub mod trainer;

pub use config::Config;

use diffengine::EngineError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("mesh has no surface: the field never changes sign on the grid")]
    EmptySurface,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/fields.md")]
    mod fields {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/bsdf.md")]
    mod bsdf {}
    #[doc = include_str!("../../../book/src/renderings.md")]
    mod renderings {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
