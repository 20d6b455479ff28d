//! The `nepf` command line: `synth`, `train`, `render`, `mesh` and `eval`.
//!
//! Exit codes: 0 success, 2 bad configuration or arguments, 3 data or file
//! errors, 4 numeric failure. Logs go to stderr, artifacts to `--out`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use nepf::bsdf::Material;
use nepf::renderer::{material_mesh, render_image};
use nepf::sceneio::{
    chamfer_distance, export_ply, load_dataset, make_synthetic, psnr, sample_mesh, Camera, Shape, SyntheticSpec,
};
use nepf::trainer::{Checkpoint, Trainer};
use nepf::{Config, Error};

#[derive(Parser, Debug)]
#[command(name = "nepf", version, about = "Joint geometry, material and lighting recovery from posed images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic dataset with known shape, material and light.
    Synth(SynthArgs),
    /// Train all fields on a dataset.
    Train(TrainArgs),
    /// Render the PBR image and auxiliary maps from a checkpoint.
    Render(RenderArgs),
    /// Extract the zero level set with per-vertex materials as PLY.
    Mesh(MeshArgs),
    /// PSNR on held-out views and, with ground truth, Chamfer distance.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise reproducible output.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Dotted overrides such as `loss.lambda1=0.0003`.
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    /// `sphere` or `rounded-box`.
    #[arg(long, default_value = "sphere")]
    pub shape: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose camera `--view` is rendered.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub view: Option<usize>,
    /// Novel camera position `x,y,z` looking at the origin.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub eye: Option<Vec<f64>>,
    /// Image size for `--eye` renders.
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Args, Debug)]
pub struct MeshArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cells per axis over `[-1, 1]³`; defaults to `render.mesh_resolution`.
    #[arg(long)]
    pub grid: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub grid: Option<usize>,
    /// Surface samples per mesh for the Chamfer distance.
    #[arg(long, default_value_t = 100_000)]
    pub points: usize,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) | Error::Engine(_) => 4,
        Error::Data(_) | Error::Checkpoint(_) | Error::EmptySurface | Error::Io(_) => 3,
    }
}

fn resolve(base: Config, common: &Common) -> Result<Config, Error> {
    let mut config = match &common.config {
        Some(path) => Config::load(path)?,
        None => base,
    };
    config = config.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn write_config(out: &Path, config: &Config) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), config.to_json())?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Render(a) => render(a),
        Command::Mesh(a) => mesh(a),
        Command::Eval(a) => eval(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let config = resolve(Config::default(), &a.common)?;
    let shape = Shape::from_name(&a.shape).ok_or_else(|| Error::Config(format!("unknown shape '{}'", a.shape)))?;
    if a.views == 0 || a.resolution == 0 {
        return Err(Error::Config("--views and --resolution must be positive".into()));
    }
    let mut spec = SyntheticSpec {
        n_views: a.views,
        width: a.resolution,
        height: a.resolution,
        seed: config.train.seed,
        ..Default::default()
    };
    spec.truth.shape = shape;
    let data = make_synthetic(&spec);
    data.save(&a.common.out)?;
    write_config(&a.common.out, &config)?;
    eprintln!("wrote {} views to {}", data.len(), a.common.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let data = load_dataset(&a.data)?;
    let out = &a.common.out;
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut ck = Checkpoint::load(path)?;
            ck.config = resolve(ck.config, &a.common)?;
            if let Some(steps) = a.steps {
                ck.config.train.max_steps = steps;
            }
            Trainer::resume(ck, data)?
        }
        None => {
            let mut config = resolve(Config::default(), &a.common)?;
            if let Some(steps) = a.steps {
                config.train.max_steps = steps;
            }
            Trainer::new(config, data)?
        }
    };
    trainer.threads = a.common.threads.max(1);
    write_config(out, &trainer.config)?;
    eprintln!(
        "training {} parameters for {} steps from step {}",
        trainer.snapshot.param_count(),
        trainer.config.train.max_steps,
        trainer.step
    );
    let last = trainer.run(out, |r| {
        eprintln!(
            "step {:>6}  lr {:.2e}  total {:.5}  l_r {:.5}  l_surf {:.5}  l_vol {:.5}  eik {:.5}",
            r.step, r.lr, r.loss.total, r.loss.l_r, r.loss.l_surf, r.loss.l_vol, r.loss.eikonal
        )
    })?;
    eprintln!("wrote {}", last.display());
    Ok(())
}

fn load_checkpoint(path: &Path, common: &Common) -> Result<(Checkpoint, Config), Error> {
    let ck = Checkpoint::load(path)?;
    let config = resolve(ck.config.clone(), common)?;
    Ok((ck, config))
}

fn render(a: RenderArgs) -> Result<(), Error> {
    let (ck, config) = load_checkpoint(&a.checkpoint, &a.common)?;
    let (camera, name): (Camera, String) = match (&a.data, a.view, &a.eye) {
        (Some(dir), view, None) => {
            let data = load_dataset(dir)?;
            let v = view.unwrap_or_else(|| data.holdout(&config.train.holdout_views)[0]);
            let cam = data.cameras.get(v).cloned().ok_or_else(|| Error::Config(format!("view {v} out of range")))?;
            (cam, format!("view{v:03}"))
        }
        (None, None, Some(eye)) if eye.len() == 3 => {
            let eye = [eye[0], eye[1], eye[2]];
            let r = a.resolution;
            (Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], 1.6 * r as f64, r, r), "novel".into())
        }
        _ => return Err(Error::Config("render needs either --data [--view N] or --eye x,y,z".into())),
    };
    write_config(&a.common.out, &config)?;
    let image = render_image(&ck.snapshot, &camera, &config, a.common.threads.max(1));
    for path in image.save(&a.common.out, &name)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn mesh(a: MeshArgs) -> Result<(), Error> {
    let (ck, config) = load_checkpoint(&a.checkpoint, &a.common)?;
    let grid = a.grid.unwrap_or(config.render.mesh_resolution);
    write_config(&a.common.out, &config)?;
    let mesh = material_mesh(&ck.snapshot, grid, config.render.chunk_rays)?;
    let path = a.common.out.join("mesh.ply");
    export_ply(&mesh, &path)?;
    eprintln!("wrote {} ({} vertices, {} triangles)", path.display(), mesh.vertices.len(), mesh.triangles.len());
    Ok(())
}

/// Cosine with the true light above which a surface point counts as lit
/// for the albedo comparison.
pub const LIT_COS: f64 = 0.2;

fn eval(a: EvalArgs) -> Result<(), Error> {
    let (ck, config) = load_checkpoint(&a.checkpoint, &a.common)?;
    let data = load_dataset(&a.data)?;
    write_config(&a.common.out, &config)?;
    let threads = a.common.threads.max(1);
    let mut views = Vec::new();
    let (mut sum_surf, mut sum_r, mut sum_vol) = (0.0, 0.0, 0.0);
    let held = data.holdout(&config.train.holdout_views);
    for &v in &held {
        let cam = data.cameras.get(v).ok_or_else(|| Error::Config(format!("holdout view {v} out of range")))?;
        let image = render_image(&ck.snapshot, cam, &config, threads);
        let gt = &data.images[v];
        let (s, r, vol) = (psnr(&image.l_surf, gt)?, psnr(&image.l_r, gt)?, psnr(&image.l_vol, gt)?);
        sum_surf += s;
        sum_r += r;
        sum_vol += vol;
        views.push(json!({"view": v, "psnr_surf": s, "psnr_r": r, "psnr_vol": vol}));
    }
    let n = held.len() as f64;
    let mut metrics = json!({
        "step": ck.step,
        "views": views,
        "mean_psnr_surf": sum_surf / n,
        "mean_psnr_r": sum_r / n,
        "mean_psnr_vol": sum_vol / n,
    });
    if let Some(gt) = &data.ground_truth {
        let grid = a.grid.unwrap_or(config.render.mesh_resolution);
        let mesh = material_mesh(&ck.snapshot, grid, config.render.chunk_rays)?;
        let seed = config.train.seed;
        let ours = sample_mesh(&mesh, a.points, seed);
        let truth = gt.shape.sample_surface(a.points, &mut ChaCha8Rng::seed_from_u64(seed));
        metrics["chamfer"] = json!(chamfer_distance(&ours, &truth)?);
        if let Some(albedo) = lit_albedo(&mesh, gt.shape, gt.light_dir) {
            metrics["mean_lit_albedo"] = json!(albedo);
            metrics["albedo_error"] = json!(albedo_error(albedo, &gt.material));
        }
    }
    let path = a.common.out.join("metrics.json");
    write_json(&path, &metrics)?;
    eprintln!("{}", serde_json::to_string(&metrics).unwrap_or_default());
    Ok(())
}

/// Mean recovered albedo over mesh vertices facing the true light.
pub fn lit_albedo(mesh: &nepf::sceneio::MaterialMesh, shape: Shape, light: [f64; 3]) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for (p, m) in mesh.vertices.iter().zip(&mesh.materials) {
        let n = shape.normal(*p);
        if n[0] * light[0] + n[1] * light[1] + n[2] * light[2] > LIT_COS {
            for k in 0..3 {
                sum[k] += m.albedo[k];
            }
            count += 1;
        }
    }
    (count > 0).then(|| sum.map(|s| s / count as f64))
}

/// Largest per-channel absolute albedo difference.
pub fn albedo_error(albedo: [f64; 3], truth: &Material) -> f64 {
    (0..3).map(|k| (albedo[k] - truth.albedo[k]).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nepf::sceneio::{MaterialMesh, VertexMaterial};

    #[test]
    fn exit_codes_follow_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Data("x".into())), 3);
        assert_eq!(exit_code(&Error::Checkpoint("x".into())), 3);
        assert_eq!(exit_code(&Error::EmptySurface), 3);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 4);
    }

    #[test]
    fn parses_negative_eye_and_overrides() {
        let cli = Cli::try_parse_from([
            "nepf", "render", "--checkpoint", "c.ckpt", "--out", "o", "--eye", "-1.5,0,2", "train.seed=3",
        ])
        .unwrap();
        let Command::Render(a) = cli.command else { panic!("not render") };
        assert_eq!(a.eye, Some(vec![-1.5, 0.0, 2.0]));
        assert_eq!(a.common.overrides, ["train.seed=3"]);
        assert!(Cli::try_parse_from(["nepf", "train", "--out", "o"]).is_err());
    }

    #[test]
    fn resolve_applies_overrides_then_seed() {
        let common = Common {
            out: "o".into(),
            config: None,
            seed: Some(9),
            threads: 1,
            overrides: vec!["train.seed=3".into(), "loss.lambda1=0.001".into()],
        };
        let c = resolve(Config::default(), &common).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.loss.lambda1, 0.001);
        let bad = Common { overrides: vec!["train.rays_per_step=0".into()], ..common.clone() };
        assert!(matches!(resolve(Config::default(), &bad), Err(Error::Config(_))));
        let unknown = Common { overrides: vec!["train.nope=1".into()], ..common };
        assert!(matches!(resolve(Config::default(), &unknown), Err(Error::Config(_))));
    }

    #[test]
    fn lit_albedo_skips_the_dark_side() {
        let red = VertexMaterial { albedo: [0.8, 0.1, 0.1], ..Default::default() };
        let blue = VertexMaterial { albedo: [0.1, 0.1, 0.8], ..Default::default() };
        let mesh = MaterialMesh {
            vertices: vec![[0.0, 0.0, 0.5], [0.5, 0.0, 0.0], [0.0, 0.0, -0.5]],
            triangles: vec![[0, 1, 2]],
            normals: vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]],
            materials: vec![red, blue, blue],
        };
        let shape = Shape::Sphere { radius: 0.5 };
        assert_eq!(lit_albedo(&mesh, shape, [0.0, 0.0, 1.0]), Some([0.8, 0.1, 0.1]));
        assert_eq!(lit_albedo(&mesh, shape, [0.0, 1.0, 0.0]), None);
        let truth = Material { albedo: [0.7, 0.3, 0.3], roughness: 0.5, metallic: 0.0 };
        assert!((albedo_error([0.8, 0.1, 0.1], &truth) - 0.2).abs() < 1e-15);
    }
}
