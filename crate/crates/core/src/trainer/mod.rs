//! The optimization loop.
//!
//! Each step draws `rays_per_step` random pixels from the training views,
//! renders them with all three renderings, and takes one Adam step on the
//! full loss. The random stream of step `k` depends only on the seed and
//! `k`, so a resumed run continues exactly where a checkpoint left off.

mod adam;
mod checkpoint;

use std::f64::consts::PI;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, VERSION as CHECKPOINT_VERSION};

use crate::config::{Config, TrainConfig};
use crate::diffengine::{Graph, Tensor};
use crate::fields::{init_fields, ParameterSnapshot};
use crate::losses::{
    color_losses_against, eikonal_loss, hessian_loss, hessian_rows, hessian_weight_at, light_variance_loss, mask_loss,
    LossBreakdown, LossTerms,
};
use crate::quadrature::{ray_from_pixel, Ray};
use crate::renderer::{place_samples, render_batch, render_image};
use crate::sceneio::{psnr, SceneDataset};
use crate::Error;

/// Linear warmup to `lr_base`, then cosine decay to `lr_alpha_min · lr_base`
/// at `max_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    if step < config.warmup_steps {
        return config.lr_base * step as f64 / config.warmup_steps as f64;
    }
    let span = config.max_steps.saturating_sub(config.warmup_steps).max(1);
    let progress = ((step - config.warmup_steps) as f64 / span as f64).min(1.0);
    let a = config.lr_alpha_min;
    config.lr_base * (((PI * progress).cos() + 1.0) / 2.0 * (1.0 - a) + a)
}

/// The random stream of one step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// One line of the synchronization log: PSNR of the three renderings on
/// the held-out views.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub step: u64,
    pub psnr_r: f64,
    pub psnr_surf: f64,
    pub psnr_vol: f64,
}

pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct Trainer {
    pub config: Config,
    pub dataset: SceneDataset,
    pub snapshot: ParameterSnapshot,
    pub adam: Adam,
    /// Steps completed.
    pub step: u64,
    /// Worker threads for validation renders.
    pub threads: usize,
    views: Vec<usize>,
}

impl Trainer {
    pub fn new(config: Config, dataset: SceneDataset) -> Result<Self, Error> {
        let snapshot = init_fields(&config.fields, config.train.seed);
        let shapes: Vec<[usize; 2]> = snapshot.tensors().iter().map(|t| t.shape()).collect();
        let t = &config.train;
        let adam = Adam::new(&shapes, t.adam_beta1, t.adam_beta2, t.adam_eps);
        Self::assemble(config, dataset, snapshot, adam, 0)
    }

    pub fn resume(checkpoint: Checkpoint, dataset: SceneDataset) -> Result<Self, Error> {
        let Checkpoint { config, step, snapshot, adam } = checkpoint;
        let adam = adam.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        Self::assemble(config, dataset, snapshot, adam, step)
    }

    fn assemble(config: Config, dataset: SceneDataset, snapshot: ParameterSnapshot, adam: Adam, step: u64) -> Result<Self, Error> {
        config.validate()?;
        dataset.validate()?;
        if let Some(&v) = config.train.holdout_views.iter().find(|&&v| v >= dataset.len()) {
            return Err(Error::Config(format!("holdout view {v} out of range")));
        }
        let views = dataset.training_views(&config.train.holdout_views);
        Ok(Self { config, dataset, snapshot, adam, step, threads: 1, views })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            snapshot: self.snapshot.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Pixels of the batch for step `step`: `(view, pixel index)`.
    fn draw_pixels(&self, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        (0..self.config.train.rays_per_step)
            .map(|_| {
                let view = self.views[rng.random_range(0..self.views.len())];
                let cam = &self.dataset.cameras[view];
                (view, rng.random_range(0..cam.width * cam.height))
            })
            .collect()
    }

    /// Rays, targets and sample depths of the current step.
    pub fn batch(&self) -> Batch {
        let mut rng = step_rng(self.config.train.seed, self.step);
        let pixels = self.draw_pixels(&mut rng);
        let mut batch = Batch::default();
        for &(view, px) in &pixels {
            let cam = &self.dataset.cameras[view];
            let ray = ray_from_pixel(cam, px % cam.width, px / cam.width);
            // rays that miss the bounding sphere carry no information
            if ray.is_background() {
                continue;
            }
            batch.rays.push(ray);
            batch.gt.push(self.dataset.images[view][px]);
            batch.mask.push(self.dataset.masks[view][px]);
        }
        if !batch.rays.is_empty() {
            let jitter = if self.config.sampling.perturb { Some(&mut rng) } else { None };
            batch.t = place_samples(&self.snapshot, &batch.rays, &self.config.sampling, jitter);
        }
        batch
    }

    /// Forward and backward pass of the current step, without the update.
    pub fn compute(&self) -> Result<(LossBreakdown, Vec<Tensor>), Error> {
        let out = batch_loss(&self.snapshot, &self.config, self.step, &self.batch(), true)?;
        Ok((out.loss, out.grads.expect("gradients requested")))
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<StepOutput, Error> {
        let (loss, grads) = self.compute()?;
        let grad_norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        let lr = lr_at(self.step, &self.config.train);
        let refs: Vec<&Tensor> = grads.iter().collect();
        self.adam.step(&mut self.snapshot.tensors_mut(), &refs, lr);
        self.step += 1;
        Ok(StepOutput { loss, grad_norm, lr })
    }

    /// PSNR of the three renderings, averaged over the held-out views.
    pub fn validate(&self) -> Result<SyncRecord, Error> {
        let views = self.dataset.holdout(&self.config.train.holdout_views);
        let (mut r, mut surf, mut vol) = (0.0, 0.0, 0.0);
        for &v in &views {
            let image = render_image(&self.snapshot, &self.dataset.cameras[v], &self.config, self.threads);
            let gt = &self.dataset.images[v];
            r += psnr(&image.l_r, gt)?;
            surf += psnr(&image.l_surf, gt)?;
            vol += psnr(&image.l_vol, gt)?;
        }
        let n = views.len() as f64;
        Ok(SyncRecord { step: self.step, psnr_r: r / n, psnr_surf: surf / n, psnr_vol: vol / n })
    }

    /// Trains until `max_steps`, writing `loss.ndjson`, `sync.ndjson` and
    /// checkpoints under `out`. `progress` sees every logged record.
    pub fn run(&mut self, out: &Path, mut progress: impl FnMut(&LossRecord)) -> Result<PathBuf, Error> {
        std::fs::create_dir_all(out.join("checkpoints"))?;
        let t = self.config.train.clone();
        let append = |name: &str, line: String| -> Result<(), Error> {
            let mut f = OpenOptions::new().create(true).append(true).open(out.join(name))?;
            writeln!(f, "{line}")?;
            Ok(())
        };
        while self.step < t.max_steps {
            let at = self.step;
            let step = self.train_step()?;
            if t.log_interval > 0 && (at % t.log_interval == 0 || self.step == t.max_steps) {
                let record = LossRecord { step: at, lr: step.lr, grad_norm: step.grad_norm, loss: step.loss };
                append("loss.ndjson", serde_json::to_string(&record).expect("record serializes"))?;
                progress(&record);
            }
            if t.validation_interval > 0 && (self.step % t.validation_interval == 0 || self.step == t.max_steps) {
                let sync = self.validate()?;
                append("sync.ndjson", serde_json::to_string(&sync).expect("record serializes"))?;
            }
            if t.checkpoint_interval > 0 && self.step % t.checkpoint_interval == 0 {
                self.checkpoint().save(&checkpoint_path(out, self.step))?;
            }
        }
        let last = out.join("final.ckpt");
        self.checkpoint().save(&last)?;
        Ok(last)
    }
}

/// One training batch with its sample depths fixed.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub rays: Vec<Ray>,
    /// Linear target colours.
    pub gt: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub t: Vec<Vec<f64>>,
    /// Replaces the values that enter the loss without gradient, for
    /// checking gradients against finite differences.
    pub frozen: Option<Detached>,
}

/// Values of the foreground rays that the loss treats as constants: the
/// pseudo ground truth `L_r` (`[F, 3]`) and the confidence `w_max` (`[F, 1]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Detached {
    pub l_r: Tensor,
    pub w_max: Tensor,
}

pub struct BatchLoss {
    pub loss: LossBreakdown,
    /// One tensor per entry of [`ParameterSnapshot::tensors`], when requested.
    pub grads: Option<Vec<Tensor>>,
    /// `None` when the batch has no foreground rays.
    pub detached: Option<Detached>,
}

/// Full training loss of `batch` at training step `step`, and optionally
/// its gradient with respect to every parameter tensor of `snapshot`.
pub fn batch_loss(
    snapshot: &ParameterSnapshot,
    cfg: &Config,
    step: u64,
    batch: &Batch,
    want_grads: bool,
) -> Result<BatchLoss, Error> {
    let zeros = || snapshot.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect::<Vec<_>>();
    if batch.rays.is_empty() {
        return Ok(BatchLoss { loss: LossBreakdown::default(), grads: want_grads.then(zeros), detached: None });
    }
    let graph = Graph::new();
    let fields = snapshot.bind(&graph, true);
    let ids = fields.param_ids();
    let out = render_batch(&fields, &batch.rays, &batch.t, cfg.bsdf.metallic_scales_diffuse);
    let mask = &batch.mask;
    let fg: Vec<usize> = (0..batch.rays.len()).filter(|&r| mask[r]).collect();
    let hw = hessian_weight_at(&cfg.loss, step as usize, cfg.train.max_steps as usize);
    let zero = || graph.constant(Tensor::scalar(0.0));
    let mut detached = None;
    let (color, light, hessian) = if fg.is_empty() {
        ((zero(), zero(), zero()), zero(), zero())
    } else {
        let gt_fg: Vec<f64> = fg.iter().flat_map(|&r| batch.gt[r]).collect();
        let l_gt = graph.constant(Tensor::from_vec(fg.len(), 3, gt_fg));
        let (l_r, w_max) = (out.l_r.index_rows(&fg), out.w_max.index_rows(&fg));
        let (pseudo, confidence) = match &batch.frozen {
            Some(d) => (graph.constant(d.l_r.clone()), graph.constant(d.w_max.clone())),
            None => (l_r, w_max),
        };
        detached = Some(Detached { l_r: (*l_r.value()).clone(), w_max: (*w_max.value()).clone() });
        let c = color_losses_against(
            l_r,
            out.l_surf.index_rows(&fg),
            out.l_vol.index_rows(&fg),
            l_gt,
            pseudo,
            confidence,
            cfg.loss.surface_factor,
        );
        let s = &out.surface;
        let light = light_variance_loss(
            s.x.index_rows(&fg),
            s.normal.index_rows(&fg),
            s.light_dir.index_rows(&fg),
            s.intensity.index_rows(&fg),
            &cfg.loss,
        );
        let hessian = if hw > 0.0 && cfg.loss.hessian_points > 0 {
            let take: Vec<usize> = fg.iter().copied().take(cfg.loss.hessian_points).collect();
            let pts = s.x.index_rows(&take).value();
            let sdf = |x| fields.sdf_value(x);
            hessian_loss(&hessian_rows(&graph, &sdf, &pts, cfg.loss.hessian_mode, cfg.loss.hessian_step))
        } else {
            zero()
        };
        ((c.l_r, c.l_surf, c.l_vol), light, hessian)
    };
    let terms = LossTerms {
        l_r: color.0,
        l_surf: color.1,
        l_vol: color.2,
        eikonal: eikonal_loss(out.gradients),
        hessian,
        light,
        mask: mask_loss(out.w_sum, mask),
    };
    let total = terms.total(&cfg.loss, hw);
    let breakdown = terms.breakdown(total);
    if !breakdown.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}: {breakdown:?}")));
    }
    if !want_grads {
        return Ok(BatchLoss { loss: breakdown, grads: None, detached });
    }
    let grads = graph.backward(total)?;
    let grads: Vec<Tensor> = ids
        .iter()
        .zip(snapshot.tensors())
        .map(|(id, p)| grads.get_id(*id).cloned().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols())))
        .collect();
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient for parameter tensor {i} at step {step}: {breakdown:?}")));
    }
    Ok(BatchLoss { loss: breakdown, grads: Some(grads), detached })
}

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Reads a newline-delimited JSON log.
pub fn read_log<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Error> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}
