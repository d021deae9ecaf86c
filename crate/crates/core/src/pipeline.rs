//! Training, inference export, evaluation and complexity reporting.

use std::path::{Path, PathBuf};

use drrnet_tensor::nn::{Ctx, ParamStore};
use drrnet_tensor::parallel::{map_range, set_parallel};
use drrnet_tensor::{no_grad, Scalar, Tensor, Var};
use image::GrayImage;

use crate::checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint, Progress};
use crate::config::Config;
use crate::data::{
    augment, collate, epoch_order, load_image, load_pairs, resize_bilinear_chw, resize_pair, sample_rng, Batch,
    SamplePair,
};
use crate::error::{DrrnetError, Result};
use crate::metrics::{list_images, EvalRecord};
use crate::model::DrrNet;
use crate::objective::total_loss;
use crate::optim::{grad_norm, step_lr, Adam};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between decays.
    pub lr_step: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay: 0.1,
            lr_step: 25,
            epochs: 80,
            max_steps: 0,
            batch_size: 8,
            input_size: 384,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DrrnetError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return bad("train.lr and train.lr_decay must be positive".into());
        }
        if self.lr_step == 0 || self.epochs == 0 || self.batch_size == 0 || self.log_every == 0 {
            return bad("train.lr_step, train.epochs, train.batch_size and train.log_every must be positive".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!("train.input_size must be a positive multiple of 32, got {}", self.input_size));
        }
        Ok(())
    }
}

/// Honours `DRRNET_DETERMINISTIC=1` by switching every kernel to its
/// sequential path. Returns whether the mode is on.
pub fn apply_deterministic_env() -> bool {
    let on = std::env::var("DRRNET_DETERMINISTIC").is_ok_and(|v| v == "1");
    if on {
        set_parallel(false);
    }
    on
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: usize,
    /// 1-based epoch.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Training state between steps: model, optimizer and position.
pub struct Trainer<T: Scalar> {
    pub config: Config,
    pub net: DrrNet<T>,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub progress: Progress,
    pairs: Vec<SamplePair>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: Config, pairs: Vec<SamplePair>) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(DrrnetError::DatasetError("training set is empty".into()));
        }
        let (net, store) = DrrNet::build(&config.backbone, &config.model, config.train.seed)?;
        let progress = Progress { epoch: 0, step: 0, seed: config.train.seed };
        Ok(Self { config, net, store, adam: Adam::default(), progress, pairs })
    }

    /// Continues from a checkpoint written by [`Trainer::save`]. The
    /// configuration is the one stored in the checkpoint.
    pub fn resume(path: &Path, pairs: Vec<SamplePair>) -> Result<Self> {
        let ck = load_checkpoint::<T>(path)?;
        let mut config = Config::parse(&ck.config_text)?;
        config.backbone.weights = None;
        let mut t = Self::new(config, pairs)?;
        ck.restore_into(&t.store)?;
        t.adam = ck.adam.unwrap_or_default();
        t.progress = ck.progress;
        Ok(t)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.config.train.batch_size)
    }

    pub fn pairs(&self) -> &[SamplePair] {
        &self.pairs
    }

    /// Augmented batch for global step `step` (0-based).
    pub fn batch(&self, step: usize) -> Result<Batch<T>> {
        let (spe, bs) = (self.steps_per_epoch(), self.config.train.batch_size);
        let (epoch, k) = (step / spe, step % spe);
        let order = epoch_order(self.pairs.len(), self.progress.seed, epoch);
        let idx = &order[k * bs..((k + 1) * bs).min(order.len())];
        let size = self.config.train.input_size;
        let spec = &self.config.data.augment;
        let seed = self.progress.seed;
        let samples = map_range(idx.len(), |j| {
            let i = idx[j];
            augment(&self.pairs[i], spec, size, &mut sample_rng(seed, epoch, i))
        });
        collate(&samples, &self.config.data.mean, &self.config.data.std)
    }

    pub fn loss_on(&self, batch: &Batch<T>) -> Result<Var<T>> {
        let preds = self.net.forward(&Var::constant(batch.images.clone()), Ctx::train())?;
        total_loss(&preds, &batch.masks)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.progress.step;
        let epoch = step / self.steps_per_epoch() + 1;
        let t = &self.config.train;
        let lr = step_lr(t.lr, t.lr_decay, t.lr_step, epoch);
        let batch = self.batch(step)?;
        let loss = self.loss_on(&batch)?;
        let value = loss.value().data()[0].as_f64();
        let grads = loss.backward();
        let norm = grad_norm(&self.store, &grads);
        if !value.is_finite() || !norm.is_finite() {
            return Err(DrrnetError::NonFiniteLoss { step: step + 1, lr, grad_norm: norm });
        }
        self.adam.step(&self.store, &grads, lr);
        self.progress.step += 1;
        self.progress.epoch = self.progress.step / self.steps_per_epoch();
        Ok(StepRecord { step: step + 1, epoch, lr, loss: value, grad_norm: norm })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.store, Some(&self.adam), &self.progress, &self.config.to_text())
    }

    /// Total optimizer steps the configuration asks for.
    pub fn planned_steps(&self) -> usize {
        let t = &self.config.train;
        let full = t.epochs * self.steps_per_epoch();
        if t.max_steps > 0 {
            full.min(t.max_steps)
        } else {
            full
        }
    }

    /// Steps until the plan is complete, writing a checkpoint whenever an
    /// epoch ends and once more when a step cap stops the run mid-epoch.
    pub fn run(&mut self) -> Result<TrainReport> {
        let planned = self.planned_steps();
        let dir = self.config.train.checkpoint_dir.clone();
        let mut log = Vec::new();
        let mut last = None;
        while self.progress.step < planned {
            let rec = self.step()?;
            if rec.step % self.config.train.log_every == 0 || rec.step == planned {
                log::info!(
                    "step {} epoch {} lr {:e} loss {:.6} grad_norm {:.4e}",
                    rec.step,
                    rec.epoch,
                    rec.lr,
                    rec.loss,
                    rec.grad_norm
                );
            }
            log.push(rec);
            if self.progress.step.is_multiple_of(self.steps_per_epoch()) || self.progress.step == planned {
                let path = if self.progress.step.is_multiple_of(self.steps_per_epoch()) {
                    checkpoint_path(&dir, self.progress.epoch)
                } else {
                    dir.join(format!("step_{:07}.safetensors", self.progress.step))
                };
                self.save(&path)?;
                last = Some(path);
            }
        }
        Ok(TrainReport { log, last_checkpoint: last })
    }

    /// Mean absolute error of `sigmoid(O_level)` against the masks for each
    /// level, index 0 holding `O_0`, on the un-augmented training pairs
    /// resized to the input size. Predictions are upsampled to mask size.
    pub fn level_mae(&self) -> Result<[f64; 5]> {
        let size = self.config.train.input_size;
        let pairs: Vec<SamplePair> = self.pairs.iter().map(|p| resize_pair(p, size)).collect();
        let mut sums = [0.0; 5];
        let mut count = 0usize;
        for chunk in pairs.chunks(self.config.train.batch_size) {
            let batch = collate::<T>(chunk, &self.config.data.mean, &self.config.data.std)?;
            let preds = no_grad(|| self.net.forward(&Var::constant(batch.images.clone()), Ctx::eval()))?;
            for (level, s) in sums.iter_mut().enumerate() {
                let p = probabilities(preds.level(level).value(), size, size);
                *s +=
                    p.data().iter().zip(batch.masks.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>();
            }
            count += batch.masks.numel();
        }
        Ok(sums.map(|s| s / count as f64))
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<StepRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

/// Trains in f32 on the dataset named by `config.data.root`.
pub fn train(config: &Config) -> Result<TrainReport> {
    config.validate()?;
    let root = config.data.root.as_ref().ok_or_else(|| DrrnetError::DatasetError("data.root is not set".into()))?;
    let pairs = load_pairs(root, &config.data.images_subdir, &config.data.gt_subdir).map_err(|e| match e {
        DrrnetError::Io { path, source } => DrrnetError::DatasetError(format!("{}: {source}", path.display())),
        other => other,
    })?;
    log::info!("training on {} pairs from {}", pairs.len(), root.display());
    Trainer::<f32>::new(config.clone(), pairs)?.run()
}

/// `sigmoid(logits)` bilinearly resized to `h x w`.
fn probabilities<T: Scalar>(logits: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (_, _, lh, lw) = logits.dims4();
    let up = if (lh, lw) == (h, w) {
        logits.clone()
    } else {
        drrnet_tensor::kernels::resize::resize_bilinear_forward(logits, h, w)
    };
    up.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Loads a checkpoint into a freshly built f32 network.
pub fn load_model(checkpoint: &Path) -> Result<(Config, DrrNet<f32>, ParamStore<f32>)> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let mut config = Config::parse(&ck.config_text).map_err(|e| DrrnetError::CheckpointMismatch(e.to_string()))?;
    config.backbone.weights = None;
    let (net, store) = DrrNet::build(&config.backbone, &config.model, config.train.seed)?;
    ck.restore_into(&store)?;
    Ok((config, net, store))
}

/// Writes `sigmoid(O_level)` at each input's original resolution as an
/// 8-bit PNG named after the input stem. Returns the written paths in
/// sorted stem order.
pub fn infer(checkpoint: &Path, input_dir: &Path, output_dir: &Path, level: usize) -> Result<Vec<PathBuf>> {
    if level > 4 {
        return Err(DrrnetError::InvalidConfig(format!("level must be 0..=4, got {level}")));
    }
    let (config, net, _store) = load_model(checkpoint)?;
    let inputs = list_images(input_dir)?;
    std::fs::create_dir_all(output_dir).map_err(|e| DrrnetError::io(output_dir, e))?;
    let size = config.train.input_size;
    let mut written = Vec::with_capacity(inputs.len());
    for (stem, path) in &inputs {
        let image = load_image(path).map_err(|e| match e {
            DrrnetError::CorruptImage { path, reason } => DrrnetError::UnreadableImage { path, reason },
            other => other,
        })?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let resized = resize_bilinear_chw(&image, size, size);
        let pair = SamplePair {
            image: resized,
            mask: Tensor::zeros(&[1, size, size]),
            name: stem.clone(),
            original_size: (h, w),
        };
        let batch = collate::<f32>(std::slice::from_ref(&pair), &config.data.mean, &config.data.std)?;
        let preds = no_grad(|| net.forward(&Var::constant(batch.images), Ctx::eval()))?;
        let p = probabilities(preds.level(level).value(), h, w);
        let out = output_dir.join(format!("{stem}.png"));
        let img = GrayImage::from_raw(
            w as u32,
            h as u32,
            p.data().iter().map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8).collect(),
        )
        .expect("export buffer size");
        img.save(&out).map_err(|e| DrrnetError::io(&out, std::io::Error::other(e)))?;
        written.push(out);
    }
    Ok(written)
}

/// Scores `pred_dir` against `gt_dir` and writes the CSV report.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, out_csv: &Path) -> Result<EvalRecord> {
    for d in [pred_dir, gt_dir] {
        if !d.is_dir() {
            return Err(DrrnetError::DatasetError(format!("{} is not a directory", d.display())));
        }
    }
    let record = crate::metrics::evaluate_dataset(pred_dir, gt_dir)?;
    record.write_csv(out_csv)?;
    Ok(record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Complexity {
    /// Trainable parameters.
    pub params: usize,
    /// Multiply-accumulates of one forward pass at `input_size`, reported as
    /// FLOPs in the usual convention.
    pub flops: u64,
    pub input_size: usize,
}

impl Complexity {
    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn flops_g(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

/// Counts parameters and per-layer closed-form MACs; never reads weights.
pub fn report_complexity(config: &Config) -> Result<Complexity> {
    let mut backbone = config.backbone.clone();
    backbone.weights = None;
    let (net, store) = DrrNet::<f32>::build(&backbone, &config.model, config.train.seed)?;
    let s = config.train.input_size;
    Ok(Complexity { params: store.num_trainable(), flops: net.macs(s, s), input_size: s })
}
