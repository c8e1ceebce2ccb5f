//! Joint multi-stage training.
//!
//! The objective is `Σ_i L_H[i] + λ_i L_R[i]` with
//! `L_H[i] = mean_n ‖container_i − cover_i‖²` and
//! `L_R[i] = mean_n ‖R_i − S_i‖²`. Because `S_i = S_0 − C_{i−1}` depends on
//! every earlier reveal, gradients flow backwards through the residual
//! chain unless `detach_residuals` is set.

mod config;
mod data;
mod loss;
mod optim;

pub use config::{TrainingConfig, DEFAULT_LAMBDA, DEFAULT_STAGES};
pub use data::{
    crop, crop_origin, evaluation_batch, sample_batch, AudioCorpus, Batch, ImageCorpus,
    SYNTHETIC_SAMPLE_RATE,
};
pub use loss::{hiding_loss, revealing_loss, total_loss};
pub use optim::{Adam, LrSchedule};

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::nn::StageModels;
use crate::pipeline::{forward_stages, ForwardOptions, ForwardTrace};
use crate::tensor::{Scalar, Tensor};

use loss::sq_distance;

/// How a batch is scored and differentiated.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub lambda: Vec<f64>,
    pub quantize_in_loop: bool,
    pub detach_residuals: bool,
}

impl Objective {
    pub fn from_config(config: &TrainingConfig) -> Self {
        Self {
            lambda: config.stage_lambda(),
            quantize_in_loop: config.quantize_in_loop,
            detach_residuals: config.detach_residuals,
        }
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            quantize_containers: self.quantize_in_loop,
        }
    }
}

/// Batch-averaged losses and quality figures.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub hiding: Vec<f64>,
    pub revealing: Vec<f64>,
    pub total: f64,
    /// Per-sample mean squared container error, averaged.
    pub audio_mse: f64,
    /// Per-sample PSNR of `clamp(C_t)`, averaged.
    pub psnr: f64,
    /// Mean `‖S_i‖₁` per stage.
    pub residual_l1: Vec<f64>,
}

impl BatchStats {
    fn accumulate(&mut self, other: &BatchStats) {
        for (a, b) in self.hiding.iter_mut().zip(&other.hiding) {
            *a += b;
        }
        for (a, b) in self.revealing.iter_mut().zip(&other.revealing) {
            *a += b;
        }
        for (a, b) in self.residual_l1.iter_mut().zip(&other.residual_l1) {
            *a += b;
        }
        self.total += other.total;
        self.audio_mse += other.audio_mse;
        self.psnr += other.psnr;
    }

    fn scale(&mut self, by: f64) {
        self.hiding.iter_mut().for_each(|v| *v *= by);
        self.revealing.iter_mut().for_each(|v| *v *= by);
        self.residual_l1.iter_mut().for_each(|v| *v *= by);
        self.total *= by;
        self.audio_mse *= by;
        self.psnr *= by;
    }
}

fn check_batch<S: Scalar>(secrets: &[Tensor<S>], carriers: &[Vec<Tensor<S>>], lambda: &[f64], stages: usize) -> Result<()> {
    if secrets.is_empty() || secrets.len() != carriers.len() {
        return Err(Error::shape(format!(
            "{} secrets and {} carrier sets",
            secrets.len(),
            carriers.len()
        )));
    }
    if lambda.len() != stages {
        return Err(Error::shape(format!("{} lambda values for {stages} trained stages", lambda.len())));
    }
    Ok(())
}

fn sample_stats<S: Scalar>(trace: &ForwardTrace<S>, secret: &Tensor<S>, lambda: &[f64]) -> Result<BatchStats> {
    let hiding: Vec<f64> = trace
        .stages
        .iter()
        .map(|s| sq_distance(&s.hide.container, &s.carrier))
        .collect();
    let revealing: Vec<f64> = trace
        .stages
        .iter()
        .map(|s| sq_distance(&s.reveal.residual, &s.secret_residual))
        .collect();
    let total = total_loss(&hiding, &revealing, lambda)?;
    let container_len: usize = trace.stages.iter().map(|s| s.carrier.len()).sum();
    let audio_mse = hiding.iter().sum::<f64>() / container_len as f64;
    Ok(BatchStats {
        total,
        audio_mse,
        psnr: psnr(secret, &trace.final_image())?,
        residual_l1: trace.stages.iter().map(|s| s.secret_residual.l1().f64()).collect(),
        hiding,
        revealing,
    })
}

/// Losses and metrics without gradients.
pub fn batch_stats<S: Scalar>(
    models: &StageModels<S>,
    secrets: &[Tensor<S>],
    carriers: &[Vec<Tensor<S>>],
    objective: &Objective,
) -> Result<BatchStats> {
    let trained = trained_stages(models);
    check_batch(secrets, carriers, &objective.lambda, trained)?;
    let mut acc: Option<BatchStats> = None;
    for (secret, frames) in secrets.iter().zip(carriers) {
        let trace = forward_stages(models, secret, frames, objective.forward_options())?;
        let stats = sample_stats(&trace, secret, &objective.lambda)?;
        match &mut acc {
            Some(a) => a.accumulate(&stats),
            None => acc = Some(stats),
        }
    }
    let mut stats = acc.expect("non-empty batch");
    stats.scale(1.0 / secrets.len() as f64);
    Ok(stats)
}

/// Overwrites `grads` with the gradient of the batch objective and returns
/// the batch statistics.
pub fn batch_gradients<S: Scalar>(
    models: &StageModels<S>,
    secrets: &[Tensor<S>],
    carriers: &[Vec<Tensor<S>>],
    objective: &Objective,
    grads: &mut StageModels<S>,
) -> Result<BatchStats> {
    let trained = trained_stages(models);
    check_batch(secrets, carriers, &objective.lambda, trained)?;
    for p in grads.param_slices_mut() {
        p.fill(S::zero());
    }
    let scale = S::of(1.0 / secrets.len() as f64);
    let mut acc: Option<BatchStats> = None;
    for (secret, frames) in secrets.iter().zip(carriers) {
        let trace = forward_stages(models, secret, frames, objective.forward_options())?;
        let stats = sample_stats(&trace, secret, &objective.lambda)?;
        backward(models, &trace, objective, scale, grads)?;
        match &mut acc {
            Some(a) => a.accumulate(&stats),
            None => acc = Some(stats),
        }
    }
    let mut stats = acc.expect("non-empty batch");
    stats.scale(1.0 / secrets.len() as f64);
    Ok(stats)
}

fn trained_stages<S: Scalar>(models: &StageModels<S>) -> usize {
    if models.variant() == crate::nn::Variant::SingleShot {
        1
    } else {
        models.stages()
    }
}

/// Reverse-mode pass over one sample's trace, accumulating `scale ·` the
/// per-sample gradient into `grads`.
fn backward<S: Scalar>(
    models: &StageModels<S>,
    trace: &ForwardTrace<S>,
    objective: &Objective,
    scale: S,
    grads: &mut StageModels<S>,
) -> Result<()> {
    let two = S::of(2.0);
    let width = models.config().width;
    let variant = models.variant();
    // dL/dC_i for the stage being processed.
    let mut d_partial: Option<Tensor<S>> = None;
    let mut d_hide_features: Option<Tensor<S>> = None;
    let mut d_reveal_features: Option<Tensor<S>> = None;

    for (i, stage) in trace.stages.iter().enumerate().rev() {
        let lambda = S::of(objective.lambda[i]);
        let reveal_err = stage.reveal.residual.sub(&stage.secret_residual)?;
        let mut d_residual = reveal_err.map(|v| two * lambda * scale * v);
        if let Some(g) = &d_partial {
            d_residual.add_assign(g)?;
        }
        let d_reveal_in = models.revealing(i).backward(
            &stage.reveal.cache,
            &d_residual,
            d_reveal_features.as_ref(),
            grads.revealing_mut(i),
        );
        let cc = stage.hide.container.channels();
        // Straight through the optional quantizer.
        let mut d_container = d_reveal_in.channel_range(0, cc);
        d_reveal_features = (variant.revealing_connected() && i > 0)
            .then(|| d_reveal_in.channel_range(cc, width));

        let hide_err = stage.hide.container.sub(&stage.carrier)?;
        d_container.add_assign(&hide_err.map(|v| two * scale * v))?;
        let d_hide_in = models.hiding(i).backward(
            &stage.hide.cache,
            &d_container,
            d_hide_features.as_ref(),
            grads.hiding_mut(i),
        );
        d_hide_features = (variant.hiding_connected() && i > 0)
            .then(|| d_hide_in.channel_range(crate::nn::SECRET_CHANNELS + cc, width));

        if objective.detach_residuals || i == 0 {
            continue;
        }
        // S_i = S_0 − C_{i−1} and C_i = C_{i−1} + R_i.
        let mut d_secret = d_hide_in.channel_range(0, crate::nn::SECRET_CHANNELS);
        d_secret.add_assign(&reveal_err.map(|v| -two * lambda * scale * v))?;
        let mut next = d_secret.map(|v| -v);
        if let Some(g) = &d_partial {
            next.add_assign(g)?;
        }
        d_partial = Some(next);
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub hiding: Vec<f64>,
    pub revealing: Vec<f64>,
    pub audio_mse: f64,
    pub psnr: f64,
}

impl EpochRecord {
    pub fn header(stages: usize) -> String {
        let mut out = String::from("epoch\tlr\ttotal");
        for i in 1..=stages {
            let _ = write!(out, "\tL_H{i}");
        }
        for i in 1..=stages {
            let _ = write!(out, "\tL_R{i}");
        }
        out.push_str("\taudio_mse\tpsnr");
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\t{:e}\t{:.6}", self.epoch, self.lr, self.total);
        for v in self.hiding.iter().chain(&self.revealing) {
            let _ = write!(out, "\t{v:.6}");
        }
        let _ = write!(out, "\t{:.6e}\t{:.4}", self.audio_mse, self.psnr);
        out
    }
}

/// Stateful optimisation loop over `f32` models.
pub struct Trainer {
    config: TrainingConfig,
    objective: Objective,
    models: StageModels<f32>,
    grads: StageModels<f32>,
    optimizer: Adam<f32>,
    rng: ChaCha8Rng,
    steps: usize,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let models = StageModels::init(config.model_config())?;
        Ok(Self::from_models(config, models))
    }

    pub fn from_models(config: TrainingConfig, models: StageModels<f32>) -> Self {
        let grads = models.zeros_like();
        let optimizer = Adam::new(&models);
        // Batch sampling uses its own stream so it does not depend on init.
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_BA7C);
        Self {
            objective: Objective::from_config(&config),
            config,
            models,
            grads,
            optimizer,
            rng,
            steps: 0,
        }
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn models(&self) -> &StageModels<f32> {
        &self.models
    }

    pub fn into_models(self) -> StageModels<f32> {
        self.models
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sample(&mut self, images: &ImageCorpus, audio: &AudioCorpus) -> Result<Batch> {
        sample_batch(images, audio, &self.config, &mut self.rng)
    }

    /// One optimizer step on `batch` at learning rate `lr`. Returns the
    /// statistics of the batch before the update.
    pub fn step(&mut self, batch: &Batch, lr: f64) -> Result<BatchStats> {
        let stats = batch_gradients(
            &self.models,
            &batch.secrets,
            &batch.carriers,
            &self.objective,
            &mut self.grads,
        )?;
        if !stats.total.is_finite() {
            return Err(Error::Divergence {
                step: self.steps,
                loss: stats.total,
            });
        }
        self.optimizer.step(&mut self.models, &self.grads, lr);
        self.steps += 1;
        Ok(stats)
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<BatchStats> {
        batch_stats(&self.models, &batch.secrets, &batch.carriers, &self.objective)
    }
}

pub struct TrainOutcome {
    pub models: StageModels<f32>,
    pub log: Vec<EpochRecord>,
    pub steps: usize,
}

impl TrainOutcome {
    pub fn log_tsv(&self) -> String {
        let stages = self.log.first().map_or(0, |r| r.hiding.len());
        let mut out = EpochRecord::header(stages);
        out.push('\n');
        for r in &self.log {
            out.push_str(&r.to_tsv());
            out.push('\n');
        }
        out
    }
}

/// Runs the configured number of epochs. `on_epoch` sees every record as
/// soon as it is complete.
pub fn train(
    config: &TrainingConfig,
    images: &ImageCorpus,
    audio: &AudioCorpus,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| images.len().div_ceil(config.batch_size));
    let schedule = config.schedule();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = schedule.at(epoch);
        let mut acc: Option<BatchStats> = None;
        for _ in 0..steps_per_epoch {
            let batch = trainer.sample(images, audio)?;
            let stats = trainer.step(&batch, lr)?;
            match &mut acc {
                Some(a) => a.accumulate(&stats),
                None => acc = Some(stats),
            }
        }
        let mut stats = acc.expect("at least one step per epoch");
        stats.scale(1.0 / steps_per_epoch as f64);
        let record = EpochRecord {
            epoch,
            lr,
            total: stats.total,
            hiding: stats.hiding,
            revealing: stats.revealing,
            audio_mse: stats.audio_mse,
            psnr: stats.psnr,
        };
        log::info!("{}", record.to_tsv());
        on_epoch(&record);
        log.push(record);
        if let (Some(every), Some(dir)) = (config.checkpoint_every, &config.checkpoint_dir) {
            if (epoch + 1) % every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                trainer
                    .models()
                    .save(&dir.join(format!("epoch_{:04}.ckpt", epoch + 1)))?;
            }
        }
    }
    let steps = trainer.steps();
    Ok(TrainOutcome {
        models: trainer.into_models(),
        log,
        steps,
    })
}
