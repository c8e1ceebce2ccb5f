use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::kv::{join_list, parse_list, KvMap};
use crate::nn::{ModelConfig, Variant, DEFAULT_BLOCKS, DEFAULT_WIDTH};

use super::optim::LrSchedule;

pub const DEFAULT_LAMBDA: f64 = 0.8;
pub const DEFAULT_STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub stages: usize,
    pub blocks: usize,
    pub width: usize,
    pub variant: Variant,
    /// Per-stage weight of the revealing loss.
    pub lambda: Vec<f64>,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the images.
    pub steps_per_epoch: Option<usize>,
    /// Side length of the square secret crops.
    pub patch: usize,
    pub seed: u64,
    /// Straight-through 16-bit rounding of containers before revealing.
    pub quantize_in_loop: bool,
    /// Treat `S_i` as a constant (no gradient through earlier reveals).
    pub detach_residuals: bool,
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stages: DEFAULT_STAGES,
            blocks: DEFAULT_BLOCKS,
            width: DEFAULT_WIDTH,
            variant: Variant::M,
            lambda: vec![DEFAULT_LAMBDA; DEFAULT_STAGES],
            batch_size: 16,
            lr: 1e-4,
            lr_decay_factor: 3.0,
            lr_decay_every: 20,
            epochs: 200,
            steps_per_epoch: None,
            patch: 64,
            seed: 0,
            quantize_in_loop: false,
            detach_residuals: false,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainingConfig {
    /// Copy with `t` stages and the default λ for each.
    pub fn with_stages(&self, stages: usize) -> Self {
        let fill = self.lambda.first().copied().unwrap_or(DEFAULT_LAMBDA);
        Self {
            stages,
            lambda: vec![fill; stages],
            ..self.clone()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            stages: self.stages,
            blocks: self.blocks,
            width: self.width,
            variant: self.variant,
            seed: self.seed,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            factor: self.lr_decay_factor,
            every: self.lr_decay_every,
        }
    }

    /// λ per trained stage (single-shot trains one stage).
    pub fn stage_lambda(&self) -> Vec<f64> {
        if self.variant == Variant::SingleShot {
            vec![self.lambda[0]]
        } else {
            self.lambda.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.lambda.len() != self.stages {
            return Err(Error::config(format!(
                "{} lambda values for {} stages",
                self.lambda.len(),
                self.stages
            )));
        }
        if let Some(l) = self.lambda.iter().find(|l| l.is_nan() || **l <= 0.0) {
            return Err(Error::config(format!("lambda must be positive, got {l}")));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor < 1.0 {
            return Err(Error::config("lr_decay_factor must be at least 1"));
        }
        if self.patch < 8 {
            return Err(Error::config("patch must be at least 8"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be positive"));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("t", self.stages);
        kv.insert("blocks", self.blocks);
        kv.insert("width", self.width);
        kv.insert("variant", self.variant);
        kv.insert("lambda", join_list(&self.lambda));
        kv.insert("batch_size", self.batch_size);
        kv.insert("lr", self.lr);
        kv.insert("lr_decay_factor", self.lr_decay_factor);
        kv.insert("lr_decay_every", self.lr_decay_every);
        kv.insert("epochs", self.epochs);
        kv.insert(
            "steps_per_epoch",
            self.steps_per_epoch.map_or("auto".to_string(), |s| s.to_string()),
        );
        kv.insert("patch", self.patch);
        kv.insert("seed", self.seed);
        kv.insert("quantize_in_loop", self.quantize_in_loop);
        kv.insert("detach_residuals", self.detach_residuals);
        kv.insert(
            "checkpoint_every",
            self.checkpoint_every.map_or("never".to_string(), |s| s.to_string()),
        );
        if let Some(dir) = &self.checkpoint_dir {
            kv.insert("checkpoint_dir", dir.display());
        }
        kv
    }

    /// Applies every recognised key in `kv` on top of the defaults.
    /// Unrecognised keys are left for other consumers of the same file.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut c = Self::default();
        if let Some(t) = kv.parse_value("t")? {
            c = c.with_stages(t);
        }
        if let Some(v) = kv.parse_value("blocks")? {
            c.blocks = v;
        }
        if let Some(v) = kv.parse_value("width")? {
            c.width = v;
        }
        if let Some(v) = kv.get("variant") {
            c.variant = v.parse()?;
        }
        if let Some(v) = kv.get("lambda") {
            let values: Vec<f64> = parse_list(v, "lambda")?;
            c.lambda = match values.as_slice() {
                [single] => vec![*single; c.stages],
                _ => values,
            };
        }
        if let Some(v) = kv.parse_value("batch_size")? {
            c.batch_size = v;
        }
        if let Some(v) = kv.parse_value("lr")? {
            c.lr = v;
        }
        if let Some(v) = kv.parse_value("lr_decay_factor")? {
            c.lr_decay_factor = v;
        }
        if let Some(v) = kv.parse_value("lr_decay_every")? {
            c.lr_decay_every = v;
        }
        if let Some(v) = kv.parse_value("epochs")? {
            c.epochs = v;
        }
        match kv.get("steps_per_epoch") {
            None | Some("auto") => {}
            Some(_) => c.steps_per_epoch = kv.parse_value("steps_per_epoch")?,
        }
        if let Some(v) = kv.parse_value("patch")? {
            c.patch = v;
        }
        if let Some(v) = kv.parse_value("seed")? {
            c.seed = v;
        }
        if let Some(v) = kv.parse_value("quantize_in_loop")? {
            c.quantize_in_loop = v;
        }
        if let Some(v) = kv.parse_value("detach_residuals")? {
            c.detach_residuals = v;
        }
        match kv.get("checkpoint_every") {
            None | Some("never") => {}
            Some(_) => c.checkpoint_every = kv.parse_value("checkpoint_every")?,
        }
        if let Some(v) = kv.get("checkpoint_dir") {
            c.checkpoint_dir = Some(PathBuf::from(v));
        }
        c.validate()?;
        Ok(c)
    }
}
