//! Desk-scale studies: stage-count sweep, wiring ablation, single-shot
//! baseline, frame-drop robustness and intermediate dumps.
//!
//! Every study is a pure function of its config, seed and corpora.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::carrier::CarrierFrame;
use crate::error::{Error, Result};
use crate::metrics::{max_ms_ssim_levels, mse, ms_ssim, psnr, ssim, SsimWindow};
use crate::nn::{StageModels, Variant};
use crate::pipeline::{hide_all, reveal_all, tensor_to_rgb8, RevealState, SecretImage};
use crate::tensor::Tensor;
use crate::training::{
    batch_stats, evaluation_batch, train, AudioCorpus, Batch, ImageCorpus, Objective, TrainOutcome,
    TrainingConfig,
};

/// Marginal PSNR gain below which adding a stage counts as saturated.
pub const SATURATION_DB: f64 = 0.2;

/// The canonical acceptance workload.
#[derive(Clone, Debug)]
pub struct ToyFixture {
    pub images: ImageCorpus,
    pub audio: AudioCorpus,
    pub config: TrainingConfig,
}

impl ToyFixture {
    pub const IMAGES: usize = 16;
    pub const SIDE: usize = 32;
    pub const CLIPS: usize = 4;
    pub const CLIP_LEN: usize = 1 << 15;
    pub const STAGES: usize = 3;
    pub const BLOCKS: usize = 2;
    pub const STEPS: usize = 200;
    pub const SEED: u64 = 7;
    /// Smaller batches and a larger step than the full-scale defaults so
    /// that 200 steps make visible progress on one core.
    pub const BATCH: usize = 4;
    pub const LR: f64 = 1e-3;

    pub fn canonical() -> Self {
        let mut config = TrainingConfig::default().with_stages(Self::STAGES);
        config.blocks = Self::BLOCKS;
        config.patch = Self::SIDE;
        config.batch_size = Self::BATCH;
        config.lr = Self::LR;
        config.seed = Self::SEED;
        config.epochs = 1;
        config.steps_per_epoch = Some(Self::STEPS);
        Self {
            images: ImageCorpus::synthetic(Self::IMAGES, Self::SIDE, Self::SEED),
            audio: AudioCorpus::synthetic(Self::CLIPS, Self::CLIP_LEN, Self::SEED),
            config,
        }
    }

    pub fn evaluation(&self) -> Result<Batch> {
        evaluation_batch(&self.images, &self.audio, &self.config)
    }
}

/// Short stable hash of a fully resolved config.
pub fn config_hash(config: &TrainingConfig) -> String {
    Sha256::digest(config.to_kv().to_text().as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Mean quality of a model over a fixed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub total_loss: f64,
    pub audio_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    /// Mean PSNR of `clamp(C_i)`.
    pub per_stage_psnr: Vec<f64>,
    /// Mean `‖S_i‖₁`.
    pub residual_l1: Vec<f64>,
}

/// Sender-side hide and receiver-side reveal of one batch entry.
fn round_trip(
    models: &StageModels<f32>,
    secret: &Tensor<f32>,
    grids: &[Tensor<f32>],
    mask: Option<&[bool]>,
) -> Result<(Vec<CarrierFrame>, RevealState<f32>)> {
    let (h, w) = (secret.height(), secret.width());
    let frames = grids
        .iter()
        .enumerate()
        .map(|(k, g)| CarrierFrame::from_grid(g, k * h * w, w, h))
        .collect::<Result<Vec<_>>>()?;
    let (containers, sent) = hide_all(&SecretImage::new(secret.clone())?, &frames, models)?;
    let state = match mask {
        Some(m) => reveal_all(&containers, models, m)?,
        None => sent,
    };
    Ok((containers, state))
}

pub fn evaluate(models: &StageModels<f32>, batch: &Batch, objective: &Objective) -> Result<Evaluation> {
    let window = SsimWindow::default();
    let n = batch.len() as f64;
    let stats = batch_stats(models, &batch.secrets, &batch.carriers, objective)?;
    let mut out = Evaluation {
        total_loss: stats.total,
        audio_mse: 0.0,
        psnr: 0.0,
        ssim: 0.0,
        ms_ssim: 0.0,
        per_stage_psnr: vec![0.0; models.stages()],
        residual_l1: vec![0.0; models.stages()],
    };
    for (secret, grids) in batch.secrets.iter().zip(&batch.carriers) {
        let (containers, state) = round_trip(models, secret, grids, None)?;
        let mut err = 0.0;
        for (c, g) in containers.iter().zip(grids) {
            err += mse(g, &c.to_grid()?)?;
        }
        out.audio_mse += err / grids.len() as f64 / n;
        let image = state.final_image();
        out.psnr += psnr(secret, &image)? / n;
        out.ssim += ssim(secret, &image, window)? / n;
        let levels = max_ms_ssim_levels(secret.height(), secret.width(), window);
        out.ms_ssim += ms_ssim(secret, &image, levels.max(1), window)? / n;
        for (i, c) in state.partials[1..].iter().enumerate() {
            out.per_stage_psnr[i] += psnr(secret, &c.clamp(0.0, 1.0))? / n;
            out.residual_l1[i] += secret.sub(&state.partials[i])?.l1() as f64 / n;
        }
    }
    Ok(out)
}

/// Whether perturbing container `j` leaves every other `R_i` bit-identical,
/// over `trials` random perturbations. `None` when the wiring makes this
/// inapplicable.
pub fn check_stage_independence(
    models: &StageModels<f32>,
    secret: &Tensor<f32>,
    grids: &[Tensor<f32>],
    trials: usize,
    seed: u64,
) -> Result<Option<bool>> {
    if !models.variant().stage_independent() || models.variant() == Variant::SingleShot {
        return Ok(None);
    }
    let t = models.stages();
    let all = vec![true; t];
    let (containers, _) = round_trip(models, secret, grids, None)?;
    let base = reveal_all(&containers, models, &all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let j = rng.random_range(0..t);
        let mut perturbed = containers.clone();
        for v in perturbed[j].samples.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let state = reveal_all(&perturbed, models, &all)?;
        for i in (0..t).filter(|&i| i != j) {
            let a = base.residuals[i].as_ref().expect("all frames present");
            let b = state.residuals[i].as_ref().expect("all frames present");
            let same = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            if !same {
                return Ok(Some(false));
            }
        }
    }
    Ok(Some(true))
}

/// One trained configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    /// Human label, e.g. `t=3` or `variant=M-E`.
    pub label: String,
    pub config_hash: String,
    pub stages: usize,
    pub variant: Variant,
    pub num_params: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub audio_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub per_stage_psnr: Vec<f64>,
    pub residual_l1: Vec<f64>,
    pub stage_independent: Option<bool>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub const CSV_HEADER: &'static str = "label,config_hash,t,variant,params,initial_loss,final_loss,audio_mse,psnr,ssim,ms_ssim,stage_independence,wall_clock_s,per_stage_psnr";

    pub fn to_csv(&self) -> String {
        let independence = match self.stage_independent {
            Some(true) => "passed",
            Some(false) => "failed",
            None => "n/a",
        };
        let curve: Vec<String> = self.per_stage_psnr.iter().map(|p| format!("{p:.4}")).collect();
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.6e},{:.4},{:.6},{:.6},{},{:.1},{}",
            self.label,
            self.config_hash,
            self.stages,
            self.variant,
            self.num_params,
            self.initial_loss,
            self.final_loss,
            self.audio_mse,
            self.psnr,
            self.ssim,
            self.ms_ssim,
            independence,
            self.wall_clock_s,
            curve.join(";")
        )
    }
}

/// A trained run: its record plus the model and training log.
pub struct Run {
    pub record: RunRecord,
    pub outcome: TrainOutcome,
}

/// Trains `config` and scores it on the deterministic evaluation batch.
pub fn run_config(
    label: impl Into<String>,
    config: &TrainingConfig,
    images: &ImageCorpus,
    audio: &AudioCorpus,
) -> Result<Run> {
    let label = label.into();
    log::info!("training {label} ({})", config_hash(config));
    let started = Instant::now();
    let eval = evaluation_batch(images, audio, config)?;
    let objective = Objective::from_config(config);
    let initial = StageModels::<f32>::init(config.model_config())?;
    let initial_loss = batch_stats(&initial, &eval.secrets, &eval.carriers, &objective)?.total;
    let outcome = train(config, images, audio, |_| {})?;
    let e = evaluate(&outcome.models, &eval, &objective)?;
    let stage_independent = check_stage_independence(
        &outcome.models,
        &eval.secrets[0],
        &eval.carriers[0],
        5,
        config.seed,
    )?;
    Ok(Run {
        record: RunRecord {
            label,
            config_hash: config_hash(config),
            stages: config.stages,
            variant: config.variant,
            num_params: outcome.models.num_params(),
            initial_loss,
            final_loss: e.total_loss,
            audio_mse: e.audio_mse,
            psnr: e.psnr,
            ssim: e.ssim,
            ms_ssim: e.ms_ssim,
            per_stage_psnr: e.per_stage_psnr,
            residual_l1: e.residual_l1,
            stage_independent,
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
        outcome,
    })
}

/// Records keyed by config hash.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub records: Vec<RunRecord>,
    /// First `t` whose marginal PSNR gain falls below [`SATURATION_DB`].
    pub saturation: Option<usize>,
}

impl SweepResult {
    pub fn push(&mut self, record: RunRecord) -> Result<()> {
        if self.records.iter().any(|r| r.config_hash == record.config_hash) {
            return Err(Error::config(format!(
                "duplicate config hash {} ({})",
                record.config_hash, record.label
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, label: &str) -> Option<&RunRecord> {
        self.records.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", RunRecord::CSV_HEADER);
        for r in &self.records {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    /// `x y` columns: stage count against revealed PSNR.
    pub fn psnr_vs_stages(&self) -> String {
        let mut out = String::from("# t psnr\n");
        for r in &self.records {
            let _ = writeln!(out, "{} {}", r.stages, r.psnr);
        }
        out
    }

    /// `x y` columns per record: stage index against PSNR of `clamp(C_i)`.
    pub fn per_stage_curve(&self, record: &RunRecord) -> String {
        let mut out = format!("# {} stage psnr\n", record.label);
        for (i, p) in record.per_stage_psnr.iter().enumerate() {
            let _ = writeln!(out, "{} {p}", i + 1);
        }
        out
    }

    /// Writes `results.csv`, `psnr_vs_t.dat` and one curve file per record.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![(dir.join("results.csv"), self.to_csv())];
        files.push((dir.join("psnr_vs_t.dat"), self.psnr_vs_stages()));
        for r in &self.records {
            let name = format!("curve_{}.dat", r.label.replace(['=', '/'], "_"));
            files.push((dir.join(name), self.per_stage_curve(r)));
        }
        let mut written = Vec::with_capacity(files.len());
        for (path, text) in files {
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// First `t` whose PSNR gain over the previous entry is below the
/// threshold.
pub fn saturation_point(records: &[RunRecord]) -> Option<usize> {
    records
        .windows(2)
        .find(|w| w[1].psnr - w[0].psnr < SATURATION_DB)
        .map(|w| w[1].stages)
}

/// Trained runs alongside their summary.
pub struct Sweep {
    pub result: SweepResult,
    pub runs: Vec<Run>,
}

impl Sweep {
    fn from_runs(runs: Vec<Run>, flag_saturation: bool) -> Result<Self> {
        let mut result = SweepResult::default();
        for r in &runs {
            result.push(r.record.clone())?;
        }
        if flag_saturation {
            result.saturation = saturation_point(&result.records);
        }
        Ok(Self { result, runs })
    }
}

/// One model per `t`, all sharing corpora and seed.
pub fn sweep_stages(
    t_values: &[usize],
    base: &TrainingConfig,
    images: &ImageCorpus,
    audio: &AudioCorpus,
) -> Result<Sweep> {
    if t_values.is_empty() {
        return Err(Error::config("no stage counts to sweep"));
    }
    let runs = t_values
        .iter()
        .map(|&t| run_config(format!("t={t}"), &base.with_stages(t), images, audio))
        .collect::<Result<Vec<_>>>()?;
    Sweep::from_runs(runs, true)
}

/// One model per wiring variant.
pub fn ablate_variants(
    variants: &[Variant],
    base: &TrainingConfig,
    images: &ImageCorpus,
    audio: &AudioCorpus,
) -> Result<Sweep> {
    let runs = variants
        .iter()
        .map(|&v| {
            let config = TrainingConfig {
                variant: v,
                ..base.clone()
            };
            run_config(format!("variant={v}"), &config, images, audio)
        })
        .collect::<Result<Vec<_>>>()?;
    Sweep::from_runs(runs, false)
}

/// The concatenated-frames baseline with the same block budget as a
/// `t`-stage model.
pub fn baseline_single_shot(base: &TrainingConfig, images: &ImageCorpus, audio: &AudioCorpus) -> Result<Run> {
    let config = TrainingConfig {
        variant: Variant::SingleShot,
        ..base.clone()
    };
    run_config("single-shot", &config, images, audio)
}

/// Single-shot and M trained on identical corpora, seed and crops.
pub fn compare_single_shot(base: &TrainingConfig, images: &ImageCorpus, audio: &AudioCorpus) -> Result<Sweep> {
    let multi = TrainingConfig {
        variant: Variant::M,
        ..base.clone()
    };
    let runs = vec![
        baseline_single_shot(base, images, audio)?,
        run_config(format!("variant={}", Variant::M), &multi, images, audio)?,
    ];
    Sweep::from_runs(runs, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DropRecord {
    pub mask: Vec<bool>,
    /// Frames actually used by the receiver.
    pub available: usize,
    /// Mean PSNR of `clamp(C_t | mask)`.
    pub psnr: f64,
}

/// Mean PSNR over the batch for each availability mask.
pub fn robustness_drop(models: &StageModels<f32>, batch: &Batch, masks: &[Vec<bool>]) -> Result<Vec<DropRecord>> {
    let t = models.stages();
    let n = batch.len() as f64;
    masks
        .iter()
        .map(|mask| {
            if mask.len() != t {
                return Err(Error::shape(format!("mask has {} entries for {t} stages", mask.len())));
            }
            let mut total = 0.0;
            let mut available = 0;
            for (secret, grids) in batch.secrets.iter().zip(&batch.carriers) {
                let (_, state) = round_trip(models, secret, grids, Some(mask))?;
                total += psnr(secret, &state.final_image())? / n;
                available = state.available();
            }
            Ok(DropRecord {
                mask: mask.clone(),
                available,
                psnr: total,
            })
        })
        .collect()
}

/// Mean PSNR of the all-zero image, the floor for any reveal.
pub fn zero_image_psnr(batch: &Batch) -> Result<f64> {
    let n = batch.len() as f64;
    batch
        .secrets
        .iter()
        .map(|s| Ok(psnr(s, &Tensor::zeros_like(s))? / n))
        .sum()
}

pub fn drop_table(records: &[DropRecord]) -> String {
    let mut out = String::from("mask,available,psnr\n");
    for r in records {
        let mask: String = r.mask.iter().map(|&m| if m { '1' } else { '0' }).collect();
        let _ = writeln!(out, "{mask},{},{:.4}", r.available, r.psnr);
    }
    out
}

/// Writes `S_i`, `R_i` and `clamp(C_i)` images for every stage plus a
/// `ranges.txt` listing the raw value range of each. Residuals are shown as
/// `0.5 + v/2`.
pub fn dump_intermediates(
    models: &StageModels<f32>,
    secret: &SecretImage,
    grids: &[Tensor<f32>],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (_, state) = round_trip(models, secret.pixels(), grids, None)?;
    let mut written = Vec::new();
    let mut ranges = String::from("image,min,max\n");
    let mut save = |name: String, raw: &Tensor<f32>, shown: Tensor<f32>| -> Result<()> {
        let path = dir.join(format!("{name}.png"));
        tensor_to_rgb8(&shown).save(&path).map_err(|e| Error::Image(e.to_string()))?;
        let (lo, hi) = raw
            .as_slice()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let _ = writeln!(ranges, "{name},{lo},{hi}");
        written.push(path);
        Ok(())
    };
    let gray = |t: &Tensor<f32>| t.map(|v| (0.5 + v / 2.0).clamp(0.0, 1.0));
    for i in 0..state.residuals.len() {
        let stage = i + 1;
        if models.variant() != Variant::SingleShot || i == 0 {
            let s = secret.pixels().sub(&state.partials[i])?;
            save(format!("stage{stage}_S"), &s, gray(&s))?;
        }
        if let Some(r) = &state.residuals[i] {
            save(format!("stage{stage}_R"), r, gray(r))?;
        }
        let c = &state.partials[stage];
        save(format!("stage{stage}_C"), c, c.clamp(0.0, 1.0))?;
    }
    let path = dir.join("ranges.txt");
    std::fs::write(&path, ranges).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
