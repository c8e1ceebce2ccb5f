use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use resihide_core::carrier::{load_pcm, select_frames, FramingPolicy, PcmBits};
use resihide_core::experiments::{self, Sweep};
use resihide_core::kv::KvMap;
use resihide_core::metrics::{quality_report, QualityReport};
use resihide_core::pipeline::{self, default_manifest, SecretImage, StegoBundle};
use resihide_core::training::{self, evaluation_batch, AudioCorpus, EpochRecord, ImageCorpus, Objective};
use resihide_core::{Error, StageModels, Tensor, TrainingConfig, Variant};

use crate::Args;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn require<'a>(path: &'a Option<PathBuf>, flag: &str, verb: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("{verb} requires {flag}")))
}

fn fs_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Config file, then `--set` overrides, then defaults for whatever the
/// verb needs.
struct Resolved {
    kv: KvMap,
    training: TrainingConfig,
}

impl Resolved {
    fn new(args: &Args) -> Result<Self> {
        let mut kv = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| fs_err(path, e))?;
                KvMap::parse(&text)?
            }
            None => KvMap::new(),
        };
        for (k, v) in &args.set {
            kv.insert(k.clone(), v);
        }
        let training = TrainingConfig::from_kv(&kv).map_err(|e| match e {
            Error::Config(msg) => CliError::Usage(format!("invalid configuration: {msg}")),
            other => CliError::Core(other),
        })?;
        Ok(Self { kv, training })
    }

    fn default(&mut self, key: &str, value: impl std::fmt::Display) {
        if self.kv.get(key).is_none() {
            self.kv.insert(key, value);
        }
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.kv
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("cannot parse `{key}` value {v:?}")))
            })
            .transpose()
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.kv.get(key).unwrap_or_default();
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Usage(format!("cannot parse `{key}` entry {s:?}")))
            })
            .collect()
    }

    /// Prints every setting the run depends on, ending with the seed.
    fn echo(&self) {
        let mut all = self.kv.clone();
        all.merge(&self.training.to_kv());
        println!("# resolved config");
        print!("{}", all.to_text());
        println!("# seed {}", self.training.seed);
    }

    /// Fills in synthetic corpus defaults unless directories are given.
    fn corpus_defaults(&mut self, max_stages: usize) {
        let patch = self.training.patch;
        if self.kv.get("image_dir").is_none() {
            self.default("synthetic_images", 16);
            self.default("synthetic_side", patch);
        }
        if self.kv.get("audio_dir").is_none() {
            self.default("synthetic_clips", 4);
            self.default("synthetic_clip_len", (1usize << 15).max(2 * max_stages * patch * patch));
        }
    }

    fn corpora(&self) -> Result<(ImageCorpus, AudioCorpus)> {
        let seed = self.training.seed;
        let images = match self.kv.get("image_dir") {
            Some(dir) => ImageCorpus::load_dir(Path::new(dir), self.training.patch)?,
            None => ImageCorpus::synthetic(
                self.parse("synthetic_images")?.unwrap_or(16),
                self.parse("synthetic_side")?.unwrap_or(self.training.patch),
                seed,
            ),
        };
        let audio = match self.kv.get("audio_dir") {
            Some(dir) => AudioCorpus::load_dir(Path::new(dir))?,
            None => AudioCorpus::synthetic(
                self.parse("synthetic_clips")?.unwrap_or(4),
                self.parse("synthetic_clip_len")?.unwrap_or(1 << 15),
                seed,
            ),
        };
        Ok((images, audio))
    }

    /// Aligns the training config with a loaded model.
    fn adopt(&mut self, models: &StageModels<f32>) {
        let m = models.config();
        let mut c = self.training.with_stages(m.stages);
        c.blocks = m.blocks;
        c.width = m.width;
        c.variant = m.variant;
        self.training = c;
    }
}

fn load_models(path: &Path) -> Result<StageModels<f32>> {
    let models = StageModels::<f32>::load(path)?;
    let c = models.config();
    println!("# checkpoint t={} blocks={} width={} variant={}", c.stages, c.blocks, c.width, c.variant);
    Ok(models)
}

fn manifest_path(r: &Resolved, bundle: &Path) -> PathBuf {
    r.kv
        .get("manifest")
        .map(PathBuf::from)
        .unwrap_or_else(|| bundle.with_extension("manifest"))
}

fn framing(r: &Resolved) -> Result<FramingPolicy> {
    let offsets: Vec<usize> = r.list("offsets")?;
    Ok(if offsets.is_empty() {
        FramingPolicy::Contiguous
    } else {
        FramingPolicy::Offsets(offsets)
    })
}

pub fn train(args: &Args) -> Result<String> {
    let out = require(&args.out, "--out", "train")?;
    let mut r = Resolved::new(args)?;
    r.corpus_defaults(r.training.stages);
    r.echo();
    let (images, audio) = r.corpora()?;
    fs::create_dir_all(out).map_err(|e| fs_err(out, e))?;
    let config_path = out.join("config.txt");
    let mut resolved = r.kv.clone();
    resolved.merge(&r.training.to_kv());
    fs::write(&config_path, resolved.to_text()).map_err(|e| fs_err(&config_path, e))?;

    eprintln!("{}", EpochRecord::header(r.training.stage_lambda().len()));
    let outcome = training::train(&r.training, &images, &audio, |rec| eprintln!("{}", rec.to_tsv()))?;
    let log_path = out.join("train_log.tsv");
    fs::write(&log_path, outcome.log_tsv()).map_err(|e| fs_err(&log_path, e))?;
    let ckpt = out.join("model.ckpt");
    let id = outcome.models.save(&ckpt)?;
    let last = outcome.log.last().expect("at least one epoch");
    Ok(format!(
        "ok verb=train checkpoint={} checkpoint_id={id} steps={} final_loss={:.6} psnr={:.4}",
        ckpt.display(),
        outcome.steps,
        last.total,
        last.psnr
    ))
}

pub fn embed(args: &Args) -> Result<String> {
    let secret_path = require(&args.secret, "--secret", "embed")?;
    let cover_path = require(&args.cover, "--cover", "embed")?;
    let ckpt = require(&args.checkpoint, "--checkpoint", "embed")?;
    let out = require(&args.out, "--out", "embed")?;
    let mut r = Resolved::new(args)?;
    r.default("pcm_bits", PcmBits::Int16);
    let bits: PcmBits = r
        .kv
        .get("pcm_bits")
        .unwrap_or("16")
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let models = load_models(ckpt)?;
    r.adopt(&models);
    r.echo();

    let secret = SecretImage::load(secret_path)?;
    let cover = load_pcm(cover_path)?;
    let mut manifest = default_manifest(&secret, &models, bits);
    if let FramingPolicy::Offsets(offsets) = framing(&r)? {
        manifest.offsets = offsets;
    }
    let bundle = pipeline::embed(&secret, &cover, &models, &manifest)?;
    let manifest_out = manifest_path(&r, out);
    bundle.save(out, &manifest_out)?;
    Ok(format!(
        "ok verb=embed audio={} manifest={} checkpoint_id={} stages={}",
        out.display(),
        manifest_out.display(),
        manifest.checkpoint_id,
        manifest.stages
    ))
}

pub fn extract(args: &Args) -> Result<String> {
    let bundle_path = require(&args.bundle, "--bundle", "extract")?;
    let ckpt = require(&args.checkpoint, "--checkpoint", "extract")?;
    let out = require(&args.out, "--out", "extract")?;
    let mut r = Resolved::new(args)?;
    let models = load_models(ckpt)?;
    r.adopt(&models);
    r.echo();

    let bundle = StegoBundle::load(bundle_path, &manifest_path(&r, bundle_path))?;
    let t = bundle.manifest.stages;
    let mask = if args.drop.is_empty() {
        None
    } else {
        let mut mask = vec![true; t];
        for &d in &args.drop {
            if d == 0 || d > t {
                return Err(CliError::Usage(format!("--drop {d} is outside stages 1..={t}")));
            }
            mask[d - 1] = false;
        }
        Some(mask)
    };
    let (image, state) = pipeline::extract(&bundle, &models, mask.as_deref())?;
    image.save(out)?;
    Ok(format!(
        "ok verb=extract image={} available={}/{t}",
        out.display(),
        state.available()
    ))
}

pub fn eval(args: &Args) -> Result<String> {
    let ckpt = require(&args.checkpoint, "--checkpoint", "eval")?;
    let mut r = Resolved::new(args)?;
    if let Some(bundle_path) = &args.bundle {
        let secret_path = require(&args.secret, "--secret", "eval with --bundle")?;
        let cover_path = require(&args.cover, "--cover", "eval with --bundle")?;
        let models = load_models(ckpt)?;
        r.adopt(&models);
        r.echo();
        let bundle = StegoBundle::load(bundle_path, &manifest_path(&r, bundle_path))?;
        let secret = SecretImage::load(secret_path)?;
        let cover = load_pcm(cover_path)?;
        let (_, state) = pipeline::extract(&bundle, &models, None)?;
        let report = quality_report(&cover, &bundle.as_stored(), secret.pixels(), &state)?;
        println!("{}", QualityReport::header());
        println!("{report}");
        return Ok(format!(
            "ok verb=eval audio_mse={:.6e} psnr={:.4} ssim={:.6} ms_ssim={:.6}",
            report.audio_mse, report.psnr, report.ssim, report.ms_ssim
        ));
    }
    let models = StageModels::<f32>::load(ckpt)?;
    r.adopt(&models);
    r.corpus_defaults(r.training.stages);
    r.echo();
    let (images, audio) = r.corpora()?;
    let batch = evaluation_batch(&images, &audio, &r.training)?;
    let e = experiments::evaluate(&models, &batch, &Objective::from_config(&r.training))?;
    let curve: Vec<String> = e.per_stage_psnr.iter().map(|p| format!("{p:.4}")).collect();
    Ok(format!(
        "ok verb=eval samples={} loss={:.6} audio_mse={:.6e} psnr={:.4} ssim={:.6} ms_ssim={:.6} per_stage_psnr={}",
        batch.len(),
        e.total_loss,
        e.audio_mse,
        e.psnr,
        e.ssim,
        e.ms_ssim,
        curve.join(",")
    ))
}

fn write_sweep(verb: &str, sweep: &Sweep, out: &Path) -> Result<String> {
    let files = sweep.result.write(out)?;
    eprint!("{}", sweep.result.to_csv());
    let saturation = sweep
        .result
        .saturation
        .map_or("none".to_string(), |t| t.to_string());
    Ok(format!(
        "ok verb={verb} records={} saturation={saturation} results={}",
        sweep.result.records.len(),
        files[0].display()
    ))
}

pub fn sweep(args: &Args) -> Result<String> {
    let out = require(&args.out, "--out", "sweep")?;
    let mut r = Resolved::new(args)?;
    r.default("t_values", "1,2,3");
    let t_values: Vec<usize> = r.list("t_values")?;
    let max_t = t_values.iter().copied().max().ok_or_else(|| CliError::Usage("t_values is empty".into()))?;
    r.corpus_defaults(max_t);
    r.echo();
    let (images, audio) = r.corpora()?;
    let sweep = experiments::sweep_stages(&t_values, &r.training, &images, &audio)?;
    write_sweep("sweep", &sweep, out)
}

pub fn ablate(args: &Args) -> Result<String> {
    let out = require(&args.out, "--out", "ablate")?;
    let mut r = Resolved::new(args)?;
    r.default("variants", "M,M-E,M-D,M-ED,S");
    let variants: Vec<Variant> = r.list("variants")?;
    if variants.is_empty() {
        return Err(CliError::Usage("variants is empty".into()));
    }
    r.corpus_defaults(r.training.stages);
    r.echo();
    let (images, audio) = r.corpora()?;
    let sweep = experiments::ablate_variants(&variants, &r.training, &images, &audio)?;
    write_sweep("ablate", &sweep, out)
}

pub fn dump(args: &Args) -> Result<String> {
    let ckpt = require(&args.checkpoint, "--checkpoint", "dump")?;
    let secret_path = require(&args.secret, "--secret", "dump")?;
    let cover_path = require(&args.cover, "--cover", "dump")?;
    let out = require(&args.out, "--out", "dump")?;
    let mut r = Resolved::new(args)?;
    let models = load_models(ckpt)?;
    r.adopt(&models);
    r.echo();
    let secret = SecretImage::load(secret_path)?;
    let cover = load_pcm(cover_path)?;
    let frames = select_frames(&cover, models.stages(), secret.width(), secret.height(), &framing(&r)?)?;
    let grids = frames
        .iter()
        .map(|f| f.to_grid())
        .collect::<resihide_core::Result<Vec<Tensor<f32>>>>()?;
    let files = experiments::dump_intermediates(&models, &secret, &grids, out)?;
    Ok(format!("ok verb=dump files={} dir={}", files.len(), out.display()))
}
