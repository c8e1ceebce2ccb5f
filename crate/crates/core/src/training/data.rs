//! Training corpora and batch sampling.
//!
//! Real corpora are directories of images and WAV files. The synthetic
//! generators produce small deterministic stand-ins so everything can be
//! exercised without downloading datasets.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::carrier::{load_pcm, AudioStream};
use crate::error::{Error, Result};
use crate::pipeline::SecretImage;
use crate::tensor::Tensor;

use super::config::TrainingConfig;

pub const SYNTHETIC_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCorpus {
    images: Vec<Tensor<f32>>,
}

impl ImageCorpus {
    pub fn new(images: Vec<Tensor<f32>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyInput("image corpus is empty".into()));
        }
        for img in &images {
            SecretImage::new(img.clone())?;
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor<f32>] {
        &self.images
    }

    /// Every `.png`/`.jpg`/`.jpeg` under `dir`, sorted by name.
    pub fn load_dir(dir: &Path, patch: usize) -> Result<Self> {
        let files = list_files(dir, &["png", "jpg", "jpeg"])?;
        let mut images = Vec::with_capacity(files.len());
        for f in files {
            let img = SecretImage::load(&f)?;
            if img.width() < patch || img.height() < patch {
                return Err(Error::config(format!(
                    "{} is {}x{}, smaller than the {patch}x{patch} patch",
                    f.display(),
                    img.width(),
                    img.height()
                )));
            }
            images.push(img.pixels().clone());
        }
        Self::new(images)
    }

    /// Gradients, checkerboards, smoothed noise and colour blobs in turn.
    pub fn synthetic(count: usize, side: usize, seed: u64) -> Self {
        let images = (0..count)
            .map(|i| synthetic_image(i, side, seed))
            .collect();
        Self { images }
    }

    fn check_patch(&self, patch: usize) -> Result<()> {
        for img in &self.images {
            if img.width() < patch || img.height() < patch {
                return Err(Error::config(format!(
                    "image {}x{} smaller than patch {patch}",
                    img.width(),
                    img.height()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioCorpus {
    clips: Vec<AudioStream>,
}

impl AudioCorpus {
    pub fn new(clips: Vec<AudioStream>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyInput("audio corpus is empty".into()));
        }
        Ok(Self { clips })
    }

    pub fn clips(&self) -> &[AudioStream] {
        &self.clips
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let clips = list_files(dir, &["wav"])?
            .iter()
            .map(|f| load_pcm(f))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clips)
    }

    /// Tone mixtures with slow amplitude envelopes plus a little noise.
    pub fn synthetic(count: usize, len: usize, seed: u64) -> Self {
        let clips = (0..count).map(|i| synthetic_clip(i, len, seed)).collect();
        Self { clips }
    }

    fn check_capacity(&self, required: usize) -> Result<()> {
        for c in &self.clips {
            if c.len() < required {
                return Err(Error::Capacity {
                    required,
                    available: c.len(),
                });
            }
        }
        Ok(())
    }
}

fn list_files(dir: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no {} files in {}",
            extensions.join("/"),
            dir.display()
        )));
    }
    Ok(files)
}

/// One sample per batch slot: a secret crop and `t` carrier grids.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub secrets: Vec<Tensor<f32>>,
    pub carriers: Vec<Vec<Tensor<f32>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.secrets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.secrets.is_empty()
    }
}

/// Uniform top-left corner of a `patch × patch` crop.
pub fn crop_origin<R: Rng>(rng: &mut R, height: usize, width: usize, patch: usize) -> (usize, usize) {
    let y = rng.random_range(0..=height - patch);
    let x = rng.random_range(0..=width - patch);
    (y, x)
}

pub fn crop(img: &Tensor<f32>, y: usize, x: usize, patch: usize) -> Tensor<f32> {
    let mut out = Tensor::zeros(img.channels(), patch, patch);
    for c in 0..img.channels() {
        for dy in 0..patch {
            for dx in 0..patch {
                out.set(c, dy, dx, img.get(c, y + dy, x + dx));
            }
        }
    }
    out
}

fn carrier_grids(clip: &AudioStream, start: usize, stages: usize, patch: usize) -> Vec<Tensor<f32>> {
    let n = patch * patch;
    (0..stages)
        .map(|k| {
            let s = start + k * n;
            Tensor::from_vec(1, patch, patch, clip.samples[s..s + n].to_vec()).expect("n samples")
        })
        .collect()
}

/// Draws `batch_size` random secret crops, each paired with `t` back-to-back
/// frames from a random position in a random clip.
pub fn sample_batch<R: Rng>(
    images: &ImageCorpus,
    audio: &AudioCorpus,
    config: &TrainingConfig,
    rng: &mut R,
) -> Result<Batch> {
    let patch = config.patch;
    let span = config.stages * patch * patch;
    images.check_patch(patch)?;
    audio.check_capacity(span)?;
    let mut secrets = Vec::with_capacity(config.batch_size);
    let mut carriers = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let img = &images.images[rng.random_range(0..images.len())];
        let (y, x) = crop_origin(rng, img.height(), img.width(), patch);
        secrets.push(crop(img, y, x, patch));
        let clip = &audio.clips[rng.random_range(0..audio.len())];
        let start = rng.random_range(0..=clip.len() - span);
        carriers.push(carrier_grids(clip, start, config.stages, patch));
    }
    Ok(Batch { secrets, carriers })
}

/// Deterministic evaluation set: the top-left crop of every image, paired
/// with frames from clip `i mod clips` at an offset that varies with `i`.
pub fn evaluation_batch(images: &ImageCorpus, audio: &AudioCorpus, config: &TrainingConfig) -> Result<Batch> {
    let patch = config.patch;
    let span = config.stages * patch * patch;
    images.check_patch(patch)?;
    audio.check_capacity(span)?;
    let mut secrets = Vec::with_capacity(images.len());
    let mut carriers = Vec::with_capacity(images.len());
    for (i, img) in images.images.iter().enumerate() {
        secrets.push(crop(img, 0, 0, patch));
        let clip = &audio.clips[i % audio.len()];
        let slack = clip.len() - span;
        let start = if slack == 0 { 0 } else { (i * 7919) % (slack + 1) };
        carriers.push(carrier_grids(clip, start, config.stages, patch));
    }
    Ok(Batch { secrets, carriers })
}

fn item_rng(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64) ^ (salt << 48))
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn synthetic_image(index: usize, side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = item_rng(seed, index, 1);
    let mut t = Tensor::zeros(3, side, side);
    let s = side as f32;
    match index % 4 {
        0 => {
            let (a, b) = (random_color(&mut rng), random_color(&mut rng));
            let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            for y in 0..side {
                for x in 0..side {
                    let u = ((x as f32 / s - 0.5) * dx + (y as f32 / s - 0.5) * dy + 0.71) / 1.42;
                    for c in 0..3 {
                        t.set(c, y, x, a[c] + (b[c] - a[c]) * u.clamp(0.0, 1.0));
                    }
                }
            }
        }
        1 => {
            let (a, b) = (random_color(&mut rng), random_color(&mut rng));
            let cell = rng.random_range(2..=(side / 4).max(2));
            for y in 0..side {
                for x in 0..side {
                    let col = if (y / cell + x / cell) % 2 == 0 { a } else { b };
                    for (c, &v) in col.iter().enumerate() {
                        t.set(c, y, x, v);
                    }
                }
            }
        }
        2 => {
            for v in t.as_mut_slice() {
                *v = rng.random();
            }
            for _ in 0..3 {
                t = box_blur(&t);
            }
            for c in 0..3 {
                let plane = t.channel_mut(c);
                let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let range = (hi - lo).max(1e-6);
                plane.iter_mut().for_each(|v| *v = (*v - lo) / range);
            }
        }
        _ => {
            let background = random_color(&mut rng);
            for y in 0..side {
                for x in 0..side {
                    for (c, &v) in background.iter().enumerate() {
                        t.set(c, y, x, v);
                    }
                }
            }
            for _ in 0..4 {
                let col = random_color(&mut rng);
                let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
                let r = rng.random_range(s / 8.0..s / 3.0);
                for y in 0..side {
                    for x in 0..side {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        let wgt = (-d2 / (2.0 * r * r)).exp();
                        for (c, &target) in col.iter().enumerate() {
                            let v = t.get(c, y, x);
                            t.set(c, y, x, v + (target - v) * wgt);
                        }
                    }
                }
            }
        }
    }
    t.clamp(0.0, 1.0)
}

fn box_blur(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (t.height(), t.width());
    let mut out = Tensor::zeros_like(t);
    for c in 0..t.channels() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        acc += t.get(c, yy, xx);
                        n += 1.0;
                    }
                }
                out.set(c, y, x, acc / n);
            }
        }
    }
    out
}

fn synthetic_clip(index: usize, len: usize, seed: u64) -> AudioStream {
    let mut rng = item_rng(seed, index, 2);
    let sr = SYNTHETIC_SAMPLE_RATE as f64;
    let tones: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(80.0..2000.0),
                rng.random_range(0.05..0.2),
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let envelope_hz = rng.random_range(0.5..4.0);
    let samples = (0..len)
        .map(|n| {
            let time = n as f64 / sr;
            let env = 0.6 + 0.4 * (2.0 * PI * envelope_hz * time).sin();
            let tone: f64 = tones
                .iter()
                .map(|(f, a, p)| a * (2.0 * PI * f * time + p).sin())
                .sum();
            let noise = rng.random_range(-0.02..0.02);
            (env * tone + noise).clamp(-1.0, 1.0) as f32
        })
        .collect();
    AudioStream::new(samples, SYNTHETIC_SAMPLE_RATE)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(patch: usize, stages: usize, batch: usize) -> TrainingConfig {
        TrainingConfig {
            patch,
            batch_size: batch,
            ..TrainingConfig::default().with_stages(stages)
        }
    }

    #[test]
    fn synthetic_corpora_are_deterministic_and_in_range() {
        let a = ImageCorpus::synthetic(8, 16, 3);
        assert_eq!(a, ImageCorpus::synthetic(8, 16, 3));
        assert_ne!(a, ImageCorpus::synthetic(8, 16, 4));
        for img in a.images() {
            assert!(img.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let clips = AudioCorpus::synthetic(2, 1000, 3);
        assert_eq!(clips, AudioCorpus::synthetic(2, 1000, 3));
        for c in clips.clips() {
            assert!(c.samples.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn full_size_patch_is_the_whole_image() {
        let images = ImageCorpus::synthetic(1, 64, 1);
        let audio = AudioCorpus::synthetic(1, 64 * 64, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = sample_batch(&images, &audio, &config(64, 1, 2), &mut rng).unwrap();
        assert_eq!(batch.secrets[0], images.images()[0]);
        assert_eq!(batch.carriers[0][0].as_slice(), audio.clips()[0].samples.as_slice());
    }

    #[test]
    fn fixed_rng_fixed_batch() {
        let images = ImageCorpus::synthetic(4, 32, 1);
        let audio = AudioCorpus::synthetic(2, 10_000, 1);
        let cfg = config(16, 3, 4);
        let a = sample_batch(&images, &audio, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_batch(&images, &audio, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.carriers[0].len(), 3);
    }

    #[test]
    fn crops_stay_inside_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, p) = (37, 50, 16);
        let mut seen_max = (0, 0);
        for _ in 0..10_000 {
            let (y, x) = crop_origin(&mut rng, h, w, p);
            assert!(y + p <= h && x + p <= w);
            seen_max = (seen_max.0.max(y), seen_max.1.max(x));
        }
        // extreme positions are reachable
        assert_eq!(seen_max, (h - p, w - p));
    }

    #[test]
    fn undersized_items_rejected() {
        let images = ImageCorpus::synthetic(2, 8, 1);
        let audio = AudioCorpus::synthetic(1, 100, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_batch(&images, &audio, &config(16, 1, 1), &mut rng).is_err());
        let images = ImageCorpus::synthetic(2, 16, 1);
        assert!(matches!(
            sample_batch(&images, &audio, &config(8, 2, 1), &mut rng),
            Err(Error::Capacity { .. })
        ));
        assert!(ImageCorpus::new(vec![]).is_err());
        assert!(AudioCorpus::new(vec![]).is_err());
    }
}
