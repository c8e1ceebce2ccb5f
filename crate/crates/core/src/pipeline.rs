//! The t-stage protocol.
//!
//! Stage `i` hides `S_i = S_0 - C_{i-1}` in frame `i`, where `C_{i-1}` is the
//! sum of everything stages `1..i-1` revealed. Hiding and revealing are
//! therefore interleaved: stage `i` cannot be hidden before stage `i - 1`
//! has been revealed.

use std::path::Path;

use crate::carrier::{
    quantize_stream, save_pcm, select_frames, splice, AudioStream, CarrierFrame, FramingPolicy,
    Manifest, PcmBits,
};
use crate::error::{Error, Result};
use crate::nn::{hide_forward, reveal_forward, HideOutput, RevealOutput, StageModels, Variant, SECRET_CHANNELS};
use crate::tensor::{Scalar, Tensor};

/// Payload image, three channels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct SecretImage {
    pixels: Tensor<f32>,
}

impl SecretImage {
    pub fn new(pixels: Tensor<f32>) -> Result<Self> {
        if pixels.channels() != SECRET_CHANNELS {
            return Err(Error::shape(format!(
                "secret image needs {SECRET_CHANNELS} channels, got {}",
                pixels.channels()
            )));
        }
        if let Some(v) = pixels.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::shape(format!("secret pixel {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Tensor<f32> {
        &self.pixels
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = Tensor::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                t.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
            }
        }
        Self { pixels: t }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        tensor_to_rgb8(&self.pixels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Renders a 3×h×w tensor already in [0, 1] as 8-bit RGB.
pub fn tensor_to_rgb8<S: Scalar>(t: &Tensor<S>) -> image::RgbImage {
    let (h, w) = (t.height(), t.width());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            let v = t.get(c.min(t.channels() - 1), y as usize, x as usize).f64();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Revealed residuals and their running sums.
#[derive(Clone, Debug, PartialEq)]
pub struct RevealState<S = f32> {
    /// `R_1..R_t`; `None` where the frame was unavailable.
    pub residuals: Vec<Option<Tensor<S>>>,
    /// `C_0..C_t`, with `C_0 = 0`.
    pub partials: Vec<Tensor<S>>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> RevealState<S> {
    fn start(shape: [usize; 3]) -> Self {
        Self {
            residuals: Vec::new(),
            partials: vec![Tensor::zeros(shape[0], shape[1], shape[2])],
            mask: Vec::new(),
        }
    }

    fn push(&mut self, residual: Option<Tensor<S>>) -> Result<()> {
        let mut next = self.partials.last().expect("C_0 present").clone();
        if let Some(r) = &residual {
            next.add_assign(r)?;
        }
        self.mask.push(residual.is_some());
        self.residuals.push(residual);
        self.partials.push(next);
        Ok(())
    }

    /// Unclamped `C_t`.
    pub fn accumulated(&self) -> &Tensor<S> {
        self.partials.last().expect("C_0 present")
    }

    /// `clamp(C_t, 0, 1)`.
    pub fn final_image(&self) -> Tensor<S> {
        self.accumulated().clamp(S::zero(), S::one())
    }

    pub fn available(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// `S_i = S_0 - C_{i-1}`, unclipped.
pub fn compute_residual<S: Scalar>(secret: &Tensor<S>, partial: &Tensor<S>) -> Result<Tensor<S>> {
    secret.sub(partial)
}

/// Options for the differentiable forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Round containers to 16-bit PCM before revealing.
    pub quantize_containers: bool,
}

/// Everything one stage computed, with caches for backpropagation.
pub struct StageTrace<S> {
    pub secret_residual: Tensor<S>,
    pub carrier: Tensor<S>,
    /// What the revealing net saw (quantized container when requested).
    pub reveal_input: Tensor<S>,
    pub hide: HideOutput<S>,
    pub reveal: RevealOutput<S>,
}

pub struct ForwardTrace<S> {
    pub stages: Vec<StageTrace<S>>,
    /// `C_0..C_t`.
    pub partials: Vec<Tensor<S>>,
    /// Carrier frames consumed (differs from `stages.len()` for single-shot).
    pub frames: usize,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn final_image(&self) -> Tensor<S> {
        self.partials
            .last()
            .expect("C_0 present")
            .clamp(S::zero(), S::one())
    }

    pub fn to_reveal_state(&self) -> RevealState<S> {
        RevealState {
            residuals: self
                .stages
                .iter()
                .map(|s| Some(s.reveal.residual.clone()))
                .collect(),
            partials: self.partials.clone(),
            mask: vec![true; self.frames],
        }
    }
}

fn quantize_grid<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let scale = S::of(32768.0);
    t.map(|v| {
        let q = (v.max(-S::one()).min(S::one()) * scale).round();
        q.max(-scale).min(scale - S::one()) / scale
    })
}

/// Runs hiding and revealing for every stage on one sample.
///
/// `carriers` holds one `1×h×w` grid per stage. For the single-shot
/// variant the trace has one entry whose carrier stacks all frames.
pub fn forward_stages<S: Scalar>(
    models: &StageModels<S>,
    secret: &Tensor<S>,
    carriers: &[Tensor<S>],
    opts: ForwardOptions,
) -> Result<ForwardTrace<S>> {
    let t = models.stages();
    if carriers.len() != t {
        return Err(Error::shape(format!("{} carrier frames for {t} stages", carriers.len())));
    }
    let (h, w) = (secret.height(), secret.width());
    secret.ensure_shape([SECRET_CHANNELS, h, w], "secret")?;
    for c in carriers {
        c.ensure_shape([1, h, w], "carrier frame")?;
    }
    let mut partials = vec![Tensor::zeros(SECRET_CHANNELS, h, w)];
    let mut stages = Vec::with_capacity(t);

    if models.variant() == Variant::SingleShot {
        let refs: Vec<&Tensor<S>> = carriers.iter().collect();
        let stacked = Tensor::concat(&refs)?;
        let trace = run_stage(models, 0, secret.clone(), stacked, None, None, opts)?;
        partials.push(trace.reveal.residual.clone());
        stages.push(trace);
        return Ok(ForwardTrace {
            stages,
            partials,
            frames: t,
        });
    }

    let variant = models.variant();
    for (i, carrier) in carriers.iter().enumerate() {
        let previous = partials.last().expect("C_0 present");
        let residual = compute_residual(secret, previous)?;
        let prev = stages.last();
        let hide_in = prev
            .filter(|_| variant.hiding_connected())
            .map(|p: &StageTrace<S>| p.hide.features.clone());
        let reveal_in = prev
            .filter(|_| variant.revealing_connected())
            .map(|p: &StageTrace<S>| p.reveal.features.clone());
        let trace = run_stage(models, i, residual, carrier.clone(), hide_in, reveal_in, opts)?;
        let mut next = previous.clone();
        next.add_assign(&trace.reveal.residual)?;
        partials.push(next);
        stages.push(trace);
    }
    Ok(ForwardTrace {
        stages,
        partials,
        frames: t,
    })
}

fn run_stage<S: Scalar>(
    models: &StageModels<S>,
    stage: usize,
    secret_residual: Tensor<S>,
    carrier: Tensor<S>,
    hide_in: Option<Tensor<S>>,
    reveal_in: Option<Tensor<S>>,
    opts: ForwardOptions,
) -> Result<StageTrace<S>> {
    let hide = hide_forward(&secret_residual, &carrier, models.hiding(stage), hide_in.as_ref())?;
    let reveal_input = if opts.quantize_containers {
        quantize_grid(&hide.container)
    } else {
        hide.container.clone()
    };
    let reveal = reveal_forward(&reveal_input, models.revealing(stage), reveal_in.as_ref())?;
    Ok(StageTrace {
        secret_residual,
        carrier,
        reveal_input,
        hide,
        reveal,
    })
}

fn frame_grids<S: Scalar>(frames: &[CarrierFrame]) -> Result<Vec<Tensor<S>>> {
    frames.iter().map(CarrierFrame::to_grid).collect()
}

/// Hides `secret` across `frames`; returns the container frames (same
/// offsets) and the sender-side reveal trace.
pub fn hide_all<S: Scalar>(
    secret: &SecretImage,
    frames: &[CarrierFrame],
    models: &StageModels<S>,
) -> Result<(Vec<CarrierFrame>, RevealState<S>)> {
    for f in frames {
        if f.width != secret.width() || f.height != secret.height() {
            return Err(Error::shape(format!(
                "frame grid {}x{} does not match secret {}x{}",
                f.width,
                f.height,
                secret.width(),
                secret.height()
            )));
        }
    }
    let grids = frame_grids::<S>(frames)?;
    let trace = forward_stages(models, &secret.pixels().cast(), &grids, ForwardOptions::default())?;
    let containers = if models.variant() == Variant::SingleShot {
        let stacked = &trace.stages[0].hide.container;
        frames
            .iter()
            .enumerate()
            .map(|(k, f)| CarrierFrame::from_grid(&stacked.channel_range(k, 1), f.offset, f.width, f.height))
            .collect::<Result<Vec<_>>>()?
    } else {
        trace
            .stages
            .iter()
            .zip(frames)
            .map(|(s, f)| CarrierFrame::from_grid(&s.hide.container, f.offset, f.width, f.height))
            .collect::<Result<Vec<_>>>()?
    };
    Ok((containers, trace.to_reveal_state()))
}

/// Reveals from container frames; `mask[i] == false` marks frame `i` as
/// lost, contributing a zero residual.
pub fn reveal_all<S: Scalar>(
    containers: &[CarrierFrame],
    models: &StageModels<S>,
    mask: &[bool],
) -> Result<RevealState<S>> {
    let t = models.stages();
    if containers.len() != t || mask.len() != t {
        return Err(Error::shape(format!(
            "{} containers and {} mask entries for {t} stages",
            containers.len(),
            mask.len()
        )));
    }
    let first = &containers[0];
    let (h, w) = (first.height, first.width);
    let grids = frame_grids::<S>(containers)?;
    let mut state = RevealState::start([SECRET_CHANNELS, h, w]);

    if models.variant() == Variant::SingleShot {
        let parts: Vec<Tensor<S>> = grids
            .into_iter()
            .zip(mask)
            .map(|(g, &ok)| if ok { g } else { Tensor::zeros_like(&g) })
            .collect();
        let refs: Vec<&Tensor<S>> = parts.iter().collect();
        let stacked = Tensor::concat(&refs)?;
        let residual = if mask.iter().any(|m| *m) {
            Some(reveal_forward(&stacked, models.revealing(0), None)?.residual)
        } else {
            None
        };
        state.push(residual)?;
        state.mask = mask.to_vec();
        return Ok(state);
    }

    let width = models.config().width;
    let connected = models.variant().revealing_connected();
    let mut prev_features: Option<Tensor<S>> = None;
    for (i, (grid, &available)) in grids.iter().zip(mask).enumerate() {
        if !available {
            prev_features = None;
            state.push(None)?;
            continue;
        }
        let incoming = if connected && i > 0 {
            Some(prev_features.take().unwrap_or_else(|| Tensor::zeros(width, h, w)))
        } else {
            None
        };
        let out = reveal_forward(grid, models.revealing(i), incoming.as_ref())?;
        prev_features = Some(out.features);
        state.push(Some(out.residual))?;
    }
    Ok(state)
}

/// Container audio plus the manifest needed to extract from it.
#[derive(Clone, Debug, PartialEq)]
pub struct StegoBundle {
    pub audio: AudioStream,
    pub manifest: Manifest,
}

impl StegoBundle {
    /// Writes `<stem>.wav` and `<stem>.manifest` next to each other.
    pub fn save(&self, wav: &Path, manifest: &Path) -> Result<()> {
        save_pcm(&self.audio, wav, self.manifest.pcm_bits)?;
        self.manifest.save(manifest)
    }

    pub fn load(wav: &Path, manifest: &Path) -> Result<Self> {
        Ok(Self {
            audio: crate::carrier::load_pcm(wav)?,
            manifest: Manifest::load(manifest)?,
        })
    }

    /// The audio exactly as it will read back from disk.
    pub fn as_stored(&self) -> AudioStream {
        match self.manifest.pcm_bits {
            PcmBits::Int16 => quantize_stream(&self.audio),
            PcmBits::Float => self.audio.clone(),
        }
    }
}

/// Builds a manifest for hiding `secret` in `cover` with `models` using
/// back-to-back frames.
pub fn default_manifest(
    secret: &SecretImage,
    models: &StageModels<f32>,
    pcm_bits: PcmBits,
) -> Manifest {
    let (w, h) = (secret.width(), secret.height());
    Manifest {
        width: w,
        height: h,
        stages: models.stages(),
        offsets: crate::carrier::contiguous_offsets(models.stages(), w, h),
        variant: models.variant(),
        checkpoint_id: models.checkpoint_id(),
        pcm_bits,
    }
}

fn check_structure(manifest: &Manifest, models: &StageModels<f32>) -> Result<()> {
    manifest.validate()?;
    if manifest.stages != models.stages() || manifest.variant != models.variant() {
        return Err(Error::Manifest(format!(
            "manifest describes t={} variant {}, models are t={} variant {}",
            manifest.stages,
            manifest.variant,
            models.stages(),
            models.variant()
        )));
    }
    Ok(())
}

pub fn embed(
    secret: &SecretImage,
    cover: &AudioStream,
    models: &StageModels<f32>,
    manifest: &Manifest,
) -> Result<StegoBundle> {
    check_structure(manifest, models)?;
    let actual = models.checkpoint_id();
    if actual != manifest.checkpoint_id {
        return Err(Error::CheckpointMismatch {
            expected: manifest.checkpoint_id.clone(),
            actual,
        });
    }
    if secret.width() != manifest.width || secret.height() != manifest.height {
        return Err(Error::shape(format!(
            "secret is {}x{}, manifest frames are {}x{}",
            secret.width(),
            secret.height(),
            manifest.width,
            manifest.height
        )));
    }
    let frames = select_frames(
        cover,
        manifest.stages,
        manifest.width,
        manifest.height,
        &FramingPolicy::Offsets(manifest.offsets.clone()),
    )?;
    let (containers, _) = hide_all(secret, &frames, models)?;
    Ok(StegoBundle {
        audio: splice(cover, &containers)?,
        manifest: manifest.clone(),
    })
}

/// Reveals the secret. A checkpoint id mismatch is only logged: without
/// the right models the output is noise, which is the intended failure.
pub fn extract(
    bundle: &StegoBundle,
    models: &StageModels<f32>,
    mask: Option<&[bool]>,
) -> Result<(SecretImage, RevealState<f32>)> {
    let manifest = &bundle.manifest;
    check_structure(manifest, models)?;
    let actual = models.checkpoint_id();
    if actual != manifest.checkpoint_id {
        log::warn!(
            "checkpoint mismatch: manifest expects {}, models hash to {actual}; output will be meaningless",
            manifest.checkpoint_id
        );
    }
    let frames = select_frames(
        &bundle.audio,
        manifest.stages,
        manifest.width,
        manifest.height,
        &FramingPolicy::Offsets(manifest.offsets.clone()),
    )?;
    let all = vec![true; manifest.stages];
    let state = reveal_all(&frames, models, mask.unwrap_or(&all))?;
    let image = SecretImage::new(state.final_image())?;
    Ok((image, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn models(variant: Variant, stages: usize) -> StageModels<f32> {
        StageModels::init(ModelConfig {
            stages,
            blocks: 1,
            width: 8,
            variant,
            seed: 9,
        })
        .unwrap()
    }

    fn perturb_heads(models: &mut StageModels<f32>, rng: &mut ChaCha8Rng) {
        for p in models.param_slices_mut() {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
        }
    }

    fn secret(rng: &mut ChaCha8Rng, n: usize) -> SecretImage {
        SecretImage::new(
            Tensor::from_vec(3, n, n, (0..3 * n * n).map(|_| rng.random_range(0.0..1.0)).collect())
                .unwrap(),
        )
        .unwrap()
    }

    fn cover(rng: &mut ChaCha8Rng, len: usize) -> AudioStream {
        AudioStream::new((0..len).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000)
    }

    #[test]
    fn residual_arithmetic() {
        let s0 = Tensor::<f64>::filled(3, 2, 2, 0.5);
        let c1 = Tensor::<f64>::filled(3, 2, 2, 0.3);
        let s2 = compute_residual(&s0, &c1).unwrap();
        assert!(s2.as_slice().iter().all(|v| (v - 0.2).abs() < 1e-15));
        assert_eq!(compute_residual(&s0, &Tensor::zeros(3, 2, 2)).unwrap(), s0);
        assert!(compute_residual(&s0, &Tensor::zeros(3, 2, 3)).is_err());
    }

    #[test]
    fn secret_range_checked() {
        assert!(SecretImage::new(Tensor::filled(3, 2, 2, 1.5)).is_err());
        assert!(SecretImage::new(Tensor::filled(1, 2, 2, 0.5)).is_err());
    }

    #[test]
    fn single_stage_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = models(Variant::M, 1);
        let s = secret(&mut rng, 8);
        let frames = select_frames(&cover(&mut rng, 100), 1, 8, 8, &FramingPolicy::Contiguous).unwrap();
        let (containers, trace) = hide_all(&s, &frames, &m).unwrap();
        assert_eq!(containers.len(), 1);
        assert_eq!(trace.residuals.len(), 1);
        assert_eq!(trace.partials.len(), 2);
    }

    #[test]
    fn untrained_models_are_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in Variant::MULTI_STAGE.into_iter().chain([Variant::SingleShot]) {
            let m = models(v, 3);
            let s = secret(&mut rng, 8);
            let frames = select_frames(&cover(&mut rng, 300), 3, 8, 8, &FramingPolicy::Contiguous).unwrap();
            let (containers, trace) = hide_all(&s, &frames, &m).unwrap();
            assert_eq!(containers, frames, "{v}");
            assert!(trace.accumulated().as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn reveal_all_matches_sender_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for v in Variant::MULTI_STAGE.into_iter().chain([Variant::SingleShot]) {
            let mut m = models(v, 3);
            perturb_heads(&mut m, &mut rng);
            let s = secret(&mut rng, 8);
            let frames = select_frames(&cover(&mut rng, 300), 3, 8, 8, &FramingPolicy::Contiguous).unwrap();
            let (containers, sent) = hide_all(&s, &frames, &m).unwrap();
            let got = reveal_all(&containers, &m, &[true; 3]).unwrap();
            assert_eq!(got, sent, "{v}");
        }
    }

    #[test]
    fn dropped_frames_contribute_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = models(Variant::MD, 3);
        perturb_heads(&mut m, &mut rng);
        let frames = select_frames(&cover(&mut rng, 300), 3, 8, 8, &FramingPolicy::Contiguous).unwrap();
        let none = reveal_all(&frames, &m, &[false; 3]).unwrap();
        assert!(none.final_image().as_slice().iter().all(|&x| x == 0.0));
        let partial = reveal_all(&frames, &m, &[true, false, true]).unwrap();
        assert!(partial.residuals[1].is_none());
        assert_eq!(partial.partials[2], partial.partials[1]);
        assert_eq!(partial.available(), 2);
        assert!(reveal_all(&frames, &m, &[true; 2]).is_err());
    }

    #[test]
    fn embed_rejects_foreign_checkpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = models(Variant::M, 2);
        let s = secret(&mut rng, 8);
        let mut manifest = default_manifest(&s, &m, PcmBits::Float);
        manifest.checkpoint_id = "00".into();
        assert!(matches!(
            embed(&s, &cover(&mut rng, 200), &m, &manifest),
            Err(Error::CheckpointMismatch { .. })
        ));
    }

    #[test]
    fn embed_reports_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = models(Variant::M, 2);
        let s = secret(&mut rng, 8);
        let manifest = default_manifest(&s, &m, PcmBits::Float);
        assert!(matches!(
            embed(&s, &cover(&mut rng, 100), &m, &manifest),
            Err(Error::Capacity { required: 128, available: 100 })
        ));
    }
}
