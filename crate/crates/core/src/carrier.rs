//! Cover audio handling: PCM files, subsequence framing, 1-D ⇄ 2-D
//! reshaping, splicing containers back, and the extraction manifest.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::{join_list, parse_list, KvMap};
use crate::nn::Variant;
use crate::tensor::{Scalar, Tensor};

const PCM_SCALE: f32 = 32768.0;

/// Mono audio with samples normalised to [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioStream {
    pub samples: Vec<f32>,
    /// Metadata only.
    pub sample_rate: u32,
}

impl AudioStream {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sample storage of a container file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PcmBits {
    Int16,
    Float,
}

impl fmt::Display for PcmBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PcmBits::Int16 => f.write_str("16"),
            PcmBits::Float => f.write_str("float"),
        }
    }
}

impl FromStr for PcmBits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "16" => Ok(PcmBits::Int16),
            "float" => Ok(PcmBits::Float),
            other => Err(Error::Manifest(format!("pcm_bits must be 16 or float, got {other:?}"))),
        }
    }
}

/// Integer sample to normalised real.
pub fn dequantize(v: i16) -> f32 {
    v as f32 / PCM_SCALE
}

/// `round(clamp(v, -1, 1) · 32768)` saturated to the i16 range.
pub fn quantize(v: f32) -> i16 {
    let scaled = (v.clamp(-1.0, 1.0) * PCM_SCALE).round();
    scaled.clamp(i16::MIN as f32, i16::MAX as f32) as i16
}

/// Reads a WAV file. 16-bit integer and 32-bit float encodings are
/// accepted; for multichannel files only channel 0 is kept.
pub fn load_pcm(path: &Path) -> Result<AudioStream> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    if channels > 1 {
        log::warn!(
            "{}: {channels} channels, using channel 0 only",
            path.display()
        );
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(dequantize))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .step_by(channels)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported encoding {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    if samples.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no samples", path.display())));
    }
    Ok(AudioStream::new(samples, spec.sample_rate))
}

/// Writes a mono WAV file in the given encoding.
pub fn save_pcm(stream: &AudioStream, path: &Path, bits: PcmBits) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: stream.sample_rate,
        bits_per_sample: match bits {
            PcmBits::Int16 => 16,
            PcmBits::Float => 32,
        },
        sample_format: match bits {
            PcmBits::Int16 => hound::SampleFormat::Int,
            PcmBits::Float => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &stream.samples {
        match bits {
            PcmBits::Int16 => writer.write_sample(quantize(s)),
            PcmBits::Float => writer.write_sample(s.clamp(-1.0, 1.0)),
        }
        .map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Applies the file quantizer in memory.
pub fn quantize_stream(stream: &AudioStream) -> AudioStream {
    AudioStream::new(
        stream.samples.iter().map(|&s| dequantize(quantize(s))).collect(),
        stream.sample_rate,
    )
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// One subsequence of `width · height` samples taken from `offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct CarrierFrame {
    pub offset: usize,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<f32>,
}

impl CarrierFrame {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn end(&self) -> usize {
        self.offset + self.samples.len()
    }

    /// Row-major `1 × height × width` view.
    pub fn to_grid<S: Scalar>(&self) -> Result<Tensor<S>> {
        if self.samples.len() != self.width * self.height {
            return Err(Error::shape(format!(
                "frame holds {} samples, expected {}x{}",
                self.samples.len(),
                self.height,
                self.width
            )));
        }
        Tensor::from_vec(
            1,
            self.height,
            self.width,
            self.samples.iter().map(|&v| S::of(v as f64)).collect(),
        )
    }

    /// Inverse of [`CarrierFrame::to_grid`].
    pub fn from_grid<S: Scalar>(grid: &Tensor<S>, offset: usize, width: usize, height: usize) -> Result<Self> {
        grid.ensure_shape([1, height, width], "carrier grid")?;
        Ok(Self {
            offset,
            width,
            height,
            samples: grid
                .as_slice()
                .iter()
                .map(|v| v.to_f32().unwrap_or(f32::NAN))
                .collect(),
        })
    }
}

/// Where the stage subsequences sit in the cover.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum FramingPolicy {
    /// Back to back from sample 0.
    #[default]
    Contiguous,
    /// Caller-chosen start indices.
    Offsets(Vec<usize>),
}

pub fn contiguous_offsets(stages: usize, width: usize, height: usize) -> Vec<usize> {
    (0..stages).map(|k| k * width * height).collect()
}

fn validate_offsets(offsets: &[usize], frame_len: usize, available: usize) -> Result<()> {
    for pair in offsets.windows(2) {
        if pair[1] < pair[0] + frame_len {
            return Err(Error::Manifest(format!(
                "frames at {} and {} overlap or are out of order",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(&last) = offsets.last() {
        if last + frame_len > available {
            return Err(Error::Capacity {
                required: last + frame_len,
                available,
            });
        }
    }
    Ok(())
}

pub fn select_frames(
    stream: &AudioStream,
    stages: usize,
    width: usize,
    height: usize,
    policy: &FramingPolicy,
) -> Result<Vec<CarrierFrame>> {
    let frame_len = width * height;
    let required = stages * frame_len;
    if stream.len() < required {
        return Err(Error::Capacity {
            required,
            available: stream.len(),
        });
    }
    let offsets = match policy {
        FramingPolicy::Contiguous => contiguous_offsets(stages, width, height),
        FramingPolicy::Offsets(o) => {
            if o.len() != stages {
                return Err(Error::Manifest(format!(
                    "{} offsets for {stages} stages",
                    o.len()
                )));
            }
            o.clone()
        }
    };
    validate_offsets(&offsets, frame_len, stream.len())?;
    Ok(offsets
        .into_iter()
        .map(|offset| CarrierFrame {
            offset,
            width,
            height,
            samples: stream.samples[offset..offset + frame_len].to_vec(),
        })
        .collect())
}

/// Writes container frames over the cover, clamping to [-1, 1]. Samples
/// outside every frame are copied unchanged.
pub fn splice(stream: &AudioStream, containers: &[CarrierFrame]) -> Result<AudioStream> {
    let mut out = stream.clone();
    let mut spans: Vec<(usize, usize)> = containers.iter().map(|c| (c.offset, c.end())).collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Manifest(format!(
                "containers at {} and {} overlap",
                pair[0].0, pair[1].0
            )));
        }
    }
    for c in containers {
        if c.end() > stream.len() {
            return Err(Error::Capacity {
                required: c.end(),
                available: stream.len(),
            });
        }
        for (dst, &v) in out.samples[c.offset..c.end()].iter_mut().zip(&c.samples) {
            *dst = v.clamp(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Everything the receiver needs besides the models.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub stages: usize,
    pub offsets: Vec<usize>,
    pub variant: Variant,
    pub checkpoint_id: String,
    pub pcm_bits: PcmBits,
}

impl Manifest {
    pub fn frame_len(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Manifest("t must be at least 1".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(Error::Manifest(format!(
                "frame grid {}x{} is below the 8x8 minimum",
                self.width, self.height
            )));
        }
        if self.offsets.len() != self.stages {
            return Err(Error::Manifest(format!(
                "{} offsets for t={}",
                self.offsets.len(),
                self.stages
            )));
        }
        validate_offsets(&self.offsets, self.frame_len(), usize::MAX)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("w", self.width);
        kv.insert("h", self.height);
        kv.insert("t", self.stages);
        kv.insert("offsets", join_list(&self.offsets));
        kv.insert("variant", self.variant);
        kv.insert("checkpoint_id", &self.checkpoint_id);
        kv.insert("pcm_bits", self.pcm_bits);
        kv
    }

    pub fn to_text(&self) -> String {
        // Fixed key order keeps manifests diffable.
        let kv = self.to_kv();
        ["w", "h", "t", "offsets", "variant", "checkpoint_id", "pcm_bits"]
            .iter()
            .map(|k| format!("{k}={}\n", kv.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let num = |k: &str| -> Result<usize> {
            kv.parse_value::<usize>(k)?
                .ok_or_else(|| Error::Manifest(format!("missing `{k}`")))
        };
        let manifest = Self {
            width: num("w")?,
            height: num("h")?,
            stages: num("t")?,
            offsets: parse_list(kv.require("offsets")?, "offsets")?,
            variant: kv.require("variant")?.parse()?,
            checkpoint_id: kv.require("checkpoint_id")?.to_string(),
            pcm_bits: kv.require("pcm_bits")?.parse()?,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}
