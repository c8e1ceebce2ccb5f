//! Container distortion and revealed-image fidelity.
//!
//! Images are compared on the [0, 1] scale: PSNR uses a peak of 1 and the
//! SSIM stabilisers are `(0.01)²` and `(0.03)²`.

use std::fmt;

use crate::carrier::AudioStream;
use crate::error::{Error, Result};
use crate::pipeline::RevealState;
use crate::tensor::{Scalar, Tensor};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Standard five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub fn audio_mse(cover: &AudioStream, container: &AudioStream) -> Result<f64> {
    if cover.len() != container.len() {
        return Err(Error::shape(format!(
            "audio lengths differ: {} vs {}",
            cover.len(),
            container.len()
        )));
    }
    if cover.is_empty() {
        return Err(Error::EmptyInput("audio stream has no samples".into()));
    }
    let sum: f64 = cover
        .samples
        .iter()
        .zip(&container.samples)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / cover.len() as f64)
}

pub fn mse<S: Scalar>(reference: &Tensor<S>, test: &Tensor<S>) -> Result<f64> {
    test.ensure_shape(reference.shape(), "mse")?;
    if reference.is_empty() {
        return Err(Error::EmptyInput("empty tensor".into()));
    }
    let sum: f64 = reference
        .as_slice()
        .iter()
        .zip(test.as_slice())
        .map(|(&a, &b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(sum / reference.len() as f64)
}

/// `10 · log10(1 / MSE)`; `f64::INFINITY` for identical images.
pub fn psnr<S: Scalar>(reference: &Tensor<S>, test: &Tensor<S>) -> Result<f64> {
    let m = mse(reference, test)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// Local statistics window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SsimWindow {
    /// Square box of equal weights.
    Uniform(usize),
    /// Square normalised Gaussian.
    Gaussian { size: usize, sigma: f64 },
}

impl Default for SsimWindow {
    fn default() -> Self {
        SsimWindow::Uniform(8)
    }
}

impl SsimWindow {
    pub fn size(&self) -> usize {
        match *self {
            SsimWindow::Uniform(n) => n,
            SsimWindow::Gaussian { size, .. } => size,
        }
    }

    fn weights_1d(&self) -> Vec<f64> {
        match *self {
            SsimWindow::Uniform(n) => vec![1.0 / n as f64; n],
            SsimWindow::Gaussian { size, sigma } => {
                let c = (size as f64 - 1.0) / 2.0;
                let raw: Vec<f64> = (0..size)
                    .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
                    .collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            }
        }
    }
}

/// Mean luminance term and mean contrast-structure term over all window
/// positions and channels, plus the mean of their product (the SSIM).
#[derive(Clone, Copy, Debug)]
struct SsimParts {
    ssim: f64,
    cs: f64,
}

fn plane_stats(a: &[f64], b: &[f64], h: usize, w: usize, window: &SsimWindow) -> SsimParts {
    let n = window.size();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    let mut visit = |mx: f64, my: f64, xx: f64, yy: f64, xy: f64| {
        let vx = xx - mx * mx;
        let vy = yy - my * my;
        let cov = xy - mx * my;
        let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
        let cs = (2.0 * cov + SSIM_C2) / (vx + vy + SSIM_C2);
        ssim_sum += l * cs;
        cs_sum += cs;
    };
    match window {
        SsimWindow::Uniform(_) => {
            // Summed-area tables for the five moments.
            let stride = w + 1;
            let mut tables = vec![[0.0f64; 5]; (h + 1) * stride];
            for y in 0..h {
                let mut row = [0.0f64; 5];
                for x in 0..w {
                    let (p, q) = (a[y * w + x], b[y * w + x]);
                    let m = [p, q, p * p, q * q, p * q];
                    for k in 0..5 {
                        row[k] += m[k];
                        tables[(y + 1) * stride + x + 1][k] = tables[y * stride + x + 1][k] + row[k];
                    }
                }
            }
            let area = (n * n) as f64;
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = [0.0f64; 5];
                    for (k, v) in s.iter_mut().enumerate() {
                        *v = (tables[(y + n) * stride + x + n][k] - tables[y * stride + x + n][k]
                            - tables[(y + n) * stride + x][k]
                            + tables[y * stride + x][k])
                            / area;
                    }
                    visit(s[0], s[1], s[2], s[3], s[4]);
                }
            }
        }
        SsimWindow::Gaussian { .. } => {
            let g = window.weights_1d();
            // Horizontal pass then vertical pass, valid region only.
            let mut horiz = vec![[0.0f64; 5]; h * ow];
            for y in 0..h {
                for x in 0..ow {
                    let mut s = [0.0f64; 5];
                    for (k, &wk) in g.iter().enumerate() {
                        let (p, q) = (a[y * w + x + k], b[y * w + x + k]);
                        s[0] += wk * p;
                        s[1] += wk * q;
                        s[2] += wk * p * p;
                        s[3] += wk * q * q;
                        s[4] += wk * p * q;
                    }
                    horiz[y * ow + x] = s;
                }
            }
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = [0.0f64; 5];
                    for (k, &wk) in g.iter().enumerate() {
                        let src = horiz[(y + k) * ow + x];
                        for m in 0..5 {
                            s[m] += wk * src[m];
                        }
                    }
                    visit(s[0], s[1], s[2], s[3], s[4]);
                }
            }
        }
    }
    let count = (oh * ow) as f64;
    SsimParts {
        ssim: ssim_sum / count,
        cs: cs_sum / count,
    }
}

fn planes<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..t.channels())
        .map(|c| t.channel(c).iter().map(|v| v.f64()).collect())
        .collect()
}

fn check_pair<S: Scalar>(reference: &Tensor<S>, test: &Tensor<S>, min_side: usize) -> Result<()> {
    test.ensure_shape(reference.shape(), "ssim")?;
    if reference.height() < min_side || reference.width() < min_side {
        return Err(Error::shape(format!(
            "image {}x{} smaller than the required {min_side}x{min_side}",
            reference.height(),
            reference.width()
        )));
    }
    Ok(())
}

fn channel_mean_parts(a: &[Vec<f64>], b: &[Vec<f64>], h: usize, w: usize, window: &SsimWindow) -> SsimParts {
    let parts: Vec<SsimParts> = a
        .iter()
        .zip(b)
        .map(|(pa, pb)| plane_stats(pa, pb, h, w, window))
        .collect();
    let n = parts.len() as f64;
    SsimParts {
        ssim: parts.iter().map(|p| p.ssim).sum::<f64>() / n,
        cs: parts.iter().map(|p| p.cs).sum::<f64>() / n,
    }
}

/// Mean SSIM over every full window position, averaged over channels.
pub fn ssim<S: Scalar>(reference: &Tensor<S>, test: &Tensor<S>, window: SsimWindow) -> Result<f64> {
    check_pair(reference, test, window.size())?;
    let (a, b) = (planes(reference), planes(test));
    Ok(channel_mean_parts(&a, &b, reference.height(), reference.width(), &window).ssim)
}

fn downsample(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (nh, nw) = (h / 2, w / 2);
    let mut out = vec![0.0; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            out[y * nw + x] = 0.25
                * (plane[2 * y * w + 2 * x]
                    + plane[2 * y * w + 2 * x + 1]
                    + plane[(2 * y + 1) * w + 2 * x]
                    + plane[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, nh, nw)
}

/// Largest level count (≤ 5) usable on an image of this size.
pub fn max_ms_ssim_levels(height: usize, width: usize, window: SsimWindow) -> usize {
    let side = height.min(width);
    (1..=MS_SSIM_WEIGHTS.len())
        .rev()
        .find(|&l| (1usize << (l - 1)) * window.size() <= side)
        .unwrap_or(0)
}

/// Multi-scale SSIM with 2×2 average-pool downsampling between levels.
///
/// All five levels use the standard exponents as published. With fewer
/// levels the leading exponents are renormalised to sum to one. Negative
/// contrast-structure terms are clamped to zero so the result stays in
/// [0, 1].
pub fn ms_ssim<S: Scalar>(
    reference: &Tensor<S>,
    test: &Tensor<S>,
    levels: usize,
    window: SsimWindow,
) -> Result<f64> {
    if levels == 0 || levels > MS_SSIM_WEIGHTS.len() {
        return Err(Error::config(format!("ms-ssim levels must be 1..=5, got {levels}")));
    }
    check_pair(reference, test, (1usize << (levels - 1)) * window.size())?;
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let norm: f64 = if levels == MS_SSIM_WEIGHTS.len() {
        1.0
    } else {
        weights.iter().sum()
    };
    let (mut a, mut b) = (planes(reference), planes(test));
    let (mut h, mut w) = (reference.height(), reference.width());
    let mut score = 1.0;
    for (level, &weight) in weights.iter().enumerate() {
        let parts = channel_mean_parts(&a, &b, h, w, &window);
        let term = if level + 1 == levels { parts.ssim } else { parts.cs };
        score *= term.max(0.0).powf(weight / norm);
        if level + 1 < levels {
            let mut nh = 0;
            let mut nw = 0;
            a = a
                .iter()
                .map(|p| {
                    let (d, dh, dw) = downsample(p, h, w);
                    nh = dh;
                    nw = dw;
                    d
                })
                .collect();
            b = b.iter().map(|p| downsample(p, h, w).0).collect();
            h = nh;
            w = nw;
        }
    }
    Ok(score)
}

/// Per-image and per-stage quality summary.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub audio_mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub ms_ssim_levels: usize,
    /// PSNR of `clamp(C_i)` for i = 1..t.
    pub per_stage_psnr: Vec<f64>,
}

impl QualityReport {
    pub fn header() -> &'static str {
        "audio_mse\tpsnr\tssim\tms_ssim\tms_ssim_levels\tper_stage_psnr"
    }

    pub fn per_stage_csv(&self) -> String {
        let mut out = String::from("stage,psnr\n");
        for (i, p) in self.per_stage_psnr.iter().enumerate() {
            out.push_str(&format!("{},{p}\n", i + 1));
        }
        out
    }
}

impl fmt::Display for QualityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages: Vec<String> = self.per_stage_psnr.iter().map(|p| format!("{p:.4}")).collect();
        write!(
            f,
            "{:.6e}\t{:.4}\t{:.6}\t{:.6}\t{}\t{}",
            self.audio_mse,
            self.psnr,
            self.ssim,
            self.ms_ssim,
            self.ms_ssim_levels,
            stages.join(",")
        )
    }
}

/// Scores a reveal against the secret and the container against the cover.
///
/// MS-SSIM uses as many levels as the image size allows (at most five).
pub fn quality_report<S: Scalar>(
    cover: &AudioStream,
    container: &AudioStream,
    secret: &Tensor<S>,
    revealed: &RevealState<S>,
) -> Result<QualityReport> {
    let image = revealed.final_image();
    let window = SsimWindow::default();
    let levels = max_ms_ssim_levels(secret.height(), secret.width(), window);
    let ms = if levels == 0 {
        f64::NAN
    } else {
        ms_ssim(secret, &image, levels, window)?
    };
    let per_stage_psnr = revealed.partials[1..]
        .iter()
        .map(|c| psnr(secret, &c.clamp(S::zero(), S::one())))
        .collect::<Result<Vec<_>>>()?;
    Ok(QualityReport {
        audio_mse: audio_mse(cover, container)?,
        psnr: psnr(secret, &image)?,
        ssim: ssim(secret, &image, window)?,
        ms_ssim: ms,
        ms_ssim_levels: levels,
        per_stage_psnr,
    })
}
