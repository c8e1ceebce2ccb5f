use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Tensor};

/// 3×3 convolution, stride 1, zero padding 1.
///
/// Weights are laid out `[c_out][c_in][ky][kx]`, which is exactly the
/// row-major `c_out × (c_in·9)` matrix multiplied against the im2col buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3<S> {
    pub(crate) c_in: usize,
    pub(crate) c_out: usize,
    pub(crate) weight: Vec<S>,
    pub(crate) bias: Vec<S>,
}

/// Column buffer kept from the forward pass for the weight gradient.
pub struct ConvCache<S> {
    cols: Vec<S>,
    height: usize,
    width: usize,
}

impl<S: Scalar> Conv3x3<S> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            weight: vec![S::zero(); c_out * c_in * 9],
            bias: vec![S::zero(); c_out],
        }
    }

    /// He-normal weights (std = sqrt(2 / fan_in)), zero bias.
    pub fn he_normal<R: Rng>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (c_in * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = (0..c_out * c_in * 9)
            .map(|_| S::of(normal.sample(rng)))
            .collect();
        Self {
            c_in,
            c_out,
            weight,
            bias: vec![S::zero(); c_out],
        }
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn weight(&self) -> &[S] {
        &self.weight
    }

    pub fn bias(&self) -> &[S] {
        &self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, ConvCache<S>)> {
        if x.channels() != self.c_in {
            return Err(Error::shape(format!(
                "convolution expects {} input channels, got {}",
                self.c_in,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let n = h * w;
        let cols = im2col(x);
        let mut out = vec![S::zero(); self.c_out * n];
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(self.bias[co]);
        }
        gemm(
            Mat::new(&self.weight, self.c_out, self.c_in * 9),
            Mat::new(&cols, self.c_in * 9, n),
            S::one(),
            &mut out,
        );
        let out = Tensor::from_vec(self.c_out, h, w, out)?;
        Ok((
            out,
            ConvCache {
                cols,
                height: h,
                width: w,
            },
        ))
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache<S>,
        d_out: &Tensor<S>,
        grads: &mut Conv3x3<S>,
        need_input_grad: bool,
    ) -> Option<Tensor<S>> {
        let n = cache.height * cache.width;
        debug_assert_eq!(d_out.shape(), [self.c_out, cache.height, cache.width]);
        let dy = d_out.as_slice();
        let k = self.c_in * 9;
        gemm(
            Mat::new(dy, self.c_out, n),
            Mat::t(&cache.cols, k, n),
            S::one(),
            &mut grads.weight,
        );
        for (co, row) in dy.chunks(n).enumerate() {
            grads.bias[co] += row.iter().copied().sum::<S>();
        }
        if !need_input_grad {
            return None;
        }
        let mut d_cols = vec![S::zero(); k * n];
        gemm(
            Mat::t(&self.weight, self.c_out, k),
            Mat::new(dy, self.c_out, n),
            S::zero(),
            &mut d_cols,
        );
        Some(col2im(&d_cols, self.c_in, cache.height, cache.width))
    }
}

/// Unfolds 3×3 neighbourhoods: row `ci·9 + ky·3 + kx`, column `y·w + x`.
fn im2col<S: Scalar>(x: &Tensor<S>) -> Vec<S> {
    let (c_in, h, w) = (x.channels(), x.height(), x.width());
    let n = h * w;
    let mut cols = vec![S::zero(); c_in * 9 * n];
    for ci in 0..c_in {
        let plane = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im<S: Scalar>(cols: &[S], c_in: usize, h: usize, w: usize) -> Tensor<S> {
    let n = h * w;
    let mut out = Tensor::zeros(c_in, h, w);
    for ci in 0..c_in {
        let plane = out.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => {
                            for (d, &s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += s;
                            }
                        }
                        1 => {
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        _ => {
                            for (d, &s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
