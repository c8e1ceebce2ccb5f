use rand::Rng;

use super::conv::{Conv3x3, ConvCache};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// `x + conv_b(relu(conv_a(x)))`, both convolutions `width → width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<S> {
    pub(crate) conv_a: Conv3x3<S>,
    pub(crate) conv_b: Conv3x3<S>,
}

pub struct BlockCache<S> {
    a: ConvCache<S>,
    a_out: Tensor<S>,
    b: ConvCache<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    pub fn zeros(width: usize) -> Self {
        Self {
            conv_a: Conv3x3::zeros(width, width),
            conv_b: Conv3x3::zeros(width, width),
        }
    }

    pub fn he_normal<R: Rng>(width: usize, rng: &mut R) -> Self {
        Self {
            conv_a: Conv3x3::he_normal(width, width, rng),
            conv_b: Conv3x3::he_normal(width, width, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, BlockCache<S>)> {
        let (a_out, a) = self.conv_a.forward(x)?;
        let activated = relu(&a_out);
        let (b_out, b) = self.conv_b.forward(&activated)?;
        let y = x.add(&b_out)?;
        Ok((y, BlockCache { a, a_out, b }))
    }

    pub fn backward(
        &self,
        cache: &BlockCache<S>,
        d_out: &Tensor<S>,
        grads: &mut ResidualBlock<S>,
    ) -> Tensor<S> {
        let d_act = self
            .conv_b
            .backward(&cache.b, d_out, &mut grads.conv_b, true)
            .expect("input grad requested");
        let d_a = relu_backward(&cache.a_out, &d_act);
        let mut dx = self
            .conv_a
            .backward(&cache.a, &d_a, &mut grads.conv_a, true)
            .expect("input grad requested");
        dx.add_assign(d_out).expect("same shape");
        dx
    }
}

/// Stem convolution, rectifier, residual body, head convolution.
///
/// The body output ("features") is what connected variants hand to the
/// next stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SubNet<S> {
    pub(crate) stem: Conv3x3<S>,
    pub(crate) blocks: Vec<ResidualBlock<S>>,
    pub(crate) head: Conv3x3<S>,
}

pub struct SubNetCache<S> {
    stem: ConvCache<S>,
    stem_out: Tensor<S>,
    blocks: Vec<BlockCache<S>>,
    head: ConvCache<S>,
}

pub struct SubNetOutput<S> {
    pub out: Tensor<S>,
    pub features: Tensor<S>,
    pub cache: SubNetCache<S>,
}

impl<S: Scalar> SubNet<S> {
    pub fn zeros(c_in: usize, c_out: usize, width: usize, blocks: usize) -> Self {
        Self {
            stem: Conv3x3::zeros(c_in, width),
            blocks: (0..blocks).map(|_| ResidualBlock::zeros(width)).collect(),
            head: Conv3x3::zeros(width, c_out),
        }
    }

    /// He-normal everywhere except the head, which starts at zero.
    pub fn init<R: Rng>(c_in: usize, c_out: usize, width: usize, blocks: usize, rng: &mut R) -> Self {
        Self {
            stem: Conv3x3::he_normal(c_in, width, rng),
            blocks: (0..blocks)
                .map(|_| ResidualBlock::he_normal(width, rng))
                .collect(),
            head: Conv3x3::zeros(width, c_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c_in(), self.c_out(), self.width(), self.blocks.len())
    }

    pub fn c_in(&self) -> usize {
        self.stem.c_in
    }

    pub fn c_out(&self) -> usize {
        self.head.c_out
    }

    pub fn width(&self) -> usize {
        self.stem.c_out
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_mut(&mut self) -> &mut Conv3x3<S> {
        &mut self.head
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|p| p.len()).sum()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = vec![format!("{prefix}.stem.weight"), format!("{prefix}.stem.bias")];
        for i in 0..self.blocks.len() {
            for conv in ["conv_a", "conv_b"] {
                names.push(format!("{prefix}.block{i}.{conv}.weight"));
                names.push(format!("{prefix}.block{i}.{conv}.bias"));
            }
        }
        names.push(format!("{prefix}.head.weight"));
        names.push(format!("{prefix}.head.bias"));
        names
    }

    pub fn param_slices(&self) -> Vec<&[S]> {
        let mut out: Vec<&[S]> = vec![&self.stem.weight, &self.stem.bias];
        for b in &self.blocks {
            out.extend([
                b.conv_a.weight.as_slice(),
                &b.conv_a.bias,
                &b.conv_b.weight,
                &b.conv_b.bias,
            ]);
        }
        out.extend([self.head.weight.as_slice(), &self.head.bias]);
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            out.push(&mut b.conv_a.weight);
            out.push(&mut b.conv_a.bias);
            out.push(&mut b.conv_b.weight);
            out.push(&mut b.conv_b.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<SubNetOutput<S>> {
        let (stem_out, stem) = self.stem.forward(x)?;
        let mut h = relu(&stem_out);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, cache) = block.forward(&h)?;
            blocks.push(cache);
            h = next;
        }
        let (out, head) = self.head.forward(&h)?;
        Ok(SubNetOutput {
            out,
            features: h,
            cache: SubNetCache {
                stem,
                stem_out,
                blocks,
                head,
            },
        })
    }

    /// Backpropagates `d_out` (and an optional gradient arriving on the
    /// features) and returns the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &SubNetCache<S>,
        d_out: &Tensor<S>,
        d_features: Option<&Tensor<S>>,
        grads: &mut SubNet<S>,
    ) -> Tensor<S> {
        let mut dh = self
            .head
            .backward(&cache.head, d_out, &mut grads.head, true)
            .expect("input grad requested");
        if let Some(df) = d_features {
            dh.add_assign(df).expect("feature gradient shape");
        }
        for ((block, bc), bg) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            dh = block.backward(bc, &dh, bg);
        }
        let d_stem = relu_backward(&cache.stem_out, &dh);
        self.stem
            .backward(&cache.stem, &d_stem, &mut grads.stem, true)
            .expect("input grad requested")
    }
}

fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

fn relu_backward<S: Scalar>(pre: &Tensor<S>, d: &Tensor<S>) -> Tensor<S> {
    let data = pre
        .as_slice()
        .iter()
        .zip(d.as_slice())
        .map(|(&p, &g)| if p > S::zero() { g } else { S::zero() })
        .collect();
    Tensor::from_vec(d.channels(), d.height(), d.width(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_block_is_identity() {
        let block = ResidualBlock::<f64>::zeros(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(4, 3, 3, (0..36).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let (y, _) = block.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn block_preserves_spatial_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = ResidualBlock::<f32>::he_normal(8, &mut rng);
        let (y, _) = block.forward(&Tensor::filled(8, 5, 7, 0.25)).unwrap();
        assert_eq!(y.shape(), [8, 5, 7]);
    }

    #[test]
    fn names_align_with_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = SubNet::<f32>::init(4, 1, 8, 3, &mut rng);
        assert_eq!(net.param_names("h").len(), net.param_slices().len());
        assert_eq!(net.head.weight.iter().filter(|w| **w != 0.0).count(), 0);
    }
}
