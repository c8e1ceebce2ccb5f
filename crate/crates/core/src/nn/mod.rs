//! Hiding and revealing convolutional sub-networks.
//!
//! A hiding net sees `[secret residual | carrier grid | incoming features]`
//! and writes `carrier + head(...)`, so a zero head reproduces the carrier
//! exactly. A revealing net sees `[container | incoming features]` and
//! outputs a signed three-channel residual estimate.

mod conv;
mod models;
mod subnet;

pub use conv::{Conv3x3, ConvCache};
pub use models::{
    checkpoint_id_of, ModelConfig, StageModels, Variant, DEFAULT_BLOCKS, DEFAULT_WIDTH,
    SECRET_CHANNELS,
};
pub use subnet::{ResidualBlock, SubNet, SubNetCache, SubNetOutput};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct HideOutput<S> {
    pub container: Tensor<S>,
    pub features: Tensor<S>,
    pub cache: SubNetCache<S>,
}

pub struct RevealOutput<S> {
    pub residual: Tensor<S>,
    pub features: Tensor<S>,
    pub cache: SubNetCache<S>,
}

/// Number of incoming feature channels a net was built to consume.
fn expected_features<S: Scalar>(net: &SubNet<S>, own_channels: usize) -> usize {
    net.c_in().saturating_sub(own_channels)
}

fn check_incoming<S: Scalar>(
    net: &SubNet<S>,
    own_channels: usize,
    incoming: Option<&Tensor<S>>,
    h: usize,
    w: usize,
) -> Result<()> {
    let expected = expected_features(net, own_channels);
    match (expected, incoming) {
        (0, None) => Ok(()),
        (0, Some(_)) => Err(Error::shape(
            "incoming features supplied to a stage without a connection",
        )),
        (n, Some(f)) => f.ensure_shape([n, h, w], "incoming features"),
        (n, None) => Err(Error::shape(format!(
            "stage expects {n} incoming feature channels"
        ))),
    }
}

/// Embeds `secret_residual` (3×h×w) into `carrier` (c×h×w, c = head width).
pub fn hide_forward<S: Scalar>(
    secret_residual: &Tensor<S>,
    carrier: &Tensor<S>,
    net: &SubNet<S>,
    incoming: Option<&Tensor<S>>,
) -> Result<HideOutput<S>> {
    let (h, w) = (carrier.height(), carrier.width());
    carrier.ensure_shape([net.c_out(), h, w], "carrier grid")?;
    secret_residual.ensure_shape([SECRET_CHANNELS, h, w], "secret residual")?;
    let own = SECRET_CHANNELS + net.c_out();
    check_incoming(net, own, incoming, h, w)?;
    let input = match incoming {
        Some(f) => Tensor::concat(&[secret_residual, carrier, f])?,
        None => Tensor::concat(&[secret_residual, carrier])?,
    };
    let SubNetOutput {
        out,
        features,
        cache,
    } = net.forward(&input)?;
    let container = carrier.add(&out)?;
    Ok(HideOutput {
        container,
        features,
        cache,
    })
}

/// Recovers a residual estimate (3×h×w) from a container grid.
pub fn reveal_forward<S: Scalar>(
    container: &Tensor<S>,
    net: &SubNet<S>,
    incoming: Option<&Tensor<S>>,
) -> Result<RevealOutput<S>> {
    let (h, w) = (container.height(), container.width());
    let own = container.channels();
    if own > net.c_in() {
        return Err(Error::shape(format!(
            "revealing net takes {} channels, container has {own}",
            net.c_in()
        )));
    }
    check_incoming(net, own, incoming, h, w)?;
    let input = match incoming {
        Some(f) => Tensor::concat(&[container, f])?,
        None => container.clone(),
    };
    let SubNetOutput {
        out,
        features,
        cache,
    } = net.forward(&input)?;
    Ok(RevealOutput {
        residual: out,
        features,
        cache,
    })
}
