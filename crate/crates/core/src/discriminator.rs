//! Residual convolutional discriminator.
//!
//! An RGB stem feeds a stack of residual blocks, each halving the spatial
//! extent, down to 4x4. A minibatch standard deviation channel is appended
//! before the final convolution and the two dense layers that produce one
//! logit per sample.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    declare_conv, declare_linear, eq_conv_lrelu, eq_linear, eq_linear_lrelu, eq_weight,
    minibatch_stddev,
};
use crate::params::{ParamStore, Session};
use crate::rng::seed_rng;
use crate::scalar::Scalar;
use crate::tape::Var;

pub const STDDEV_GROUP: usize = 4;

fn default_group() -> usize {
    STDDEV_GROUP
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    #[serde(default = "default_group")]
    pub stddev_group: usize,
}

impl DiscriminatorConfig {
    pub fn reference() -> Self {
        DiscriminatorConfig {
            input_resolution: 256,
            base_channels: 64,
            max_channels: 512,
            stddev_group: STDDEV_GROUP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.input_resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Config(format!(
                "discriminator resolution {r} must be a power of two of at least 8"
            )));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Config(
                "base_channels must be positive and at most max_channels".into(),
            ));
        }
        if self.stddev_group == 0 {
            return Err(Error::Config("stddev_group must be positive".into()));
        }
        Ok(())
    }

    /// Feature width at a given resolution: doubles per halving from
    /// `base_channels`, capped at `max_channels`.
    pub fn channels_at(&self, resolution: usize) -> usize {
        (self.base_channels * (self.input_resolution / resolution)).min(self.max_channels)
    }

    /// Number of residual blocks (one per halving down to 4x4).
    pub fn n_blocks(&self) -> usize {
        (self.input_resolution / 4).trailing_zeros() as usize
    }
}

pub fn declare_discriminator<T: Scalar>(
    store: &mut ParamStore<T>,
    seed: u64,
    cfg: &DiscriminatorConfig,
) -> Result<()> {
    cfg.validate()?;
    let rng = &mut seed_rng(seed, "init.discriminator");
    declare_conv(store, rng, "d.fromrgb", 1, 3, cfg.base_channels, true)?;
    let mut res = cfg.input_resolution;
    for j in 0..cfg.n_blocks() {
        let ci = cfg.channels_at(res);
        let co = cfg.channels_at(res / 2);
        declare_conv(store, rng, &format!("d.block{j}.conv0"), 3, ci, ci, true)?;
        declare_conv(store, rng, &format!("d.block{j}.conv1"), 3, ci, co, true)?;
        declare_conv(store, rng, &format!("d.block{j}.skip"), 1, ci, co, false)?;
        res /= 2;
    }
    let c = cfg.channels_at(4);
    declare_conv(store, rng, "d.head.conv", 3, c + 1, c, true)?;
    declare_linear(store, rng, "d.head.fc0", 16 * c, c)?;
    declare_linear(store, rng, "d.head.fc1", c, 1)?;
    Ok(())
}

/// One residual block: two 3x3 convolutions with activations then a 2x
/// average downsample, added to a downsampled 1x1 skip projection, the sum
/// scaled by 1/sqrt(2).
pub fn residual_block<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let s = sess.tape.shape(x).to_vec();
    if s[1] % 2 != 0 || s[2] % 2 != 0 {
        return Err(Error::invalid(
            "residual_block",
            format!("odd spatial extents {}x{}", s[1], s[2]),
        ));
    }
    let h0 = eq_conv_lrelu(sess, &format!("{prefix}.conv0"), x)?;
    let h1 = eq_conv_lrelu(sess, &format!("{prefix}.conv1"), h0)?;
    let main = sess.tape.avg_downsample2x(h1)?;
    let xd = sess.tape.avg_downsample2x(x)?;
    let skip = {
        let w = eq_weight(sess, &format!("{prefix}.skip.weight"))?;
        sess.tape.conv2d(xd, w, 1, 0)?
    };
    let sum = sess.tape.add(main, skip)?;
    Ok(sess.tape.scale(sum, 0.5f64.sqrt()))
}

/// Full discriminator pass: images in [-1, 1] at the configured
/// resolution to one logit per sample.
pub fn d_forward<T: Scalar>(
    sess: &mut Session<T>,
    cfg: &DiscriminatorConfig,
    images: Var,
) -> Result<Var> {
    let s = sess.tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != cfg.input_resolution || s[2] != cfg.input_resolution || s[3] != 3 {
        return Err(Error::invalid(
            "d_forward",
            format!(
                "expected [N, {r}, {r}, 3] images, got {s:?}",
                r = cfg.input_resolution
            ),
        ));
    }
    let mut x = eq_conv_lrelu(sess, "d.fromrgb", images)?;
    for j in 0..cfg.n_blocks() {
        x = residual_block(sess, &format!("d.block{j}"), x)?;
    }
    let x = minibatch_stddev(sess.tape, x, cfg.stddev_group)?;
    let x = eq_conv_lrelu(sess, "d.head.conv", x)?;
    let n = sess.tape.shape(x)[0];
    let c = sess.tape.shape(x)[3];
    let flat = sess.tape.reshape(x, &[n, 16 * c])?;
    let h = eq_linear_lrelu(sess, "d.head.fc0", flat)?;
    eq_linear(sess, "d.head.fc1", h)
}
