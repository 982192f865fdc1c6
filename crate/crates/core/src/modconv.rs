//! Style-modulated convolution layers.
//!
//! A layer owns a shared kernel, a per-layer affine map from the style
//! vector to per-input-channel scales, and a bias. Modulation multiplies
//! the kernel by the scales, demodulation renormalizes each output-channel
//! slice to unit L2 norm, and the result is applied as one kernel per
//! batch sample.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::{declare_affine, declare_conv, eq_weight, LRELU_GAIN, LRELU_SLOPE};
use crate::params::{ParamStore, Session};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

pub const DEMOD_EPS: f64 = 1e-8;

pub fn declare_modconv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    k: usize,
    ci: usize,
    co: usize,
    latent: usize,
) -> Result<()> {
    declare_conv(store, rng, prefix, k, ci, co, true)?;
    declare_affine(store, rng, &format!("{prefix}.affine"), latent, ci)
}

/// Per-sample input-channel scales from the style vector.
pub fn affine_style<T: Scalar>(sess: &mut Session<T>, prefix: &str, w: Var) -> Result<Var> {
    crate::layers::eq_linear(sess, &format!("{prefix}.affine"), w)
}

/// Builds per-sample kernels: modulation by `s`, then optional
/// demodulation to unit per-output-channel L2 norm.
pub fn modulate_demodulate<T: Scalar>(
    tape: &mut Tape<T>,
    kernel: Var,
    s: Var,
    demodulate: bool,
) -> Result<Var> {
    let w5 = tape.outer_scale_kernel(kernel, s)?;
    if !demodulate {
        return Ok(w5);
    }
    let sq = tape.mul(w5, w5)?;
    let q = tape.sum_kkci(sq)?;
    let r = tape.rsqrt_eps(q, DEMOD_EPS);
    tape.scale_kernel_per_out(w5, r)
}

fn modulated_kernel<T: Scalar>(
    sess: &mut Session<T>,
    prefix: &str,
    w: Var,
    demodulate: bool,
) -> Result<Var> {
    let kernel = eq_weight(sess, &format!("{prefix}.weight"))?;
    let s = affine_style(sess, prefix, w)?;
    modulate_demodulate(sess.tape, kernel, s, demodulate)
}

/// Modulated convolution with demodulation, bias, and fused activation.
pub fn modconv_forward<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var, w: Var) -> Result<Var> {
    let kernel = modulated_kernel(sess, prefix, w, true)?;
    let k = sess.tape.shape(kernel)[1];
    let y = sess.tape.batch_conv2d(x, kernel, 1, (k - 1) / 2)?;
    let b = sess.bind(&format!("{prefix}.bias"))?;
    sess.tape.leaky_relu(y, Some(b), LRELU_SLOPE, LRELU_GAIN)
}

/// 1x1 modulated projection to RGB: no demodulation, no activation.
pub fn to_rgb<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var, w: Var) -> Result<Var> {
    let kernel = modulated_kernel(sess, prefix, w, false)?;
    let y = sess.tape.batch_conv2d(x, kernel, 1, 0)?;
    let b = sess.bind(&format!("{prefix}.bias"))?;
    let shape = sess.tape.shape(y).to_vec();
    let bb = sess.tape.bcast_from_last(b, &shape)?;
    sess.tape.add(y, bb)
}

/// Modulated stride-2 transposed convolution doubling the spatial extent,
/// with demodulation, bias, and fused activation.
pub fn modulated_deconv<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var, w: Var) -> Result<Var> {
    let kernel = modulated_kernel(sess, prefix, w, true)?;
    let swapped = sess.tape.swap_kernel_axes34(kernel)?;
    let s = sess.tape.shape(x);
    let hw = (s[1] * 2, s[2] * 2);
    let y = sess.tape.batch_conv2d_input_grad(x, swapped, 2, 1, hw)?;
    let b = sess.bind(&format!("{prefix}.bias"))?;
    sess.tape.leaky_relu(y, Some(b), LRELU_SLOPE, LRELU_GAIN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use crate::rng::{randn, seed_rng};
    use crate::tensor::Tensor;

    #[test]
    fn neutral_affine_gives_unit_scales() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(3, "init");
        declare_modconv(&mut store, &mut rng, "mc", 3, 4, 5, 8).unwrap();
        store.set("mc.affine.weight", Tensor::zeros(&[8, 4])).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Trainable::None);
        let w = sess.tape.leaf(randn(&mut rng, &[2, 8]), false);
        let s = affine_style(&mut sess, "mc", w).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn demodulated_kernel_slices_have_unit_norm() {
        let mut rng = seed_rng(4, "init");
        let mut tape: Tape<f64> = Tape::new();
        let kernel = tape.leaf(randn(&mut rng, &[3, 3, 4, 5]), false);
        let s = tape.leaf(randn(&mut rng, &[2, 4]), false);
        let kk = modulate_demodulate(&mut tape, kernel, s, true).unwrap();
        let v = tape.value(kk);
        for n in 0..2 {
            for l in 0..5 {
                let mut norm2 = 0.0;
                for p in 0..9 {
                    for c in 0..4 {
                        let e = v.at(&[n, p / 3, p % 3, c, l]);
                        norm2 += e * e;
                    }
                }
                assert!((norm2.sqrt() - 1.0).abs() < 1e-6, "slice norm {}", norm2.sqrt());
            }
        }
    }

    #[test]
    fn unit_styles_without_demodulation_keep_the_kernel() {
        let mut rng = seed_rng(5, "init");
        let mut tape: Tape<f64> = Tape::new();
        let kernel = tape.leaf(randn(&mut rng, &[1, 1, 3, 2]), false);
        let s = tape.leaf(Tensor::filled(&[1, 3], 1.0), false);
        let kk = modulate_demodulate(&mut tape, kernel, s, false).unwrap();
        assert_eq!(tape.value(kk).data(), tape.value(kernel).data());
    }

    #[test]
    fn zero_input_to_rgb_is_the_bias_image() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(6, "init");
        declare_modconv(&mut store, &mut rng, "rgb", 1, 4, 3, 8).unwrap();
        store
            .set("rgb.bias", Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Trainable::None);
        let x = sess.tape.leaf(Tensor::zeros(&[1, 2, 2, 4]), false);
        let w = sess.tape.leaf(randn(&mut rng, &[1, 8]), false);
        let y = to_rgb(&mut sess, "rgb", x, w).unwrap();
        for p in 0..4 {
            assert_eq!(tape.value(y).data()[p * 3], 0.1);
            assert_eq!(tape.value(y).data()[p * 3 + 1], -0.2);
            assert_eq!(tape.value(y).data()[p * 3 + 2], 0.3);
        }
    }
}
