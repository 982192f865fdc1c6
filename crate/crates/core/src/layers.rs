//! Shared layer building blocks: equalized-learning-rate affine and
//! convolution layers, pixel normalization, and the minibatch standard
//! deviation feature.
//!
//! Weights are stored unit-normal and rescaled by 1/sqrt(fan_in) at use,
//! so the effective initialization is fan-in-scaled while optimizer steps
//! act on unit-scale tensors.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::rng::randn;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub fn declare_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    ci: usize,
    co: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), randn(rng, &[ci, co]))?;
    store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[co]))
}

/// Style affine: bias starts at one so modulation is initially neutral.
pub fn declare_affine<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    latent: usize,
    ci: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), randn(rng, &[latent, ci]))?;
    store.insert(&format!("{prefix}.bias"), Tensor::filled(&[ci], T::ONE))
}

pub fn declare_conv<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    k: usize,
    ci: usize,
    co: usize,
    bias: bool,
) -> Result<()> {
    store.insert(&format!("{prefix}.weight"), randn(rng, &[k, k, ci, co]))?;
    if bias {
        store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[co]))?;
    }
    Ok(())
}

/// Weight bound and rescaled by 1/sqrt(fan_in over all but the last axis).
pub fn eq_weight<T: Scalar>(sess: &mut Session<T>, name: &str) -> Result<Var> {
    let w = sess.bind(name)?;
    let shape = sess.tape.shape(w);
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    Ok(sess.tape.scale(w, 1.0 / (fan_in as f64).sqrt()))
}

pub fn eq_linear<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = eq_weight(sess, &format!("{prefix}.weight"))?;
    let b = sess.bind(&format!("{prefix}.bias"))?;
    sess.tape.linear(x, w, Some(b))
}

/// Linear followed by the fused bias + leaky-relu + gain activation.
pub fn eq_linear_lrelu<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = eq_weight(sess, &format!("{prefix}.weight"))?;
    let b = sess.bind(&format!("{prefix}.bias"))?;
    let y = sess.tape.linear(x, w, None)?;
    sess.tape.leaky_relu(y, Some(b), LRELU_SLOPE, LRELU_GAIN)
}

/// Plain convolution, stride 1, "same" padding, no bias or activation.
pub fn eq_conv<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = eq_weight(sess, &format!("{prefix}.weight"))?;
    let k = sess.tape.shape(w)[0];
    sess.tape.conv2d(x, w, 1, (k - 1) / 2)
}

/// Convolution followed by the fused bias + leaky-relu + gain activation.
pub fn eq_conv_lrelu<T: Scalar>(sess: &mut Session<T>, prefix: &str, x: Var) -> Result<Var> {
    let y = eq_conv(sess, prefix, x)?;
    let b = sess.bind(&format!("{prefix}.bias"))?;
    sess.tape.leaky_relu(y, Some(b), LRELU_SLOPE, LRELU_GAIN)
}

/// Scales each feature vector to unit root-mean-square over the last axis.
pub fn pixel_norm<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let c = *tape
        .shape(x)
        .last()
        .ok_or_else(|| Error::invalid("pixel_norm", "rank-0 input"))?;
    let sq = tape.mul(x, x)?;
    let ssum = tape.sum_last(sq)?;
    let ms = tape.scale(ssum, 1.0 / c as f64);
    let r = tape.rsqrt_eps(ms, 1e-8);
    tape.mul_outer_last(x, r)
}

/// Appends one channel holding the group-wise feature standard deviation,
/// averaged over positions and channels and shared within each group.
pub fn minibatch_stddev<T: Scalar>(tape: &mut Tape<T>, x: Var, group: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let n = s[0];
    if n == 0 {
        return Err(Error::invalid("minibatch_stddev", "empty batch"));
    }
    let g = group.min(n);
    if n % g != 0 {
        return Err(Error::invalid(
            "minibatch_stddev",
            format!("batch {} not divisible by group {}", n, g),
        ));
    }
    let mu = tape.group_mean_bcast(x, g)?;
    let d = tape.sub(x, mu)?;
    let d2 = tape.mul(d, d)?;
    let var = tape.group_mean_bcast(d2, g)?;
    let sd = tape.sqrt_eps(var, 1e-8);
    let f = tape.mean_hwc(sd)?;
    let feat = tape.bcast_n(f, [s[1], s[2], 1])?;
    tape.concat_last(x, feat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Trainable;
    use crate::rng::seed_rng;

    #[test]
    fn pixel_norm_gives_unit_rms_rows() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap(), false);
        let y = pixel_norm(&mut tape, x).unwrap();
        let rms = ((9.0 + 16.0) / 2.0f64).sqrt();
        let d = tape.value(y).data();
        assert!((d[0] - 3.0 / rms).abs() < 1e-9);
        assert!((d[1] - 4.0 / rms).abs() < 1e-9);
    }

    #[test]
    fn minibatch_stddev_closed_forms() {
        let mut tape: Tape<f64> = Tape::new();
        let same = tape.leaf(Tensor::filled(&[4, 2, 2, 3], 1.5), false);
        let y = minibatch_stddev(&mut tape, same, 4).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 2, 4]);
        for n in 0..4 {
            let v = tape.value(y).at(&[n, 0, 0, 3]);
            assert!(v.abs() < 1e-3, "identical batch stddev {v}");
        }

        let mut tape: Tape<f64> = Tape::new();
        let mut t = Tensor::filled(&[2, 2, 2, 1], 2.0);
        for i in 8 / 2..8 {
            t.data_mut()[i] = 3.0;
        }
        let x = tape.leaf(t, false);
        let y = minibatch_stddev(&mut tape, x, 2).unwrap();
        // Population standard deviation of {2, 3} is 0.5 at every position.
        for n in 0..2 {
            let v = tape.value(y).at(&[n, 1, 1, 1]);
            assert!((v - 0.5).abs() < 1e-6, "stddev channel {v}");
        }
    }

    #[test]
    fn minibatch_stddev_clamps_oversized_groups() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::filled(&[3, 2, 2, 1], 1.0), false);
        let y = minibatch_stddev(&mut tape, x, 4).unwrap();
        assert_eq!(tape.shape(y), &[3, 2, 2, 2]);
    }

    #[test]
    fn eq_linear_scales_by_fan_in() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = seed_rng(0, "test");
        declare_linear(&mut store, &mut rng, "fc", 4, 2).unwrap();
        store.set("fc.weight", Tensor::filled(&[4, 2], 1.0)).unwrap();
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &store, Trainable::None);
        let x = sess.tape.leaf(Tensor::filled(&[1, 4], 1.0), false);
        let y = eq_linear(&mut sess, "fc", x).unwrap();
        let expect = 4.0 / 4.0f64.sqrt();
        assert!((tape.value(y).data()[0] - expect).abs() < 1e-12);
    }
}
