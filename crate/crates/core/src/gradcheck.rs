//! Finite-difference validation of tape gradients.
//!
//! Each case builds a scalar loss from generated inputs, takes the tape
//! gradient, and compares every component against a central difference of
//! the loss. The relative error uses the larger of the two magnitudes as
//! the scale, floored to avoid dividing by noise near zero.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

type GenFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One named gradient check: an input generator plus a loss builder.
pub struct GradCase {
    pub name: &'static str,
    gen: GenFn,
    build: BuildFn,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        GradCase { name, gen: Box::new(gen), build: Box::new(build) }
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// Standard normal shifted away from zero by at least `margin`, preserving
/// sign. Keeps piecewise-defined activations off their kinks.
fn randn_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let x: f64 = rng.sample(StandardNormal);
        if x >= 0.0 {
            x + margin
        } else {
            x - margin
        }
    })
}

fn randn_positive(rng: &mut ChaCha8Rng, shape: &[usize], floor: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let x: f64 = rng.sample(StandardNormal);
        x.abs() + floor
    })
}

fn eval_loss(case: &GradCase, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    // Differentiable leaves even for plain evaluation: a case may take an
    // inner gradient as part of computing its loss.
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Runs one case and returns the worst relative error over all gradient
/// components. `fault` injects an offset into the first analytic component,
/// which a healthy comparison must then report as a large error.
pub fn max_rel_err(case: &GradCase, seed: u64, eps: f64, fault: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = (case.gen)(&mut rng);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = (case.build)(&mut tape, &vars)?;
    let grads = tape.grad(loss, &vars)?;
    let mut analytic: Vec<Tensor<f64>> = grads
        .iter()
        .zip(&inputs)
        .map(|(g, x)| match g {
            Some(v) => tape.value(*v).clone(),
            None => Tensor::zeros(x.shape()),
        })
        .collect();
    if fault {
        analytic[0].data_mut()[0] += 1e-2;
    }

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += eps;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= eps;
            let numeric = (eval_loss(case, &plus)? - eval_loss(case, &minus)?) / (2.0 * eps);
            let a = analytic[i].data()[e];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

/// The case list shared by the test suite and the `gradcheck` command.
pub fn standard_cases() -> Vec<GradCase> {
    vec![
        GradCase::new(
            "elementwise",
            |rng| vec![randn(rng, &[2, 3]), randn(rng, &[2, 3])],
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                let q = t.scale(v[1], 0.3);
                let r = t.add(p, q)?;
                let s = t.sub(r, v[0])?;
                let s2 = t.mul(s, s)?;
                Ok(t.sum_all(s2))
            },
        ),
        GradCase::new(
            "div",
            |rng| vec![randn(rng, &[3, 4]), randn_positive(rng, &[3, 4], 0.5)],
            |t, v| {
                let q = t.div(v[0], v[1])?;
                Ok(t.sum_all(q))
            },
        ),
        GradCase::new(
            "sin_cos",
            |rng| vec![randn(rng, &[2, 5])],
            |t, v| {
                let s = t.sin(v[0]);
                let c = t.cos(v[0]);
                let p = t.mul(s, c)?;
                Ok(t.sum_all(p))
            },
        ),
        GradCase::new(
            "sigmoid_softplus",
            |rng| vec![randn(rng, &[2, 5])],
            |t, v| {
                let s = t.sigmoid(v[0]);
                let p = t.softplus(v[0]);
                let m = t.mul(s, p)?;
                Ok(t.sum_all(m))
            },
        ),
        GradCase::new(
            "sqrt_rsqrt",
            |rng| vec![randn_positive(rng, &[2, 4], 0.3)],
            |t, v| {
                let a = t.sqrt_eps(v[0], 1e-8);
                let b = t.rsqrt_eps(v[0], 1e-8);
                let m = t.mul(a, b)?;
                let s = t.add(m, a)?;
                Ok(t.sum_all(s))
            },
        ),
        GradCase::new(
            "leaky_relu",
            |rng| {
                let b = randn(rng, &[4]).scale(0.05);
                let mut x = randn(rng, &[2, 3, 3, 4]);
                let bd = b.data().to_vec();
                for (i, xv) in x.data_mut().iter_mut().enumerate() {
                    let pre = *xv + bd[i % 4];
                    if pre.abs() < 0.05 {
                        *xv += if pre >= 0.0 { 0.1 } else { -0.1 };
                    }
                }
                vec![x, b]
            },
            |t, v| {
                let y = t.leaky_relu(v[0], Some(v[1]), 0.2, std::f64::consts::SQRT_2)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "conv2d",
            |rng| vec![randn(rng, &[2, 5, 5, 3]), randn(rng, &[3, 3, 3, 4])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "conv2d_stride2",
            |rng| vec![randn(rng, &[1, 6, 6, 2]), randn(rng, &[3, 3, 2, 3])],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 2, 1)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "transposed_conv2d",
            |rng| vec![randn(rng, &[1, 3, 3, 4]), randn(rng, &[3, 3, 2, 4])],
            |t, v| {
                let y = t.transposed_conv2d(v[0], v[1])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "batch_conv2d",
            |rng| vec![randn(rng, &[2, 4, 4, 2]), randn(rng, &[2, 3, 3, 2, 3])],
            |t, v| {
                let y = t.batch_conv2d(v[0], v[1], 1, 1)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "linear",
            |rng| vec![randn(rng, &[3, 4]), randn(rng, &[4, 5]), randn(rng, &[5])],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "fold_unfold",
            |rng| vec![randn(rng, &[1, 4, 4, 3])],
            |t, v| {
                let f = t.fold(v[0], 2)?;
                let f2 = t.mul(f, f)?;
                let u = t.unfold(f2, 2)?;
                Ok(t.sum_all(u))
            },
        ),
        GradCase::new(
            "upsample_pool",
            |rng| vec![randn(rng, &[1, 2, 2, 3])],
            |t, v| {
                let u = t.nn_upsample(v[0], 2)?;
                let u2 = t.mul(u, u)?;
                let p = t.sum_pool(u2, 2)?;
                Ok(t.sum_all(p))
            },
        ),
        GradCase::new(
            "concat_slice",
            |rng| vec![randn(rng, &[2, 3]), randn(rng, &[2, 4])],
            |t, v| {
                let c = t.concat_last(v[0], v[1])?;
                let s = t.slice_last(c, 1, 5)?;
                let s2 = t.mul(s, s)?;
                Ok(t.sum_all(s2))
            },
        ),
        GradCase::new(
            "repeat_sum_batch",
            |rng| vec![randn(rng, &[1, 2, 3])],
            |t, v| {
                let r = t.repeat_batch(v[0], 4)?;
                let r2 = t.mul(r, r)?;
                let s = t.sum_batch(r2)?;
                Ok(t.sum_all(s))
            },
        ),
        GradCase::new(
            "group_mean",
            |rng| vec![randn(rng, &[4, 2, 2, 3])],
            |t, v| {
                let mu = t.group_mean_bcast(v[0], 2)?;
                let d = t.sub(v[0], mu)?;
                let d2 = t.mul(d, d)?;
                Ok(t.sum_all(d2))
            },
        ),
        GradCase::new(
            "mean_hwc_bcast",
            |rng| vec![randn(rng, &[2, 3, 3, 2])],
            |t, v| {
                let m = t.mean_hwc(v[0])?;
                let b = t.bcast_n(m, [3, 3, 2])?;
                let p = t.mul(v[0], b)?;
                Ok(t.sum_all(p))
            },
        ),
        GradCase::new(
            "pixel_norm",
            |rng| vec![randn(rng, &[3, 5]), randn(rng, &[3, 5])],
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let ms = t.sum_last(sq)?;
                let ms = t.scale(ms, 1.0 / 5.0);
                let r = t.rsqrt_eps(ms, 1e-8);
                let n = t.mul_outer_last(v[0], r)?;
                let p = t.mul(n, v[1])?;
                Ok(t.sum_all(p))
            },
        ),
        GradCase::new(
            "modulated_conv",
            |rng| {
                vec![
                    randn(rng, &[2, 4, 4, 2]),
                    randn(rng, &[3, 3, 2, 3]),
                    randn_off_zero(rng, &[2, 2], 0.3),
                ]
            },
            |t, v| {
                let w5 = t.outer_scale_kernel(v[1], v[2])?;
                let sq = t.mul(w5, w5)?;
                let q = t.sum_kkci(sq)?;
                let r = t.rsqrt_eps(q, 1e-8);
                let k = t.scale_kernel_per_out(w5, r)?;
                let y = t.batch_conv2d(v[0], k, 1, 1)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "modulated_deconv",
            |rng| {
                vec![
                    randn(rng, &[1, 4, 4, 2]),
                    randn(rng, &[3, 3, 2, 3]),
                    randn_off_zero(rng, &[1, 2], 0.3),
                ]
            },
            |t, v| {
                let w5 = t.outer_scale_kernel(v[1], v[2])?;
                let sq = t.mul(w5, w5)?;
                let q = t.sum_kkci(sq)?;
                let r = t.rsqrt_eps(q, 1e-8);
                let k = t.scale_kernel_per_out(w5, r)?;
                let ks = t.swap_kernel_axes34(k)?;
                let y = t.batch_conv2d_input_grad(v[0], ks, 2, 1, (8, 8))?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum_all(y2))
            },
        ),
        GradCase::new(
            "grad_norm_penalty",
            |rng| {
                vec![
                    randn(rng, &[2, 4, 4, 2]),
                    randn(rng, &[3, 3, 2, 3]).scale(0.5),
                    randn(rng, &[3]).scale(0.1),
                ]
            },
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                let shape = t.shape(y).to_vec();
                let bb = t.bcast_from_last(v[2], &shape)?;
                let pre = t.add(y, bb)?;
                let a = t.sigmoid(pre);
                let m = t.mean_hwc(a)?;
                let logit_sum = t.sum_all(m);
                let gx = t.grad(logit_sum, &[v[0]])?[0].expect("input reaches the logits");
                let g2 = t.mul(gx, gx)?;
                Ok(t.sum_all(g2))
            },
        ),
    ]
}
