use pixelfold::discriminator::{
    d_forward, declare_discriminator, residual_block, DiscriminatorConfig,
};
use pixelfold::kernels;
use pixelfold::layers::{minibatch_stddev, LRELU_GAIN, LRELU_SLOPE};
use pixelfold::params::{ParamStore, Session, Trainable};
use pixelfold::rng::{randn, seed_rng};
use pixelfold::tensor::Tensor;
use pixelfold::Tape;

fn tiny() -> DiscriminatorConfig {
    DiscriminatorConfig {
        input_resolution: 8,
        base_channels: 4,
        max_channels: 8,
        stddev_group: 4,
    }
}

fn lrelu_oracle(v: f64, b: f64) -> f64 {
    let p = v + b;
    LRELU_GAIN as f64 * if p >= 0.0 { p } else { LRELU_SLOPE as f64 * p }
}

fn avg_down_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(&[s[0], s[1] / 2, s[2] / 2, s[3]], |idx| {
        let c = s[3];
        let w = s[2] / 2;
        let ch = idx % c;
        let xx = (idx / c) % w;
        let yy = (idx / c / w) % (s[1] / 2);
        let n = idx / c / w / (s[1] / 2);
        (x.at(&[n, 2 * yy, 2 * xx, ch])
            + x.at(&[n, 2 * yy, 2 * xx + 1, ch])
            + x.at(&[n, 2 * yy + 1, 2 * xx, ch])
            + x.at(&[n, 2 * yy + 1, 2 * xx + 1, ch]))
            / 4.0
    })
}

#[test]
fn residual_block_matches_a_composed_oracle() {
    let cfg = tiny();
    let mut store: ParamStore<f64> = ParamStore::new();
    declare_discriminator(&mut store, 31, &cfg).unwrap();
    let x: Tensor<f64> = randn(&mut seed_rng(31, "test.x"), &[2, 8, 8, 4]);

    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store, Trainable::None);
    let xv = sess.tape.leaf(x.clone(), false);
    let y = residual_block(&mut sess, "d.block0", xv).unwrap();
    let got = tape.value(y).clone();

    let eq = |name: &str| {
        let w = store.get(name).unwrap();
        let fan: usize = w.shape()[..w.shape().len() - 1].iter().product();
        w.scale(1.0 / (fan as f64).sqrt())
    };
    let act = |t: &Tensor<f64>, b: &Tensor<f64>| {
        let c = *t.shape().last().unwrap();
        Tensor::from_fn(t.shape(), |i| lrelu_oracle(t.data()[i], b.data()[i % c]))
    };
    let (c0, _) = kernels::conv2d_fwd(&x, &eq("d.block0.conv0.weight"), 1, 1);
    let h0 = act(&c0, store.get("d.block0.conv0.bias").unwrap());
    let (c1, _) = kernels::conv2d_fwd(&h0, &eq("d.block0.conv1.weight"), 1, 1);
    let h1 = act(&c1, store.get("d.block0.conv1.bias").unwrap());
    let main = avg_down_oracle(&h1);
    let (skip, _) = kernels::conv2d_fwd(&avg_down_oracle(&x), &eq("d.block0.skip.weight"), 1, 0);
    let scale = 0.5f64.sqrt();
    for i in 0..got.numel() {
        let want = (main.data()[i] + skip.data()[i]) * scale;
        assert!((got.data()[i] - want).abs() < 1e-12, "element {i}");
    }
}

#[test]
fn stddev_channel_ignores_sample_order_within_a_group() {
    let x: Tensor<f64> = randn(&mut seed_rng(33, "test.x"), &[4, 3, 3, 2]);
    let perm = [2usize, 0, 3, 1];
    let page = 3 * 3 * 2;
    let xp = Tensor::from_fn(x.shape(), |idx| x.data()[perm[idx / page] * page + idx % page]);

    let mut tape = Tape::new();
    let a = tape.leaf(x, false);
    let b = tape.leaf(xp, false);
    let ya = minibatch_stddev(&mut tape, a, 4).unwrap();
    let yb = minibatch_stddev(&mut tape, b, 4).unwrap();
    let (va, vb) = (tape.value(ya), tape.value(yb));
    assert_eq!(va.shape(), &[4, 3, 3, 3]);
    for n in 0..4 {
        for p in 0..9 {
            let (y, x_) = (p / 3, p % 3);
            assert_eq!(
                va.at(&[perm[n], y, x_, 2]),
                vb.at(&[n, y, x_, 2]),
                "stddev channel moved with the permutation"
            );
        }
    }
}

#[test]
fn input_gradients_exist_for_the_penalty_path() {
    let cfg = tiny();
    let mut store: ParamStore<f64> = ParamStore::new();
    declare_discriminator(&mut store, 35, &cfg).unwrap();
    let x: Tensor<f64> = randn(&mut seed_rng(35, "test.x"), &[2, 8, 8, 3]);

    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store, Trainable::None);
    let xv = sess.tape.leaf(x, true);
    let logits = d_forward(&mut sess, &cfg, xv).unwrap();
    let loss = tape.sum_all(logits);
    let g = tape.grad(loss, &[xv]).unwrap()[0].expect("input gradient missing");
    let gt = tape.value(g);
    assert_eq!(gt.shape(), &[2, 8, 8, 3]);
    assert!(gt.is_finite());
    assert!(gt.l2_norm_f64() > 0.0);
}

#[test]
fn parameter_and_input_gradients_match_finite_differences() {
    let cfg = tiny();
    let mut store: ParamStore<f64> = ParamStore::new();
    declare_discriminator(&mut store, 37, &cfg).unwrap();
    let x: Tensor<f64> = randn(&mut seed_rng(37, "test.x"), &[2, 8, 8, 3]);

    let loss_of = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, store, Trainable::None);
        let xv = sess.tape.leaf(x.clone(), false);
        let logits = d_forward(&mut sess, &cfg, xv).unwrap();
        let t = tape.value(logits);
        t.data().iter().map(|&v| v * v).sum::<f64>() / t.numel() as f64
    };

    let names = [
        "d.fromrgb.weight",
        "d.block0.conv0.weight",
        "d.block0.skip.weight",
        "d.head.conv.weight",
        "d.head.fc0.weight",
        "d.head.fc1.weight",
    ];
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store, Trainable::All);
    let xv = sess.tape.leaf(x.clone(), true);
    let logits = d_forward(&mut sess, &cfg, xv).unwrap();
    let n = sess.tape.value(logits).numel() as f64;
    let sq = sess.tape.mul(logits, logits).unwrap();
    let total = sess.tape.sum_all(sq);
    let loss = sess.tape.scale(total, 1.0 / n);
    let mut wrt: Vec<_> = names.iter().map(|n| sess.bind(n).unwrap()).collect();
    wrt.push(xv);
    let grads = sess.tape.grad(loss, &wrt).unwrap();

    // Same two-width scheme as the generator check: pass if either step
    // width agrees, so activation kinks and tiny-derivative cancellation
    // cannot fake a failure.
    let mut worst = 0.0f64;
    let mut check = |analytic: &Tensor<f64>, mut eval: Box<dyn FnMut(usize, f64) -> f64>, numel: usize| {
        for i in 0..numel {
            let a = analytic.data()[i];
            let mut best = f64::INFINITY;
            for h in [1e-4, 1e-5] {
                let numeric = (eval(i, h) - eval(i, -h)) / (2.0 * h);
                best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            }
            worst = worst.max(best);
        }
    };

    for (name, gv) in names.iter().zip(&grads) {
        let analytic = tape.value(gv.unwrap()).clone();
        let base = store.get(name).unwrap().clone();
        let (st, xc, nm) = (store.clone(), x.clone(), name.to_string());
        check(
            &analytic,
            Box::new(move |i, h| {
                let mut probe = st.clone();
                let mut t = base.clone();
                t.data_mut()[i] += h;
                probe.set(&nm, t).unwrap();
                loss_of(&probe, &xc)
            }),
            store.get(name).unwrap().numel(),
        );
    }
    let analytic_x = tape.value(grads[names.len()].unwrap()).clone();
    let (st, xc) = (store.clone(), x.clone());
    check(
        &analytic_x,
        Box::new(move |i, h| {
            let mut probe = xc.clone();
            probe.data_mut()[i] += h;
            loss_of(&st, &probe)
        }),
        x.numel(),
    );
    assert!(worst < 1e-4, "worst discriminator gradient error {worst}");
}
