//! Gradient verification suites behind the `gradcheck` command.
//!
//! Every check reports its worst relative error against a tolerance, so
//! the command can print one line per check and fail the process when
//! any of them drifts.

use pixelfold::discriminator::{d_forward, declare_discriminator, DiscriminatorConfig};
use pixelfold::generator::{
    declare_generator, generate, generator_forward, mapping_network, BlockVariant, GeneratorConfig,
};
use pixelfold::gradcheck::{max_rel_err, standard_cases, GradCase};
use pixelfold::modconv::modulate_demodulate;
use pixelfold::params::{ParamStore, Session, Trainable};
use pixelfold::rng::{randn, seed_rng};
use pixelfold::tensor::Tensor;
use pixelfold::training::{d_loss, g_loss, r1_penalty};
use pixelfold::{Result, Tape};

const FD_SEED: u64 = 11;
const FD_EPS: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-5;
const END_TO_END_TOL: f64 = 1e-4;

pub struct CheckOutcome {
    pub name: String,
    pub worst: f64,
    pub tol: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst <= self.tol
    }
}

/// Runs the checks selected by `scope`. With `inject_fault` the first
/// finite-difference comparison gets a corrupted analytic gradient, so a
/// passing run with the fault enabled would mean the harness is blind.
pub fn run_scope(scope: Scope, inject_fault: bool) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut fault = inject_fault;
    let all = scope == Scope::All;
    if all || scope == Scope::Primitives {
        primitives(&mut out, &mut fault)?;
    }
    if all || scope == Scope::Folding {
        folding(&mut out)?;
    }
    if all || scope == Scope::Modconv {
        modconv(&mut out, &mut fault)?;
    }
    if all || scope == Scope::Losses {
        losses(&mut out, &mut fault)?;
    }
    if all || scope == Scope::Generator {
        end_to_end_generator(&mut out, &mut fault)?;
    }
    if all || scope == Scope::Discriminator {
        end_to_end_discriminator(&mut out, &mut fault)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, clap::ValueEnum)]
pub enum Scope {
    All,
    Primitives,
    Folding,
    Modconv,
    Losses,
    Generator,
    Discriminator,
}

fn take(fault: &mut bool) -> bool {
    std::mem::take(fault)
}

fn primitives(out: &mut Vec<CheckOutcome>, fault: &mut bool) -> Result<()> {
    for case in standard_cases() {
        let worst = max_rel_err(&case, FD_SEED, FD_EPS, take(fault))?;
        out.push(CheckOutcome { name: case.name.to_string(), worst, tol: PRIMITIVE_TOL });
    }
    Ok(())
}

fn folding(out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut round_trip = 0.0f64;
    let mut permutation = 0.0f64;
    for (i, k) in [2usize, 3, 4].iter().enumerate() {
        let rng = &mut seed_rng(FD_SEED, &format!("check.fold.{i}"));
        let x: Tensor<f64> = randn(rng, &[2, 2 * k, 2 * k, 3]);
        let m: Tensor<f64> = randn(rng, &[2, 2, 2, 3 * k * k]);

        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let f = tape.fold(xv, *k)?;
        let u = tape.unfold(f, *k)?;
        let back = tape.value(u);
        for (a, b) in back.data().iter().zip(x.data()) {
            round_trip = round_trip.max((a - b).abs());
        }

        // Folding only rearranges elements, so the gradient of
        // sum(fold(x) * m) must be exactly the unfolded mask.
        let mv = tape.leaf(m.clone(), false);
        let p = tape.mul(f, mv)?;
        let loss = tape.sum_all(p);
        let g = tape.grad(loss, &[xv])?[0].expect("x reaches the loss");
        let gx = tape.value(g).clone();
        let mut expect_tape: Tape<f64> = Tape::new();
        let mvar = expect_tape.leaf(m, false);
        let expect = expect_tape.unfold(mvar, *k)?;
        for (a, b) in gx.data().iter().zip(expect_tape.value(expect).data()) {
            permutation = permutation.max((a - b).abs());
        }
    }
    out.push(CheckOutcome { name: "fold_round_trip".into(), worst: round_trip, tol: 0.0 });
    out.push(CheckOutcome { name: "fold_gradient_permutation".into(), worst: permutation, tol: 0.0 });
    Ok(())
}

fn modconv(out: &mut Vec<CheckOutcome>, fault: &mut bool) -> Result<()> {
    for case in standard_cases().into_iter().filter(|c| c.name.starts_with("modulated")) {
        let worst = max_rel_err(&case, FD_SEED, FD_EPS, take(fault))?;
        out.push(CheckOutcome { name: case.name.to_string(), worst, tol: PRIMITIVE_TOL });
    }

    let mut worst = 0.0f64;
    for i in 0..8 {
        let rng = &mut seed_rng(FD_SEED, &format!("check.demod.{i}"));
        let kernel: Tensor<f64> = randn(rng, &[3, 3, 4, 5]);
        let styles: Tensor<f64> = randn(rng, &[2, 4]).map(|v| v + if v >= 0.0 { 0.3 } else { -0.3 });
        let factor = 0.25 * (i + 1) as f64;

        let mut tape: Tape<f64> = Tape::new();
        let kv = tape.leaf(kernel, false);
        let sv = tape.leaf(styles.clone(), false);
        let scaled = tape.leaf(styles.map(|v| v * factor), false);
        let a = modulate_demodulate(&mut tape, kv, sv, true)?;
        let b = modulate_demodulate(&mut tape, kv, scaled, true)?;
        let at = tape.value(a);
        let bt = tape.value(b);
        for (x, y) in at.data().iter().zip(bt.data()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-6));
        }
    }
    out.push(CheckOutcome { name: "demodulation_scale_invariance".into(), worst, tol: PRIMITIVE_TOL });
    Ok(())
}

fn losses(out: &mut Vec<CheckOutcome>, fault: &mut bool) -> Result<()> {
    let cases = vec![
        GradCase::new(
            "generator_loss",
            |rng| vec![randn(rng, &[6, 1])],
            |t, v| Ok(g_loss(t, v[0])),
        ),
        GradCase::new(
            "discriminator_loss",
            |rng| vec![randn(rng, &[5, 1]), randn(rng, &[5, 1])],
            |t, v| d_loss(t, v[0], v[1]),
        ),
        GradCase::new(
            "r1_penalty",
            |rng| vec![randn(rng, &[2, 4, 4, 3]), randn(rng, &[3, 3, 3, 1]).scale(0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], 1, 1)?;
                let a = t.sigmoid(y);
                let logits = t.mean_hwc(a)?;
                r1_penalty(t, v[0], logits, 2.0)
            },
        ),
    ];
    for case in cases {
        let worst = max_rel_err(&case, FD_SEED, FD_EPS, take(fault))?;
        out.push(CheckOutcome { name: case.name.to_string(), worst, tol: PRIMITIVE_TOL });
    }
    Ok(())
}

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        stage_resolutions: vec![4, 16],
        init_dims: vec![4, 4],
        trunk_widths: vec![8, 8],
        fold_width: 1,
        fold_scale: 2,
        latent_dim: 8,
        mapping_depth: 2,
        block_variant: BlockVariant::FoldUnfold,
        multistage_connection: true,
    }
}

/// Per-element check against central differences at two step widths: a
/// wide step can straddle an activation kink and a narrow one loses
/// digits to cancellation, so an element passes if either width agrees.
fn two_scale_worst(
    analytic: &Tensor<f64>,
    mut eval: impl FnMut(usize, f64) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..analytic.numel() {
        let a = analytic.data()[i];
        let mut best = f64::INFINITY;
        for h in [1e-4, 1e-5] {
            let numeric = (eval(i, h) - eval(i, -h)) / (2.0 * h);
            best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
        }
        worst = worst.max(best);
    }
    worst
}

fn end_to_end_generator(out: &mut Vec<CheckOutcome>, fault: &mut bool) -> Result<()> {
    let cfg = tiny_generator();
    let mut store: ParamStore<f64> = ParamStore::new();
    declare_generator(&mut store, 23, &cfg)?;
    let z: Tensor<f64> = randn(&mut seed_rng(23, "check.z"), &[2, cfg.latent_dim]);

    let loss_of = |store: &ParamStore<f64>| -> Result<f64> {
        let img = generate(&cfg, store, &z)?.image;
        Ok(img.data().iter().map(|&v| v * v).sum::<f64>() / img.numel() as f64)
    };

    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store, Trainable::All);
    let zv = sess.tape.leaf(z.clone(), false);
    let w = mapping_network(&mut sess, &cfg, zv)?;
    let ws = vec![w; cfg.n_stages()];
    let fwd = generator_forward(&mut sess, &cfg, &ws)?;
    let names = [
        "g.map.fc0.weight",
        "g.init0.fourier",
        "g.stage0.conv0.weight",
        "g.stage1.combine.weight",
        "g.stage1.conv3.affine.bias",
        "g.stage1.torgb.weight",
    ];
    let wrt: Vec<_> = names.iter().map(|n| sess.bind(n)).collect::<Result<_>>()?;
    let numel = tape.value(fwd.image).numel() as f64;
    let sq = tape.mul(fwd.image, fwd.image)?;
    let total = tape.sum_all(sq);
    let loss = tape.scale(total, 1.0 / numel);
    let grads = tape.grad(loss, &wrt)?;

    let mut worst = 0.0f64;
    for (name, gv) in names.iter().zip(&grads) {
        let mut analytic = tape.value(gv.expect("parameter reaches the image")).clone();
        if take(fault) {
            analytic.data_mut()[0] += 1e-2;
        }
        let base = store.get(name)?.clone();
        worst = worst.max(two_scale_worst(&analytic, |i, h| {
            let mut probe = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] += h;
            probe.set(name, t).unwrap();
            loss_of(&probe).unwrap()
        }));
    }
    out.push(CheckOutcome { name: "generator_end_to_end".into(), worst, tol: END_TO_END_TOL });
    Ok(())
}

fn end_to_end_discriminator(out: &mut Vec<CheckOutcome>, fault: &mut bool) -> Result<()> {
    let cfg = DiscriminatorConfig {
        input_resolution: 8,
        base_channels: 4,
        max_channels: 8,
        stddev_group: 4,
    };
    let mut store: ParamStore<f64> = ParamStore::new();
    declare_discriminator(&mut store, 37, &cfg)?;
    let x: Tensor<f64> = randn(&mut seed_rng(37, "check.x"), &[2, 8, 8, 3]);

    let loss_of = |store: &ParamStore<f64>, x: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, store, Trainable::None);
        let xv = sess.tape.leaf(x.clone(), false);
        let logits = d_forward(&mut sess, &cfg, xv)?;
        let t = tape.value(logits);
        Ok(t.data().iter().map(|&v| v * v).sum::<f64>() / t.numel() as f64)
    };

    let names = ["d.fromrgb.weight", "d.block0.conv0.weight", "d.head.fc1.weight"];
    let mut tape = Tape::new();
    let mut sess = Session::new(&mut tape, &store, Trainable::All);
    let xv = sess.tape.leaf(x.clone(), true);
    let logits = d_forward(&mut sess, &cfg, xv)?;
    let n = sess.tape.value(logits).numel() as f64;
    let sq = sess.tape.mul(logits, logits)?;
    let total = sess.tape.sum_all(sq);
    let loss = sess.tape.scale(total, 1.0 / n);
    let mut wrt: Vec<_> = names.iter().map(|n| sess.bind(n)).collect::<Result<_>>()?;
    wrt.push(xv);
    let grads = sess.tape.grad(loss, &wrt)?;

    let mut worst = 0.0f64;
    for (name, gv) in names.iter().zip(&grads) {
        let mut analytic = tape.value(gv.expect("parameter reaches the logits")).clone();
        if take(fault) {
            analytic.data_mut()[0] += 1e-2;
        }
        let base = store.get(name)?.clone();
        worst = worst.max(two_scale_worst(&analytic, |i, h| {
            let mut probe = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] += h;
            probe.set(name, t).unwrap();
            loss_of(&probe, &x).unwrap()
        }));
    }
    let analytic_x = tape.value(grads[names.len()].expect("input reaches the logits")).clone();
    worst = worst.max(two_scale_worst(&analytic_x, |i, h| {
        let mut probe = x.clone();
        probe.data_mut()[i] += h;
        loss_of(&store, &probe).unwrap()
    }));
    out.push(CheckOutcome { name: "discriminator_end_to_end".into(), worst, tol: END_TO_END_TOL });
    Ok(())
}
