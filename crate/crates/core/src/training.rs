//! Adversarial training loop.
//!
//! The generator and discriminator share one [`ParamStore`] under the
//! "g." and "d." prefixes and alternate updates: the discriminator sees a
//! fresh batch of real images against fakes sampled without gradients,
//! then the generator trains through the frozen discriminator. The R1
//! penalty runs lazily every `r1_every` steps with its weight scaled by
//! the interval. All randomness is drawn from streams keyed by the run
//! seed and the absolute step index, so a run can be stopped, reloaded
//! from a checkpoint and continued bitwise.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::discriminator::{d_forward, declare_discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{
    declare_generator, generate, generator_forward, mapping_network, GeneratorConfig,
};
use crate::params::{ParamStore, Session, Trainable};
use crate::rng::{randn, seed_rng};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Adam denominator offset.
pub const ADAM_EPS: f64 = 1e-8;

fn default_lr() -> f64 {
    2e-3
}

fn default_beta1() -> f64 {
    0.99
}

fn default_batch_size() -> usize {
    16
}

fn default_r1_gamma() -> f64 {
    1.0
}

fn default_r1_every() -> usize {
    16
}

fn default_ema_decay() -> f64 {
    0.999
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub beta0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_r1_gamma")]
    pub r1_gamma: f64,
    #[serde(default = "default_r1_every")]
    pub r1_every: usize,
    pub steps: u64,
    #[serde(default)]
    pub seed: u64,
    /// Checkpoint cadence in steps; zero keeps only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub ema: bool,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            beta0: 0.0,
            beta1: default_beta1(),
            batch_size: default_batch_size(),
            r1_gamma: default_r1_gamma(),
            r1_every: default_r1_every(),
            steps: 0,
            seed: 0,
            checkpoint_every: 0,
            ema: false,
            ema_decay: default_ema_decay(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        for (name, b) in [("beta0", self.beta0), ("beta1", self.beta1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.r1_gamma < 0.0 {
            return Err(Error::Config(format!("r1 gamma {} must not be negative", self.r1_gamma)));
        }
        if self.r1_every == 0 {
            return Err(Error::Config("r1 interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        Ok(())
    }
}

/// Non-saturating generator loss: mean softplus(-logit) over fakes.
pub fn g_loss<T: Scalar>(tape: &mut Tape<T>, fake_logits: Var) -> Var {
    let neg = tape.neg(fake_logits);
    let sp = tape.softplus(neg);
    tape.mean_all(sp)
}

/// Discriminator loss: mean softplus(-real) + mean softplus(fake).
pub fn d_loss<T: Scalar>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let nr = tape.neg(real_logits);
    let sr = tape.softplus(nr);
    let a = tape.mean_all(sr);
    let sf = tape.softplus(fake_logits);
    let b = tape.mean_all(sf);
    tape.add(a, b)
}

/// R1 gradient penalty `(gamma / 2) * mean_i ||d logits / d x_i||^2`.
///
/// `images` must be a leaf with gradients enabled; the penalty node stays
/// on the tape, so differentiating the returned value reaches the
/// discriminator parameters through the inner gradient.
pub fn r1_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    images: Var,
    logits: Var,
    gamma: f64,
) -> Result<Var> {
    let n = tape.shape(images)[0];
    let total = tape.sum_all(logits);
    let gx = tape.grad(total, &[images])?[0].ok_or_else(|| {
        Error::invalid("r1_penalty", "no image gradient; pass images as a gradient-enabled leaf")
    })?;
    let sq = tape.mul(gx, gx)?;
    let ssq = tape.sum_all(sq);
    Ok(tape.scale(ssq, gamma / (2.0 * n as f64)))
}

/// First and second Adam moments for a fixed set of parameters.
#[derive(Clone)]
pub struct AdamState<T> {
    pub m: IndexMap<String, Tensor<T>>,
    pub v: IndexMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for every parameter under `prefix`, in store order.
    pub fn for_prefix(store: &ParamStore<T>, prefix: &str) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, value) in store.iter() {
            if name.starts_with(prefix) {
                m.insert(name.to_string(), Tensor::zeros(value.shape()));
                v.insert(name.to_string(), Tensor::zeros(value.shape()));
            }
        }
        AdamState { m, v, t: 0 }
    }
}

/// One Adam update over the given gradients. Moment math runs in f64 and
/// the results are cast back to the parameter dtype.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &IndexMap<String, Tensor<T>>,
    opt: &mut AdamState<T>,
    lr: f64,
    beta0: f64,
    beta1: f64,
) -> Result<()> {
    opt.t += 1;
    let bc0 = 1.0 - beta0.powi(opt.t as i32);
    let bc1 = 1.0 - beta1.powi(opt.t as i32);
    for (name, g) in grads {
        let m = opt
            .m
            .get_mut(name)
            .ok_or_else(|| Error::invalid("adam", format!("no moment slot for {name}")))?;
        let v = opt
            .v
            .get_mut(name)
            .ok_or_else(|| Error::invalid("adam", format!("no moment slot for {name}")))?;
        let p = store.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::invalid(
                "adam",
                format!("gradient shape {:?} for {name} of shape {:?}", g.shape(), p.shape()),
            ));
        }
        let shape = p.shape().to_vec();
        let numel = p.numel();
        let mut new_m = Vec::with_capacity(numel);
        let mut new_v = Vec::with_capacity(numel);
        let mut new_p = Vec::with_capacity(numel);
        for i in 0..numel {
            let gf = g.data()[i].to_f64();
            let mf = beta0 * m.data()[i].to_f64() + (1.0 - beta0) * gf;
            let vf = beta1 * v.data()[i].to_f64() + (1.0 - beta1) * gf * gf;
            let step = lr * (mf / bc0) / ((vf / bc1).sqrt() + ADAM_EPS);
            new_m.push(T::from_f64(mf));
            new_v.push(T::from_f64(vf));
            new_p.push(T::from_f64(p.data()[i].to_f64() - step));
        }
        *m = Tensor::from_vec(&shape, new_m)?;
        *v = Tensor::from_vec(&shape, new_v)?;
        store.set(name, Tensor::from_vec(&shape, new_p)?)?;
    }
    Ok(())
}

/// Everything a training run carries between steps and into checkpoints.
#[derive(Clone)]
pub struct TrainState<T: Scalar> {
    pub store: ParamStore<T>,
    pub g_opt: AdamState<T>,
    pub d_opt: AdamState<T>,
    /// Exponential moving average of the generator parameters, when enabled.
    pub ema: Option<ParamStore<T>>,
    pub step: u64,
    pub seed: u64,
}

/// Declares both networks into one store and zeroes the optimizers.
pub fn init_state<T: Scalar>(
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainConfig,
) -> Result<TrainState<T>> {
    tcfg.validate()?;
    let mut store = ParamStore::new();
    declare_generator(&mut store, tcfg.seed, gcfg)?;
    declare_discriminator(&mut store, tcfg.seed, dcfg)?;
    let g_opt = AdamState::for_prefix(&store, "g.");
    let d_opt = AdamState::for_prefix(&store, "d.");
    let ema = if tcfg.ema {
        let mut avg = ParamStore::new();
        for (name, value) in store.iter() {
            if name.starts_with("g.") {
                avg.insert(name, value.clone())?;
            }
        }
        Some(avg)
    } else {
        None
    };
    Ok(TrainState { store, g_opt, d_opt, ema, step: 0, seed: tcfg.seed })
}

fn collect_grads<T: Scalar>(
    tape: &mut Tape<T>,
    loss: Var,
    wrt: &[(String, Var)],
) -> Result<(IndexMap<String, Tensor<T>>, f64)> {
    let vars: Vec<Var> = wrt.iter().map(|&(_, v)| v).collect();
    let grads = tape.grad(loss, &vars)?;
    let mut map = IndexMap::new();
    let mut sumsq = 0.0f64;
    for ((name, _), g) in wrt.iter().zip(grads) {
        if let Some(gv) = g {
            let t = tape.value(gv).clone();
            for &x in t.data() {
                let f = x.to_f64();
                sumsq += f * f;
            }
            map.insert(name.clone(), t);
        }
    }
    Ok((map, sumsq.sqrt()))
}

fn ema_update<T: Scalar>(avg: &mut ParamStore<T>, store: &ParamStore<T>, decay: f64) -> Result<()> {
    let names: Vec<String> = avg.names().map(|n| n.to_string()).collect();
    for name in names {
        let current = store.get(&name)?;
        let held = avg.get(&name)?;
        let shape = held.shape().to_vec();
        let blended: Vec<T> = held
            .data()
            .iter()
            .zip(current.data())
            .map(|(&e, &p)| T::from_f64(decay * e.to_f64() + (1.0 - decay) * p.to_f64()))
            .collect();
        avg.set(&name, Tensor::from_vec(&shape, blended)?)?;
    }
    Ok(())
}

/// Per-step scalars reported to the log and surfaced in a NaN abort.
struct StepReport {
    d_loss: f64,
    g_loss: f64,
    r1: f64,
    d_grad_norm: f64,
    g_grad_norm: f64,
}

/// Runs training from `state.step` up to `tcfg.steps`, writing one log
/// line per step and calling `on_checkpoint` at the configured cadence
/// and once at the end. A non-finite loss or gradient norm snapshots the
/// state through `on_checkpoint` and aborts.
pub fn train<T: Scalar>(
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainConfig,
    data: &Dataset<T>,
    state: &mut TrainState<T>,
    log: &mut dyn Write,
    mut on_checkpoint: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<()> {
    gcfg.validate()?;
    dcfg.validate()?;
    tcfg.validate()?;
    if gcfg.final_resolution() != dcfg.input_resolution {
        return Err(Error::Config(format!(
            "generator renders {} but the discriminator expects {}",
            gcfg.final_resolution(),
            dcfg.input_resolution
        )));
    }
    if data.resolution() != dcfg.input_resolution {
        return Err(Error::Config(format!(
            "dataset resolution {} does not match the discriminator input {}",
            data.resolution(),
            dcfg.input_resolution
        )));
    }
    if tcfg.batch_size % dcfg.stddev_group.min(tcfg.batch_size) != 0 {
        return Err(Error::Config(format!(
            "batch size {} not divisible by the stddev group {}",
            tcfg.batch_size, dcfg.stddev_group
        )));
    }

    let mut last_checkpoint = None;
    while state.step < tcfg.steps {
        let s = state.step;
        let report = train_step(gcfg, dcfg, tcfg, data, state)?;
        state.step = s + 1;
        writeln!(
            log,
            "step {} d_loss {} g_loss {} r1 {} d_grad {} g_grad {}",
            s, report.d_loss, report.g_loss, report.r1, report.d_grad_norm, report.g_grad_norm
        )?;
        let finite = report.d_loss.is_finite()
            && report.g_loss.is_finite()
            && report.r1.is_finite()
            && report.d_grad_norm.is_finite()
            && report.g_grad_norm.is_finite();
        if !finite {
            on_checkpoint(state)?;
            return Err(Error::NonFinite { context: format!("training step {s}") });
        }
        if tcfg.checkpoint_every > 0 && state.step % tcfg.checkpoint_every == 0 {
            on_checkpoint(state)?;
            last_checkpoint = Some(state.step);
        }
    }
    if last_checkpoint != Some(state.step) {
        on_checkpoint(state)?;
    }
    Ok(())
}

fn train_step<T: Scalar>(
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    tcfg: &TrainConfig,
    data: &Dataset<T>,
    state: &mut TrainState<T>,
) -> Result<StepReport> {
    let s = state.step;
    let n = tcfg.batch_size;

    let z_d = randn::<T>(&mut seed_rng(state.seed, &format!("train.step{s}.z_d")), &[
        n,
        gcfg.latent_dim,
    ]);
    let real = data.sample_batch(&mut seed_rng(state.seed, &format!("train.step{s}.data")), n)?;
    let fake = generate(gcfg, &state.store, &z_d)?.image;

    let apply_r1 = tcfg.r1_gamma > 0.0 && s % tcfg.r1_every as u64 == 0;
    let (d_grads, d_grad_norm, d_loss_val, r1_val) = {
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &state.store, Trainable::Prefix("d.".into()));
        let real_var = sess.tape.leaf(real, apply_r1);
        let fake_var = sess.tape.leaf(fake, false);
        let real_logits = d_forward(&mut sess, dcfg, real_var)?;
        let fake_logits = d_forward(&mut sess, dcfg, fake_var)?;
        let base = d_loss(sess.tape, real_logits, fake_logits)?;
        let (loss, r1_val) = if apply_r1 {
            let penalty = r1_penalty(sess.tape, real_var, real_logits, tcfg.r1_gamma)?;
            let lazy = sess.tape.scale(penalty, tcfg.r1_every as f64);
            let total = sess.tape.add(base, lazy)?;
            (total, sess.tape.value(penalty).data()[0].to_f64())
        } else {
            (base, 0.0)
        };
        let wrt = sess.trainable_bound();
        let loss_val = tape.value(loss).data()[0].to_f64();
        let (grads, norm) = collect_grads(&mut tape, loss, &wrt)?;
        (grads, norm, loss_val, r1_val)
    };
    adam_step(&mut state.store, &d_grads, &mut state.d_opt, tcfg.lr, tcfg.beta0, tcfg.beta1)?;

    let z_g = randn::<T>(&mut seed_rng(state.seed, &format!("train.step{s}.z_g")), &[
        n,
        gcfg.latent_dim,
    ]);
    let (g_grads, g_grad_norm, g_loss_val) = {
        let mut tape = Tape::new();
        let mut sess = Session::new(&mut tape, &state.store, Trainable::Prefix("g.".into()));
        let z_var = sess.tape.leaf(z_g, false);
        let w = mapping_network(&mut sess, gcfg, z_var)?;
        let ws = vec![w; gcfg.n_stages()];
        let out = generator_forward(&mut sess, gcfg, &ws)?;
        let logits = d_forward(&mut sess, dcfg, out.image)?;
        let loss = g_loss(sess.tape, logits);
        let wrt = sess.trainable_bound();
        let loss_val = tape.value(loss).data()[0].to_f64();
        let (grads, norm) = collect_grads(&mut tape, loss, &wrt)?;
        (grads, norm, loss_val)
    };
    adam_step(&mut state.store, &g_grads, &mut state.g_opt, tcfg.lr, tcfg.beta0, tcfg.beta1)?;
    if let Some(avg) = state.ema.as_mut() {
        ema_update(avg, &state.store, tcfg.ema_decay)?;
    }

    Ok(StepReport {
        d_loss: d_loss_val,
        g_loss: g_loss_val,
        r1: r1_val,
        d_grad_norm,
        g_grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_logits_hit_the_softplus_closed_forms() {
        let mut tape: Tape<f64> = Tape::new();
        let zeros = tape.leaf(Tensor::zeros(&[5]), false);
        let g = g_loss(&mut tape, zeros);
        assert!((tape.value(g).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let d = d_loss(&mut tape, zeros, zeros).unwrap();
        assert!((tape.value(d).data()[0] - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_the_losses_to_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let high = tape.leaf(Tensor::filled(&[3], 10.0), false);
        let low = tape.leaf(Tensor::filled(&[3], -10.0), false);
        let d = d_loss(&mut tape, high, low).unwrap();
        let dv = tape.value(d).data()[0];
        assert!(dv < 1e-4 && dv > 0.0, "d loss {dv}");
        let g = g_loss(&mut tape, high);
        let gv = tape.value(g).data()[0];
        assert!(gv < 1e-4 && gv > 0.0, "g loss {gv}");
        let g_bad = g_loss(&mut tape, low);
        assert!(tape.value(g_bad).data()[0] > 9.0);
    }

    #[test]
    fn r1_on_a_summing_critic_counts_the_pixels() {
        let mut tape: Tape<f64> = Tape::new();
        let images = tape.leaf(Tensor::filled(&[2, 4, 4, 3], 0.3), true);
        let logits = tape.sum_all(images);
        let p = r1_penalty(&mut tape, images, logits, 2.0).unwrap();
        let want = (4 * 4 * 3) as f64;
        assert!((tape.value(p).data()[0] - want).abs() < 1e-9);
    }

    #[test]
    fn r1_without_image_gradients_is_an_error() {
        let mut tape: Tape<f64> = Tape::new();
        let images = tape.leaf(Tensor::filled(&[1, 2, 2, 3], 0.5), false);
        let logits = tape.sum_all(images);
        assert!(r1_penalty(&mut tape, images, logits, 1.0).is_err());
    }

    #[test]
    fn adam_with_constant_gradients_steps_by_the_learning_rate() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3])).unwrap();
        let mut opt = AdamState::for_prefix(&store, "w");
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::filled(&[3], 0.5));
        for _ in 0..200 {
            adam_step(&mut store, &grads, &mut opt, 0.01, 0.9, 0.999).unwrap();
        }
        for &w in store.get("w").unwrap().data() {
            let drift = (w + 200.0 * 0.01).abs();
            assert!(drift < 0.05, "parameter {w} strayed from the unit-step path");
        }
    }

    #[test]
    fn adam_first_step_matches_the_hand_formula() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("w", Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamState::for_prefix(&store, "w");
        let mut grads = IndexMap::new();
        grads.insert("w".to_string(), Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap());
        adam_step(&mut store, &grads, &mut opt, 1e-3, 0.0, 0.99).unwrap();
        let got = store.get("w").unwrap().data().to_vec();
        for (i, &g) in [0.3f64, -0.7].iter().enumerate() {
            let vhat = g * g;
            let want = [1.0, -2.0][i] - 1e-3 * g / (vhat.sqrt() + ADAM_EPS);
            assert!((got[i] - want).abs() < 1e-15, "lane {i}: {} vs {want}", got[i]);
        }
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn adam_leaves_parameters_without_gradients_untouched() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.insert("a", Tensor::filled(&[2], 1.5)).unwrap();
        store.insert("b", Tensor::filled(&[2], -0.5)).unwrap();
        let mut opt = AdamState::for_prefix(&store, "");
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), Tensor::filled(&[2], 1.0));
        adam_step(&mut store, &grads, &mut opt, 0.1, 0.0, 0.99).unwrap();
        assert_eq!(store.get("b").unwrap().data(), &[-0.5, -0.5]);
        assert_ne!(store.get("a").unwrap().data(), &[1.5, 1.5]);
    }
}
