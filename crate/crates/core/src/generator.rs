//! Multi-stage progressive generator.
//!
//! Each stage initializes a pixel tensor from coordinates, shrinks it
//! (fold or downsample), mixes in the previous stage's features, runs four
//! style-modulated convolutions that restore the stage resolution (via
//! unfolding or transposed convolutions), and projects to RGB. Stage RGB
//! images are nearest-upsampled to the final resolution and summed.

use serde::{Deserialize, Serialize};

use crate::coords::{declare_stage_init, init_pixel_tensor, reduce_before_fold, PixelTensor};
use crate::error::{Error, Result};
use crate::layers::{declare_linear, eq_linear, eq_linear_lrelu, pixel_norm};
use crate::modconv::{declare_modconv, modconv_forward, modulated_deconv, to_rgb};
use crate::params::{ParamStore, Session};
use crate::rng::seed_rng;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    FoldUnfold,
    FoldDeconv,
    DownsampleDeconv,
    FoldDeconvSc,
    DownsampleDeconvSc,
}

impl BlockVariant {
    pub const ALL: [BlockVariant; 5] = [
        BlockVariant::FoldUnfold,
        BlockVariant::FoldDeconv,
        BlockVariant::DownsampleDeconv,
        BlockVariant::FoldDeconvSc,
        BlockVariant::DownsampleDeconvSc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockVariant::FoldUnfold => "fold_unfold",
            BlockVariant::FoldDeconv => "fold_deconv",
            BlockVariant::DownsampleDeconv => "downsample_deconv",
            BlockVariant::FoldDeconvSc => "fold_deconv_sc",
            BlockVariant::DownsampleDeconvSc => "downsample_deconv_sc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown block variant {s:?}")))
    }

    /// Whether the front of the block shrinks by folding (with the channel
    /// reduction before it) rather than by average downsampling.
    pub fn uses_fold(self) -> bool {
        !matches!(self, BlockVariant::DownsampleDeconv | BlockVariant::DownsampleDeconvSc)
    }

    /// Whether resolution is recovered by transposed convolutions instead
    /// of unfolding.
    pub fn uses_deconv(self) -> bool {
        !matches!(self, BlockVariant::FoldUnfold)
    }

    /// Shape-consistent deconv plan: transposed convolutions narrow to the
    /// unfolded width so hidden tensors match the base variant.
    pub fn shape_consistent(self) -> bool {
        matches!(self, BlockVariant::FoldDeconvSc | BlockVariant::DownsampleDeconvSc)
    }
}

fn default_fold_scale() -> usize {
    2
}
fn default_mapping_depth() -> usize {
    2
}
fn default_true() -> bool {
    true
}
fn default_variant() -> BlockVariant {
    BlockVariant::FoldUnfold
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub stage_resolutions: Vec<usize>,
    pub init_dims: Vec<usize>,
    pub trunk_widths: Vec<usize>,
    pub fold_width: usize,
    #[serde(default = "default_fold_scale")]
    pub fold_scale: usize,
    pub latent_dim: usize,
    #[serde(default = "default_mapping_depth")]
    pub mapping_depth: usize,
    #[serde(default = "default_variant")]
    pub block_variant: BlockVariant,
    #[serde(default = "default_true")]
    pub multistage_connection: bool,
}

impl GeneratorConfig {
    /// Paper-scale reference architecture: 256x256 output over three
    /// stages.
    pub fn reference() -> Self {
        GeneratorConfig {
            stage_resolutions: vec![16, 64, 256],
            init_dims: vec![512, 512, 128],
            trunk_widths: vec![512, 512, 128],
            fold_width: 32,
            fold_scale: 2,
            latent_dim: 512,
            mapping_depth: 2,
            block_variant: BlockVariant::FoldUnfold,
            multistage_connection: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stage_resolutions.len();
        if n == 0 {
            return Err(Error::Config("at least one stage required".into()));
        }
        if self.init_dims.len() != n || self.trunk_widths.len() != n {
            return Err(Error::Config(format!(
                "stage_resolutions ({}), init_dims ({}), trunk_widths ({}) must have equal length",
                n,
                self.init_dims.len(),
                self.trunk_widths.len()
            )));
        }
        let k = self.fold_scale;
        if k < 2 {
            return Err(Error::Config(format!("fold_scale {} below 2", k)));
        }
        let kk = k * k;
        for (i, &r) in self.stage_resolutions.iter().enumerate() {
            if r % kk != 0 || r / kk == 0 {
                return Err(Error::Config(format!(
                    "stage {} resolution {} must be a positive multiple of fold_scale^2 = {}",
                    i, r, kk
                )));
            }
            if i > 0 && r != self.stage_resolutions[i - 1] * kk {
                return Err(Error::Config(format!(
                    "stage {} resolution {} must be {}x the previous stage ({})",
                    i,
                    r,
                    kk,
                    self.stage_resolutions[i - 1]
                )));
            }
        }
        for (i, &t) in self.trunk_widths.iter().enumerate() {
            if t % kk != 0 {
                return Err(Error::Config(format!(
                    "stage {} trunk width {} must be divisible by fold_scale^2 = {}",
                    i, t, kk
                )));
            }
        }
        if self.block_variant.uses_deconv() && self.fold_scale != 2 {
            return Err(Error::Config(format!(
                "block variant {} recovers resolution by doubling and needs fold_scale 2, got {}",
                self.block_variant.name(),
                self.fold_scale
            )));
        }
        if self.fold_width == 0 || self.latent_dim == 0 || self.mapping_depth == 0 {
            return Err(Error::Config("fold_width, latent_dim, mapping_depth must be positive".into()));
        }
        for (i, &d) in self.init_dims.iter().enumerate() {
            if d == 0 {
                return Err(Error::Config(format!("stage {} init dim must be positive", i)));
            }
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.stage_resolutions.len()
    }

    pub fn final_resolution(&self) -> usize {
        *self.stage_resolutions.last().unwrap()
    }

    /// Channel width entering the generation block after shrinking:
    /// reduced-then-folded width, or the untouched init width when
    /// downsampling.
    pub fn shrunk_width(&self, stage: usize) -> usize {
        if self.block_variant.uses_fold() {
            let kk = self.fold_scale * self.fold_scale;
            self.fold_width * kk * kk
        } else {
            self.init_dims[stage]
        }
    }

    /// Channel width the block convolutions see: the shrunk width on stage
    /// 0, the previous trunk width (via the combine projection) afterward.
    pub fn block_in_width(&self, stage: usize) -> usize {
        if stage == 0 {
            self.shrunk_width(0)
        } else {
            self.trunk_widths[stage - 1]
        }
    }

    /// Channel width after each unfolding (the narrow tensors of the base
    /// block, reused by the shape-consistent deconv plan).
    pub fn unfolded_width(&self, stage: usize) -> usize {
        self.trunk_widths[stage] / (self.fold_scale * self.fold_scale)
    }

    /// (Cin, Cout) of the four block convolutions for this variant.
    pub fn block_conv_dims(&self, stage: usize) -> [(usize, usize); 4] {
        let b = self.block_in_width(stage);
        let t = self.trunk_widths[stage];
        let u = self.unfolded_width(stage);
        match (self.block_variant.uses_deconv(), self.block_variant.shape_consistent()) {
            (false, _) => [(b, t), (u, t), (t, t), (u, t)],
            (true, false) => [(b, t), (t, t), (t, t), (t, t)],
            (true, true) => [(b, u), (u, t), (t, u), (u, t)],
        }
    }
}

pub fn declare_generator<T: Scalar>(
    store: &mut ParamStore<T>,
    seed: u64,
    cfg: &GeneratorConfig,
) -> Result<()> {
    cfg.validate()?;
    let rng = &mut seed_rng(seed, "init.generator");
    for l in 0..cfg.mapping_depth {
        declare_linear(store, rng, &format!("g.map.fc{l}"), cfg.latent_dim, cfg.latent_dim)?;
    }
    for i in 0..cfg.n_stages() {
        let res = cfg.stage_resolutions[i];
        let d = cfg.init_dims[i];
        declare_stage_init(store, rng, &format!("g.init{i}"), res, res, d, i == 0)?;
        if cfg.block_variant.uses_fold() {
            declare_linear(store, rng, &format!("g.stage{i}.reduce"), d, cfg.fold_width)?;
        }
        if i > 0 {
            declare_linear(
                store,
                rng,
                &format!("g.stage{i}.combine"),
                cfg.shrunk_width(i),
                cfg.block_in_width(i),
            )?;
        }
        for (c, (ci, co)) in cfg.block_conv_dims(i).into_iter().enumerate() {
            declare_modconv(store, rng, &format!("g.stage{i}.conv{c}"), 3, ci, co, cfg.latent_dim)?;
        }
        declare_modconv(store, rng, &format!("g.stage{i}.torgb"), 1, cfg.trunk_widths[i], 3, cfg.latent_dim)?;
    }
    Ok(())
}

/// Latent to style vector: pixel-normalized input through the mapping MLP.
pub fn mapping_network<T: Scalar>(sess: &mut Session<T>, cfg: &GeneratorConfig, z: Var) -> Result<Var> {
    let mut x = pixel_norm(sess.tape, z)?;
    for l in 0..cfg.mapping_depth {
        x = eq_linear_lrelu(sess, &format!("g.map.fc{l}"), x)?;
    }
    Ok(x)
}

pub struct GeneratorOutputs {
    /// Aggregated image at the final resolution.
    pub image: Var,
    /// Per-stage RGB at each stage's native resolution.
    pub stage_rgbs: Vec<Var>,
    /// Cumulative aggregation after each stage, at the final resolution.
    pub partials: Vec<Var>,
    /// Post-block feature tensors per stage.
    pub features: Vec<PixelTensor>,
    /// (name, shape) of each stage-pipeline tensor, for trace validation.
    pub layer_shapes: Vec<(String, Vec<usize>)>,
}

fn avg_down<T: Scalar>(sess: &mut Session<T>, x: Var, k: usize) -> Result<Var> {
    let p = sess.tape.sum_pool(x, k)?;
    Ok(sess.tape.scale(p, 1.0 / (k * k) as f64))
}

/// Runs the generator for per-stage style vectors `ws` (one per stage,
/// normally all the same node).
pub fn generator_forward<T: Scalar>(
    sess: &mut Session<T>,
    cfg: &GeneratorConfig,
    ws: &[Var],
) -> Result<GeneratorOutputs> {
    if ws.len() != cfg.n_stages() {
        return Err(Error::invalid(
            "generator",
            format!("{} style vectors for {} stages", ws.len(), cfg.n_stages()),
        ));
    }
    let batch = sess.tape.shape(ws[0])[0];
    let k = cfg.fold_scale;
    let deconv = cfg.block_variant.uses_deconv();

    let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
    let mut stage_rgbs = Vec::new();
    let mut features: Vec<PixelTensor> = Vec::new();
    let mut prev: Option<Var> = None;

    for i in 0..cfg.n_stages() {
        let res = cfg.stage_resolutions[i];
        let w = ws[i];
        let mut log = |name: &str, v: Var, tape: &crate::tape::Tape<T>| {
            shapes.push((format!("stage{i}.{name}"), tape.shape(v).to_vec()));
        };

        let e = init_pixel_tensor(sess, &format!("g.init{i}"), res, res, batch, i == 0)?;
        log("initialization", e, sess.tape);

        let shrunk = if cfg.block_variant.uses_fold() {
            let r = reduce_before_fold(sess, &format!("g.stage{i}"), e)?;
            log("projection", r, sess.tape);
            let f1 = sess.tape.fold(r, k)?;
            let f2 = sess.tape.fold(f1, k)?;
            log("folding", f2, sess.tape);
            f2
        } else {
            let d1 = avg_down(sess, e, k)?;
            let d2 = avg_down(sess, d1, k)?;
            log("downsample", d2, sess.tape);
            d2
        };

        let x = match prev {
            None => shrunk,
            Some(p) => {
                let proj = eq_linear(sess, &format!("g.stage{i}.combine"), shrunk)?;
                if cfg.multistage_connection {
                    sess.tape.add(proj, p)?
                } else {
                    proj
                }
            }
        };

        let trunk = if deconv {
            let x0 = modulated_deconv(sess, &format!("g.stage{i}.conv0"), x, w)?;
            log("deconv0", x0, sess.tape);
            let x1 = modconv_forward(sess, &format!("g.stage{i}.conv1"), x0, w)?;
            log("modconv1", x1, sess.tape);
            let x2 = modulated_deconv(sess, &format!("g.stage{i}.conv2"), x1, w)?;
            log("deconv1", x2, sess.tape);
            let x3 = modconv_forward(sess, &format!("g.stage{i}.conv3"), x2, w)?;
            log("modconv3", x3, sess.tape);
            x3
        } else {
            let x0 = modconv_forward(sess, &format!("g.stage{i}.conv0"), x, w)?;
            log("modconv0", x0, sess.tape);
            let u0 = sess.tape.unfold(x0, k)?;
            log("unfolding0", u0, sess.tape);
            let x1 = modconv_forward(sess, &format!("g.stage{i}.conv1"), u0, w)?;
            log("modconv1", x1, sess.tape);
            let x2 = modconv_forward(sess, &format!("g.stage{i}.conv2"), x1, w)?;
            log("modconv2", x2, sess.tape);
            let u1 = sess.tape.unfold(x2, k)?;
            log("unfolding1", u1, sess.tape);
            let x3 = modconv_forward(sess, &format!("g.stage{i}.conv3"), u1, w)?;
            log("modconv3", x3, sess.tape);
            x3
        };

        let rgb = to_rgb(sess, &format!("g.stage{i}.torgb"), trunk, w)?;
        log("to_rgb", rgb, sess.tape);

        features.push(PixelTensor { var: trunk, resolution: res, fold_level: 0 });
        stage_rgbs.push(rgb);
        prev = Some(trunk);
    }

    let final_res = cfg.final_resolution();
    let mut partials = Vec::new();
    let mut acc: Option<Var> = None;
    for (i, &rgb) in stage_rgbs.iter().enumerate() {
        let factor = final_res / cfg.stage_resolutions[i];
        let up = if factor > 1 { sess.tape.nn_upsample(rgb, factor)? } else { rgb };
        acc = Some(match acc {
            None => up,
            Some(a) => sess.tape.add(a, up)?,
        });
        partials.push(acc.unwrap());
    }

    Ok(GeneratorOutputs {
        image: acc.unwrap(),
        stage_rgbs,
        partials,
        features,
        layer_shapes: shapes,
    })
}

/// Everything a plain generation run produces, as concrete tensors.
pub struct Generated<T> {
    pub image: Tensor<T>,
    pub stage_rgbs: Vec<Tensor<T>>,
    pub partials: Vec<Tensor<T>>,
}

/// Convenience wrapper: map latents to styles and run the generator on a
/// fresh tape without gradients.
pub fn generate<T: Scalar>(
    cfg: &GeneratorConfig,
    store: &ParamStore<T>,
    z: &Tensor<T>,
) -> Result<Generated<T>> {
    let mut tape = crate::tape::Tape::new();
    let mut sess = Session::new(&mut tape, store, crate::params::Trainable::None);
    let zv = sess.tape.leaf(z.clone(), false);
    let w = mapping_network(&mut sess, cfg, zv)?;
    let ws = vec![w; cfg.n_stages()];
    let out = generator_forward(&mut sess, cfg, &ws)?;
    Ok(Generated {
        image: tape.value(out.image).clone(),
        stage_rgbs: out.stage_rgbs.iter().map(|&v| tape.value(v).clone()).collect(),
        partials: out.partials.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Latent-space interpolation `z = alpha z1 + (1 - alpha) z2` per entry.
/// Exact endpoints reuse the corresponding latent directly so endpoint
/// images are bitwise equal to plain generations.
pub fn interpolate<T: Scalar>(
    cfg: &GeneratorConfig,
    store: &ParamStore<T>,
    z1: &Tensor<T>,
    z2: &Tensor<T>,
    alphas: &[f64],
) -> Result<Vec<Tensor<T>>> {
    crate::tensor::expect_same_shape("interpolate", z1.shape(), z2.shape())?;
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("interpolate", format!("alpha {alpha} outside [0, 1]")));
        }
        let z = if alpha == 1.0 {
            z1.clone()
        } else if alpha == 0.0 {
            z2.clone()
        } else {
            let a = T::from_f64(alpha);
            let b = T::from_f64(1.0 - alpha);
            Tensor::from_fn(z1.shape(), |idx| z1.data()[idx] * a + z2.data()[idx] * b)
        };
        out.push(generate(cfg, store, &z)?.image);
    }
    Ok(out)
}

/// Stage-wise style mixing: stages in `replace` use the style of `z2`,
/// the rest use `z1`.
pub fn style_mix<T: Scalar>(
    cfg: &GeneratorConfig,
    store: &ParamStore<T>,
    z1: &Tensor<T>,
    z2: &Tensor<T>,
    replace: &[usize],
) -> Result<Tensor<T>> {
    for &s in replace {
        if s >= cfg.n_stages() {
            return Err(Error::invalid(
                "style_mix",
                format!("stage {} out of range for {} stages", s, cfg.n_stages()),
            ));
        }
    }
    let mut tape = crate::tape::Tape::new();
    let mut sess = Session::new(&mut tape, store, crate::params::Trainable::None);
    let z1v = sess.tape.leaf(z1.clone(), false);
    let z2v = sess.tape.leaf(z2.clone(), false);
    let w1 = mapping_network(&mut sess, cfg, z1v)?;
    let w2 = mapping_network(&mut sess, cfg, z2v)?;
    let ws: Vec<Var> = (0..cfg.n_stages())
        .map(|i| if replace.contains(&i) { w2 } else { w1 })
        .collect();
    let out = generator_forward(&mut sess, cfg, &ws)?;
    Ok(tape.value(out.image).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            stage_resolutions: vec![4, 16],
            init_dims: vec![16, 8],
            trunk_widths: vec![16, 8],
            fold_width: 2,
            fold_scale: 2,
            latent_dim: 8,
            mapping_depth: 2,
            block_variant: BlockVariant::FoldUnfold,
            multistage_connection: true,
        }
    }

    #[test]
    fn reference_config_is_valid() {
        GeneratorConfig::reference().validate().unwrap();
    }

    #[test]
    fn resolution_schedule_is_enforced() {
        let mut cfg = GeneratorConfig::reference();
        cfg.stage_resolutions = vec![16, 32, 256];
        assert!(cfg.validate().is_err());
        cfg.stage_resolutions = vec![16, 64];
        assert!(cfg.validate().is_err());
        cfg.init_dims = vec![512, 512];
        cfg.trunk_widths = vec![512, 512];
        cfg.validate().unwrap();
    }

    #[test]
    fn trunk_width_must_fit_unfolding() {
        let mut cfg = tiny();
        cfg.trunk_widths = vec![16, 6];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn block_dims_follow_the_variant_plans() {
        let mut cfg = GeneratorConfig::reference();
        assert_eq!(cfg.block_conv_dims(1), [(512, 512), (128, 512), (512, 512), (128, 512)]);
        assert_eq!(cfg.block_conv_dims(2), [(512, 128), (32, 128), (128, 128), (32, 128)]);
        cfg.block_variant = BlockVariant::FoldDeconv;
        assert_eq!(cfg.block_conv_dims(1), [(512, 512), (512, 512), (512, 512), (512, 512)]);
        cfg.block_variant = BlockVariant::FoldDeconvSc;
        assert_eq!(cfg.block_conv_dims(1), [(512, 128), (128, 512), (512, 128), (128, 512)]);
        cfg.block_variant = BlockVariant::DownsampleDeconv;
        assert_eq!(cfg.shrunk_width(2), 128);
        assert_eq!(cfg.block_conv_dims(2), [(512, 128), (128, 128), (128, 128), (128, 128)]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in BlockVariant::ALL {
            assert_eq!(BlockVariant::parse(v.name()).unwrap(), v);
        }
        assert!(BlockVariant::parse("nope").is_err());
    }

    #[test]
    fn style_mix_rejects_bad_stage() {
        let cfg = tiny();
        let mut store: ParamStore<f64> = ParamStore::new();
        declare_generator(&mut store, 0, &cfg).unwrap();
        let z = Tensor::zeros(&[1, 8]);
        assert!(style_mix(&cfg, &store, &z, &z, &[5]).is_err());
    }
}
