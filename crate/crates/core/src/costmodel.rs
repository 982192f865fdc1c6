//! Analytic parameter and multiply-accumulate accounting.
//!
//! Costs are counted layer by layer from the generator configuration
//! alone and must agree exactly with what an instrumented forward pass
//! accumulates: convolutions cost output-positions x kernel x channels,
//! transposed convolutions are counted at their input resolution, matrix
//! products cost rows x in x out, and everything else (bias, activation,
//! normalization, modulation, folding, resampling) is free.

use serde::Serialize;

use crate::error::Result;
use crate::generator::{BlockVariant, GeneratorConfig};

/// One cost-bearing layer: its kernel, batch-1 output shape, parameter
/// count, and multiply-accumulates at the requested batch size.
#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub layer: String,
    pub kernel: String,
    pub output: Vec<usize>,
    pub params: u64,
    pub macs: u64,
}

/// One tensor produced by the stage pipeline, named as the runtime trace
/// names it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceRow {
    pub name: String,
    pub output_shape: Vec<usize>,
    pub kernel: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantCost {
    pub variant: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Serialize)]
pub struct CostReport {
    pub variant: String,
    pub batch: usize,
    pub layers: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
    pub variants: Vec<VariantCost>,
}

fn conv_kernel(k: usize, ci: usize, co: usize) -> String {
    format!("{k}x{k}x{ci}x{co}")
}

struct StageGeom {
    res: usize,
    /// Spatial extent after shrinking twice.
    q: usize,
    /// Spatial extent between the two expansions.
    mid: usize,
    init_dim: usize,
    trunk: usize,
    shrunk: usize,
    block_in: usize,
}

fn stage_geom(cfg: &GeneratorConfig, i: usize) -> StageGeom {
    let res = cfg.stage_resolutions[i];
    let k = cfg.fold_scale;
    StageGeom {
        res,
        q: res / (k * k),
        mid: res / k,
        init_dim: cfg.init_dims[i],
        trunk: cfg.trunk_widths[i],
        shrunk: cfg.shrunk_width(i),
        block_in: cfg.block_in_width(i),
    }
}

/// Per-layer costs for one generator forward pass, in execution order.
pub fn cost_rows(cfg: &GeneratorConfig, batch: usize) -> Result<Vec<CostRow>> {
    cfg.validate()?;
    let n = batch as u64;
    let z = cfg.latent_dim as u64;
    let mut rows = Vec::new();

    for l in 0..cfg.mapping_depth {
        rows.push(CostRow {
            layer: format!("map.fc{l}"),
            kernel: format!("{}x{}", cfg.latent_dim, cfg.latent_dim),
            output: vec![1, cfg.latent_dim],
            params: z * z + z,
            macs: n * z * z,
        });
    }

    for i in 0..cfg.n_stages() {
        let g = stage_geom(cfg, i);
        let (res, d, t) = (g.res as u64, g.init_dim as u64, g.trunk as u64);
        let pin = if i == 0 { 2 * d } else { d };
        let embed = if i == 0 { res * res * d } else { 0 };
        rows.push(CostRow {
            layer: format!("init{i}"),
            kernel: "-".into(),
            output: vec![1, g.res, g.res, g.init_dim],
            params: 2 * d + embed + pin * d + d,
            macs: n * res * res * (2 * d + pin * d),
        });
        if cfg.block_variant.uses_fold() {
            let fw = cfg.fold_width as u64;
            rows.push(CostRow {
                layer: format!("stage{i}.reduce"),
                kernel: conv_kernel(1, g.init_dim, cfg.fold_width),
                output: vec![1, g.res, g.res, cfg.fold_width],
                params: d * fw + fw,
                macs: n * res * res * d * fw,
            });
        }
        if i > 0 {
            let (si, bi) = (g.shrunk as u64, g.block_in as u64);
            let q = g.q as u64;
            rows.push(CostRow {
                layer: format!("stage{i}.combine"),
                kernel: conv_kernel(1, g.shrunk, g.block_in),
                output: vec![1, g.q, g.q, g.block_in],
                params: si * bi + bi,
                macs: n * q * q * si * bi,
            });
        }
        let spatial = [g.q, g.mid, g.mid, g.res];
        let out_spatial = if cfg.block_variant.uses_deconv() {
            [g.mid, g.mid, g.res, g.res]
        } else {
            spatial
        };
        for (c, (ci, co)) in cfg.block_conv_dims(i).into_iter().enumerate() {
            let (s, ciu, cou) = (spatial[c] as u64, ci as u64, co as u64);
            rows.push(CostRow {
                layer: format!("stage{i}.conv{c}"),
                kernel: conv_kernel(3, ci, co),
                output: vec![1, out_spatial[c], out_spatial[c], co],
                params: 9 * ciu * cou + cou + z * ciu + ciu,
                macs: n * (s * s * 9 * ciu * cou + z * ciu),
            });
        }
        rows.push(CostRow {
            layer: format!("stage{i}.torgb"),
            kernel: conv_kernel(1, g.trunk, 3),
            output: vec![1, g.res, g.res, 3],
            params: t * 3 + 3 + z * t + t,
            macs: n * (res * res * t * 3 + z * t),
        });
    }
    Ok(rows)
}

pub fn count_params(cfg: &GeneratorConfig) -> Result<u64> {
    Ok(cost_rows(cfg, 1)?.iter().map(|r| r.params).sum())
}

pub fn count_macs(cfg: &GeneratorConfig, batch: usize) -> Result<u64> {
    Ok(cost_rows(cfg, batch)?.iter().map(|r| r.macs).sum())
}

/// The stage tensor sequence exactly as `generator_forward` records it,
/// at batch 1.
pub fn shape_trace(cfg: &GeneratorConfig) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let mut push = |stage: usize, name: &str, shape: Vec<usize>, kernel: Option<String>| {
        rows.push(TraceRow { name: format!("stage{stage}.{name}"), output_shape: shape, kernel });
    };
    for i in 0..cfg.n_stages() {
        let g = stage_geom(cfg, i);
        push(i, "initialization", vec![1, g.res, g.res, g.init_dim], None);
        if cfg.block_variant.uses_fold() {
            push(
                i,
                "projection",
                vec![1, g.res, g.res, cfg.fold_width],
                Some(conv_kernel(1, g.init_dim, cfg.fold_width)),
            );
            push(i, "folding", vec![1, g.q, g.q, g.shrunk], None);
        } else {
            push(i, "downsample", vec![1, g.q, g.q, g.init_dim], None);
        }
        let dims = cfg.block_conv_dims(i);
        if cfg.block_variant.uses_deconv() {
            let names = ["deconv0", "modconv1", "deconv1", "modconv3"];
            let spatial = [g.mid, g.mid, g.res, g.res];
            for (c, name) in names.into_iter().enumerate() {
                let (ci, co) = dims[c];
                push(i, name, vec![1, spatial[c], spatial[c], co], Some(conv_kernel(3, ci, co)));
            }
        } else {
            let u = cfg.unfolded_width(i);
            push(i, "modconv0", vec![1, g.q, g.q, g.trunk], Some(conv_kernel(3, dims[0].0, dims[0].1)));
            push(i, "unfolding0", vec![1, g.mid, g.mid, u], None);
            push(i, "modconv1", vec![1, g.mid, g.mid, g.trunk], Some(conv_kernel(3, dims[1].0, dims[1].1)));
            push(i, "modconv2", vec![1, g.mid, g.mid, g.trunk], Some(conv_kernel(3, dims[2].0, dims[2].1)));
            push(i, "unfolding1", vec![1, g.res, g.res, u], None);
            push(i, "modconv3", vec![1, g.res, g.res, g.trunk], Some(conv_kernel(3, dims[3].0, dims[3].1)));
        }
        push(i, "to_rgb", vec![1, g.res, g.res, 3], Some(conv_kernel(1, g.trunk, 3)));
    }
    Ok(rows)
}

/// Totals for every block variant of the given architecture, MACs at
/// batch 1.
pub fn compare_variants(cfg: &GeneratorConfig) -> Result<Vec<VariantCost>> {
    let mut out = Vec::new();
    for v in BlockVariant::ALL {
        let alt = GeneratorConfig { block_variant: v, ..cfg.clone() };
        out.push(VariantCost {
            variant: v.name().to_string(),
            params: count_params(&alt)?,
            macs: count_macs(&alt, 1)?,
        });
    }
    Ok(out)
}

pub fn cost_report(cfg: &GeneratorConfig, batch: usize) -> Result<CostReport> {
    let layers = cost_rows(cfg, batch)?;
    let total_params = layers.iter().map(|r| r.params).sum();
    let total_macs = layers.iter().map(|r| r.macs).sum();
    Ok(CostReport {
        variant: cfg.block_variant.name().to_string(),
        batch,
        layers,
        total_params,
        total_macs,
        variants: compare_variants(cfg)?,
    })
}

fn shape_string(shape: &[usize]) -> String {
    let inner: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

/// Fixed-width table of the per-layer costs with a totals row.
pub fn layer_table(report: &CostReport) -> String {
    let mut cells: Vec<[String; 5]> = vec![[
        "layer".into(),
        "kernel".into(),
        "output".into(),
        "params".into(),
        "macs".into(),
    ]];
    for row in &report.layers {
        cells.push([
            row.layer.clone(),
            row.kernel.clone(),
            shape_string(&row.output),
            row.params.to_string(),
            row.macs.to_string(),
        ]);
    }
    cells.push([
        "total".into(),
        "".into(),
        "".into(),
        report.total_params.to_string(),
        report.total_macs.to_string(),
    ]);
    let mut widths = [0usize; 5];
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = format!("variant {} at batch {}\n", report.variant, report.batch);
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// One line per block variant with the same architecture otherwise.
pub fn variant_table(report: &CostReport) -> String {
    let mut out = String::from("variant comparison (batch 1)\n");
    for v in &report.variants {
        out.push_str(&format!("{:22} params {:>12}  macs {:>14}\n", v.variant, v.params, v.macs));
    }
    out
}

/// Fixed-width table of the report, one layer per line plus totals and
/// the variant comparison.
pub fn text_report(report: &CostReport) -> String {
    let mut out = layer_table(report);
    out.push('\n');
    out.push_str(&variant_table(report));
    out
}

pub fn json_report(report: &CostReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| crate::error::Error::Config(format!("report serialization: {e}")))
}

/// Runs an instrumented forward pass (mapping plus synthesis) and returns
/// the multiply-accumulates the tape recorded, for checking the analytic
/// count against the executed graph.
pub fn instrumented_macs(cfg: &GeneratorConfig, batch: usize) -> Result<u64> {
    use crate::generator::{declare_generator, generator_forward, mapping_network};
    use crate::params::{ParamStore, Session, Trainable};
    use crate::rng::{randn, seed_rng};

    let mut store: ParamStore<f64> = ParamStore::new();
    declare_generator(&mut store, 0, cfg)?;
    let mut tape = crate::tape::Tape::new();
    let mut sess = Session::new(&mut tape, &store, Trainable::None);
    let z = randn::<f64>(&mut seed_rng(0, "cost.verify.z"), &[batch, cfg.latent_dim]);
    let zv = sess.tape.leaf(z, false);
    let w = mapping_network(&mut sess, cfg, zv)?;
    let ws = vec![w; cfg.n_stages()];
    generator_forward(&mut sess, cfg, &ws)?;
    Ok(tape.mac_count())
}
