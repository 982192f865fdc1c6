//! Command line front end: training runs, sampling from checkpoints,
//! latent-space tools, shape traces, cost accounting, and gradient
//! verification. Every command is deterministic given its configuration
//! and seed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pixelfold::checkpoint::{read_checkpoint, write_checkpoint};
use pixelfold::costmodel;
use pixelfold::data::save_png;
use pixelfold::generator::{generate, interpolate, style_mix, BlockVariant};
use pixelfold::params::ParamStore;
use pixelfold::rng::{randn, seed_rng};
use pixelfold::tensor::Tensor;
use pixelfold::training::{init_state, train, TrainState};
use pixelfold::{Error, Result, Scalar};
use pixelfold_cli::checks::{self, Scope};
use pixelfold_cli::config::{resolve_out_root, RunConfig, RunDirs};

const VARIANTS: [&str; 5] =
    ["fold_unfold", "fold_deconv", "downsample_deconv", "fold_deconv_sc", "downsample_deconv_sc"];

#[derive(Parser)]
#[command(name = "pixelfold", version, about = "Progressive pixel-folding image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and discriminator pair from a run configuration
    Train(TrainArgs),
    /// Render samples from a checkpoint
    Generate(GenerateArgs),
    /// Walk the latent space between two seeded endpoints
    Interpolate(InterpolateArgs),
    /// Render one latent with selected stages styled by a second latent
    Mix(MixArgs),
    /// Print the stage-by-stage tensor trace of a generator
    Trace(TraceArgs),
    /// Count parameters and multiply-accumulates layer by layer
    Cost(CostArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration TOML
    #[arg(long)]
    config: PathBuf,
    /// Override the configured number of steps
    #[arg(long)]
    steps: Option<u64>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Override the generator block variant
    #[arg(long, value_parser = VARIANTS)]
    variant: Option<String>,
    /// Drop the feature connection between consecutive stages
    #[arg(long)]
    no_multistage_connection: bool,
    /// Override the checkpoint cadence (0 keeps only the final one)
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Run root directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write each stage's RGB contribution per sample
    #[arg(long)]
    stages: bool,
    /// Sample the live weights instead of the averaged ones
    #[arg(long)]
    no_ema: bool,
    /// Run root directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InterpolateArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    ckpt: PathBuf,
    /// Number of frames, endpoints included
    #[arg(long, default_value_t = 8)]
    frames: usize,
    /// Seed for both endpoint latents
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample the live weights instead of the averaged ones
    #[arg(long)]
    no_ema: bool,
    /// Run root directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MixArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    ckpt: PathBuf,
    /// Stages that take the second latent's style, comma separated
    #[arg(long, value_delimiter = ',')]
    stages: Vec<usize>,
    /// Seed for both latents
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample the live weights instead of the averaged ones
    #[arg(long)]
    no_ema: bool,
    /// Run root directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TraceArgs {
    /// Run configuration TOML
    #[arg(long)]
    config: PathBuf,
    /// Override the generator block variant
    #[arg(long, value_parser = VARIANTS)]
    variant: Option<String>,
    /// Drop the feature connection between consecutive stages
    #[arg(long)]
    no_multistage_connection: bool,
    /// Also write the trace under this run root
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// Run configuration TOML
    #[arg(long)]
    config: PathBuf,
    /// Batch size for the multiply-accumulate counts
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Override the generator block variant
    #[arg(long, value_parser = VARIANTS)]
    variant: Option<String>,
    /// Append a comparison of all five block variants
    #[arg(long)]
    variants: bool,
    /// Check the analytic count against an instrumented forward pass
    #[arg(long)]
    verify: bool,
    /// Emit the report as JSON instead of a table
    #[arg(long)]
    json: bool,
    /// Also write the report under this run root
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Which suite to run
    #[arg(long, value_enum, default_value = "all")]
    scope: Scope,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Interpolate(a) => cmd_interpolate(a),
        Command::Mix(a) => cmd_mix(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Forwards the training log to the log file and echoes it to stdout.
struct Tee<W: Write> {
    file: W,
}

impl<W: Write> Write for Tee<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.file.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        self.file.flush()
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(v) = a.steps {
        run.train.steps = v;
    }
    if let Some(v) = a.seed {
        run.train.seed = v;
    }
    if let Some(v) = a.batch_size {
        run.train.batch_size = v;
    }
    if let Some(v) = &a.variant {
        run.generator.block_variant = BlockVariant::parse(v)?;
    }
    if a.no_multistage_connection {
        run.generator.multistage_connection = false;
    }
    if let Some(v) = a.checkpoint_every {
        run.train.checkpoint_every = v;
    }
    run.validate()?;

    let dirs = RunDirs::create(resolve_out_root(a.out, run.output.dir.as_ref()))?;
    let blob = run.to_blob()?;
    let data = run.build_dataset::<f32>()?;
    println!(
        "training {} for {} steps at batch {} on {} images, run root {}",
        run.generator.block_variant.name(),
        run.train.steps,
        run.train.batch_size,
        data.len(),
        dirs.root.display()
    );

    let mut state = init_state::<f32>(&run.generator, &run.discriminator, &run.train)?;
    let log_path = dirs.logs.join("train.log");
    let file = File::create(&log_path)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", log_path.display())))?;
    let mut log = Tee { file: BufWriter::new(file) };

    let preview_z: Tensor<f32> =
        randn(&mut seed_rng(run.train.seed, "preview"), &[4, run.generator.latent_dim]);
    let gcfg = run.generator.clone();
    let mut written = 0usize;
    train(&run.generator, &run.discriminator, &run.train, &data, &mut state, &mut log, |st| {
        let path = dirs.ckpt.join(format!("step{:06}.ckpt", st.step));
        write_checkpoint(&path, st, &blob)?;
        let params = st.ema.as_ref().unwrap_or(&st.store);
        let preview = generate(&gcfg, params, &preview_z)?.image;
        save_png(&dirs.samples.join(format!("step{:06}.png", st.step)), &tile_batch(&preview, 2)?)?;
        written += 1;
        Ok(())
    })?;
    log.flush().map_err(Error::from)?;
    println!("done: {} checkpoints in {}, log at {}", written, dirs.ckpt.display(), log_path.display());
    Ok(())
}

/// Reads a checkpoint plus the run configuration embedded in it and
/// picks the parameter set to sample from.
fn load_sampling_state(ckpt: &PathBuf) -> Result<(TrainState<f32>, RunConfig)> {
    let (state, blob) = read_checkpoint::<f32>(ckpt)?;
    let run = RunConfig::from_blob(&blob)?;
    Ok((state, run))
}

fn sampling_params(state: &TrainState<f32>, no_ema: bool) -> &ParamStore<f32> {
    if no_ema {
        &state.store
    } else {
        state.ema.as_ref().unwrap_or(&state.store)
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Config("count must be positive".into()));
    }
    let (state, run) = load_sampling_state(&a.ckpt)?;
    let params = sampling_params(&state, a.no_ema);
    let dirs = RunDirs::create(resolve_out_root(a.out, run.output.dir.as_ref()))?;
    for i in 0..a.count {
        let z: Tensor<f32> =
            randn(&mut seed_rng(a.seed, &format!("generate.{i}")), &[1, run.generator.latent_dim]);
        let out = generate(&run.generator, params, &z)?;
        let path = dirs.samples.join(format!("sample{i:03}.png"));
        save_png(&path, &squeeze_image(out.image)?)?;
        println!("wrote {}", path.display());
        if a.stages {
            for (s, rgb) in out.stage_rgbs.into_iter().enumerate() {
                let p = dirs.samples.join(format!("sample{i:03}_stage{s}.png"));
                save_png(&p, &squeeze_image(rgb)?)?;
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn cmd_interpolate(a: InterpolateArgs) -> Result<()> {
    if a.frames < 2 {
        return Err(Error::Config(format!("{} frames cannot include both endpoints", a.frames)));
    }
    let (state, run) = load_sampling_state(&a.ckpt)?;
    let params = sampling_params(&state, a.no_ema);
    let dirs = RunDirs::create(resolve_out_root(a.out, run.output.dir.as_ref()))?;
    let dim = run.generator.latent_dim;
    let z1: Tensor<f32> = randn(&mut seed_rng(a.seed, "interpolate.z1"), &[1, dim]);
    let z2: Tensor<f32> = randn(&mut seed_rng(a.seed, "interpolate.z2"), &[1, dim]);
    // Frame 0 carries the first latent unchanged, the last frame the
    // second one.
    let alphas: Vec<f64> =
        (0..a.frames).map(|i| 1.0 - i as f64 / (a.frames - 1) as f64).collect();
    let frames = interpolate(&run.generator, params, &z1, &z2, &alphas)?;
    for (i, frame) in frames.into_iter().enumerate() {
        let path = dirs.samples.join(format!("interp{i:02}.png"));
        save_png(&path, &squeeze_image(frame)?)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_mix(a: MixArgs) -> Result<()> {
    let (state, run) = load_sampling_state(&a.ckpt)?;
    let params = sampling_params(&state, a.no_ema);
    let dirs = RunDirs::create(resolve_out_root(a.out, run.output.dir.as_ref()))?;
    let dim = run.generator.latent_dim;
    let z1: Tensor<f32> = randn(&mut seed_rng(a.seed, "mix.z1"), &[1, dim]);
    let z2: Tensor<f32> = randn(&mut seed_rng(a.seed, "mix.z2"), &[1, dim]);
    let img = style_mix(&run.generator, params, &z1, &z2, &a.stages)?;
    let path = dirs.samples.join("mix.png");
    save_png(&path, &squeeze_image(img)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_trace(a: TraceArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(v) = &a.variant {
        run.generator.block_variant = BlockVariant::parse(v)?;
    }
    if a.no_multistage_connection {
        run.generator.multistage_connection = false;
    }
    run.generator.validate()?;
    let rows = costmodel::shape_trace(&run.generator)?;
    let text = render_trace(&rows);
    print!("{text}");
    if let Some(out) = a.out {
        let dirs = RunDirs::create(out)?;
        write_report(&dirs.reports.join("trace.txt"), text.as_bytes())?;
        let json = serde_json::to_string_pretty(&rows)
            .map_err(|e| Error::Config(format!("trace serialization: {e}")))?;
        write_report(&dirs.reports.join("trace.json"), json.as_bytes())?;
        println!("wrote {}", dirs.reports.join("trace.txt").display());
    }
    Ok(())
}

fn cmd_cost(a: CostArgs) -> Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(v) = &a.variant {
        run.generator.block_variant = BlockVariant::parse(v)?;
    }
    run.generator.validate()?;
    let report = costmodel::cost_report(&run.generator, a.batch)?;
    let mut text = costmodel::layer_table(&report);
    if a.variants {
        text.push('\n');
        text.push_str(&costmodel::variant_table(&report));
    }
    if a.json {
        println!("{}", costmodel::json_report(&report)?);
    } else {
        print!("{text}");
    }
    if a.verify {
        let measured = costmodel::instrumented_macs(&run.generator, a.batch)?;
        if measured != report.total_macs {
            return Err(Error::Config(format!(
                "instrumented pass recorded {measured} multiply-accumulates, the analytic model says {}",
                report.total_macs
            )));
        }
        println!("verified: instrumented forward matches {measured} multiply-accumulates");
    }
    if let Some(out) = a.out {
        let dirs = RunDirs::create(out)?;
        write_report(&dirs.reports.join("cost.txt"), text.as_bytes())?;
        write_report(&dirs.reports.join("cost.json"), costmodel::json_report(&report)?.as_bytes())?;
        println!("wrote {}", dirs.reports.join("cost.txt").display());
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let outcomes = checks::run_scope(a.scope, a.inject_fault)?;
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut failed = 0usize;
    for o in &outcomes {
        let verdict = if o.passed() {
            "ok  "
        } else {
            failed += 1;
            "FAIL"
        };
        println!("{verdict} {:width$}  worst {:.3e}  tol {:.1e}", o.name, o.worst, o.tol);
    }
    if failed > 0 {
        return Err(Error::Config(format!("{failed} of {} gradient checks failed", outcomes.len())));
    }
    println!("all {} gradient checks passed", outcomes.len());
    Ok(())
}

fn write_report(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

fn shape_string(shape: &[usize]) -> String {
    let inner: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("[{}]", inner.join(", "))
}

fn render_trace(rows: &[costmodel::TraceRow]) -> String {
    let mut cells: Vec<[String; 3]> =
        vec![["layer".into(), "output".into(), "kernel".into()]];
    for r in rows {
        cells.push([
            r.name.clone(),
            shape_string(&r.output_shape),
            r.kernel.clone().unwrap_or_else(|| "-".into()),
        ]);
    }
    let mut widths = [0usize; 3];
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> =
            row.iter().zip(widths).map(|(cell, w)| format!("{cell:w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Drops the leading batch axis of a single `[1, H, W, 3]` image.
fn squeeze_image<T: Scalar>(img: Tensor<T>) -> Result<Tensor<T>> {
    let s = img.shape().to_vec();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::invalid("squeeze", format!("expected [1, H, W, C], got {s:?}")));
    }
    img.reshaped(&[s[1], s[2], s[3]])
}

/// Tiles a `[N, H, W, 3]` batch into one image, row major, padding the
/// last row with background.
fn tile_batch<T: Scalar>(batch: &Tensor<T>, cols: usize) -> Result<Tensor<T>> {
    let s = batch.shape();
    if s.len() != 4 || s[3] != 3 || cols == 0 {
        return Err(Error::invalid("tile", format!("expected [N, H, W, 3], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let rows = n.div_ceil(cols);
    Ok(Tensor::from_fn(&[rows * h, cols * w, 3], |idx| {
        let c = idx % 3;
        let x = (idx / 3) % (cols * w);
        let y = idx / 3 / (cols * w);
        let i = (y / h) * cols + x / w;
        if i < n {
            batch.at(&[i, y % h, x % w, c])
        } else {
            T::from_f64(-1.0)
        }
    }))
}
