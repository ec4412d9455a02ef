//! Command-line entry points: train, translate, evaluate, synth-toy,
//! inspect-sampling, weight-density and config.
//!
//! Configuration is layered: preset defaults, then an optional YAML/JSON
//! file, then flags. Any `--section.key value` flag overrides that dotted
//! key of the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use stagematch::config::ConfigLayers;
use stagematch::data::{self, synth_toy, ToyDomainSpec, UnpairedData};
use stagematch::eval::{self, EvalConfig, ExtractorKind};
use stagematch::training::{fit, Checkpoint, Models, Trainer};
use stagematch::{Error, Result, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Exit status for an error that reached the top level.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Dimension { .. } => EXIT_USAGE,
        Error::Data(_) | Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) | Error::Json(_) => {
            EXIT_DATA
        }
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "stagematch", version, about = "Unpaired image-to-image translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes config, metrics, sampler history and checkpoints.
    Train(TrainArgs),
    /// Translate every image of a directory with a trained checkpoint.
    Translate(TranslateArgs),
    /// FID between two image directories.
    Evaluate(EvaluateArgs),
    /// Write the synthetic hue-shift toy dataset.
    SynthToy(SynthToyArgs),
    /// Render a sampling-frequency heatmap from a sampler history.
    InspectSampling(InspectArgs),
    /// Histogram the weights of one checkpoint component.
    WeightDensity(DensityArgs),
    /// Print the resolved configuration as JSON.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Toy,
}

#[derive(Debug, Args)]
struct ConfigSource {
    /// Base preset the config file and flags are layered on.
    #[arg(long, value_enum, default_value = "default")]
    preset: Preset,
    /// YAML or JSON file with nested or dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shorthand for `--train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--data.root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Shorthand for `--output.run_name`.
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    source: ConfigSource,
    /// Continue from a checkpoint written by an earlier run; the stored
    /// configuration is used unchanged.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print a progress line every N iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: u64,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    #[command(flatten)]
    source: ConfigSource,
}

#[derive(Debug, Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Configuration the checkpoint is expected to match.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExtractorArg {
    Embedder,
    Inception,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    fake: PathBuf,
    #[arg(long, value_enum, default_value = "embedder")]
    extractor: ExtractorArg,
    /// InceptionV3 weights in safetensors form.
    #[arg(long)]
    inception_weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    embedder_seed: u64,
    /// Images are resized to this square size before feature extraction.
    #[arg(long, default_value_t = 256)]
    image_size: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    /// Also write the result as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_images: usize,
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hue rotation from domain A to domain B in degrees.
    #[arg(long, default_value_t = 180.0)]
    hue_rotation: f64,
    #[arg(long, default_value_t = 2)]
    max_shapes: usize,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// `sampler.jsonl`, or a run directory containing it.
    #[arg(long)]
    log: PathBuf,
    /// Decoder tap to restrict to.
    #[arg(long)]
    tap: Option<usize>,
    /// Grid as HxW; defaults to the grid of the first matching record.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Pixels per grid cell.
    #[arg(long, default_value_t = 8)]
    scale: u32,
}

#[derive(Debug, Args)]
struct DensityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Parameter-name prefix, e.g. `heads`, `generator.h13` or `discriminator`.
    #[arg(long)]
    component: String,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Output prefix; writes `<out>.csv` and `<out>.png`.
    #[arg(long)]
    out: PathBuf,
}

/// Pulls `--a.b value` / `--a.b=value` pairs out of the argument list.
pub fn split_overrides(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| Error::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Reads a YAML or JSON config document.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let value: Value = if is_json {
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_yaml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    Ok(if value.is_null() { json!({}) } else { value })
}

fn resolve(source: &ConfigSource, overrides: &[(String, String)]) -> Result<RunConfig> {
    let base = match source.preset {
        Preset::Default => RunConfig::default(),
        Preset::Toy => RunConfig::toy(),
    };
    let mut layers = ConfigLayers::new(&base)?;
    if let Some(path) = &source.config {
        layers.overlay(&read_config_file(path)?)?;
    }
    if let Some(e) = source.epochs {
        layers.set_value("train.epochs", json!(e))?;
    }
    if let Some(s) = source.seed {
        layers.set_value("train.seed", json!(s))?;
    }
    if let Some(d) = &source.data {
        layers.set_value("data.root", json!(d))?;
    }
    if let Some(n) = &source.run_name {
        layers.set_value("output.run_name", json!(n))?;
    }
    for (k, v) in overrides {
        layers.set(k, v)?;
    }
    let config = layers.resolve()?;
    config.validate()?;
    Ok(config)
}

/// Parses and runs one command line, printing errors; returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let (rest, overrides) = match split_overrides(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, &overrides) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, overrides: &[(String, String)]) -> Result<()> {
    let takes_overrides = matches!(command, Command::Train(_) | Command::Config(_));
    if !takes_overrides && !overrides.is_empty() {
        return Err(Error::Usage(format!(
            "--{} is a configuration override; only `train` and `config` accept them",
            overrides[0].0
        )));
    }
    match command {
        Command::Train(a) => cmd_train(&a, overrides),
        Command::Translate(a) => cmd_translate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::SynthToy(a) => cmd_synth_toy(&a),
        Command::InspectSampling(a) => cmd_inspect(&a),
        Command::WeightDensity(a) => cmd_density(&a),
        Command::Config(a) => {
            println!("{}", serde_json::to_string_pretty(&resolve(&a.source, overrides)?)?);
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn cmd_train(a: &TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let (mut trainer, data, run_dir) = if let Some(path) = &a.resume {
        let s = &a.source;
        let customized = s.config.is_some()
            || s.epochs.is_some()
            || s.seed.is_some()
            || s.data.is_some()
            || s.run_name.is_some()
            || !matches!(s.preset, Preset::Default)
            || !overrides.is_empty();
        if customized {
            return Err(Error::Usage(
                "--resume continues with the checkpoint's stored configuration; drop the other config flags".into(),
            ));
        }
        let ck = Checkpoint::load(path)?;
        let config = ck.meta.config()?;
        let data = UnpairedData::open(&config.dataset())?;
        let trainer = Trainer::from_checkpoint(&ck, data.batches_per_epoch(config.train.batch_size))?;
        let run_dir = path
            .parent()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .unwrap_or_else(|| config.run_dir());
        (trainer, data, run_dir)
    } else {
        let config = resolve(&a.source, overrides)?;
        let data = UnpairedData::open(&config.dataset())?;
        let trainer = Trainer::new(config.clone(), data.batches_per_epoch(config.train.batch_size))?;
        (trainer, data, config.run_dir())
    };
    eprintln!(
        "training {} iterations ({} per epoch) into {}",
        trainer.total_iterations(),
        trainer.batches_per_epoch(),
        run_dir.display()
    );
    let every = a.log_every;
    let report = fit(&mut trainer, &data, &run_dir, |t, m| {
        if every > 0 && (m.iteration + 1) % every == 0 {
            eprintln!(
                "iter {}/{} epoch {} total {:.4} gan_g {:.4} gan_d {:.4} multistage {} identity {} latent_std {} {:.3}s/it",
                m.iteration + 1,
                t.total_iterations(),
                m.epoch,
                m.loss_total,
                m.loss_gan_g,
                m.loss_gan_d,
                fmt_opt(m.loss_multistage),
                fmt_opt(m.loss_identity),
                fmt_opt(m.latent_std),
                m.sec_per_iter
            );
        }
        Ok(())
    })?;
    println!("run directory: {}", report.run_dir.display());
    println!("final checkpoint: {}", report.final_checkpoint.display());
    Ok(())
}

fn cmd_translate(a: &TranslateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    ck.meta.verify_hash()?;
    let mut expected = Vec::new();
    if let Some(path) = &a.config {
        expected.push((path.clone(), serde_json::from_value::<RunConfig>(read_config_file(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?));
    } else if let Some(run_config) = a
        .checkpoint
        .parent()
        .and_then(Path::parent)
        .map(|d| d.join("config.json"))
        .filter(|p| p.is_file())
    {
        let text = fs::read_to_string(&run_config).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", run_config.display())))?;
        expected.push((run_config, cfg));
    }
    for (path, cfg) in expected {
        if cfg.hash()? != ck.meta.config_hash {
            return Err(Error::Config(format!(
                "{} does not match the configuration stored in {} (hash {})",
                path.display(),
                a.checkpoint.display(),
                ck.meta.config_hash
            )));
        }
    }
    let config = ck.meta.config()?;
    let (models, _) = Models::new(&config)?;
    models.load(&ck.tensors)?;
    let g = models.generator.frozen();
    let inputs = data::list_images(&a.input)?;
    fs::create_dir_all(&a.output).map_err(|e| Error::Data(format!("{}: {e}", a.output.display())))?;
    for path in &inputs {
        let x = data::load_image(path, config.data.image_size)?.unsqueeze(0)?;
        let y = g.translate(&x)?.squeeze(0)?;
        let name = path.file_name().ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?;
        data::save_image(&y, &a.output.join(name))?;
    }
    println!("translated {} images into {}", inputs.len(), a.output.display());
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = EvalConfig {
        extractor: match a.extractor {
            ExtractorArg::Embedder => ExtractorKind::Embedder,
            ExtractorArg::Inception => ExtractorKind::Inception,
        },
        inception_weights: a.inception_weights.clone(),
        embedder_seed: a.embedder_seed,
        batch_size: a.batch_size.max(1),
    };
    let extractor = eval::make_extractor(&cfg)?;
    let (real_paths, real) = data::load_dir(&a.real, a.image_size)?;
    let (fake_paths, fake) = data::load_dir(&a.fake, a.image_size)?;
    let fid = eval::fid_images(&real, &fake, extractor.as_ref(), cfg.batch_size)?;
    println!("FID {fid:.6}");
    let record = json!({
        "fid": fid,
        "real": a.real,
        "fake": a.fake,
        "n_real": real_paths.len(),
        "n_fake": fake_paths.len(),
        "extractor": cfg.extractor,
        "image_size": a.image_size,
    });
    println!("{record}");
    if let Some(path) = &a.json {
        fs::write(path, serde_json::to_string_pretty(&record)?)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_synth_toy(a: &SynthToyArgs) -> Result<()> {
    let spec = ToyDomainSpec {
        size: a.size,
        n_images: a.n_images,
        n_test: a.n_test,
        seed: a.seed,
        hue_rotation: a.hue_rotation,
        max_shapes: a.max_shapes,
        ..Default::default()
    };
    let manifest = synth_toy(&spec, &a.out)?;
    let total: usize = manifest.domains.values().map(Vec::len).sum();
    println!("wrote {total} images under {}", a.out.display());
    Ok(())
}

/// Parses `HxW` (or a single number for a square grid).
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Usage(format!("grid must look like 32x32, got {s}"));
    let (h, w) = s.split_once(['x', 'X']).unwrap_or((s, s));
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn cmd_inspect(a: &InspectArgs) -> Result<()> {
    let path = if a.log.is_dir() { a.log.join("sampler.jsonl") } else { a.log.clone() };
    let records = eval::read_sampler_log(&path)?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => records
            .iter()
            .find(|r| a.tap.is_none_or(|t| t == r.tap))
            .map(|r| r.grid)
            .ok_or_else(|| Error::Data(format!("no sampler records in {}", path.display())))?,
    };
    let map = eval::sampling_frequency_map(&records, grid, a.tap)?;
    map.save_png(&a.out, a.scale)?;
    let total: u64 = map.counts.iter().sum();
    println!(
        "{} samples on a {}x{} grid from {} records -> {}",
        total,
        grid.0,
        grid.1,
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_density(a: &DensityArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let d = eval::weight_density(&ck, &a.component, a.bins)?;
    let csv = a.out.with_extension("csv");
    let png = a.out.with_extension("png");
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Data(format!("{}: {e}", parent.display())))?;
    }
    d.write_csv(&csv)?;
    d.save_png(&png)?;
    println!(
        "{}: {} weights, mean {:.6}, std {:.6} -> {}, {}",
        d.component,
        d.n,
        d.mean,
        d.std,
        csv.display(),
        png.display()
    );
    Ok(())
}
