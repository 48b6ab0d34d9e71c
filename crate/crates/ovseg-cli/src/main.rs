//! Command-line front end: dataset generation, training, evaluation,
//! inference, gradient diagnostics, and heatmap dumps, all reading and
//! writing line-delimited text, pixmaps, and LGSE containers.
//!
//! Exit codes: 0 on success, 1 on validation or usage errors, 2 when a
//! numeric computation produced a non-finite value at runtime.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ovseg::diagnostics::module_gradchecks;
use ovseg::encoder::{stub_encode_image, stub_encode_text};
use ovseg::eval::{argmax_channels, dump_heatmaps, evaluate, sliding_window_infer};
use ovseg::model::{forward, parse_config, validate_config, Config, ModelParams};
use ovseg::scene::{default_vocab, gen_scene, read_ppm, save_dataset, Scene, SceneConfig};
use ovseg::train::{load_checkpoint, train};
use ovseg::{lgse, pixmap, Error, Precision, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "ovseg",
    version,
    about = "Open-vocabulary segmentation on synthetic scenes",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file of `key = value` lines; defaults apply otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Output directory; receives the run manifest and any artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Numeric storage for forward passes.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F64)]
    precision: PrecisionArg,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl PrecisionArg {
    fn as_precision(self) -> Precision {
        match self {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }

    fn name(self) -> &'static str {
        match self {
            PrecisionArg::F32 => "f32",
            PrecisionArg::F64 => "f64",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generates a synthetic scene dataset (pixmaps, label maps, vocabulary).
    GenData {
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Vocabulary size including the background category.
        #[arg(long, default_value_t = 16)]
        categories: usize,
        /// Tag mixed into each scene's generation stream.
        #[arg(long, default_value = "scene")]
        tag: String,
    },
    /// Trains on freshly generated scenes and writes checkpoints.
    Train {
        /// Number of training scenes to generate.
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Vocabulary size including the background category.
        #[arg(long, default_value_t = 4)]
        categories: usize,
    },
    /// Evaluates a checkpoint (or a fresh initialization) on generated scenes.
    Eval {
        /// Checkpoint to load; omits to evaluate the initialization.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Number of evaluation scenes to generate.
        #[arg(long, default_value_t = 8)]
        scenes: usize,
        /// Vocabulary size including the background category.
        #[arg(long, default_value_t = 4)]
        categories: usize,
    },
    /// Segments one image with sliding-window inference.
    Infer {
        /// Input image (binary or plain-text pixmap).
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Checkpoint to load; omits to run the initialization.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Vocabulary size including the background category.
        #[arg(long, default_value_t = 4)]
        categories: usize,
    },
    /// Checks every stage's gradients against finite differences.
    Gradcheck,
    /// Renders region-level alignment and attention grids for one image.
    DumpHeatmaps {
        /// Input image (binary or plain-text pixmap).
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Checkpoint to load; omits to run the initialization.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Vocabulary size including the background category.
        #[arg(long, default_value_t = 4)]
        categories: usize,
        /// Pixels per region cell in the rendered grids.
        #[arg(long, default_value_t = 8)]
        cell: usize,
    },
    /// Prints the resolved configuration.
    PrintConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error and must exit 1, not clap's default 2 (reserved
            // here for non-finite runtime failures).
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().expect("write clap message");
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 2,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if let Some(out) = &cli.out {
        write_manifest(out, cli, &cfg)?;
    }
    let precision = cli.precision.as_precision();
    match &cli.command {
        Command::GenData { count, categories, tag } => {
            let out = require_out(cli, "gen-data")?;
            cmd_gen_data(&cfg, out, *count, *categories, tag)
        }
        Command::Train { scenes, categories } => {
            require_f64(cli, "train")?;
            let out = require_out(cli, "train")?;
            cmd_train(&cfg, out, *scenes, *categories)
        }
        Command::Eval { checkpoint, scenes, categories } => {
            cmd_eval(&cfg, cli.out.as_deref(), checkpoint.as_deref(), *scenes, *categories, precision)
        }
        Command::Infer { image, checkpoint, categories } => {
            let out = require_out(cli, "infer")?;
            cmd_infer(&cfg, out, image, checkpoint.as_deref(), *categories, precision)
        }
        Command::Gradcheck => {
            require_f64(cli, "gradcheck")?;
            cmd_gradcheck(&cfg)
        }
        Command::DumpHeatmaps { image, checkpoint, categories, cell } => {
            let out = require_out(cli, "dump-heatmaps")?;
            cmd_dump_heatmaps(&cfg, out, image, checkpoint.as_deref(), *categories, *cell, precision)
        }
        Command::PrintConfig => {
            print!("{}", cfg.print());
            Ok(())
        }
    }
}

/// Defaults, then the configuration file, then the seed override; validated.
fn resolve_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(&fs::read_to_string(path)?)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    validate_config(&cfg)?;
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData { .. } => "gen-data",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Infer { .. } => "infer",
        Command::Gradcheck => "gradcheck",
        Command::DumpHeatmaps { .. } => "dump-heatmaps",
        Command::PrintConfig => "print-config",
    }
}

/// Records the resolved configuration and tool versions next to the run's
/// artifacts, so any output directory is self-describing.
fn write_manifest(out: &Path, cli: &Cli, cfg: &Config) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut text = String::new();
    writeln!(text, "command = {}", command_name(&cli.command)).expect("write to string");
    writeln!(text, "tool = ovseg {}", env!("CARGO_PKG_VERSION")).expect("write to string");
    writeln!(text, "container = LGSE v{}", lgse::VERSION).expect("write to string");
    writeln!(text, "precision = {}", cli.precision.name()).expect("write to string");
    text.push_str(&cfg.print());
    fs::write(out.join("manifest.txt"), text)?;
    Ok(())
}

fn require_out<'a>(cli: &'a Cli, what: &str) -> Result<&'a Path> {
    cli.out.as_deref().ok_or_else(|| Error::arg(format!("{what} requires --out DIR")))
}

/// Training and gradient checking compare against f64 references, so the
/// reduced-precision mode is rejected up front rather than failing tolerance
/// gates later.
fn require_f64(cli: &Cli, what: &str) -> Result<()> {
    if cli.precision == PrecisionArg::F32 {
        return Err(Error::arg(format!("{what} runs in f64 only; drop --precision f32")));
    }
    Ok(())
}

/// Scene recipe for generated datasets: a vocabulary-sized cast of shapes
/// scaled to the configured image.
fn scene_recipe(cfg: &Config, categories: usize) -> Result<SceneConfig> {
    if !(2..=16).contains(&categories) {
        return Err(Error::arg(format!("categories must be in 2..=16, got {categories}")));
    }
    let shapes_max = (categories - 1).min(5);
    Ok(SceneConfig {
        image_size: cfg.image_size,
        shapes_min: shapes_max.min(2),
        shapes_max,
        shape_size: (cfg.image_size / 4).clamp(3, 16),
        min_gap: 1,
        vocab: default_vocab(categories),
    })
}

fn generate_scenes(cfg: &Config, categories: usize, count: usize, tag: &str) -> Result<Vec<Scene>> {
    let recipe = scene_recipe(cfg, categories)?;
    (0..count).map(|i| gen_scene(&recipe, cfg.seed, &format!("{tag}-{i}"))).collect()
}

fn load_params(cfg: &Config, checkpoint: Option<&Path>) -> Result<ModelParams> {
    let template = ModelParams::init(cfg);
    match checkpoint {
        Some(path) => Ok(load_checkpoint(path, &template)?.0),
        None => Ok(template),
    }
}

/// Reads a pixmap image, accepting both the binary (P6) and plain-text (P3)
/// encodings.
fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P3") {
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| Error::Parse { what: "pixmap", detail: format!("not UTF-8: {e}") })?;
        pixmap::parse_ppm(text)
    } else {
        read_ppm(path)
    }
}

fn cmd_gen_data(cfg: &Config, out: &Path, count: usize, categories: usize, tag: &str) -> Result<()> {
    let scenes = generate_scenes(cfg, categories, count, tag)?;
    save_dataset(out, &scenes, &default_vocab(categories))?;
    println!("wrote {count} scenes of {}x{} pixels to {}", cfg.image_size, cfg.image_size, out.display());
    Ok(())
}

fn cmd_train(cfg: &Config, out: &Path, scenes: usize, categories: usize) -> Result<()> {
    let data = generate_scenes(cfg, categories, scenes, "train")?;
    let outcome = train(cfg, &data, Some(out), |_, _| {})?;
    let mut loss_text = String::new();
    for (step, loss) in outcome.losses.iter().enumerate() {
        writeln!(loss_text, "{step} {loss}").expect("write to string");
    }
    fs::write(out.join("loss.txt"), loss_text)?;
    if let Some(last) = outcome.losses.last() {
        println!("final_loss = {last}");
    }
    println!("trained {} steps on {scenes} scenes", outcome.losses.len());
    Ok(())
}

fn cmd_eval(
    cfg: &Config,
    out: Option<&Path>,
    checkpoint: Option<&Path>,
    scenes: usize,
    categories: usize,
    precision: Precision,
) -> Result<()> {
    let data = generate_scenes(cfg, categories, scenes, "eval")?;
    let params = load_params(cfg, checkpoint)?;
    let report = evaluate(cfg, &params, &data, precision)?;
    let mut text = String::new();
    writeln!(text, "mean_iou = {}", report.mean_iou).expect("write to string");
    writeln!(text, "distractor_fp = {}", report.distractor_fp).expect("write to string");
    for (i, iou) in report.per_scene_iou.iter().enumerate() {
        writeln!(text, "scene_{i}_iou = {iou}").expect("write to string");
    }
    print!("{text}");
    if let Some(out) = out {
        fs::write(out.join("metrics.txt"), text)?;
    }
    Ok(())
}

fn cmd_infer(
    cfg: &Config,
    out: &Path,
    image: &Path,
    checkpoint: Option<&Path>,
    categories: usize,
    precision: Precision,
) -> Result<()> {
    if !(2..=16).contains(&categories) {
        return Err(Error::arg(format!("categories must be in 2..=16, got {categories}")));
    }
    let img = read_image(image)?;
    let params = load_params(cfg, checkpoint)?;
    let vocab = default_vocab(categories);
    let text = stub_encode_text(&cfg.encoder_config(), cfg.seed, &vocab, &cfg.templates)?;
    let logits = sliding_window_infer(cfg, &params, &img, &text, precision)?;
    lgse::save(&out.join("logits.lgse"), &[("logits".to_string(), logits.clone())])?;
    let labels = argmax_channels(&logits);
    fs::write(out.join("pred.labels.txt"), pixmap::render_labels(&labels, logits.shape()[2]))?;
    println!(
        "segmented {}x{} pixels over {categories} categories",
        logits.shape()[1],
        logits.shape()[2]
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &Config) -> Result<()> {
    let checks = module_gradchecks(cfg.seed)?;
    let mut failures = 0;
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{}: max relative error {:.3e} over {} coordinates [{verdict}]",
            c.name, c.max_rel_err, c.coords
        );
        failures += usize::from(!c.passed);
    }
    if failures > 0 {
        return Err(Error::arg(format!("{failures} gradient check(s) failed")));
    }
    Ok(())
}

fn cmd_dump_heatmaps(
    cfg: &Config,
    out: &Path,
    image: &Path,
    checkpoint: Option<&Path>,
    categories: usize,
    cell: usize,
    precision: Precision,
) -> Result<()> {
    if !(2..=16).contains(&categories) {
        return Err(Error::arg(format!("categories must be in 2..=16, got {categories}")));
    }
    if !cfg.flags.use_region_alignment {
        return Err(Error::arg(
            "dump-heatmaps needs regional alignment enabled (use_region_alignment = true)",
        ));
    }
    let img = read_image(image)?;
    let params = load_params(cfg, checkpoint)?;
    let vocab = default_vocab(categories);
    let enc = stub_encode_image(&cfg.encoder_config(), cfg.seed, &img)?;
    let text = stub_encode_text(&cfg.encoder_config(), cfg.seed, &vocab, &cfg.templates)?;
    let (g, pass) = forward(cfg, &params, &enc, &text, precision)?;
    let trace = pass.capture(&g);
    let alignment = trace.alignment.expect("regional alignment is enabled");
    let attention = trace.attention.expect("regional alignment is enabled");
    let paths = dump_heatmaps(out, &vocab, &alignment, &attention, cfg.region_side, cell)?;
    println!("wrote {} heatmap files to {}", paths.len(), out.display());
    Ok(())
}
