use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use i2i_core::data::{generate_dataset, Dataset, RenderMode, RenderSettings, ShapeClass, DEFAULT_SAMPLES};
use i2i_core::harness::ablate::{ablate, splits, views_per_instance, AblationGrid};
use i2i_core::harness::checkpoint;
use i2i_core::harness::eval::{csv_row, evaluate, EvalShift, CSV_HEADER};
use i2i_core::harness::train::train;
use i2i_core::harness::verify::verify;
use i2i_core::harness::{RunConfig, Variant};
use i2i_core::icogroup::{build_group, IcoGroup};
use i2i_core::rotations::SymmetrySpec;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

const CONFIG_FILE: &str = "config.txt";
const LOG_FILE: &str = "train.log";
const RESULTS_FILE: &str = "results.csv";
const EVAL_FILE: &str = "eval.csv";

#[derive(Parser)]
#[command(name = "i2i", version, about = "Icosahedral orientation prediction: data, training, evaluation, checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset.
    GenData(GenData),
    /// Train on the training split and write a checkpoint.
    Train(RunArgs),
    /// Evaluate a checkpoint and print one CSV row.
    Eval(EvalArgs),
    /// Run the variant grid and shift sweeps, writing results.csv.
    Ablate(AblateArgs),
    /// Run every invariant check; exits 2 on any failure.
    Verify,
}

/// Run settings shared by train, eval and ablate. Flags override the
/// config file, which overrides the built-in defaults.
#[derive(Args, Clone, Default)]
struct Common {
    /// Plain-text `key = value` file (see the README for the key list).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the 32x32 experiment preset (lr 0.1, gradient clip 1,
    /// two warmup epochs).
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    shift_px: Option<usize>,
    #[arg(long)]
    shift_depth: Option<f64>,
    /// Worker threads, 0 = all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
    /// Any other config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which part of the dataset to score: test, train or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Comma-separated variants; defaults to every pose variant.
    #[arg(long)]
    variants: Option<String>,
    /// Comma-separated view counts.
    #[arg(long = "view-grid", default_value = "60,15")]
    view_grid: String,
    /// Skip the pixel and depth shift sweeps.
    #[arg(long)]
    no_sweeps: bool,
}

#[derive(Args)]
struct GenData {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated shape classes (l-bracket, hammer, chair, slab).
    #[arg(long, default_value = "l-bracket")]
    classes: String,
    /// Instances per class.
    #[arg(long, default_value_t = 125)]
    instances: usize,
    /// Views per instance.
    #[arg(long, default_value_t = 60)]
    views: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// depth or grayscale.
    #[arg(long, default_value = "depth")]
    mode: String,
    /// none, cyclic-z:N or continuous-z.
    #[arg(long, default_value = "none")]
    symmetry: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Surface samples per shape.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    render_samples: usize,
    #[arg(long)]
    threads: Option<usize>,
}

/// Error carrying the process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<i2i_core::Error>() {
            Some(i2i_core::Error::Config(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, error }
    }
}

impl From<i2i_core::Error> for Failure {
    fn from(error: i2i_core::Error) -> Self {
        anyhow::Error::new(error).into()
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome<ExitCode> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Ablate(a) => ablate_cmd(a)?,
        Command::Verify => {
            let report = verify();
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_VERIFY));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn set_threads(threads: usize) -> Outcome<()> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Outcome<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Failure::usage(anyhow::anyhow!("{what} '{s}': {e}"))))
        .collect()
}

fn group() -> Outcome<Arc<IcoGroup>> {
    Ok(Arc::new(build_group().context("building the icosahedral group")?))
}

/// Defaults, then `base` (a saved config), then the config file, then flags.
fn resolve(common: &Common, base: Option<RunConfig>) -> Outcome<RunConfig> {
    let mut cfg = base.unwrap_or_else(|| if common.desk { RunConfig::desk() } else { RunConfig::default() });
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| Failure::usage(anyhow::anyhow!("{}: {e}", path.display())))?;
    }
    let mut pairs: Vec<(&str, String)> = Vec::new();
    // task goes first so that an explicit --epochs is not reset by it
    if let Some(v) = &common.task {
        pairs.push(("task", v.clone()));
    }
    if let Some(v) = &common.dataset {
        pairs.push(("dataset", v.display().to_string()));
    }
    if let Some(v) = common.seed {
        pairs.push(("seed", v.to_string()));
    }
    if let Some(v) = &common.out {
        pairs.push(("out", v.display().to_string()));
    }
    if let Some(v) = &common.variant {
        pairs.push(("variant", v.clone()));
    }
    if let Some(v) = common.views {
        pairs.push(("views", v.to_string()));
    }
    if let Some(v) = common.epochs {
        pairs.push(("epochs", v.to_string()));
    }
    if let Some(v) = common.lambda {
        pairs.push(("lambda", v.to_string()));
    }
    if let Some(v) = common.sigma {
        pairs.push(("sigma", v.to_string()));
    }
    if let Some(v) = common.shift_px {
        pairs.push(("shift_px", v.to_string()));
    }
    if let Some(v) = common.shift_depth {
        pairs.push(("shift_depth", v.to_string()));
    }
    if let Some(v) = common.threads {
        pairs.push(("threads", v.to_string()));
    }
    if let Some(v) = &common.precision {
        pairs.push(("precision", v.clone()));
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(anyhow::anyhow!("--set expects key=value, got '{kv}'")))?;
        pairs.push((k, v.to_string()));
    }
    for (k, v) in pairs {
        cfg.set(k, &v).map_err(Failure::usage)?;
    }
    cfg.validate().map_err(Failure::usage)?;
    set_threads(cfg.threads)?;
    Ok(cfg)
}

fn load_dataset(cfg: &RunConfig) -> Outcome<Dataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Failure::usage(anyhow::anyhow!("no dataset given (--dataset or `dataset =` in the config)")))?;
    Ok(Dataset::load(path)?)
}

fn create_dir(dir: &Path) -> Outcome<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn gen_data(a: GenData) -> Outcome<()> {
    set_threads(a.threads.unwrap_or(0))?;
    let classes: Vec<ShapeClass> = parse_list("class", &a.classes)?;
    let mode: RenderMode = a.mode.parse().map_err(Failure::usage)?;
    let sym: SymmetrySpec = a.symmetry.parse().map_err(Failure::usage)?;
    let settings = RenderSettings {
        height: a.size,
        width: a.size,
        mode,
        samples: a.render_samples,
    };
    let g = group()?;
    let data = generate_dataset(&classes, a.instances, a.views, a.seed, sym, settings, &g)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    data.save(&a.out)?;
    println!(
        "wrote {} samples ({} classes x {} instances x {} views, {}x{}) to {}",
        data.samples.len(),
        classes.len(),
        a.instances,
        a.views,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: RunArgs) -> Outcome<()> {
    let cfg = resolve(&a.common, None)?;
    let data = load_dataset(&cfg)?;
    let (train_set, _) = splits(&cfg, &data);
    create_dir(&cfg.out)?;
    let log = cfg.out.join(LOG_FILE);
    let report = train(&cfg, &train_set, group()?, Some(&log))?;
    checkpoint::save(&report.model, &cfg.out)?;
    let config_path = cfg.out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_text()).with_context(|| format!("writing {}", config_path.display()))?;
    println!(
        "trained {} on {} samples, final loss {:.6}; checkpoint in {}",
        cfg.variant,
        train_set.samples.len(),
        report.final_loss(),
        cfg.out.display()
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome<()> {
    // the run's own config supplies the split seed and symmetry unless overridden
    let saved = a.checkpoint.join(CONFIG_FILE);
    let base = if saved.exists() {
        Some(RunConfig::from_file(&saved)?)
    } else {
        None
    };
    let mut common = a.common.clone();
    if common.out.is_none() {
        common.out = Some(a.checkpoint.clone());
    }
    let cfg = resolve(&common, base)?;
    let data = load_dataset(&cfg)?;
    let (train_set, test_set) = splits(&cfg, &data);
    let subset = match a.split.as_str() {
        "test" => test_set,
        "train" => train_set,
        "all" => data,
        other => return Err(Failure::usage(anyhow::anyhow!("unknown split '{other}' (expected test, train or all)"))),
    };
    let model = checkpoint::load(&a.checkpoint, group()?)?;
    let shift = EvalShift {
        px: cfg.eval_shift_px,
        depth: cfg.eval_shift_depth,
        seed: cfg.seed,
    };
    let metrics = evaluate(&model, &subset, cfg.symmetry, shift, cfg.precision)?;
    let views = if cfg.views > 0 { cfg.views } else { views_per_instance(&subset) };
    let row = csv_row(&model.spec.variant.to_string(), model.spec.task, views, cfg.seed, &metrics);
    println!("{CSV_HEADER}");
    println!("{row}");
    create_dir(&cfg.out)?;
    let path = cfg.out.join(EVAL_FILE);
    fs::write(&path, format!("{CSV_HEADER}\n{row}\n")).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> Outcome<()> {
    let cfg = resolve(&a.common, None)?;
    let data = load_dataset(&cfg)?;
    let mut grid = AblationGrid::standard(data.width);
    if let Some(v) = &a.variants {
        grid.variants = parse_list::<Variant>("variant", v)?;
    }
    grid.views = parse_list("view count", &a.view_grid)?;
    grid.seeds = parse_list("seed", &a.seeds)?;
    if a.no_sweeps {
        grid.shift_px.clear();
        grid.shift_depth.clear();
    }
    create_dir(&cfg.out)?;
    let path = cfg.out.join(RESULTS_FILE);
    let mut file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "{CSV_HEADER}").context("writing results")?;
    println!("{CSV_HEADER}");
    let mut write_error = None;
    let g = group()?;
    ablate(&cfg, &grid, &data, g, |row| {
        println!("{}", row.csv());
        if let Some(e) = &row.error {
            eprintln!("{}: {e}", row.label);
        }
        if write_error.is_none() {
            if let Err(e) = writeln!(file, "{}", row.csv()).and_then(|_| file.flush()) {
                write_error = Some(e);
            }
        }
    });
    if let Some(e) = write_error {
        return Err(anyhow::Error::new(e).context(format!("writing {}", path.display())).into());
    }
    Ok(())
}
