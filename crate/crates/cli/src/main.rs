use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use t1joint::io::{
    export_t1_png, load_fit_config, load_maps, load_masks, load_phantom, load_phantom_config, load_series,
    load_solution, save_json, save_phantom, save_solution, FitReport,
};
use t1joint::metrics::{evaluate, EvalOptions};
use t1joint::optimizer::uncorrected_solution;
use t1joint::{generate_phantom, joint_fit, Error, ErrorCategory, FitConfig};

const DIAGNOSTIC_SCHEMA_VERSION: u32 = 1;
const THREADS_ENV: &str = "T1JOINT_THREADS";

/// Joint motion correction and T1 mapping for inversion-recovery series.
#[derive(Parser)]
#[command(name = "t1joint", version)]
struct Cli {
    /// Worker threads (overrides T1JOINT_THREADS; default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic phantom scene into a directory.
    Phantom {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Phantom settings (TOML key = value).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        set: Overrides,
    },
    /// Joint registration and T1 fit.
    Fit(FitArgs),
    /// Plain per-voxel T1 fit without motion correction.
    FitUncorrected(FitArgs),
    /// Score a fitted solution against myocardium masks.
    Eval {
        #[arg(long)]
        solution: PathBuf,
        /// Mask manifest, one mask per frame.
        #[arg(long)]
        masks: PathBuf,
        /// Phantom directory with ground-truth maps.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also report R² pooled over all myocardial samples.
        #[arg(long)]
        pooled_r2: bool,
        /// Report this Hausdorff percentile instead of the maximum.
        #[arg(long)]
        hausdorff_percentile: Option<f64>,
    },
    /// Render a T1 map as a color PNG.
    Export {
        #[arg(long)]
        maps: PathBuf,
        #[arg(long)]
        png: PathBuf,
        /// Display range in ms, `min,max`.
        #[arg(long, value_parser = parse_range, default_value = "400,2000")]
        range: (f64, f64),
    },
}

#[derive(Args)]
struct FitArgs {
    /// Series manifest.
    #[arg(long = "in")]
    input: PathBuf,
    /// Fit settings (TOML key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Mask manifest enabling the segmentation term.
    #[arg(long)]
    masks: Option<PathBuf>,
    #[command(flatten)]
    set: Overrides,
}

#[derive(Args)]
struct Overrides {
    /// Override a config entry, `key=value`; repeatable.
    #[arg(long = "set", value_parser = parse_override)]
    entries: Vec<(String, String)>,
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or("expected key=value")?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected min,max")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Validation => 3,
        ErrorCategory::Numerical => 4,
        ErrorCategory::Config => 5,
        ErrorCategory::Io => 6,
        ErrorCategory::Format => 7,
    }
}

fn category_name(category: ErrorCategory) -> &'static str {
    match category {
        ErrorCategory::Validation => "validation",
        ErrorCategory::Numerical => "numerical",
        ErrorCategory::Config => "config",
        ErrorCategory::Io => "io",
        ErrorCategory::Format => "format",
    }
}

fn diagnostic(category: &str, code: u8, message: &str) -> String {
    serde_json::json!({
        "schema_version": DIAGNOSTIC_SCHEMA_VERSION,
        "category": category,
        "exit_code": code,
        "message": message,
    })
    .to_string()
}

fn config_path(p: &Option<PathBuf>) -> &Path {
    p.as_deref().unwrap_or(Path::new(""))
}

fn fit(args: &FitArgs, joint: bool) -> t1joint::Result<()> {
    let config: FitConfig = load_fit_config(config_path(&args.config), &args.set.entries)?;
    let series = load_series(&args.input)?;
    let masks = args.masks.as_deref().map(load_masks).transpose()?;
    let solution = if joint {
        joint_fit(&series, &config, masks.as_ref())?
    } else {
        uncorrected_solution(&series, &config)?
    };
    let report = FitReport::new(if joint { "joint" } else { "uncorrected" }, &solution, &config);
    save_solution(&solution, &report, &args.out)
}

fn run(command: Command) -> t1joint::Result<()> {
    match command {
        Command::Phantom { seed, out, config, set } => {
            let pc = load_phantom_config(config_path(&config), &set.entries)?;
            save_phantom(&generate_phantom(&pc, seed)?, &out)
        }
        Command::Fit(args) => fit(&args, true),
        Command::FitUncorrected(args) => fit(&args, false),
        Command::Eval {
            solution,
            masks,
            truth,
            out,
            pooled_r2,
            hausdorff_percentile,
        } => {
            let solution = load_solution(&solution)?;
            let masks = load_masks(&masks)?;
            let truth = truth.as_deref().map(load_phantom).transpose()?;
            let options = EvalOptions {
                pooled_r2,
                hausdorff_percentile,
            };
            save_json(&evaluate(&solution, &masks, truth.as_ref(), options)?, &out)
        }
        Command::Export { maps, png, range } => export_t1_png(&load_maps(&maps)?, range, &png),
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got {v:?}")),
        Err(_) => Ok(None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version.
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", diagnostic("usage", 2, e.kind().as_str().unwrap_or("invalid usage")));
            eprint!("{}", e.render());
            return ExitCode::from(2);
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(Some(0)) => Err("thread count must be positive".to_string()),
        other => other,
    };
    let threads = match threads {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("{}", diagnostic("usage", 2, &msg));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", diagnostic("config", 5, &e.to_string()));
            return ExitCode::from(5);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    let code = exit_code(e.category());
    eprintln!("{}", diagnostic(category_name(e.category()), code, &e.to_string()));
    ExitCode::from(code)
}
