//! `lapcomplete`: dataset generation, training, evaluation, completion,
//! least-squares deformation and gradient checks.
//!
//! Any run-config field can be set with `--<field> <value>`, either by its
//! dotted path (`--train.epochs 5`) or by a field name that is unique in the
//! config (`--epochs 5`). Dashes and underscores are interchangeable.

mod commands;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use lapcomplete::config::{RunConfig, SEED_ENV};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "lapcomplete", version, about = "Graph-guided deformation for point-cloud completion")]
struct Cli {
    /// TOML run config; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset into `paths.data_dir`.
    GenData,
    /// Train on `paths.data_dir`, writing the log and checkpoints to `paths.run_dir`.
    Train,
    /// Per-class Chamfer table for a checkpoint on `eval.split`.
    Eval {
        /// Defaults to `<run_dir>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Complete one XYZ cloud.
    Complete {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write `<output>.intermediate.xyz` (P_s) and `<output>.mask.txt`.
        #[arg(long)]
        emit_intermediate: bool,
    },
    /// Least-squares Laplacian deformation of a cloud towards control targets.
    DeformLsq {
        #[arg(long)]
        input: PathBuf,
        /// Lines of `index x y z`.
        #[arg(long)]
        controls: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 1e3)]
        control_weight: f64,
    },
    /// Finite-difference check of every loss and network block.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

/// Splits `--field value` config overrides from the arguments clap should see.
fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), CliError> {
    let fields = RunConfig::default().field_paths();
    let is_field = |name: &str| {
        fields
            .iter()
            .any(|f| f == name || f.ends_with(&format!(".{name}")))
    };
    let mut command = Cli::command();
    command.build();
    let sub = args
        .iter()
        .skip(1)
        .filter_map(|a| a.to_str())
        .find_map(|a| command.find_subcommand(a).cloned());
    let own_flags: Vec<String> = sub
        .iter()
        .flat_map(|s| s.get_arguments())
        .chain(command.get_arguments())
        .filter_map(|a| a.get_long())
        .map(|l| l.replace('-', "_"))
        .collect();

    let mut kept = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter();
    while let Some(arg) = iter.next() {
        let Some(text) = arg.to_str().and_then(|s| s.strip_prefix("--")).map(str::to_owned) else {
            kept.push(arg);
            continue;
        };
        let (name, inline) = match text.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (text.clone(), None),
        };
        let name = name.replace('-', "_");
        if own_flags.contains(&name) || !is_field(&name) {
            kept.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => iter
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((kept, overrides))
}

/// File, then `LAPCOMPLETE_SEED`, then command-line overrides.
fn resolve_config(path: Option<&PathBuf>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(raw) = std::env::var(SEED_ENV) {
        config.seed = raw
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")))?;
    }
    for (name, value) in overrides {
        config.apply_override(name, value)?;
    }
    config.validate()?;
    Ok(config)
}

fn run() -> Result<(), CliError> {
    let (args, overrides) = split_overrides(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            return Err(CliError::Usage(text.strip_prefix("error: ").unwrap_or(&text).to_string()));
        }
    };
    let config = resolve_config(cli.config.as_ref(), &overrides)?;
    match cli.command {
        Command::GenData => commands::gen_data(&config),
        Command::Train => commands::train(&config),
        Command::Eval { checkpoint } => commands::eval(&config, checkpoint),
        Command::Complete {
            checkpoint,
            input,
            output,
            emit_intermediate,
        } => commands::complete(&config, checkpoint, &input, &output, emit_intermediate),
        Command::DeformLsq {
            input,
            controls,
            output,
            control_weight,
        } => commands::deform_lsq(&config, &input, &controls, &output, control_weight),
        Command::Gradcheck { tolerance } => commands::gradcheck(&config, tolerance),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().trim_end());
            ExitCode::from(e.code())
        }
    }
}
