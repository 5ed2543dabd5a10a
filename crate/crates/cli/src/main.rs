//! `pvp`: pre-train parameter-efficient modules on a source task, load them
//! for few-shot tuning, and compare against scratch initialisation.

mod commands;
mod config;
mod error;
mod inspect;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pvp_core::gradcheck::{self, GradcheckConfig};
use pvp_core::{LoadType, OpKind};
use serde_json::Value;

use crate::commands::{absolutize, digest_inputs, execute};
use crate::config::{load_file, parse_assignment, resolve, Setting};
use crate::error::CliError;
use crate::manifest::{Invocation, Manifest, Split, MANIFEST_FILE};

const BENCH_REPORT_SCHEMA: &str = include_str!("../schemas/bench_report.schema.json");
const MANIFEST_SCHEMA: &str = include_str!("../schemas/manifest.schema.json");

#[derive(Parser)]
#[command(
    name = "pvp",
    version,
    about = "Pre-trained parameter-efficient tuning experiments"
)]
struct Cli {
    /// Worker threads (default: PVP_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, short, default_value = "pvp-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: train modules on the source task and write a bank.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// vpt_deep, vpt_shallow, adapter or lora.
        #[arg(long)]
        method: Option<String>,
        /// Bank size N for prompt methods.
        #[arg(long)]
        tokens: Option<usize>,
    },
    /// Stage 2: few-shot tuning, from a bank or from scratch.
    Tune {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        method: Option<String>,
        /// Stage-1 bank; omit for the scratch baseline.
        #[arg(long, conflicts_with = "scratch")]
        checkpoint: Option<PathBuf>,
        /// Ignore any configured checkpoint.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        load: Option<LoadType>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate modules written by `tune` on the target task.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        modules: PathBuf,
        /// Whole target set instead of the episode's held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        shots: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scratch-vs-pre-trained comparison with pass/fail checks.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Directory of `<method>.pvpc` banks; skips stage 1.
        #[arg(long)]
        banks: Option<PathBuf>,
        /// Exit with status 3 if any check fails.
        #[arg(long)]
        assert: bool,
    },
    /// Summarise a PVPC or PVPD file.
    Inspect {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference checks of every operation and model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long)]
        json: bool,
        /// Test hook: negate one operation's backward pass.
        #[arg(long, hide = true)]
        inject_sign_flip: Option<String>,
    },
    /// Dataset conversion.
    #[command(subcommand)]
    Data(DataCommand),
    /// Rerun a manifest and compare output digests.
    Replay {
        manifest: PathBuf,
        /// Default: `replay/` next to the manifest.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print a bundled JSON schema.
    Schema {
        #[arg(value_parser = ["bench-report", "manifest"])]
        name: String,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a generated task as PVPD.
    Generate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        split: Split,
    },
    /// CSV (`label,class_id,px0,...`) to PVPD.
    Import {
        #[command(flatten)]
        run: RunArgs,
        csv: PathBuf,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
    /// PVPD to CSV.
    Export {
        #[command(flatten)]
        run: RunArgs,
        dataset: PathBuf,
    },
}

fn flag(key: &str, value: impl Into<Value>) -> Setting {
    Setting {
        key: key.into(),
        value: value.into(),
        origin: format!("flag for `{key}`"),
    }
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn settings(run: &RunArgs, flags: Vec<Setting>) -> Result<Vec<Setting>, CliError> {
    let mut out = match &run.config {
        Some(path) => load_file(path)?,
        None => Vec::new(),
    };
    for s in &run.set {
        out.push(parse_assignment(s, &format!("--set {s}"))?);
    }
    out.extend(flags);
    Ok(out)
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("PVP_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| CliError::usage(format!("PVP_THREADS=`{v}` is not a number")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::usage("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}

fn run_invocation(
    mut inv: Invocation,
    settings: Vec<Setting>,
    out: &Path,
    assert: bool,
) -> Result<(), CliError> {
    let mut cfg = resolve(&settings)?;
    absolutize(&mut inv, &mut cfg)?;
    let done = execute(&inv, &cfg, out)?;
    for line in &done.summary {
        println!("{line}");
    }
    println!("wrote {}", out.join(MANIFEST_FILE).display());
    if assert && !done.failed_checks.is_empty() {
        return Err(CliError::numerical(format!(
            "benchmark checks failed: {}",
            done.failed_checks.join(", ")
        )));
    }
    Ok(())
}

fn gradcheck_cmd(
    seed: u64,
    seeds: usize,
    json: bool,
    flip: Option<String>,
) -> Result<(), CliError> {
    let sign_flip = flip
        .map(|name| {
            OpKind::from_name(&name)
                .ok_or_else(|| CliError::usage(format!("unknown operation `{name}`")))
        })
        .transpose()?;
    if seeds == 0 {
        return Err(CliError::usage("--seeds must be positive"));
    }
    let cfg = GradcheckConfig {
        seed,
        seeds,
        sign_flip,
        ..GradcheckConfig::default()
    };
    let report = gradcheck::run(&cfg)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("serializable")
        );
    } else {
        for c in &report.cases {
            println!(
                "[{}] {:<18} {:>6} coords over {:>3} seeds  max rel err {:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.checked,
                c.seeds,
                c.max_rel_error
            );
        }
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::numerical(format!(
            "gradient check failed for {} (tolerance {:e})",
            failed.join(", "),
            cfg.tolerance
        )))
    }
}

fn replay(path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let recorded = Manifest::load(path)?;
    let out = out.unwrap_or_else(|| {
        path.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .join("replay")
    });
    if let (Ok(a), Ok(b)) = (
        out.canonicalize(),
        path.parent().unwrap_or(Path::new(".")).canonicalize(),
    ) {
        if a == b {
            return Err(CliError::usage(
                "replay would overwrite the recorded outputs; choose another --out",
            ));
        }
    }
    if recorded.version != env!("CARGO_PKG_VERSION") {
        eprintln!(
            "pvp: manifest was written by version {}, this is {}",
            recorded.version,
            env!("CARGO_PKG_VERSION")
        );
    }
    let inputs = digest_inputs(&recorded.invocation, &recorded.config)?;
    if inputs != recorded.inputs {
        return Err(CliError::data(
            "input files changed since the manifest was written",
        ));
    }
    let done = execute(&recorded.invocation, &recorded.config, &out)?;
    let mut differ = Vec::new();
    for f in &recorded.outputs {
        let now = done.manifest.outputs.iter().find(|g| g.path == f.path);
        let same = now.is_some_and(|g| g.sha256 == f.sha256);
        println!(
            "{} {}",
            if same { "identical" } else { "DIFFERS  " },
            f.path.display()
        );
        if !same {
            differ.push(f.path.display().to_string());
        }
    }
    if done.manifest.outputs.len() != recorded.outputs.len() {
        differ.push("output file set".into());
    }
    if differ.is_empty() {
        println!(
            "replayed `{}` into {}: all outputs identical",
            recorded.invocation.name(),
            out.display()
        );
        Ok(())
    } else {
        Err(CliError::numerical(format!(
            "replay differs: {}",
            differ.join(", ")
        )))
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Pretrain {
            run,
            method,
            tokens,
        } => {
            let mut flags = Vec::new();
            if let Some(m) = method {
                flags.push(flag("pet.method", m));
            }
            if let Some(n) = tokens {
                flags.push(flag("pet.prompt_tokens", n));
            }
            let s = settings(&run, flags)?;
            run_invocation(Invocation::Pretrain, s, &run.out, false)
        }
        Command::Tune {
            run,
            method,
            checkpoint,
            scratch,
            shots,
            load,
            k,
            seed,
        } => {
            let mut flags = Vec::new();
            if let Some(m) = method {
                flags.push(flag("pet.method", m));
            }
            if let Some(p) = checkpoint {
                flags.push(flag("tune.checkpoint", path_value(&p)));
            }
            if scratch {
                flags.push(flag("tune.checkpoint", Value::Null));
            }
            if let Some(n) = shots {
                flags.push(flag("tune.shots", n));
            }
            if let Some(l) = load {
                flags.push(flag("tune.load", l.as_str()));
            }
            if let Some(n) = k {
                flags.push(flag("tune.k", n));
            }
            if let Some(n) = seed {
                flags.push(flag("tune.seed", n));
            }
            let s = settings(&run, flags)?;
            run_invocation(Invocation::Tune, s, &run.out, false)
        }
        Command::Eval {
            run,
            modules,
            all,
            shots,
            seed,
        } => {
            let mut flags = Vec::new();
            if let Some(n) = shots {
                flags.push(flag("tune.shots", n));
            }
            if let Some(n) = seed {
                flags.push(flag("tune.seed", n));
            }
            let s = settings(&run, flags)?;
            run_invocation(Invocation::Eval { modules, all }, s, &run.out, false)
        }
        Command::Bench { run, banks, assert } => {
            let s = settings(&run, Vec::new())?;
            run_invocation(Invocation::Bench { banks }, s, &run.out, assert)
        }
        Command::Inspect { path, json } => {
            let summary = inspect::summarize(&path)?;
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&summary).expect("serializable")
                );
            } else {
                println!("{}", inspect::render(&summary));
            }
            Ok(())
        }
        Command::Gradcheck {
            seed,
            seeds,
            json,
            inject_sign_flip,
        } => gradcheck_cmd(seed, seeds, json, inject_sign_flip),
        Command::Data(DataCommand::Generate { run, split }) => {
            let s = settings(&run, Vec::new())?;
            run_invocation(Invocation::DataGenerate { split }, s, &run.out, false)
        }
        Command::Data(DataCommand::Import { run, csv, channels }) => {
            let s = settings(&run, Vec::new())?;
            run_invocation(Invocation::DataImport { csv, channels }, s, &run.out, false)
        }
        Command::Data(DataCommand::Export { run, dataset }) => {
            let s = settings(&run, Vec::new())?;
            run_invocation(Invocation::DataExport { dataset }, s, &run.out, false)
        }
        Command::Replay { manifest, out } => replay(&manifest, out),
        Command::Schema { name } => {
            match name.as_str() {
                "bench-report" => print!("{BENCH_REPORT_SCHEMA}"),
                _ => print!("{MANIFEST_SCHEMA}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::Exit::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pvp: error: {e}");
            ExitCode::from(e.exit as u8)
        }
    }
}
