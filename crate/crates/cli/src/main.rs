// SPDX-License-Identifier: Apache-2.0

//! `snd`: command-line front end for the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use snd_core::harness::report::{to_csv, write_reports};
use snd_core::harness::scenarios::run_scenario;
use snd_core::harness::{ExperimentConfig, World};
use snd_core::SndError;

#[derive(Parser)]
#[command(name = "snd", version, about = "Split-and-denoise private inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated eta list; `inf` disables noise.
    #[arg(long, global = true)]
    eta: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Sample count for mi, attack inversion and infer.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// CSV destination; a JSON summary is written beside it. Defaults to stdout.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Server address for serve and infer (falls back to SND_ENDPOINT).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the eta-partitioned denoisers and write the registry manifest.
    TrainDenoiser,
    /// Serve the encoder over TCP.
    Serve,
    /// Run split inference against a server.
    Infer,
    /// Run a privacy attack.
    Attack {
        #[arg(value_parser = ["inversion", "attribute"])]
        kind: String,
    },
    /// Estimate mutual information between privatized inputs and noise.
    Mi,
    /// Vocabulary geometry versus perturbation size.
    Geometry,
    /// Downstream sweep over eta, seed and method.
    Sweep,
    /// Run an ablation.
    Ablate {
        #[arg(value_parser = ["server-denoise", "clipping"])]
        kind: String,
    },
    /// Encoder update drill.
    UpdateDrill,
    /// Corpus rank similarity.
    Similarity,
}

impl Command {
    fn scenario(&self) -> String {
        match self {
            Command::TrainDenoiser => "train-denoiser".into(),
            Command::Serve => "serve".into(),
            Command::Infer => "infer".into(),
            Command::Attack { kind } => format!("attack-{kind}"),
            Command::Mi => "mi".into(),
            Command::Geometry => "geometry".into(),
            Command::Sweep => "sweep".into(),
            Command::Ablate { kind } => format!("ablate-{kind}"),
            Command::UpdateDrill => "update-drill".into(),
            Command::Similarity => "similarity".into(),
        }
    }
}

fn build_config(scenario: &str, c: &Common) -> Result<ExperimentConfig, SndError> {
    let mut cfg = ExperimentConfig {
        scenario: scenario.to_string(),
        ..ExperimentConfig::default()
    };
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SndError::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_str(&text)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| SndError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(v) = &c.eta {
        cfg.set("eta", v)?;
    }
    if let Some(v) = &c.seed {
        cfg.set("seed", v)?;
    }
    if let Some(n) = c.n {
        cfg.n = n;
    }
    if let Some(p) = &c.output {
        cfg.output = Some(p.clone());
    }
    if let Some(e) = &c.endpoint {
        cfg.endpoint = Some(e.clone());
    }
    if cfg.endpoint.is_none() {
        cfg.endpoint = std::env::var("SND_ENDPOINT").ok().filter(|s| !s.is_empty());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), SndError> {
    let scenario = cli.command.scenario();
    let cfg = build_config(&scenario, &cli.common)?;
    let world = World::build(&cfg)?;
    let rows = run_scenario(&scenario, &world)?;
    if matches!(cli.command, Command::Serve) {
        return Ok(());
    }
    match &cfg.output {
        Some(path) => write_reports(&rows, path),
        None => {
            print!("{}", to_csv(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("snd: {e}");
            match e {
                SndError::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
