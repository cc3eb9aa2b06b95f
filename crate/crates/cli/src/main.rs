//! `gencost`: system validation, simulation, dataset generation, posterior
//! training, inference, inverse optimization and diagnostics.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage or parse error.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{Overrides, RunConfig};
use manifest::{manifest_path, read_manifest, rebase, write_manifest, FileDigest, Manifest};

/// A malformed invocation, configuration or input file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "gencost", version, about = "Infer generation cost parameters from unit-commitment schedules")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// System file (overrides the config).
    #[arg(long, global = true)]
    system: Option<PathBuf>,
    /// Base seed of every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Where an observation comes from: a file written by `simulate`, or one
/// record of a dataset.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ObsArgs {
    /// Observation JSON written by `simulate`.
    #[arg(long, conflicts_with = "obs_dataset")]
    pub observation: Option<PathBuf>,
    /// Take the observation from this dataset file...
    #[arg(long)]
    pub obs_dataset: Option<PathBuf>,
    /// ...at this record index.
    #[arg(long, default_value_t = 0)]
    pub obs_index: usize,
}

impl ObsArgs {
    fn is_set(&self) -> bool {
        self.observation.is_some() || self.obs_dataset.is_some()
    }
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
pub enum Cmd {
    /// Check a system file; prints one violation per line.
    Validate {
        /// System file (defaults to --system or the config).
        path: Option<PathBuf>,
    },
    /// Simulate one market outcome.
    Simulate {
        /// Cost vector `c_1,..,c_J,s_1,..,s_J`; drawn from the prior if absent.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta: Option<Vec<f64>>,
        /// Switch off bidding noise and outages.
        #[arg(long)]
        noiseless: bool,
        #[arg(long, default_value = "observation.json")]
        output: PathBuf,
    },
    /// Simulate a training dataset.
    Dataset {
        /// Number of simulations (defaults to the config).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        /// Discard records that shed load.
        #[arg(long)]
        drop_shed: bool,
        #[arg(long, default_value = "dataset.gcds")]
        output: PathBuf,
    },
    /// Train the posterior network.
    Train {
        /// Dataset file (defaults to `<out>/dataset.gcds`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "model.gcnm")]
        output: PathBuf,
    },
    /// Sample the posterior for one observation and write corner data.
    Infer {
        /// Model file (defaults to `<out>/model.gcnm`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        obs: ObsArgs,
        /// Number of posterior draws (defaults to the config).
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        /// Inverse-optimization result to mark in the corner data.
        #[arg(long)]
        invopt: Option<PathBuf>,
        #[arg(long, default_value = "corner.csv")]
        output: PathBuf,
    },
    /// Point estimate by inverse optimization.
    Invopt {
        #[command(flatten)]
        obs: ObsArgs,
        #[arg(long, default_value = "invopt.json")]
        output: PathBuf,
    },
    /// Expected coverage of the posterior's HPD regions.
    Coverage {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset whose validation split provides test points.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Simulate fresh test points instead.
        #[arg(long)]
        fresh: bool,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n_test: Option<u64>,
        #[arg(long, default_value = "coverage.csv")]
        output: PathBuf,
    },
    /// Posterior predictive dispatch band for one observation.
    Ppc {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        obs: ObsArgs,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: Option<u64>,
        #[arg(long, default_value = "ppc.csv")]
        output: PathBuf,
    },
    /// Write the unit-commitment MILP in LP format.
    ExportLp {
        /// Costs (defaults to the observation's or the prior midpoint).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta: Option<Vec<f64>>,
        /// Demand source (defaults to the base demand).
        #[command(flatten)]
        obs: ObsArgs,
        #[arg(long, default_value = "uc.lp")]
        output: PathBuf,
    },
    /// Re-run a command from its manifest and compare output hashes.
    Replay { manifest: PathBuf },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Validate { .. } => "validate",
            Cmd::Simulate { .. } => "simulate",
            Cmd::Dataset { .. } => "dataset",
            Cmd::Train { .. } => "train",
            Cmd::Infer { .. } => "infer",
            Cmd::Invopt { .. } => "invopt",
            Cmd::Coverage { .. } => "coverage",
            Cmd::Ppc { .. } => "ppc",
            Cmd::ExportLp { .. } => "export-lp",
            Cmd::Replay { .. } => "replay",
        }
    }

    /// Applies `f` to every path the command reads or writes.
    fn map_paths(&mut self, f: &dyn Fn(&Path) -> PathBuf) {
        let opt = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                *x = f(x);
            }
        };
        let obs = |o: &mut ObsArgs| {
            opt(&mut o.observation);
            opt(&mut o.obs_dataset);
        };
        match self {
            Cmd::Validate { path } => opt(path),
            Cmd::Simulate { output, .. } | Cmd::Dataset { output, .. } => *output = f(output),
            Cmd::Train { dataset, output } => {
                opt(dataset);
                *output = f(output);
            }
            Cmd::Infer { model, obs: o, invopt, output, .. } => {
                opt(model);
                obs(o);
                opt(invopt);
                *output = f(output);
            }
            Cmd::Invopt { obs: o, output } | Cmd::ExportLp { obs: o, output, .. } => {
                obs(o);
                *output = f(output);
            }
            Cmd::Coverage { model, dataset, output, .. } => {
                opt(model);
                opt(dataset);
                *output = f(output);
            }
            Cmd::Ppc { model, obs: o, output, .. } => {
                opt(model);
                obs(o);
                *output = f(output);
            }
            Cmd::Replay { manifest } => *manifest = f(manifest),
        }
    }

    /// Fills every default from `cfg` and makes paths absolute, so the
    /// result runs identically from any working directory.
    fn resolve(mut self, cfg: &RunConfig) -> Self {
        let out = &cfg.out;
        let in_out = |p: &mut Option<PathBuf>, name: &str| {
            p.get_or_insert_with(|| out.join(name));
        };
        match &mut self {
            Cmd::Validate { path } => {
                if path.is_none() {
                    *path = cfg.system.clone();
                }
            }
            Cmd::Simulate { .. } | Cmd::Invopt { .. } | Cmd::ExportLp { .. } | Cmd::Replay { .. } => {}
            Cmd::Dataset { n, drop_shed, .. } => {
                n.get_or_insert(cfg.dataset.n as u64);
                *drop_shed |= cfg.dataset.drop_shed;
            }
            Cmd::Train { dataset, .. } => in_out(dataset, "dataset.gcds"),
            Cmd::Infer { model, n, .. } => {
                in_out(model, "model.gcnm");
                n.get_or_insert(cfg.diagnostics.n_corner as u64);
            }
            Cmd::Coverage { model, dataset, fresh, n_test, .. } => {
                in_out(model, "model.gcnm");
                *fresh |= !cfg.diagnostics.reuse_validation;
                if !*fresh {
                    in_out(dataset, "dataset.gcds");
                }
                n_test.get_or_insert(cfg.diagnostics.n_test as u64);
            }
            Cmd::Ppc { model, n, .. } => {
                in_out(model, "model.gcnm");
                n.get_or_insert(cfg.diagnostics.n_ppc as u64);
            }
        }
        // Outputs are relative to the output directory, inputs to the
        // working directory.
        if let Some(o) = self.output_mut() {
            if o.is_relative() {
                *o = out.join(&*o);
            }
        }
        self.map_paths(&|p| config::absolute(p));
        self
    }

    fn output_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            Cmd::Simulate { output, .. }
            | Cmd::Dataset { output, .. }
            | Cmd::Train { output, .. }
            | Cmd::Infer { output, .. }
            | Cmd::Invopt { output, .. }
            | Cmd::Coverage { output, .. }
            | Cmd::Ppc { output, .. }
            | Cmd::ExportLp { output, .. } => Some(output),
            Cmd::Validate { .. } | Cmd::Replay { .. } => None,
        }
    }
}

/// What a command read and wrote. The first output is the primary one; the
/// manifest is written next to it.
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.chain().any(|c| c.is::<UsageError>());
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let flags = Overrides { system: cli.system, seed: cli.seed, jobs: cli.jobs, out: cli.out };
    match cli.cmd {
        Cmd::Replay { manifest } => replay(&manifest, &flags),
        Cmd::Validate { path } => {
            let cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
            let cmd = Cmd::Validate { path }.resolve(&cfg);
            let Cmd::Validate { path } = cmd else { unreachable!() };
            let path = path.ok_or_else(|| UsageError("validate needs a system file".into()))?;
            commands::validate(&path)
        }
        cmd => {
            let cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
            cfg.check()?;
            execute(cmd.resolve(&cfg), &cfg)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Runs a resolved command and writes its manifest.
fn execute(cmd: Cmd, cfg: &RunConfig) -> Result<Manifest> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| UsageError(format!("cannot create {}: {e}", cfg.out.display())))?;
    let start = Instant::now();
    let outcome = commands::dispatch(&cmd, cfg)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let mut inputs = Vec::new();
    if let Some(s) = &cfg.system {
        inputs.push(FileDigest::of(s)?);
    }
    for p in &outcome.inputs {
        inputs.push(FileDigest::of(p)?);
    }
    let outputs = outcome.outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        command: cmd.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        invocation: cmd,
        config: cfg.clone(),
        seed: cfg.seed,
        jobs: cfg.jobs,
        inputs,
        outputs,
        wall_time_s,
        summary: outcome.summary,
    };
    let path = manifest_path(&outcome.outputs[0]);
    write_manifest(&m, &path)?;
    eprintln!("manifest: {}", path.display());
    Ok(m)
}

/// Re-executes the manifest's invocation, into `--out` when given, and
/// checks that every output hashes as recorded.
fn replay(path: &Path, flags: &Overrides) -> Result<ExitCode> {
    let old = read_manifest(path).map_err(|e| UsageError(format!("{e:#}")))?;
    let mut cfg = old.config.clone();
    let new_out = flags.out.as_deref().map(config::absolute).unwrap_or_else(|| cfg.out.clone());
    let old_out = cfg.out.clone();
    if let Some(j) = flags.jobs {
        cfg.jobs = j;
    }
    cfg.out = new_out.clone();
    cfg.check()?;
    let mut cmd = old.invocation.clone();
    cmd.map_paths(&|p| rebase(p, &old_out, &new_out));
    let new = execute(cmd, &cfg)?;
    let mut same = true;
    for (o, n) in old.outputs.iter().zip(&new.outputs) {
        let ok = o.sha256 == n.sha256;
        same &= ok;
        println!("{} {}", if ok { "identical" } else { "DIFFERS" }, n.path.display());
    }
    if same && old.outputs.len() == new.outputs.len() {
        Ok(ExitCode::SUCCESS)
    } else {
        anyhow::bail!("replay of {} did not reproduce its outputs", path.display())
    }
}
