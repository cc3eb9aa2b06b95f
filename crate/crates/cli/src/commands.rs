//! Subcommand bodies. Each reads its inputs, writes its artifact and returns
//! the paths and a JSON summary for the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use gencost::diagnostics::{coverage_from_records, validation_records};
use gencost::forward::DatasetHeader;
use gencost::milp::export_lp_file;
use gencost::npe::{fit_with_progress, training_log_csv};
use gencost::system::SystemError;
use gencost::{
    build_scuc, estimate, expected_coverage, export_corner, generate_dataset_opts, load_model, posterior_predictive,
    read_dataset, sample_prior, save_model, simulate_opts, validate as validate_instance, write_dataset, Availability,
    CostParams, Dataset, InverseResult, Observation, PosteriorModel, UcInstance,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cmd, ObsArgs, Outcome, UsageError};

/// Records simulated between progress lines.
const PROGRESS_CHUNK: usize = 1024;
/// Dispatch slack, in MW, when testing band membership.
pub const BAND_TOL: f64 = 1e-6;

/// An observation with the parameters that generated it, when known.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservationFile {
    pub instance_hash: String,
    pub seed: Option<u64>,
    pub theta: Option<CostParams>,
    pub observation: Observation,
}

pub fn validate(path: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    let inst = UcInstance::from_json(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
    let violations = validate_instance(&inst);
    if violations.is_empty() {
        println!(
            "{}: valid ({} buses, {} lines, {} generators, {} periods)",
            inst.name,
            inst.network.num_buses(),
            inst.network.num_lines(),
            inst.network.num_generators(),
            inst.horizon
        );
        Ok(ExitCode::SUCCESS)
    } else {
        for v in &violations {
            println!("{v}");
        }
        Ok(ExitCode::from(1))
    }
}

pub fn dispatch(cmd: &Cmd, cfg: &RunConfig) -> Result<Outcome> {
    let inst = load_instance(cfg)?;
    match cmd {
        Cmd::Simulate { theta, noiseless, output } => simulate(&inst, cfg, theta.as_deref(), *noiseless, output),
        Cmd::Dataset { n, drop_shed, output } => dataset(&inst, cfg, n.expect("resolved") as usize, *drop_shed, output),
        Cmd::Train { dataset, output } => train(&inst, cfg, dataset.as_deref().expect("resolved"), output),
        Cmd::Infer { model, obs, n, invopt, output } => infer(
            &inst,
            cfg,
            model.as_deref().expect("resolved"),
            obs,
            n.expect("resolved") as usize,
            invopt.as_deref(),
            output,
        ),
        Cmd::Invopt { obs, output } => invopt(&inst, cfg, obs, output),
        Cmd::Coverage { model, dataset, fresh, n_test, output } => coverage(
            &inst,
            cfg,
            model.as_deref().expect("resolved"),
            if *fresh { None } else { dataset.as_deref() },
            n_test.expect("resolved") as usize,
            output,
        ),
        Cmd::Ppc { model, obs, n, output } => {
            ppc(&inst, cfg, model.as_deref().expect("resolved"), obs, n.expect("resolved") as usize, output)
        }
        Cmd::ExportLp { theta, obs, output } => export_lp(&inst, cfg, theta.as_deref(), obs, output),
        Cmd::Validate { .. } | Cmd::Replay { .. } => unreachable!("handled before dispatch"),
    }
}

fn load_instance(cfg: &RunConfig) -> Result<UcInstance> {
    let path = cfg.system_path()?;
    gencost::load_system(path).map_err(|e| match e {
        SystemError::Io { .. } | SystemError::Parse(_) => UsageError(e.to_string()).into(),
        other => anyhow!(other).context(format!("system {}", path.display())),
    })
}

fn parse_theta(v: &[f64], inst: &UcInstance) -> Result<CostParams> {
    let nj = inst.network.num_generators();
    if v.len() != 2 * nj {
        return Err(UsageError(format!("--theta needs {} values (c then s per generator), got {}", 2 * nj, v.len())).into());
    }
    Ok(CostParams::from_slice(v))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_trained(path: &Path, inst: &UcInstance) -> Result<PosteriorModel> {
    if !path.exists() {
        bail!("no trained model at {}; run `gencost train` first", path.display());
    }
    let model = load_model(path).with_context(|| format!("cannot load model {}", path.display()))?;
    model.check_instance(inst)?;
    Ok(model)
}

/// The observation, its true parameters if recorded, and the file it came from.
fn load_observation(args: &ObsArgs, inst: &UcInstance) -> Result<(Observation, Option<CostParams>, PathBuf)> {
    if let Some(p) = &args.observation {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read observation {}", p.display()))?;
        let f: ObservationFile =
            serde_json::from_str(&text).with_context(|| format!("{} is not an observation file", p.display()))?;
        if f.instance_hash != inst.content_hash() {
            bail!("observation {} was simulated on a different system", p.display());
        }
        return Ok((f.observation, f.theta, p.clone()));
    }
    if let Some(p) = &args.obs_dataset {
        let ds = read_dataset(p).with_context(|| format!("cannot read dataset {}", p.display()))?;
        ds.check_instance(inst)?;
        let r = ds
            .records
            .get(args.obs_index)
            .ok_or_else(|| anyhow!("dataset {} has {} records, no index {}", p.display(), ds.len(), args.obs_index))?;
        return Ok((r.obs.clone(), Some(r.theta.clone()), p.clone()));
    }
    Err(UsageError("pass --observation FILE or --obs-dataset FILE --obs-index I".into()).into())
}

fn simulate(inst: &UcInstance, cfg: &RunConfig, theta: Option<&[f64]>, noiseless: bool, output: &Path) -> Result<Outcome> {
    let prior = if noiseless { cfg.prior.noiseless() } else { cfg.prior };
    let theta = match theta {
        Some(v) => parse_theta(v, inst)?,
        None => sample_prior(&prior, inst.network.num_generators(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let x = simulate_opts(inst, &theta, &prior, cfg.seed, &cfg.solver)?;
    let f = ObservationFile {
        instance_hash: inst.content_hash(),
        seed: Some(cfg.seed),
        theta: Some(theta),
        observation: Observation::from(&x),
    };
    write_text(output, &(serde_json::to_string_pretty(&f)? + "\n"))?;
    println!(
        "simulated seed {}: total cost {:.2}, shed {:.3} MW -> {}",
        cfg.seed,
        x.schedule.total_cost,
        f.observation.shed_total,
        output.display()
    );
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![output.to_path_buf()],
        summary: json!({ "total_cost": x.schedule.total_cost, "shed_total": f.observation.shed_total, "noiseless": noiseless }),
    })
}

fn dataset(inst: &UcInstance, cfg: &RunConfig, n: usize, drop_shed: bool, output: &Path) -> Result<Outcome> {
    let mut records = Vec::with_capacity(n);
    let mut header: Option<DatasetHeader> = None;
    let mut shed = 0;
    let mut done = 0;
    while done < n {
        let m = PROGRESS_CHUNK.min(n - done);
        let part = generate_dataset_opts(inst, &cfg.prior, m, cfg.seed.wrapping_add(done as u64), false, cfg.jobs, &cfg.solver)?;
        for r in part.records {
            let sheds = r.obs.shed_total > 1e-6;
            shed += sheds as usize;
            if !(drop_shed && sheds) {
                records.push(r);
            }
        }
        header.get_or_insert(part.header);
        done += m;
        eprintln!("dataset: {done}/{n} simulated");
    }
    let mut header = header.expect("n > 0");
    header.base_seed = cfg.seed;
    header.drop_shed = drop_shed;
    header.n = records.len();
    let ds = Dataset { header, records };
    write_dataset(&ds, output)?;
    let kept = ds.len();
    println!(
        "wrote {kept} records to {} ({shed} of {n} shed load{})",
        output.display(),
        if drop_shed { ", dropped" } else { "" }
    );
    Ok(Outcome {
        inputs: vec![],
        outputs: vec![output.to_path_buf()],
        summary: json!({ "simulated": n, "records": kept, "shed_records": shed, "drop_shed": drop_shed }),
    })
}

fn train(inst: &UcInstance, cfg: &RunConfig, dataset: &Path, output: &Path) -> Result<Outcome> {
    if cfg.train.lambda_balance != 0.0 {
        eprintln!("warning: train.lambda_balance is reserved and has no effect");
    }
    let ds = read_dataset(dataset).with_context(|| format!("cannot read dataset {}", dataset.display()))?;
    let model = fit_with_progress(&ds, inst, &cfg.train, |s| {
        eprintln!("epoch {:>4}  train {:.5}  val {:.5}", s.epoch, s.train_nll, s.val_nll);
    })?;
    save_model(&model, output)?;
    let log = log_path(output);
    write_text(&log, &training_log_csv(&model))?;
    let best = model.training_log.get(model.best_epoch.wrapping_sub(1)).map(|s| s.val_nll);
    println!(
        "trained {} parameters on {} records; best epoch {} (val NLL {}) -> {}",
        model.num_params(),
        model.meta.train_records,
        model.best_epoch,
        best.map_or("n/a".to_string(), |v| format!("{v:.5}")),
        output.display()
    );
    Ok(Outcome {
        inputs: vec![dataset.to_path_buf()],
        outputs: vec![output.to_path_buf(), log],
        summary: json!({
            "params": model.num_params(),
            "train_records": model.meta.train_records,
            "val_records": model.meta.val_records,
            "best_epoch": model.best_epoch,
            "epochs_run": model.training_log.len(),
            "best_val_nll": best,
        }),
    })
}

/// Training log written next to a model file.
pub fn log_path(model: &Path) -> PathBuf {
    model.with_extension("training.csv")
}

#[allow(clippy::too_many_arguments)]
fn infer(
    inst: &UcInstance,
    cfg: &RunConfig,
    model_path: &Path,
    obs: &ObsArgs,
    n: usize,
    invopt: Option<&Path>,
    output: &Path,
) -> Result<Outcome> {
    let model = load_trained(model_path, inst)?;
    let (x, theta_star, obs_src) = load_observation(obs, inst)?;
    let mut inputs = vec![model_path.to_path_buf(), obs_src];
    let theta_invopt = match invopt {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let r: InverseResult = serde_json::from_str(&text).with_context(|| format!("{} is not an invopt result", p.display()))?;
            inputs.push(p.to_path_buf());
            Some(r.theta_hat)
        }
        None => None,
    };
    let data = export_corner(&model, &cfg.prior, &x, theta_star.as_ref(), theta_invopt.as_ref(), n, cfg.seed, output)?;
    let p = data.names.len();
    let mean: Vec<f64> = (0..p).map(|i| data.samples.iter().map(|s| s[i]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..p)
        .map(|i| (data.samples.iter().map(|s| (s[i] - mean[i]).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0)).sqrt())
        .collect();
    println!("{:<16} {:>12} {:>12} {:>12}", "parameter", "mean", "std", "true");
    for i in 0..p {
        let t = data.theta_star.as_ref().map_or(String::from("-"), |t| format!("{:.3}", t[i]));
        println!("{:<16} {:>12.3} {:>12.3} {:>12}", data.names[i], mean[i], std[i], t);
    }
    Ok(Outcome {
        inputs,
        outputs: vec![output.to_path_buf()],
        summary: json!({ "names": data.names, "mean": mean, "std": std, "n": n }),
    })
}

fn invopt(inst: &UcInstance, cfg: &RunConfig, obs: &ObsArgs, output: &Path) -> Result<Outcome> {
    let (x, theta_star, src) = load_observation(obs, inst)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = estimate(inst, &x, &cfg.prior, &cfg.inverse_options(), &mut rng)?;
    write_text(output, &(serde_json::to_string_pretty(&r)? + "\n"))?;
    println!(
        "{} after {} iterations (violation {:.3e}) -> {}",
        if r.converged { "converged" } else { "NOT converged" },
        r.iterations,
        r.final_violation,
        output.display()
    );
    let mae = theta_star.map(|t| {
        t.marginal.iter().zip(&r.theta_hat.marginal).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.marginal.len() as f64
    });
    Ok(Outcome {
        inputs: vec![src],
        outputs: vec![output.to_path_buf()],
        summary: json!({
            "converged": r.converged,
            "iterations": r.iterations,
            "final_violation": r.final_violation,
            "marginal_mae": mae,
        }),
    })
}

fn coverage(
    inst: &UcInstance,
    cfg: &RunConfig,
    model_path: &Path,
    dataset: Option<&Path>,
    n_test: usize,
    output: &Path,
) -> Result<Outcome> {
    let model = load_trained(model_path, inst)?;
    let d = &cfg.diagnostics;
    let mut inputs = vec![model_path.to_path_buf()];
    let (curve, source) = match dataset {
        Some(p) => {
            let ds = read_dataset(p).with_context(|| format!("cannot read dataset {}", p.display()))?;
            ds.check_instance(inst)?;
            let val = validation_records(&ds, &model);
            if val.len() < n_test {
                eprintln!("warning: only {} validation records available (n_test {n_test})", val.len());
            }
            let recs: Vec<_> = val.into_iter().take(n_test).cloned().collect();
            inputs.push(p.to_path_buf());
            (coverage_from_records(&model, &recs, &d.levels, d.n_mc, cfg.seed, cfg.jobs)?, "validation")
        }
        None => (
            expected_coverage(&model, inst, &cfg.prior, n_test, &d.levels, d.n_mc, cfg.seed, cfg.jobs, &cfg.solver)?,
            "fresh",
        ),
    };
    write_text(output, &curve.to_csv())?;
    println!("{:>8} {:>10} {:>8}", "level", "empirical", "stderr");
    for i in 0..curve.levels.len() {
        println!("{:>8.3} {:>10.4} {:>8.4}", curve.levels[i], curve.empirical[i], curve.stderr[i]);
    }
    let deficit = curve.max_deficit();
    println!(
        "max deficit {deficit:+.4} ({}) over {} {source} test points",
        if deficit > 0.0 { "overconfident" } else { "no overconfidence" },
        curve.n_test
    );
    Ok(Outcome {
        inputs,
        outputs: vec![output.to_path_buf()],
        summary: json!({ "source": source, "curve": curve, "max_deficit": deficit }),
    })
}

fn ppc(inst: &UcInstance, cfg: &RunConfig, model_path: &Path, obs: &ObsArgs, n: usize, output: &Path) -> Result<Outcome> {
    let model = load_trained(model_path, inst)?;
    let (x, _, src) = load_observation(obs, inst)?;
    let band = posterior_predictive(&model, inst, &cfg.prior, &x, n, cfg.seed, cfg.jobs, &cfg.solver)?;
    write_text(output, &band.to_csv())?;
    let inside = band.fraction_inside(&x.dispatch, BAND_TOL);
    println!("{:.1}% of dispatch cells inside the 5-95% band -> {}", 100.0 * inside, output.display());
    Ok(Outcome {
        inputs: vec![model_path.to_path_buf(), src],
        outputs: vec![output.to_path_buf()],
        summary: json!({ "fraction_inside": inside, "n": n }),
    })
}

fn export_lp(inst: &UcInstance, cfg: &RunConfig, theta: Option<&[f64]>, obs: &ObsArgs, output: &Path) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let (demand, obs_theta) = if obs.is_set() {
        let (x, t, src) = load_observation(obs, inst)?;
        inputs.push(src);
        (x.demand, t)
    } else {
        (inst.base_demand(), None)
    };
    let theta = match (theta, obs_theta) {
        (Some(v), _) => parse_theta(v, inst)?,
        (None, Some(t)) => t,
        (None, None) => {
            let (lo, hi) = cfg.prior.bounds(inst.network.num_generators());
            CostParams::from_slice(&lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<_>>())
        }
    };
    let model = build_scuc(inst, &theta, &Availability::all(inst), &demand, inst.shed_penalty)?;
    export_lp_file(&model.milp, output)?;
    println!(
        "wrote {} variables, {} constraints -> {}",
        model.milp.lp.num_vars(),
        model.milp.lp.num_constraints(),
        output.display()
    );
    Ok(Outcome {
        inputs,
        outputs: vec![output.to_path_buf()],
        summary: json!({ "theta": theta, "variables": model.milp.lp.num_vars(), "constraints": model.milp.lp.num_constraints() }),
    })
}
