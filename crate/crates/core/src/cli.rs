//! `forcekf` command line: `sim`, `run`, `eval` and `mc`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use crate::config::Config;
use crate::dataset::{self, DatasetStreams, EstimateRow, GroundTruth};
use crate::error::{Error, Result};
use crate::eval::{self, Alignment, MetricsReport};
use crate::pipeline::{self, RunOutput};
use crate::sim;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "forcekf", version, about = "Visual-inertial external force estimator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a dataset
    Sim {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// overrides sim.seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the estimator over a dataset directory
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare estimator output with ground truth
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// metrics.csv to write
        #[arg(long)]
        out: PathBuf,
        /// align trajectories by yaw and translation only
        #[arg(long)]
        yaw_only: bool,
    },
    /// Seeded simulate, run and evaluate cycles
    Mc {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        /// seed of the first run; run i uses seed + i (default sim.seed)
        #[arg(long)]
        seed: Option<u64>,
        /// worker threads (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Load { .. } | Error::Io { .. } | Error::Evaluation(_) => EXIT_DATA,
        Error::DegenerateRotation(_) | Error::Precondition { .. } | Error::Numerical { .. } => EXIT_NUMERICAL,
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    create_dir(dir)?;
    dataset::write_states(dir.join("estimate.csv"), &out.estimates)?;
    if !out.nees.is_empty() {
        dataset::write_nees(dir.join("nees.csv"), &out.nees)?;
    }
    Ok(())
}

/// Force RMSE, ATE and mean NEES of one run.
pub fn evaluate(
    est: &[EstimateRow],
    gt: &[GroundTruth],
    nees: &[(f64, f64)],
    mode: Alignment,
) -> Result<MetricsReport> {
    let f_est: Vec<_> = est.iter().map(|r| (r.t, r.imu.force)).collect();
    let f_gt: Vec<_> = gt.iter().map(|g| (g.t, g.force)).collect();
    let (force_rmse, force_samples) = eval::force_rmse(&f_est, &f_gt)?;
    let p_est: Vec<_> = est.iter().map(|r| (r.t, r.imu.p)).collect();
    let p_gt: Vec<_> = gt.iter().map(|g| (g.t, g.p)).collect();
    let (ate, ate_matches) = eval::ate(&p_est, &p_gt, mode)?;
    Ok(MetricsReport {
        force_rmse,
        force_samples,
        ate,
        ate_matches,
        nees_mean: eval::mean(nees.iter().map(|n| n.1)),
        nees_samples: nees.len(),
    })
}

fn cmd_sim(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let o = sim::synthesize(&cfg.sim, &cfg.estimator.camera, &cfg.estimator.gravity)?;
    dataset::write_dataset(out, &o.streams)?;
    info!(
        "wrote {} IMU samples and {} camera frames to {}",
        o.streams.imu.len(),
        o.streams.frames.len(),
        out.display()
    );
    Ok(())
}

fn cmd_run(ds_dir: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let ds = dataset::load_dataset(ds_dir)?;
    let res = pipeline::run(&ds, &cfg.estimator)?;
    write_run(out, &res)?;
    info!("{:?}", res.stats);
    Ok(())
}

fn cmd_eval(results: &Path, ds_dir: &Path, out: &Path, yaw_only: bool) -> Result<()> {
    let est = dataset::load_states(results.join("estimate.csv"))?;
    let gt_path = ds_dir.join("groundtruth.csv");
    if !gt_path.exists() {
        return Err(Error::Evaluation(format!("{} not found", gt_path.display())));
    }
    let gt = dataset::load_groundtruth(&gt_path)?;
    let nees_path = results.join("nees.csv");
    let nees = if nees_path.exists() {
        dataset::load_nees(&nees_path)?
    } else {
        Vec::new()
    };
    let mode = if yaw_only { Alignment::YawOnly } else { Alignment::Rigid };
    let m = evaluate(&est, &gt, &nees, mode)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    dataset::write_metrics(out, &m.rows())?;
    for (k, v) in m.rows() {
        println!("{k} = {v}");
    }
    Ok(())
}

/// One Monte Carlo cycle entirely in memory.
pub fn mc_cycle(cfg: &Config, seed: u64) -> Result<(DatasetStreams, RunOutput, MetricsReport)> {
    let mut sim_cfg = cfg.sim.clone();
    sim_cfg.seed = seed;
    let o = sim::synthesize(&sim_cfg, &cfg.estimator.camera, &cfg.estimator.gravity)?;
    let res = pipeline::run(&o.streams, &cfg.estimator)?;
    let gt = o.streams.groundtruth.as_deref().unwrap_or(&[]);
    let m = evaluate(&res.estimates, gt, &res.nees, Alignment::Rigid)?;
    Ok((o.streams, res, m))
}

fn cmd_mc(
    config: Option<&Path>,
    runs: usize,
    out: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<()> {
    if runs == 0 {
        return Err(Error::config("--runs", "must be > 0"));
    }
    let cfg = load_config(config)?;
    let base = seed.unwrap_or(cfg.sim.seed);
    create_dir(out)?;
    let work = || -> Vec<Result<MetricsReport>> {
        (0..runs)
            .into_par_iter()
            .map(|i| {
                let s = base.wrapping_add(i as u64);
                let (_, res, m) = mc_cycle(&cfg, s)?;
                let dir = out.join(format!("run_{i:03}"));
                write_run(&dir, &res)?;
                dataset::write_metrics(dir.join("metrics.csv"), &m.rows())?;
                info!("run {i} seed {s}: force RMSE {:.4}, ATE {:.4}", m.force_rmse, m.ate);
                Ok(m)
            })
            .collect()
    };
    let results = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::config("--threads", e.to_string()))?
            .install(work),
        None => work(),
    };
    let reports: Vec<MetricsReport> = results.into_iter().collect::<Result<_>>()?;

    let mut summary = String::from("run,seed,force_rmse,ate,force_nees_mean\n");
    for (i, m) in reports.iter().enumerate() {
        summary.push_str(&format!(
            "{i},{},{},{},{}\n",
            base.wrapping_add(i as u64),
            m.force_rmse,
            m.ate,
            m.nees_mean.unwrap_or(f64::NAN)
        ));
    }
    let path = out.join("summary.csv");
    fs::write(&path, summary).map_err(|e| Error::io(&path, e))?;

    let n = reports.len() as f64;
    let rmse = reports.iter().map(|m| m.force_rmse).sum::<f64>() / n;
    let ate = reports.iter().map(|m| m.ate).sum::<f64>() / n;
    let nees = eval::mean(reports.iter().filter_map(|m| m.nees_mean));
    let (lo, hi) = eval::nees_bounds(3, runs, 0.95);
    let mut agg = vec![
        ("runs".to_string(), n),
        ("force_rmse_mean".to_string(), rmse),
        ("ate_mean".to_string(), ate),
    ];
    if let Some(v) = nees {
        agg.push(("force_nees_mean".to_string(), v));
        agg.push(("force_nees_lower".to_string(), lo));
        agg.push(("force_nees_upper".to_string(), hi));
    }
    dataset::write_metrics(out.join("aggregate.csv"), &agg)?;
    for (k, v) in &agg {
        println!("{k} = {v}");
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn execute<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let res = match &cli.command {
        Command::Sim { config, out, seed } => cmd_sim(config.as_deref(), out, *seed),
        Command::Run { dataset, config, out } => cmd_run(dataset, config.as_deref(), out),
        Command::Eval {
            results,
            dataset,
            out,
            yaw_only,
        } => cmd_eval(results, dataset, out, *yaw_only),
        Command::Mc {
            config,
            runs,
            out,
            seed,
            threads,
        } => cmd_mc(config.as_deref(), *runs, out, *seed, *threads),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
