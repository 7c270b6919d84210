use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use pipad::sim::{simulate, RunMode, SimOutput, TransferMode};
use pipad::tuner::TunerProfile;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::tune::{missing_profile, resolve_profile, ProfileArgs};
use crate::{write_file, CliResult, DatasetArgs, ModelArg};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    /// One snapshot per kernel, plain transfers, no reuse or tuning.
    OneSnapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TransferArg {
    Sync,
    Async,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[arg(long)]
    pub frame: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Run the comparison baseline instead of the pipelined mode.
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Baseline transfer style.
    #[arg(long, value_enum, default_value_t = TransferArg::Sync)]
    pub transfer: TransferArg,
    /// Run both the pipelined mode and the baseline and report their ratio.
    #[arg(long, conflicts_with = "baseline")]
    pub ab: bool,
    /// Fix the partition size and skip the tuner.
    #[arg(long)]
    pub s_per: Option<usize>,
    /// Disable the layer-0 aggregation cache.
    #[arg(long)]
    pub no_reuse: bool,
    /// Count work without computing the GCN math.
    #[arg(long)]
    pub no_numerics: bool,
    /// Stored tuner profile; overrides the config's.
    #[arg(long, conflicts_with = "build_profile")]
    pub profile: Option<PathBuf>,
    /// Build the tuner profile first and store it with the run.
    #[arg(long)]
    pub build_profile: bool,
    #[command(flatten)]
    pub profile_opts: ProfileArgs,
    /// Run directory (default `$PIPAD_OUTPUT_ROOT/<name>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Comparison {
    baseline_mode: String,
    baseline_epoch_time: f64,
    pipad_epoch_time: f64,
    speedup: f64,
    baseline_transfer_fraction: f64,
    pipad_transfer_fraction: f64,
}

fn configure(a: &SimulateArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = a.data.experiment()?;
    let sim = &mut cfg.sim;
    if let Some(m) = a.model {
        sim.model.kind = m.into();
    }
    sim.frame_size = a.frame.unwrap_or(sim.frame_size);
    sim.stride = a.stride.unwrap_or(sim.stride);
    sim.training_epochs = a.epochs.unwrap_or(sim.training_epochs);
    if let Some(n) = a.s_per {
        sim.tuner = false;
        sim.forced_s_per = Some(n);
    }
    if a.no_reuse {
        sim.reuse = false;
    }
    if a.no_numerics {
        sim.numerics = false;
    }
    if let Some(p) = &a.profile {
        cfg.profile.path = Some(p.clone());
    }
    a.profile_opts.apply(&mut cfg);
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn transfer_mode(t: TransferArg) -> TransferMode {
    match t {
        TransferArg::Sync => TransferMode::Sync,
        TransferArg::Async => TransferMode::Async,
    }
}

fn baseline_config(cfg: &ExperimentConfig, t: TransferArg) -> ExperimentConfig {
    let mut b = cfg.clone();
    b.sim = cfg.sim.baseline(transfer_mode(t));
    b
}

/// Runs one configuration and writes its directory, including the config
/// it ran with.
fn run_one(cfg: &ExperimentConfig, profile: Option<&(TunerProfile, bool)>, dir: &Path) -> CliResult<SimOutput> {
    let seq = cfg.dataset.load(cfg.seed)?;
    let needs_profile = matches!(cfg.sim.mode, RunMode::Pipad) && cfg.sim.tuner;
    if needs_profile && profile.is_none() {
        return Err(missing_profile());
    }
    let out = simulate(&seq, &cfg.sim, profile.map(|p| &p.0))?;
    out.write_to(dir)?;
    let mut stored = cfg.clone();
    stored.output_dir = Some(dir.to_path_buf());
    if let Some((p, true)) = profile.filter(|_| needs_profile) {
        let path = dir.join("profile.json");
        write_file(&path, &(p.to_json()? + "\n"))?;
        stored.profile.path = Some(path);
    }
    write_file(&dir.join("config.json"), &stored.to_json())?;
    Ok(out)
}

fn summary(label: &str, out: &SimOutput, dir: &Path) {
    let r = &out.report;
    println!(
        "{label}: steady epoch time {:.1}, transfer fraction {:.4}, peak device bytes {} -> {}",
        r.steady_epoch_time,
        r.breakdown.transfer,
        r.peak_device_bytes,
        dir.display()
    );
}

pub fn run(a: &SimulateArgs) -> CliResult {
    let cfg = configure(a)?;
    let dir = cfg.run_dir();
    let pipad_needs_profile = cfg.sim.tuner && (a.ab || a.baseline.is_none());
    let profile = if pipad_needs_profile {
        Some(resolve_profile(&cfg, None, a.build_profile)?.ok_or_else(missing_profile)?)
    } else {
        None
    };

    if a.ab {
        let pipad_dir = dir.join("pipad");
        let base_dir = dir.join("baseline");
        let p = run_one(&cfg, profile.as_ref(), &pipad_dir)?;
        let base_cfg = baseline_config(&cfg, a.transfer);
        let b = run_one(&base_cfg, None, &base_dir)?;
        summary("pipad", &p, &pipad_dir);
        summary("baseline", &b, &base_dir);
        let (pr, br) = (&p.report, &b.report);
        let c = Comparison {
            baseline_mode: br.mode.clone(),
            baseline_epoch_time: br.steady_epoch_time,
            pipad_epoch_time: pr.steady_epoch_time,
            speedup: if pr.steady_epoch_time > 0.0 {
                br.steady_epoch_time / pr.steady_epoch_time
            } else {
                1.0
            },
            baseline_transfer_fraction: br.breakdown.transfer,
            pipad_transfer_fraction: pr.breakdown.transfer,
        };
        let mut csv = String::from("metric,value\n");
        let _ = writeln!(csv, "baseline_mode,{}", c.baseline_mode);
        let _ = writeln!(csv, "baseline_epoch_time,{}", c.baseline_epoch_time);
        let _ = writeln!(csv, "pipad_epoch_time,{}", c.pipad_epoch_time);
        let _ = writeln!(csv, "speedup,{}", c.speedup);
        let _ = writeln!(csv, "baseline_transfer_fraction,{}", c.baseline_transfer_fraction);
        let _ = writeln!(csv, "pipad_transfer_fraction,{}", c.pipad_transfer_fraction);
        write_file(&dir.join("comparison.csv"), &csv)?;
        let json = serde_json::to_string_pretty(&c).expect("comparison serializes") + "\n";
        write_file(&dir.join("comparison.json"), &json)?;
        println!("modeled epoch-time ratio (baseline / pipad): {:.3}", c.speedup);
        return Ok(());
    }

    let run_cfg = match a.baseline {
        Some(BaselineArg::OneSnapshot) => baseline_config(&cfg, a.transfer),
        None => cfg,
    };
    let out = run_one(&run_cfg, profile.as_ref(), &dir)?;
    summary(&out.report.mode, &out, &dir);
    Ok(())
}
