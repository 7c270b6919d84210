use std::path::PathBuf;

use clap::{Args, Subcommand};
use pipad::sim::Simulator;
use pipad::tuner::{decide, TunerProfile};

use crate::config::{read_profile, ExperimentConfig};
use crate::{write_file, CliError, CliResult, DatasetArgs};

#[derive(Subcommand, Debug)]
pub enum TuneCommand {
    /// Build the offline speedup table from a seeded synthetic corpus.
    BuildProfile(BuildProfileArgs),
    /// Show the tuner's reasoning for one frame of a dataset.
    Explain(ExplainArgs),
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    /// Vertices per corpus graph.
    #[arg(long)]
    pub corpus_nodes: Option<usize>,
    /// Edges per corpus snapshot.
    #[arg(long)]
    pub corpus_edges: Option<usize>,
    /// Feature widths to profile.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    /// Groups averaged per table cell.
    #[arg(long)]
    pub max_samples: Option<usize>,
}

impl ProfileArgs {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        let p = &mut cfg.profile;
        p.node_count = self.corpus_nodes.unwrap_or(p.node_count);
        p.base_edges = self.corpus_edges.unwrap_or(p.base_edges);
        if let Some(d) = &self.dims {
            p.dims = d.clone();
        }
        p.max_samples = self.max_samples.unwrap_or(p.max_samples);
    }
}

#[derive(Args, Debug)]
pub struct BuildProfileArgs {
    /// Experiment config supplying candidates, kernel and machine settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub profile: ProfileArgs,
    /// Profile file to write (default `<output root>/profile.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Index of the frame to explain.
    #[arg(long)]
    pub frame: usize,
    /// Snapshots per frame; defaults to the config's.
    #[arg(long)]
    pub frame_size: Option<usize>,
    /// Stored profile; overrides the config's.
    #[arg(long, conflicts_with = "build_profile")]
    pub profile: Option<PathBuf>,
    /// Build a profile in memory first.
    #[arg(long)]
    pub build_profile: bool,
    #[command(flatten)]
    pub profile_opts: ProfileArgs,
    /// Print the decision as JSON.
    #[arg(long)]
    pub json: bool,
}

/// The profile named by the flags or config, or a freshly built one.
pub fn resolve_profile(
    cfg: &ExperimentConfig,
    explicit: Option<&PathBuf>,
    build: bool,
) -> CliResult<Option<(TunerProfile, bool)>> {
    if build {
        let p = cfg.profile.build(
            &cfg.sim.candidates,
            &cfg.sim.exec,
            cfg.sim.resources.machine(),
            cfg.seed,
        )?;
        return Ok(Some((p, true)));
    }
    match explicit.or(cfg.profile.path.as_ref()) {
        Some(path) => Ok(Some((read_profile(path)?, false))),
        None => Ok(None),
    }
}

pub fn missing_profile() -> CliError {
    CliError::Usage(
        "the tuner needs a profile: pass --profile <file>, set profile.path in the config, \
         add --build-profile, or create one with `pipad tune build-profile`"
            .into(),
    )
}

pub fn run(cmd: &TuneCommand) -> CliResult {
    match cmd {
        TuneCommand::BuildProfile(a) => build(a),
        TuneCommand::Explain(a) => explain(a),
    }
}

fn build(a: &BuildProfileArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    a.profile.apply(&mut cfg);
    let (profile, _) = resolve_profile(&cfg, None, true)?.expect("built profiles always exist");
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| crate::config::output_root().join("profile.json"));
    write_file(&out, &(profile.to_json()? + "\n"))?;
    println!("{:>6} {:>6} {:>8} {:>10} {:>8}", "bucket", "dim", "s_per", "speedup", "samples");
    for e in &profile.entries {
        println!(
            "{:>6} {:>6} {:>8} {:>10.4} {:>8}",
            e.or_bucket, e.dim, e.s_per, e.speedup, e.samples
        );
    }
    if !profile.missing.is_empty() {
        println!("{} cells left unprofiled", profile.missing.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn explain(a: &ExplainArgs) -> CliResult {
    let mut cfg = a.data.experiment()?;
    a.profile_opts.apply(&mut cfg);
    let (mut profile, _) = resolve_profile(&cfg, a.profile.as_ref(), a.build_profile)?.ok_or_else(missing_profile)?;
    profile.machine = cfg.sim.resources.machine();
    let seq = cfg.dataset.load(cfg.seed)?;
    let mut sim_cfg = cfg.sim.clone();
    sim_cfg.frame_size = a.frame_size.unwrap_or(sim_cfg.frame_size);
    sim_cfg.preparing_epochs = sim_cfg.preparing_epochs.max(1);
    sim_cfg.numerics = false;
    let mut sim = Simulator::new(&seq, &sim_cfg)?;
    let observations = sim.run_preparing_epochs()?;
    let obs = observations.get(a.frame).ok_or_else(|| {
        CliError::Usage(format!(
            "frame {} out of range; the dataset has {} frames",
            a.frame,
            observations.len()
        ))
    })?;
    let d = decide(
        &obs.frame,
        obs,
        &profile,
        cfg.sim.resources.device_memory,
        &cfg.sim.candidates,
    )?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&d).expect("decision serializes"));
    } else {
        println!(
            "frame {} (snapshots {}..{}), overlap rate {:.4}",
            a.frame,
            obs.frame.start,
            obs.frame.start + obs.frame.size,
            obs.frame_or_stats.partition_rate
        );
        print!("{}", d.explain());
    }
    Ok(())
}
