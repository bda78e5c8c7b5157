//! `swiftnav`: train, evaluate, replay and plot.

mod svg;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use swiftnav_core::arbiter::{switch_log_csv, Mode};
use swiftnav_core::checkpoint::{Checkpoint, CheckpointError};
use swiftnav_core::config::{ConfigError, RunConfig};
use swiftnav_core::env::{
    evaluate, parse_episode_log, parse_trajectory_csv, trajectory_csv, Ablation, EnvError, EpisodeResult, Learner,
    RewardPreset, TrajectoryPoint, Trainer, EPISODE_LOG_HEADER,
};
use swiftnav_core::world::{World, WorldError, DEFAULT_SAFETY_RADIUS};

#[derive(Parser)]
#[command(name = "swiftnav", version, about = "Planar UAV navigation simulator and trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// no_stability, no_checker or baseline_td3
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy rollouts of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        episodes: usize,
        /// Run config supplying everything but the networks; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a recorded trajectory against a world.
    Replay {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        world: PathBuf,
        /// Also draw the path to this SVG.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw smoothed learning curves, optionally with path overlays.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long = "trajectory")]
        trajectories: Vec<PathBuf>,
        #[arg(long, default_value_t = 15)]
        window: usize,
    },
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    fn prefixed(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            CliError::Config(m) => CliError::Config(format!("{p}: {m}")),
            CliError::Divergence(m) => CliError::Divergence(format!("{p}: {m}")),
            CliError::Io(m) => CliError::Io(format!("{p}: {m}")),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        match e {
            WorldError::NotFound(_) | WorldError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        if e.is_divergence() {
            CliError::Divergence(e.to_string())
        } else {
            CliError::Config(e.to_string())
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, ablation, seed } => cmd_train(&config, ablation.as_deref(), seed),
        Command::Eval {
            checkpoint,
            world,
            episodes,
            config,
            seed,
        } => cmd_eval(&checkpoint, &world, episodes, config.as_deref(), seed),
        Command::Replay { trajectory, world, out } => cmd_replay(&trajectory, &world, out.as_deref()),
        Command::Plot {
            log,
            out,
            world,
            trajectories,
            window,
        } => cmd_plot(&log, &out, world.as_deref(), &trajectories, window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn output_dir(configured: &Path) -> PathBuf {
    std::env::var_os("SWIFTNAV_OUT").map(PathBuf::from).unwrap_or_else(|| configured.to_path_buf())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Relative world paths are tried against the working directory first, then
/// against the config file's directory.
/// Loads a world, naming the file in every error.
fn load_world(path: &Path, safety_radius: f64) -> Result<World, CliError> {
    World::load(path, safety_radius).map_err(|e| match e {
        WorldError::NotFound(_) => CliError::from(e),
        other => CliError::from(other).prefixed(path),
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::from(e).prefixed(path))
}

fn resolve_world(cfg: &RunConfig, config_path: &Path) -> PathBuf {
    if cfg.world.is_absolute() || cfg.world.exists() {
        return cfg.world.clone();
    }
    let alt = cfg.world_path(config_path.parent());
    if alt.exists() {
        alt
    } else {
        cfg.world.clone()
    }
}

fn cmd_train(config_path: &Path, ablation: Option<&str>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(name) = ablation {
        let a: Ablation = name.parse().map_err(CliError::Config)?;
        cfg.ablations.set(a);
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let (env, train) = cfg.build()?;
    let world = load_world(&resolve_world(&cfg, config_path), env.safety_radius)?;

    let out = output_dir(&cfg.out_dir);
    let ckpt_dir = out.join("checkpoints");
    let traj_dir = out.join("trajectories");
    for d in [&out, &ckpt_dir, &traj_dir] {
        create_dir(d)?;
    }
    write_file(&out.join("config.conf"), &cfg.to_config_string())?;

    let log_path = out.join("episodes.csv");
    let file = File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    writeln!(log, "{EPISODE_LOG_HEADER}").map_err(|e| CliError::io(&log_path, e))?;

    let every = cfg.checkpoint_every;
    let mut trainer = Trainer::new(env, train, world)?;
    let mut saved_first_success = false;
    let run = trainer.run(|t: &Trainer, result: &EpisodeResult| -> Result<(), CliError> {
        let row = t.log.last().expect("episode logged");
        writeln!(log, "{}", row.csv_row()).and_then(|_| log.flush()).map_err(|e| CliError::io(&log_path, e))?;
        let first_success = result.success() && !saved_first_success;
        if first_success || row.episode % every == 0 || t.done() {
            saved_first_success |= result.success();
            let stem = format!("ep{:05}", row.episode);
            write_file(&traj_dir.join(format!("{stem}.csv")), &trajectory_csv(&result.trajectory))?;
            write_file(&traj_dir.join(format!("{stem}_switches.csv")), &switch_log_csv(&result.switch_log))?;
        }
        if row.episode % every == 0 {
            let path = ckpt_dir.join(format!("ep{:05}.ckpt", row.episode));
            Checkpoint::capture(&t.learner.agent, row.episode as u64).save(&path)?;
        }
        Ok(())
    });
    let final_ckpt = out.join("checkpoint.ckpt");
    Checkpoint::capture(&trainer.learner.agent, trainer.log.len() as u64).save(&final_ckpt)?;
    let summary = run?;

    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    let line = format!(
        "episodes={} successes={} episodes_to_target={} final_ma_steps={} final_ma_return={} total_switches={}",
        summary.episodes,
        summary.successes,
        summary.episodes_to_target.map_or_else(|| "not reached".to_string(), |e| e.to_string()),
        fmt_opt(summary.final_ma_steps),
        fmt_opt(summary.final_ma_return),
        summary.total_switches
    );
    println!("{line}");
    write_file(&out.join("summary.txt"), &format!("{line}\n"))?;
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    world_path: &Path,
    episodes: usize,
    config: Option<&Path>,
    seed: u64,
) -> Result<(), CliError> {
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => {
            let stem = world_path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            RunConfig::for_preset(if stem.contains("traj2") { RewardPreset::Traj2 } else { RewardPreset::Traj1 })
        }
    };
    let (env, mut train) = cfg.build()?;
    let world = load_world(world_path, env.safety_radius)?;
    let ck = load_checkpoint(checkpoint)?;
    train.td3.hidden = ck.hidden_widths();
    let mut learner = Learner::seeded(train.td3, train.replay, train.warmup, train.cadence, seed)?;
    ck.restore(&mut learner.agent)?;

    let results = evaluate(&world, &env, &learner, episodes, seed)?;
    let out = output_dir(&cfg.out_dir).join("eval");
    create_dir(&out)?;
    for (k, r) in results.iter().enumerate() {
        write_file(&out.join(format!("ep{:05}.csv", k + 1)), &trajectory_csv(&r.trajectory))?;
        println!(
            "episode {} outcome={} steps={} return={:.2} switches={}",
            k + 1,
            r.outcome,
            r.steps,
            r.total_return,
            r.switch_count
        );
    }
    let n = results.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / n;
    println!(
        "episodes={} success_rate={:.3} mean_steps={:.1} mean_return={:.2} mean_switches={:.2}",
        results.len(),
        mean(&|r| f64::from(u8::from(r.success()))),
        mean(&|r| r.steps as f64),
        mean(&|r| r.total_return),
        mean(&|r| r.switch_count as f64)
    );
    Ok(())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    if !path.exists() {
        return Err(CliError::Io(format!("file not found: {}", path.display())));
    }
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>, CliError> {
    parse_trajectory_csv(&read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn cmd_replay(trajectory: &Path, world_path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let world = load_world(world_path, DEFAULT_SAFETY_RADIUS)?;
    let points = load_trajectory(trajectory)?;
    let mut ticks = [0usize; 3];
    let mut contacts = 0;
    let mut outside = 0;
    let mut switches = 0;
    let mut min_clear = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        ticks[match p.mode {
            Mode::Travel => 0,
            Mode::Rl => 1,
            Mode::Landing => 2,
        }] += 1;
        if world.obstacle_contact(p.position, DEFAULT_SAFETY_RADIUS) {
            contacts += 1;
        }
        if !world.bounds.contains(p.position) {
            outside += 1;
        }
        if let Some(o) = world.nearest_obstacle(p.position) {
            min_clear = min_clear.min(o.surface_distance(p.position));
        }
        if i > 0 && points[i - 1].mode != p.mode {
            switches += 1;
        }
    }
    let length: f64 = points.windows(2).map(|w| w[0].position.distance(w[1].position)).sum();
    let duration = points.last().map_or(0.0, |p| p.t) - points.first().map_or(0.0, |p| p.t);
    let final_dist = points.last().map_or(f64::NAN, |p| p.position.distance(world.goal));
    println!(
        "points={} duration={:.1}s path_length={:.2}m travel={} rl={} landing={} switches={} contacts={} out_of_bounds={} min_clearance={} final_goal_distance={:.2}m",
        points.len(),
        duration,
        length,
        ticks[0],
        ticks[1],
        ticks[2],
        switches,
        contacts,
        outside,
        if min_clear.is_finite() { format!("{min_clear:.2}m") } else { "n/a".into() },
        final_dist
    );
    if let Some(path) = out {
        write_file(path, &svg::render_paths(&world, &[points]))?;
    }
    Ok(())
}

fn cmd_plot(
    log_path: &Path,
    out: &Path,
    world: Option<&Path>,
    trajectories: &[PathBuf],
    window: usize,
) -> Result<(), CliError> {
    if window == 0 {
        return Err(CliError::Config("--window must be >= 1".into()));
    }
    let log =
        parse_episode_log(&read_text(log_path)?).map_err(|e| CliError::Config(format!("{}: {e}", log_path.display())))?;
    let svg = match world {
        Some(wp) => {
            let w = load_world(wp, DEFAULT_SAFETY_RADIUS)?;
            let paths = trajectories.iter().map(|p| load_trajectory(p)).collect::<Result<Vec<_>, _>>()?;
            svg::render(&log, window, Some((&w, &paths)))
        }
        None => {
            if !trajectories.is_empty() {
                return Err(CliError::Config("--trajectory needs --world".into()));
            }
            svg::render(&log, window, None)
        }
    };
    write_file(out, &svg)
}
