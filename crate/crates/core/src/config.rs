//! Run configuration: plain-text `key = value` lines grouped under
//! `[section]` headers. `#` starts a comment. Every key has a default and
//! serialization writes all of them, so a parsed file round-trips.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::control::SteeringLaw;
use crate::env::{Ablation, EnvConfig, LearnCadence, RewardPreset, TrainConfig};
use crate::nn::OptimizerKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown section [{section}]")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: unknown key '{key}' in section [{section}]")]
    UnknownKey {
        line: usize,
        section: String,
        key: String,
    },
    #[error("line {line}: key '{key}' given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AblationFlags {
    pub no_stability: bool,
    pub no_checker: bool,
    pub baseline_td3: bool,
}

impl AblationFlags {
    pub fn set(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoStability => self.no_stability = true,
            Ablation::NoChecker => self.no_checker = true,
            Ablation::BaselineTd3 => self.baseline_td3 = true,
        }
    }

    pub fn active(&self) -> Vec<Ablation> {
        let mut v = Vec::new();
        if self.no_stability {
            v.push(Ablation::NoStability);
        }
        if self.no_checker {
            v.push(Ablation::NoChecker);
        }
        if self.baseline_td3 {
            v.push(Ablation::BaselineTd3);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// World file; relative paths resolve against the config file's directory.
    pub world: PathBuf,
    pub preset: RewardPreset,
    pub out_dir: PathBuf,
    pub checkpoint_every: usize,
    pub ablations: AblationFlags,
    pub env: EnvConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(RewardPreset::Traj1)
    }
}

impl RunConfig {
    /// Defaults with the reward table and bundled world of `preset`.
    pub fn for_preset(preset: RewardPreset) -> Self {
        let env = EnvConfig {
            rewards: preset.table(),
            ..Default::default()
        };
        RunConfig {
            world: PathBuf::from(format!("worlds/{}.json", preset.as_str())),
            preset,
            out_dir: PathBuf::from("out"),
            checkpoint_every: 25,
            ablations: AblationFlags::default(),
            env,
            train: TrainConfig::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let fields = fields();
        let mut entries: Vec<(usize, usize, &str)> = Vec::new();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| ConfigError::Syntax {
                        line,
                        msg: format!("unterminated section header '{body}'"),
                    })?
                    .trim();
                if !fields.iter().any(|f| f.section == name) {
                    return Err(ConfigError::UnknownSection {
                        line,
                        section: name.to_string(),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                msg: format!("expected 'key = value', found '{body}'"),
            })?;
            let key = key.trim();
            let Some(sec) = section.as_deref() else {
                return Err(ConfigError::Syntax {
                    line,
                    msg: format!("key '{key}' appears before any [section] header"),
                });
            };
            let fi = fields
                .iter()
                .position(|f| f.section == sec && f.key == key)
                .ok_or_else(|| ConfigError::UnknownKey {
                    line,
                    section: sec.to_string(),
                    key: key.to_string(),
                })?;
            if entries.iter().any(|&(_, f, _)| f == fi) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: format!("{sec}.{key}"),
                });
            }
            entries.push((line, fi, value.trim()));
        }

        // the preset only picks defaults for the reward rows, so it goes first
        let mut cfg = RunConfig::default();
        let preset = entries.iter().find(|&&(_, f, _)| fields[f].section == "rewards" && fields[f].key == "preset");
        if let Some(&(line, _, value)) = preset {
            let p: RewardPreset = value.parse().map_err(|msg| ConfigError::BadValue {
                line,
                key: "rewards.preset".into(),
                msg,
            })?;
            cfg = RunConfig::for_preset(p);
        }
        for (line, fi, value) in entries {
            let f = &fields[fi];
            (f.set)(&mut cfg, value).map_err(|msg| ConfigError::BadValue {
                line,
                key: format!("{}.{}", f.section, f.key),
                msg,
            })?;
        }
        Ok(cfg)
    }

    /// Full listing with every key materialized.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for f in fields() {
            if f.section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{}]", f.section);
                current = f.section;
            }
            let _ = writeln!(out, "{} = {}", f.key, (f.get)(self));
        }
        out
    }

    /// Environment and training configs with ablations applied, validated.
    pub fn build(&self) -> Result<(EnvConfig, TrainConfig), ConfigError> {
        let mut env = self.env.clone();
        for a in self.ablations.active() {
            env.apply_ablation(a);
        }
        env.validate().map_err(ConfigError::Invalid)?;
        self.train.td3.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.replay.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.ma_window == 0 {
            return Err(ConfigError::Invalid("run.ma_window must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(ConfigError::Invalid("run.checkpoint_every must be >= 1".into()));
        }
        Ok((env, self.train.clone()))
    }

    /// World path resolved against `base` when relative.
    pub fn world_path(&self, base: Option<&Path>) -> PathBuf {
        match base {
            Some(dir) if self.world.is_relative() => dir.join(&self.world),
            _ => self.world.clone(),
        }
    }
}

trait ConfValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! conf_via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| format!("'{s}': {e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

conf_via_fromstr!(u32, u64, usize, bool);

impl ConfValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("'{s}' is not finite"))
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfValue for Option<f64> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            f64::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or_else(|| "none".to_string(), |v| v.to_string())
    }
}

impl ConfValue for PathBuf {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.is_empty() {
            Err("empty path".into())
        } else {
            Ok(PathBuf::from(s))
        }
    }
    fn render(&self) -> String {
        self.display().to_string()
    }
}

impl ConfValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("'{p}' is not a width")))
            .collect::<Result<Vec<_>, _>>()?;
        if v.is_empty() || v.contains(&0) {
            return Err("widths must be positive".into());
        }
        Ok(v)
    }
    fn render(&self) -> String {
        self.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! conf_via_str {
    ($($t:ty),*) => {$(
        impl ConfValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                <$t as FromStr>::from_str(s).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

conf_via_str!(LearnCadence);

impl ConfValue for RewardPreset {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse()
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

impl ConfValue for OptimizerKind {
    fn parse_value(s: &str) -> Result<Self, String> {
        s.parse().map_err(|_| format!("unknown optimizer '{s}' (expected sgd or adam)"))
    }
    fn render(&self) -> String {
        self.as_str().to_string()
    }
}

impl ConfValue for SteeringLaw {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "pd" => Ok(SteeringLaw::Pd),
            "stanley" => Ok(SteeringLaw::Stanley),
            other => Err(format!("unknown steering law '{other}' (expected pd or stanley)")),
        }
    }
    fn render(&self) -> String {
        match self {
            SteeringLaw::Pd => "pd".into(),
            SteeringLaw::Stanley => "stanley".into(),
        }
    }
}

struct Field {
    section: &'static str,
    key: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> Result<(), String>,
}

macro_rules! field {
    ($sec:literal, $key:literal, $ty:ty, $($path:ident).+) => {
        Field {
            section: $sec,
            key: $key,
            get: |c| ConfValue::render(&c.$($path).+),
            set: |c, v| {
                c.$($path).+ = <$ty as ConfValue>::parse_value(v)?;
                Ok(())
            },
        }
    };
}

fn fields() -> Vec<Field> {
    vec![
        field!("run", "world", PathBuf, world),
        field!("run", "out_dir", PathBuf, out_dir),
        field!("run", "seed", u64, train.seed),
        field!("run", "max_episodes", usize, train.max_episodes),
        field!("run", "success_target", usize, train.success_target),
        field!("run", "warmup", usize, train.warmup),
        field!("run", "learn_cadence", LearnCadence, train.cadence),
        field!("run", "ma_window", usize, train.ma_window),
        field!("run", "checkpoint_every", usize, checkpoint_every),
        field!("ablation", "no_stability", bool, ablations.no_stability),
        field!("ablation", "no_checker", bool, ablations.no_checker),
        field!("ablation", "baseline_td3", bool, ablations.baseline_td3),
        field!("env", "dt", f64, env.dt),
        field!("env", "step_limit", usize, env.step_limit),
        field!("env", "cruise_altitude", f64, env.cruise_altitude),
        field!("env", "altitude_gain", f64, env.altitude_gain),
        field!("env", "safety_radius", f64, env.safety_radius),
        field!("env", "rl_speed", f64, env.rl_speed),
        field!("env", "waypoint_tolerance", f64, env.waypoint_tolerance),
        field!("env", "force_rl", bool, env.force_rl),
        field!("env", "store_proposal", bool, env.store_proposal),
        field!("limits", "max_speed", f64, env.limits.max_speed),
        field!("limits", "max_yaw_rate", f64, env.limits.max_yaw_rate),
        field!("limits", "max_vertical_rate", f64, env.limits.max_vertical_rate),
        field!("sensor", "ray_count", usize, env.sensor.ray_count),
        field!("sensor", "max_range", f64, env.sensor.max_range),
        field!("fuzzy", "unsafe_range", f64, env.fuzzy.unsafe_range),
        field!("fuzzy", "safe_range", f64, env.fuzzy.safe_range),
        field!("travel", "law", SteeringLaw, env.travel.law),
        field!("travel", "k_stanley", f64, env.travel.k_stanley),
        field!("travel", "k_heading", f64, env.travel.k_heading),
        field!("travel", "k_cross", f64, env.travel.k_cross),
        field!("travel", "eps_speed", f64, env.travel.eps_speed),
        field!("travel", "cruise_speed", f64, env.travel.cruise_speed),
        field!("travel", "max_yaw_rate", f64, env.travel.max_yaw_rate),
        field!("landing", "delta_in", f64, env.landing.delta_in),
        field!("landing", "delta_out", f64, env.landing.delta_out),
        field!("landing", "s_land", f64, env.landing.s_land),
        field!("landing", "d_land", f64, env.landing.d_land),
        field!("landing", "k_v", f64, env.landing.k_v),
        field!("landing", "v_min", f64, env.landing.v_min),
        field!("landing", "v_max", f64, env.landing.v_max),
        field!("landing", "k_perp", f64, env.landing.k_perp),
        field!("landing", "k_z", f64, env.landing.k_z),
        field!("landing", "vz_max", f64, env.landing.vz_max),
        field!("landing", "r_desc", f64, env.landing.r_desc),
        field!("landing", "psi_th", f64, env.landing.psi_th),
        field!("landing", "r_tol", f64, env.landing.r_tol),
        field!("landing", "h_tol", f64, env.landing.h_tol),
        field!("landing", "v_tol", f64, env.landing.v_tol),
        field!("landing", "psi_tol", f64, env.landing.psi_tol),
        field!("landing", "t_settle", f64, env.landing.t_settle),
        field!("landing", "k_yaw", f64, env.landing.k_yaw),
        field!("landing", "max_yaw_rate", f64, env.landing.max_yaw_rate),
        field!("landing", "r_hold", f64, env.landing.r_hold),
        field!("arbiter", "d_thresh", f64, env.arbiter.d_thresh),
        field!("arbiter", "s_thresh", f64, env.arbiter.s_thresh),
        field!("arbiter", "d_exit", f64, env.arbiter.d_exit),
        field!("arbiter", "s_exit", f64, env.arbiter.s_exit),
        field!("arbiter", "debounce_steps", u32, env.arbiter.debounce_steps),
        field!("arbiter", "dwell_min", u32, env.arbiter.dwell_min),
        field!("arbiter", "los_clearance", f64, env.arbiter.los_clearance),
        field!("arbiter", "delta_in", f64, env.arbiter.delta_in),
        field!("arbiter", "delta_out", f64, env.arbiter.delta_out),
        field!("arbiter", "s_land", f64, env.arbiter.s_land),
        field!("arbiter", "d_land", f64, env.arbiter.d_land),
        field!("arbiter", "stability_enabled", bool, env.arbiter.stability_enabled),
        field!("checker", "enabled", bool, env.checker.enabled),
        field!("checker", "clearance_margin", f64, env.checker.clearance_margin),
        field!("checker", "sample_step", f64, env.checker.sample_step),
        field!("checker", "w_goal", f64, env.checker.w_goal),
        field!("checker", "w_clear", f64, env.checker.w_clear),
        field!("checker", "w_curv", f64, env.checker.w_curv),
        field!("checker", "max_modify_iters", u32, env.checker.max_modify_iters),
        field!("checker", "clear_cap", f64, env.checker.clear_cap),
        field!("checker", "escape_sector_deg", f64, env.checker.escape_sector_deg),
        field!("checker", "escape_free_range", f64, env.checker.escape_free_range),
        field!("exploration", "eps0", f64, env.exploration.eps0),
        field!("exploration", "decay", f64, env.exploration.decay),
        field!("exploration", "eps_min", f64, env.exploration.eps_min),
        field!("exploration", "rho", f64, env.exploration.rho),
        field!("exploration", "heading_scale", f64, env.exploration.heading_scale),
        field!("exploration", "curvature_scale", f64, env.exploration.curvature_scale),
        field!("exploration", "spacing_min", f64, env.exploration.spacing_min),
        field!("exploration", "spacing_max", f64, env.exploration.spacing_max),
        field!("td3", "gamma", f64, train.td3.gamma),
        field!("td3", "tau", f64, train.td3.tau),
        field!("td3", "policy_delay", u64, train.td3.policy_delay),
        field!("td3", "smoothing_sigma", f64, train.td3.smoothing_sigma),
        field!("td3", "smoothing_clip", f64, train.td3.smoothing_clip),
        field!("td3", "actor_lr", f64, train.td3.actor_lr),
        field!("td3", "critic_lr", f64, train.td3.critic_lr),
        field!("td3", "batch", usize, train.td3.batch),
        field!("td3", "action_bound", f64, train.td3.action_bound),
        field!("td3", "hidden", Vec<usize>, train.td3.hidden),
        field!("td3", "optimizer", OptimizerKind, train.td3.optimizer),
        field!("td3", "grad_clip", f64, train.td3.grad_clip),
        field!("td3", "reward_scale", f64, train.td3.reward_scale),
        field!("replay", "capacity", usize, train.replay.capacity),
        field!("replay", "alpha", f64, train.replay.alpha),
        field!("replay", "beta_start", f64, train.replay.beta_start),
        field!("replay", "beta_end", f64, train.replay.beta_end),
        field!("replay", "priority_floor", f64, train.replay.priority_floor),
        field!("replay", "beta_horizon", u64, train.replay.beta_horizon),
        field!("rewards", "preset", RewardPreset, preset),
        field!("rewards", "step_cost", f64, env.rewards.step_cost),
        field!("rewards", "progress_gain", f64, env.rewards.progress_gain),
        field!("rewards", "goal_bonus", f64, env.rewards.goal_bonus),
        field!("rewards", "goal_radius", f64, env.rewards.goal_radius),
        field!("rewards", "terminal_crash", Option<f64>, env.rewards.terminal_crash),
        field!("rewards", "recoverable_crash", Option<f64>, env.rewards.recoverable_crash),
        field!("rewards", "out_of_bounds", f64, env.rewards.out_of_bounds),
        field!("rewards", "no_progress", Option<f64>, env.rewards.no_progress),
        field!("rewards", "no_progress_window", usize, env.rewards.no_progress_window),
        field!("rewards", "no_progress_displacement", f64, env.rewards.no_progress_displacement),
        field!("rewards", "line_departure", Option<f64>, env.rewards.line_departure),
        field!("rewards", "line_departure_threshold", f64, env.rewards.line_departure_threshold),
        field!("rewards", "proximity_gain", Option<f64>, env.rewards.proximity_gain),
        field!("rewards", "proximity_radius", f64, env.rewards.proximity_radius),
        field!("rewards", "safe_exit_bonus", Option<f64>, env.rewards.safe_exit_bonus),
        field!("rewards", "safe_exit_one_shot", bool, env.rewards.safe_exit_one_shot),
        field!("rewards", "zone_exit_bonus", Option<f64>, env.rewards.zone_exit_bonus),
        field!("rewards", "novelty_bonus", Option<f64>, env.rewards.novelty_bonus),
        field!("rewards", "revisit_penalty", Option<f64>, env.rewards.revisit_penalty),
        field!("rewards", "revisit_radius", f64, env.rewards.revisit_radius),
        field!("rewards", "revisit_memory", usize, env.rewards.revisit_memory),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn default_listing_round_trips() {
        let text = RunConfig::default().to_config_string();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, RunConfig::default());
        assert_eq!(back.to_config_string(), text);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[td3]\ngamma = 0.9\nlearning_rate = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate") && msg.contains("line 3"), "{msg}");
        let err = RunConfig::parse("[bogus]\n").unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let msg = RunConfig::parse("[arbiter]\n\ndwell_min = -3\n").unwrap_err().to_string();
        assert!(msg.contains("arbiter.dwell_min") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn preset_applies_before_overrides() {
        let cfg = RunConfig::parse("[rewards]\nstep_cost = -2\npreset = traj2\n").unwrap();
        assert_eq!(cfg.env.rewards.step_cost, -2.0);
        assert_eq!(cfg.env.rewards.goal_bonus, 3500.0);
        assert_eq!(cfg.preset, RewardPreset::Traj2);
    }

    #[test]
    fn duplicates_and_orphans_are_rejected() {
        assert!(matches!(
            RunConfig::parse("[td3]\ngamma = 0.9\ngamma = 0.8\n"),
            Err(ConfigError::Duplicate { line: 3, .. })
        ));
        assert!(matches!(RunConfig::parse("gamma = 0.9\n"), Err(ConfigError::Syntax { line: 1, .. })));
    }

    #[test]
    fn ablations_reach_the_env() {
        let mut cfg = RunConfig::default();
        cfg.ablations.set(Ablation::NoStability);
        let (env, _) = cfg.build().unwrap();
        assert!(!env.arbiter.stability_enabled);
        let mut cfg = RunConfig::default();
        cfg.ablations.set(Ablation::BaselineTd3);
        let (env, _) = cfg.build().unwrap();
        assert!(env.force_rl && !env.checker.enabled && !env.arbiter.stability_enabled);
    }

    #[test]
    fn invalid_combination_fails_build() {
        let cfg = RunConfig::parse("[arbiter]\nd_thresh = 9\nd_exit = 5\n").unwrap();
        assert!(matches!(cfg.build(), Err(ConfigError::Invalid(_))));
    }

    proptest! {
        #[test]
        fn random_overrides_round_trip(
            gamma in 0.5f64..0.999,
            dwell in 0u32..100,
            seed in any::<u64>(),
            hidden in prop::collection::vec(1usize..512, 1..4),
            crash in prop::option::of(-5000.0f64..0.0),
        ) {
            let mut cfg = RunConfig::default();
            cfg.train.td3.gamma = gamma;
            cfg.env.arbiter.dwell_min = dwell;
            cfg.train.seed = seed;
            cfg.train.td3.hidden = hidden;
            cfg.env.rewards.terminal_crash = crash;
            let back = RunConfig::parse(&cfg.to_config_string()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
