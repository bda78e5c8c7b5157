//! The navigation MDP: state encoding, reward tables, the episode loop and
//! the training driver.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arbiter::{desired_mode, ArbiterConfig, ArbiterInputs, ArbiterState, Mode, SwitchRecord};
use crate::control::{
    landing_command, touchdown_conditions, touchdown_met, travel_command, GuidanceLine, LandingConfig, TravelGains,
};
use crate::fuzzy::FuzzyConfig;
use crate::planner::{
    check_and_score, decode_action, encode_action, escape_line, explore, CheckerConfig, ExploreContext,
    ExplorationSchedule, Provenance, Verdict, WaypointPolyline, ACTION_DIM, WAYPOINTS,
};
use crate::replay::{PrioritizedReplay, ReplayConfig, ReplayError, Transition};
use crate::nn::OptimizerKind;
use crate::td3::{Td3Agent, Td3Config, Td3Error};
use crate::world::{
    step_kinematics, wrap_angle, Command, KinematicLimits, SensorConfig, Vec2, VehicleState, World,
};

pub const INTRINSIC_DIM: usize = 12;
pub const OBSTACLE_SLOTS: usize = 20;
pub const STATE_DIM: usize = INTRINSIC_DIM + 3 * OBSTACLE_SLOTS;
/// Range written into unused obstacle slots.
pub const PAD_RANGE: f64 = 55.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Learner(#[from] Td3Error),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl EnvError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, EnvError::Learner(Td3Error::Divergence(_)))
    }
}

/// 12 intrinsics `(x, y, z, roll, pitch, yaw, roll rate, pitch rate, yaw
/// rate, vx, vy, vz)` then the 20 nearest obstacle centres within
/// `sensing_radius` as world-frame `(dx, dy, distance)`, nearest first,
/// padded with `(0, 0, 55)`.
pub fn encode_state(world: &World, state: &VehicleState, sensing_radius: f64) -> Vec<f64> {
    let v = state.velocity();
    let mut out = vec![
        state.position.x,
        state.position.y,
        state.altitude,
        0.0,
        0.0,
        state.yaw,
        0.0,
        0.0,
        state.yaw_rate,
        v.x,
        v.y,
        state.vertical_rate,
    ];
    let mut near: Vec<(f64, Vec2)> = world
        .obstacles
        .iter()
        .map(|o| {
            let d = o.center - state.position;
            (d.norm(), d)
        })
        .filter(|(dist, _)| *dist <= sensing_radius)
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0));
    for k in 0..OBSTACLE_SLOTS {
        match near.get(k) {
            Some(&(dist, d)) => out.extend([d.x, d.y, dist]),
            None => out.extend([0.0, 0.0, PAD_RANGE]),
        }
    }
    out
}

/// Fixed per-feature divisors that bring encoded states to order one.
pub fn state_scales() -> Vec<f64> {
    let mut s = vec![50.0, 50.0, 5.0, 1.0, 1.0, std::f64::consts::PI, 1.0, 1.0, 1.5, 3.0, 3.0, 1.0];
    for _ in 0..OBSTACLE_SLOTS {
        s.extend([10.0, 10.0, 10.0]);
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardPreset {
    Traj1,
    Traj2,
}

impl RewardPreset {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardPreset::Traj1 => "traj1",
            RewardPreset::Traj2 => "traj2",
        }
    }

    pub fn table(self) -> RewardTable {
        match self {
            RewardPreset::Traj1 => RewardTable::traj1(),
            RewardPreset::Traj2 => RewardTable::traj2(),
        }
    }
}

impl FromStr for RewardPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traj1" => Ok(RewardPreset::Traj1),
            "traj2" => Ok(RewardPreset::Traj2),
            other => Err(format!("unknown reward preset '{other}' (expected traj1 or traj2)")),
        }
    }
}

/// Reward coefficients; `None` disables a row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTable {
    pub step_cost: f64,
    pub progress_gain: f64,
    pub goal_bonus: f64,
    pub goal_radius: f64,
    /// Contact ends the episode with this penalty.
    pub terminal_crash: Option<f64>,
    /// Contact is undone and penalised; the episode continues.
    pub recoverable_crash: Option<f64>,
    pub out_of_bounds: f64,
    pub no_progress: Option<f64>,
    pub no_progress_window: usize,
    pub no_progress_displacement: f64,
    pub line_departure: Option<f64>,
    pub line_departure_threshold: f64,
    pub proximity_gain: Option<f64>,
    pub proximity_radius: f64,
    pub safe_exit_bonus: Option<f64>,
    pub safe_exit_one_shot: bool,
    pub zone_exit_bonus: Option<f64>,
    pub novelty_bonus: Option<f64>,
    pub revisit_penalty: Option<f64>,
    pub revisit_radius: f64,
    pub revisit_memory: usize,
}

impl RewardTable {
    pub fn traj1() -> Self {
        RewardTable {
            step_cost: -1.0,
            progress_gain: 2.0,
            goal_bonus: 200.0,
            goal_radius: 2.0,
            terminal_crash: Some(-1000.0),
            recoverable_crash: None,
            out_of_bounds: -1000.0,
            no_progress: None,
            no_progress_window: 50,
            no_progress_displacement: 0.5,
            line_departure: Some(-50.0),
            line_departure_threshold: 3.0,
            proximity_gain: None,
            proximity_radius: 5.0,
            safe_exit_bonus: Some(100.0),
            safe_exit_one_shot: false,
            zone_exit_bonus: None,
            novelty_bonus: None,
            revisit_penalty: None,
            revisit_radius: 1.0,
            revisit_memory: 10,
        }
    }

    pub fn traj2() -> Self {
        RewardTable {
            step_cost: -0.5,
            progress_gain: 1.5,
            goal_bonus: 3500.0,
            goal_radius: 2.0,
            terminal_crash: None,
            recoverable_crash: Some(-200.0),
            out_of_bounds: -1500.0,
            no_progress: Some(-500.0),
            no_progress_window: 50,
            no_progress_displacement: 0.5,
            line_departure: None,
            line_departure_threshold: 3.0,
            proximity_gain: Some(1.2),
            proximity_radius: 5.0,
            safe_exit_bonus: Some(500.0),
            safe_exit_one_shot: true,
            zone_exit_bonus: Some(50.0),
            novelty_bonus: Some(20.0),
            revisit_penalty: Some(-10.0),
            revisit_radius: 1.0,
            revisit_memory: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Contact {
    #[default]
    None,
    Recoverable,
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointNovelty {
    Novel,
    Revisit,
}

/// Everything that happened on one control step that the reward reads.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepEvents {
    /// `d_prev − d_curr` to the goal.
    pub progress: f64,
    pub d_min: Option<f64>,
    pub contact: Contact,
    pub out_of_bounds: bool,
    pub no_progress: bool,
    /// First step of an excursion beyond the departure threshold.
    pub line_departure: bool,
    pub safe_exit: bool,
    pub zone_exit: bool,
    pub endpoint: Option<EndpointNovelty>,
    pub goal_reached: bool,
}

pub fn reward_step(ev: &StepEvents, table: &RewardTable) -> f64 {
    let mut r = table.step_cost + table.progress_gain * ev.progress;
    if ev.goal_reached {
        r += table.goal_bonus;
    }
    match ev.contact {
        Contact::Terminal => r += table.terminal_crash.unwrap_or(0.0),
        Contact::Recoverable => r += table.recoverable_crash.unwrap_or(0.0),
        Contact::None => {}
    }
    if ev.out_of_bounds {
        r += table.out_of_bounds;
    }
    if ev.no_progress {
        r += table.no_progress.unwrap_or(0.0);
    }
    if ev.line_departure {
        r += table.line_departure.unwrap_or(0.0);
    }
    if let (Some(gain), Some(d)) = (table.proximity_gain, ev.d_min) {
        if d < table.proximity_radius {
            r -= gain * (table.proximity_radius - d);
        }
    }
    if ev.safe_exit {
        r += table.safe_exit_bonus.unwrap_or(0.0);
    }
    if ev.zone_exit {
        r += table.zone_exit_bonus.unwrap_or(0.0);
    }
    match ev.endpoint {
        Some(EndpointNovelty::Novel) => r += table.novelty_bonus.unwrap_or(0.0),
        Some(EndpointNovelty::Revisit) => r += table.revisit_penalty.unwrap_or(0.0),
        None => {}
    }
    r
}

/// Trailing mean over `min(window, i + 1)` entries.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1, "window must be >= 1");
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    for (i, &v) in series.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= series[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    NoStability,
    NoChecker,
    BaselineTd3,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoStability => "no_stability",
            Ablation::NoChecker => "no_checker",
            Ablation::BaselineTd3 => "baseline_td3",
        }
    }
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_stability" => Ok(Ablation::NoStability),
            "no_checker" => Ok(Ablation::NoChecker),
            "baseline_td3" => Ok(Ablation::BaselineTd3),
            other => Err(format!(
                "unknown ablation '{other}' (expected no_stability, no_checker or baseline_td3)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub dt: f64,
    pub step_limit: usize,
    pub cruise_altitude: f64,
    pub altitude_gain: f64,
    pub safety_radius: f64,
    /// Cruise speed while tracking RL waypoints.
    pub rl_speed: f64,
    /// Distance at which a tracked waypoint counts as reached.
    pub waypoint_tolerance: f64,
    pub limits: KinematicLimits,
    pub sensor: SensorConfig,
    pub fuzzy: FuzzyConfig,
    pub travel: TravelGains,
    pub landing: LandingConfig,
    pub arbiter: ArbiterConfig,
    pub checker: CheckerConfig,
    pub exploration: ExplorationSchedule,
    pub rewards: RewardTable,
    /// Keep the vehicle in RL mode whenever it is not landing.
    pub force_rl: bool,
    /// Store the proposal handed to the checker instead of the polyline
    /// actually flown, so the critic also scores rejected proposals.
    pub store_proposal: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.1,
            step_limit: 2000,
            cruise_altitude: 2.0,
            altitude_gain: 1.0,
            safety_radius: crate::world::DEFAULT_SAFETY_RADIUS,
            rl_speed: 1.5,
            waypoint_tolerance: 0.4,
            limits: KinematicLimits::default(),
            sensor: SensorConfig::default(),
            fuzzy: FuzzyConfig::default(),
            travel: TravelGains::default(),
            landing: LandingConfig::default(),
            arbiter: ArbiterConfig::default(),
            checker: CheckerConfig::default(),
            exploration: ExplorationSchedule::default(),
            rewards: RewardTable::traj1(),
            force_rl: false,
            store_proposal: false,
        }
    }
}

impl EnvConfig {
    pub fn apply_ablation(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoStability => {
                self.arbiter.stability_enabled = false;
                self.arbiter.d_exit = self.arbiter.d_thresh;
                self.arbiter.s_exit = self.arbiter.s_thresh;
            }
            Ablation::NoChecker => self.checker.enabled = false,
            Ablation::BaselineTd3 => {
                self.force_rl = true;
                self.checker.enabled = false;
                self.arbiter.stability_enabled = false;
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0) {
            return Err("dt must be > 0".into());
        }
        if self.step_limit == 0 {
            return Err("step_limit must be > 0".into());
        }
        if !(self.rl_speed > 0.0) || !(self.waypoint_tolerance > 0.0) {
            return Err("rl_speed and waypoint_tolerance must be > 0".into());
        }
        if !(self.safety_radius >= 0.0) {
            return Err("safety_radius must be >= 0".into());
        }
        self.sensor.validate()?;
        self.travel.validate().map_err(|e| e.to_string())?;
        self.landing.validate().map_err(|e| e.to_string())?;
        self.arbiter.validate()?;
        self.checker.validate()?;
        self.exploration.validate()?;
        if self.fuzzy.safe_range <= self.fuzzy.unsafe_range {
            return Err("fuzzy safe_range must exceed unsafe_range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Crash,
    OutOfBounds,
    NoProgress,
    StepLimit,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Crash => "crash",
            Outcome::OutOfBounds => "out_of_bounds",
            Outcome::NoProgress => "no_progress",
            Outcome::StepLimit => "step_limit",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Outcome {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "success" => Ok(Outcome::Success),
            "crash" => Ok(Outcome::Crash),
            "out_of_bounds" => Ok(Outcome::OutOfBounds),
            "no_progress" => Ok(Outcome::NoProgress),
            "step_limit" => Ok(Outcome::StepLimit),
            other => Err(format!("unknown outcome '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub position: Vec2,
    pub altitude: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub outcome: Outcome,
    pub steps: usize,
    pub total_return: f64,
    pub switch_count: usize,
    pub switch_log: Vec<SwitchRecord>,
    pub trajectory: Vec<TrajectoryPoint>,
    /// RL transitions produced during the episode, in order.
    pub transitions: usize,
    pub rl_steps: usize,
    pub rejected_proposals: usize,
}

impl EpisodeResult {
    pub fn success(&self) -> bool {
        self.outcome == Outcome::Success
    }

    /// Planar length of the flown path.
    pub fn path_length(&self) -> f64 {
        self.trajectory.windows(2).map(|w| w[0].position.distance(w[1].position)).sum()
    }
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from("t,x,y,z,mode\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", p.t, p.position.x, p.position.y, p.altitude, p.mode));
    }
    s
}

pub const TRAJECTORY_HEADER: &str = "t,x,y,z,mode";

/// Parses a trajectory CSV; errors name the 1-based line.
pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryPoint>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TRAJECTORY_HEADER => {}
        Some((_, h)) => return Err(format!("line 1: expected header '{TRAJECTORY_HEADER}', found '{h}'")),
        None => return Err("empty trajectory file".into()),
    }
    let mut out = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(format!("line {}: expected 5 fields, found {}", idx + 1, f.len()));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("line {}: bad number '{}'", idx + 1, f[i]))
        };
        out.push(TrajectoryPoint {
            t: num(0)?,
            position: Vec2::new(num(1)?, num(2)?),
            altitude: num(3)?,
            mode: f[4].parse().map_err(|e| format!("line {}: {e}", idx + 1))?,
        });
    }
    Ok(out)
}

/// When gradient steps happen relative to the episode loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnCadence {
    /// One learner step per RL-mode control tick.
    PerTick,
    /// `k` learner steps each time an RL transition is stored.
    PerTransition(u32),
}

impl fmt::Display for LearnCadence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnCadence::PerTick => f.write_str("tick"),
            LearnCadence::PerTransition(k) => write!(f, "transition:{k}"),
        }
    }
}

impl FromStr for LearnCadence {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "tick" {
            return Ok(LearnCadence::PerTick);
        }
        s.strip_prefix("transition:")
            .and_then(|k| k.parse::<u32>().ok())
            .filter(|&k| k >= 1)
            .map(LearnCadence::PerTransition)
            .ok_or_else(|| format!("bad learn cadence '{s}' (expected tick or transition:<k>=1..)"))
    }
}

/// Actor, replay buffer and learning switches used by the episode loop.
#[derive(Debug, Clone)]
pub struct Learner {
    pub agent: Td3Agent,
    pub replay: PrioritizedReplay,
    /// Transitions required before learning starts.
    pub warmup: usize,
    pub learning: bool,
    pub exploring: bool,
    pub cadence: LearnCadence,
    /// Environment steps seen while learning is enabled; drives β.
    pub env_steps: u64,
}

impl Learner {
    pub fn new<R: Rng + ?Sized>(
        td3: Td3Config,
        replay: ReplayConfig,
        warmup: usize,
        cadence: LearnCadence,
        rng: &mut R,
    ) -> Result<Self, EnvError> {
        let mut agent = Td3Agent::new(td3, STATE_DIM, ACTION_DIM, rng)?;
        agent.set_state_scale(state_scales())?;
        Ok(Learner {
            agent,
            replay: PrioritizedReplay::new(replay, STATE_DIM, ACTION_DIM)?,
            warmup,
            learning: true,
            exploring: true,
            cadence,
            env_steps: 0,
        })
    }

    /// Same as [`Learner::new`] with a dedicated ChaCha stream for the
    /// initial weights.
    pub fn seeded(
        td3: Td3Config,
        replay: ReplayConfig,
        warmup: usize,
        cadence: LearnCadence,
        seed: u64,
    ) -> Result<Self, EnvError> {
        Self::new(td3, replay, warmup, cadence, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn ready(&self) -> bool {
        self.learning && self.replay.len() >= self.warmup.max(self.agent.config().batch)
    }

    fn learn_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(), EnvError> {
        let batch = self.replay.sample(self.agent.config().batch, rng)?;
        let report = self.agent.learn(&batch.transitions, &batch.is_weights, rng)?;
        self.replay.update_priorities(&batch.indices, &report.td_errors);
        Ok(())
    }
}

/// One executed RL proposal awaiting its successor state.
struct PendingTransition {
    state: Vec<f64>,
    action: [f64; ACTION_DIM],
    reward: f64,
}

struct Tracker {
    polyline: WaypointPolyline,
    segment: usize,
    ticks: usize,
    max_ticks: usize,
}

impl Tracker {
    fn new(polyline: WaypointPolyline, cfg: &EnvConfig) -> Self {
        let nominal = polyline.length() / cfg.rl_speed / cfg.dt;
        Tracker {
            polyline,
            segment: 0,
            ticks: 0,
            max_ticks: (3.0 * nominal).ceil() as usize + 20,
        }
    }

    /// Advances past reached waypoints; true once the polyline is done.
    fn update(&mut self, position: Vec2, tol: f64) -> bool {
        let v = self.polyline.vertices();
        while self.segment < WAYPOINTS {
            let (a, b) = (v[self.segment], v[self.segment + 1]);
            let along = (b - a).dot(position - a) / (b - a).norm_sq().max(1e-12);
            if position.distance(b) < tol || along >= 1.0 {
                self.segment += 1;
            } else {
                break;
            }
        }
        self.segment >= WAYPOINTS || self.ticks >= self.max_ticks
    }

    fn command(&self, state: &VehicleState, cfg: &EnvConfig) -> Command {
        let v = self.polyline.vertices();
        let (a, b) = (v[self.segment], v[self.segment + 1]);
        let Ok(line) = GuidanceLine::new(a, b) else {
            return Command::HOVER;
        };
        let errors = line.errors(state.position, state.yaw);
        let gains = TravelGains {
            cruise_speed: cfg.rl_speed,
            ..cfg.travel
        };
        let mut cmd = travel_command(&errors, state.speed, &gains);
        // slow down while turning onto a new segment
        cmd.speed *= errors.heading.cos().clamp(0.2, 1.0);
        cmd
    }
}

/// Short hop toward the direction with the most clearance, used when the
/// checker rejects and no escape sector exists.
fn retreat_polyline(world: &World, state: &VehicleState, goal: Vec2) -> WaypointPolyline {
    const HEADINGS: usize = 16;
    const HOP: f64 = 2.0;
    let goal_bearing = (goal - state.position).angle();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY, 0.0);
    for k in 0..HEADINGS {
        let heading = k as f64 * std::f64::consts::TAU / HEADINGS as f64;
        let clear = world.clearance(state.position + Vec2::from_angle(heading) * HOP);
        let off_goal = wrap_angle(heading - goal_bearing).abs();
        if clear > best.0 + 1e-9 || ((clear - best.0).abs() <= 1e-9 && off_goal < best.1) {
            best = (clear, off_goal, heading);
        }
    }
    let dir = Vec2::from_angle(best.2);
    let mut waypoints = [state.position; WAYPOINTS];
    for (k, w) in waypoints.iter_mut().enumerate() {
        *w = state.position + dir * (HOP * (k + 1) as f64 / WAYPOINTS as f64);
    }
    WaypointPolyline {
        origin: state.position,
        waypoints,
        provenance: Provenance::Escape,
    }
}

/// Runs one episode. Transitions are pushed to the learner's replay buffer
/// only for RL-mode proposals; learning steps happen on RL-mode ticks.
pub fn run_episode<R: Rng + ?Sized>(
    world: &World,
    cfg: &EnvConfig,
    learner: &mut Learner,
    rng: &mut R,
) -> Result<EpisodeResult, EnvError> {
    let goal = world.goal;
    let table = &cfg.rewards;
    let mut state = VehicleState::at_rest(world.start, cfg.cruise_altitude, (goal - world.start).angle());
    let mut arbiter = ArbiterState::new(if cfg.force_rl { Mode::Rl } else { Mode::Travel });
    arbiter.guidance_line = GuidanceLine::new(world.start, goal).ok();
    let mut landing_line = arbiter.guidance_line;

    let mut total_return = 0.0;
    let mut trajectory = vec![TrajectoryPoint {
        t: 0.0,
        position: state.position,
        altitude: state.altitude,
        mode: arbiter.mode,
    }];
    let mut prev_dist = state.position.distance(goal);
    let mut pending: Option<PendingTransition> = None;
    let mut tracker: Option<Tracker> = None;
    let mut recent_endpoints: VecDeque<Vec2> = VecDeque::new();
    let mut history: VecDeque<Vec2> = VecDeque::from([state.position]);
    let mut departed = false;
    let mut in_zone = world.min_range(state.position, cfg.sensor.max_range).is_some_and(|d| d <= table.proximity_radius);
    let mut safe_exit_paid = false;
    let mut excursion_contact = false;
    let mut settle_clock = 0.0;
    let mut transitions = 0;
    let mut rl_steps = 0;
    let mut rejected = 0;
    let mut outcome = Outcome::StepLimit;
    let mut steps = 0;

    let explore_ctx = ExploreContext { goal };

    let finish = |learner: &mut Learner,
                  pending: &mut Option<PendingTransition>,
                  next_state: Vec<f64>,
                  done: bool,
                  transitions: &mut usize,
                  rng: &mut R|
     -> Result<(), EnvError> {
        if let Some(p) = pending.take() {
            learner.replay.push(Transition {
                state: p.state,
                action: p.action.to_vec(),
                reward: p.reward,
                next_state,
                done,
            })?;
            *transitions += 1;
            if let LearnCadence::PerTransition(k) = learner.cadence {
                for _ in 0..k {
                    if learner.ready() {
                        learner.learn_step(rng)?;
                    }
                }
            }
        }
        Ok(())
    };

    for step in 1..=cfg.step_limit {
        steps = step;
        let scan = world.scan(&state, &cfg.sensor);
        let d_min = world.min_range(state.position, cfg.sensor.max_range);
        let s_fuzzy = cfg.fuzzy.safety_score(&scan).map(|s| s.value()).unwrap_or(0.0);
        let dist = state.position.distance(goal);
        let inputs = ArbiterInputs {
            d_min,
            s_fuzzy,
            dist_to_goal: dist,
            los_to_goal: world.line_of_sight(state.position, goal, cfg.arbiter.los_clearance),
        };
        let mut desired = desired_mode(&inputs, arbiter.mode, &cfg.arbiter);
        if cfg.force_rl && desired == Mode::Travel {
            desired = Mode::Rl;
        }
        let previous = arbiter.mode;
        let mut ev = StepEvents::default();
        if arbiter.step(desired, &cfg.arbiter) {
            if previous == Mode::Rl {
                let clean = !excursion_contact;
                if arbiter.mode == Mode::Travel && clean && !(table.safe_exit_one_shot && safe_exit_paid) {
                    ev.safe_exit = true;
                    safe_exit_paid = true;
                }
                tracker = None;
            }
            match arbiter.mode {
                Mode::Travel => {
                    arbiter.guidance_line = GuidanceLine::new(state.position, goal).ok();
                    departed = false;
                }
                Mode::Landing => {
                    landing_line = arbiter.guidance_line.or_else(|| GuidanceLine::new(state.position, goal).ok());
                    settle_clock = 0.0;
                }
                Mode::Rl => {
                    excursion_contact = false;
                    tracker = None;
                }
            }
        }

        let mut cmd = match arbiter.mode {
            Mode::Travel => {
                if arbiter.guidance_line.is_none() {
                    arbiter.guidance_line = GuidanceLine::new(state.position, goal).ok();
                }
                match &arbiter.guidance_line {
                    Some(line) => {
                        let errors = line.errors(state.position, state.yaw);
                        if errors.cross_track.abs() > table.line_departure_threshold {
                            if !departed {
                                ev.line_departure = true;
                                departed = true;
                            }
                        } else {
                            departed = false;
                        }
                        travel_command(&errors, state.speed, &cfg.travel)
                    }
                    None => Command::HOVER,
                }
            }
            Mode::Rl => {
                rl_steps += 1;
                let finished = tracker.as_mut().map_or(true, |t| t.update(state.position, cfg.waypoint_tolerance));
                if finished {
                    let encoded = encode_state(world, &state, cfg.sensor.max_range);
                    finish(learner, &mut pending, encoded.clone(), false, &mut transitions, rng)?;
                    let raw = learner.agent.act(&encoded)?;
                    let mut proposal = decode_action(&raw, &state);
                    if learner.exploring {
                        proposal = explore(&proposal, &cfg.exploration, &explore_ctx, rng);
                    }
                    let executed = if cfg.checker.enabled {
                        let checked = check_and_score(&proposal, world, goal, &cfg.checker);
                        if checked.verdict == Verdict::Reject {
                            rejected += 1;
                            escape_line(&state, &scan, goal, cfg.sensor.max_range, &cfg.checker)
                                .filter(|e| check_and_score(e, world, goal, &cfg.checker).verdict != Verdict::Reject)
                                .unwrap_or_else(|| retreat_polyline(world, &state, goal))
                        } else {
                            checked.polyline
                        }
                    } else {
                        proposal
                    };
                    let end = executed.endpoint();
                    ev.endpoint = Some(if recent_endpoints.iter().any(|p| p.distance(end) <= table.revisit_radius) {
                        EndpointNovelty::Revisit
                    } else {
                        EndpointNovelty::Novel
                    });
                    recent_endpoints.push_back(end);
                    while recent_endpoints.len() > table.revisit_memory {
                        recent_endpoints.pop_front();
                    }
                    pending = Some(PendingTransition {
                        state: encoded,
                        action: encode_action(if cfg.store_proposal { &proposal } else { &executed }, &state),
                        reward: 0.0,
                    });
                    let mut t = Tracker::new(executed, cfg);
                    t.update(state.position, cfg.waypoint_tolerance);
                    tracker = Some(t);
                }
                match tracker.as_mut() {
                    Some(t) if t.segment < WAYPOINTS => {
                        t.ticks += 1;
                        t.command(&state, cfg)
                    }
                    _ => Command::HOVER,
                }
            }
            Mode::Landing => match &landing_line {
                Some(line) => landing_command(&state, goal, world.goal_altitude, line, &cfg.landing),
                None => Command::HOVER,
            },
        };
        if arbiter.mode != Mode::Landing {
            cmd.vertical_rate = (cfg.altitude_gain * (cfg.cruise_altitude - state.altitude))
                .clamp(-cfg.limits.max_vertical_rate, cfg.limits.max_vertical_rate);
        }

        let before = state;
        state = step_kinematics(&state, cmd, cfg.dt, &cfg.limits);
        let mut terminal = false;
        if !world.bounds.contains(state.position) {
            ev.out_of_bounds = true;
            outcome = Outcome::OutOfBounds;
            terminal = true;
        } else if world.obstacle_contact(state.position, cfg.safety_radius) {
            excursion_contact = true;
            if table.recoverable_crash.is_some() && table.terminal_crash.is_none() {
                ev.contact = Contact::Recoverable;
                state = VehicleState {
                    speed: 0.0,
                    yaw_rate: 0.0,
                    ..before
                };
                tracker = None;
            } else {
                ev.contact = Contact::Terminal;
                outcome = Outcome::Crash;
                terminal = true;
            }
        }

        let d_curr = state.position.distance(goal);
        ev.progress = prev_dist - d_curr;
        prev_dist = d_curr;
        let d_min_now = world.min_range(state.position, cfg.sensor.max_range);
        ev.d_min = d_min_now;
        let zone_now = d_min_now.is_some_and(|d| d <= table.proximity_radius);
        ev.zone_exit = in_zone && !zone_now;
        in_zone = zone_now;

        if !terminal && arbiter.mode == Mode::Landing {
            let heading = landing_line.map_or(state.yaw, |l| l.heading);
            if touchdown_conditions(&state, goal, world.goal_altitude, heading, &cfg.landing) {
                settle_clock += cfg.dt;
            } else {
                settle_clock = 0.0;
            }
            if touchdown_met(&state, goal, world.goal_altitude, heading, &cfg.landing, settle_clock)
                && d_curr < table.goal_radius
            {
                ev.goal_reached = true;
                outcome = Outcome::Success;
                terminal = true;
            }
        }

        history.push_back(state.position);
        while history.len() > table.no_progress_window + 1 {
            history.pop_front();
        }
        if !terminal
            && table.no_progress.is_some()
            && arbiter.mode != Mode::Landing
            && history.len() > table.no_progress_window
            && history.front().unwrap().distance(state.position) < table.no_progress_displacement
        {
            ev.no_progress = true;
            outcome = Outcome::NoProgress;
            terminal = true;
        }

        let r = reward_step(&ev, table);
        total_return += r;
        if let Some(p) = pending.as_mut() {
            p.reward += r;
        }
        trajectory.push(TrajectoryPoint {
            t: step as f64 * cfg.dt,
            position: state.position,
            altitude: state.altitude,
            mode: arbiter.mode,
        });

        if terminal {
            let encoded = encode_state(world, &state, cfg.sensor.max_range);
            finish(learner, &mut pending, encoded, true, &mut transitions, rng)?;
            break;
        }
        if previous == Mode::Rl && arbiter.mode != Mode::Rl {
            // the RL excursion ends here; its value does not bootstrap into
            // the controllers that take over
            let encoded = encode_state(world, &state, cfg.sensor.max_range);
            finish(learner, &mut pending, encoded, true, &mut transitions, rng)?;
        }
        if arbiter.mode == Mode::Rl && learner.learning {
            if learner.cadence == LearnCadence::PerTick && learner.ready() {
                learner.learn_step(rng)?;
            }
            learner.env_steps += 1;
            learner.replay.anneal_beta_steps(learner.env_steps);
        }
    }
    if outcome == Outcome::StepLimit {
        let encoded = encode_state(world, &state, cfg.sensor.max_range);
        finish(learner, &mut pending, encoded, false, &mut transitions, rng)?;
    }

    Ok(EpisodeResult {
        outcome,
        steps,
        total_return,
        switch_count: arbiter.switch_count(),
        switch_log: arbiter.switch_log,
        trajectory,
        transitions,
        rl_steps,
        rejected_proposals: rejected,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: usize,
    pub total_return: f64,
    pub success: bool,
    pub switches: usize,
    pub outcome: Outcome,
}

pub const EPISODE_LOG_HEADER: &str = "episode,steps,return,success,switches,outcome";

impl EpisodeLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.episode,
            self.steps,
            self.total_return,
            u8::from(self.success),
            self.switches,
            self.outcome
        )
    }

    pub fn parse_row(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(format!("expected 6 fields, found {}", f.len()));
        }
        let num = |i: usize, name: &str| f[i].trim().parse::<f64>().map_err(|_| format!("bad {name} '{}'", f[i]));
        let int = |i: usize, name: &str| f[i].trim().parse::<usize>().map_err(|_| format!("bad {name} '{}'", f[i]));
        Ok(EpisodeLog {
            episode: int(0, "episode")?,
            steps: int(1, "steps")?,
            total_return: num(2, "return")?,
            success: match f[3].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(format!("bad success '{other}'")),
            },
            switches: int(4, "switches")?,
            outcome: f[5].trim().parse()?,
        })
    }
}

/// Parses an episode log CSV; errors name the 1-based line.
pub fn parse_episode_log(text: &str) -> Result<Vec<EpisodeLog>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EPISODE_LOG_HEADER => {}
        Some((_, h)) => return Err(format!("line 1: expected header '{EPISODE_LOG_HEADER}', found '{h}'")),
        None => return Err("empty episode log".into()),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, l)| EpisodeLog::parse_row(l).map_err(|e| format!("line {}: {e}", idx + 1)))
        .collect()
}

pub fn episode_log_csv(rows: &[EpisodeLog]) -> String {
    let mut s = format!("{EPISODE_LOG_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_episodes: usize,
    pub success_target: usize,
    pub warmup: usize,
    pub cadence: LearnCadence,
    pub ma_window: usize,
    pub td3: Td3Config,
    pub replay: ReplayConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            max_episodes: 2000,
            success_target: 100,
            warmup: 128,
            cadence: LearnCadence::PerTransition(16),
            ma_window: 15,
            // Tuned for the sparse polyline decisions the navigator makes:
            // a slow actor keeps early greedy proposals from saturating.
            td3: Td3Config {
                hidden: vec![128, 128],
                optimizer: OptimizerKind::Adam,
                critic_lr: 1e-3,
                actor_lr: 3e-5,
                reward_scale: 0.01,
                ..Td3Config::default()
            },
            replay: ReplayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub episodes: usize,
    pub successes: usize,
    /// 1-based episode at which the success target was met.
    pub episodes_to_target: Option<usize>,
    pub final_ma_steps: Option<f64>,
    pub final_ma_return: Option<f64>,
    pub total_switches: usize,
}

/// Training driver: owns the learner and the run RNG.
pub struct Trainer {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub world: World,
    pub learner: Learner,
    pub rng: ChaCha8Rng,
    pub log: Vec<EpisodeLog>,
    pub successes: usize,
}

impl Trainer {
    pub fn new(env: EnvConfig, train: TrainConfig, world: World) -> Result<Self, EnvError> {
        env.validate().map_err(EnvError::Config)?;
        train.td3.validate()?;
        train.replay.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        let learner = Learner::new(train.td3.clone(), train.replay, train.warmup, train.cadence, &mut rng)?;
        Ok(Trainer {
            env,
            train,
            world,
            learner,
            rng,
            log: Vec::new(),
            successes: 0,
        })
    }

    pub fn episode_index(&self) -> usize {
        self.log.len()
    }

    pub fn done(&self) -> bool {
        self.log.len() >= self.train.max_episodes || self.successes >= self.train.success_target
    }

    /// Runs the next training episode and appends its log row.
    pub fn run_next(&mut self) -> Result<EpisodeResult, EnvError> {
        self.env.exploration.episode = self.log.len() as u64;
        let result = run_episode(&self.world, &self.env, &mut self.learner, &mut self.rng)?;
        if result.success() {
            self.successes += 1;
        }
        self.log.push(EpisodeLog {
            episode: self.log.len() + 1,
            steps: result.steps,
            total_return: result.total_return,
            success: result.success(),
            switches: result.switch_count,
            outcome: result.outcome,
        });
        Ok(result)
    }

    /// Trains until the success target or episode cap; `observer` sees every
    /// finished episode and may abort with its own error.
    pub fn run<E: From<EnvError>>(
        &mut self,
        mut observer: impl FnMut(&Trainer, &EpisodeResult) -> Result<(), E>,
    ) -> Result<TrainSummary, E> {
        while !self.done() {
            let result = self.run_next()?;
            observer(self, &result)?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> TrainSummary {
        let steps: Vec<f64> = self.log.iter().map(|l| l.steps as f64).collect();
        let returns: Vec<f64> = self.log.iter().map(|l| l.total_return).collect();
        let mut count = 0;
        let episodes_to_target = self.log.iter().position(|l| {
            count += usize::from(l.success);
            count >= self.train.success_target
        });
        TrainSummary {
            episodes: self.log.len(),
            successes: self.successes,
            episodes_to_target: episodes_to_target.map(|i| i + 1),
            final_ma_steps: moving_average(&steps, self.train.ma_window).last().copied(),
            final_ma_return: moving_average(&returns, self.train.ma_window).last().copied(),
            total_switches: self.log.iter().map(|l| l.switches).sum(),
        }
    }
}

/// Greedy rollouts: no exploration, no learning, no smoothing noise.
pub fn evaluate(
    world: &World,
    env: &EnvConfig,
    learner: &Learner,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeResult>, EnvError> {
    let mut greedy = learner.clone();
    greedy.learning = false;
    greedy.exploring = false;
    let mut out = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        out.push(run_episode(world, env, &mut greedy, &mut rng)?);
    }
    Ok(out)
}
