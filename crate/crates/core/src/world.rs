//! Planar world model: circular obstacles inside an axis-aligned rectangle,
//! ray-cast range sensing, clearance queries and the unicycle integrator.

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world not found: {0}")]
    NotFound(String),
    #[error("failed to read world {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed world file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid world: {0}")]
    Invalid(String),
}

/// A planar point or displacement in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    /// Unit vector with the given heading.
    pub fn from_angle(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Vec2::new(c, s)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise rotation by `theta` radians.
    pub fn rotate(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub center: Vec2,
    pub radius: f64,
}

impl Obstacle {
    pub fn new(center: Vec2, radius: f64) -> Self {
        Obstacle { center, radius }
    }

    /// Signed distance from `p` to the obstacle surface (negative inside).
    pub fn surface_distance(&self, p: Vec2) -> f64 {
        p.distance(self.center) - self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.xmin && p.x <= self.xmax && p.y >= self.ymin && p.y <= self.ymax
    }

    /// Signed distance to the nearest edge; positive inside.
    pub fn edge_distance(&self, p: Vec2) -> f64 {
        (p.x - self.xmin)
            .min(self.xmax - p.x)
            .min(p.y - self.ymin)
            .min(self.ymax - p.y)
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct ObstacleRecord {
    x: f64,
    y: f64,
    r: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    bounds: Bounds,
    start: Vec2,
    goal: Vec2,
    goal_altitude: f64,
    #[serde(default)]
    obstacles: Vec<ObstacleRecord>,
}

/// Immutable scene description.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub obstacles: Vec<Obstacle>,
    pub bounds: Bounds,
    pub start: Vec2,
    pub goal: Vec2,
    pub goal_altitude: f64,
}

/// Vehicle radius used to validate start/goal placement when none is given.
pub const DEFAULT_SAFETY_RADIUS: f64 = 0.5;

impl World {
    /// Builds a world without placement checks. Use [`World::validate`]
    /// before handing it to an episode.
    pub fn new(bounds: Bounds, start: Vec2, goal: Vec2, goal_altitude: f64) -> Self {
        World {
            obstacles: Vec::new(),
            bounds,
            start,
            goal,
            goal_altitude,
        }
    }

    pub fn with_obstacles(mut self, obstacles: impl IntoIterator<Item = Obstacle>) -> Self {
        self.obstacles.extend(obstacles);
        self
    }

    pub fn validate(&self, safety_radius: f64) -> Result<(), WorldError> {
        let b = &self.bounds;
        let bad = |m: String| Err(WorldError::Invalid(m));
        if ![b.xmin, b.ymin, b.xmax, b.ymax].iter().all(|v| v.is_finite()) {
            return bad("bounds must be finite".into());
        }
        if b.xmax <= b.xmin || b.ymax <= b.ymin {
            return bad("bounds must have xmax > xmin and ymax > ymin".into());
        }
        if !self.goal_altitude.is_finite() {
            return bad("goal_altitude must be finite".into());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !o.center.is_finite() || !o.radius.is_finite() {
                return bad(format!("obstacle {i} is not finite"));
            }
            if o.radius <= 0.0 {
                return bad(format!("obstacle {i} has non-positive radius {}", o.radius));
            }
        }
        for (name, p) in [("start", self.start), ("goal", self.goal)] {
            if !p.is_finite() || !b.contains(p) {
                return bad(format!("{name} ({}, {}) lies outside bounds", p.x, p.y));
            }
            if let Some(i) = self
                .obstacles
                .iter()
                .position(|o| o.surface_distance(p) < safety_radius)
            {
                return bad(format!("{name} lies within {safety_radius} m of obstacle {i}"));
            }
        }
        Ok(())
    }

    pub fn from_json_str(s: &str, safety_radius: f64) -> Result<Self, WorldError> {
        let file: WorldFile = serde_json::from_str(s)?;
        let world = World {
            obstacles: file
                .obstacles
                .iter()
                .map(|o| Obstacle::new(Vec2::new(o.x, o.y), o.r))
                .collect(),
            bounds: file.bounds,
            start: file.start,
            goal: file.goal,
            goal_altitude: file.goal_altitude,
        };
        world.validate(safety_radius)?;
        Ok(world)
    }

    pub fn load(path: &Path, safety_radius: f64) -> Result<Self, WorldError> {
        if !path.exists() {
            return Err(WorldError::NotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| WorldError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text, safety_radius)
    }

    pub fn to_json_string(&self) -> String {
        let file = WorldFile {
            bounds: self.bounds,
            start: self.start,
            goal: self.goal,
            goal_altitude: self.goal_altitude,
            obstacles: self
                .obstacles
                .iter()
                .map(|o| ObstacleRecord {
                    x: o.center.x,
                    y: o.center.y,
                    r: o.radius,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("world serializes")
    }

    /// One of the worlds shipped with the crate (`traj1` or `traj2`).
    pub fn bundled(name: &str) -> Option<World> {
        let text = match name {
            "traj1" => include_str!("../../../worlds/traj1.json"),
            "traj2" => include_str!("../../../worlds/traj2.json"),
            _ => return None,
        };
        Some(Self::from_json_str(text, DEFAULT_SAFETY_RADIUS).expect("bundled world is valid"))
    }

    /// Distance along the ray to the first obstacle surface or bounds edge,
    /// clamped to `max_range`.
    pub fn raycast(&self, origin: Vec2, heading: f64, max_range: f64) -> f64 {
        let dir = Vec2::from_angle(heading);
        let mut best = max_range.min(ray_box_exit(&self.bounds, origin, dir));
        for o in &self.obstacles {
            if let Some(t) = ray_circle(origin, dir, o) {
                if t < best {
                    best = t;
                }
            }
        }
        best.max(0.0)
    }

    /// Body-relative range scan; bearing 0 is vehicle forward.
    pub fn scan(&self, state: &VehicleState, cfg: &SensorConfig) -> Vec<ScanRay> {
        (0..cfg.ray_count)
            .map(|i| {
                let bearing_deg = cfg.bearing_deg(i);
                let heading = state.yaw + bearing_deg.to_radians();
                ScanRay {
                    bearing_deg,
                    range: self.raycast(state.position, heading, cfg.max_range),
                }
            })
            .collect()
    }

    /// Nearest obstacle-surface distance among obstacles whose surface lies
    /// within `sensing_radius`; `None` if nothing is that close.
    pub fn min_range(&self, position: Vec2, sensing_radius: f64) -> Option<f64> {
        self.obstacles
            .iter()
            .map(|o| o.surface_distance(position).max(0.0))
            .filter(|&d| d <= sensing_radius)
            .min_by(f64::total_cmp)
    }

    /// True iff segment `a`–`b` keeps at least `clearance` from every
    /// obstacle surface.
    pub fn line_of_sight(&self, a: Vec2, b: Vec2, clearance: f64) -> bool {
        // canonical endpoint order keeps the predicate exactly symmetric
        let (p, q) = if (a.x, a.y) <= (b.x, b.y) { (a, b) } else { (b, a) };
        self.obstacles
            .iter()
            .all(|o| segment_point_distance(p, q, o.center) - o.radius >= clearance)
    }

    /// True iff `position` is strictly closer than `safety_radius` to an
    /// obstacle surface, or outside the bounds.
    pub fn collides(&self, position: Vec2, safety_radius: f64) -> bool {
        !self.bounds.contains(position) || self.obstacle_contact(position, safety_radius)
    }

    /// Obstacle part of [`World::collides`], ignoring bounds.
    pub fn obstacle_contact(&self, position: Vec2, safety_radius: f64) -> bool {
        self.obstacles
            .iter()
            .any(|o| o.surface_distance(position) < safety_radius)
    }

    /// Signed clearance from `p` to the nearest obstacle surface or bounds edge.
    pub fn clearance(&self, p: Vec2) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.surface_distance(p))
            .fold(self.bounds.edge_distance(p), f64::min)
    }

    /// Obstacle nearest to `p` by surface distance.
    pub fn nearest_obstacle(&self, p: Vec2) -> Option<&Obstacle> {
        self.obstacles
            .iter()
            .min_by(|a, b| a.surface_distance(p).total_cmp(&b.surface_distance(p)))
    }
}

fn ray_circle(origin: Vec2, dir: Vec2, o: &Obstacle) -> Option<f64> {
    let m = origin - o.center;
    let c = m.norm_sq() - o.radius * o.radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = m.dot(dir);
    if b >= 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}

fn ray_box_exit(bounds: &Bounds, origin: Vec2, dir: Vec2) -> f64 {
    if !bounds.contains(origin) {
        return 0.0;
    }
    let axis = |p: f64, d: f64, lo: f64, hi: f64| {
        if d > 0.0 {
            (hi - p) / d
        } else if d < 0.0 {
            (lo - p) / d
        } else {
            f64::INFINITY
        }
    };
    axis(origin.x, dir.x, bounds.xmin, bounds.xmax).min(axis(origin.y, dir.y, bounds.ymin, bounds.ymax))
}

/// Euclidean distance from `p` to the closed segment `a`–`b`.
pub fn segment_point_distance(a: Vec2, b: Vec2, p: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_sq();
    if len2 == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanRay {
    /// Body-relative bearing in degrees, `[0, 360)`.
    pub bearing_deg: f64,
    pub range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    pub ray_count: usize,
    pub max_range: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            ray_count: 36,
            max_range: 55.0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.ray_count < 4 {
            return Err(format!("ray_count must be >= 4, got {}", self.ray_count));
        }
        if !(self.max_range > 0.0) {
            return Err(format!("max_range must be > 0, got {}", self.max_range));
        }
        Ok(())
    }

    /// Bearing of ray `i` in degrees; rays are evenly spaced starting at 0.
    pub fn bearing_deg(&self, i: usize) -> f64 {
        360.0 * i as f64 / self.ray_count as f64
    }

    pub fn spacing_deg(&self) -> f64 {
        360.0 / self.ray_count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub position: Vec2,
    pub altitude: f64,
    /// Radians, kept in (−π, π].
    pub yaw: f64,
    pub speed: f64,
    pub yaw_rate: f64,
    pub vertical_rate: f64,
}

impl VehicleState {
    pub fn at_rest(position: Vec2, altitude: f64, yaw: f64) -> Self {
        VehicleState {
            position,
            altitude,
            yaw: wrap_angle(yaw),
            speed: 0.0,
            yaw_rate: 0.0,
            vertical_rate: 0.0,
        }
    }

    pub fn velocity(&self) -> Vec2 {
        Vec2::from_angle(self.yaw) * self.speed
    }
}

/// Speed, yaw-rate and climb-rate command.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Command {
    pub speed: f64,
    pub yaw_rate: f64,
    pub vertical_rate: f64,
}

impl Command {
    pub const HOVER: Command = Command {
        speed: 0.0,
        yaw_rate: 0.0,
        vertical_rate: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicLimits {
    pub max_speed: f64,
    pub max_yaw_rate: f64,
    pub max_vertical_rate: f64,
}

impl Default for KinematicLimits {
    fn default() -> Self {
        KinematicLimits {
            max_speed: 3.0,
            max_yaw_rate: 1.5,
            max_vertical_rate: 1.0,
        }
    }
}

impl KinematicLimits {
    pub fn saturate(&self, cmd: Command) -> Command {
        Command {
            speed: cmd.speed.clamp(0.0, self.max_speed),
            yaw_rate: cmd.yaw_rate.clamp(-self.max_yaw_rate, self.max_yaw_rate),
            vertical_rate: cmd
                .vertical_rate
                .clamp(-self.max_vertical_rate, self.max_vertical_rate),
        }
    }
}

/// Unicycle step: yaw first, then translate along the new heading.
pub fn step_kinematics(
    state: &VehicleState,
    cmd: Command,
    dt: f64,
    limits: &KinematicLimits,
) -> VehicleState {
    let cmd = limits.saturate(cmd);
    let yaw = wrap_angle(state.yaw + cmd.yaw_rate * dt);
    VehicleState {
        position: state.position + Vec2::from_angle(yaw) * (cmd.speed * dt),
        altitude: state.altitude + cmd.vertical_rate * dt,
        yaw,
        speed: cmd.speed,
        yaw_rate: cmd.yaw_rate,
        vertical_rate: cmd.vertical_rate,
    }
}
