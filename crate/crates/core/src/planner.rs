//! RL-mode waypoint pipeline: action decoding, geometry-space exploration,
//! the trajectory checker and the escape line.

use std::f64::consts::PI;

use rand::Rng;

use crate::world::{wrap_angle, ScanRay, Vec2, VehicleState, World};

pub const WAYPOINTS: usize = 5;
pub const ACTION_DIM: usize = 2 * WAYPOINTS;
pub const ACTION_BOUND: f64 = 3.0;
/// Shortest allowed segment between consecutive waypoints.
pub const MIN_SEGMENT: f64 = 1e-3;
/// Spacing of the forward stub that replaces degenerate offsets.
pub const STUB_SPACING: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Actor,
    Random,
    Modified,
    Escape,
}

/// Five world-frame waypoints starting from `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaypointPolyline {
    pub origin: Vec2,
    pub waypoints: [Vec2; WAYPOINTS],
    pub provenance: Provenance,
}

impl WaypointPolyline {
    /// Origin followed by the five waypoints.
    pub fn vertices(&self) -> [Vec2; WAYPOINTS + 1] {
        let mut v = [self.origin; WAYPOINTS + 1];
        v[1..].copy_from_slice(&self.waypoints);
        v
    }

    pub fn length(&self) -> f64 {
        self.vertices().windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    pub fn endpoint(&self) -> Vec2 {
        self.waypoints[WAYPOINTS - 1]
    }

    /// Sum of absolute heading changes at the interior vertices.
    pub fn total_turning(&self) -> f64 {
        let v = self.vertices();
        v.windows(3)
            .map(|w| {
                let a = w[1] - w[0];
                let b = w[2] - w[1];
                if a.norm() == 0.0 || b.norm() == 0.0 {
                    0.0
                } else {
                    wrap_angle(b.angle() - a.angle()).abs()
                }
            })
            .sum()
    }

    pub fn min_segment(&self) -> f64 {
        self.vertices()
            .windows(2)
            .map(|w| w[0].distance(w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn translated(&self, by: Vec2) -> Self {
        let mut out = *self;
        out.origin += by;
        for w in &mut out.waypoints {
            *w += by;
        }
        out
    }
}

/// Decodes a 10-vector of interleaved body-frame offsets `(x1, y1, …, x5, y5)`
/// into a chained world-frame polyline. Components are clamped to ±3 and
/// any offset shorter than [`MIN_SEGMENT`] becomes a 0.5 m forward stub.
pub fn decode_action(action: &[f64], state: &VehicleState) -> WaypointPolyline {
    assert_eq!(action.len(), ACTION_DIM, "action must have {ACTION_DIM} components");
    let forward = Vec2::from_angle(state.yaw) * STUB_SPACING;
    let mut waypoints = [state.position; WAYPOINTS];
    let mut prev = state.position;
    for (k, w) in waypoints.iter_mut().enumerate() {
        let x = clamp_action(action[2 * k]);
        let y = clamp_action(action[2 * k + 1]);
        let offset = Vec2::new(x, y).rotate(state.yaw);
        let offset = if offset.norm() <= MIN_SEGMENT { forward } else { offset };
        prev += offset;
        *w = prev;
    }
    WaypointPolyline {
        origin: state.position,
        waypoints,
        provenance: Provenance::Actor,
    }
}

/// Inverse of [`decode_action`] for an executed polyline, clamped to the
/// action box.
pub fn encode_action(polyline: &WaypointPolyline, state: &VehicleState) -> [f64; ACTION_DIM] {
    let mut a = [0.0; ACTION_DIM];
    let v = polyline.vertices();
    for k in 0..WAYPOINTS {
        let local = (v[k + 1] - v[k]).rotate(-state.yaw);
        a[2 * k] = clamp_action(local.x);
        a[2 * k + 1] = clamp_action(local.y);
    }
    a
}

fn clamp_action(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(-ACTION_BOUND, ACTION_BOUND)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationSchedule {
    pub eps0: f64,
    pub decay: f64,
    pub eps_min: f64,
    /// Bound on per-waypoint perturbation length.
    pub rho: f64,
    pub episode: u64,
    /// Multipliers applied to the first two uniform draws of a random
    /// proposal (detour heading and curvature blend).
    pub heading_scale: f64,
    pub curvature_scale: f64,
    pub spacing_min: f64,
    pub spacing_max: f64,
}

impl Default for ExplorationSchedule {
    fn default() -> Self {
        ExplorationSchedule {
            eps0: 1.0,
            decay: 0.995,
            eps_min: 0.05,
            rho: 1.0,
            episode: 0,
            heading_scale: 1.5,
            curvature_scale: 1.5,
            spacing_min: 1.0,
            spacing_max: 3.0,
        }
    }
}

impl ExplorationSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err("exploration decay must lie in (0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.eps0) || !(0.0..=self.eps0).contains(&self.eps_min) {
            return Err("exploration requires 0 <= eps_min <= eps0 <= 1".into());
        }
        if self.rho < 0.0 {
            return Err("exploration rho must be >= 0".into());
        }
        if !(self.spacing_min > 0.0 && self.spacing_min <= self.spacing_max) {
            return Err("exploration spacing range is invalid".into());
        }
        Ok(())
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_at(self, self.episode)
    }
}

/// `max(eps_min, eps0 * decay^t)`
pub fn epsilon_at(sched: &ExplorationSchedule, episode: u64) -> f64 {
    let t = episode.min(i32::MAX as u64) as i32;
    (sched.eps0 * sched.decay.powi(t)).max(sched.eps_min)
}

/// Situational inputs needed to synthesize a random proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExploreContext {
    pub goal: Vec2,
}

/// With probability ε replaces the proposal by a random parametric detour;
/// otherwise nudges every waypoint by ε·Δw with ‖Δw‖ ≤ ρ.
pub fn explore<R: Rng + ?Sized>(
    polyline: &WaypointPolyline,
    sched: &ExplorationSchedule,
    ctx: &ExploreContext,
    rng: &mut R,
) -> WaypointPolyline {
    let eps = sched.epsilon();
    let u: f64 = rng.random();
    if u < eps {
        let params = [
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        ];
        return random_proposal(polyline.origin, ctx.goal, params, sched);
    }
    let mut out = *polyline;
    for w in &mut out.waypoints {
        let r = sched.rho * rng.random::<f64>().sqrt();
        let theta = rng.random_range(0.0..2.0 * PI);
        *w += Vec2::from_angle(theta) * (eps * r);
    }
    out
}

/// Decodes `[-1, 1]^3` into detour side/angle, curvature blend and spacing,
/// then lays five waypoints that bend from the detour heading back toward
/// the goal bearing.
pub fn random_proposal(
    origin: Vec2,
    goal: Vec2,
    params: [f64; 3],
    sched: &ExplorationSchedule,
) -> WaypointPolyline {
    let bearing = (goal - origin).angle();
    let detour = (params[0] * sched.heading_scale).clamp(-1.0, 1.0) * (PI / 2.0);
    let blend = ((params[1] * sched.curvature_scale).clamp(-1.0, 1.0) + 1.0) / 2.0;
    let spacing = sched.spacing_min
        + (params[2].clamp(-1.0, 1.0) + 1.0) / 2.0 * (sched.spacing_max - sched.spacing_min);
    let mut waypoints = [origin; WAYPOINTS];
    let mut prev = origin;
    for (k, w) in waypoints.iter_mut().enumerate() {
        let heading = bearing + detour * (1.0 - blend * k as f64 / (WAYPOINTS - 1) as f64);
        prev += Vec2::from_angle(heading) * spacing;
        *w = prev;
    }
    WaypointPolyline {
        origin,
        waypoints,
        provenance: Provenance::Random,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckerConfig {
    pub clearance_margin: f64,
    pub sample_step: f64,
    pub w_goal: f64,
    pub w_clear: f64,
    pub w_curv: f64,
    pub max_modify_iters: u32,
    pub clear_cap: f64,
    pub enabled: bool,
    /// Minimum angular width of a free sector that yields an escape line.
    pub escape_sector_deg: f64,
    /// Rays at or beyond this range count as free for the escape line.
    pub escape_free_range: f64,
}

impl Default for CheckerConfig {
    fn default() -> Self {
        CheckerConfig {
            clearance_margin: 1.0,
            sample_step: 0.25,
            w_goal: 1.0,
            w_clear: 0.5,
            w_curv: 0.2,
            max_modify_iters: 10,
            clear_cap: 5.0,
            enabled: true,
            escape_sector_deg: 60.0,
            escape_free_range: 10.0,
        }
    }
}

impl CheckerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clearance_margin > 0.0) {
            return Err("checker clearance_margin must be > 0".into());
        }
        if !(self.sample_step > 0.0 && self.sample_step < self.clearance_margin) {
            return Err("checker sample_step must lie in (0, clearance_margin)".into());
        }
        if self.w_curv < 0.0 || self.w_goal < 0.0 || self.w_clear < 0.0 {
            return Err("checker score weights must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Modify,
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckResult {
    pub polyline: WaypointPolyline,
    pub score: f64,
    pub verdict: Verdict,
}

/// Points every `step` meters along the polyline, including all vertices.
pub fn sample_points(polyline: &WaypointPolyline, step: f64) -> Vec<Vec2> {
    let v = polyline.vertices();
    let mut out = vec![v[0]];
    for w in v.windows(2) {
        out.extend(segment_samples(w[0], w[1], step).skip(1));
    }
    out
}

fn segment_samples(a: Vec2, b: Vec2, step: f64) -> impl Iterator<Item = Vec2> {
    let n = ((a.distance(b) / step).ceil() as usize).max(1);
    (0..=n).map(move |i| a + (b - a) * (i as f64 / n as f64))
}

/// Minimum signed clearance over the sampled polyline.
pub fn sampled_clearance(polyline: &WaypointPolyline, world: &World, step: f64) -> f64 {
    sample_points(polyline, step)
        .into_iter()
        .map(|p| world.clearance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Checker score; margin violations score −∞.
pub fn score(polyline: &WaypointPolyline, world: &World, goal: Vec2, cfg: &CheckerConfig) -> f64 {
    let clearance = sampled_clearance(polyline, world, cfg.sample_step);
    if clearance < cfg.clearance_margin {
        return f64::NEG_INFINITY;
    }
    let progress = polyline.origin.distance(goal) - polyline.endpoint().distance(goal);
    cfg.w_goal * progress + cfg.w_clear * clearance.min(cfg.clear_cap) - cfg.w_curv * polyline.total_turning()
}

/// Keeps a proposal that respects the clearance margin; otherwise displaces
/// the waypoints of offending segments along the local surface normal and
/// returns the better of keep/modify, or `Reject` when neither is valid.
pub fn check_and_score(
    polyline: &WaypointPolyline,
    world: &World,
    goal: Vec2,
    cfg: &CheckerConfig,
) -> CheckResult {
    let keep_score = score(polyline, world, goal, cfg);
    if keep_score.is_finite() {
        return CheckResult {
            polyline: *polyline,
            score: keep_score,
            verdict: Verdict::Keep,
        };
    }
    let modified = repair(polyline, world, cfg);
    let mod_score = score(&modified, world, goal, cfg);
    if mod_score.is_finite() && modified.min_segment() > MIN_SEGMENT {
        CheckResult {
            polyline: WaypointPolyline {
                provenance: Provenance::Modified,
                ..modified
            },
            score: mod_score,
            verdict: Verdict::Modify,
        }
    } else {
        CheckResult {
            polyline: *polyline,
            score: f64::NEG_INFINITY,
            verdict: Verdict::Reject,
        }
    }
}

fn repair(polyline: &WaypointPolyline, world: &World, cfg: &CheckerConfig) -> WaypointPolyline {
    // a little beyond the margin so sampling between vertices does not undo the fix
    let target = cfg.clearance_margin + 0.5 * cfg.sample_step;
    let mut verts = polyline.vertices();
    for _ in 0..cfg.max_modify_iters {
        let mut push = [Vec2::ZERO; WAYPOINTS + 1];
        let mut offending = false;
        for seg in 0..WAYPOINTS {
            let (a, b) = (verts[seg], verts[seg + 1]);
            let n = ((a.distance(b) / cfg.sample_step).ceil() as usize).max(1);
            let (t, q, c) = (0..=n)
                .map(|i| {
                    let t = i as f64 / n as f64;
                    let q = a + (b - a) * t;
                    (t, q, world.clearance(q))
                })
                .min_by(|x, y| x.2.total_cmp(&y.2))
                .expect("segment has samples");
            if c >= cfg.clearance_margin {
                continue;
            }
            offending = true;
            let dir = escape_direction(world, q, b - a);
            let deficit = target - c;
            if seg == 0 {
                // origin is fixed; lever the far endpoint
                push[1] += dir * (deficit / t.max(0.25));
            } else {
                push[seg] += dir * deficit;
                push[seg + 1] += dir * deficit;
            }
        }
        if !offending {
            break;
        }
        for k in 1..=WAYPOINTS {
            verts[k] += push[k];
        }
    }
    let mut waypoints = [polyline.origin; WAYPOINTS];
    waypoints.copy_from_slice(&verts[1..]);
    WaypointPolyline {
        origin: polyline.origin,
        waypoints,
        provenance: Provenance::Modified,
    }
}

/// Unit direction that increases clearance at `q`: away from the nearest
/// obstacle centre, or inward from the nearest bounds edge.
fn escape_direction(world: &World, q: Vec2, segment: Vec2) -> Vec2 {
    let b = &world.bounds;
    let edge = b.edge_distance(q);
    let nearest = world.nearest_obstacle(q);
    let obstacle_limits = nearest.is_some_and(|o| o.surface_distance(q) <= edge);
    if let (true, Some(o)) = (obstacle_limits, nearest) {
        let away = q - o.center;
        if away.norm() > 1e-9 {
            return away * (1.0 / away.norm());
        }
        let perp = Vec2::new(-segment.y, segment.x);
        return if perp.norm() > 0.0 { perp * (1.0 / perp.norm()) } else { Vec2::new(1.0, 0.0) };
    }
    let candidates = [
        (q.x - b.xmin, Vec2::new(1.0, 0.0)),
        (b.xmax - q.x, Vec2::new(-1.0, 0.0)),
        (q.y - b.ymin, Vec2::new(0.0, 1.0)),
        (b.ymax - q.y, Vec2::new(0.0, -1.0)),
    ];
    candidates
        .iter()
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map(|c| c.1)
        .expect("four edges")
}

/// Straight five-point escape along the bisector of the widest free sector
/// (ties go to the sector closest to the goal bearing). A scan that is free
/// all the way round escapes along the goal bearing.
pub fn escape_line(
    state: &VehicleState,
    scan: &[ScanRay],
    goal: Vec2,
    max_range: f64,
    cfg: &CheckerConfig,
) -> Option<WaypointPolyline> {
    let n = scan.len();
    if n == 0 {
        return None;
    }
    let free: Vec<bool> = scan.iter().map(|r| r.range >= cfg.escape_free_range.min(max_range)).collect();
    let to_goal = goal - state.position;
    let goal_dist = to_goal.norm();
    let goal_bearing = wrap_angle(to_goal.angle() - state.yaw);
    let spacing = 360.0 / n as f64;

    let (direction, min_free_range) = if free.iter().all(|&f| f) {
        let min_r = scan.iter().map(|r| r.range).fold(f64::INFINITY, f64::min);
        (goal_bearing, min_r)
    } else {
        // start scanning just after a blocked ray so runs do not wrap mid-way
        let first_blocked = free.iter().position(|f| !f)?;
        let mut best: Option<(f64, f64, f64)> = None; // (span, bisector, min range)
        let mut i = 0;
        while i < n {
            let idx = (first_blocked + 1 + i) % n;
            if !free[idx] {
                i += 1;
                continue;
            }
            let start = idx;
            let mut len = 0;
            let mut min_r = f64::INFINITY;
            while i < n && free[(first_blocked + 1 + i) % n] {
                min_r = min_r.min(scan[(first_blocked + 1 + i) % n].range);
                len += 1;
                i += 1;
            }
            let span = (len - 1) as f64 * spacing;
            if span + 1e-9 < cfg.escape_sector_deg {
                continue;
            }
            let bisector = wrap_angle((scan[start].bearing_deg + span / 2.0).to_radians());
            let better = match best {
                None => true,
                Some((bs, bb, _)) => {
                    span > bs + 1e-9
                        || ((span - bs).abs() <= 1e-9
                            && wrap_angle(bisector - goal_bearing).abs() < wrap_angle(bb - goal_bearing).abs())
                }
            };
            if better {
                best = Some((span, bisector, min_r));
            }
        }
        let (_, bisector, min_r) = best?;
        (bisector, min_r)
    };

    let length = (0.5 * max_range)
        .min(goal_dist)
        .min(min_free_range - cfg.clearance_margin);
    if !(length > WAYPOINTS as f64 * MIN_SEGMENT) {
        return None;
    }
    let dir = Vec2::from_angle(state.yaw + direction);
    let mut waypoints = [state.position; WAYPOINTS];
    for (k, w) in waypoints.iter_mut().enumerate() {
        *w = state.position + dir * (length * (k + 1) as f64 / WAYPOINTS as f64);
    }
    Some(WaypointPolyline {
        origin: state.position,
        waypoints,
        provenance: Provenance::Escape,
    })
}
