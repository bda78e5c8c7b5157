//! Guidance-line following for Travel mode and the final-approach
//! controller for Landing mode.

use thiserror::Error;

use crate::world::{wrap_angle, Command, Vec2, VehicleState};

/// Below this `|Δx|` a guidance line is stored as vertical.
pub const VERTICAL_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ControlError {
    #[error("degenerate line: anchor and goal coincide")]
    DegenerateLine,
    #[error("invalid control config: {0}")]
    InvalidConfig(String),
}

/// Straight line from an anchor to a goal, frozen between Travel-mode entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceLine {
    pub anchor: Vec2,
    pub goal: Vec2,
    /// `(k, b)` of `y = kx + b`; `None` for a vertical line.
    pub slope_intercept: Option<(f64, f64)>,
    pub heading: f64,
    pub tangent: Vec2,
    pub normal: Vec2,
    pub length: f64,
}

impl GuidanceLine {
    pub fn new(anchor: Vec2, goal: Vec2) -> Result<Self, ControlError> {
        if anchor == goal {
            return Err(ControlError::DegenerateLine);
        }
        let dx = goal.x - anchor.x;
        let dy = goal.y - anchor.y;
        let heading = dy.atan2(dx);
        let slope_intercept = (dx.abs() > VERTICAL_EPS).then(|| {
            let k = dy / dx;
            (k, anchor.y - k * anchor.x)
        });
        Ok(GuidanceLine {
            anchor,
            goal,
            slope_intercept,
            heading,
            tangent: Vec2::new(heading.cos(), heading.sin()),
            normal: Vec2::new(-heading.sin(), heading.cos()),
            length: anchor.distance(goal),
        })
    }

    pub fn is_vertical(&self) -> bool {
        self.slope_intercept.is_none()
    }

    pub fn errors(&self, position: Vec2, yaw: f64) -> TravelErrors {
        let rel = position - self.anchor;
        TravelErrors {
            cross_track: self.normal.dot(rel),
            heading: wrap_angle(yaw - self.heading),
            progress: self.tangent.dot(rel),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TravelErrors {
    /// Signed cross-track error; positive is left of the line.
    pub cross_track: f64,
    pub heading: f64,
    /// Distance travelled along the line from the anchor.
    pub progress: f64,
}

pub fn travel_errors(line: &GuidanceLine, position: Vec2, yaw: f64) -> TravelErrors {
    line.errors(position, yaw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteeringLaw {
    Pd,
    Stanley,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TravelGains {
    pub k_stanley: f64,
    pub k_heading: f64,
    pub k_cross: f64,
    pub eps_speed: f64,
    pub cruise_speed: f64,
    pub max_yaw_rate: f64,
    pub law: SteeringLaw,
}

impl Default for TravelGains {
    fn default() -> Self {
        TravelGains {
            k_stanley: 1.0,
            k_heading: 1.5,
            k_cross: 0.6,
            eps_speed: 0.1,
            cruise_speed: 2.0,
            max_yaw_rate: 1.5,
            law: SteeringLaw::Pd,
        }
    }
}

impl TravelGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        let all = [
            self.k_stanley,
            self.k_heading,
            self.k_cross,
            self.eps_speed,
            self.cruise_speed,
            self.max_yaw_rate,
        ];
        if all.iter().all(|g| *g > 0.0 && g.is_finite()) {
            Ok(())
        } else {
            Err(ControlError::InvalidConfig("travel gains must be > 0".into()))
        }
    }
}

/// Line-following command. Positive cross-track error (left of line) and
/// positive heading error both produce a clockwise (negative) yaw rate.
pub fn travel_command(errors: &TravelErrors, speed: f64, gains: &TravelGains) -> Command {
    let raw = match gains.law {
        SteeringLaw::Pd => gains.k_heading * errors.heading + gains.k_cross * errors.cross_track,
        SteeringLaw::Stanley => {
            let delta = errors.heading
                + (gains.k_stanley * errors.cross_track / (speed.max(0.0) + gains.eps_speed)).atan();
            gains.k_heading * delta
        }
    };
    Command {
        speed: gains.cruise_speed,
        yaw_rate: -raw.clamp(-gains.max_yaw_rate, gains.max_yaw_rate),
        vertical_rate: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandingConfig {
    pub delta_in: f64,
    pub delta_out: f64,
    pub s_land: f64,
    pub d_land: f64,
    pub k_v: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub k_perp: f64,
    pub k_z: f64,
    pub vz_max: f64,
    pub r_desc: f64,
    pub psi_th: f64,
    pub r_tol: f64,
    pub h_tol: f64,
    pub v_tol: f64,
    pub psi_tol: f64,
    pub t_settle: f64,
    /// Yaw-rate gain used to align with the approach direction.
    pub k_yaw: f64,
    pub max_yaw_rate: f64,
    /// Inside this horizontal radius the planar command is zero; `v_min`
    /// would otherwise keep the vehicle orbiting the pad above `v_tol`.
    pub r_hold: f64,
}

impl Default for LandingConfig {
    fn default() -> Self {
        LandingConfig {
            delta_in: 2.0,
            delta_out: 3.0,
            s_land: 0.2,
            d_land: 1.5,
            k_v: 0.8,
            v_min: 0.2,
            v_max: 1.5,
            k_perp: 0.8,
            k_z: 0.5,
            vz_max: 0.5,
            r_desc: 1.5,
            psi_th: 0.5,
            r_tol: 0.3,
            h_tol: 0.1,
            v_tol: 0.1,
            psi_tol: 0.3,
            t_settle: 1.0,
            k_yaw: 1.5,
            max_yaw_rate: 1.5,
            r_hold: 0.15,
        }
    }
}

impl LandingConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::InvalidConfig(m.to_string()));
        if !(self.delta_out > self.delta_in) {
            return bad("landing delta_out must exceed delta_in");
        }
        if !(self.v_min <= self.v_max) {
            return bad("landing v_min must not exceed v_max");
        }
        let positive = [
            self.r_tol,
            self.h_tol,
            self.v_tol,
            self.psi_tol,
            self.t_settle,
            self.k_v,
            self.k_z,
            self.vz_max,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return bad("landing tolerances and gains must be > 0");
        }
        if self.r_hold < 0.0 || self.r_hold >= self.r_tol {
            return bad("landing r_hold must lie in [0, r_tol)");
        }
        Ok(())
    }

    /// Distance-scheduled approach speed, clipped to `[v_min, v_max]`.
    pub fn approach_speed(&self, distance: f64) -> f64 {
        (self.k_v * distance).clamp(self.v_min, self.v_max)
    }

    /// Bounded-rate descent reference; never climbs.
    pub fn descent_rate(&self, altitude: f64, goal_altitude: f64) -> f64 {
        -(self.k_z * (altitude - goal_altitude)).clamp(0.0, self.vz_max)
    }
}

/// Final-approach command: yaw toward the goal plus lateral correction to
/// the goal line, scheduled speed, and descent once close and aligned.
pub fn landing_command(
    state: &VehicleState,
    goal: Vec2,
    goal_altitude: f64,
    line: &GuidanceLine,
    cfg: &LandingConfig,
) -> Command {
    let to_goal = goal - state.position;
    let distance = to_goal.norm();
    let heading_err = wrap_angle(state.yaw - line.heading);
    let vertical_rate = if distance < cfg.r_desc && heading_err.abs() < cfg.psi_th {
        cfg.descent_rate(state.altitude, goal_altitude)
    } else {
        0.0
    };
    if distance <= cfg.r_hold {
        // hover and square up with the line before touching down
        return Command {
            speed: 0.0,
            yaw_rate: -(cfg.k_yaw * heading_err).clamp(-cfg.max_yaw_rate, cfg.max_yaw_rate),
            vertical_rate,
        };
    }
    let along = to_goal * (1.0 / distance) * cfg.approach_speed(distance);
    let cross = line.normal.dot(state.position - line.anchor);
    let lateral = line.normal * (-cfg.k_perp * cross);
    let desired = along + lateral;
    let yaw_err = wrap_angle(state.yaw - desired.angle());
    Command {
        speed: cfg.approach_speed(distance),
        yaw_rate: -(cfg.k_yaw * yaw_err).clamp(-cfg.max_yaw_rate, cfg.max_yaw_rate),
        vertical_rate,
    }
}

/// Instantaneous touchdown conditions (without the dwell requirement).
pub fn touchdown_conditions(
    state: &VehicleState,
    goal: Vec2,
    goal_altitude: f64,
    reference_heading: f64,
    cfg: &LandingConfig,
) -> bool {
    state.position.distance(goal) < cfg.r_tol
        && (state.altitude - goal_altitude).abs() < cfg.h_tol
        && state.speed.abs() < cfg.v_tol
        && wrap_angle(state.yaw - reference_heading).abs() < cfg.psi_tol
}

/// Touchdown holds when the conditions have been met continuously for
/// `settle_clock` seconds and that is at least `t_settle`.
pub fn touchdown_met(
    state: &VehicleState,
    goal: Vec2,
    goal_altitude: f64,
    reference_heading: f64,
    cfg: &LandingConfig,
    settle_clock: f64,
) -> bool {
    settle_clock >= cfg.t_settle
        && touchdown_conditions(state, goal, goal_altitude, reference_heading, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{step_kinematics, KinematicLimits};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn line_slope_intercept() {
        let l = GuidanceLine::new(Vec2::new(0.0, 0.0), Vec2::new(4.0, 2.0)).unwrap();
        assert_eq!(l.slope_intercept, Some((0.5, 0.0)));
        let l = GuidanceLine::new(Vec2::new(1.0, 1.0), Vec2::new(5.0, 3.0)).unwrap();
        assert_eq!(l.slope_intercept, Some((0.5, 0.5)));
        let l = GuidanceLine::new(Vec2::new(2.0, 0.0), Vec2::new(2.0, 9.0)).unwrap();
        assert!(l.is_vertical());
        assert_eq!(l.heading, PI / 2.0);
        assert_eq!(l.length, 9.0);
        assert_eq!(
            GuidanceLine::new(Vec2::new(1.0, 1.0), Vec2::new(1.0, 1.0)),
            Err(ControlError::DegenerateLine)
        );
    }

    #[test]
    fn errors_examples() {
        let l = GuidanceLine::new(Vec2::ZERO, Vec2::new(10.0, 0.0)).unwrap();
        let e = l.errors(Vec2::new(2.0, 1.0), 0.0);
        assert_eq!((e.cross_track, e.heading, e.progress), (1.0, 0.0, 2.0));
        let e = l.errors(Vec2::new(3.0, 0.0), 0.0);
        assert_eq!((e.cross_track, e.heading), (0.0, 0.0));
        let e = l.errors(Vec2::ZERO, 3.0 * PI / 2.0);
        assert!((e.heading + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn travel_command_signs_and_saturation() {
        let g = TravelGains::default();
        let zero = TravelErrors { cross_track: 0.0, heading: 0.0, progress: 0.0 };
        assert_eq!(travel_command(&zero, 2.0, &g).yaw_rate, 0.0);
        let left = TravelErrors { cross_track: 1.0, ..zero };
        assert!(travel_command(&left, 2.0, &g).yaw_rate < 0.0);
        let huge = TravelErrors { cross_track: 1e6, heading: 3.0, progress: 0.0 };
        assert_eq!(travel_command(&huge, 2.0, &g).yaw_rate, -g.max_yaw_rate);
        let c = travel_command(&huge, 2.0, &g);
        assert_eq!((c.speed, c.vertical_rate), (g.cruise_speed, 0.0));
    }

    fn follow(start: Vec2, yaw: f64, gains: &TravelGains, steps: usize) -> Vec<f64> {
        let line = GuidanceLine::new(Vec2::ZERO, Vec2::new(1000.0, 0.0)).unwrap();
        let mut s = VehicleState::at_rest(start, 2.0, yaw);
        let limits = KinematicLimits::default();
        let mut trace = Vec::with_capacity(steps);
        for _ in 0..steps {
            let e = line.errors(s.position, s.yaw);
            s = step_kinematics(&s, travel_command(&e, s.speed, gains), 0.1, &limits);
            trace.push(line.errors(s.position, s.yaw).cross_track);
        }
        trace
    }

    #[test]
    fn closed_loop_contracts_cross_track() {
        let trace = follow(Vec2::new(0.0, 2.0), 0.0, &TravelGains::default(), 200);
        assert!(trace.last().unwrap().abs() < 0.05 * 2.0);
        assert!(trace[199].abs() < trace[20].abs());
    }

    #[test]
    fn stanley_law_also_converges() {
        let gains = TravelGains { law: SteeringLaw::Stanley, ..TravelGains::default() };
        let trace = follow(Vec2::new(0.0, -3.0), 0.4, &gains, 300);
        assert!(trace.last().unwrap().abs() < 0.1);
    }

    proptest! {
        #[test]
        fn line_following_converges_from_bounded_start(e0 in -5.0..5.0f64, psi in -PI / 2.0..PI / 2.0) {
            let trace = follow(Vec2::new(0.0, e0), psi, &TravelGains::default(), 300);
            prop_assert!(trace.last().unwrap().abs() < 0.1, "final {}", trace.last().unwrap());
        }

        #[test]
        fn tangent_and_normal_are_unit(ax in -50.0..50.0f64, ay in -50.0..50.0f64, gx in -50.0..50.0f64, gy in -50.0..50.0f64) {
            prop_assume!((ax, ay) != (gx, gy));
            let l = GuidanceLine::new(Vec2::new(ax, ay), Vec2::new(gx, gy)).unwrap();
            prop_assert!((l.tangent.norm() - 1.0).abs() < 1e-12);
            prop_assert!((l.normal.norm() - 1.0).abs() < 1e-12);
            prop_assert!(l.tangent.dot(l.normal).abs() < 1e-12);
            if let Some((k, b)) = l.slope_intercept {
                prop_assert_eq!(b, ay - k * ax);
            }
            let e = l.errors(Vec2::new(gx, gy), 17.0);
            prop_assert!(e.heading > -PI && e.heading <= PI);
        }

        #[test]
        fn landing_speed_profile_monotone(d1 in 0.0..5.0f64, d2 in 0.0..5.0f64) {
            let cfg = LandingConfig::default();
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(cfg.approach_speed(lo) <= cfg.approach_speed(hi));
            if hi <= cfg.v_min / cfg.k_v {
                prop_assert_eq!(cfg.approach_speed(hi), cfg.v_min);
            }
            if lo >= cfg.v_max / cfg.k_v {
                prop_assert_eq!(cfg.approach_speed(lo), cfg.v_max);
            }
        }

        #[test]
        fn descent_rate_is_bounded(z in -10.0..50.0f64) {
            let cfg = LandingConfig::default();
            let vz = cfg.descent_rate(z, 0.0);
            prop_assert!(vz <= 0.0 && vz >= -cfg.vz_max);
        }
    }

    #[test]
    fn landing_command_examples() {
        let cfg = LandingConfig::default();
        let goal = Vec2::new(10.0, 0.0);
        let line = GuidanceLine::new(Vec2::ZERO, goal).unwrap();
        let far = VehicleState::at_rest(Vec2::ZERO, 2.0, 0.0);
        assert_eq!(landing_command(&far, goal, 0.0, &line, &cfg).speed, cfg.v_max);
        let at_alt = VehicleState::at_rest(Vec2::new(9.5, 0.0), 0.0, 0.0);
        assert_eq!(landing_command(&at_alt, goal, 0.0, &line, &cfg).vertical_rate, 0.0);
        let d = cfg.v_min / cfg.k_v;
        let close = VehicleState::at_rest(Vec2::new(10.0 - d, 0.0), 1.0, 0.0);
        let c = landing_command(&close, goal, 0.0, &line, &cfg);
        assert_eq!(c.speed, cfg.v_min);
        assert!(c.vertical_rate < 0.0);
        // misaligned: no descent
        let twisted = VehicleState::at_rest(Vec2::new(9.5, 0.0), 1.0, 1.0);
        assert_eq!(landing_command(&twisted, goal, 0.0, &line, &cfg).vertical_rate, 0.0);
    }

    #[test]
    fn touchdown_requires_dwell_and_all_conditions() {
        let cfg = LandingConfig::default();
        let goal = Vec2::new(3.0, 4.0);
        let mut s = VehicleState::at_rest(goal, 0.05, 0.1);
        assert!(!touchdown_met(&s, goal, 0.0, 0.0, &cfg, 0.5));
        assert!(touchdown_met(&s, goal, 0.0, 0.0, &cfg, 1.0));
        s.speed = 0.1;
        assert!(!touchdown_met(&s, goal, 0.0, 0.0, &cfg, 5.0));
    }

    #[test]
    fn landing_sequence_reaches_touchdown() {
        let cfg = LandingConfig::default();
        let goal = Vec2::new(20.0, 5.0);
        let start = Vec2::new(18.5, 5.8);
        let line = GuidanceLine::new(Vec2::new(0.0, 5.0), goal).unwrap();
        let mut s = VehicleState::at_rest(start, 2.0, 0.2);
        let limits = KinematicLimits::default();
        let mut clock = 0.0;
        let mut done = false;
        for _ in 0..600 {
            s = step_kinematics(&s, landing_command(&s, goal, 0.0, &line, &cfg), 0.1, &limits);
            if touchdown_conditions(&s, goal, 0.0, line.heading, &cfg) {
                clock += 0.1;
            } else {
                clock = 0.0;
            }
            if touchdown_met(&s, goal, 0.0, line.heading, &cfg, clock) {
                done = true;
                break;
            }
        }
        assert!(done, "final state {s:?}");
    }
}
