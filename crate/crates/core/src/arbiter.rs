//! Travel / RL / Landing mode arbitration with hysteresis, debounce,
//! minimum dwell and a line-of-sight exit guard.

use std::fmt;
use std::str::FromStr;

use crate::control::GuidanceLine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Travel,
    Rl,
    Landing,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Travel => "travel",
            Mode::Rl => "rl",
            Mode::Landing => "landing",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "travel" => Ok(Mode::Travel),
            "rl" => Ok(Mode::Rl),
            "landing" => Ok(Mode::Landing),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArbiterConfig {
    pub d_thresh: f64,
    pub s_thresh: f64,
    pub d_exit: f64,
    pub s_exit: f64,
    pub debounce_steps: u32,
    pub dwell_min: u32,
    pub los_clearance: f64,
    pub delta_in: f64,
    pub delta_out: f64,
    pub s_land: f64,
    pub d_land: f64,
    pub stability_enabled: bool,
}

impl Default for ArbiterConfig {
    fn default() -> Self {
        ArbiterConfig {
            d_thresh: 4.0,
            s_thresh: 0.9,
            d_exit: 5.0,
            s_exit: 0.93,
            debounce_steps: 3,
            dwell_min: 20,
            los_clearance: 0.5,
            delta_in: 2.0,
            delta_out: 3.0,
            s_land: 0.2,
            d_land: 1.5,
            stability_enabled: true,
        }
    }
}

impl ArbiterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d_exit < self.d_thresh {
            return Err("arbiter d_exit must be >= d_thresh".into());
        }
        if self.s_exit < self.s_thresh {
            return Err("arbiter s_exit must be >= s_thresh".into());
        }
        if self.debounce_steps < 1 {
            return Err("arbiter debounce_steps must be >= 1".into());
        }
        if !(self.delta_out > self.delta_in) {
            return Err("arbiter delta_out must exceed delta_in".into());
        }
        if self.los_clearance < 0.0 {
            return Err("arbiter los_clearance must be >= 0".into());
        }
        Ok(())
    }

    /// Landing safety condition; an absent `d_min` counts as clear.
    pub fn landing_safe(&self, inputs: &ArbiterInputs) -> bool {
        inputs.s_fuzzy > self.s_land && inputs.d_min.map_or(true, |d| d > self.d_land)
    }
}

/// Per-step sensing summary consumed by the arbiter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArbiterInputs {
    pub d_min: Option<f64>,
    pub s_fuzzy: f64,
    pub dist_to_goal: f64,
    pub los_to_goal: bool,
}

/// Mode the raw conditions ask for, before debounce and dwell.
pub fn desired_mode(inputs: &ArbiterInputs, current: Mode, cfg: &ArbiterConfig) -> Mode {
    let safe_to_land = cfg.landing_safe(inputs);
    if current == Mode::Landing {
        if !safe_to_land {
            return Mode::Rl;
        }
        if inputs.dist_to_goal > cfg.delta_out {
            return Mode::Travel;
        }
        return Mode::Landing;
    }
    if inputs.dist_to_goal < cfg.delta_in && safe_to_land {
        return Mode::Landing;
    }
    match current {
        Mode::Travel => {
            let risky = inputs
                .d_min
                .is_some_and(|d| d < cfg.d_thresh && inputs.s_fuzzy < cfg.s_thresh);
            if risky {
                Mode::Rl
            } else {
                Mode::Travel
            }
        }
        Mode::Rl => {
            let clear = inputs.s_fuzzy > cfg.s_exit
                && inputs.d_min.map_or(true, |d| d > cfg.d_exit)
                && inputs.los_to_goal;
            if clear {
                Mode::Travel
            } else {
                Mode::Rl
            }
        }
        Mode::Landing => unreachable!(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchRecord {
    pub step: u64,
    pub from: Mode,
    pub to: Mode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArbiterState {
    pub mode: Mode,
    pub steps_in_mode: u64,
    pub pending_mode: Option<Mode>,
    pub pending_count: u32,
    pub switch_log: Vec<SwitchRecord>,
    /// Cleared on Travel entry; the owner regenerates it from the current pose.
    pub guidance_line: Option<GuidanceLine>,
    step: u64,
}

impl ArbiterState {
    pub fn new(mode: Mode) -> Self {
        ArbiterState {
            mode,
            steps_in_mode: 0,
            pending_mode: None,
            pending_count: 0,
            switch_log: Vec::new(),
            guidance_line: None,
            step: 0,
        }
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances one control step towards `desired`. Returns whether a switch
    /// was committed on this step.
    pub fn step(&mut self, desired: Mode, cfg: &ArbiterConfig) -> bool {
        self.step += 1;
        self.steps_in_mode += 1;
        if desired == self.mode {
            self.pending_mode = None;
            self.pending_count = 0;
            return false;
        }
        if !cfg.stability_enabled {
            self.commit(desired);
            return true;
        }
        if self.pending_mode == Some(desired) {
            self.pending_count = (self.pending_count + 1).min(cfg.debounce_steps);
        } else {
            self.pending_mode = Some(desired);
            self.pending_count = 1;
        }
        // a landing abort skips the debounce but still waits out the dwell
        let abort = self.mode == Mode::Landing && desired == Mode::Rl;
        let debounced = abort || self.pending_count >= cfg.debounce_steps;
        if debounced && self.steps_in_mode >= u64::from(cfg.dwell_min) {
            self.commit(desired);
            true
        } else {
            false
        }
    }

    fn commit(&mut self, to: Mode) {
        self.switch_log.push(SwitchRecord {
            step: self.step,
            from: self.mode,
            to,
        });
        self.mode = to;
        self.steps_in_mode = 0;
        self.pending_mode = None;
        self.pending_count = 0;
        if to == Mode::Travel {
            self.guidance_line = None;
        }
    }

    pub fn switch_count(&self) -> usize {
        self.switch_log.len()
    }
}

/// Functional form of [`ArbiterState::step`].
pub fn step_arbiter(state: &ArbiterState, desired: Mode, cfg: &ArbiterConfig) -> (ArbiterState, bool) {
    let mut next = state.clone();
    let switched = next.step(desired, cfg);
    (next, switched)
}

pub fn switch_count(state: &ArbiterState) -> usize {
    state.switch_count()
}

/// CSV rows `step,from,to` with a header line.
pub fn switch_log_csv(log: &[SwitchRecord]) -> String {
    let mut out = String::from("step,from,to\n");
    for r in log {
        out.push_str(&format!("{},{},{}\n", r.step, r.from, r.to));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(d_min: Option<f64>, s: f64, dist: f64, los: bool) -> ArbiterInputs {
        ArbiterInputs {
            d_min,
            s_fuzzy: s,
            dist_to_goal: dist,
            los_to_goal: los,
        }
    }

    /// Wider thresholds: enter at 8 m / 0.6, leave at 10 m / 0.7.
    fn wide() -> ArbiterConfig {
        ArbiterConfig {
            d_thresh: 8.0,
            s_thresh: 0.6,
            d_exit: 10.0,
            s_exit: 0.7,
            ..Default::default()
        }
    }

    #[test]
    fn desired_mode_examples() {
        let cfg = wide();
        assert_eq!(desired_mode(&inputs(Some(4.0), 0.4, 50.0, true), Mode::Travel, &cfg), Mode::Rl);
        assert_eq!(desired_mode(&inputs(Some(12.0), 0.9, 50.0, false), Mode::Rl, &cfg), Mode::Rl);
        assert_eq!(desired_mode(&inputs(Some(12.0), 0.9, 50.0, true), Mode::Rl, &cfg), Mode::Travel);
        for m in [Mode::Travel, Mode::Rl, Mode::Landing] {
            assert_eq!(desired_mode(&inputs(None, 1.0, 1.5, true), m, &cfg), Mode::Landing);
        }
        // Landing beats the RL trigger
        assert_eq!(desired_mode(&inputs(Some(4.0), 0.4, 1.5, true), Mode::Travel, &cfg), Mode::Landing);
        // unsafe landing zone aborts to RL
        assert_eq!(desired_mode(&inputs(Some(1.0), 0.9, 1.5, true), Mode::Landing, &cfg), Mode::Rl);
        // landing hysteresis: stays between delta_in and delta_out
        assert_eq!(desired_mode(&inputs(None, 1.0, 2.5, true), Mode::Landing, &cfg), Mode::Landing);
        assert_eq!(desired_mode(&inputs(None, 1.0, 3.5, true), Mode::Landing, &cfg), Mode::Travel);
        assert_eq!(desired_mode(&inputs(None, 1.0, 2.5, true), Mode::Travel, &cfg), Mode::Travel);
        // no obstacle in range never triggers RL
        assert_eq!(desired_mode(&inputs(None, 0.1, 50.0, true), Mode::Travel, &cfg), Mode::Travel);
    }

    #[test]
    fn single_step_dip_is_filtered() {
        let cfg = ArbiterConfig { dwell_min: 0, ..Default::default() };
        let mut s = ArbiterState::new(Mode::Travel);
        assert!(!s.step(Mode::Rl, &cfg));
        for _ in 0..10 {
            assert!(!s.step(Mode::Travel, &cfg));
        }
        assert_eq!(s.switch_count(), 0);
    }

    #[test]
    fn persistent_request_switches_after_debounce() {
        let cfg = ArbiterConfig::default();
        let mut s = ArbiterState::new(Mode::Travel);
        for _ in 0..30 {
            s.step(Mode::Travel, &cfg);
        }
        assert!(!s.step(Mode::Rl, &cfg));
        assert!(!s.step(Mode::Rl, &cfg));
        assert!(s.step(Mode::Rl, &cfg));
        assert_eq!(s.mode, Mode::Rl);
        assert_eq!(s.switch_log, vec![SwitchRecord { step: 33, from: Mode::Travel, to: Mode::Rl }]);
    }

    #[test]
    fn dwell_blocks_early_switch() {
        let cfg = ArbiterConfig::default();
        let mut s = ArbiterState::new(Mode::Travel);
        for _ in 0..19 {
            assert!(!s.step(Mode::Rl, &cfg));
        }
        assert!(s.step(Mode::Rl, &cfg));
        assert_eq!(s.switch_log[0].step, 20);
    }

    #[test]
    fn disabled_stability_switches_every_step() {
        let cfg = ArbiterConfig { stability_enabled: false, ..Default::default() };
        let mut s = ArbiterState::new(Mode::Travel);
        for k in 0..100 {
            let want = if k % 2 == 0 { Mode::Rl } else { Mode::Travel };
            assert!(s.step(want, &cfg));
        }
        assert_eq!(s.switch_count(), 100);
    }

    #[test]
    fn excursion_counts_two_switches_and_clears_line() {
        let cfg = ArbiterConfig { dwell_min: 0, debounce_steps: 1, ..Default::default() };
        let mut s = ArbiterState::new(Mode::Travel);
        assert_eq!(switch_count(&s), 0);
        s.guidance_line = Some(GuidanceLine::new(crate::world::Vec2::ZERO, crate::world::Vec2::new(1.0, 0.0)).unwrap());
        s.step(Mode::Rl, &cfg);
        assert!(s.guidance_line.is_some());
        s.step(Mode::Travel, &cfg);
        assert_eq!(switch_count(&s), 2);
        assert!(s.guidance_line.is_none());
    }

    #[test]
    fn landing_abort_skips_debounce() {
        let cfg = ArbiterConfig { dwell_min: 5, ..Default::default() };
        let mut s = ArbiterState::new(Mode::Landing);
        for _ in 0..4 {
            assert!(!s.step(Mode::Rl, &cfg));
        }
        assert!(s.step(Mode::Rl, &cfg));
        let mut s = ArbiterState::new(Mode::Landing);
        for _ in 0..10 {
            s.step(Mode::Landing, &cfg);
        }
        assert!(s.step(Mode::Rl, &cfg));
    }

    #[test]
    fn hysteresis_prevents_chatter() {
        let cfg = wide();
        let mut s = ArbiterState::new(Mode::Travel);
        // d_min wanders across d_thresh (8) but never above d_exit (10)
        for k in 0..2000 {
            let d = 8.0 + 1.5 * ((k as f64) * 0.37).sin();
            let inp = inputs(Some(d), 0.5 + 0.3 * ((k as f64) * 0.11).cos(), 40.0, true);
            let want = desired_mode(&inp, s.mode, &cfg);
            s.step(want, &cfg);
        }
        assert_eq!(s.switch_count(), 1);
        assert_eq!(s.mode, Mode::Rl);
    }

    #[test]
    fn switch_log_csv_format() {
        let log = [SwitchRecord { step: 4, from: Mode::Travel, to: Mode::Rl }];
        assert_eq!(switch_log_csv(&log), "step,from,to\n4,travel,rl\n");
    }

    fn mode_strategy() -> impl Strategy<Value = Mode> {
        prop_oneof![Just(Mode::Travel), Just(Mode::Rl), Just(Mode::Landing)]
    }

    proptest! {
        #[test]
        fn dwell_separates_switches(desires in prop::collection::vec(mode_strategy(), 1..600), dwell in 1u32..30, deb in 1u32..5) {
            let cfg = ArbiterConfig { dwell_min: dwell, debounce_steps: deb, ..Default::default() };
            let mut s = ArbiterState::new(Mode::Travel);
            for d in &desires {
                s.step(*d, &cfg);
                prop_assert!(s.pending_count <= cfg.debounce_steps);
            }
            for w in s.switch_log.windows(2) {
                prop_assert!(w[1].step - w[0].step >= u64::from(dwell));
            }
            prop_assert!(s.switch_count() as u64 <= desires.len() as u64 / u64::from(dwell) + 1);
        }

        #[test]
        fn rl_exit_requires_los(steps in prop::collection::vec((0.0..20.0f64, 0.0..1.0f64, any::<bool>()), 1..400)) {
            let cfg = ArbiterConfig { dwell_min: 2, ..Default::default() };
            let mut s = ArbiterState::new(Mode::Rl);
            for (d, sf, los) in steps {
                let inp = inputs(Some(d), sf, 40.0, los);
                let before = s.mode;
                let want = desired_mode(&inp, s.mode, &cfg);
                if s.step(want, &cfg) && before == Mode::Rl && s.mode == Mode::Travel {
                    prop_assert!(los);
                }
            }
        }
    }
}
