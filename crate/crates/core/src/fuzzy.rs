//! Directional fuzzy safety score over a radial scan.

use thiserror::Error;

use crate::world::ScanRay;

#[derive(Debug, Error, PartialEq)]
pub enum FuzzyError {
    #[error("empty scan")]
    EmptyScan,
}

/// Linear membership ramp thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzyConfig {
    /// At or below this range the membership is 0.
    pub unsafe_range: f64,
    /// At or above this range the membership is 1.
    pub safe_range: f64,
}

impl Default for FuzzyConfig {
    fn default() -> Self {
        FuzzyConfig {
            unsafe_range: 2.0,
            safe_range: 10.0,
        }
    }
}

/// Weighted-mean safety score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FuzzyScore(f64);

impl FuzzyScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

impl FuzzyConfig {
    pub fn membership(&self, d: f64) -> f64 {
        if d >= self.safe_range {
            1.0
        } else if d <= self.unsafe_range {
            0.0
        } else {
            (d - self.unsafe_range) / (self.safe_range - self.unsafe_range)
        }
    }

    /// `sum r(d_i) w(θ_i) / sum w(θ_i)`
    pub fn safety_score(&self, scan: &[ScanRay]) -> Result<FuzzyScore, FuzzyError> {
        if scan.is_empty() {
            return Err(FuzzyError::EmptyScan);
        }
        let (num, den) = scan.iter().fold((0.0, 0.0), |(n, d), ray| {
            let w = weight(ray.bearing_deg);
            (n + self.membership(ray.range) * w, d + w)
        });
        Ok(FuzzyScore((num / den).clamp(0.0, 1.0)))
    }
}

/// Membership with the default 2 m / 10 m ramp.
pub fn membership(d: f64) -> f64 {
    FuzzyConfig::default().membership(d)
}

/// Directional importance of a body-relative bearing in degrees. Front and
/// rear sectors are closed, so 30°/330° weigh 1.0 and 150°/210° weigh 0.2.
pub fn weight(bearing_deg: f64) -> f64 {
    let t = bearing_deg.rem_euclid(360.0);
    if t <= 30.0 || t >= 330.0 {
        1.0
    } else if (150.0..=210.0).contains(&t) {
        0.2
    } else {
        0.5
    }
}

pub fn safety_score(scan: &[ScanRay]) -> Result<FuzzyScore, FuzzyError> {
    FuzzyConfig::default().safety_score(scan)
}
