//! Hand-written SVG output on a fixed 960x540 canvas.
//!
//! Learning curves: episode index maps linearly onto the plot's x span; the
//! smoothed step count uses the left axis from 0 to 105% of its maximum and
//! the smoothed return uses the right axis over its padded min..max range.
//! Path overlays keep the world's aspect ratio with +y pointing up.

use std::fmt::Write as _;

use swiftnav_core::arbiter::Mode;
use swiftnav_core::env::{moving_average, EpisodeLog, TrajectoryPoint};
use swiftnav_core::world::World;

pub const WIDTH: f64 = 960.0;
pub const HEIGHT: f64 = 540.0;

const STEPS_COLOR: &str = "#1f77b4";
const RETURN_COLOR: &str = "#d62728";

#[derive(Debug, Clone, Copy)]
struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn mode_color(mode: Mode) -> &'static str {
    match mode {
        Mode::Travel => "#1f77b4",
        Mode::Rl => "#d62728",
        Mode::Landing => "#2ca02c",
    }
}

fn header(out: &mut String) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{:.0}", v)
    } else {
        format!("{:.2}", v)
    }
}

/// Padded `(lo, hi)` with a non-zero span.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-9);
    if span <= 1e-9 {
        let pad = lo.abs().max(1.0) * 0.05;
        return (lo - pad, hi + pad);
    }
    (lo - 0.05 * span, hi + 0.05 * span)
}

/// X coordinates of `n` evenly spread samples; a single sample sits mid-panel.
pub fn episode_x(i: usize, n: usize, left: f64, width: f64) -> f64 {
    if n <= 1 {
        left + width / 2.0
    } else {
        left + width * i as f64 / (n - 1) as f64
    }
}

/// Exact plotted values, space separated, for downstream checks.
fn values(series: &[f64]) -> String {
    series.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

fn curves(out: &mut String, panel: Panel, log: &[EpisodeLog], window: usize) {
    let (l, t) = (panel.x + 60.0, panel.y + 40.0);
    let (w, h) = (panel.w - 120.0, panel.h - 90.0);
    let steps: Vec<f64> = log.iter().map(|r| r.steps as f64).collect();
    let returns: Vec<f64> = log.iter().map(|r| r.total_return).collect();
    let ms = moving_average(&steps, window);
    let mr = moving_average(&returns, window);
    let steps_hi = ms.iter().copied().fold(0.0_f64, f64::max).max(1.0) * 1.05;
    let (ret_lo, ret_hi) = padded_range(mr.iter().copied());
    let n = log.len();

    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" text-anchor="middle" font-size="15">Learning curves ({window}-episode moving average)</text>"##,
        l + w / 2.0,
        panel.y + 22.0
    );
    let _ = writeln!(out, r##"<rect x="{l}" y="{t}" width="{w}" height="{h}" fill="none" stroke="#444"/>"##);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = t + h - f * h;
        let _ = writeln!(out, r##"<line x1="{l}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, l + w);
        let _ = writeln!(
            out,
            r##"<text x="{}" y="{}" text-anchor="end" fill="{STEPS_COLOR}">{}</text>"##,
            l - 6.0,
            y + 4.0,
            fmt_tick(f * steps_hi)
        );
        let _ = writeln!(
            out,
            r##"<text x="{}" y="{}" text-anchor="start" fill="{RETURN_COLOR}">{}</text>"##,
            l + w + 6.0,
            y + 4.0,
            fmt_tick(ret_lo + f * (ret_hi - ret_lo))
        );
    }
    if n > 0 {
        for k in 0..=4 {
            let i = ((n - 1) as f64 * k as f64 / 4.0).round() as usize;
            let x = episode_x(i, n, l, w);
            let _ = writeln!(
                out,
                r##"<text x="{x}" y="{}" text-anchor="middle">{}</text>"##,
                t + h + 16.0,
                log[i].episode
            );
        }
    }
    let _ = writeln!(out, r##"<text x="{}" y="{}" text-anchor="middle">episode</text>"##, l + w / 2.0, t + h + 34.0);
    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" fill="{STEPS_COLOR}">steps</text><text x="{}" y="{}" text-anchor="end" fill="{RETURN_COLOR}">return</text>"##,
        l,
        t - 6.0,
        l + w,
        t - 6.0
    );

    let path = |series: &[f64], lo: f64, hi: f64| -> String {
        let pts: Vec<String> = series
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{:.2},{:.2}", episode_x(i, n, l, w), t + h - (v - lo) / (hi - lo) * h))
            .collect();
        pts.join(" ")
    };
    if n == 1 {
        let x = episode_x(0, 1, l, w);
        let ys = t + h - ms[0] / steps_hi * h;
        let yr = t + h - (mr[0] - ret_lo) / (ret_hi - ret_lo) * h;
        let _ = writeln!(out, r##"<circle cx="{x:.2}" cy="{ys:.2}" r="3" fill="{STEPS_COLOR}"/>"##);
        let _ = writeln!(out, r##"<circle cx="{x:.2}" cy="{yr:.2}" r="3" fill="{RETURN_COLOR}"/>"##);
    } else if n > 1 {
        let _ = writeln!(
            out,
            r##"<polyline class="steps" data-values="{}" points="{}" fill="none" stroke="{STEPS_COLOR}" stroke-width="1.5"/>"##,
            values(&ms),
            path(&ms, 0.0, steps_hi)
        );
        let _ = writeln!(
            out,
            r##"<polyline class="return" data-values="{}" points="{}" fill="none" stroke="{RETURN_COLOR}" stroke-width="1.5"/>"##,
            values(&mr),
            path(&mr, ret_lo, ret_hi)
        );
    }
}

fn overlay(out: &mut String, panel: Panel, world: &World, paths: &[Vec<TrajectoryPoint>]) {
    let b = world.bounds;
    let (avail_w, avail_h) = (panel.w - 40.0, panel.h - 70.0);
    let scale = (avail_w / b.width()).min(avail_h / b.height());
    let ox = panel.x + 20.0 + (avail_w - b.width() * scale) / 2.0;
    let oy = panel.y + 40.0 + (avail_h - b.height() * scale) / 2.0;
    let px = |x: f64| ox + (x - b.xmin) * scale;
    let py = |y: f64| oy + (b.ymax - y) * scale;

    let _ = writeln!(
        out,
        r##"<text x="{}" y="{}" text-anchor="middle" font-size="15">Flown paths</text>"##,
        panel.x + panel.w / 2.0,
        panel.y + 22.0
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#fafafa" stroke="#444"/>"##,
        px(b.xmin),
        py(b.ymax),
        b.width() * scale,
        b.height() * scale
    );
    for o in &world.obstacles {
        let _ = writeln!(
            out,
            r##"<circle class="obstacle" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#888"/>"##,
            px(o.center.x),
            py(o.center.y),
            o.radius * scale
        );
    }
    for path in paths {
        for seg in path.windows(2) {
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{}" stroke-width="1.5"/>"##,
                px(seg[0].position.x),
                py(seg[0].position.y),
                px(seg[1].position.x),
                py(seg[1].position.y),
                mode_color(seg[1].mode)
            );
        }
    }
    let _ = writeln!(
        out,
        r##"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="#000"/><circle cx="{:.2}" cy="{:.2}" r="5" fill="none" stroke="#2ca02c" stroke-width="2"/>"##,
        px(world.start.x) - 4.0,
        py(world.start.y) - 4.0,
        px(world.goal.x),
        py(world.goal.y)
    );
    let mut x = panel.x + 20.0;
    let y = panel.y + panel.h - 12.0;
    for m in [Mode::Travel, Mode::Rl, Mode::Landing] {
        let _ = writeln!(
            out,
            r##"<line x1="{x}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="3"/><text x="{}" y="{}">{m}</text>"##,
            y - 4.0,
            x + 18.0,
            y - 4.0,
            mode_color(m),
            x + 22.0,
            y
        );
        x += 90.0;
    }
}

/// Learning curves, plus a path overlay on the right half when a world is
/// supplied.
pub fn render(log: &[EpisodeLog], window: usize, world: Option<(&World, &[Vec<TrajectoryPoint>])>) -> String {
    let mut out = String::new();
    header(&mut out);
    match world {
        Some((w, paths)) => {
            let half = WIDTH / 2.0;
            curves(&mut out, Panel { x: 0.0, y: 0.0, w: half, h: HEIGHT }, log, window);
            overlay(&mut out, Panel { x: half, y: 0.0, w: half, h: HEIGHT }, w, paths);
        }
        None => curves(&mut out, Panel { x: 0.0, y: 0.0, w: WIDTH, h: HEIGHT }, log, window),
    }
    out.push_str("</svg>\n");
    out
}

/// Path overlay alone on the full canvas.
pub fn render_paths(world: &World, paths: &[Vec<TrajectoryPoint>]) -> String {
    let mut out = String::new();
    header(&mut out);
    overlay(&mut out, Panel { x: 0.0, y: 0.0, w: WIDTH, h: HEIGHT }, world, paths);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use swiftnav_core::env::Outcome;

    fn row(i: usize, steps: usize, ret: f64) -> EpisodeLog {
        EpisodeLog {
            episode: i,
            steps,
            total_return: ret,
            success: true,
            switches: 0,
            outcome: Outcome::Success,
        }
    }

    #[test]
    fn canvas_is_fixed() {
        let svg = render(&[row(1, 10, 1.0)], 15, None);
        assert!(svg.starts_with(r#"<svg xmlns="http://www.w3.org/2000/svg" width="960" height="540""#));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn constant_log_draws_flat_curves() {
        let log: Vec<_> = (1..=20).map(|i| row(i, 300, -50.0)).collect();
        let svg = render(&log, 15, None);
        for class in ["steps", "return"] {
            let tag = svg.lines().find(|l| l.contains(&format!(r#"class="{class}""#))).unwrap();
            let pts = tag.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
            let ys: Vec<&str> = pts.split(' ').map(|p| p.split(',').nth(1).unwrap()).collect();
            assert!(ys.iter().all(|y| *y == ys[0]), "{class}: {ys:?}");
        }
    }

    #[test]
    fn empty_log_still_renders() {
        let svg = render(&[], 15, None);
        assert!(svg.contains("</svg>"));
    }
}
