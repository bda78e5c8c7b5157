//! End-to-end checks of the `swiftnav` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const WORLD: &str = r#"{
  "bounds": {"xmin": 0, "ymin": 0, "xmax": 30, "ymax": 20},
  "start": [3, 10],
  "goal": [27, 10],
  "goal_altitude": 0.0,
  "obstacles": [{"x": 12, "y": 10.4, "r": 1.2}, {"x": 20, "y": 6, "r": 1.0}]
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_swiftnav"));
    c.env_remove("SWIFTNAV_OUT");
    c
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("world.json"), WORLD).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// A small, fast run: four short episodes with tiny networks.
    fn config(&self, name: &str, extra: &str) -> PathBuf {
        let text = format!(
            "[run]\nworld = {}\nout_dir = {}\nmax_episodes = 4\nsuccess_target = 1000\nwarmup = 16\ncheckpoint_every = 2\nlearn_cadence = transition:2\n\n[env]\nstep_limit = 250\n\n[td3]\nhidden = 16,16\nbatch = 16\n{extra}",
            self.path("world.json").display(),
            self.path("unused_out").display()
        );
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn train(&self, config: &Path, out: &str, args: &[&str]) -> Output {
        bin()
            .arg("train")
            .arg("--config")
            .arg(config)
            .args(args)
            .env("SWIFTNAV_OUT", self.path(out))
            .output()
            .unwrap()
    }
}

#[test]
fn train_writes_log_checkpoints_and_summary() {
    let f = Fixture::new();
    let cfg = f.config("run.conf", "");
    let o = f.train(&cfg, "out", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("episodes=4"), "{}", stdout(&o));

    let out = f.path("out");
    let log = fs::read_to_string(out.join("episodes.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "episode,steps,return,success,switches,outcome");
    assert_eq!(lines.len(), 5);
    for name in ["checkpoints/ep00002.ckpt", "checkpoints/ep00004.ckpt", "checkpoint.ckpt", "config.conf", "summary.txt"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    // The override wins over the configured directory.
    assert!(!f.path("unused_out").exists());

    // Every default is materialized in the written config.
    let written = fs::read_to_string(out.join("config.conf")).unwrap();
    for key in ["[arbiter]", "dwell_min", "[replay]", "alpha", "[rewards]", "goal_bonus"] {
        assert!(written.contains(key), "config lacks {key}");
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let f = Fixture::new();
    let cfg = f.config("run.conf", "");
    assert!(f.train(&cfg, "a", &["--seed", "3"]).status.success());
    assert!(f.train(&cfg, "b", &["--seed", "3"]).status.success());
    let a = fs::read(f.path("a/episodes.csv")).unwrap();
    let b = fs::read(f.path("b/episodes.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unknown_key_is_a_config_error_naming_the_key() {
    let f = Fixture::new();
    let cfg = f.config("bad.conf", "\n[arbiter]\ndwel_min = 20\n");
    let o = f.train(&cfg, "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dwel_min"), "{}", stderr(&o));
}

#[test]
fn bad_value_names_line() {
    let f = Fixture::new();
    let p = f.path("bad.conf");
    fs::write(&p, "[run]\nseed = 1\nmax_episodes = lots\n").unwrap();
    let o = f.train(&p, "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("max_episodes") && err.contains('3'), "{err}");
}

#[test]
fn missing_world_is_an_io_error() {
    let f = Fixture::new();
    let p = f.path("nowhere.conf");
    fs::write(&p, "[run]\nworld = does/not/exist.json\n").unwrap();
    let o = f.train(&p, "out", &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("world not found: does/not/exist.json"), "{}", stderr(&o));
}

#[test]
fn missing_config_is_an_io_error() {
    let f = Fixture::new();
    let o = f.train(&f.path("absent.conf"), "out", &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("absent.conf"), "{}", stderr(&o));
}

#[test]
fn malformed_world_names_file() {
    let f = Fixture::new();
    fs::write(f.path("world.json"), "{ not json").unwrap();
    let cfg = f.config("run.conf", "");
    let o = f.train(&cfg, "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("world.json"), "{}", stderr(&o));
}

#[test]
fn ablation_flags_reach_the_written_config() {
    let f = Fixture::new();
    let cfg = f.config("run.conf", "");
    let o = f.train(&cfg, "out", &["--ablation", "no_stability"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let written = fs::read_to_string(f.path("out/config.conf")).unwrap();
    assert!(written.contains("no_stability = true"), "{written}");

    let o = f.train(&cfg, "out2", &["--ablation", "no_such_thing"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_thing"));
}

fn trained(f: &Fixture) -> PathBuf {
    let cfg = f.config("run.conf", "");
    let o = f.train(&cfg, "out", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    f.path("out/checkpoint.ckpt")
}

fn eval(f: &Fixture, ckpt: &Path, world: &Path, episodes: usize) -> Output {
    bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(ckpt)
        .arg("--world")
        .arg(world)
        .arg("--episodes")
        .arg(episodes.to_string())
        .env("SWIFTNAV_OUT", f.path("eval_out"))
        .output()
        .unwrap()
}

#[test]
fn eval_zero_episodes_is_an_empty_report() {
    let f = Fixture::new();
    let ck = trained(&f);
    let o = eval(&f, &ck, &f.path("world.json"), 0);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("episodes=0"), "{}", stdout(&o));
}

#[test]
fn eval_is_repeatable_and_writes_trajectories() {
    let f = Fixture::new();
    let ck = trained(&f);
    let a = eval(&f, &ck, &f.path("world.json"), 2);
    let b = eval(&f, &ck, &f.path("world.json"), 2);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("success_rate="));
    let t = fs::read_to_string(f.path("eval_out/eval/ep00002.csv")).unwrap();
    assert!(t.starts_with("t,x,y,z,mode"));
}

#[test]
fn untrained_policy_on_dense_world_degrades_gracefully() {
    let f = Fixture::new();
    let ck = trained(&f);
    let world = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../worlds/traj2.json");
    let o = eval(&f, &ck, &world, 1);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("episodes=1 success_rate="), "{}", stdout(&o));
}

#[test]
fn eval_rejects_foreign_checkpoint_versions() {
    let f = Fixture::new();
    let ck = trained(&f);
    let mut bytes = fs::read(&ck).unwrap();
    bytes[8..12].copy_from_slice(&9u32.to_le_bytes());
    let bad = f.path("future.ckpt");
    fs::write(&bad, bytes).unwrap();
    let o = eval(&f, &bad, &f.path("world.json"), 1);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("version 9") && err.contains("expected 1") && err.contains("future.ckpt"), "{err}");

    let o = eval(&f, &f.path("missing.ckpt"), &f.path("world.json"), 1);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn replay_reports_a_saved_trajectory() {
    let f = Fixture::new();
    trained(&f);
    let traj = f.path("out/trajectories/ep00002.csv");
    let o = bin()
        .arg("replay")
        .arg("--trajectory")
        .arg(&traj)
        .arg("--world")
        .arg(f.path("world.json"))
        .arg("--out")
        .arg(f.path("replay.svg"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("points="));
    assert!(fs::read_to_string(f.path("replay.svg")).unwrap().contains("<svg"));
}

fn plot(log: &Path, out: &Path) -> Output {
    bin().arg("plot").arg("--log").arg(log).arg("--out").arg(out).output().unwrap()
}

/// Trailing mean over at most `w` samples, written without shortcuts.
fn naive_ma(xs: &[f64], w: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let s: f64 = xs[lo..=i].iter().sum();
            s / (i + 1 - lo) as f64
        })
        .collect()
}

fn data_values(svg: &str, class: &str) -> Vec<f64> {
    let tag = format!(r#"class="{class}" data-values=""#);
    let start = svg.find(&tag).unwrap() + tag.len();
    let end = start + svg[start..].find('"').unwrap();
    svg[start..end].split(' ').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn plot_smoothing_matches_independent_average() {
    let f = Fixture::new();
    let mut log = String::from("episode,steps,return,success,switches,outcome\n");
    let mut steps = Vec::new();
    let mut rets = Vec::new();
    for k in 1..=40u32 {
        let s = 300 + (k * 37) % 211;
        let r = -500.0 + f64::from((k * 53) % 97) * 7.25;
        steps.push(f64::from(s));
        rets.push(r);
        log.push_str(&format!("{k},{s},{r},{},1,success\n", k % 2));
    }
    fs::write(f.path("log.csv"), log).unwrap();
    let o = plot(&f.path("log.csv"), &f.path("plot.svg"));
    assert!(o.status.success(), "{}", stderr(&o));
    let svg = fs::read_to_string(f.path("plot.svg")).unwrap();
    assert!(svg.contains(r#"width="960" height="540""#));
    for (class, series) in [("steps", &steps), ("return", &rets)] {
        let got = data_values(&svg, class);
        let want = naive_ma(series, 15);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-9 * w.abs().max(1.0), "{class}: {g} vs {w}");
        }
    }
}

#[test]
fn plot_handles_single_episode_and_names_bad_lines() {
    let f = Fixture::new();
    fs::write(f.path("one.csv"), "episode,steps,return,success,switches,outcome\n1,500,-20.5,0,2,crash\n").unwrap();
    let o = plot(&f.path("one.csv"), &f.path("one.svg"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(f.path("one.svg")).unwrap().contains("<circle"));

    fs::write(
        f.path("bad.csv"),
        "episode,steps,return,success,switches,outcome\n1,500,-20.5,0,2,crash\n2,abc,1,0,0,crash\n",
    )
    .unwrap();
    let o = plot(&f.path("bad.csv"), &f.path("bad.svg"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let o = plot(&f.path("absent.csv"), &f.path("x.svg"));
    assert_eq!(o.status.code(), Some(4));
}
