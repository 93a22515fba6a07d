//! Experiment plumbing shared by the command line tool and the test suites:
//! recording scenarios, running both localizers over the same frames,
//! error metrics and the standard maze experiments.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, Pose};
use crate::grid_map::OccupancyGrid;
use crate::local_view::{
    extract_landmark_with, match_landmark, preprocess_scan, Adjacency, LandmarkStore,
};
use crate::localizer::{
    run_mapping_pass, Initialization, Localizer, LocalizerConfig, MappingParams, TraceRow,
};
use crate::mcl::{Mcl, MclConfig, MotionNoise};
use crate::observation::{simulate_scan, LidarScan, LidarSpec};
use crate::simulator::{
    generate_maze_layout, room_tour, KidnapEvent, Maze, MazeSpec, MotionLimits, OdometryNoise,
    Scenario, SimFrame, Simulation, Waypoint,
};

/// Localization method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bio,
    Mcl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bio => "bio",
            Method::Mcl => "mcl",
        }
    }
}

/// A recorded scenario: the true start pose and one frame per step.
#[derive(Debug, Clone)]
pub struct Recording {
    pub start: Pose,
    pub frames: Vec<SimFrame>,
    pub kidnap_steps: Vec<usize>,
}

impl Recording {
    pub fn truth(&self) -> Vec<Pose> {
        self.frames.iter().map(|f| f.true_pose).collect()
    }

    pub fn truth_rows(&self) -> Vec<(usize, Pose)> {
        self.frames.iter().map(|f| (f.t, f.true_pose)).collect()
    }
}

/// Runs the simulator over every step of `scenario`.
pub fn record(scenario: &Scenario, map: &OccupancyGrid) -> Result<Recording> {
    let mut sim = Simulation::new(scenario.clone(), map)?;
    let mut frames = Vec::with_capacity(scenario.steps);
    while !sim.is_done() {
        frames.push(sim.step()?);
    }
    let mut kidnap_steps: Vec<usize> = scenario.kidnaps.iter().map(|k| k.step).collect();
    kidnap_steps.sort_unstable();
    Ok(Recording {
        start: scenario.initial_pose,
        frames,
        kidnap_steps,
    })
}

/// Runs the bio-inspired localizer over a recording.
pub fn run_bio(
    rec: &Recording,
    map: &OccupancyGrid,
    config: LocalizerConfig,
    store: LandmarkStore,
    adjacency: Adjacency,
) -> Result<Vec<TraceRow>> {
    let mut loc = Localizer::new(config, map, store, adjacency, Some(rec.start))?;
    rec.frames
        .iter()
        .map(|f| {
            loc.step(&f.odom, &f.scan)
                .map(|out| TraceRow::from_step(f.t, &out))
        })
        .collect()
}

/// Runs the particle filter over a recording.
pub fn run_mcl(rec: &Recording, map: &OccupancyGrid, config: MclConfig) -> Result<Vec<TraceRow>> {
    let mut mcl = Mcl::new(config, map, Some(rec.start))?;
    Ok(rec
        .frames
        .iter()
        .map(|f| mcl.step(&f.odom, &f.scan).trace_row(f.t))
        .collect())
}

/// Position error summary over aligned estimate and truth sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean_abs_x: f64,
    pub mean_abs_y: f64,
    pub mean_distance: f64,
    pub rmse: f64,
}

pub fn error_summary(est: &[Pose], truth: &[Pose]) -> Result<ErrorSummary> {
    if est.len() != truth.len() {
        return Err(Error::value(format!(
            "misaligned rows: {} estimates, {} truth poses",
            est.len(),
            truth.len()
        )));
    }
    if est.is_empty() {
        return Err(Error::value("no rows to evaluate"));
    }
    let n = est.len() as f64;
    let (mut ax, mut ay, mut d, mut sq) = (0.0, 0.0, 0.0, 0.0);
    for (e, t) in est.iter().zip(truth) {
        let (dx, dy) = (e.x - t.x, e.y - t.y);
        ax += dx.abs();
        ay += dy.abs();
        d += dx.hypot(dy);
        sq += dx * dx + dy * dy;
    }
    Ok(ErrorSummary {
        mean_abs_x: ax / n,
        mean_abs_y: ay / n,
        mean_distance: d / n,
        rmse: (sq / n).sqrt(),
    })
}

/// First index `i ≥ from` whose error is below `threshold` and stays below
/// for `sustain` rows (or until the end of the sequence).
pub fn first_settled(errors: &[f64], from: usize, threshold: f64, sustain: usize) -> Option<usize> {
    let mut run = 0;
    for i in from..errors.len() {
        if errors[i] < threshold {
            run += 1;
            if run >= sustain.max(1) {
                return Some(i + 1 - run);
            }
        } else {
            run = 0;
        }
    }
    (run > 0).then(|| errors.len() - run)
}

/// `(baseline − ours) / baseline · 100`.
pub fn percent_reduction(ours: f64, baseline: f64) -> f64 {
    (baseline - ours) / baseline * 100.0
}

/// Summary of one localization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    pub steps: usize,
    pub errors: ErrorSummary,
    /// Step at which the error first settles below the threshold.
    pub convergence_step: Option<usize>,
    /// Steps from each kidnap event until the error settles again.
    pub recovery_steps: Vec<Option<usize>>,
}

/// Error threshold and hold length used for convergence and recovery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SettleRule {
    pub threshold: f64,
    pub sustain: usize,
}

impl Default for SettleRule {
    fn default() -> Self {
        Self {
            threshold: 0.3,
            sustain: 20,
        }
    }
}

pub fn position_errors(trace: &[TraceRow], truth: &[Pose]) -> Vec<f64> {
    trace
        .iter()
        .zip(truth)
        .map(|(r, t)| r.est.distance(t))
        .collect()
}

pub fn build_report(
    method: Method,
    trace: &[TraceRow],
    rec: &Recording,
    rule: SettleRule,
) -> Result<RunReport> {
    let truth = rec.truth();
    let est: Vec<Pose> = trace.iter().map(|r| r.est).collect();
    let errors = error_summary(&est, &truth)?;
    let err = position_errors(trace, &truth);
    let t_of = |i: usize| trace[i].t;
    let convergence_step = first_settled(&err, 0, rule.threshold, rule.sustain).map(t_of);
    let recovery_steps = rec
        .kidnap_steps
        .iter()
        .map(|&k| {
            let from = trace.iter().position(|r| r.t >= k)?;
            first_settled(&err, from, rule.threshold, rule.sustain).map(|i| t_of(i) - k)
        })
        .collect();
    Ok(RunReport {
        method,
        steps: trace.len(),
        errors,
        convergence_step,
        recovery_steps,
    })
}

impl RunReport {
    /// `key = value` lines, stable across runs.
    pub fn to_summary(&self) -> String {
        let opt = |v: Option<usize>| v.map(|s| s.to_string()).unwrap_or_else(|| "none".into());
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.method.name());
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "mean_abs_x = {:.6}", self.errors.mean_abs_x);
        let _ = writeln!(s, "mean_abs_y = {:.6}", self.errors.mean_abs_y);
        let _ = writeln!(s, "mean_distance = {:.6}", self.errors.mean_distance);
        let _ = writeln!(s, "rmse = {:.6}", self.errors.rmse);
        let _ = writeln!(s, "convergence_step = {}", opt(self.convergence_step));
        let rec: Vec<String> = self.recovery_steps.iter().map(|r| opt(*r)).collect();
        let _ = writeln!(s, "recovery_steps = [{}]", rec.join(", "));
        s
    }
}

pub const TRUTH_HEADER: &str = "t,x,y,theta";

pub fn truth_to_csv(rows: &[(usize, Pose)]) -> String {
    let mut out = String::from(TRUTH_HEADER);
    out.push('\n');
    for (t, p) in rows {
        let _ = writeln!(out, "{t},{},{},{}", p.x, p.y, p.theta);
    }
    out
}

pub fn truth_from_csv(text: &str, source_name: &str) -> Result<Vec<(usize, Pose)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TRUTH_HEADER => {}
        _ => {
            return Err(Error::parse(
                source_name,
                1,
                format!("expected header `{TRUTH_HEADER}`"),
            ))
        }
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let err = |m: String| Error::parse(source_name, i + 1, m);
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let num = |k: usize| {
                f[k].parse::<f64>()
                    .map_err(|e| err(format!("field {}: {e}", k + 1)))
            };
            let t = f[0]
                .parse::<usize>()
                .map_err(|e| err(format!("bad t: {e}")))?;
            Ok((t, Pose::new(num(1)?, num(2)?, num(3)?)))
        })
        .collect()
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub errors: ErrorSummary,
}

/// Error table for several traces against one truth, plus pairwise
/// percentage reductions of the mean distance error.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    /// Reduction of `a`'s mean distance error relative to `b`'s, in percent.
    pub fn reduction(&self, a: usize, b: usize) -> f64 {
        percent_reduction(
            self.rows[a].errors.mean_distance,
            self.rows[b].errors.mean_distance,
        )
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>10} {:>10} {:>10} {:>10}",
            "method", "x", "y", "distance", "rmse"
        );
        for r in &self.rows {
            let e = r.errors;
            let _ = writeln!(
                s,
                "{:<16} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                r.name, e.mean_abs_x, e.mean_abs_y, e.mean_distance, e.rmse
            );
        }
        for a in 0..self.rows.len() {
            for b in 0..self.rows.len() {
                if a != b && self.rows[a].errors.mean_distance < self.rows[b].errors.mean_distance {
                    let _ = writeln!(
                        s,
                        "{} reduces mean distance error by {:.1}% from {:.4} m to {:.4} m vs {}",
                        self.rows[a].name,
                        self.reduction(a, b),
                        self.rows[b].errors.mean_distance,
                        self.rows[a].errors.mean_distance,
                        self.rows[b].name
                    );
                }
            }
        }
        s
    }
}

/// Evaluates named traces against the truth. Rows must align on `t`.
pub fn evaluate(traces: &[(String, Vec<TraceRow>)], truth: &[(usize, Pose)]) -> Result<EvalTable> {
    let mut rows = Vec::new();
    for (name, trace) in traces {
        if trace.len() != truth.len() || trace.iter().zip(truth).any(|(r, (t, _))| r.t != *t) {
            return Err(Error::value(format!(
                "trace `{name}` is not aligned with the truth rows"
            )));
        }
        let est: Vec<Pose> = trace.iter().map(|r| r.est).collect();
        let tp: Vec<Pose> = truth.iter().map(|(_, p)| *p).collect();
        rows.push(EvalRow {
            name: name.clone(),
            errors: error_summary(&est, &tp)?,
        });
    }
    Ok(EvalTable { rows })
}

/// Median of a non-empty slice; NaN-free input expected.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// The standard experiment world: a 15 × 15 m maze and a tour through it.
#[derive(Debug, Clone)]
pub struct StandardWorld {
    pub spec: MazeSpec,
    pub maze: Maze,
    pub start: Pose,
    pub tour: Vec<Waypoint>,
}

pub const TOUR_CLEARANCE: f64 = 0.4;
pub const TOUR_SPACING: f64 = 0.5;

impl StandardWorld {
    pub fn new() -> Result<Self> {
        Self::with_spec(MazeSpec::default())
    }

    pub fn with_spec(spec: MazeSpec) -> Result<Self> {
        let maze = generate_maze_layout(&spec, spec.seed)?;
        let (start, tour) = room_tour(&maze, TOUR_CLEARANCE, TOUR_SPACING, 150.0)?;
        Ok(Self {
            spec,
            maze,
            start,
            tour,
        })
    }

    pub fn map(&self) -> &OccupancyGrid {
        &self.maze.grid
    }

    fn base(&self, name: &str, steps: usize, seed: u64) -> Scenario {
        Scenario {
            name: name.into(),
            map: None,
            maze: Some(self.spec.clone()),
            steps,
            seed,
            initial_pose: self.start,
            init: Initialization::default(),
            waypoints: self.tour.clone(),
            odometry: OdometryNoise::default(),
            lidar: LidarSpec::default(),
            motion: MotionLimits::default(),
            kidnaps: Vec::new(),
        }
    }

    /// Pose tracking from a known start, 2000 steps.
    pub fn tracking(&self, seed: u64) -> Scenario {
        self.base("tracking", 2000, seed)
    }

    /// The tour as driven without noise, one pose per step, used for the
    /// landmark mapping pass.
    pub fn mapping_run(&self, steps: usize) -> Result<(Vec<Pose>, Vec<LidarScan>)> {
        let mut s = self.base("mapping", steps, 0);
        s.odometry = OdometryNoise::NONE;
        s.lidar.noise_sigma = 0.0;
        let rec = record(&s, self.map())?;
        Ok(rec
            .frames
            .into_iter()
            .map(|f| (f.true_pose, f.scan))
            .unzip())
    }

    /// Landmark store built from one noiseless pass over the tour.
    pub fn landmark_store(&self, config: &LocalizerConfig) -> Result<(LandmarkStore, Adjacency)> {
        let (poses, scans) = self.mapping_run(3000)?;
        let params = MappingParams {
            scan_cell_size: config.scan_cell_size,
            extract: config.extract,
            match_threshold: config.lv_match_threshold,
            ..MappingParams::default()
        };
        run_mapping_pass(&config.geometry, &poses, &scans, &params)
    }

    /// No initial estimate: the robot starts at a seed-dependent tour
    /// waypoint and the belief starts uniform.
    pub fn global(&self, seed: u64, steps: usize) -> Scenario {
        let mut s = self.base("global", steps, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(4);
        let i = rng.random_range(0..self.tour.len() / 2);
        let (a, b) = (self.tour[i], self.tour[i + 1]);
        s.initial_pose = Pose::new(a.x, a.y, (b.y - a.y).atan2(b.x - a.x));
        s.waypoints = self.tour[i + 1..].to_vec();
        s.init = Initialization::Uniform;
        s
    }

    /// Known start with a short kidnap (under 2 m along the tour) at
    /// `short_at` and a long one (over 5 m away) at `long_at`. Targets are
    /// tour poses where `visible` holds.
    pub fn kidnap(
        &self,
        seed: u64,
        steps: usize,
        short_at: usize,
        long_at: usize,
        visible: impl Fn(&Pose) -> bool,
    ) -> Result<Scenario> {
        let mut s = self.base("kidnap", steps, seed);
        let mut plain = s.clone();
        plain.odometry = OdometryNoise::NONE;
        plain.lidar.noise_sigma = 0.0;
        plain.steps = long_at.max(short_at);
        let rec = record(&plain, self.map())?;
        let pose_at = |i: usize| {
            let (a, b) = (self.tour[i], self.tour[(i + 1).min(self.tour.len() - 1)]);
            Pose::new(a.x, a.y, (b.y - a.y).atan2(b.x - a.x))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5);

        let f = &rec.frames[short_at - 1];
        let short = (f.waypoint + 2..f.waypoint + 4)
            .filter(|&i| i + 1 < self.tour.len())
            .map(|i| (i, pose_at(i)))
            .find(|(_, p)| p.distance(&f.true_pose) < 2.0 && visible(p))
            .ok_or_else(|| Error::config("kidnaps", "no landmark-visible short kidnap target"))?;

        // the long kidnap lands on a later part of the tour, far from where
        // the robot would be
        let g = &rec.frames[long_at - 1];
        let candidates: Vec<(usize, Pose)> = (0..self.tour.len().saturating_sub(60))
            .map(|i| (i, pose_at(i)))
            .filter(|(_, p)| p.distance(&g.true_pose) > 5.0 && visible(p))
            .collect();
        if candidates.is_empty() {
            return Err(Error::config(
                "kidnaps",
                "no landmark-visible long kidnap target",
            ));
        }
        let long = candidates[rng.random_range(0..candidates.len())];
        s.kidnaps = vec![
            KidnapEvent {
                step: short_at,
                pose: short.1,
                resume_waypoint: Some(short.0 + 1),
            },
            KidnapEvent {
                step: long_at,
                pose: long.1,
                resume_waypoint: Some(long.0 + 1),
            },
        ];
        Ok(s)
    }
}

/// Landmark store from noiseless scans simulated at known poses, using the
/// extraction settings of `config`.
pub fn map_landmarks(
    map: &OccupancyGrid,
    poses: &[Pose],
    config: &LocalizerConfig,
) -> Result<(LandmarkStore, Adjacency)> {
    let spec = LidarSpec {
        noise_sigma: 0.0,
        ..LidarSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let scans = poses
        .iter()
        .map(|p| simulate_scan(map, p, &spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let params = MappingParams {
        scan_cell_size: config.scan_cell_size,
        extract: config.extract,
        match_threshold: config.lv_match_threshold,
        ..MappingParams::default()
    };
    run_mapping_pass(&config.geometry, poses, &scans, &params)
}

/// Whether a noiseless scan at `pose` yields a landmark that matches the store.
pub fn landmark_visible(
    map: &OccupancyGrid,
    store: &LandmarkStore,
    config: &LocalizerConfig,
    pose: &Pose,
) -> bool {
    let spec = LidarSpec {
        noise_sigma: 0.0,
        ..LidarSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let Ok(scan) = simulate_scan(map, pose, &spec, &mut rng) else {
        return false;
    };
    let Ok(points) = preprocess_scan(&scan, config.scan_cell_size) else {
        return false;
    };
    extract_landmark_with(&points, &config.extract)
        .and_then(|lm| match_landmark(store, &lm, config.lv_match_threshold))
        .is_some()
}

/// MCL settings matched to the simulator's odometry noise.
pub fn mcl_config_for(scenario: &Scenario, particles: usize) -> MclConfig {
    MclConfig {
        particles,
        noise: MotionNoise {
            trans_sigma: scenario.odometry.trans_sigma,
            rot_sigma: scenario.odometry.rot_sigma,
        },
        init: scenario.init,
        seed: scenario.seed,
        ..MclConfig::default()
    }
}

/// Bio localizer settings for a scenario on `map`.
pub fn bio_config_for(scenario: &Scenario, map: &OccupancyGrid) -> Result<LocalizerConfig> {
    let mut c = LocalizerConfig::for_map(map)?;
    c.init = scenario.init;
    c.seed = scenario.seed;
    Ok(c)
}

/// Heading error of each row, for diagnostics.
pub fn heading_errors(trace: &[TraceRow], truth: &[Pose]) -> Vec<f64> {
    trace
        .iter()
        .zip(truth)
        .map(|(r, t)| angle_diff(r.est.theta, t.theta).abs())
        .collect()
}
