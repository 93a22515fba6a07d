use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info, warn};

use bioloc::geometry::Pose;
use bioloc::grid_map::{load_map, save_map, OccupancyGrid};
use bioloc::harness::{
    build_report, evaluate, landmark_visible, mcl_config_for, median, record, run_bio, run_mcl,
    truth_from_csv, truth_to_csv, Method, Recording, RunReport, SettleRule, StandardWorld,
};
use bioloc::local_view::{load_store, save_store, Adjacency, LandmarkStore};
use bioloc::localizer::{trace_from_csv, trace_to_csv, LocalizerConfig, TraceRow};
use bioloc::pose_cells::PathIntegrationMode;
use bioloc::simulator::{generate_maze, load_scenario, MazeSpec, OdometryNoise, Scenario};
use bioloc::Error;

#[derive(Parser)]
#[command(
    name = "bioloc",
    version,
    about = "Pose cell LiDAR localization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a maze map from a TOML maze spec.
    MapGen {
        /// Maze spec file (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Overrides the seed in the maze file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a landmark store from scans simulated along a known trajectory.
    MapLandmarks {
        #[arg(long)]
        map: Option<PathBuf>,
        /// Trajectory as `t,x,y,theta` rows.
        #[arg(long, conflicts_with = "scenario")]
        trajectory: Option<PathBuf>,
        /// Drive this scenario without noise and map along its true path.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one of the standard maze experiments as a scenario file.
    ScenarioGen {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Kidnap targets are restricted to poses where this store's
        /// landmarks are visible.
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scenario with one or both localizers.
    Run(RunArgs),
    /// Error table of trace files against a truth file.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        /// Trace CSV files; each is named after its file stem.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Bio,
    Mcl,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Tracking,
    Global,
    Kidnap,
}

#[derive(Clone, Copy, ValueEnum)]
enum PiMode {
    Literal,
    PerHeading,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Map file overriding the one named by the scenario.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "both")]
    method: MethodArg,
    /// First trial seed; defaults to the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long)]
    out: PathBuf,
    /// Landmark store for the local view cells.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// Disable local view injection.
    #[arg(long)]
    no_lv: bool,
    #[arg(long, value_enum, default_value = "per-heading")]
    pi_mode: PiMode,
    #[arg(long, default_value_t = 500)]
    particles: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BIOLOC_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MapGen { spec, seed, out } => map_gen(&spec, seed, &out),
        Command::MapLandmarks {
            map,
            trajectory,
            scenario,
            out,
        } => map_landmarks(
            map.as_deref(),
            trajectory.as_deref(),
            scenario.as_deref(),
            &out,
        ),
        Command::ScenarioGen {
            kind,
            seed,
            landmarks,
            out,
        } => scenario_gen(kind, seed, landmarks.as_deref(), &out),
        Command::Run(args) => run(&args),
        Command::Eval { truth, traces, out } => eval(&truth, &traces, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::DegenerateBelief) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn map_gen(spec_path: &Path, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::Io {
        path: spec_path.to_path_buf(),
        source: e,
    })?;
    let spec = MazeSpec::from_toml_str(&text)?;
    let grid = generate_maze(&spec, seed.unwrap_or(spec.seed))?;
    save_map(&grid, out)?;
    info!(
        "wrote {} × {} map to {}",
        grid.width(),
        grid.height(),
        out.display()
    );
    Ok(())
}

fn scenario_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn map_landmarks(
    map: Option<&Path>,
    trajectory: Option<&Path>,
    scenario: Option<&Path>,
    out: &Path,
) -> anyhow::Result<()> {
    let (grid, poses) = match (trajectory, scenario) {
        (Some(traj), _) => {
            let map = map.ok_or_else(|| Error::Config {
                field: "map".into(),
                message: "--map is required with --trajectory".into(),
            })?;
            let grid = load_map(map)?;
            let text = fs::read_to_string(traj).map_err(|e| Error::Io {
                path: traj.to_path_buf(),
                source: e,
            })?;
            let rows = truth_from_csv(&text, &traj.display().to_string())?;
            (
                grid,
                rows.into_iter().map(|(_, p)| p).collect::<Vec<Pose>>(),
            )
        }
        (None, Some(sc)) => {
            let mut s = load_scenario(sc)?;
            let grid = match map {
                Some(m) => load_map(m)?,
                None => s.resolve_map(scenario_dir(sc))?,
            };
            s.odometry = OdometryNoise::NONE;
            s.lidar.noise_sigma = 0.0;
            (grid.clone(), record(&s, &grid)?.truth())
        }
        (None, None) => {
            return Err(Error::Config {
                field: "trajectory".into(),
                message: "pass --trajectory or --scenario".into(),
            }
            .into())
        }
    };
    let config = LocalizerConfig::for_map(&grid)?;
    let (store, adjacency) = bioloc::harness::map_landmarks(&grid, &poses, &config)?;
    if store.is_empty() {
        warn!("no landmarks found along the trajectory; writing an empty store");
    }
    save_store(&store, &adjacency, out)?;
    info!("{} landmarks from {} poses", store.len(), poses.len());
    Ok(())
}

fn scenario_gen(kind: Kind, seed: u64, landmarks: Option<&Path>, out: &Path) -> anyhow::Result<()> {
    let world = StandardWorld::new()?;
    let scenario = match kind {
        Kind::Tracking => world.tracking(seed),
        Kind::Global => world.global(seed, 500),
        Kind::Kidnap => {
            let config = LocalizerConfig::for_map(world.map())?;
            let store = landmarks.map(load_store).transpose()?.map(|(s, _)| s);
            world.kidnap(seed, 1000, 300, 600, |p| {
                store
                    .as_ref()
                    .is_none_or(|s| landmark_visible(world.map(), s, &config, p))
            })?
        }
    };
    write(out, &scenario.to_toml_string()?)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Whitespace-separated columns for plotting: truth, then each method's
/// estimate and position error.
fn columns_file(rec: &Recording, traces: &[(Method, &[TraceRow])]) -> String {
    let mut s = String::from("# t true_x true_y true_theta");
    for (m, _) in traces {
        let n = m.name();
        let _ = write!(s, " {n}_x {n}_y {n}_theta {n}_err");
    }
    s.push('\n');
    for (i, f) in rec.frames.iter().enumerate() {
        let p = f.true_pose;
        let _ = write!(s, "{} {} {} {}", f.t, p.x, p.y, p.theta);
        for (_, tr) in traces {
            let e = tr[i].est;
            let _ = write!(s, " {} {} {} {}", e.x, e.y, e.theta, e.distance(&p));
        }
        s.push('\n');
    }
    s
}

fn run(args: &RunArgs) -> anyhow::Result<()> {
    let base = load_scenario(&args.scenario)?;
    let map: OccupancyGrid = match &args.map {
        Some(m) => load_map(m)?,
        None => base.resolve_map(scenario_dir(&args.scenario))?,
    };
    base.validate_on(&map)?;
    let want_bio = args.method != MethodArg::Mcl;
    let want_mcl = args.method != MethodArg::Bio;
    if args.particles == 0 {
        return Err(Error::Config {
            field: "particles".into(),
            message: "must be >= 1".into(),
        }
        .into());
    }
    let (store, adjacency) = match (&args.landmarks, want_bio && !args.no_lv) {
        (Some(p), _) => load_store(p)?,
        (None, true) => {
            return Err(Error::Config {
                field: "landmarks".into(),
                message: "the bio method needs --landmarks (or --no-lv)".into(),
            }
            .into())
        }
        (None, false) => (LandmarkStore::new(), Adjacency::new()),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let first = args.seed.unwrap_or(base.seed);
    let mut reports: Vec<(u64, RunReport)> = Vec::new();
    for seed in first..first + args.trials.max(1) {
        let scenario = Scenario {
            seed,
            ..base.clone()
        };
        let rec = record(&scenario, &map)?;
        let dir = args.out.join(format!("seed_{seed}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        write(&dir.join("truth.csv"), &truth_to_csv(&rec.truth_rows()))?;
        let mut traces: Vec<(Method, Vec<TraceRow>)> = Vec::new();
        if want_bio {
            let mut config = LocalizerConfig::for_map(&map)?;
            config.init = scenario.init;
            config.seed = seed;
            config.lv_enabled = !args.no_lv;
            config.path_integration = match args.pi_mode {
                PiMode::Literal => PathIntegrationMode::Literal,
                PiMode::PerHeading => PathIntegrationMode::PerHeading,
            };
            traces.push((
                Method::Bio,
                run_bio(&rec, &map, config, store.clone(), adjacency.clone())?,
            ));
        }
        if want_mcl {
            traces.push((
                Method::Mcl,
                run_mcl(&rec, &map, mcl_config_for(&scenario, args.particles))?,
            ));
        }
        for (method, trace) in &traces {
            for row in trace {
                debug!("{} {}", method.name(), row.to_csv());
            }
            let report = build_report(*method, trace, &rec, SettleRule::default())?;
            write(
                &dir.join(format!("{}_trace.csv", method.name())),
                &trace_to_csv(trace),
            )?;
            write(
                &dir.join(format!("{}_summary.txt", method.name())),
                &report.to_summary(),
            )?;
            info!(
                "seed {seed} {}: mean distance {:.4} m, rmse {:.4} m",
                method.name(),
                report.errors.mean_distance,
                report.errors.rmse
            );
            reports.push((seed, report));
        }
        let cols: Vec<(Method, &[TraceRow])> =
            traces.iter().map(|(m, t)| (*m, t.as_slice())).collect();
        write(&dir.join("columns.dat"), &columns_file(&rec, &cols))?;
    }

    let mut s = String::new();
    let _ = writeln!(s, "scenario = {}", base.name);
    let _ = writeln!(s, "trials = {}", args.trials.max(1));
    for method in [Method::Bio, Method::Mcl] {
        let rs: Vec<&RunReport> = reports
            .iter()
            .filter(|(_, r)| r.method == method)
            .map(|(_, r)| r)
            .collect();
        if rs.is_empty() {
            continue;
        }
        let med =
            |f: &dyn Fn(&RunReport) -> f64| median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let n = method.name();
        let _ = writeln!(
            s,
            "{n}.median_mean_distance = {:.6}",
            med(&|r| r.errors.mean_distance)
        );
        let _ = writeln!(s, "{n}.median_rmse = {:.6}", med(&|r| r.errors.rmse));
        for (seed, r) in reports.iter().filter(|(_, r)| r.method == method) {
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
            let rec: Vec<String> = r.recovery_steps.iter().map(|v| opt(*v)).collect();
            let _ = writeln!(
                s,
                "{n}.seed_{seed} = mean_distance {:.6} rmse {:.6} convergence {} recovery [{}]",
                r.errors.mean_distance,
                r.errors.rmse,
                opt(r.convergence_step),
                rec.join(", ")
            );
        }
    }
    write(&args.out.join("summary.txt"), &s)?;
    print!("{s}");
    Ok(())
}

fn eval(truth: &Path, traces: &[PathBuf], out: Option<&Path>) -> anyhow::Result<()> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })
    };
    let truth_rows = truth_from_csv(&read(truth)?, &truth.display().to_string())?;
    let mut named = Vec::new();
    for p in traces {
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().trim_end_matches("_trace").to_string())
            .unwrap_or_default();
        named.push((name, trace_from_csv(&read(p)?, &p.display().to_string())?));
    }
    let table = evaluate(&named, &truth_rows)?;
    let text = table.render();
    if let Some(out) = out {
        write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}
