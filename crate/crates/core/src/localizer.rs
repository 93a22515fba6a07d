//! One full localization iteration over the pose cell network, plus the
//! mapping pass that builds the landmark store.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_cell, CellIndex, NetworkGeometry, Pose, PoseDelta};
use crate::grid_map::{OccupancyGrid, DEFAULT_OCC_THRESHOLD};
use crate::local_view::{
    extract_landmark_with, inject, match_landmark, preprocess_scan, register_landmark,
    relative_rotations, Adjacency, ExtractParams, LandmarkStore, DEFAULT_CELL_SIZE, DEFAULT_DECAY,
    DEFAULT_MATCH_THRESHOLD, DEFAULT_S_V,
};
use crate::observation::{CellScorer, LidarScan, LikelihoodField, PreparedScan};
use crate::pose_cells::{KernelConfig, PacketEstimate, PathIntegrationMode, PoseCellNetwork};

/// How the belief starts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Initialization {
    /// Gaussian samples around a known starting pose.
    Known {
        #[serde(default = "default_init_sigma_xy")]
        sigma_xy: f64,
        #[serde(default = "default_init_sigma_theta")]
        sigma_theta: f64,
        #[serde(default = "default_init_samples")]
        samples: usize,
    },
    /// Equal belief over every free pose.
    Uniform,
}

fn default_init_sigma_xy() -> f64 {
    0.05
}

fn default_init_sigma_theta() -> f64 {
    0.05
}

fn default_init_samples() -> usize {
    500
}

impl Default for Initialization {
    fn default() -> Self {
        Initialization::Known {
            sigma_xy: default_init_sigma_xy(),
            sigma_theta: default_init_sigma_theta(),
            samples: default_init_samples(),
        }
    }
}

impl Initialization {
    pub fn validate(&self) -> Result<()> {
        if let Initialization::Known {
            sigma_xy,
            sigma_theta,
            samples,
        } = *self
        {
            if !(sigma_xy >= 0.0 && sigma_theta >= 0.0) {
                return Err(Error::config("init", "sigmas must be >= 0"));
            }
            if samples == 0 {
                return Err(Error::config("init.samples", "must be >= 1"));
            }
        }
        Ok(())
    }
}

/// Every tunable of the bio-inspired localizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub geometry: NetworkGeometry,
    pub kernels: KernelConfig,
    pub path_integration: PathIntegrationMode,
    /// Cells at or below this activity are dropped.
    pub prune_epsilon: f64,
    /// Global inhibition never exceeds this fraction of the mean active-cell
    /// activity, so a widely spread belief is thinned rather than erased.
    pub global_inhibition_cap: f64,
    /// Use every n-th beam for scoring.
    pub beam_stride: usize,
    /// Upper bound on map lookups per observation update; the beam stride
    /// grows while many cells are active.
    pub lookup_budget: usize,
    pub s_v: f64,
    pub lv_enabled: bool,
    pub lv_match_threshold: f64,
    pub lv_decay: f64,
    pub scan_cell_size: f64,
    pub extract: ExtractParams,
    /// Packet confidence needed to report convergence.
    pub convergence_threshold: f64,
    pub init: Initialization,
    /// Seed for sampled initialization.
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            geometry: NetworkGeometry::default(),
            kernels: KernelConfig::default(),
            path_integration: PathIntegrationMode::PerHeading,
            prune_epsilon: 1e-8,
            global_inhibition_cap: 0.5,
            beam_stride: 1,
            lookup_budget: 30_000_000,
            s_v: DEFAULT_S_V,
            lv_enabled: true,
            lv_match_threshold: DEFAULT_MATCH_THRESHOLD,
            lv_decay: DEFAULT_DECAY,
            scan_cell_size: DEFAULT_CELL_SIZE,
            extract: ExtractParams::default(),
            convergence_threshold: 0.8,
            init: Initialization::default(),
            seed: 0,
        }
    }
}

impl LocalizerConfig {
    /// Default configuration with a network sized to cover `map`.
    pub fn for_map(map: &OccupancyGrid) -> Result<Self> {
        let kernels = KernelConfig::default();
        let geometry = NetworkGeometry::covering(
            map.half_extent(),
            NetworkGeometry::DEFAULT_K_XY,
            NetworkGeometry::DEFAULT_N_THETA,
            kernels.planar_margin(),
        )?;
        Ok(Self {
            geometry,
            kernels,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.kernels.validate()?;
        self.init.validate()?;
        let checks: [(&str, bool); 8] = [
            (
                "prune_epsilon",
                self.prune_epsilon >= 0.0 && self.prune_epsilon < 1e-3,
            ),
            ("global_inhibition_cap", self.global_inhibition_cap > 0.0),
            ("beam_stride", self.beam_stride >= 1),
            ("s_v", self.s_v >= 0.0 && self.s_v.is_finite()),
            (
                "lv_match_threshold",
                (0.0..=1.0).contains(&self.lv_match_threshold),
            ),
            ("lv_decay", (0.0..=1.0).contains(&self.lv_decay)),
            ("scan_cell_size", self.scan_cell_size > 0.0),
            (
                "convergence_threshold",
                (0.0..=1.0).contains(&self.convergence_threshold),
            ),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::config(field, "value out of range"));
            }
        }
        Ok(())
    }
}

/// What one iteration reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub estimate: PacketEstimate,
    pub converged: bool,
    /// The belief collapsed this step and was reseeded uniformly.
    pub recovered: bool,
    pub lv_detected: Option<usize>,
    pub injected_mass: f64,
}

/// The bio-inspired localizer: pose cells, local view cells and the map.
#[derive(Debug, Clone)]
pub struct Localizer {
    config: LocalizerConfig,
    net: PoseCellNetwork,
    field: LikelihoodField,
    free_cells: Vec<CellIndex>,
    store: LandmarkStore,
    adjacency: Adjacency,
    mapping: bool,
}

impl Localizer {
    /// Builds the localizer and initializes the belief. `start` is the
    /// known initial pose, used only by [`Initialization::Known`].
    pub fn new(
        config: LocalizerConfig,
        map: &OccupancyGrid,
        store: LandmarkStore,
        adjacency: Adjacency,
        start: Option<Pose>,
    ) -> Result<Self> {
        config.validate()?;
        let net = PoseCellNetwork::new(config.geometry).with_prune_epsilon(config.prune_epsilon);
        let free_cells = free_pose_cells(map, &config.geometry);
        if free_cells.is_empty() {
            return Err(Error::config(
                "map",
                "no free space inside the pose cell network",
            ));
        }
        let mut loc = Self {
            field: LikelihoodField::new(map),
            net,
            free_cells,
            store,
            adjacency,
            mapping: false,
            config,
        };
        loc.initialize(start)?;
        Ok(loc)
    }

    /// Resets the belief according to the configured initialization.
    pub fn initialize(&mut self, start: Option<Pose>) -> Result<()> {
        self.store.reset_activity();
        match self.config.init {
            Initialization::Known {
                sigma_xy,
                sigma_theta,
                samples,
            } => {
                let p0 = start.ok_or_else(|| {
                    Error::config("init", "known initialization needs a start pose")
                })?;
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                self.net
                    .initialize_gaussian(&p0, sigma_xy, sigma_theta, samples, &mut rng)
            }
            Initialization::Uniform => self.net.initialize_uniform(&self.free_cells),
        }
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.config
    }

    pub fn network(&self) -> &PoseCellNetwork {
        &self.net
    }

    pub fn store(&self) -> &LandmarkStore {
        &self.store
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn into_store(self) -> (LandmarkStore, Adjacency) {
        (self.store, self.adjacency)
    }

    /// In mapping mode, unmatched landmarks seen while converged are stored.
    pub fn set_mapping(&mut self, on: bool) {
        self.mapping = on;
    }

    /// Free pose cells used for uniform (re)seeding.
    pub fn free_cells(&self) -> &[CellIndex] {
        &self.free_cells
    }

    /// One iteration: path integration, observation, landmark injection,
    /// excitation, inhibition, global inhibition, normalization and local
    /// view decay.
    pub fn step(&mut self, odom: &PoseDelta, scan: &LidarScan) -> Result<StepOutput> {
        let mut recovered = false;
        let mut lv_detected = None;
        let mut injected_mass = 0.0;

        self.net
            .path_integrate(odom, self.config.path_integration)?;

        let stride = self.stride_for(scan);
        let prepared = PreparedScan::new(scan, stride);
        if prepared.scored_beams() > 0 {
            let scorer = CellScorer::new(&self.field, &prepared, self.config.geometry);
            self.net.apply_observation(|c| scorer.score(c))?;
        }
        if self.net.is_empty() {
            self.reseed()?;
            recovered = true;
        }

        if self.config.lv_enabled {
            let points = preprocess_scan(scan, self.config.scan_cell_size)?;
            if let Some(landmark) = extract_landmark_with(&points, &self.config.extract) {
                match match_landmark(&self.store, &landmark, self.config.lv_match_threshold) {
                    Some((id, score)) => {
                        let k_theta = self.config.geometry.k_theta;
                        let stored = &self.store.cells()[id].landmark;
                        let shifts = relative_rotations(stored, &landmark)
                            .into_iter()
                            .map(|a| -(a / k_theta).round() as i64)
                            .collect();
                        self.store.set_activation(id, score.min(1.0))?;
                        self.store.set_heading_shifts(id, shifts)?;
                        lv_detected = Some(id);
                    }
                    None if self.mapping => {
                        if let Ok(est) = self.net.estimate() {
                            if est.confidence >= self.config.convergence_threshold {
                                register_landmark(
                                    &mut self.store,
                                    &mut self.adjacency,
                                    landmark,
                                    est.argmax,
                                )?;
                            }
                        }
                    }
                    None => {}
                }
            }
            if self.store.any_active() {
                injected_mass =
                    inject(&mut self.net, &self.store, &self.adjacency, self.config.s_v)?;
            }
        }

        let k = self.config.kernels;
        self.net.excite(&k);
        self.net.inhibit(&k);
        let mean = if self.net.is_empty() {
            0.0
        } else {
            self.net.total() / self.net.len() as f64
        };
        self.net
            .global_inhibit(k.s_g.min(self.config.global_inhibition_cap * mean));
        match self.net.normalize() {
            Ok(()) => {}
            Err(Error::DegenerateBelief) => {
                self.reseed()?;
                recovered = true;
            }
            Err(e) => return Err(e),
        }
        self.store.decay(self.config.lv_decay);

        let estimate = self.net.estimate()?;
        Ok(StepOutput {
            converged: estimate.confidence >= self.config.convergence_threshold,
            estimate,
            recovered,
            lv_detected,
            injected_mass,
        })
    }

    fn stride_for(&self, scan: &LidarScan) -> usize {
        let returns = scan.returns().count().max(1);
        let needed = (self.net.len() * returns).div_ceil(self.config.lookup_budget.max(1));
        self.config.beam_stride.max(needed)
    }

    fn reseed(&mut self) -> Result<()> {
        self.net.initialize_uniform(&self.free_cells)
    }

    /// Current estimate without stepping.
    pub fn estimate(&self) -> Result<PacketEstimate> {
        self.net.estimate()
    }
}

/// Pose cells whose planar center lies in free space, all headings.
pub fn free_pose_cells(map: &OccupancyGrid, g: &NetworkGeometry) -> Vec<CellIndex> {
    let mut planar = Vec::new();
    for yp in 0..g.n_xy as i64 {
        for xp in 0..g.n_xy as i64 {
            let (x, y) = (g.planar_center(xp), g.planar_center(yp));
            let (ix, iy) = map.world_to_grid(x, y);
            if map.in_bounds(ix, iy) && map.occupancy_at(ix, iy) < DEFAULT_OCC_THRESHOLD {
                planar.push((xp, yp));
            }
        }
    }
    let mut cells = Vec::with_capacity(planar.len() * g.n_theta);
    for tp in 0..g.n_theta as i64 {
        for &(xp, yp) in &planar {
            cells.push(CellIndex::new(xp, yp, tp));
        }
    }
    cells
}

/// Settings of the landmark mapping pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingParams {
    pub scan_cell_size: f64,
    pub extract: ExtractParams,
    pub match_threshold: f64,
    /// When a stored landmark is seen again at least this many planar cells
    /// (or heading cells) from all of its anchors, the new pose becomes an
    /// extra anchor. `None` keeps one anchor per landmark.
    pub anchor_spacing: Option<i64>,
}

impl Default for MappingParams {
    fn default() -> Self {
        Self {
            scan_cell_size: DEFAULT_CELL_SIZE,
            extract: ExtractParams::default(),
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            anchor_spacing: Some(3),
        }
    }
}

/// Builds a landmark store from scans taken at known poses.
pub fn run_mapping_pass(
    geometry: &NetworkGeometry,
    trajectory: &[Pose],
    scans: &[LidarScan],
    params: &MappingParams,
) -> Result<(LandmarkStore, Adjacency)> {
    if trajectory.is_empty() {
        return Err(Error::value("mapping pass needs a non-empty trajectory"));
    }
    if trajectory.len() != scans.len() {
        return Err(Error::value(format!(
            "{} poses but {} scans",
            trajectory.len(),
            scans.len()
        )));
    }
    let mut store = LandmarkStore::new();
    let mut adjacency = Adjacency::new();
    let nt = geometry.n_theta as i64;
    for (pose, scan) in trajectory.iter().zip(scans) {
        let points = preprocess_scan(scan, params.scan_cell_size)?;
        let Some(landmark) = extract_landmark_with(&points, &params.extract) else {
            continue;
        };
        let cell = pose_to_cell(pose, geometry)?;
        match match_landmark(&store, &landmark, params.match_threshold) {
            None => {
                register_landmark(&mut store, &mut adjacency, landmark, cell)?;
            }
            Some((id, _)) => {
                if let Some(spacing) = params.anchor_spacing {
                    // anchor headings are kept in the frame of the stored view
                    let Some(&alpha) =
                        relative_rotations(&store.cells()[id].landmark, &landmark).first()
                    else {
                        continue;
                    };
                    let cell = CellIndex {
                        tp: (cell.tp + (alpha / geometry.k_theta).round() as i64).rem_euclid(nt),
                        ..cell
                    };
                    let far = adjacency.links(id).iter().all(|(a, _)| {
                        let dt = (a.tp - cell.tp)
                            .rem_euclid(nt)
                            .min((cell.tp - a.tp).rem_euclid(nt));
                        (a.xp - cell.xp).abs().max((a.yp - cell.yp).abs()) >= spacing
                            || dt >= spacing
                    });
                    if far {
                        adjacency.add_anchor(id, cell);
                    }
                }
            }
        }
    }
    Ok((store, adjacency))
}

/// One row of the per-step trace shared by both localizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub est: Pose,
    pub confidence: f64,
    pub converged: bool,
    pub lv_detected: Option<usize>,
    pub injected_mass: f64,
}

pub const TRACE_HEADER: &str =
    "t,est_x,est_y,est_theta,confidence,converged,lv_detected_id,injected_mass";

impl TraceRow {
    pub fn from_step(t: usize, out: &StepOutput) -> Self {
        Self {
            t,
            est: out.estimate.pose,
            confidence: out.estimate.confidence,
            converged: out.converged,
            lv_detected: out.lv_detected,
            injected_mass: out.injected_mass,
        }
    }

    pub fn to_csv(&self) -> String {
        let lv = self.lv_detected.map(|i| i.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.t,
            self.est.x,
            self.est.y,
            self.est.theta,
            self.confidence,
            u8::from(self.converged),
            lv,
            self.injected_mass
        )
    }

    pub fn from_csv(row: &str, source_name: &str, line: usize) -> Result<Self> {
        let f: Vec<&str> = row.split(',').map(str::trim).collect();
        let err = |m: String| Error::parse(source_name, line, m);
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, got {}", f.len())));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|e| err(format!("field {}: {e}", i + 1)))
        };
        Ok(Self {
            t: f[0].parse().map_err(|e| err(format!("bad t: {e}")))?,
            est: Pose {
                x: num(1)?,
                y: num(2)?,
                theta: num(3)?,
            },
            confidence: num(4)?,
            converged: match f[5] {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(err(format!("bad converged flag `{other}`"))),
            },
            lv_detected: if f[6].is_empty() {
                None
            } else {
                Some(f[6].parse().map_err(|e| err(format!("bad lv id: {e}")))?)
            },
            injected_mass: num(7)?,
        })
    }
}

/// Renders trace rows with a header line.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

/// Parses a trace written by [`trace_to_csv`].
pub fn trace_from_csv(text: &str, source_name: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        _ => {
            return Err(Error::parse(
                source_name,
                1,
                format!("expected header `{TRACE_HEADER}`"),
            ))
        }
    }
    lines
        .map(|(i, l)| TraceRow::from_csv(l, source_name, i + 1))
        .collect()
}
