//! Synthetic maze worlds: map generation, path planning, scripted robot
//! motion with noisy odometry and LiDAR, and kidnap events.

use std::collections::{BinaryHeap, VecDeque};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, compose_delta, Pose, PoseDelta};
use crate::grid_map::{OccupancyGrid, DEFAULT_OCC_THRESHOLD};
use crate::localizer::Initialization;
use crate::observation::{simulate_scan, LidarScan, LidarSpec};

/// Parameters of a generated maze. Lengths are in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeSpec {
    pub width: f64,
    pub height: f64,
    pub resolution: f64,
    pub rooms_x: usize,
    pub rooms_y: usize,
    pub wall_thickness: f64,
    pub door_width: f64,
    /// Doors beyond the spanning tree; each one closes a loop.
    pub extra_doors: usize,
    pub obstacles: usize,
    pub obstacle_min: f64,
    pub obstacle_max: f64,
    /// Build the right half as the mirror image of the left half.
    pub symmetric_wing: bool,
    pub seed: u64,
}

impl Default for MazeSpec {
    fn default() -> Self {
        Self {
            width: 15.0,
            height: 15.0,
            resolution: 0.1,
            rooms_x: 3,
            rooms_y: 3,
            wall_thickness: 0.2,
            door_width: 1.0,
            extra_doors: 2,
            obstacles: 6,
            obstacle_min: 0.3,
            obstacle_max: 0.8,
            symmetric_wing: false,
            seed: 7,
        }
    }
}

/// Space kept between obstacles and room walls.
const OBSTACLE_CLEARANCE: f64 = 0.8;
/// Space kept between a door and the corners of its wall.
const DOOR_MARGIN: f64 = 0.3;

impl MazeSpec {
    /// A single closed room.
    pub fn minimal(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            rooms_x: 1,
            rooms_y: 1,
            extra_doors: 0,
            obstacles: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width >= 3.0 && self.height >= 3.0) {
            return Err(Error::config(
                "width/height",
                format!(
                    "maze must be at least 3×3 m, got {}×{}",
                    self.width, self.height
                ),
            ));
        }
        if !(self.resolution > 0.0 && self.resolution <= 0.5) {
            return Err(Error::config(
                "resolution",
                format!("must be in (0, 0.5], got {}", self.resolution),
            ));
        }
        if self.rooms_x == 0 || self.rooms_y == 0 {
            return Err(Error::config(
                "rooms_x/rooms_y",
                "need at least one room per axis",
            ));
        }
        if !(self.wall_thickness >= self.resolution) {
            return Err(Error::config(
                "wall_thickness",
                format!(
                    "must be at least one cell ({}), got {}",
                    self.resolution, self.wall_thickness
                ),
            ));
        }
        if !(self.obstacle_min > 0.0 && self.obstacle_max >= self.obstacle_min) {
            return Err(Error::config(
                "obstacle_min/obstacle_max",
                "need 0 < obstacle_min <= obstacle_max",
            ));
        }
        if self.symmetric_wing && self.rooms_x % 2 != 0 {
            return Err(Error::config("symmetric_wing", "needs an even rooms_x"));
        }
        let room_w = (self.width - self.wall_thickness) / self.rooms_x as f64 - self.wall_thickness;
        let room_h =
            (self.height - self.wall_thickness) / self.rooms_y as f64 - self.wall_thickness;
        let needed = self.door_width + 2.0 * DOOR_MARGIN;
        if self.rooms_x * self.rooms_y > 1
            && (room_w.min(room_h) < needed || !(self.door_width > 0.0))
        {
            return Err(Error::config(
                "door_width",
                format!(
                    "rooms of {room_w:.2}×{room_h:.2} m cannot hold {} m doors",
                    self.door_width
                ),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self =
            toml::from_str(text).map_err(|e| Error::config("maze spec", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A generated map with the free-space center of every room.
#[derive(Debug, Clone)]
pub struct Maze {
    pub grid: OccupancyGrid,
    /// Room centers in row-major order (x fastest), world meters.
    pub room_centers: Vec<(f64, f64)>,
    pub rooms_x: usize,
    pub rooms_y: usize,
}

/// Generates a maze map centered on the world origin.
pub fn generate_maze(spec: &MazeSpec, seed: u64) -> Result<OccupancyGrid> {
    generate_maze_layout(spec, seed).map(|m| m.grid)
}

/// Like [`generate_maze`], also reporting room centers.
pub fn generate_maze_layout(spec: &MazeSpec, seed: u64) -> Result<Maze> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = spec.resolution;
    let w = (spec.width / res).round() as i64;
    let h = (spec.height / res).round() as i64;
    let origin = Pose::new(-(w as f64) * res / 2.0, -(h as f64) * res / 2.0, 0.0);
    let mut grid = OccupancyGrid::filled(w as usize, h as usize, res, origin, 0.0)?;
    let tw = ((spec.wall_thickness / res).round() as i64).max(1);

    // boundaries between rooms: cell ranges [start, start + tw)
    let bounds = |n: i64, rooms: usize| -> Vec<i64> {
        (0..=rooms)
            .map(|k| {
                if k == 0 {
                    0
                } else if k == rooms {
                    n - tw
                } else {
                    ((n - tw) as f64 * k as f64 / rooms as f64).round() as i64
                }
            })
            .collect()
    };
    let bx = bounds(w, spec.rooms_x);
    let by = bounds(h, spec.rooms_y);
    let fill = |grid: &mut OccupancyGrid, x0: i64, x1: i64, y0: i64, y1: i64, v: f64| {
        for ix in x0.max(0)..x1.min(w) {
            for iy in y0.max(0)..y1.min(h) {
                grid.set(ix, iy, v);
            }
        }
    };
    for &x in &bx {
        fill(&mut grid, x, x + tw, 0, h, 1.0);
    }
    for &y in &by {
        fill(&mut grid, 0, w, y, y + tw, 1.0);
    }

    // room adjacency; in a symmetric maze only the left wing and the middle wall
    let rx = spec.rooms_x;
    let ry = spec.rooms_y;
    let id = |cx: usize, cy: usize| cy * rx + cx;
    let in_left = |cx: usize| !spec.symmetric_wing || cx < rx / 2;
    let mut edges: Vec<(usize, usize, bool)> = Vec::new();
    for cy in 0..ry {
        for cx in 0..rx {
            if cx + 1 < rx && in_left(cx + 1) {
                edges.push((id(cx, cy), id(cx + 1, cy), true));
            }
            if cy + 1 < ry && in_left(cx) {
                edges.push((id(cx, cy), id(cx, cy + 1), false));
            }
        }
    }
    edges.shuffle(&mut rng);
    let mut parent: Vec<usize> = (0..rx * ry).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut doors = Vec::new();
    let mut spare = Vec::new();
    for e in edges {
        let (a, b) = (find(&mut parent, e.0), find(&mut parent, e.1));
        if a != b {
            parent[a] = b;
            doors.push(e);
        } else {
            spare.push(e);
        }
    }
    doors.extend(spare.into_iter().take(spec.extra_doors));
    if spec.symmetric_wing {
        let cy = rng.random_range(0..ry);
        doors.push((id(rx / 2 - 1, cy), id(rx / 2, cy), true));
    }

    let dw = ((spec.door_width / res).round() as i64).max(1);
    let margin = (DOOR_MARGIN / res).ceil() as i64;
    for (a, _, horizontal) in doors {
        let (cx, cy) = ((a % rx) as i64, (a / rx) as i64);
        if horizontal {
            // wall between (cx, cy) and (cx + 1, cy)
            let x = bx[cx as usize + 1];
            let lo = by[cy as usize] + tw + margin;
            let hi = by[cy as usize + 1] - margin - dw;
            let y0 = rng.random_range(lo..=hi.max(lo));
            fill(&mut grid, x, x + tw, y0, y0 + dw, 0.0);
        } else {
            let y = by[cy as usize + 1];
            let lo = bx[cx as usize] + tw + margin;
            let hi = bx[cx as usize + 1] - margin - dw;
            let x0 = rng.random_range(lo..=hi.max(lo));
            fill(&mut grid, x0, x0 + dw, y, y + tw, 0.0);
        }
    }

    let clear = (OBSTACLE_CLEARANCE / res).ceil() as i64;
    let candidates: Vec<(usize, usize)> = (0..ry)
        .flat_map(|cy| (0..rx).map(move |cx| (cx, cy)))
        .filter(|&(cx, _)| in_left(cx))
        .collect();
    for _ in 0..spec.obstacles {
        let (cx, cy) = candidates[rng.random_range(0..candidates.len())];
        let size = rng.random_range(spec.obstacle_min..=spec.obstacle_max);
        let (sx, sy) = (
            ((size / res).round() as i64).max(1),
            ((rng.random_range(spec.obstacle_min..=spec.obstacle_max) / res).round() as i64).max(1),
        );
        let (x_lo, x_hi) = (bx[cx] + tw + clear, bx[cx + 1] - clear - sx);
        let (y_lo, y_hi) = (by[cy] + tw + clear, by[cy + 1] - clear - sy);
        if x_hi < x_lo || y_hi < y_lo {
            continue;
        }
        let x0 = rng.random_range(x_lo..=x_hi);
        let y0 = rng.random_range(y_lo..=y_hi);
        fill(&mut grid, x0, x0 + sx, y0, y0 + sy, 1.0);
    }

    if spec.symmetric_wing {
        for ix in w / 2..w {
            for iy in 0..h {
                let v = grid.occupancy_at(w - 1 - ix, iy);
                grid.set(ix, iy, v);
            }
        }
    }

    // outer walls stay closed whatever the doors did
    fill(&mut grid, 0, tw, 0, h, 1.0);
    fill(&mut grid, w - tw, w, 0, h, 1.0);
    fill(&mut grid, 0, w, 0, tw, 1.0);
    fill(&mut grid, 0, w, h - tw, h, 1.0);

    if !free_space_connected(&grid) {
        return Err(Error::config(
            "maze spec",
            "generated free space is not connected",
        ));
    }
    let mut room_centers = Vec::with_capacity(rx * ry);
    for cy in 0..ry {
        for cx in 0..rx {
            let ix = (bx[cx] + tw + bx[cx + 1]) / 2;
            let iy = (by[cy] + tw + by[cy + 1]) / 2;
            room_centers.push(grid.grid_to_world(ix, iy));
        }
    }
    Ok(Maze {
        grid,
        room_centers,
        rooms_x: rx,
        rooms_y: ry,
    })
}

fn is_free(grid: &OccupancyGrid, ix: i64, iy: i64) -> bool {
    grid.in_bounds(ix, iy) && grid.occupancy_at(ix, iy) < DEFAULT_OCC_THRESHOLD
}

/// Free cells 4-connected to `(ix, iy)`, as a row-major mask.
pub fn flood_fill(grid: &OccupancyGrid, ix: i64, iy: i64) -> Vec<bool> {
    let (w, h) = (grid.width() as i64, grid.height() as i64);
    let mut seen = vec![false; (w * h) as usize];
    if !is_free(grid, ix, iy) {
        return seen;
    }
    let mut queue = VecDeque::from([(ix, iy)]);
    seen[(iy * w + ix) as usize] = true;
    while let Some((x, y)) = queue.pop_front() {
        for (nx, ny) in [(x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)] {
            if is_free(grid, nx, ny) && !seen[(ny * w + nx) as usize] {
                seen[(ny * w + nx) as usize] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    seen
}

/// Whether every free cell is reachable from every other.
pub fn free_space_connected(grid: &OccupancyGrid) -> bool {
    let w = grid.width() as i64;
    let free: Vec<usize> = (0..grid.cells().len())
        .filter(|&i| grid.cells()[i] < DEFAULT_OCC_THRESHOLD)
        .collect();
    let Some(&first) = free.first() else {
        return true;
    };
    let seen = flood_fill(grid, first as i64 % w, first as i64 / w);
    free.iter().all(|&i| seen[i])
}

/// Cells farther than `clearance` meters from every occupied cell.
fn clearance_mask(grid: &OccupancyGrid, clearance: f64) -> Vec<bool> {
    let (w, h) = (grid.width() as i64, grid.height() as i64);
    let r = (clearance / grid.resolution()).ceil() as i64;
    let r2 = (clearance / grid.resolution()).powi(2);
    let mut ok: Vec<bool> = grid
        .cells()
        .iter()
        .map(|&v| v < DEFAULT_OCC_THRESHOLD)
        .collect();
    for iy in 0..h {
        for ix in 0..w {
            if grid.occupancy_at(ix, iy) < DEFAULT_OCC_THRESHOLD {
                continue;
            }
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (ix + dx, iy + dy);
                    if (dx * dx + dy * dy) as f64 <= r2
                        && (0..w).contains(&x)
                        && (0..h).contains(&y)
                    {
                        ok[(y * w + x) as usize] = false;
                    }
                }
            }
        }
    }
    ok
}

/// Free cell nearest to a world point among those with the given clearance.
pub fn nearest_clear_point(
    grid: &OccupancyGrid,
    x: f64,
    y: f64,
    clearance: f64,
) -> Option<(f64, f64)> {
    let ok = clearance_mask(grid, clearance);
    let w = grid.width() as i64;
    let (cx, cy) = grid.world_to_grid(x, y);
    (0..ok.len())
        .filter(|&i| ok[i])
        .map(|i| (i as i64 % w, i as i64 / w))
        .min_by_key(|&(ix, iy)| ((ix - cx).pow(2) + (iy - cy).pow(2), iy, ix))
        .map(|(ix, iy)| grid.grid_to_world(ix, iy))
}

/// Shortest 8-connected path between two world points over cells with at
/// least `clearance` meters to any wall. Returns cell centers, endpoints
/// included.
pub fn plan_path(
    grid: &OccupancyGrid,
    from: (f64, f64),
    to: (f64, f64),
    clearance: f64,
) -> Option<Vec<(f64, f64)>> {
    let ok = clearance_mask(grid, clearance);
    let (w, h) = (grid.width() as i64, grid.height() as i64);
    let start = grid.world_to_grid(from.0, from.1);
    let goal = grid.world_to_grid(to.0, to.1);
    let idx = |(x, y): (i64, i64)| (y * w + x) as usize;
    let inside = |(x, y): (i64, i64)| (0..w).contains(&x) && (0..h).contains(&y);
    if !inside(start) || !inside(goal) || !ok[idx(start)] || !ok[idx(goal)] {
        return None;
    }
    let heuristic = |(x, y): (i64, i64)| {
        let (dx, dy) = ((x - goal.0).abs(), (y - goal.1).abs());
        10 * dx.max(dy) + 4 * dx.min(dy)
    };
    let mut cost = vec![i64::MAX; ok.len()];
    let mut came = vec![usize::MAX; ok.len()];
    let mut open = BinaryHeap::new();
    cost[idx(start)] = 0;
    open.push(std::cmp::Reverse((heuristic(start), idx(start))));
    while let Some(std::cmp::Reverse((_, cur))) = open.pop() {
        if cur == idx(goal) {
            break;
        }
        let (x, y) = (cur as i64 % w, cur as i64 / w);
        for (dx, dy) in [
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ] {
            let n = (x + dx, y + dy);
            if !inside(n) || !ok[idx(n)] {
                continue;
            }
            // no squeezing diagonally between two blocked cells
            if dx != 0 && dy != 0 && (!ok[idx((x + dx, y))] || !ok[idx((x, y + dy))]) {
                continue;
            }
            let step = if dx != 0 && dy != 0 { 14 } else { 10 };
            let c = cost[cur] + step;
            if c < cost[idx(n)] {
                cost[idx(n)] = c;
                came[idx(n)] = cur;
                open.push(std::cmp::Reverse((c + heuristic(n), idx(n))));
            }
        }
    }
    if cost[idx(goal)] == i64::MAX {
        return None;
    }
    let mut cells = vec![idx(goal)];
    while *cells.last().unwrap() != idx(start) {
        cells.push(came[*cells.last().unwrap()]);
    }
    cells.reverse();
    Some(
        cells
            .into_iter()
            .map(|i| grid.grid_to_world(i as i64 % w, i as i64 / w))
            .collect(),
    )
}

/// A point the robot drives to. It waits there until `step` if it arrives early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    /// Heading to turn to while waiting, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default)]
    pub step: usize,
}

/// The robot is moved to `pose` at `step` without telling the odometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KidnapEvent {
    pub step: usize,
    pub pose: Pose,
    /// Waypoint index to continue with afterwards; defaults to the current one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume_waypoint: Option<usize>,
}

/// Odometry noise: standard deviation per meter translated and per radian turned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdometryNoise {
    pub trans_sigma: f64,
    pub rot_sigma: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        Self {
            trans_sigma: 0.05,
            rot_sigma: 0.05,
        }
    }
}

impl OdometryNoise {
    pub const NONE: Self = Self {
        trans_sigma: 0.0,
        rot_sigma: 0.0,
    };
}

/// Per-step motion caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionLimits {
    pub max_translation: f64,
    pub max_rotation: f64,
}

impl Default for MotionLimits {
    fn default() -> Self {
        Self {
            max_translation: 0.05,
            max_rotation: 0.05,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Map file, relative to the scenario file. Takes precedence over `maze`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<PathBuf>,
    /// Maze to generate when no map file is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maze: Option<MazeSpec>,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    pub initial_pose: Pose,
    #[serde(default)]
    pub init: Initialization,
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
    #[serde(default)]
    pub odometry: OdometryNoise,
    #[serde(default)]
    pub lidar: LidarSpec,
    #[serde(default)]
    pub motion: MotionLimits,
    #[serde(default)]
    pub kidnaps: Vec<KidnapEvent>,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::config("scenario", e.to_string()))?;
        s.validate_fields()?;
        Ok(s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("scenario", e.to_string()))
    }

    /// Checks values that do not need the map.
    pub fn validate_fields(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if self.map.is_none() && self.maze.is_none() {
            return Err(Error::config(
                "map",
                "scenario needs either `map` or `maze`",
            ));
        }
        if !(self.odometry.trans_sigma >= 0.0 && self.odometry.rot_sigma >= 0.0) {
            return Err(Error::config("odometry", "noise sigmas must be >= 0"));
        }
        if self.lidar.beams == 0 {
            return Err(Error::config("lidar.beams", "must be >= 1"));
        }
        if !(self.lidar.max_range > 0.0) {
            return Err(Error::config("lidar.max_range", "must be > 0"));
        }
        if !(self.lidar.noise_sigma >= 0.0) {
            return Err(Error::config("lidar.noise_sigma", "must be >= 0"));
        }
        if !(self.motion.max_translation > 0.0 && self.motion.max_rotation > 0.0) {
            return Err(Error::config("motion", "limits must be > 0"));
        }
        for (i, k) in self.kidnaps.iter().enumerate() {
            if k.step == 0 || k.step > self.steps {
                return Err(Error::config(
                    format!("kidnaps[{i}].step"),
                    format!("must be in 1..={}", self.steps),
                ));
            }
            if let Some(r) = k.resume_waypoint {
                if r > self.waypoints.len() {
                    return Err(Error::config(
                        format!("kidnaps[{i}].resume_waypoint"),
                        format!("only {} waypoints", self.waypoints.len()),
                    ));
                }
            }
        }
        self.init.validate()
    }

    /// Checks that the start, waypoints and kidnap targets lie in the free
    /// space connected to the start.
    pub fn validate_on(&self, map: &OccupancyGrid) -> Result<()> {
        let (sx, sy) = map.world_to_grid(self.initial_pose.x, self.initial_pose.y);
        if !is_free(map, sx, sy) {
            return Err(Error::config("initial_pose", "lies outside free space"));
        }
        let reach = flood_fill(map, sx, sy);
        let reachable = |x: f64, y: f64| {
            let (ix, iy) = map.world_to_grid(x, y);
            is_free(map, ix, iy) && reach[(iy * map.width() as i64 + ix) as usize]
        };
        for (i, w) in self.waypoints.iter().enumerate() {
            if !reachable(w.x, w.y) {
                return Err(Error::config(
                    format!("waypoints[{i}]"),
                    "not reachable free space",
                ));
            }
        }
        for (i, k) in self.kidnaps.iter().enumerate() {
            if !reachable(k.pose.x, k.pose.y) {
                return Err(Error::config(
                    format!("kidnaps[{i}].pose"),
                    "not reachable free space",
                ));
            }
        }
        Ok(())
    }

    /// Loads or generates the scenario's map. Relative map paths resolve
    /// against `base_dir`.
    pub fn resolve_map(&self, base_dir: &Path) -> Result<OccupancyGrid> {
        match (&self.map, &self.maze) {
            (Some(p), _) => crate::grid_map::load_map(base_dir.join(p)),
            (None, Some(spec)) => generate_maze(spec, spec.seed),
            (None, None) => Err(Error::config(
                "map",
                "scenario needs either `map` or `maze`",
            )),
        }
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Scenario::from_toml_str(&text).map_err(|e| match e {
        Error::Config { field, message } => {
            Error::config(field, format!("{}: {message}", path.display()))
        }
        other => other,
    })
}

/// Everything the simulator reveals for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    /// Step index, starting at 1.
    pub t: usize,
    pub true_pose: Pose,
    /// Noisy odometry since the previous step.
    pub odom: PoseDelta,
    pub scan: LidarScan,
    pub kidnapped: bool,
    /// Index of the waypoint being driven to after this step.
    pub waypoint: usize,
}

/// A running scenario.
#[derive(Debug, Clone)]
pub struct Simulation<'m> {
    scenario: Scenario,
    map: &'m OccupancyGrid,
    pose: Pose,
    waypoint: usize,
    t: usize,
    odom_rng: ChaCha8Rng,
    lidar_rng: ChaCha8Rng,
}

impl<'m> Simulation<'m> {
    pub fn new(scenario: Scenario, map: &'m OccupancyGrid) -> Result<Self> {
        scenario.validate_fields()?;
        scenario.validate_on(map)?;
        let mut odom_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        odom_rng.set_stream(1);
        let mut lidar_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        lidar_rng.set_stream(2);
        Ok(Self {
            pose: scenario.initial_pose,
            scenario,
            map,
            waypoint: 0,
            t: 0,
            odom_rng,
            lidar_rng,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn pose(&self) -> Pose {
        self.pose
    }

    /// Steps taken so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.t >= self.scenario.steps
    }

    /// Noisy scan from the current true pose, without advancing time.
    pub fn observe(&mut self) -> Result<LidarScan> {
        simulate_scan(
            self.map,
            &self.pose,
            &self.scenario.lidar,
            &mut self.lidar_rng,
        )
    }

    /// Advances one step.
    pub fn step(&mut self) -> Result<SimFrame> {
        if self.is_done() {
            return Err(Error::value(format!(
                "scenario has only {} steps",
                self.scenario.steps
            )));
        }
        self.t += 1;
        let prev = self.pose;
        let next = self.drive();
        self.pose = next;
        let truth = compose_delta(&prev, &next);
        let odom = self.noisy(&truth, prev.theta);

        let mut kidnapped = false;
        if let Some(k) = self.scenario.kidnaps.iter().find(|k| k.step == self.t) {
            self.pose = k.pose;
            if let Some(r) = k.resume_waypoint {
                self.waypoint = r;
            }
            kidnapped = true;
        }
        let scan = self.observe()?;
        Ok(SimFrame {
            t: self.t,
            true_pose: self.pose,
            odom,
            scan,
            kidnapped,
            waypoint: self.waypoint,
        })
    }

    /// Next true pose under the waypoint controller.
    fn drive(&mut self) -> Pose {
        let lim = self.scenario.motion;
        let p = self.pose;
        while let Some(wp) = self.scenario.waypoints.get(self.waypoint).copied() {
            let d = (wp.x - p.x).hypot(wp.y - p.y);
            if d > 1e-9 {
                let err = angle_diff((wp.y - p.y).atan2(wp.x - p.x), p.theta);
                let dtheta = err.clamp(-lim.max_rotation, lim.max_rotation);
                let heading = p.theta + dtheta;
                let remaining = (err - dtheta).abs();
                if remaining > 0.35 {
                    return Pose::new(p.x, p.y, heading);
                }
                let moved = if d <= lim.max_translation {
                    Pose::new(wp.x, wp.y, heading)
                } else {
                    let (s, c) = heading.sin_cos();
                    Pose::new(
                        p.x + c * lim.max_translation,
                        p.y + s * lim.max_translation,
                        heading,
                    )
                };
                let (ix, iy) = self.map.world_to_grid(moved.x, moved.y);
                return if is_free(self.map, ix, iy) {
                    moved
                } else {
                    Pose::new(p.x, p.y, heading)
                };
            }
            if self.t < wp.step {
                let turn = wp
                    .theta
                    .map(|th| angle_diff(th, p.theta).clamp(-lim.max_rotation, lim.max_rotation))
                    .unwrap_or(0.0);
                return Pose::new(p.x, p.y, p.theta + turn);
            }
            self.waypoint += 1;
        }
        p
    }

    fn noisy(&mut self, truth: &PoseDelta, heading: f64) -> PoseDelta {
        let n = self.scenario.odometry;
        let trans = truth.translation();
        if (n.trans_sigma == 0.0 || trans == 0.0) && (n.rot_sigma == 0.0 || truth.dtheta == 0.0) {
            return *truth;
        }
        let mut g = || -> f64 { StandardNormal.sample(&mut self.odom_rng) };
        let forward = truth.forward + n.trans_sigma * trans * g();
        let lateral = truth.lateral + n.trans_sigma * trans * g();
        let dtheta = truth.dtheta + n.rot_sigma * truth.dtheta.abs() * g();
        PoseDelta::from_robot_frame(forward, lateral, dtheta, heading)
    }
}

/// Waypoints every `spacing` meters along a planned path (the first point is skipped).
pub fn waypoints_along(path: &[(f64, f64)], spacing: f64) -> Vec<Waypoint> {
    let mut out = Vec::new();
    let mut acc = 0.0;
    for w in path.windows(2) {
        acc += (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
        if acc >= spacing {
            out.push(Waypoint {
                x: w[1].0,
                y: w[1].1,
                theta: None,
                step: 0,
            });
            acc = 0.0;
        }
    }
    if let Some(&last) = path.last() {
        if out.last().is_none_or(|w| (w.x, w.y) != last) && path.len() > 1 {
            out.push(Waypoint {
                x: last.0,
                y: last.1,
                theta: None,
                step: 0,
            });
        }
    }
    out
}

/// A tour through every room in serpentine order and back, repeated until
/// it is at least `min_length` meters long. Returns the start pose and the
/// waypoints.
pub fn room_tour(
    maze: &Maze,
    clearance: f64,
    spacing: f64,
    min_length: f64,
) -> Result<(Pose, Vec<Waypoint>)> {
    let mut order = Vec::new();
    for cy in 0..maze.rooms_y {
        for k in 0..maze.rooms_x {
            let cx = if cy % 2 == 0 { k } else { maze.rooms_x - 1 - k };
            order.push(cy * maze.rooms_x + cx);
        }
    }
    let targets: Vec<(f64, f64)> = order
        .iter()
        .map(|&r| {
            let (x, y) = maze.room_centers[r];
            nearest_clear_point(&maze.grid, x, y, clearance)
                .ok_or_else(|| Error::config("maze spec", "no free space with enough clearance"))
        })
        .collect::<Result<_>>()?;
    let mut legs: Vec<Vec<(f64, f64)>> = Vec::new();
    for w in targets.windows(2) {
        let leg = plan_path(&maze.grid, w[0], w[1], clearance).ok_or_else(|| {
            Error::config("maze spec", "rooms are not connected with enough clearance")
        })?;
        legs.push(leg);
    }
    let start = targets[0];
    let mut path: Vec<(f64, f64)> = vec![start];
    let mut length = 0.0;
    let mut forward = true;
    if legs.is_empty() {
        return Ok((Pose::new(start.0, start.1, 0.0), Vec::new()));
    }
    while length < min_length {
        let seq: Vec<Vec<(f64, f64)>> = if forward {
            legs.clone()
        } else {
            legs.iter()
                .rev()
                .map(|l| l.iter().rev().copied().collect())
                .collect()
        };
        for leg in seq {
            for &p in &leg[1..] {
                let last = *path.last().unwrap();
                length += (p.0 - last.0).hypot(p.1 - last.1);
                path.push(p);
            }
        }
        forward = !forward;
    }
    let wps = waypoints_along(&path, spacing);
    let heading = wps
        .first()
        .map(|w| (w.y - start.1).atan2(w.x - start.0))
        .unwrap_or(0.0);
    Ok((Pose::new(start.0, start.1, heading), wps))
}

/// Draws a uniformly random free pose (heading uniform) using rejection sampling.
pub fn sample_free_pose<R: Rng + ?Sized>(grid: &OccupancyGrid, rng: &mut R) -> Result<Pose> {
    if grid.cells().iter().all(|&v| v >= DEFAULT_OCC_THRESHOLD) {
        return Err(Error::value("map has no free space"));
    }
    let o = grid.origin();
    let (w, h) = (
        grid.width() as f64 * grid.resolution(),
        grid.height() as f64 * grid.resolution(),
    );
    loop {
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let (s, c) = o.theta.sin_cos();
        let (lx, ly) = (u * w, v * h);
        let (x, y) = (o.x + c * lx - s * ly, o.y + s * lx + c * ly);
        if !grid.is_occupied_world(x, y, DEFAULT_OCC_THRESHOLD) {
            let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            return Ok(Pose::new(x, y, theta));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    fn straight_scenario(noise: OdometryNoise) -> (OccupancyGrid, Scenario) {
        let map = generate_maze(&MazeSpec::minimal(4.0, 4.0), 1).unwrap();
        let s = Scenario {
            name: "leg".into(),
            map: None,
            maze: Some(MazeSpec::minimal(4.0, 4.0)),
            steps: 100,
            seed: 3,
            initial_pose: Pose::new(-0.5, 0.0, 0.0),
            init: Initialization::default(),
            waypoints: vec![Waypoint {
                x: 0.5,
                y: 0.0,
                theta: None,
                step: 0,
            }],
            odometry: noise,
            lidar: LidarSpec {
                beams: 36,
                ..LidarSpec::default()
            },
            motion: MotionLimits {
                max_translation: 0.01,
                max_rotation: 0.05,
            },
            kidnaps: vec![],
        };
        (map, s)
    }

    #[test]
    fn minimal_spec_is_one_closed_room() {
        let m = generate_maze(&MazeSpec::minimal(4.0, 3.0), 0).unwrap();
        assert_eq!((m.width(), m.height()), (40, 30));
        for ix in 0..40 {
            for iy in 0..30 {
                let border = ix < 2 || iy < 2 || ix >= 38 || iy >= 28;
                assert_eq!(m.occupancy_at(ix, iy) == 1.0, border, "({ix}, {iy})");
            }
        }
        assert!((m.origin().x + 2.0).abs() < 1e-12 && (m.origin().y + 1.5).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(MazeSpec::minimal(2.0, 5.0).validate().is_err());
        let bad = MazeSpec {
            rooms_x: 10,
            ..MazeSpec::default()
        };
        assert!(bad.validate().is_err());
        let odd = MazeSpec {
            symmetric_wing: true,
            ..MazeSpec::default()
        };
        assert!(odd.validate().is_err());
        assert!(MazeSpec::from_toml_str("width = 5.0\nbogus = 1\n").is_err());
        let s = MazeSpec::from_toml_str("width = 9.0\nheight = 6.0\nrooms_x = 2\nrooms_y = 1\n")
            .unwrap();
        assert_eq!(s.rooms_x, 2);
    }

    #[test]
    fn generated_mazes_are_connected_and_seeded() {
        for seed in 0..8 {
            let spec = MazeSpec::default();
            let a = generate_maze(&spec, seed).unwrap();
            assert!(free_space_connected(&a));
            let b = generate_maze(&spec, seed).unwrap();
            assert_eq!(a.to_ascii(), b.to_ascii());
        }
        let a = generate_maze(&MazeSpec::default(), 1).unwrap();
        let b = generate_maze(&MazeSpec::default(), 2).unwrap();
        assert_ne!(a.to_ascii(), b.to_ascii());
    }

    #[test]
    fn symmetric_wing_mirrors() {
        let spec = MazeSpec {
            width: 16.0,
            height: 10.0,
            rooms_x: 4,
            rooms_y: 2,
            symmetric_wing: true,
            ..MazeSpec::default()
        };
        let m = generate_maze(&spec, 5).unwrap();
        let w = m.width() as i64;
        for iy in 0..m.height() as i64 {
            for ix in 0..w {
                assert_eq!(m.occupancy_at(ix, iy), m.occupancy_at(w - 1 - ix, iy));
            }
        }
        assert!(free_space_connected(&m));
    }

    #[test]
    fn disconnected_map_is_detected() {
        let mut m = generate_maze(&MazeSpec::minimal(4.0, 4.0), 0).unwrap();
        for iy in 0..40 {
            m.set(20, iy, 1.0);
        }
        assert!(!free_space_connected(&m));
    }

    #[test]
    fn planner_keeps_clearance() {
        let maze = generate_maze_layout(&MazeSpec::default(), 7).unwrap();
        let a = maze.room_centers[0];
        let b = maze.room_centers[8];
        let a = nearest_clear_point(&maze.grid, a.0, a.1, 0.4).unwrap();
        let b = nearest_clear_point(&maze.grid, b.0, b.1, 0.4).unwrap();
        let path = plan_path(&maze.grid, a, b, 0.4).unwrap();
        let ok = clearance_mask(&maze.grid, 0.4);
        for &(x, y) in &path {
            let (ix, iy) = maze.grid.world_to_grid(x, y);
            assert!(ok[(iy * maze.grid.width() as i64 + ix) as usize]);
        }
        assert!(plan_path(&maze.grid, a, (100.0, 0.0), 0.4).is_none());
    }

    #[test]
    fn noiseless_straight_leg_sums_to_one_meter() {
        let (map, s) = straight_scenario(OdometryNoise::NONE);
        let mut sim = Simulation::new(s, &map).unwrap();
        let mut sum = 0.0;
        for _ in 0..100 {
            let f = sim.step().unwrap();
            sum += f.odom.forward;
            assert!(f.odom.translation() <= 0.01 + 1e-12);
        }
        assert!((sum - 1.0).abs() < 1e-12, "{sum}");
        assert!((sim.pose().x - 0.5).abs() < 1e-12);
        assert!(sim.step().is_err());
    }

    #[test]
    fn noiseless_deltas_compose_to_truth() {
        let maze = generate_maze_layout(&MazeSpec::default(), 7).unwrap();
        let (start, wps) = room_tour(&maze, 0.4, 0.5, 20.0).unwrap();
        let s = Scenario {
            name: String::new(),
            map: None,
            maze: Some(MazeSpec::default()),
            steps: 400,
            seed: 1,
            initial_pose: start,
            init: Initialization::default(),
            waypoints: wps,
            odometry: OdometryNoise::NONE,
            lidar: LidarSpec {
                beams: 8,
                ..LidarSpec::default()
            },
            motion: MotionLimits::default(),
            kidnaps: vec![],
        };
        let mut sim = Simulation::new(s, &maze.grid).unwrap();
        let mut dead = start;
        for _ in 0..400 {
            let f = sim.step().unwrap();
            dead = dead.advance(f.odom.forward, f.odom.lateral, f.odom.dtheta);
            assert!((dead.x - f.true_pose.x).abs() < 1e-9 && (dead.y - f.true_pose.y).abs() < 1e-9);
            assert!(angle_diff(dead.theta, f.true_pose.theta).abs() < 1e-9);
            assert!(f.odom.translation() <= 0.05 + 1e-12 && f.odom.dtheta.abs() <= 0.05 + 1e-12);
            let (ix, iy) = maze.grid.world_to_grid(f.true_pose.x, f.true_pose.y);
            assert!(is_free(&maze.grid, ix, iy));
        }
        assert!(start.distance(&sim.pose()) > 1.0);
    }

    #[test]
    fn kidnap_is_invisible_to_odometry() {
        let (map, mut s) = straight_scenario(OdometryNoise::default());
        s.kidnaps.push(KidnapEvent {
            step: 50,
            pose: Pose::new(-1.0, 1.2, 2.0),
            resume_waypoint: None,
        });
        let mut sim = Simulation::new(s, &map).unwrap();
        let frames: Vec<SimFrame> = (0..100).map(|_| sim.step().unwrap()).collect();
        let jump = frames[49].true_pose.distance(&frames[48].true_pose);
        assert!(jump > 1.0);
        assert!(frames[49].kidnapped);
        assert!(frames[49].odom.translation() < 0.02);
    }

    #[test]
    fn replay_is_bit_identical() {
        let (map, s) = straight_scenario(OdometryNoise::default());
        let run = |s: Scenario| {
            let mut sim = Simulation::new(s, &map).unwrap();
            (0..30).map(|_| sim.step().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(s.clone()), run(s));
    }

    #[test]
    fn waypoint_hold_until_step() {
        let (map, mut s) = straight_scenario(OdometryNoise::NONE);
        s.waypoints[0].step = 100;
        s.waypoints[0].theta = Some(1.0);
        s.waypoints.push(Waypoint {
            x: 0.5,
            y: 0.3,
            theta: None,
            step: 0,
        });
        s.steps = 130;
        s.motion.max_translation = 0.05;
        let mut sim = Simulation::new(s, &map).unwrap();
        for _ in 0..99 {
            sim.step().unwrap();
        }
        assert!((sim.pose().x - 0.5).abs() < 1e-12 && sim.pose().y == 0.0);
        assert!((sim.pose().theta - 1.0).abs() < 1e-12);
        for _ in 0..31 {
            sim.step().unwrap();
        }
        assert!(sim.pose().y > 0.2);
    }

    #[test]
    fn scenario_toml_round_trip_and_field_errors() {
        let (_, mut s) = straight_scenario(OdometryNoise::default());
        s.kidnaps.push(KidnapEvent {
            step: 5,
            pose: Pose::new(0.0, 1.0, 0.5),
            resume_waypoint: Some(0),
        });
        let text = s.to_toml_string().unwrap();
        assert_eq!(Scenario::from_toml_str(&text).unwrap(), s);

        let bad = text.replace("steps = 100", "steps = 0");
        match Scenario::from_toml_str(&bad).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "steps"),
            e => panic!("{e}"),
        }
        let e = Scenario::from_toml_str("steps = 10\n").unwrap_err();
        assert!(e.to_string().contains("initial_pose"), "{e}");
        let (map, mut s) = straight_scenario(OdometryNoise::default());
        s.waypoints[0].x = 1.95;
        match Simulation::new(s, &map).unwrap_err() {
            Error::Config { field, .. } => assert_eq!(field, "waypoints[0]"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn free_pose_sampling() {
        let m = generate_maze(&MazeSpec::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_free_pose(&m, &mut rng).unwrap();
            assert!(!m.is_occupied_world(p.x, p.y, 0.5));
        }
        let full = OccupancyGrid::filled(3, 3, 0.1, Pose::default(), 1.0).unwrap();
        assert!(sample_free_pose(&full, &mut rng).is_err());
    }
}
