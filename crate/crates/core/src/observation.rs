//! LiDAR scans and likelihood-field matching of a scan against the map.
//!
//! A beam endpoint is scored by the largest occupancy among the 2×2 map
//! cells reached by offsetting the endpoint ±half a cell on each axis. The
//! scan likelihood is the mean endpoint score over beams that returned.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{cell_to_pose, CellIndex, NetworkGeometry, Pose};
use crate::grid_map::{OccupancyGrid, DEFAULT_OCC_THRESHOLD};

/// One 2D LiDAR sweep. Beam `i` points at `angle_min + i·angle_increment`
/// in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarScan {
    ranges: Vec<f64>,
    angle_min: f64,
    angle_increment: f64,
    max_range: f64,
}

impl LidarScan {
    pub fn new(
        ranges: Vec<f64>,
        angle_min: f64,
        angle_increment: f64,
        max_range: f64,
    ) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::value("scan must contain at least one beam"));
        }
        if !(max_range > 0.0 && max_range.is_finite()) {
            return Err(Error::value(format!(
                "max_range must be > 0, got {max_range}"
            )));
        }
        if !angle_min.is_finite() || !angle_increment.is_finite() {
            return Err(Error::value("scan angles must be finite"));
        }
        if let Some((i, r)) = ranges
            .iter()
            .enumerate()
            .find(|(_, r)| !(0.0..=max_range).contains(*r))
        {
            return Err(Error::value(format!(
                "range {r} of beam {i} outside [0, {max_range}]"
            )));
        }
        Ok(Self {
            ranges,
            angle_min,
            angle_increment,
            max_range,
        })
    }

    pub fn ranges(&self) -> &[f64] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn angle_min(&self) -> f64 {
        self.angle_min
    }

    pub fn angle_increment(&self) -> f64 {
        self.angle_increment
    }

    pub fn max_range(&self) -> f64 {
        self.max_range
    }

    pub fn bearing(&self, i: usize) -> f64 {
        self.angle_min + i as f64 * self.angle_increment
    }

    /// `(bearing, range)` of every beam that hit something.
    pub fn returns(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.ranges
            .iter()
            .enumerate()
            .filter(|(_, &r)| r < self.max_range)
            .map(|(i, &r)| (self.bearing(i), r))
    }

    /// Beam endpoints in the sensor frame, skipping max-range beams.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.returns().map(|(b, r)| (r * b.cos(), r * b.sin()))
    }
}

/// Largest occupancy over the 2×2 block `[w, w+1] × [h, h+1]`, precomputed for
/// every block touching the map. Turns the four lookups per beam into one.
#[derive(Debug, Clone)]
pub struct LikelihoodField {
    blocks: Vec<f64>,
    // blocks are indexed from w = -1, h = -1
    stride: usize,
    rows: usize,
    resolution: f64,
    origin: Pose,
}

impl LikelihoodField {
    pub fn new(map: &OccupancyGrid) -> Self {
        let stride = map.width() + 1;
        let rows = map.height() + 1;
        let mut blocks = vec![0.0; stride * rows];
        for h in 0..rows {
            for w in 0..stride {
                let (x, y) = (w as i64 - 1, h as i64 - 1);
                blocks[h * stride + w] = map
                    .occupancy_at(x, y)
                    .max(map.occupancy_at(x + 1, y))
                    .max(map.occupancy_at(x, y + 1))
                    .max(map.occupancy_at(x + 1, y + 1));
            }
        }
        Self {
            blocks,
            stride,
            rows,
            resolution: map.resolution(),
            origin: map.origin(),
        }
    }

    /// Score of an endpoint at continuous map-cell coordinates `(u, v)`.
    #[inline]
    pub fn endpoint_score(&self, u: f64, v: f64) -> f64 {
        let w = (u - 0.5).floor() + 1.0;
        let h = (v - 0.5).floor() + 1.0;
        if w < 0.0 || h < 0.0 || w >= self.stride as f64 || h >= self.rows as f64 {
            return 0.0;
        }
        self.blocks[h as usize * self.stride + w as usize]
    }

    #[inline]
    fn to_cells(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.origin.x;
        let dy = y - self.origin.y;
        if self.origin.theta == 0.0 {
            (dx / self.resolution, dy / self.resolution)
        } else {
            let (s, c) = self.origin.theta.sin_cos();
            (
                (c * dx + s * dy) / self.resolution,
                (-s * dx + c * dy) / self.resolution,
            )
        }
    }

    /// Likelihood of `scan` taken from a continuous pose.
    pub fn score_pose(&self, scan: &PreparedScan, pose: &Pose) -> f64 {
        if scan.beams.is_empty() {
            return 0.0;
        }
        let (u0, v0) = self.to_cells(pose.x, pose.y);
        let (s, c) = (pose.theta - self.origin.theta).sin_cos();
        let inv = 1.0 / self.resolution;
        let mut sum = 0.0;
        for b in &scan.beams {
            // endpoint offset rotated by the pose heading
            let du = (c * b.x - s * b.y) * inv;
            let dv = (s * b.x + c * b.y) * inv;
            sum += self.endpoint_score(u0 + du, v0 + dv);
        }
        sum / scan.beams.len() as f64
    }
}

#[derive(Debug, Clone, Copy)]
struct Beam {
    /// Endpoint in the sensor frame, meters.
    x: f64,
    y: f64,
    range: f64,
    bearing: f64,
}

/// Returned beams of a scan, optionally subsampled, with sensor-frame endpoints.
#[derive(Debug, Clone)]
pub struct PreparedScan {
    beams: Vec<Beam>,
}

impl PreparedScan {
    /// Keeps every `stride`-th beam (`stride` ≥ 1) that is below max range.
    pub fn new(scan: &LidarScan, stride: usize) -> Self {
        let stride = stride.max(1);
        let beams = scan
            .ranges()
            .iter()
            .enumerate()
            .step_by(stride)
            .filter(|(_, &r)| r < scan.max_range())
            .map(|(i, &range)| {
                let bearing = scan.bearing(i);
                Beam {
                    x: range * bearing.cos(),
                    y: range * bearing.sin(),
                    range,
                    bearing,
                }
            })
            .collect();
        Self { beams }
    }

    /// Number of beams that will be scored.
    pub fn scored_beams(&self) -> usize {
        self.beams.len()
    }
}

/// Scores a prepared scan at every pose cell of a network geometry. Beam
/// offsets are tabulated once per heading layer.
#[derive(Debug, Clone)]
pub struct CellScorer<'a> {
    field: &'a LikelihoodField,
    geometry: NetworkGeometry,
    /// Per heading layer, per beam: endpoint offset in map cells.
    offsets: Vec<Vec<(f64, f64)>>,
}

impl<'a> CellScorer<'a> {
    pub fn new(field: &'a LikelihoodField, scan: &PreparedScan, geometry: NetworkGeometry) -> Self {
        let inv = 1.0 / field.resolution;
        let offsets = (0..geometry.n_theta as i64)
            .map(|tp| {
                let heading = geometry.heading_of(tp) - field.origin.theta;
                scan.beams
                    .iter()
                    .map(|b| {
                        let (s, c) = (heading + b.bearing).sin_cos();
                        (b.range * c * inv, b.range * s * inv)
                    })
                    .collect()
            })
            .collect();
        Self {
            field,
            geometry,
            offsets,
        }
    }

    /// Likelihood of the scan with the robot at the center of cell `c`.
    #[inline]
    pub fn score(&self, c: CellIndex) -> f64 {
        let layer = &self.offsets[c.tp.rem_euclid(self.geometry.n_theta as i64) as usize];
        if layer.is_empty() {
            return 0.0;
        }
        let (u0, v0) = self.field.to_cells(
            self.geometry.planar_center(c.xp),
            self.geometry.planar_center(c.yp),
        );
        let mut sum = 0.0;
        for &(du, dv) in layer {
            sum += self.field.endpoint_score(u0 + du, v0 + dv);
        }
        sum / layer.len() as f64
    }
}

/// Likelihood that scan `z` was taken from the center of pose cell `c`.
///
/// This is the direct form: four map lookups per beam, no precomputation.
pub fn scan_likelihood(
    m: &OccupancyGrid,
    z: &LidarScan,
    c: &CellIndex,
    g: &NetworkGeometry,
) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::value("empty scan"));
    }
    let pose = cell_to_pose(c, g)?;
    Ok(pose_likelihood(m, z, &pose))
}

/// Direct-form likelihood at an arbitrary continuous pose.
pub fn pose_likelihood(m: &OccupancyGrid, z: &LidarScan, pose: &Pose) -> f64 {
    let mut sum = 0.0;
    let mut scored = 0usize;
    for (bearing, d) in z.returns() {
        let (s, c) = (pose.theta + bearing).sin_cos();
        let (u, v) = m.world_to_grid_f(pose.x + d * c, pose.y + d * s);
        let mut best: f64 = 0.0;
        for e1 in [-0.5, 0.5] {
            for e2 in [-0.5, 0.5] {
                best = best.max(m.occupancy_at((u + e1).floor() as i64, (v + e2).floor() as i64));
            }
        }
        sum += best;
        scored += 1;
    }
    if scored == 0 {
        0.0
    } else {
        sum / scored as f64
    }
}

/// Sensor description for simulated scans.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LidarSpec {
    pub beams: usize,
    /// Field of view in radians, centered on the robot heading.
    pub fov: f64,
    pub max_range: f64,
    /// Standard deviation of additive range noise, meters.
    pub noise_sigma: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            beams: 360,
            fov: std::f64::consts::TAU,
            max_range: 8.0,
            noise_sigma: 0.02,
        }
    }
}

/// Ray-casts a scan from `true_pose` and perturbs returned ranges with
/// Gaussian noise. Beams that hit nothing report exactly `max_range`.
pub fn simulate_scan<R: Rng + ?Sized>(
    m: &OccupancyGrid,
    true_pose: &Pose,
    spec: &LidarSpec,
    rng: &mut R,
) -> Result<LidarScan> {
    if spec.beams == 0 {
        return Err(Error::value("lidar needs at least one beam"));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::value(format!(
            "noise sigma must be >= 0, got {}",
            spec.noise_sigma
        )));
    }
    let (ix, iy) = m.world_to_grid(true_pose.x, true_pose.y);
    if m.occupancy_at(ix, iy) >= DEFAULT_OCC_THRESHOLD {
        return Err(Error::value(format!(
            "scan origin ({:.3}, {:.3}) lies in an occupied cell",
            true_pose.x, true_pose.y
        )));
    }
    let increment = spec.fov / spec.beams as f64;
    let angle_min = -spec.fov / 2.0;
    let mut ranges = Vec::with_capacity(spec.beams);
    for i in 0..spec.beams {
        let bearing = angle_min + i as f64 * increment;
        let d = m.raycast(true_pose, bearing, spec.max_range, DEFAULT_OCC_THRESHOLD)?;
        let r = if d >= spec.max_range {
            spec.max_range
        } else if spec.noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            // keep noisy returns distinguishable from no-return beams
            (d + spec.noise_sigma * z).clamp(0.0, spec.max_range * (1.0 - 1e-12))
        } else {
            d
        };
        ranges.push(r);
    }
    LidarScan::new(ranges, angle_min, increment, spec.max_range)
}

/// Formats one scan log row: `t,n_beams,angle_min,angle_increment,max_range,r_0,...`.
pub fn scan_to_csv_row(t: usize, scan: &LidarScan) -> String {
    let mut row = format!(
        "{},{},{},{},{}",
        t,
        scan.len(),
        scan.angle_min(),
        scan.angle_increment(),
        scan.max_range()
    );
    for r in scan.ranges() {
        let _ = write!(row, ",{r}");
    }
    row
}

/// Parses a scan log row written by [`scan_to_csv_row`].
pub fn scan_from_csv_row(row: &str, line: usize) -> Result<(usize, LidarScan)> {
    let fields: Vec<&str> = row.split(',').map(str::trim).collect();
    let err = |m: String| Error::parse("scan log", line, m);
    if fields.len() < 6 {
        return Err(err(format!(
            "expected at least 6 fields, got {}",
            fields.len()
        )));
    }
    let t = fields[0]
        .parse::<usize>()
        .map_err(|e| err(format!("bad t: {e}")))?;
    let n = fields[1]
        .parse::<usize>()
        .map_err(|e| err(format!("bad n_beams: {e}")))?;
    let num = |i: usize| {
        fields[i]
            .parse::<f64>()
            .map_err(|e| err(format!("field {}: {e}", i + 1)))
    };
    if fields.len() != 5 + n {
        return Err(err(format!(
            "n_beams is {n} but row has {} ranges",
            fields.len() - 5
        )));
    }
    let ranges = (5..5 + n).map(num).collect::<Result<Vec<_>>>()?;
    let scan = LidarScan::new(ranges, num(2)?, num(3)?, num(4)?).map_err(|e| err(e.to_string()))?;
    Ok((t, scan))
}
