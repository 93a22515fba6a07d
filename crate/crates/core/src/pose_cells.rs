//! Sparse 3D pose cell attractor network.
//!
//! Activity lives in a hash map keyed by the packed cell index, so only cells
//! holding a hypothesis cost memory or time. Observation, inhibition and
//! normalization drop cells at or below `prune_epsilon`; path integration and
//! excitation conserve mass exactly and only drop cells that reach zero.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, CellIndex, NetworkGeometry, Pose, PoseDelta};

/// Treatment of the planar axes at the network edge. Heading always wraps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryMode {
    #[default]
    Wrap,
    /// Indices beyond the edge saturate at the edge cell.
    Clamp,
}

/// How odometry moves activity through the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathIntegrationMode {
    /// Every cell shifts by the same world-frame displacement.
    Literal,
    /// Each heading layer shifts along its own heading.
    #[default]
    PerHeading,
}

impl std::str::FromStr for PathIntegrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "per_heading" | "per-heading" => Ok(Self::PerHeading),
            other => Err(Error::value(format!(
                "unknown path integration mode `{other}` (expected literal or per_heading)"
            ))),
        }
    }
}

/// Excitation, inhibition and decay parameters. Sigmas are in cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub sigma_exc_xy: f64,
    pub sigma_exc_theta: f64,
    /// Total weight of the excitation kernel.
    pub coeff_exc: f64,
    pub sigma_inh_xy: f64,
    pub sigma_inh_theta: f64,
    /// Total weight of the inhibition kernel.
    pub coeff_inh: f64,
    /// Kernel support per axis, in multiples of that axis' sigma.
    pub truncation_sigmas: f64,
    /// Global inhibition subtracted from every cell per iteration.
    pub s_g: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma_exc_xy: 1.0,
            sigma_exc_theta: 1.0,
            coeff_exc: 0.10,
            sigma_inh_xy: 2.0,
            sigma_inh_theta: 2.0,
            coeff_inh: 0.08,
            truncation_sigmas: 3.0,
            s_g: 1e-4,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            ("sigma_exc_xy", self.sigma_exc_xy),
            ("sigma_exc_theta", self.sigma_exc_theta),
            ("sigma_inh_xy", self.sigma_inh_xy),
            ("sigma_inh_theta", self.sigma_inh_theta),
            ("truncation_sigmas", self.truncation_sigmas),
        ];
        for (name, v) in sigmas {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.coeff_inh > 0.0) {
            return Err(Error::config(
                "coeff_inh",
                format!("must be > 0, got {}", self.coeff_inh),
            ));
        }
        if !(self.coeff_exc > self.coeff_inh) {
            return Err(Error::config(
                "coeff_exc",
                format!(
                    "excitation must dominate inhibition: {} <= {}",
                    self.coeff_exc, self.coeff_inh
                ),
            ));
        }
        if !(self.s_g >= 0.0) {
            return Err(Error::config(
                "s_g",
                format!("must be >= 0, got {}", self.s_g),
            ));
        }
        Ok(())
    }

    /// Largest planar kernel half-width, in cells.
    pub fn planar_margin(&self) -> usize {
        let r = |s: f64| (self.truncation_sigmas * s).ceil() as usize;
        r(self.sigma_exc_xy).max(r(self.sigma_inh_xy))
    }
}

/// Pose read out of the dominant activity packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketEstimate {
    pub pose: Pose,
    /// Packet mass over total mass.
    pub confidence: f64,
    pub argmax: CellIndex,
}

/// Normalized 1D Gaussian taps for offsets `-radius..=radius`.
#[derive(Debug, Clone)]
struct Taps {
    radius: i64,
    weights: Vec<f64>,
}

impl Taps {
    fn gaussian(sigma: f64, truncation: f64) -> Self {
        let radius = (truncation * sigma).ceil().max(1.0) as i64;
        let mut weights: Vec<f64> = (-radius..=radius)
            .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
        Self { radius, weights }
    }
}

#[derive(Debug, Clone, Copy)]
enum Axis {
    X,
    Y,
    Theta,
}

type ActivityMap = FxHashMap<u64, f64>;

/// The pose cell network: a sparse map from cell to non-negative activity.
#[derive(Debug, Clone)]
pub struct PoseCellNetwork {
    geometry: NetworkGeometry,
    activity: ActivityMap,
    prune_epsilon: f64,
    boundary_mode: BoundaryMode,
    packet_radius_xy: i64,
    packet_radius_theta: i64,
}

impl PoseCellNetwork {
    pub const DEFAULT_PRUNE_EPSILON: f64 = 1e-6;
    pub const DEFAULT_PACKET_RADIUS_XY: i64 = 4;
    pub const DEFAULT_PACKET_RADIUS_THETA: i64 = 2;

    pub fn new(geometry: NetworkGeometry) -> Self {
        Self {
            geometry,
            activity: ActivityMap::default(),
            prune_epsilon: Self::DEFAULT_PRUNE_EPSILON,
            boundary_mode: BoundaryMode::Wrap,
            packet_radius_xy: Self::DEFAULT_PACKET_RADIUS_XY,
            packet_radius_theta: Self::DEFAULT_PACKET_RADIUS_THETA,
        }
    }

    pub fn with_prune_epsilon(mut self, eps: f64) -> Self {
        assert!(eps >= 0.0, "prune epsilon must be non-negative");
        self.prune_epsilon = eps;
        self
    }

    pub fn with_boundary_mode(mut self, mode: BoundaryMode) -> Self {
        self.boundary_mode = mode;
        self
    }

    pub fn with_packet_radius(mut self, xy: i64, theta: i64) -> Self {
        assert!(xy >= 0 && theta >= 0, "packet radius must be non-negative");
        self.packet_radius_xy = xy;
        self.packet_radius_theta = theta;
        self
    }

    pub fn geometry(&self) -> &NetworkGeometry {
        &self.geometry
    }

    pub fn prune_epsilon(&self) -> f64 {
        self.prune_epsilon
    }

    pub fn boundary_mode(&self) -> BoundaryMode {
        self.boundary_mode
    }

    /// Number of active cells.
    pub fn len(&self) -> usize {
        self.activity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activity.is_empty()
    }

    pub fn clear(&mut self) {
        self.activity.clear();
    }

    pub fn total(&self) -> f64 {
        self.activity.values().sum()
    }

    pub fn get(&self, c: &CellIndex) -> f64 {
        if !self.geometry.contains(c) {
            return 0.0;
        }
        self.activity.get(&self.pack(c)).copied().unwrap_or(0.0)
    }

    /// Active cells in hash order.
    pub fn iter(&self) -> impl Iterator<Item = (CellIndex, f64)> + '_ {
        self.activity.iter().map(|(&k, &v)| (self.unpack(k), v))
    }

    /// Active cells sorted by `(tp, yp, xp)`.
    pub fn sorted_cells(&self) -> Vec<(CellIndex, f64)> {
        let mut keys: Vec<(u64, f64)> = self.activity.iter().map(|(&k, &v)| (k, v)).collect();
        keys.sort_unstable_by_key(|&(k, _)| k);
        keys.into_iter().map(|(k, v)| (self.unpack(k), v)).collect()
    }

    #[inline]
    fn pack(&self, c: &CellIndex) -> u64 {
        let n = self.geometry.n_xy as u64;
        (c.tp as u64 * n + c.yp as u64) * n + c.xp as u64
    }

    #[inline]
    fn unpack(&self, key: u64) -> CellIndex {
        let n = self.geometry.n_xy as u64;
        CellIndex::new(
            (key % n) as i64,
            ((key / n) % n) as i64,
            (key / (n * n)) as i64,
        )
    }

    #[inline]
    fn planar(&self, i: i64) -> i64 {
        let n = self.geometry.n_xy as i64;
        match self.boundary_mode {
            BoundaryMode::Wrap => i.rem_euclid(n),
            BoundaryMode::Clamp => i.clamp(0, n - 1),
        }
    }

    #[inline]
    fn heading(&self, i: i64) -> i64 {
        i.rem_euclid(self.geometry.n_theta as i64)
    }

    #[inline]
    fn key_of(&self, xp: i64, yp: i64, tp: i64) -> u64 {
        let n = self.geometry.n_xy as u64;
        (self.heading(tp) as u64 * n + self.planar(yp) as u64) * n + self.planar(xp) as u64
    }

    fn check_cell(&self, c: &CellIndex) -> Result<()> {
        crate::geometry::cell_to_pose(c, &self.geometry).map(|_| ())
    }

    fn prune(&mut self) {
        let eps = self.prune_epsilon;
        self.activity.retain(|_, v| *v > eps);
    }

    /// Adds activity to one cell. Used for landmark injection.
    pub fn add_activity(&mut self, c: &CellIndex, amount: f64) -> Result<()> {
        self.check_cell(c)?;
        if !(amount >= 0.0 && amount.is_finite()) {
            return Err(Error::value(format!(
                "activity increment must be finite and >= 0, got {amount}"
            )));
        }
        if amount > 0.0 {
            let key = self.pack(c);
            *self.activity.entry(key).or_insert(0.0) += amount;
            if self.activity[&key] <= self.prune_epsilon {
                self.activity.remove(&key);
            }
        }
        Ok(())
    }

    /// Replaces the activity with `n` Gaussian samples around `p0`, each worth `1/n`.
    pub fn initialize_gaussian<R: Rng + ?Sized>(
        &mut self,
        p0: &Pose,
        sigma_xy: f64,
        sigma_theta: f64,
        n: usize,
        rng: &mut R,
    ) -> Result<()> {
        if n == 0 {
            return Err(Error::value("sample count must be >= 1"));
        }
        if !(sigma_xy >= 0.0 && sigma_theta >= 0.0) {
            return Err(Error::value(format!(
                "sigmas must be >= 0, got ({sigma_xy}, {sigma_theta})"
            )));
        }
        let share = 1.0 / n as f64;
        if share <= self.prune_epsilon {
            return Err(Error::value(format!(
                "{n} samples give per-sample activity {share} below prune epsilon {}",
                self.prune_epsilon
            )));
        }
        let g = self.geometry;
        let n_xy = g.n_xy as f64;
        let mut samples = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while samples.len() < n {
            attempts += 1;
            if attempts > 100 * n {
                return Err(Error::value(format!(
                    "could not place {n} samples inside the network after {} attempts",
                    100 * n
                )));
            }
            let zx: f64 = StandardNormal.sample(rng);
            let zy: f64 = StandardNormal.sample(rng);
            let zt: f64 = StandardNormal.sample(rng);
            let u = (g.planar_coord(p0.x + sigma_xy * zx) + 1e-9).floor();
            let v = (g.planar_coord(p0.y + sigma_xy * zy) + 1e-9).floor();
            let inside = u >= 0.0 && u < n_xy && v >= 0.0 && v < n_xy;
            if !inside && self.boundary_mode == BoundaryMode::Clamp {
                continue;
            }
            let tp = g.heading_index(wrap_angle(p0.theta + sigma_theta * zt));
            samples.push(self.key_of(u as i64, v as i64, tp));
        }
        self.activity.clear();
        for key in samples {
            *self.activity.entry(key).or_insert(0.0) += share;
        }
        Ok(())
    }

    /// Replaces the activity with an even split over `cells`.
    pub fn initialize_uniform(&mut self, cells: &[CellIndex]) -> Result<()> {
        if cells.is_empty() {
            return Err(Error::value(
                "uniform initialization needs at least one cell",
            ));
        }
        for c in cells {
            self.check_cell(c)?;
        }
        let share = 1.0 / cells.len() as f64;
        if share <= self.prune_epsilon {
            return Err(Error::value(format!(
                "{} cells give per-cell activity {share} below prune epsilon {}",
                cells.len(),
                self.prune_epsilon
            )));
        }
        self.activity.clear();
        self.activity.reserve(cells.len());
        for c in cells {
            *self.activity.entry(self.pack(c)).or_insert(0.0) += share;
        }
        Ok(())
    }

    /// Shifts activity by an odometry delta, splitting it over neighboring
    /// cells in proportion to the fractional part of the shift.
    pub fn path_integrate(&mut self, delta: &PoseDelta, mode: PathIntegrationMode) -> Result<()> {
        let g = self.geometry;
        let bound = g.n_xy as f64 * g.k_xy / 4.0;
        let planar = match mode {
            PathIntegrationMode::Literal => delta.dx.abs().max(delta.dy.abs()),
            PathIntegrationMode::PerHeading => delta.translation(),
        };
        if !(planar < bound) || !delta.dtheta.is_finite() {
            return Err(Error::value(format!(
                "odometry step {planar} m exceeds the path integration bound {bound} m"
            )));
        }
        if delta.is_zero() {
            return Ok(());
        }

        let heading_split = split_shift(delta.dtheta / g.k_theta);
        // per heading layer: the 2×2 planar offsets and weights
        let layers: Vec<[(i64, i64, f64); 4]> = match mode {
            PathIntegrationMode::Literal => {
                vec![planar_split(delta.dx / g.k_xy, delta.dy / g.k_xy)]
            }
            PathIntegrationMode::PerHeading => (0..g.n_theta as i64)
                .map(|tp| {
                    let (s, c) = g.heading_of(tp).sin_cos();
                    let dx = c * delta.forward - s * delta.lateral;
                    let dy = s * delta.forward + c * delta.lateral;
                    planar_split(dx / g.k_xy, dy / g.k_xy)
                })
                .collect(),
        };

        let mut out = ActivityMap::default();
        out.reserve(self.activity.len() * 2);
        for (&key, &a) in &self.activity {
            let c = self.unpack(key);
            let layer = if layers.len() == 1 {
                &layers[0]
            } else {
                &layers[c.tp as usize]
            };
            for &(ox, oy, wxy) in layer {
                if wxy == 0.0 {
                    continue;
                }
                for &(ot, wt) in &heading_split {
                    if wt == 0.0 {
                        continue;
                    }
                    let target = self.key_of(c.xp + ox, c.yp + oy, c.tp + ot);
                    *out.entry(target).or_insert(0.0) += a * wxy * wt;
                }
            }
        }
        out.retain(|_, v| *v > 0.0);
        self.activity = out;
        Ok(())
    }

    /// Multiplies each active cell by its observation likelihood.
    ///
    /// The likelihood must return values in `[0, 1]`; otherwise the network
    /// is left untouched and a contract error is returned.
    pub fn apply_observation<F>(&mut self, mut likelihood: F) -> Result<()>
    where
        F: FnMut(CellIndex) -> f64,
    {
        let mut factors = Vec::with_capacity(self.activity.len());
        for &key in self.activity.keys() {
            let c = self.unpack(key);
            let l = likelihood(c);
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Contract(format!(
                    "likelihood {l} at cell {c} outside [0, 1]"
                )));
            }
            factors.push((key, l));
        }
        for (key, l) in factors {
            if let Some(v) = self.activity.get_mut(&key) {
                *v *= l;
            }
        }
        self.prune();
        Ok(())
    }

    /// Local excitation: adds the Gaussian-weighted neighborhood sum, with a
    /// kernel whose total weight is `coeff_exc`.
    pub fn excite(&mut self, k: &KernelConfig) {
        if self.activity.is_empty() {
            return;
        }
        let spread = self.blur(
            &Taps::gaussian(k.sigma_exc_xy, k.truncation_sigmas),
            &Taps::gaussian(k.sigma_exc_theta, k.truncation_sigmas),
            false,
        );
        for (key, v) in spread {
            *self.activity.entry(key).or_insert(0.0) += k.coeff_exc * v;
        }
        self.activity.retain(|_, v| *v > 0.0);
    }

    /// Local inhibition: subtracts the Gaussian-weighted neighborhood sum with
    /// total weight `coeff_inh`, clamping at zero.
    pub fn inhibit(&mut self, k: &KernelConfig) {
        if self.activity.is_empty() {
            return;
        }
        let spread = self.blur(
            &Taps::gaussian(k.sigma_inh_xy, k.truncation_sigmas),
            &Taps::gaussian(k.sigma_inh_theta, k.truncation_sigmas),
            true,
        );
        for (key, v) in self.activity.iter_mut() {
            let sub = spread.get(key).copied().unwrap_or(0.0);
            *v = (*v - k.coeff_inh * sub).max(0.0);
        }
        self.prune();
    }

    /// Global inhibition: every active cell loses `min(activity, s_g)`.
    pub fn global_inhibit(&mut self, s_g: f64) {
        if s_g > 0.0 {
            for v in self.activity.values_mut() {
                *v -= v.min(s_g);
            }
        }
        self.prune();
    }

    /// Scales activity to unit total mass.
    pub fn normalize(&mut self) -> Result<()> {
        for _ in 0..4 {
            let total = self.total();
            if self.activity.is_empty() || !(total > 0.0) {
                self.activity.clear();
                return Err(Error::DegenerateBelief);
            }
            self.activity.values_mut().for_each(|v| *v /= total);
            let before = self.activity.len();
            self.prune();
            if self.activity.len() == before {
                break;
            }
        }
        if self.activity.is_empty() {
            return Err(Error::DegenerateBelief);
        }
        Ok(())
    }

    /// Most active cell; ties go to the lowest packed index.
    pub fn argmax(&self) -> Option<CellIndex> {
        self.activity
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&k, _)| self.unpack(k))
    }

    /// Weighted centroid of the packet around the most active cell.
    pub fn estimate(&self) -> Result<PacketEstimate> {
        let peak = self.argmax().ok_or(Error::DegenerateBelief)?;
        let g = &self.geometry;
        let n = g.n_xy as i64;
        let nt = g.n_theta as i64;
        let offset = |a: i64, b: i64, len: i64, wrap: bool| -> i64 {
            let d = a - b;
            if wrap {
                (d + len / 2).rem_euclid(len) - len / 2
            } else {
                d
            }
        };
        let planar_wrap = self.boundary_mode == BoundaryMode::Wrap;
        let (mut mass, mut total) = (0.0, 0.0);
        let (mut sx, mut sy, mut ss, mut sc) = (0.0, 0.0, 0.0, 0.0);
        for (&key, &a) in &self.activity {
            total += a;
            let c = self.unpack(key);
            let dx = offset(c.xp, peak.xp, n, planar_wrap);
            let dy = offset(c.yp, peak.yp, n, planar_wrap);
            let dt = offset(c.tp, peak.tp, nt, true);
            if dx.abs() > self.packet_radius_xy
                || dy.abs() > self.packet_radius_xy
                || dt.abs() > self.packet_radius_theta
            {
                continue;
            }
            mass += a;
            sx += a * dx as f64;
            sy += a * dy as f64;
            let (s, co) = g.heading_of(c.tp).sin_cos();
            ss += a * s;
            sc += a * co;
        }
        let pose = Pose::new(
            g.planar_center(peak.xp) + sx / mass * g.k_xy,
            g.planar_center(peak.yp) + sy / mass * g.k_xy,
            ss.atan2(sc),
        );
        Ok(PacketEstimate {
            pose,
            confidence: (mass / total).clamp(0.0, 1.0),
            argmax: peak,
        })
    }

    /// Whether the dominant packet holds at least `threshold` of the mass.
    pub fn is_converged(&self, threshold: f64) -> bool {
        self.estimate()
            .map(|e| e.confidence >= threshold)
            .unwrap_or(false)
    }

    /// Debug dump with one `xp,yp,tp,activity` row per active cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("xp,yp,tp,activity\n");
        for (c, v) in self.sorted_cells() {
            let _ = writeln!(out, "{},{},{},{:e}", c.xp, c.yp, c.tp, v);
        }
        out
    }

    /// Separable Gaussian blur of the current activity with unit-mass taps.
    /// With `at_active_only`, the result is only needed at active cells.
    fn blur(&self, xy: &Taps, theta: &Taps, at_active_only: bool) -> ActivityMap {
        let [wx, wy] = self.window(xy.radius);
        let volume = wx.len * wy.len * self.geometry.n_theta;
        if volume <= BOX_FILL * self.activity.len() {
            return self.dense_blur(xy, theta, at_active_only);
        }
        self.sparse_blur(xy, theta, at_active_only)
    }

    fn sparse_blur(&self, xy: &Taps, theta: &Taps, at_active_only: bool) -> ActivityMap {
        let after_theta = self.scatter(&self.activity, theta, Axis::Theta);
        let after_y = self.scatter(&after_theta, xy, Axis::Y);
        if at_active_only && self.boundary_mode == BoundaryMode::Wrap {
            let mut out = ActivityMap::default();
            out.reserve(self.activity.len());
            for &key in self.activity.keys() {
                let c = self.unpack(key);
                let mut sum = 0.0;
                for (j, w) in xy.weights.iter().enumerate() {
                    let d = j as i64 - xy.radius;
                    if let Some(v) = after_y.get(&self.key_of(c.xp - d, c.yp, c.tp)) {
                        sum += w * v;
                    }
                }
                out.insert(key, sum);
            }
            out
        } else {
            self.scatter(&after_y, xy, Axis::X)
        }
    }

    fn scatter(&self, src: &ActivityMap, taps: &Taps, axis: Axis) -> ActivityMap {
        let mut out = ActivityMap::default();
        out.reserve(src.len() * 2);
        for (&key, &v) in src {
            let c = self.unpack(key);
            for (j, w) in taps.weights.iter().enumerate() {
                let d = j as i64 - taps.radius;
                let target = match axis {
                    Axis::X => self.key_of(c.xp + d, c.yp, c.tp),
                    Axis::Y => self.key_of(c.xp, c.yp + d, c.tp),
                    Axis::Theta => self.key_of(c.xp, c.yp, c.tp + d),
                };
                *out.entry(target).or_insert(0.0) += w * v;
            }
        }
        out
    }

    /// Planar windows holding every active cell plus a `radius` margin.
    fn window(&self, radius: i64) -> [Span; 2] {
        let n = self.geometry.n_xy as i64;
        let (mut lo, mut hi) = ([n, n], [-1i64, -1]);
        for &key in self.activity.keys() {
            let c = self.unpack(key);
            for (a, v) in [c.xp, c.yp].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        [0, 1].map(|a| match self.boundary_mode {
            BoundaryMode::Wrap if hi[a] - lo[a] + 1 + 2 * radius >= n => Span {
                start: 0,
                len: n as usize,
                n,
                edge: Edge::Wrap,
            },
            BoundaryMode::Wrap => Span {
                start: lo[a] - radius,
                len: (hi[a] - lo[a] + 1 + 2 * radius) as usize,
                n,
                edge: Edge::Open,
            },
            BoundaryMode::Clamp => {
                let (s, e) = ((lo[a] - radius).max(0), (hi[a] + radius).min(n - 1));
                Span {
                    start: s,
                    len: (e - s + 1) as usize,
                    n,
                    edge: Edge::Clamp,
                }
            }
        })
    }

    /// The blur on a dense buffer over the active window.
    fn dense_blur(&self, xy: &Taps, theta: &Taps, at_active_only: bool) -> ActivityMap {
        let nt = self.geometry.n_theta;
        let [wx, wy] = self.window(xy.radius);
        let n = self.geometry.n_xy as i64;
        let index = |c: &CellIndex| {
            let x = (c.xp - wx.start).rem_euclid(n) as usize;
            let y = (c.yp - wy.start).rem_euclid(n) as usize;
            (c.tp as usize * wy.len + y) * wx.len + x
        };
        let mut buf = vec![0.0; wx.len * wy.len * nt];
        for (&k, &v) in &self.activity {
            buf[index(&self.unpack(k))] = v;
        }
        let th = Span {
            start: 0,
            len: nt,
            n: nt as i64,
            edge: Edge::Wrap,
        };
        let buf = dense_pass(&buf, theta, wx.len * wy.len, &th);
        let buf = dense_pass(&buf, xy, wx.len, &wy);
        if at_active_only && wx.edge != Edge::Clamp {
            return self
                .activity
                .keys()
                .map(|&k| {
                    let c = self.unpack(k);
                    let i = index(&c);
                    let row = i - (c.xp - wx.start).rem_euclid(n) as usize;
                    let mut sum = 0.0;
                    for (j, w) in xy.weights.iter().enumerate() {
                        let mut q = c.xp - (j as i64 - xy.radius);
                        if wx.edge == Edge::Wrap {
                            q = q.rem_euclid(n);
                        }
                        let q = q - wx.start;
                        if q >= 0 && (q as usize) < wx.len {
                            sum += w * buf[row + q as usize];
                        }
                    }
                    (k, sum)
                })
                .collect();
        }
        let buf = dense_pass(&buf, xy, 1, &wx);
        if at_active_only {
            self.activity
                .keys()
                .map(|&k| (k, buf[index(&self.unpack(k))]))
                .collect()
        } else {
            let mut out = ActivityMap::default();
            for (i, &v) in buf.iter().enumerate() {
                if v != 0.0 {
                    let x = wx.start + (i % wx.len) as i64;
                    let y = wy.start + ((i / wx.len) % wy.len) as i64;
                    let t = (i / (wx.len * wy.len)) as i64;
                    out.insert(self.key_of(x, y, t), v);
                }
            }
            out
        }
    }
}

/// Dense blurs run when the active window has at most this many cells per
/// active cell.
const BOX_FILL: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Edge {
    /// The span is the whole axis and wraps around.
    Wrap,
    /// The span is large enough that no target leaves it.
    Open,
    /// Targets saturate at the axis ends.
    Clamp,
}

/// A run of `len` cells from `start` along an axis of `n` cells.
#[derive(Debug, Clone, Copy)]
struct Span {
    start: i64,
    len: usize,
    n: i64,
    edge: Edge,
}

/// Scatters `src` along one axis with the given buffer stride.
fn dense_pass(src: &[f64], taps: &Taps, stride: usize, span: &Span) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let block = stride * span.len;
    for base_o in (0..src.len()).step_by(block) {
        for i in 0..stride {
            let base = base_o + i;
            for p in 0..span.len {
                let v = src[base + p * stride];
                if v == 0.0 {
                    continue;
                }
                let g = span.start + p as i64;
                for (j, w) in taps.weights.iter().enumerate() {
                    let t = g + j as i64 - taps.radius;
                    let q = match span.edge {
                        Edge::Wrap => t.rem_euclid(span.n),
                        Edge::Open => t,
                        Edge::Clamp => t.clamp(0, span.n - 1),
                    } - span.start;
                    out[base + q as usize * stride] += w * v;
                }
            }
        }
    }
    out
}

/// Integer offsets and weights `(δ, 1-f), (δ+1, f)` for a fractional shift.
fn split_shift(s: f64) -> [(i64, f64); 2] {
    let base = s.floor();
    let frac = s - base;
    [(base as i64, 1.0 - frac), (base as i64 + 1, frac)]
}

fn planar_split(sx: f64, sy: f64) -> [(i64, i64, f64); 4] {
    let [(x0, wx0), (x1, wx1)] = split_shift(sx);
    let [(y0, wy0), (y1, wy1)] = split_shift(sy);
    [
        (x0, y0, wx0 * wy0),
        (x1, y0, wx1 * wy0),
        (x0, y1, wx0 * wy1),
        (x1, y1, wx1 * wy1),
    ]
}
