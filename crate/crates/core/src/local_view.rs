//! Corner landmarks extracted from scans, the local view cell store, and
//! activity injection from recognized views into the pose cell network.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, CellIndex};
use crate::observation::LidarScan;
use crate::pose_cells::PoseCellNetwork;

/// A 2D point in meters.
pub type Point = [f64; 2];

/// Default grid size for scan downsampling, meters.
pub const DEFAULT_CELL_SIZE: f64 = 0.05;
/// Default match score needed to recognize a stored view.
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.9;
/// Per-iteration decay of local view cell activity.
pub const DEFAULT_DECAY: f64 = 0.5;
/// Default activity injection coefficient.
pub const DEFAULT_S_V: f64 = 0.05;

/// Below this, a decaying local view cell is treated as silent.
const SILENT: f64 = 1e-12;

/// Beam endpoints snapped to a `cell_size` grid, deduplicated and sorted by
/// `x` then `y`. Max-range beams are skipped.
pub fn preprocess_scan(z: &LidarScan, cell_size: f64) -> Result<Vec<Point>> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::value(format!(
            "cell size must be > 0, got {cell_size}"
        )));
    }
    let mut keys: Vec<(i64, i64)> = z
        .points()
        .map(|(x, y)| {
            (
                (x / cell_size).round() as i64,
                (y / cell_size).round() as i64,
            )
        })
        .collect();
    keys.sort_unstable();
    keys.dedup();
    Ok(keys
        .into_iter()
        .map(|(i, j)| [i as f64 * cell_size, j as f64 * cell_size])
        .collect())
}

/// Tuning of the corner extractor. Lengths are in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ExtractParams {
    /// Largest point-to-line deviation accepted inside one segment.
    pub tolerance: f64,
    /// Neighbors further apart than `gap_abs + gap_rel · range` start a new run.
    pub gap_abs: f64,
    pub gap_rel: f64,
    /// Segments shorter than this, or with fewer points, cannot form a corner.
    pub min_segment_length: f64,
    pub min_segment_points: usize,
    /// Smallest direction change, radians, between segments meeting at a corner.
    pub min_corner_angle: f64,
    pub max_keypoints: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            tolerance: 0.1,
            gap_abs: 0.3,
            gap_rel: 0.1,
            min_segment_length: 0.3,
            min_segment_points: 4,
            min_corner_angle: 45f64.to_radians(),
            max_keypoints: 16,
        }
    }
}

/// Corner keypoints in the sensor frame and their rotation-invariant signature.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    keypoints: Vec<Point>,
    signature: Vec<f64>,
}

impl Landmark {
    pub fn new(keypoints: Vec<Point>) -> Result<Self> {
        if keypoints.len() < 2 {
            return Err(Error::value(format!(
                "landmark needs >= 2 keypoints, got {}",
                keypoints.len()
            )));
        }
        if keypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::value("landmark keypoints must be finite"));
        }
        let signature = signature_of(&keypoints);
        Ok(Self {
            keypoints,
            signature,
        })
    }

    pub fn keypoints(&self) -> &[Point] {
        &self.keypoints
    }

    /// Pairwise keypoint distances, ascending.
    pub fn signature(&self) -> &[f64] {
        &self.signature
    }
}

fn signature_of(kp: &[Point]) -> Vec<f64> {
    let mut d = Vec::with_capacity(kp.len() * (kp.len() - 1) / 2);
    for i in 0..kp.len() {
        for j in i + 1..kp.len() {
            d.push((kp[i][0] - kp[j][0]).hypot(kp[i][1] - kp[j][1]));
        }
    }
    d.sort_by(f64::total_cmp);
    d
}

/// Extracts corners with default parameters and the given split tolerance.
pub fn extract_landmark(points: &[Point], tolerance: f64) -> Option<Landmark> {
    extract_landmark_with(
        points,
        &ExtractParams {
            tolerance,
            ..ExtractParams::default()
        },
    )
}

/// Orders points by bearing, cuts them into runs at range gaps, splits each
/// run into straight segments and keeps the junctions where two solid
/// segments meet at a clear angle.
pub fn extract_landmark_with(points: &[Point], p: &ExtractParams) -> Option<Landmark> {
    if points.len() < 3 {
        return None;
    }
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| {
        a[1].atan2(a[0])
            .total_cmp(&b[1].atan2(b[0]))
            .then(a[0].hypot(a[1]).total_cmp(&b[0].hypot(b[1])))
    });
    let n = pts.len();
    let is_gap = |a: &Point, b: &Point| {
        let range = a[0].hypot(a[1]).max(b[0].hypot(b[1]));
        dist(a, b) > p.gap_abs + p.gap_rel * range
    };
    let gaps: Vec<usize> = (0..n)
        .filter(|&i| is_gap(&pts[i], &pts[(i + 1) % n]))
        .collect();

    let mut corners = Vec::new();
    if gaps.is_empty() {
        // one closed outline: start at the farthest point and close the loop
        let start = (0..n)
            .max_by(|&a, &b| norm(&pts[a]).total_cmp(&norm(&pts[b])).then(b.cmp(&a)))
            .unwrap_or(0);
        let mut ring: Vec<Point> = (0..=n).map(|k| pts[(start + k) % n]).collect();
        ring[n] = ring[0];
        corners.extend(run_corners(&ring, p, true));
    } else {
        for w in 0..gaps.len() {
            let from = (gaps[w] + 1) % n;
            let to = gaps[(w + 1) % gaps.len()];
            let len = (to + n - from) % n + 1;
            let run: Vec<Point> = (0..len).map(|k| pts[(from + k) % n]).collect();
            corners.extend(run_corners(&run, p, false));
        }
    }

    let mut keypoints: Vec<Point> = Vec::new();
    for c in corners {
        if keypoints.iter().all(|k| dist(k, &c) > p.tolerance) {
            keypoints.push(c);
        }
    }
    if keypoints.len() > p.max_keypoints {
        let mut by_range: Vec<usize> = (0..keypoints.len()).collect();
        by_range.sort_by(|&a, &b| {
            norm(&keypoints[a])
                .total_cmp(&norm(&keypoints[b]))
                .then(a.cmp(&b))
        });
        let mut keep = by_range[..p.max_keypoints].to_vec();
        keep.sort_unstable();
        keypoints = keep.into_iter().map(|i| keypoints[i]).collect();
    }
    Landmark::new(keypoints).ok()
}

fn dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn norm(a: &Point) -> f64 {
    a[0].hypot(a[1])
}

/// Distance from `q` to the line through `a` and `b` (to `a` if they coincide).
fn line_distance(q: &Point, a: &Point, b: &Point) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    if len < 1e-12 {
        return dist(q, a);
    }
    ((q[0] - a[0]) * dy - (q[1] - a[1]) * dx).abs() / len
}

fn max_deviation(pts: &[Point], lo: usize, hi: usize) -> (usize, f64) {
    let mut best = (lo, 0.0);
    for k in lo + 1..hi {
        let d = line_distance(&pts[k], &pts[lo], &pts[hi]);
        if d > best.1 {
            best = (k, d);
        }
    }
    best
}

fn split(pts: &[Point], lo: usize, hi: usize, tol: f64, out: &mut Vec<usize>) {
    if hi < lo + 2 {
        return;
    }
    let (k, d) = max_deviation(pts, lo, hi);
    if d > tol {
        split(pts, lo, k, tol, out);
        out.push(k);
        split(pts, k, hi, tol, out);
    }
}

/// Corner points of one polyline run. For a closed ring the last point
/// repeats the first and the seam is checked as a corner too.
fn run_corners(pts: &[Point], p: &ExtractParams, closed: bool) -> Vec<Point> {
    if pts.len() < 3 {
        return Vec::new();
    }
    let last = pts.len() - 1;
    let mut breaks = vec![0];
    split(pts, 0, last, p.tolerance, &mut breaks);
    breaks.push(last);

    // merge neighbors whose union still fits one line
    loop {
        let merge = (1..breaks.len() - 1)
            .find(|&i| max_deviation(pts, breaks[i - 1], breaks[i + 1]).1 <= p.tolerance);
        match merge {
            Some(i) => {
                breaks.remove(i);
            }
            None => break,
        }
    }

    // short pieces are clutter or noise at a bend; corners join solid segments
    let solid = |&(lo, hi): &(usize, usize)| {
        hi + 1 - lo >= p.min_segment_points && dist(&pts[lo], &pts[hi]) >= p.min_segment_length
    };
    let segments: Vec<(usize, usize)> = breaks
        .windows(2)
        .map(|w| (w[0], w[1]))
        .filter(solid)
        .collect();
    let mut junctions: Vec<(usize, usize)> = (1..segments.len()).map(|i| (i - 1, i)).collect();
    if closed && segments.len() >= 3 {
        junctions.push((segments.len() - 1, 0));
    }
    junctions
        .into_iter()
        .filter_map(|(a, b)| corner(pts, segments[a], segments[b], p))
        .collect()
}

/// Least-squares line through `pts[lo..=hi]`: centroid and unit direction.
fn fit_line(pts: &[Point], lo: usize, hi: usize) -> (Point, Point) {
    let m = (hi - lo + 1) as f64;
    let (mut cx, mut cy) = (0.0, 0.0);
    for q in &pts[lo..=hi] {
        cx += q[0];
        cy += q[1];
    }
    cx /= m;
    cy /= m;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for q in &pts[lo..=hi] {
        let (dx, dy) = (q[0] - cx, q[1] - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let angle = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    ([cx, cy], [angle.cos(), angle.sin()])
}

fn corner(
    pts: &[Point],
    s1: (usize, usize),
    s2: (usize, usize),
    p: &ExtractParams,
) -> Option<Point> {
    let (c1, d1) = fit_line(pts, s1.0, s1.1);
    let (c2, d2) = fit_line(pts, s2.0, s2.1);
    let cross = d1[0] * d2[1] - d1[1] * d2[0];
    if cross.abs() < p.min_corner_angle.sin() {
        return None;
    }
    // each segment must leave the other's line clearly, not just bend within noise
    let off_line =
        |c: &Point, d: &Point, q: &Point| ((q[0] - c[0]) * d[1] - (q[1] - c[1]) * d[0]).abs();
    if off_line(&c1, &d1, &pts[s2.1]) < 1.5 * p.tolerance
        || off_line(&c2, &d2, &pts[s1.0]) < 1.5 * p.tolerance
    {
        return None;
    }
    // c1 + t·d1 = c2 + s·d2
    let t = ((c2[0] - c1[0]) * d2[1] - (c2[1] - c1[1]) * d2[0]) / cross;
    let hit = [c1[0] + t * d1[0], c1[1] + t * d1[1]];
    let reach = 3.0 * p.tolerance + dist(&pts[s1.1], &pts[s2.0]);
    (dist(&hit, &pts[s1.1]) <= reach && dist(&hit, &pts[s2.0]) <= reach).then_some(hit)
}

/// Similarity of two signatures in `(0, 1]`, or `None` when their keypoint
/// counts differ by more than one. Signatures of unequal length are compared
/// after resampling both to the shorter length at matching quantiles.
pub fn signature_score(a: &Landmark, b: &Landmark) -> Option<f64> {
    if a.keypoints.len().abs_diff(b.keypoints.len()) > 1 {
        return None;
    }
    let (sa, sb) = (&a.signature, &b.signature);
    let mean_diff = if sa.len() == sb.len() {
        sa.iter().zip(sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / sa.len() as f64
    } else {
        let m = sa.len().min(sb.len());
        (0..m)
            .map(|i| {
                let q = if m == 1 {
                    0.5
                } else {
                    i as f64 / (m - 1) as f64
                };
                (quantile(sa, q) - quantile(sb, q)).abs()
            })
            .sum::<f64>()
            / m as f64
    };
    Some(1.0 / (1.0 + mean_diff))
}

/// Candidate rotations `α` taking the keypoints of `reference` onto those of
/// `probe` (`probe ≈ R(α)·reference + t`), best fit first. Hypotheses come
/// from pairs of keypoints at equal distance and are ranked by how many
/// reference keypoints land near a probe keypoint. Empty when no hypothesis
/// explains at least two keypoints.
pub fn relative_rotations(reference: &Landmark, probe: &Landmark) -> Vec<f64> {
    const PAIR_TOLERANCE: f64 = 0.1;
    const MIN_BASELINE: f64 = 0.2;
    const INLIER_RADIUS: f64 = 0.2;
    const DISTINCT: f64 = 0.35;
    const MAX_CANDIDATES: usize = 4;

    let (r, q) = (&reference.keypoints, &probe.keypoints);
    let mut hyps: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..r.len() {
        for j in i + 1..r.len() {
            let d = dist(&r[i], &r[j]);
            if d < MIN_BASELINE {
                continue;
            }
            let ref_angle = (r[j][1] - r[i][1]).atan2(r[j][0] - r[i][0]);
            for k in 0..q.len() {
                for l in 0..q.len() {
                    if k == l || (dist(&q[k], &q[l]) - d).abs() > PAIR_TOLERANCE {
                        continue;
                    }
                    let alpha =
                        wrap_angle((q[l][1] - q[k][1]).atan2(q[l][0] - q[k][0]) - ref_angle);
                    let (c, s) = (alpha.cos(), alpha.sin());
                    let t = [
                        q[k][0] - (c * r[i][0] - s * r[i][1]),
                        q[k][1] - (s * r[i][0] + c * r[i][1]),
                    ];
                    let (mut inliers, mut residual) = (0, 0.0);
                    for a in r {
                        let m = [c * a[0] - s * a[1] + t[0], s * a[0] + c * a[1] + t[1]];
                        let nearest = q.iter().map(|b| dist(&m, b)).fold(f64::INFINITY, f64::min);
                        if nearest <= INLIER_RADIUS {
                            inliers += 1;
                            residual += nearest;
                        }
                    }
                    if inliers >= 2 {
                        hyps.push((inliers, residual / inliers as f64, alpha));
                    }
                }
            }
        }
    }
    let Some(best) = hyps.iter().map(|h| h.0).max() else {
        return Vec::new();
    };
    hyps.retain(|h| h.0 == best);
    hyps.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.total_cmp(&b.2)));
    let mut out: Vec<f64> = Vec::new();
    for (_, _, alpha) in hyps {
        if out.len() == MAX_CANDIDATES {
            break;
        }
        if out.iter().all(|&a| wrap_angle(a - alpha).abs() > DISTINCT) {
            out.push(alpha);
        }
    }
    out
}

/// Linear-interpolated quantile of an ascending sequence.
fn quantile(s: &[f64], q: f64) -> f64 {
    if s.len() == 1 {
        return s[0];
    }
    let pos = q * (s.len() - 1) as f64;
    let i = (pos.floor() as usize).min(s.len() - 2);
    let f = pos - i as f64;
    s[i] * (1.0 - f) + s[i + 1] * f
}

/// A stored view and its current activity.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalViewCell {
    pub id: usize,
    pub landmark: Landmark,
    activity: f64,
    heading_shifts: Vec<i64>,
}

impl LocalViewCell {
    pub fn activity(&self) -> f64 {
        self.activity
    }

    /// Heading offsets (in cells) applied to this view's anchors on
    /// injection. Empty means the anchors are used as stored.
    pub fn heading_shifts(&self) -> &[i64] {
        &self.heading_shifts
    }
}

/// Local view cells with ids `0..len`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LandmarkStore {
    cells: Vec<LocalViewCell>,
}

impl LandmarkStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&LocalViewCell> {
        self.cells.get(id)
    }

    pub fn cells(&self) -> &[LocalViewCell] {
        &self.cells
    }

    fn push(&mut self, landmark: Landmark) -> usize {
        let id = self.cells.len();
        self.cells.push(LocalViewCell {
            id,
            landmark,
            activity: 0.0,
            heading_shifts: Vec::new(),
        });
        id
    }

    /// Sets one cell's activity. Other cells are untouched.
    pub fn set_activation(&mut self, id: usize, level: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&level) {
            return Err(Error::value(format!("activation {level} outside [0, 1]")));
        }
        let n = self.cells.len();
        let cell = self.cells.get_mut(id).ok_or_else(|| {
            Error::value(format!("unknown local view cell {id} (store holds {n})"))
        })?;
        cell.activity = level;
        Ok(())
    }

    /// Sets the heading offsets used when `id` injects. Injected mass is split
    /// evenly over the offsets.
    pub fn set_heading_shifts(&mut self, id: usize, shifts: Vec<i64>) -> Result<()> {
        let n = self.cells.len();
        let cell = self.cells.get_mut(id).ok_or_else(|| {
            Error::value(format!("unknown local view cell {id} (store holds {n})"))
        })?;
        cell.heading_shifts = shifts;
        Ok(())
    }

    /// Multiplies every activity by `factor`, silencing cells that fade out.
    pub fn decay(&mut self, factor: f64) {
        for c in &mut self.cells {
            c.activity *= factor;
            if c.activity < SILENT {
                c.activity = 0.0;
            }
        }
    }

    pub fn any_active(&self) -> bool {
        self.cells.iter().any(|c| c.activity > 0.0)
    }

    pub fn reset_activity(&mut self) {
        self.cells.iter_mut().for_each(|c| c.activity = 0.0);
    }
}

/// Sparse links from local view cells to pose cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adjacency {
    links: BTreeMap<usize, Vec<(CellIndex, f64)>>,
}

impl Adjacency {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn links(&self, id: usize) -> &[(CellIndex, f64)] {
        self.links.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Total number of links.
    pub fn len(&self) -> usize {
        self.links.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// Adds a link with an explicit weight.
    pub fn insert(&mut self, id: usize, cell: CellIndex, weight: f64) -> Result<()> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::value(format!(
                "adjacency weight must be finite and >= 0, got {weight}"
            )));
        }
        self.links.entry(id).or_default().push((cell, weight));
        Ok(())
    }

    /// Adds a further anchor for `id` and rebalances its links to equal
    /// weights summing to one.
    pub fn add_anchor(&mut self, id: usize, cell: CellIndex) {
        let links = self.links.entry(id).or_default();
        links.push((cell, 0.0));
        let w = 1.0 / links.len() as f64;
        links.iter_mut().for_each(|l| l.1 = w);
    }
}

/// Best stored view scoring at least `threshold` against `probe`; ties go to
/// the lowest id.
pub fn match_landmark(
    store: &LandmarkStore,
    probe: &Landmark,
    threshold: f64,
) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for cell in &store.cells {
        if let Some(s) = signature_score(&cell.landmark, probe) {
            if s >= threshold && best.is_none_or(|(_, b)| s > b) {
                best = Some((cell.id, s));
            }
        }
    }
    best
}

/// Stores a new view anchored at `anchor` with weight 1. An exact duplicate
/// of a stored view returns the existing id instead.
pub fn register_landmark(
    store: &mut LandmarkStore,
    adjacency: &mut Adjacency,
    landmark: Landmark,
    anchor: CellIndex,
) -> Result<usize> {
    if anchor.xp < 0 || anchor.yp < 0 || anchor.tp < 0 {
        return Err(Error::value(format!(
            "anchor {anchor} has a negative index"
        )));
    }
    if let Some((id, _)) = match_landmark(store, &landmark, 1.0) {
        return Ok(id);
    }
    let id = store.push(landmark);
    adjacency.insert(id, anchor, 1.0)?;
    Ok(id)
}

/// Adds `s_v · weight · activity` to every linked pose cell of every active
/// view and returns the total mass added. A view with heading shifts spreads
/// each link's share evenly over the anchor shifted by each offset.
pub fn inject(
    net: &mut PoseCellNetwork,
    store: &LandmarkStore,
    adjacency: &Adjacency,
    s_v: f64,
) -> Result<f64> {
    if !(s_v >= 0.0 && s_v.is_finite()) {
        return Err(Error::value(format!(
            "s_v must be finite and >= 0, got {s_v}"
        )));
    }
    let mut mass = 0.0;
    if s_v == 0.0 {
        return Ok(mass);
    }
    let n_theta = net.geometry().n_theta as i64;
    for cell in store.cells.iter().filter(|c| c.activity > 0.0) {
        let shifts: &[i64] = if cell.heading_shifts.is_empty() {
            &[0]
        } else {
            &cell.heading_shifts
        };
        for &(c, w) in adjacency.links(cell.id) {
            let amount = s_v * w * cell.activity / shifts.len() as f64;
            for &dt in shifts {
                let target = CellIndex {
                    tp: (c.tp + dt).rem_euclid(n_theta),
                    ..c
                };
                net.add_activity(&target, amount)?;
                mass += amount;
            }
        }
    }
    Ok(mass)
}

/// Writes the store, one line per link:
/// `id; kp_count; x0 y0 …; anchor_xp anchor_yp anchor_tp; weight`.
pub fn store_to_string(store: &LandmarkStore, adjacency: &Adjacency) -> String {
    let mut out = String::new();
    for cell in &store.cells {
        let mut kp = String::new();
        for (i, k) in cell.landmark.keypoints.iter().enumerate() {
            if i > 0 {
                kp.push(' ');
            }
            let _ = write!(kp, "{} {}", k[0], k[1]);
        }
        for (c, w) in adjacency.links(cell.id) {
            let _ = writeln!(
                out,
                "{}; {}; {}; {} {} {}; {}",
                cell.id,
                cell.landmark.keypoints.len(),
                kp,
                c.xp,
                c.yp,
                c.tp,
                w
            );
        }
    }
    out
}

/// Parses the text written by [`store_to_string`]. Records must list ids in
/// order starting from 0; repeated ids add further links.
pub fn store_from_str(text: &str, source_name: &str) -> Result<(LandmarkStore, Adjacency)> {
    let mut store = LandmarkStore::new();
    let mut adjacency = Adjacency::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |m: String| Error::parse(source_name, line, m);
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split(';').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(err(format!(
                "expected 5 `;`-separated fields, got {}",
                fields.len()
            )));
        }
        let id: usize = fields[0].parse().map_err(|e| err(format!("bad id: {e}")))?;
        let count: usize = fields[1]
            .parse()
            .map_err(|e| err(format!("bad keypoint count: {e}")))?;
        let coords = fields[2]
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| err(format!("bad keypoint coordinate `{v}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if coords.len() != 2 * count {
            return Err(err(format!(
                "keypoint count {count} but {} coordinates",
                coords.len()
            )));
        }
        let keypoints: Vec<Point> = coords.chunks(2).map(|c| [c[0], c[1]]).collect();
        let anchor = fields[3]
            .split_whitespace()
            .map(|v| {
                v.parse::<i64>()
                    .map_err(|e| err(format!("bad anchor index `{v}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if anchor.len() != 3 {
            return Err(err(format!("anchor needs 3 indices, got {}", anchor.len())));
        }
        let weight: f64 = fields[4]
            .parse()
            .map_err(|e| err(format!("bad weight: {e}")))?;
        if id == store.len() {
            let landmark = Landmark::new(keypoints).map_err(|e| err(e.to_string()))?;
            store.push(landmark);
        } else if id + 1 == store.len() {
            if store.cells[id].landmark.keypoints != keypoints {
                return Err(err(format!(
                    "keypoints of id {id} differ from its earlier record"
                )));
            }
        } else {
            return Err(err(format!(
                "id {id} out of sequence (next id is {})",
                store.len()
            )));
        }
        adjacency
            .insert(id, CellIndex::new(anchor[0], anchor[1], anchor[2]), weight)
            .map_err(|e| err(e.to_string()))?;
    }
    Ok((store, adjacency))
}

pub fn save_store(
    store: &LandmarkStore,
    adjacency: &Adjacency,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store_to_string(store, adjacency)).map_err(|e| Error::io(path, e))
}

pub fn load_store(path: impl AsRef<Path>) -> Result<(LandmarkStore, Adjacency)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    store_from_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{NetworkGeometry, Pose};
    use crate::grid_map::OccupancyGrid;
    use crate::observation::{simulate_scan, LidarSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn lm(points: &[(f64, f64)]) -> Landmark {
        Landmark::new(points.iter().map(|&(x, y)| [x, y]).collect()).unwrap()
    }

    /// 6×4 m room, walls one cell thick, centered on the world origin.
    fn room() -> OccupancyGrid {
        let mut m = OccupancyGrid::filled(64, 44, 0.1, Pose::new(-3.2, -2.2, 0.0), 0.0).unwrap();
        for i in 0..64 {
            for j in 0..44 {
                let inside = (2..62).contains(&i) && (2..42).contains(&j);
                if !inside {
                    m.set(i, j, 1.0);
                }
            }
        }
        m
    }

    fn noiseless() -> LidarSpec {
        LidarSpec {
            noise_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn preprocess_dedups_and_skips_max_range() {
        let z = LidarScan::new(vec![1.0, 1.001, 8.0], 0.0, 0.0001, 8.0).unwrap();
        assert_eq!(preprocess_scan(&z, 0.05).unwrap().len(), 1);
        let z = LidarScan::new(vec![8.0; 5], 0.0, 0.1, 8.0).unwrap();
        assert!(preprocess_scan(&z, 0.05).unwrap().is_empty());
        assert!(preprocess_scan(&z, 0.0).is_err());
    }

    #[test]
    fn preprocess_matches_brute_force() {
        let m = room();
        let z = simulate_scan(
            &m,
            &Pose::new(0.3, -0.4, 0.2),
            &noiseless(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let pts = preprocess_scan(&z, 0.05).unwrap();
        // brute force: snap every endpoint, then compare against all kept ones
        let mut unique: Vec<Point> = Vec::new();
        for i in 0..z.len() {
            let r = z.ranges()[i];
            if r >= z.max_range() {
                continue;
            }
            let b = z.bearing(i);
            let s = [
                (r * b.cos() / 0.05).round() * 0.05,
                (r * b.sin() / 0.05).round() * 0.05,
            ];
            if !unique
                .iter()
                .any(|u| (u[0] - s[0]).abs() < 1e-9 && (u[1] - s[1]).abs() < 1e-9)
            {
                unique.push(s);
            }
        }
        assert_eq!(pts.len(), unique.len());
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn square_room_gives_four_corners() {
        let m = room();
        let pose = Pose::new(0.3, -0.4, 0.0);
        let z = simulate_scan(&m, &pose, &noiseless(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let pts = preprocess_scan(&z, 0.05).unwrap();
        let l = extract_landmark(&pts, 0.1).unwrap();
        assert_eq!(l.keypoints().len(), 4, "{:?}", l.keypoints());
        // interior corners in the sensor frame
        let truth = [(-3.0, -2.0), (3.0, -2.0), (3.0, 2.0), (-3.0, 2.0)];
        for (x, y) in truth {
            let (sx, sy) = (x - pose.x, y - pose.y);
            let near = l
                .keypoints()
                .iter()
                .any(|k| (k[0] - sx).hypot(k[1] - sy) < 0.1);
            assert!(near, "no keypoint near ({sx}, {sy}): {:?}", l.keypoints());
        }
    }

    #[test]
    fn square_room_with_noise_still_gives_four_corners() {
        let m = room();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let pose = Pose::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-1.3..1.3),
                rng.random_range(-PI..PI),
            );
            let z = simulate_scan(&m, &pose, &LidarSpec::default(), &mut rng).unwrap();
            let l = extract_landmark(&preprocess_scan(&z, 0.05).unwrap(), 0.1).unwrap();
            assert_eq!(l.keypoints().len(), 4, "{pose:?}: {:?}", l.keypoints());
        }
    }

    #[test]
    fn straight_wall_and_empty_give_none() {
        let pts: Vec<Point> = (0..60).map(|i| [2.0, -1.5 + i as f64 * 0.05]).collect();
        assert!(extract_landmark(&pts, 0.1).is_none());
        assert!(extract_landmark(&[], 0.1).is_none());
    }

    #[test]
    fn keypoints_are_capped_closest_first() {
        // room with notched walls: far more than 16 corners in view
        let mut m = room();
        for k in 0..6 {
            for i in 0..4 {
                for d in 0..4 {
                    m.set(6 + 10 * k + i, 2 + d, 1.0);
                    m.set(6 + 10 * k + i, 41 - d, 1.0);
                }
            }
        }
        let z = simulate_scan(
            &m,
            &Pose::new(0.2, 0.1, 0.0),
            &noiseless(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let pts = preprocess_scan(&z, 0.05).unwrap();
        let all = extract_landmark_with(
            &pts,
            &ExtractParams {
                max_keypoints: 1000,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(all.keypoints().len() > 16, "{}", all.keypoints().len());
        let capped = extract_landmark(&pts, 0.1).unwrap();
        assert_eq!(capped.keypoints().len(), 16);
        let mut ranges: Vec<f64> = all.keypoints().iter().map(norm).collect();
        ranges.sort_by(f64::total_cmp);
        for k in capped.keypoints() {
            assert!(all.keypoints().contains(k));
            assert!(norm(k) <= ranges[15]);
        }
    }

    #[test]
    fn self_match_and_rotation() {
        let a = lm(&[(1.0, 0.0), (0.0, 2.0), (-1.5, -0.5), (2.0, 2.0)]);
        let b = lm(&[(3.0, 1.0), (0.0, 4.0), (-2.0, 2.0)]);
        let mut store = LandmarkStore::new();
        let mut adj = Adjacency::new();
        assert!(match_landmark(&store, &a, 0.9).is_none());
        register_landmark(&mut store, &mut adj, b, CellIndex::new(1, 1, 1)).unwrap();
        register_landmark(&mut store, &mut adj, a.clone(), CellIndex::new(2, 2, 2)).unwrap();
        assert_eq!(match_landmark(&store, &a, 0.9), Some((1, 1.0)));
        let (s, c) = (PI / 6.0).sin_cos();
        let rotated = Landmark::new(
            a.keypoints()
                .iter()
                .map(|k| [c * k[0] - s * k[1], s * k[0] + c * k[1]])
                .collect(),
        )
        .unwrap();
        let (id, score) = match_landmark(&store, &rotated, 0.9).unwrap();
        assert_eq!(id, 1);
        assert!((score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn count_gate_and_unequal_lengths() {
        let a = lm(&[(0.0, 0.0), (1.0, 0.0)]);
        let b = lm(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
        assert!(signature_score(&a, &b).is_none());
        let c = lm(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        // [1] vs [1, 1, √2] resampled to one midpoint value: |1 - 1| = 0
        assert_eq!(signature_score(&a, &c), Some(1.0));
        let d = lm(&[(0.0, 0.0), (2.0, 0.0), (0.0, 1.0)]);
        // [1, 2, √5] vs [1, 1, √2]
        let mean = (0.0 + 1.0 + (5f64.sqrt() - 2f64.sqrt())) / 3.0;
        assert!((signature_score(&c, &d).unwrap() - 1.0 / (1.0 + mean)).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let a = lm(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let mut store = LandmarkStore::new();
        store.push(a.clone());
        store.push(a.clone());
        assert_eq!(match_landmark(&store, &a, 0.9), Some((0, 1.0)));
    }

    #[test]
    fn registration_ids_and_dedup() {
        let mut store = LandmarkStore::new();
        let mut adj = Adjacency::new();
        let a = lm(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let b = lm(&[(0.0, 0.0), (3.0, 0.0), (0.0, 2.5)]);
        assert_eq!(
            register_landmark(&mut store, &mut adj, a.clone(), CellIndex::new(5, 6, 7)).unwrap(),
            0
        );
        assert_eq!(adj.links(0), &[(CellIndex::new(5, 6, 7), 1.0)]);
        assert_eq!(
            register_landmark(&mut store, &mut adj, b, CellIndex::new(1, 2, 3)).unwrap(),
            1
        );
        assert_eq!(
            register_landmark(&mut store, &mut adj, a, CellIndex::new(9, 9, 9)).unwrap(),
            0
        );
        assert_eq!(store.len(), 2);
        assert_eq!(adj.len(), 2);
    }

    #[test]
    fn activation_and_decay() {
        let mut store = LandmarkStore::new();
        store.push(lm(&[(0.0, 0.0), (1.0, 0.0)]));
        store.set_activation(0, 1.0).unwrap();
        assert_eq!(store.get(0).unwrap().activity(), 1.0);
        store.decay(DEFAULT_DECAY);
        assert_eq!(store.get(0).unwrap().activity(), 0.5);
        for _ in 0..19 {
            store.decay(DEFAULT_DECAY);
        }
        assert!(store.get(0).unwrap().activity() < 1e-6);
        assert!(store.set_activation(3, 1.0).is_err());
        assert!(store.set_activation(0, 1.5).is_err());
    }

    #[test]
    fn injection_bookkeeping() {
        let g = NetworkGeometry::new(0.1, 20, 8).unwrap();
        let target = CellIndex::new(3, 4, 5);
        let mut net = PoseCellNetwork::new(g);
        net.initialize_uniform(&[CellIndex::new(10, 10, 0)])
            .unwrap();
        let mut store = LandmarkStore::new();
        let mut adj = Adjacency::new();
        register_landmark(&mut store, &mut adj, lm(&[(0.0, 0.0), (1.0, 0.0)]), target).unwrap();
        register_landmark(&mut store, &mut adj, lm(&[(0.0, 0.0), (2.0, 0.0)]), target).unwrap();

        assert_eq!(inject(&mut net, &store, &adj, 0.1).unwrap(), 0.0);
        assert_eq!(net.get(&target), 0.0);

        store.set_activation(0, 1.0).unwrap();
        assert!((inject(&mut net, &store, &adj, 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert!((net.get(&target) - 0.1).abs() < 1e-15);

        store.set_activation(1, 0.5).unwrap();
        let before = net.get(&target);
        assert!((inject(&mut net, &store, &adj, 0.1).unwrap() - 0.15).abs() < 1e-15);
        assert!((net.get(&target) - before - 0.15).abs() < 1e-15);
        assert!(inject(&mut net, &store, &adj, -1.0).is_err());
    }

    #[test]
    fn shifted_injection_splits_mass() {
        let g = NetworkGeometry::new(0.1, 20, 8).unwrap();
        let mut net = PoseCellNetwork::new(g);
        let mut store = LandmarkStore::new();
        let mut adj = Adjacency::new();
        let anchor = CellIndex::new(3, 4, 0);
        register_landmark(&mut store, &mut adj, lm(&[(0.0, 0.0), (1.0, 0.0)]), anchor).unwrap();
        store.set_activation(0, 1.0).unwrap();
        store.set_heading_shifts(0, vec![0, 2, -1]).unwrap();
        assert!((inject(&mut net, &store, &adj, 0.3).unwrap() - 0.3).abs() < 1e-15);
        for tp in [0, 2, 7] {
            assert!((net.get(&CellIndex::new(3, 4, tp)) - 0.1).abs() < 1e-15);
        }
        assert!((net.total() - 0.3).abs() < 1e-15);
        assert!(store.set_heading_shifts(1, vec![]).is_err());
    }

    #[test]
    fn relative_rotation_of_a_moved_view() {
        let pts = [(0.0, 0.0), (2.0, 0.3), (1.1, 1.7), (-0.8, 2.4), (-1.5, 0.6)];
        let reference = lm(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..24 {
            let angle = -PI + i as f64 * PI / 12.0 + 0.05;
            let (s, c) = angle.sin_cos();
            let (tx, ty) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            // the probe loses one keypoint and picks up jitter
            let moved: Vec<(f64, f64)> = pts[..4]
                .iter()
                .map(|&(x, y)| {
                    (
                        c * x - s * y + tx + rng.random_range(-0.02..0.02),
                        s * x + c * y + ty + rng.random_range(-0.02..0.02),
                    )
                })
                .collect();
            let found = relative_rotations(&reference, &lm(&moved));
            assert!(!found.is_empty() && found.len() <= 4);
            let err = wrap_angle(found[0] - angle).abs();
            assert!(err < 0.05, "angle {angle}: got {found:?}");
        }
    }

    #[test]
    fn relative_rotation_without_common_pairs() {
        let a = lm(&[(0.0, 0.0), (1.0, 0.0), (0.0, 3.0)]);
        let b = lm(&[(0.0, 0.0), (5.0, 0.0), (0.0, 7.0)]);
        assert!(relative_rotations(&a, &b).is_empty());
    }

    #[test]
    fn anchors_rebalance() {
        let mut adj = Adjacency::new();
        adj.insert(0, CellIndex::new(1, 1, 1), 1.0).unwrap();
        adj.add_anchor(0, CellIndex::new(2, 2, 2));
        adj.add_anchor(0, CellIndex::new(3, 3, 3));
        let w: Vec<f64> = adj.links(0).iter().map(|l| l.1).collect();
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn store_round_trip_is_exact() {
        let mut store = LandmarkStore::new();
        let mut adj = Adjacency::new();
        register_landmark(
            &mut store,
            &mut adj,
            lm(&[(0.1, 0.2), (1.0 / 3.0, -2.0 / 7.0)]),
            CellIndex::new(1, 2, 3),
        )
        .unwrap();
        register_landmark(
            &mut store,
            &mut adj,
            lm(&[(PI, 1e-17), (-0.0, 5.5), (3.0, 3.0)]),
            CellIndex::new(4, 5, 6),
        )
        .unwrap();
        adj.add_anchor(1, CellIndex::new(7, 8, 9));
        let text = store_to_string(&store, &adj);
        assert_eq!(text.lines().count(), 3);
        let (s2, a2) = store_from_str(&text, "mem").unwrap();
        assert_eq!(s2, store);
        assert_eq!(a2, adj);
        assert_eq!(store_to_string(&s2, &a2), text);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lv.txt");
        save_store(&store, &adj, &path).unwrap();
        assert_eq!(load_store(&path).unwrap(), (store, adj));
        assert_eq!(store_from_str("", "empty").unwrap().0.len(), 0);
    }

    #[test]
    fn store_parse_errors_name_the_line() {
        let e = store_from_str("0; 2; 0 0 1 1; 1 2 3; 1\n1; 2; 0 0; 1 2 3; 1\n", "f").unwrap_err();
        assert!(e.to_string().starts_with("f:2:"), "{e}");
        assert!(store_from_str("3; 2; 0 0 1 1; 1 2 3; 1\n", "f").is_err());
        assert!(store_from_str("0; 2; 0 0 1 1; 1 2; 1\n", "f").is_err());
    }

    proptest! {
        #[test]
        fn signature_is_rigid_invariant(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..16),
            angle in -PI..PI, tx in -3.0f64..3.0, ty in -3.0f64..3.0,
        ) {
            let a = lm(&pts);
            let (s, c) = angle.sin_cos();
            let moved: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (c * x - s * y + tx, s * x + c * y + ty)).collect();
            let b = lm(&moved);
            for (u, v) in a.signature().iter().zip(b.signature()) {
                prop_assert!((u - v).abs() < 1e-9);
            }
            prop_assert!(a.signature().windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
