//! Planar poses, angle arithmetic and the mapping between world coordinates
//! and pose cell indices.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (in cells) applied before flooring so that coordinates lying
/// exactly on a cell boundary are not pushed into the lower cell by rounding.
const INDEX_SNAP: f64 = 1e-9;

/// Wraps an angle into `[-π, π)`.
///
/// Angles already inside the range are returned untouched, which makes the
/// function exactly idempotent.
pub fn normalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::value(format!("angle must be finite, got {a}")));
    }
    Ok(wrap_angle(a))
}

/// Infallible form of [`normalize_angle`] for values already known to be finite.
#[inline]
pub(crate) fn wrap_angle(a: f64) -> f64 {
    if (-PI..PI).contains(&a) {
        return a;
    }
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r >= PI {
        -PI
    } else {
        r
    }
}

/// Signed smallest difference `a - b` on the circle, in `[-π, π)`.
#[inline]
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

/// Robot pose in the world frame. `theta` is kept in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Applies a motion expressed in this pose's own frame.
    pub fn advance(&self, forward: f64, lateral: f64, dtheta: f64) -> Pose {
        let (s, c) = self.theta.sin_cos();
        Pose::new(
            self.x + c * forward - s * lateral,
            self.y + s * forward + c * lateral,
            self.theta + dtheta,
        )
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::new(0.0, 0.0, 0.0)
    }
}

/// Motion between two consecutive poses, in both world and robot frames.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseDelta {
    pub dx: f64,
    pub dy: f64,
    pub dtheta: f64,
    /// Translation along the previous heading.
    pub forward: f64,
    /// Translation perpendicular (left) to the previous heading.
    pub lateral: f64,
}

impl PoseDelta {
    /// Builds a delta from robot-frame motion, given the heading it started at.
    pub fn from_robot_frame(forward: f64, lateral: f64, dtheta: f64, heading: f64) -> Self {
        let (s, c) = heading.sin_cos();
        PoseDelta {
            dx: c * forward - s * lateral,
            dy: s * forward + c * lateral,
            dtheta: wrap_angle(dtheta),
            forward,
            lateral,
        }
    }

    pub fn translation(&self) -> f64 {
        self.forward.hypot(self.lateral)
    }

    pub fn is_zero(&self) -> bool {
        self.dx == 0.0
            && self.dy == 0.0
            && self.dtheta == 0.0
            && self.forward == 0.0
            && self.lateral == 0.0
    }
}

/// World-frame and robot-frame motion from `prev` to `cur`.
pub fn compose_delta(prev: &Pose, cur: &Pose) -> PoseDelta {
    let dx = cur.x - prev.x;
    let dy = cur.y - prev.y;
    let (s, c) = prev.theta.sin_cos();
    PoseDelta {
        dx,
        dy,
        dtheta: angle_diff(cur.theta, prev.theta),
        forward: c * dx + s * dy,
        lateral: -s * dx + c * dy,
    }
}

/// Discrete pose cell coordinate `(x', y', θ')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellIndex {
    pub xp: i64,
    pub yp: i64,
    pub tp: i64,
}

impl CellIndex {
    pub const fn new(xp: i64, yp: i64, tp: i64) -> Self {
        Self { xp, yp, tp }
    }
}

impl std::fmt::Display for CellIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.xp, self.yp, self.tp)
    }
}

/// Resolution and size of a pose cell network. The world origin maps onto
/// the network center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkGeometry {
    /// Meters per cell on the planar axes.
    pub k_xy: f64,
    /// Radians per cell on the heading axis.
    pub k_theta: f64,
    pub n_xy: usize,
    pub n_theta: usize,
}

impl NetworkGeometry {
    /// Default planar resolution in meters.
    pub const DEFAULT_K_XY: f64 = 0.1;
    /// Default number of heading cells.
    pub const DEFAULT_N_THETA: usize = 36;

    /// Geometry whose heading axis covers exactly one turn.
    pub fn new(k_xy: f64, n_xy: usize, n_theta: usize) -> Result<Self> {
        if n_theta < 2 {
            return Err(Error::value(format!("n_theta must be >= 2, got {n_theta}")));
        }
        Self::with_theta_resolution(k_xy, TAU / n_theta as f64, n_xy, n_theta)
    }

    pub fn with_theta_resolution(
        k_xy: f64,
        k_theta: f64,
        n_xy: usize,
        n_theta: usize,
    ) -> Result<Self> {
        if !(k_xy > 0.0 && k_xy.is_finite()) {
            return Err(Error::value(format!("k_xy must be > 0, got {k_xy}")));
        }
        if !(k_theta > 0.0 && k_theta.is_finite()) {
            return Err(Error::value(format!("k_theta must be > 0, got {k_theta}")));
        }
        if n_xy < 2 || n_theta < 2 {
            return Err(Error::value(format!(
                "network needs at least 2 cells per axis, got n_xy={n_xy} n_theta={n_theta}"
            )));
        }
        if (n_theta as f64 * k_theta - TAU).abs() > 1e-9 {
            return Err(Error::value(format!(
                "heading axis must span 2π: {n_theta} · {k_theta} != 2π"
            )));
        }
        Ok(Self {
            k_xy,
            k_theta,
            n_xy,
            n_theta,
        })
    }

    /// Smallest even-sized network centered on the world origin that covers
    /// `|x|, |y| <= half_extent` plus `margin` cells on every side.
    pub fn covering(half_extent: f64, k_xy: f64, n_theta: usize, margin: usize) -> Result<Self> {
        if !(half_extent >= 0.0 && half_extent.is_finite()) {
            return Err(Error::value(format!(
                "extent must be finite and >= 0, got {half_extent}"
            )));
        }
        if !(k_xy > 0.0) {
            return Err(Error::value(format!("k_xy must be > 0, got {k_xy}")));
        }
        let half_cells = (half_extent / k_xy - INDEX_SNAP).ceil().max(1.0) as usize + margin;
        Self::new(k_xy, 2 * half_cells, n_theta)
    }

    pub fn cell_count(&self) -> usize {
        self.n_xy * self.n_xy * self.n_theta
    }

    pub fn contains(&self, c: &CellIndex) -> bool {
        let n = self.n_xy as i64;
        (0..n).contains(&c.xp) && (0..n).contains(&c.yp) && (0..self.n_theta as i64).contains(&c.tp)
    }

    /// Continuous planar cell coordinate of a world coordinate.
    #[inline]
    pub fn planar_coord(&self, v: f64) -> f64 {
        v / self.k_xy + self.n_xy as f64 / 2.0
    }

    /// Continuous heading cell coordinate, not wrapped.
    #[inline]
    pub fn heading_coord(&self, theta: f64) -> f64 {
        theta / self.k_theta + self.n_theta as f64 / 2.0
    }

    /// Heading index of an angle, wrapped onto the ring.
    #[inline]
    pub fn heading_index(&self, theta: f64) -> i64 {
        ((self.heading_coord(theta) + INDEX_SNAP).floor() as i64).rem_euclid(self.n_theta as i64)
    }

    /// World heading at the center of heading cell `tp`.
    #[inline]
    pub fn heading_of(&self, tp: i64) -> f64 {
        wrap_angle((tp as f64 + 0.5 - self.n_theta as f64 / 2.0) * self.k_theta)
    }

    /// World coordinate of the center of planar cell `i`.
    #[inline]
    pub fn planar_center(&self, i: i64) -> f64 {
        (i as f64 + 0.5 - self.n_xy as f64 / 2.0) * self.k_xy
    }
}

impl Default for NetworkGeometry {
    fn default() -> Self {
        Self::new(Self::DEFAULT_K_XY, 100, Self::DEFAULT_N_THETA)
            .expect("default geometry is valid")
    }
}

/// Quantizes a world pose into the pose cell containing it.
pub fn pose_to_cell(p: &Pose, g: &NetworkGeometry) -> Result<CellIndex> {
    let n = g.n_xy as i64;
    let xp = (g.planar_coord(p.x) + INDEX_SNAP).floor();
    let yp = (g.planar_coord(p.y) + INDEX_SNAP).floor();
    for (axis, v, w) in [("x", xp, p.x), ("y", yp, p.y)] {
        if !(v >= 0.0 && v < n as f64) {
            return Err(Error::Range {
                axis,
                value: w,
                limit: g.n_xy as f64,
            });
        }
    }
    Ok(CellIndex::new(
        xp as i64,
        yp as i64,
        g.heading_index(p.theta),
    ))
}

/// World pose at the center of a pose cell.
pub fn cell_to_pose(c: &CellIndex, g: &NetworkGeometry) -> Result<Pose> {
    if !g.contains(c) {
        let (axis, value, limit) = if !(0..g.n_xy as i64).contains(&c.xp) {
            ("xp", c.xp, g.n_xy)
        } else if !(0..g.n_xy as i64).contains(&c.yp) {
            ("yp", c.yp, g.n_xy)
        } else {
            ("tp", c.tp, g.n_theta)
        };
        return Err(Error::Range {
            axis,
            value: value as f64,
            limit: limit as f64,
        });
    }
    Ok(Pose::new(
        g.planar_center(c.xp),
        g.planar_center(c.yp),
        g.heading_of(c.tp),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g100() -> NetworkGeometry {
        NetworkGeometry::new(0.1, 100, 36).unwrap()
    }

    #[test]
    fn origin_maps_to_center() {
        let c = pose_to_cell(&Pose::new(0.0, 0.0, 0.0), &g100()).unwrap();
        assert_eq!(c, CellIndex::new(50, 50, 18));
    }

    #[test]
    fn hand_evaluated_cells() {
        let g = g100();
        let c = pose_to_cell(&Pose::new(1.23, -0.51, PI / 18.0), &g).unwrap();
        assert_eq!(c, CellIndex::new(62, 44, 19));
        let c = pose_to_cell(&Pose::new(-0.05, 0.0, -PI), &g).unwrap();
        assert_eq!(c, CellIndex::new(49, 50, 0));
    }

    #[test]
    fn planar_out_of_extent_names_axis() {
        let err = pose_to_cell(&Pose::new(0.0, 5.01, 0.0), &g100()).unwrap_err();
        match err {
            Error::Range { axis, .. } => assert_eq!(axis, "y"),
            e => panic!("unexpected {e}"),
        }
        assert!(pose_to_cell(&Pose::new(-5.01, 0.0, 0.0), &g100()).is_err());
    }

    #[test]
    fn cell_centers() {
        let g = g100();
        let p = cell_to_pose(&CellIndex::new(50, 50, 18), &g).unwrap();
        assert!((p.x - 0.05).abs() < 1e-12 && (p.y - 0.05).abs() < 1e-12);
        assert!((p.theta - PI / 36.0).abs() < 1e-12);
        let p = cell_to_pose(&CellIndex::new(0, 0, 0), &g).unwrap();
        assert!((p.x + 4.95).abs() < 1e-12 && (p.y + 4.95).abs() < 1e-12);
        assert!((p.theta + PI * 35.0 / 36.0).abs() < 1e-12);
        assert!(cell_to_pose(&CellIndex::new(0, 100, 0), &g).is_err());
        assert!(cell_to_pose(&CellIndex::new(0, 0, -1), &g).is_err());
    }

    #[test]
    fn round_trip_small_geometry() {
        let g = NetworkGeometry::new(0.25, 8, 8).unwrap();
        for xp in 0..8 {
            for yp in 0..8 {
                for tp in 0..8 {
                    let c = CellIndex::new(xp, yp, tp);
                    assert_eq!(pose_to_cell(&cell_to_pose(&c, &g).unwrap(), &g).unwrap(), c);
                }
            }
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert!((normalize_angle(3.0 * PI).unwrap() + PI).abs() < 1e-12);
        assert_eq!(normalize_angle(-PI).unwrap(), -PI);
        assert!(normalize_angle(PI).unwrap() == -PI);
        assert!(normalize_angle(f64::NAN).is_err());
        assert!(normalize_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn delta_examples() {
        let p = Pose::new(0.3, -1.0, 2.0);
        assert_eq!(compose_delta(&p, &p), PoseDelta::default());

        let d = compose_delta(&Pose::new(0.0, 0.0, 0.0), &Pose::new(1.0, 0.0, 0.0));
        assert_eq!(
            (d.dx, d.dy, d.dtheta, d.forward, d.lateral),
            (1.0, 0.0, 0.0, 1.0, 0.0)
        );

        let d = compose_delta(
            &Pose::new(0.0, 0.0, PI / 2.0),
            &Pose::new(0.0, 1.0, PI / 2.0),
        );
        assert_eq!((d.dx, d.dy, d.dtheta), (0.0, 1.0, 0.0));
        assert!((d.forward - 1.0).abs() < 1e-12 && d.lateral.abs() < 1e-12);
    }

    #[test]
    fn geometry_validation() {
        assert!(NetworkGeometry::new(0.0, 10, 36).is_err());
        assert!(NetworkGeometry::new(0.1, 1, 36).is_err());
        assert!(NetworkGeometry::new(0.1, 10, 1).is_err());
        assert!(NetworkGeometry::with_theta_resolution(0.1, 0.1, 10, 36).is_err());
        let g = NetworkGeometry::covering(7.5, 0.1, 36, 6).unwrap();
        assert_eq!(g.n_xy, 162);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_periodic(a in -100.0f64..100.0, k in -20i32..20) {
            let n = normalize_angle(a).unwrap();
            prop_assert!((-PI..PI).contains(&n));
            prop_assert_eq!(normalize_angle(n).unwrap(), n);
            let m = normalize_angle(a + TAU * k as f64).unwrap();
            prop_assert!(angle_diff(m, n).abs() < 1e-9);
        }

        #[test]
        fn zero_delta_for_any_pose(x in -50.0f64..50.0, y in -50.0f64..50.0, t in -PI..PI) {
            let p = Pose::new(x, y, t);
            let d = compose_delta(&p, &p);
            prop_assert!(d.is_zero());
        }

        #[test]
        fn robot_frame_delta_reproduces_motion(
            t in -PI..PI, f in -0.5f64..0.5, l in -0.5f64..0.5, dt in -0.5f64..0.5
        ) {
            let p = Pose::new(1.0, 2.0, t);
            let q = p.advance(f, l, dt);
            let d = compose_delta(&p, &q);
            prop_assert!((d.forward - f).abs() < 1e-9 && (d.lateral - l).abs() < 1e-9);
            prop_assert!(angle_diff(d.dtheta, dt).abs() < 1e-9);
        }
    }
}
