//! Geometric kernel for gravity-aligned scans.
//!
//! Boxes are 7-DOF: a center, an (L, W, H) size with `L >= W`, and a yaw about
//! the world z axis. Yaw is kept in `[-pi/2, pi/2)` because a box maps onto
//! itself under a half turn.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack on SAT interval comparisons. Touching boxes count as overlapping.
pub const SAT_EPS: f64 = 1e-9;

/// Extents below this are floored when computing volumes.
pub const MIN_EXTENT: f64 = 1e-3;

/// Default face grid resolution (4 x 4 = 16 points per face).
pub const DEFAULT_FACE_GRID: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("empty point set")]
    Empty,
    #[error("non-finite value: {0}")]
    NonFinite(f64),
    #[error("zero-length vector")]
    ZeroVector,
    #[error("face grid needs at least 2 points per axis, got {0}")]
    GridTooCoarse(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    /// Counterclockwise rotation by `angle` radians.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn xy(self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn distance(self, o: Point3) -> f64 {
        self.distance_sq(o).sqrt()
    }

    pub fn distance_sq(self, o: Point3) -> f64 {
        let (dx, dy, dz) = (self.x - o.x, self.y - o.y, self.z - o.z);
        dx * dx + dy * dy + dz * dz
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Ordered object point cloud.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl From<Vec<Point3>> for PointCloud {
    fn from(points: Vec<Point3>) -> Self {
        Self { points }
    }
}

/// Oriented 2D rectangle. `dims.0` runs along `angle` (counterclockwise from
/// +x), `dims.1` along the perpendicular.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2 {
    pub center: Vec2,
    pub dims: (f64, f64),
    pub angle: f64,
}

impl Rect2 {
    pub fn area(&self) -> f64 {
        self.dims.0 * self.dims.1
    }
}

/// 7-DOF oriented bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obb7 {
    pub center: Point3,
    /// (L, W, H) in meters, `L >= W`.
    pub size: [f64; 3],
    /// Rotation of the L axis about +z, in `[-pi/2, pi/2)`.
    pub yaw: f64,
}

impl Obb7 {
    /// Builds a box, swapping L/W and renormalizing the yaw when `W > L`.
    pub fn new(center: Point3, size: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        for v in [center.x, center.y, center.z, size[0], size[1], size[2], yaw] {
            if !v.is_finite() {
                return Err(GeometryError::NonFinite(v));
            }
        }
        let [mut l, mut w, h] = size.map(f64::abs);
        let mut yaw = yaw;
        if w > l {
            std::mem::swap(&mut l, &mut w);
            yaw += FRAC_PI_2;
        }
        Ok(Self {
            center,
            size: [l, w, h],
            yaw: normalize_angle(yaw)?,
        })
    }

    pub fn length(&self) -> f64 {
        self.size[0]
    }

    pub fn width(&self) -> f64 {
        self.size[1]
    }

    pub fn height(&self) -> f64 {
        self.size[2]
    }

    pub fn z_min(&self) -> f64 {
        self.center.z - self.size[2] / 2.0
    }

    pub fn z_max(&self) -> f64 {
        self.center.z + self.size[2] / 2.0
    }

    pub fn max_dimension(&self) -> f64 {
        self.size.iter().copied().fold(0.0, f64::max)
    }

    /// Unit vectors of the L and W axes in the XY plane.
    pub fn axes_xy(&self) -> (Vec2, Vec2) {
        let (s, c) = self.yaw.sin_cos();
        (Vec2::new(c, s), Vec2::new(-s, c))
    }

    /// Maps box-local coordinates (meters, origin at the center) to world.
    pub fn to_world(&self, local: Point3) -> Point3 {
        let (u, v) = self.axes_xy();
        Point3::new(
            self.center.x + local.x * u.x + local.y * v.x,
            self.center.y + local.x * u.y + local.y * v.y,
            self.center.z + local.z,
        )
    }

    /// Maps a world point into box-local coordinates.
    pub fn to_local(&self, p: Point3) -> Point3 {
        let (u, v) = self.axes_xy();
        let d = Vec2::new(p.x - self.center.x, p.y - self.center.y);
        Point3::new(d.dot(u), d.dot(v), p.z - self.center.z)
    }

    /// Whether `p` is inside the box, allowing `tol` meters of slack.
    pub fn contains(&self, p: Point3, tol: f64) -> bool {
        let q = self.to_local(p);
        q.x.abs() <= self.size[0] / 2.0 + tol
            && q.y.abs() <= self.size[1] / 2.0 + tol
            && q.z.abs() <= self.size[2] / 2.0 + tol
    }

    /// XY footprint corners, counterclockwise.
    pub fn footprint(&self) -> [Vec2; 4] {
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let c = self.center.xy();
        let (u, v) = self.axes_xy();
        [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(a, b)| {
            Vec2::new(
                c.x + a * hl * u.x + b * hw * v.x,
                c.y + a * hl * u.y + b * hw * v.y,
            )
        })
    }

    pub fn corners(&self) -> [Point3; 8] {
        let fp = self.footprint();
        let (z0, z1) = (self.z_min(), self.z_max());
        let mut out = [Point3::new(0.0, 0.0, 0.0); 8];
        for (i, c) in fp.iter().enumerate() {
            out[i] = Point3::new(c.x, c.y, z0);
            out[i + 4] = Point3::new(c.x, c.y, z1);
        }
        out
    }
}

/// Andrew's monotone chain. Returns the hull counterclockwise, starting at the
/// lowest-x (then lowest-y) point. Collinear input collapses to its two
/// extreme points; a single distinct point yields one vertex.
pub fn convex_hull_2d(points: &[Vec2]) -> Result<Vec<Vec2>, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::Empty);
    }
    for p in points {
        if !p.x.is_finite() {
            return Err(GeometryError::NonFinite(p.x));
        }
        if !p.y.is_finite() {
            return Err(GeometryError::NonFinite(p.y));
        }
    }
    let mut pts: Vec<Vec2> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Ok(pts);
    }

    let turn = |o: Vec2, a: Vec2, b: Vec2| a.sub(o).cross(b.sub(o));
    let mut hull: Vec<Vec2> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    Ok(hull)
}

/// Minimum-area bounding rectangle via rotating calipers over hull edges.
pub fn min_area_rect(points: &[Vec2]) -> Result<Rect2, GeometryError> {
    let hull = convex_hull_2d(points)?;
    match hull.len() {
        1 => {
            return Ok(Rect2 {
                center: hull[0],
                dims: (0.0, 0.0),
                angle: 0.0,
            })
        }
        2 => {
            let d = hull[1].sub(hull[0]);
            return Ok(Rect2 {
                center: Vec2::new((hull[0].x + hull[1].x) / 2.0, (hull[0].y + hull[1].y) / 2.0),
                dims: (d.norm(), 0.0),
                angle: d.y.atan2(d.x),
            });
        }
        _ => {}
    }

    let mut best: Option<(f64, Rect2)> = None;
    for i in 0..hull.len() {
        let e = hull[(i + 1) % hull.len()].sub(hull[i]);
        let len = e.norm();
        if len == 0.0 {
            continue;
        }
        let u = Vec2::new(e.x / len, e.y / len);
        let v = Vec2::new(-u.y, u.x);
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            let (a, b) = (p.dot(u), p.dot(v));
            umin = umin.min(a);
            umax = umax.max(a);
            vmin = vmin.min(b);
            vmax = vmax.max(b);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().map_or(true, |(a, _)| area < *a) {
            let (cu, cv) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
            best = Some((
                area,
                Rect2 {
                    center: Vec2::new(cu * u.x + cv * v.x, cu * u.y + cv * v.y),
                    dims: (umax - umin, vmax - vmin),
                    angle: u.y.atan2(u.x),
                },
            ));
        }
    }
    // At least three distinct hull vertices guarantee a non-zero edge.
    Ok(best
        .map(|(_, r)| r)
        .expect("hull has a non-degenerate edge"))
}

/// Reduces an angle modulo pi into `[-pi/2, pi/2)`.
pub fn normalize_angle(theta: f64) -> Result<f64, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFinite(theta));
    }
    let mut r = theta - PI * ((theta + FRAC_PI_2) / PI).floor();
    if r >= FRAC_PI_2 {
        r -= PI;
    }
    if r < -FRAC_PI_2 {
        r += PI;
    }
    Ok(r)
}

fn aabb(points: &[Point3]) -> (Point3, Point3) {
    let mut lo = Point3::new(f64::MAX, f64::MAX, f64::MAX);
    let mut hi = Point3::new(f64::MIN, f64::MIN, f64::MIN);
    for p in points {
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    (lo, hi)
}

/// Fits a gravity-aligned 7-DOF box to an object point cloud.
///
/// Fewer than three points fall back to the axis-aligned box with zero yaw.
/// Otherwise the XY projection's minimum-area rectangle gives the footprint,
/// the longer side becomes L, and the z extent gives the height.
pub fn fit_obb7(cloud: &PointCloud) -> Result<Obb7, GeometryError> {
    let pts = &cloud.points;
    if pts.is_empty() {
        return Err(GeometryError::Empty);
    }
    if let Some(p) = pts.iter().find(|p| !p.is_finite()) {
        let bad = [p.x, p.y, p.z]
            .into_iter()
            .find(|v| !v.is_finite())
            .unwrap_or(f64::NAN);
        return Err(GeometryError::NonFinite(bad));
    }
    let (lo, hi) = aabb(pts);
    let cz = (lo.z + hi.z) / 2.0;
    let h = hi.z - lo.z;

    if pts.len() < 3 {
        let (dx, dy) = (hi.x - lo.x, hi.y - lo.y);
        // The fallback box is axis aligned; L/W follow the input axes.
        return Ok(Obb7 {
            center: Point3::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, cz),
            size: [dx, dy, h],
            yaw: 0.0,
        });
    }

    let xy: Vec<Vec2> = pts.iter().map(|p| p.xy()).collect();
    let rect = min_area_rect(&xy)?;
    let yaw_d1 = rect.angle;
    let yaw_d2 = yaw_d1 + FRAC_PI_2;
    let (d1, d2) = rect.dims;
    let (l, w, yaw) = if d1 >= d2 {
        (d1, d2, normalize_angle(yaw_d1)?)
    } else {
        (d2, d1, normalize_angle(yaw_d2)?)
    };
    Ok(Obb7 {
        center: Point3::new(rect.center.x, rect.center.y, cz),
        size: [l, w, h],
        yaw,
    })
}

/// Signed angle from `v1` to `v2` in `[-pi, pi]`; positive is counterclockwise.
/// Antiparallel vectors always give `+pi`.
pub fn signed_angle(v1: Vec2, v2: Vec2) -> Result<f64, GeometryError> {
    for v in [v1, v2] {
        if !v.x.is_finite() || !v.y.is_finite() {
            return Err(GeometryError::NonFinite(if v.x.is_finite() {
                v.y
            } else {
                v.x
            }));
        }
        if v.x == 0.0 && v.y == 0.0 {
            return Err(GeometryError::ZeroVector);
        }
    }
    let dot = v1.x * v2.x + v1.y * v2.y;
    let cross = v1.x * v2.y - v1.y * v2.x;
    // atan2(-0.0, negative) is -pi; fold it onto +pi.
    let cross = if cross == 0.0 { 0.0 } else { cross };
    Ok(cross.atan2(dot))
}

/// Samples an `n x n` endpoint-inclusive grid on each of the six faces.
///
/// Faces are emitted in the order -L, +L, -W, +W, bottom, top.
pub fn sample_face_points(b: &Obb7, n_per_axis: usize) -> Result<Vec<Point3>, GeometryError> {
    if n_per_axis < 2 {
        return Err(GeometryError::GridTooCoarse(n_per_axis));
    }
    let half = [b.size[0] / 2.0, b.size[1] / 2.0, b.size[2] / 2.0];
    let steps = (n_per_axis - 1) as f64;
    let grid = |h: f64, i: usize| -h + 2.0 * h * (i as f64) / steps;
    let mut out = Vec::with_capacity(6 * n_per_axis * n_per_axis);
    for axis in 0..3 {
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        for sign in [-1.0, 1.0] {
            for i in 0..n_per_axis {
                for j in 0..n_per_axis {
                    let mut local = [0.0; 3];
                    local[axis] = sign * half[axis];
                    local[a1] = grid(half[a1], i);
                    local[a2] = grid(half[a2], j);
                    out.push(b.to_world(Point3::new(local[0], local[1], local[2])));
                }
            }
        }
    }
    Ok(out)
}

fn project_rect(b: &Obb7, axis: Vec2) -> (f64, f64) {
    let (u, v) = b.axes_xy();
    let c = b.center.xy().dot(axis);
    let r = b.size[0] / 2.0 * u.dot(axis).abs() + b.size[1] / 2.0 * v.dot(axis).abs();
    (c, r)
}

/// Whether the two yaw-rotated footprints intersect (2D SAT over the four
/// edge normals).
pub fn footprints_overlap(a: &Obb7, b: &Obb7) -> bool {
    let (au, av) = a.axes_xy();
    let (bu, bv) = b.axes_xy();
    [au, av, bu, bv].into_iter().all(|axis| {
        let (ca, ra) = project_rect(a, axis);
        let (cb, rb) = project_rect(b, axis);
        (ca - cb).abs() <= ra + rb + SAT_EPS
    })
}

/// Whether the z extents intersect.
pub fn z_overlap(a: &Obb7, b: &Obb7) -> bool {
    (a.center.z - b.center.z).abs() <= (a.size[2] + b.size[2]) / 2.0 + SAT_EPS
}

/// Separating-axis overlap test for two gravity-aligned boxes.
pub fn sat_overlap(a: &Obb7, b: &Obb7) -> bool {
    z_overlap(a, b) && footprints_overlap(a, b)
}

/// Sampled inter-box distance: zero on overlap, otherwise the minimum distance
/// between face grids of both boxes.
pub fn obb_distance(a: &Obb7, b: &Obb7) -> f64 {
    obb_distance_with(a, b, DEFAULT_FACE_GRID).expect("default grid is valid")
}

/// [`obb_distance`] with an explicit face grid resolution.
pub fn obb_distance_with(a: &Obb7, b: &Obb7, n_per_axis: usize) -> Result<f64, GeometryError> {
    if sat_overlap(a, b) {
        return Ok(0.0);
    }
    let pa = sorted_by_gap(sample_face_points(a, n_per_axis)?, b);
    let pb = sorted_by_gap(sample_face_points(b, n_per_axis)?, a);
    // Same minimum as the full pairwise scan: a pair is skipped only when
    // either point's distance to the other box already exceeds the best.
    let mut best = f64::INFINITY;
    for (gp, p) in &pa {
        if *gp > best + PRUNE_SLACK {
            break;
        }
        for (gq, q) in &pb {
            if *gq > best + PRUNE_SLACK {
                break;
            }
            let d = p.distance_sq(*q);
            if d < best * best {
                best = d.sqrt();
            }
        }
    }
    Ok(best)
}

const PRUNE_SLACK: f64 = 1e-9;

/// Euclidean distance from `p` to the solid box.
pub fn point_box_distance(b: &Obb7, p: Point3) -> f64 {
    let q = b.to_local(p);
    let ex = (q.x.abs() - b.size[0] / 2.0).max(0.0);
    let ey = (q.y.abs() - b.size[1] / 2.0).max(0.0);
    let ez = (q.z.abs() - b.size[2] / 2.0).max(0.0);
    (ex * ex + ey * ey + ez * ez).sqrt()
}

fn sorted_by_gap(points: Vec<Point3>, other: &Obb7) -> Vec<(f64, Point3)> {
    let mut v: Vec<(f64, Point3)> = points
        .into_iter()
        .map(|p| (point_box_distance(other, p), p))
        .collect();
    v.sort_by(|x, y| x.0.total_cmp(&y.0));
    v
}

/// Box volume with each extent floored at 1 mm.
pub fn obb_volume(b: &Obb7) -> f64 {
    b.size.iter().map(|s| s.max(MIN_EXTENT)).product()
}
