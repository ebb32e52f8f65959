//! Source-data cleaning and view selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Obb7, Point3};
use crate::ObjectId;

pub const OVEREXPOSED_INTENSITY: u8 = 245;
pub const OVEREXPOSED_FRACTION: f64 = 0.90;
/// Cameras whose optical axis is within this angle of vertical cannot resolve
/// a gravity direction in the image.
pub const DEGENERATE_TILT_DEG: f64 = 5.0;
/// Number of top-ranked views kept for object captioning.
pub const TOP_VIEWS: usize = 2;
pub const DEFAULT_SCENE_FRAME_CAP: usize = 32;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("image has zero area")]
    ZeroArea,
    #[error("buffer holds {got} values, expected {expected}")]
    BufferSize { expected: usize, got: usize },
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("camera pose rotation is not orthonormal with det +1")]
    BadPose,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

/// Rec. 601 luma, rounded.
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .round()
        .clamp(0.0, 255.0) as u8
}

impl GrayImage {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImagingError> {
        let expected = width as usize * height as usize;
        if data.len() != expected {
            return Err(ImagingError::BufferSize {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_rgb(width: u32, height: u32, rgb: &[u8]) -> Result<Self, ImagingError> {
        let expected = width as usize * height as usize * 3;
        if rgb.len() != expected {
            return Err(ImagingError::BufferSize {
                expected,
                got: rgb.len(),
            });
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| luma(p[0], p[1], p[2]))
            .collect();
        Self::new(width, height, data)
    }

    /// Loads an 8-bit grayscale or RGB(A) PNG/JPEG.
    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let img = image::open(path).map_err(|source| ImagingError::Decode {
            path: path.to_path_buf(),
            source,
        })?;
        match img {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = g.dimensions();
                Self::new(w, h, g.into_raw())
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = rgb.dimensions();
                Self::from_rgb(w, h, rgb.as_raw())
            }
        }
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "snake_case")]
pub enum DepthFormat {
    /// 16-bit PNG, millimeters, 0 = invalid.
    #[default]
    Png16Mm,
    /// Raw little-endian `f32` meters, row-major; dimensions come from the
    /// color image.
    F32Raw,
}

/// Row-major depth in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub depths: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, depths: Vec<f32>) -> Result<Self, ImagingError> {
        let expected = width as usize * height as usize;
        if depths.len() != expected {
            return Err(ImagingError::BufferSize {
                expected,
                got: depths.len(),
            });
        }
        let depths = depths
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            depths,
        })
    }

    pub fn load(path: &Path, format: DepthFormat, dims: (u32, u32)) -> Result<Self, ImagingError> {
        match format {
            DepthFormat::Png16Mm => {
                let img = image::open(path).map_err(|source| ImagingError::Decode {
                    path: path.to_path_buf(),
                    source,
                })?;
                let g = img.to_luma16();
                let (w, h) = g.dimensions();
                Self::new(
                    w,
                    h,
                    g.into_raw()
                        .into_iter()
                        .map(|mm| mm as f32 / 1000.0)
                        .collect(),
                )
            }
            DepthFormat::F32Raw => {
                let bytes = std::fs::read(path).map_err(|source| ImagingError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                let vals = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Self::new(dims.0, dims.1, vals)
            }
        }
    }

    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.depths[(y * self.width + x) as usize]
    }
}

/// Pixel box, inclusive on both ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box2 {
    pub object_id: ObjectId,
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl Box2 {
    /// Clamps to `width x height`; `None` when the box misses the image.
    pub fn clamped(self, width: u32, height: u32) -> Option<Self> {
        if width == 0 || height == 0 || self.x_min >= width || self.y_min >= height {
            return None;
        }
        let x_max = self.x_max.min(width - 1);
        let y_max = self.y_max.min(height - 1);
        (self.x_min <= x_max && self.y_min <= y_max).then_some(Self {
            x_max,
            y_max,
            ..self
        })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// A posed camera frame. `pose` is the row-major world-from-camera transform;
/// camera axes follow the x-right, y-down, z-forward convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct CameraFrame {
    pub frame_id: String,
    pub pose: [[f64; 4]; 4],
    pub intrinsics: Intrinsics,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<PathBuf>,
    #[serde(default)]
    pub depth_format: DepthFormat,
}

type Mat3 = [[f64; 3]; 3];

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

impl CameraFrame {
    pub fn rotation(&self) -> Mat3 {
        let p = &self.pose;
        [
            [p[0][0], p[0][1], p[0][2]],
            [p[1][0], p[1][1], p[1][2]],
            [p[2][0], p[2][1], p[2][2]],
        ]
    }

    pub fn translation(&self) -> Point3 {
        Point3::new(self.pose[0][3], self.pose[1][3], self.pose[2][3])
    }

    /// Checks that the rotation block is orthonormal with determinant +1.
    pub fn validate(&self) -> Result<(), ImagingError> {
        let r = self.rotation();
        let rtr = mat3_mul(&transpose(&r), &r);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                if !v.is_finite() || (v - want).abs() > 1e-6 {
                    return Err(ImagingError::BadPose);
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(ImagingError::BadPose);
        }
        Ok(())
    }

    /// World direction expressed in camera coordinates.
    pub fn dir_to_camera(&self, d: [f64; 3]) -> [f64; 3] {
        let r = self.rotation();
        [0, 1, 2].map(|j| (0..3).map(|i| r[i][j] * d[i]).sum())
    }

    pub fn point_to_camera(&self, p: Point3) -> Point3 {
        let t = self.translation();
        let c = self.dir_to_camera([p.x - t.x, p.y - t.y, p.z - t.z]);
        Point3::new(c[0], c[1], c[2])
    }

    /// Pinhole projection to `(u, v, depth)`; `None` behind the camera.
    pub fn project(&self, p: Point3) -> Option<(f64, f64, f64)> {
        let c = self.point_to_camera(p);
        if c.z <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }
}

/// Clockwise image rotation in quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "0")]
    R0,
    #[serde(rename = "90")]
    R90,
    #[serde(rename = "180")]
    R180,
    #[serde(rename = "270")]
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    fn quarter_turns(self) -> u32 {
        self.degrees() / 90
    }

    /// Image-plane direction (y down) after rotating the image clockwise.
    pub fn apply_dir(self, (x, y): (f64, f64)) -> (f64, f64) {
        (0..self.quarter_turns()).fold((x, y), |(x, y), _| (-y, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationDecision {
    pub rotation: Rotation,
    /// Set when the optical axis is too close to vertical to tell.
    pub pose_degenerate: bool,
}

/// Picks the quarter-turn that best aligns projected gravity with image down.
pub fn canonicalize_rotation(frame: &CameraFrame) -> RotationDecision {
    let g = frame.dir_to_camera([0.0, 0.0, -1.0]);
    if g[2].abs() >= DEGENERATE_TILT_DEG.to_radians().cos() {
        return RotationDecision {
            rotation: Rotation::R0,
            pose_degenerate: true,
        };
    }
    let n = g[0].hypot(g[1]);
    let dir = (g[0] / n, g[1] / n);
    let mut best = (Rotation::R0, f64::MIN);
    for r in Rotation::ALL {
        // Cosine to image down (0, 1); ties keep the smaller rotation.
        let score = r.apply_dir(dir).1;
        if score > best.1 + 1e-12 {
            best = (r, score);
        }
    }
    RotationDecision {
        rotation: best.0,
        pose_degenerate: false,
    }
}

/// The frame as seen after rotating its `width x height` image clockwise.
pub fn rotate_frame(
    frame: &CameraFrame,
    rotation: Rotation,
    width: u32,
    height: u32,
) -> CameraFrame {
    let mut out = frame.clone();
    let (mut w, mut h) = (width as f64, height as f64);
    for _ in 0..rotation.quarter_turns() {
        // new camera axes: x' = -y, y' = x, z' = z, so R' = R * M^T.
        let r = out.rotation();
        let m_t: Mat3 = [[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let r2 = mat3_mul(&r, &m_t);
        for i in 0..3 {
            for j in 0..3 {
                out.pose[i][j] = r2[i][j];
            }
        }
        let k = out.intrinsics;
        out.intrinsics = Intrinsics {
            fx: k.fy,
            fy: k.fx,
            cx: (h - 1.0) - k.cy,
            cy: k.cx,
        };
        std::mem::swap(&mut w, &mut h);
    }
    out
}

/// Rotates an image clockwise.
pub fn rotate_gray(img: &GrayImage, rotation: Rotation) -> GrayImage {
    let mut cur = img.clone();
    for _ in 0..rotation.quarter_turns() {
        let (w, h) = (cur.width, cur.height);
        let mut data = vec![0u8; cur.data.len()];
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (h - 1 - y, x);
                data[(ny * h + nx) as usize] = cur.data[(y * w + x) as usize];
            }
        }
        cur = GrayImage {
            width: h,
            height: w,
            data,
        };
    }
    cur
}

/// True iff strictly more than `frac_thresh` of the pixels exceed
/// `intensity_thresh`.
pub fn is_overexposed(
    img: &GrayImage,
    intensity_thresh: u8,
    frac_thresh: f64,
) -> Result<bool, ImagingError> {
    if img.data.is_empty() {
        return Err(ImagingError::ZeroArea);
    }
    let bright = img.data.iter().filter(|&&v| v > intensity_thresh).count();
    Ok(bright as f64 / img.data.len() as f64 > frac_thresh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<Option<ObjectId>>,
    /// Boxes without a single valid depth pixel; painted as farthest.
    pub no_depth: Vec<ObjectId>,
}

impl LabelMap {
    pub fn at(&self, x: u32, y: u32) -> Option<ObjectId> {
        self.labels[(y * self.width + x) as usize]
    }
}

/// Paints boxes far-to-near by mean valid depth so nearer boxes cover farther
/// ones.
pub fn depth_label_map(boxes: &[Box2], depth: &DepthMap) -> LabelMap {
    let mut keyed: Vec<(f64, ObjectId, Box2)> = Vec::new();
    let mut no_depth = Vec::new();
    for b in boxes {
        let Some(b) = b.clamped(depth.width, depth.height) else {
            continue;
        };
        let (mut sum, mut n) = (0.0f64, 0usize);
        for y in b.y_min..=b.y_max {
            for x in b.x_min..=b.x_max {
                let d = depth.at(x, y);
                if d > 0.0 {
                    sum += d as f64;
                    n += 1;
                }
            }
        }
        let mean = if n == 0 {
            no_depth.push(b.object_id);
            f64::INFINITY
        } else {
            sum / n as f64
        };
        keyed.push((mean, b.object_id, b));
    }
    // Farthest first; equal depths paint in id order.
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut labels = vec![None; depth.width as usize * depth.height as usize];
    for (_, id, b) in &keyed {
        for y in b.y_min..=b.y_max {
            for x in b.x_min..=b.x_max {
                labels[(y * depth.width + x) as usize] = Some(*id);
            }
        }
    }
    no_depth.sort();
    LabelMap {
        width: depth.width,
        height: depth.height,
        labels,
        no_depth,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
pub struct PoseClusterParams {
    /// Distance above which a pose starts a new cluster.
    pub threshold: f64,
    /// Meters per radian of geodesic rotation.
    pub lambda: f64,
}

impl Default for PoseClusterParams {
    fn default() -> Self {
        Self {
            threshold: 0.25,
            lambda: 0.5,
        }
    }
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle(a: &CameraFrame, b: &CameraFrame) -> f64 {
    let r = mat3_mul(&transpose(&a.rotation()), &b.rotation());
    let tr = r[0][0] + r[1][1] + r[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn pose_distance(a: &CameraFrame, b: &CameraFrame, lambda: f64) -> f64 {
    a.translation().distance(b.translation()) + lambda * rotation_angle(a, b)
}

/// Frame subsampling. Video sequences are sampled at evenly spaced indices;
/// other sequences are clustered greedily by pose and one representative per
/// cluster is kept. Returns sorted frame indices.
pub fn sample_frames(
    frames: &[CameraFrame],
    is_video: bool,
    target: usize,
    params: &PoseClusterParams,
) -> Vec<usize> {
    let n = frames.len();
    if n == 0 || target == 0 {
        return Vec::new();
    }
    if is_video {
        if target >= n {
            return (0..n).collect();
        }
        if target == 1 {
            return vec![0];
        }
        return (0..target).map(|i| i * (n - 1) / (target - 1)).collect();
    }
    let mut reps: Vec<usize> = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let nearest = reps
            .iter()
            .map(|&r| pose_distance(&frames[r], f, params.lambda))
            .fold(f64::INFINITY, f64::min);
        if nearest > params.threshold {
            reps.push(i);
        }
    }
    reps.truncate(target);
    reps
}

/// Greedy max-coverage frame selection over visible object sets.
pub fn max_coverage_frames(frames: &[(String, BTreeSet<ObjectId>)], cap: usize) -> Vec<String> {
    let mut order: Vec<&(String, BTreeSet<ObjectId>)> = frames.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    let mut covered: BTreeSet<ObjectId> = BTreeSet::new();
    let mut picked: Vec<String> = Vec::new();
    let mut used = vec![false; order.len()];
    while picked.len() < cap {
        let mut best: Option<(usize, usize)> = None;
        for (i, (_, ids)) in order.iter().enumerate() {
            if used[i] {
                continue;
            }
            let gain = ids.difference(&covered).count();
            if gain > 0 && best.map_or(true, |(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else { break };
        used[i] = true;
        covered.extend(order[i].1.iter().copied());
        picked.push(order[i].0.clone());
    }
    picked
}

/// Per-frame visibility summary of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewStat {
    pub frame_id: String,
    /// Projected object center, pixels.
    pub center: (f64, f64),
    pub area_ratio: f64,
    pub image_size: (u32, u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedView {
    pub frame_id: String,
    pub score: f64,
}

pub const DEFAULT_VIEW_BETA: f64 = 0.5;

/// Ranks views by `area_ratio - beta * center_distance / half_diagonal`,
/// best first. Frames where the object is invisible are dropped.
pub fn rank_object_views(stats: &[ViewStat], beta: f64) -> Vec<RankedView> {
    let mut out: Vec<RankedView> = stats
        .iter()
        .filter(|s| s.area_ratio > 0.0)
        .map(|s| {
            let (w, h) = (s.image_size.0 as f64, s.image_size.1 as f64);
            let half_diag = (w.hypot(h) / 2.0).max(f64::MIN_POSITIVE);
            let dist = (s.center.0 - w / 2.0).hypot(s.center.1 - h / 2.0);
            RankedView {
                frame_id: s.frame_id.clone(),
                score: s.area_ratio - beta * dist / half_diag,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.frame_id.cmp(&b.frame_id))
    });
    out
}

/// Depth agreement required for a projected point to count as visible.
pub const VISIBILITY_DEPTH_TOL: f64 = 0.05;

/// Fraction of an object's labeled points that land in the image and, when a
/// depth map is given, agree with it within [`VISIBILITY_DEPTH_TOL`].
pub fn visible_ratio(
    points: &[Point3],
    frame: &CameraFrame,
    image_size: (u32, u32),
    depth: Option<&DepthMap>,
) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (w, h) = image_size;
    let visible = points
        .iter()
        .filter(|p| {
            let Some((u, v, z)) = frame.project(**p) else {
                return false;
            };
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                return false;
            }
            match depth {
                None => true,
                Some(d) => {
                    let (x, y) = (u as u32, v as u32);
                    if x >= d.width || y >= d.height {
                        return false;
                    }
                    let dv = d.at(x, y) as f64;
                    dv > 0.0 && (z - dv).abs() <= VISIBILITY_DEPTH_TOL
                }
            }
        })
        .count();
    visible as f64 / points.len() as f64
}

/// Pixel bounding box of a projected 3D box, clamped to the image.
pub fn projected_box(
    frame: &CameraFrame,
    obb: &Obb7,
    id: ObjectId,
    image_size: (u32, u32),
) -> Option<Box2> {
    let pts: Vec<(f64, f64)> = obb
        .corners()
        .iter()
        .filter_map(|c| frame.project(*c).map(|(u, v, _)| (u, v)))
        .collect();
    if pts.len() < 8 {
        return None;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for (u, v) in pts {
        x0 = x0.min(u);
        y0 = y0.min(v);
        x1 = x1.max(u);
        y1 = y1.max(v);
    }
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    if x1 < 0.0 || y1 < 0.0 || x0 >= w || y0 >= h {
        return None;
    }
    Box2 {
        object_id: id,
        x_min: x0.max(0.0) as u32,
        y_min: y0.max(0.0) as u32,
        x_max: x1.min(w - 1.0).max(0.0) as u32,
        y_max: y1.min(h - 1.0).max(0.0) as u32,
    }
    .clamped(image_size.0, image_size.1)
}

/// Draws box outlines into an RGB copy of `img`.
pub fn draw_boxes(img: &GrayImage, boxes: &[(Box2, [u8; 3])]) -> image::RgbImage {
    let mut out = image::RgbImage::from_fn(img.width, img.height, |x, y| {
        let v = img.data[(y * img.width + x) as usize];
        image::Rgb([v, v, v])
    });
    for (b, color) in boxes {
        let Some(b) = b.clamped(img.width, img.height) else {
            continue;
        };
        for x in b.x_min..=b.x_max {
            out.put_pixel(x, b.y_min, image::Rgb(*color));
            out.put_pixel(x, b.y_max, image::Rgb(*color));
        }
        for y in b.y_min..=b.y_max {
            out.put_pixel(b.x_min, y, image::Rgb(*color));
            out.put_pixel(b.x_max, y, image::Rgb(*color));
        }
    }
    out
}

/// Visible-ratio table: frame id → object id → ratio.
pub type VisibilityTable = BTreeMap<String, BTreeMap<ObjectId, f64>>;

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(vals: &[u8]) -> GrayImage {
        GrayImage::new(vals.len() as u32, 1, vals.to_vec()).unwrap()
    }

    pub(crate) fn frame_from_rot(id: &str, r: Mat3, t: [f64; 3]) -> CameraFrame {
        let mut pose = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                pose[i][j] = r[i][j];
            }
            pose[i][3] = t[i];
        }
        pose[3][3] = 1.0;
        CameraFrame {
            frame_id: id.into(),
            pose,
            intrinsics: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 32.0,
                cy: 24.0,
            },
            image: PathBuf::from(format!("{id}.png")),
            depth: None,
            depth_format: DepthFormat::Png16Mm,
        }
    }

    /// Camera looking along world +y, upright (camera y = world -z).
    fn upright() -> Mat3 {
        // columns: camera x, y, z axes in world coordinates
        [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]
    }

    fn roll(r: Mat3, angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        let rz: Mat3 = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        mat3_mul(&r, &rz)
    }

    #[test]
    fn overexposure_thresholds_are_strict() {
        assert!(is_overexposed(&gray(&[255; 10]), 245, 0.9).unwrap());
        assert!(!is_overexposed(&gray(&[128; 10]), 245, 0.9).unwrap());
        let mut v = vec![0u8; 100];
        v[..90].fill(255);
        assert!(!is_overexposed(&gray(&v), 245, 0.9).unwrap());
        v[90] = 255;
        assert!(is_overexposed(&gray(&v), 245, 0.9).unwrap());
        // 245 itself does not exceed the threshold.
        assert!(!is_overexposed(&gray(&[245; 10]), 245, 0.9).unwrap());
        let empty = GrayImage {
            width: 0,
            height: 0,
            data: vec![],
        };
        assert!(matches!(
            is_overexposed(&empty, 245, 0.9),
            Err(ImagingError::ZeroArea)
        ));
    }

    #[test]
    fn luma_weights() {
        assert_eq!(luma(255, 255, 255), 255);
        assert_eq!(luma(255, 0, 0), 76);
        assert_eq!(luma(0, 255, 0), 150);
        assert_eq!(luma(0, 0, 255), 29);
    }

    #[test]
    fn upright_camera_needs_no_rotation() {
        let f = frame_from_rot("a", upright(), [0.0; 3]);
        f.validate().unwrap();
        let d = canonicalize_rotation(&f);
        assert_eq!(d.rotation, Rotation::R0);
        assert!(!d.pose_degenerate);
    }

    #[test]
    fn rolled_camera_is_restored() {
        for (angle, _) in [(90f64, ()), (-90.0, ()), (180.0, ())] {
            let f = frame_from_rot("a", roll(upright(), angle.to_radians()), [0.0; 3]);
            let d = canonicalize_rotation(&f);
            assert_ne!(d.rotation, Rotation::R0);
            let fixed = rotate_frame(&f, d.rotation, 64, 48);
            fixed.validate().unwrap();
            assert_eq!(canonicalize_rotation(&fixed).rotation, Rotation::R0);
        }
    }

    #[test]
    fn downward_camera_is_degenerate() {
        // optical axis = world -z
        let r: Mat3 = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        let d = canonicalize_rotation(&frame_from_rot("a", r, [0.0; 3]));
        assert_eq!(d.rotation, Rotation::R0);
        assert!(d.pose_degenerate);
    }

    #[test]
    fn rotate_frame_keeps_projections_consistent() {
        let f = frame_from_rot("a", upright(), [0.0; 3]);
        let p = Point3::new(0.3, 2.0, 0.1);
        let (u, v, _) = f.project(p).unwrap();
        let g = rotate_frame(&f, Rotation::R90, 64, 48);
        let (u2, v2, _) = g.project(p).unwrap();
        // clockwise quarter turn: (u, v) -> (h - 1 - v, u)
        assert!((u2 - (47.0 - v)).abs() < 1e-9);
        assert!((v2 - u).abs() < 1e-9);
        let img = GrayImage::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let r = rotate_gray(&img, Rotation::R90);
        assert_eq!((r.width, r.height), (2, 3));
        assert_eq!(r.data, vec![4, 1, 5, 2, 6, 3]);
    }

    #[test]
    fn bad_pose_rejected() {
        let r: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(frame_from_rot("a", r, [0.0; 3]).validate().is_err());
    }

    fn depth(w: u32, h: u32, v: f32) -> DepthMap {
        DepthMap::new(w, h, vec![v; (w * h) as usize]).unwrap()
    }

    fn b2(id: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Box2 {
        Box2 {
            object_id: ObjectId(id),
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        }
    }

    #[test]
    fn label_map_single_and_disjoint() {
        let d = depth(10, 10, 2.0);
        let m = depth_label_map(&[b2(1, 0, 0, 2, 2)], &d);
        assert_eq!(m.at(1, 1), Some(ObjectId(1)));
        assert_eq!(m.at(5, 5), None);
        let m = depth_label_map(&[b2(1, 0, 0, 2, 2), b2(2, 5, 5, 6, 6)], &d);
        assert_eq!(m.at(0, 0), Some(ObjectId(1)));
        assert_eq!(m.at(6, 6), Some(ObjectId(2)));
    }

    #[test]
    fn nearer_box_wins_overlap() {
        let mut vals = vec![0.0f32; 100];
        for y in 0..10 {
            for x in 0..10 {
                vals[y * 10 + x] = if x >= 4 { 1.5 } else { 3.0 };
            }
        }
        let d = DepthMap::new(10, 10, vals).unwrap();
        // box 7 covers x 0..=5 (mostly 3 m), box 8 covers x 4..=9 (1.5 m)
        let far = b2(7, 0, 0, 3, 9);
        let near = b2(8, 4, 0, 9, 9);
        let wide_far = Box2 { x_max: 5, ..far };
        let m = depth_label_map(&[near, wide_far], &d);
        assert_eq!(m.at(5, 3), Some(ObjectId(8)));
        assert_eq!(m.at(1, 3), Some(ObjectId(7)));
    }

    #[test]
    fn box_without_depth_is_painted_first() {
        let mut vals = vec![2.0f32; 100];
        for y in 0..3 {
            for x in 0..3 {
                vals[y * 10 + x] = 0.0;
            }
        }
        let d = DepthMap::new(10, 10, vals).unwrap();
        let m = depth_label_map(&[b2(2, 0, 0, 4, 4), b2(1, 0, 0, 2, 2)], &d);
        assert_eq!(m.no_depth, vec![ObjectId(1)]);
        assert_eq!(m.at(1, 1), Some(ObjectId(2)));
    }

    #[test]
    fn video_sampling_is_uniform() {
        let frames: Vec<CameraFrame> = (0..100)
            .map(|i| frame_from_rot(&format!("{i}"), upright(), [0.0; 3]))
            .collect();
        let idx = sample_frames(&frames, true, 10, &PoseClusterParams::default());
        assert_eq!(idx, vec![0, 11, 22, 33, 44, 55, 66, 77, 88, 99]);
        assert_eq!(
            sample_frames(&frames[..3], true, 10, &Default::default()),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn pose_clustering() {
        let same: Vec<CameraFrame> = (0..3)
            .map(|i| frame_from_rot(&format!("{i}"), upright(), [0.0; 3]))
            .collect();
        assert_eq!(
            sample_frames(&same, false, 10, &Default::default()),
            vec![0]
        );
        let line: Vec<CameraFrame> = (0..4)
            .map(|i| frame_from_rot(&format!("{i}"), upright(), [i as f64, 0.0, 0.0]))
            .collect();
        let p = PoseClusterParams {
            threshold: 0.5,
            lambda: 0.5,
        };
        assert_eq!(sample_frames(&line, false, 10, &p), vec![0, 1, 2, 3]);
        assert_eq!(sample_frames(&line, false, 2, &p), vec![0, 1]);
    }

    fn ids(v: &[u32]) -> BTreeSet<ObjectId> {
        v.iter().map(|&i| ObjectId(i)).collect()
    }

    #[test]
    fn max_coverage_examples() {
        let frames = vec![
            ("A".to_string(), ids(&[1, 2])),
            ("B".to_string(), ids(&[2])),
            ("C".to_string(), ids(&[3])),
        ];
        assert_eq!(max_coverage_frames(&frames, 2), vec!["A", "C"]);
        let same = vec![
            ("x".to_string(), ids(&[1, 2])),
            ("y".to_string(), ids(&[1, 2])),
        ];
        assert_eq!(max_coverage_frames(&same, 5), vec!["x"]);
    }

    fn stat(id: &str, center: (f64, f64), ratio: f64) -> ViewStat {
        ViewStat {
            frame_id: id.into(),
            center,
            area_ratio: ratio,
            image_size: (64, 48),
        }
    }

    #[test]
    fn view_ranking() {
        let r = rank_object_views(&[stat("a", (32.0, 24.0), 0.8)], 0.5);
        assert_eq!(r.len(), 1);
        assert!((r[0].score - 0.8).abs() < 1e-12);
        let r = rank_object_views(
            &[
                stat("corner", (0.0, 0.0), 0.5),
                stat("mid", (32.0, 24.0), 0.5),
            ],
            0.5,
        );
        assert_eq!(r[0].frame_id, "mid");
        let r = rank_object_views(
            &[
                stat("corner", (0.0, 0.0), 0.9),
                stat("mid", (32.0, 24.0), 0.5),
            ],
            0.5,
        );
        assert_eq!(r[0].frame_id, "mid");
        assert!((r[1].score - 0.4).abs() < 1e-12);
        assert!(rank_object_views(&[stat("x", (1.0, 1.0), 0.0)], 0.5).is_empty());
    }

    #[test]
    fn visibility_uses_depth() {
        let f = frame_from_rot("a", upright(), [0.0; 3]);
        let pts = vec![Point3::new(0.0, 2.0, 0.0), Point3::new(0.0, 2.0, 0.05)];
        assert_eq!(visible_ratio(&pts, &f, (64, 48), None), 1.0);
        let occluder = depth(64, 48, 1.0);
        assert_eq!(visible_ratio(&pts, &f, (64, 48), Some(&occluder)), 0.0);
        let agree = depth(64, 48, 2.0);
        assert_eq!(visible_ratio(&pts, &f, (64, 48), Some(&agree)), 1.0);
    }
}
