//! Planar box geometry, the footprint/3D-box bijection and point-cloud utilities.
//!
//! Conventions: the ground plane is (x, z) and +y points up. A heading `theta`
//! rotates the box's length axis from +x towards +z. A box's canonical frame
//! has its origin at the box center, +x along the heading and +y up, so the
//! length `l` spans x', the width `w` spans z' and the height `h` spans y'.

use std::f64::consts::PI;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of points in every candidate and model shape fed to the 3D encoder.
pub const SHAPE_POINTS: usize = 2048;

pub type Point = [f32; 3];

/// Wraps an angle into (−π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub w: f64,
    pub l: f64,
    pub h: f64,
}

impl BoxSpec {
    pub fn new(w: f64, l: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && l > 0.0 && h > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "box dimensions must be positive, got w={w} l={l} h={h}"
            )));
        }
        Ok(Self { w, l, h })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseBev {
    pub x: f64,
    pub z: f64,
    pub theta: f64,
}

impl PoseBev {
    pub fn new(x: f64, z: f64, theta: f64) -> Self {
        Self {
            x,
            z,
            theta: normalize_angle(theta),
        }
    }

    /// Expresses a world ground-plane point in this pose's frame.
    pub fn to_local(&self, x: f64, z: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.x;
        let dz = z - self.z;
        (c * dx + s * dz, -s * dx + c * dz)
    }

    pub fn to_world(&self, xl: f64, zl: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * xl - s * zl, self.z + s * xl + c * zl)
    }
}

/// Oriented footprint of a box on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub pose: PoseBev,
    pub w: f64,
    pub l: f64,
}

impl Rect {
    pub fn new(x: f64, z: f64, theta: f64, w: f64, l: f64) -> Self {
        Self {
            pose: PoseBev::new(x, z, theta),
            w,
            l,
        }
    }

    /// Corners in counter-clockwise order (in the (x, z) plane).
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let hl = self.l / 2.0;
        let hw = self.w / 2.0;
        [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)].map(|(a, b)| {
            let (x, z) = self.pose.to_world(a, b);
            [x, z]
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Closed containment test for a ground-plane point.
    pub fn contains(&self, x: f64, z: f64) -> bool {
        let (xl, zl) = self.pose.to_local(x, z);
        xl.abs() <= self.l / 2.0 && zl.abs() <= self.w / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3d {
    pub pose: PoseBev,
    pub spec: BoxSpec,
    pub y_center: f64,
}

impl Box3d {
    pub fn new(pose: PoseBev, spec: BoxSpec, y_center: f64) -> Self {
        Self {
            pose,
            spec,
            y_center,
        }
    }

    /// The box itself expressed in its own canonical frame.
    pub fn canonical(&self) -> Self {
        Self {
            pose: PoseBev::default(),
            spec: self.spec,
            y_center: 0.0,
        }
    }
}

pub fn project_to_bev(b: &Box3d) -> Rect {
    Rect {
        pose: b.pose,
        w: b.spec.w,
        l: b.spec.l,
    }
}

/// Inverse of [`project_to_bev`]; the footprint's (w, l) are replaced by the
/// tracklet's rigid spec, so callers must pass the frame-0 spec.
pub fn lift_to_3d(rect: &Rect, spec: BoxSpec, y_center: f64) -> Box3d {
    Box3d {
        pose: rect.pose,
        spec,
        y_center,
    }
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, z0] = poly[i];
        let [x1, z1] = poly[(i + 1) % n];
        acc += x0 * z1 - x1 * z0;
    }
    0.5 * acc.abs()
}

/// Sutherland–Hodgman clipping of `subject` by the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection area of two oriented footprints.
pub fn intersection_area(a: &Rect, b: &Rect) -> f64 {
    let (dx, dz) = (a.pose.x - b.pose.x, a.pose.z - b.pose.z);
    let reach = 0.5 * (a.w.hypot(a.l) + b.w.hypot(b.l));
    if dx * dx + dz * dz > reach * reach {
        return 0.0;
    }
    shoelace(&clip_convex(&a.corners(), &b.corners()))
}

/// Intersection-over-union of two oriented footprints, in [0, 1].
pub fn oriented_iou(a: &Rect, b: &Rect) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_distance(a: &PoseBev, b: &PoseBev) -> f64 {
    (a.x - b.x).hypot(a.z - b.z)
}

/// Gaussian similarity target exp(−d²/(2σ²)).
pub fn gaussian_score(d: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    Ok((-(d * d) / (2.0 * sigma * sigma)).exp())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }
}

impl From<Vec<Point>> for PointCloud {
    fn from(points: Vec<Point>) -> Self {
        Self { points }
    }
}

/// A shape with exactly [`SHAPE_POINTS`] points in a box canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    points: Vec<Point>,
}

impl ShapeSample {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != SHAPE_POINTS {
            return Err(Error::InvalidInput(format!(
                "shape sample needs {SHAPE_POINTS} points, got {}",
                points.len()
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }
}

// Rounds to f32 without leaving the closed interval [-half, half].
fn to_f32_within(v: f64, half: f64) -> f32 {
    let mut f = v as f32;
    if f as f64 > half {
        f = f.next_down();
    } else if (f as f64) < -half {
        f = f.next_up();
    }
    f
}

/// Points inside `bx` (closed), expressed in the box's canonical frame.
pub fn crop_points_in_box(pc: &PointCloud, bx: &Box3d) -> PointCloud {
    let hl = bx.spec.l / 2.0;
    let hw = bx.spec.w / 2.0;
    let hh = bx.spec.h / 2.0;
    let (s, c) = bx.pose.theta.sin_cos();
    let points = pc
        .points
        .iter()
        .filter_map(|p| {
            let dy = p[1] as f64 - bx.y_center;
            if dy.abs() > hh {
                return None;
            }
            let dx = p[0] as f64 - bx.pose.x;
            let dz = p[2] as f64 - bx.pose.z;
            let xl = c * dx + s * dz;
            let zl = -s * dx + c * dz;
            if xl.abs() > hl || zl.abs() > hw {
                return None;
            }
            Some([
                to_f32_within(xl, hl),
                to_f32_within(dy, hh),
                to_f32_within(zl, hw),
            ])
        })
        .collect();
    PointCloud { points }
}

/// Resamples to exactly `n` points: a uniform subsample without replacement
/// when there are enough points, otherwise every input once plus uniform
/// duplicates.
pub fn resample_fixed<R: Rng + ?Sized>(pc: &PointCloud, n: usize, rng: &mut R) -> Result<Vec<Point>> {
    let m = pc.len();
    if m == 0 {
        return Err(Error::EmptyShape);
    }
    if m >= n {
        return Ok(index::sample(rng, m, n)
            .into_iter()
            .map(|i| pc.points[i])
            .collect());
    }
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(&pc.points);
    for _ in m..n {
        out.push(pc.points[rng.random_range(0..m)]);
    }
    Ok(out)
}

/// [`resample_fixed`] at the encoder's fixed size.
pub fn resample_shape<R: Rng + ?Sized>(pc: &PointCloud, rng: &mut R) -> Result<ShapeSample> {
    ShapeSample::new(resample_fixed(pc, SHAPE_POINTS, rng)?)
}

fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    let dz = a[2] as f64 - b[2] as f64;
    dx * dx + dy * dy + dz * dz
}

fn directed_chamfer(from: &[Point], to: &[Point]) -> f64 {
    from.iter()
        .map(|p| to.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum()
}

/// Symmetric Chamfer distance: the sum of both directed nearest-neighbour
/// squared-distance sums.
pub fn chamfer(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("chamfer of an empty cloud".into()));
    }
    Ok(directed_chamfer(a, b) + directed_chamfer(b, a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Aggregation {
    PrevOnly,
    FirstOnly,
    FirstAndPrev,
    #[default]
    All,
}

impl Aggregation {
    pub const ALL: [Aggregation; 4] = [
        Aggregation::PrevOnly,
        Aggregation::FirstOnly,
        Aggregation::FirstAndPrev,
        Aggregation::All,
    ];

    /// Indices of the history frames this strategy concatenates.
    pub fn frames(self, len: usize) -> Vec<usize> {
        match (self, len) {
            (_, 0) => vec![],
            (Aggregation::PrevOnly, n) => vec![n - 1],
            (Aggregation::FirstOnly, _) => vec![0],
            (Aggregation::FirstAndPrev, 1) => vec![0],
            (Aggregation::FirstAndPrev, n) => vec![0, n - 1],
            (Aggregation::All, n) => (0..n).collect(),
        }
    }
}

/// Concatenates the history frames selected by `strategy`.
pub fn aggregate_model(strategy: Aggregation, history: &[PointCloud]) -> Result<PointCloud> {
    if history.is_empty() {
        return Err(Error::InvalidInput("aggregation needs at least one frame".into()));
    }
    let points = strategy
        .frames(history.len())
        .into_iter()
        .flat_map(|i| history[i].points.iter().copied())
        .collect();
    Ok(PointCloud { points })
}
