use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_dataset, Manifest, ObjectClass, Tracklet};
use crate::error::{Error, Result};
use crate::geom::{center_distance, oriented_iou, project_to_bev, Box3d, BoxSpec, Point, PointCloud, PoseBev, Rect};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeRange {
    pub w: (f64, f64),
    pub l: (f64, f64),
    pub h: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassSizes {
    pub car: SizeRange,
    pub cyclist: SizeRange,
    pub pedestrian: SizeRange,
}

impl Default for ClassSizes {
    fn default() -> Self {
        Self {
            car: SizeRange {
                w: (1.6, 2.0),
                l: (3.8, 4.8),
                h: (1.4, 1.7),
            },
            cyclist: SizeRange {
                w: (0.5, 0.8),
                l: (1.6, 1.9),
                h: (1.6, 1.9),
            },
            pedestrian: SizeRange {
                w: (0.5, 0.8),
                l: (0.5, 1.0),
                h: (1.6, 1.9),
            },
        }
    }
}

impl ClassSizes {
    fn of(&self, class: ObjectClass) -> SizeRange {
        match class {
            ObjectClass::Car => self.car,
            ObjectClass::Cyclist => self.cyclist,
            ObjectClass::Pedestrian => self.pedestrian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_tracklets: usize,
    pub frames: usize,
    /// Classes drawn uniformly per tracklet.
    pub classes: Vec<ObjectClass>,
    pub sizes: ClassSizes,
    /// Target speed range in m/frame.
    pub speed: (f64, f64),
    /// Per-frame standard deviation of the turn-rate change, degrees.
    pub turn_noise_deg: f64,
    /// Per-coordinate Gaussian sensor noise, meters (clamped at 3σ).
    pub sensor_noise: f64,
    /// Surface returns per m² of face seen head-on at 1 m; falls off as 1/r².
    pub point_density: f64,
    /// Range of the target's mid-tracklet position from the sensor.
    pub mid_range: (f64, f64),
    /// Parked boxes placed near the target's path.
    pub distractors: usize,
    /// Small round clutter objects near the path.
    pub bushes: usize,
    /// Ground returns per m² within 5 m of the sensor; falls off as 1/r².
    pub ground_density: f64,
    pub sensor_height: f64,
    /// Half-size of the square kept around the target in each frame.
    pub frame_extent: f64,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_tracklets: 100,
            frames: 40,
            classes: vec![ObjectClass::Car],
            sizes: ClassSizes::default(),
            speed: (0.2, 1.0),
            turn_noise_deg: 0.5,
            sensor_noise: 0.02,
            point_density: 2500.0,
            mid_range: (6.0, 15.0),
            distractors: 3,
            bushes: 6,
            ground_density: 2.0,
            sensor_height: 1.73,
            frame_extent: 15.0,
            frame_rate: 10.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        let sizes = [self.sizes.car, self.sizes.cyclist, self.sizes.pedestrian];
        if !sizes.iter().all(|s| range_ok(s.w) && range_ok(s.l) && range_ok(s.h)) {
            return Err(Error::InvalidParameter("size ranges must be positive and ordered".into()));
        }
        if !range_ok(self.speed) || !range_ok(self.mid_range) {
            return Err(Error::InvalidParameter("speed and range intervals must be positive and ordered".into()));
        }
        if self.frames < 2 || self.classes.is_empty() {
            return Err(Error::InvalidParameter("need at least two frames and one class".into()));
        }
        if !(self.turn_noise_deg >= 0.0
            && self.sensor_noise >= 0.0
            && self.point_density > 0.0
            && self.ground_density >= 0.0
            && self.sensor_height > 0.0
            && self.frame_extent > 0.0
            && self.frame_rate > 0.0)
        {
            return Err(Error::InvalidParameter("scene densities, noise and extents must be positive".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

// Rounds a nonnegative expectation up or down at random.
fn stochastic_count(rng: &mut ChaCha8Rng, expected: f64) -> usize {
    let base = expected.floor();
    base as usize + usize::from(rng.random::<f64>() < expected - base)
}

struct Sampler<'a> {
    cfg: &'a SceneConfig,
    noise: Option<Normal<f64>>,
}

impl Sampler<'_> {
    fn jitter(&self, rng: &mut ChaCha8Rng) -> f64 {
        let s = self.cfg.sensor_noise;
        self.noise.map_or(0.0, |n| n.sample(rng).clamp(-3.0 * s, 3.0 * s))
    }

    /// Visible-face returns of a box; faces are inset by the noise bound so
    /// every return stays inside the box.
    fn box_surface(&self, b: &Box3d, rng: &mut ChaCha8Rng, out: &mut Vec<Point>, at_least_one: bool) {
        let inset = 3.0 * self.cfg.sensor_noise + 5e-3;
        let hl = (b.spec.l / 2.0 - inset).max(1e-3);
        let hw = (b.spec.w / 2.0 - inset).max(1e-3);
        let hh = (b.spec.h / 2.0 - inset).max(1e-3);
        // (normal in the canonical frame, face center, two half-extent axes)
        let faces: [([f64; 3], [f64; 3], [f64; 3], [f64; 3]); 5] = [
            ([1.0, 0.0, 0.0], [hl, 0.0, 0.0], [0.0, hh, 0.0], [0.0, 0.0, hw]),
            ([-1.0, 0.0, 0.0], [-hl, 0.0, 0.0], [0.0, hh, 0.0], [0.0, 0.0, hw]),
            ([0.0, 0.0, 1.0], [0.0, 0.0, hw], [hl, 0.0, 0.0], [0.0, hh, 0.0]),
            ([0.0, 0.0, -1.0], [0.0, 0.0, -hw], [hl, 0.0, 0.0], [0.0, hh, 0.0]),
            ([0.0, 1.0, 0.0], [0.0, hh, 0.0], [hl, 0.0, 0.0], [0.0, 0.0, hw]),
        ];
        let (s, c) = b.pose.theta.sin_cos();
        let to_world = |p: [f64; 3]| [b.pose.x + c * p[0] - s * p[2], b.y_center + p[1], b.pose.z + s * p[0] + c * p[2]];
        let rot = |n: [f64; 3]| [c * n[0] - s * n[2], n[1], s * n[0] + c * n[2]];
        let mut visible = Vec::new();
        for (n, center, u, v) in faces {
            let fc = to_world(center);
            let r2 = fc.iter().map(|x| x * x).sum::<f64>().max(1.0);
            let nw = rot(n);
            let cos_inc = -(nw[0] * fc[0] + nw[1] * fc[1] + nw[2] * fc[2]) / r2.sqrt();
            if cos_inc <= 0.0 {
                continue;
            }
            let area = 4.0 * u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt();
            visible.push((center, u, v, self.cfg.point_density * area * cos_inc / r2));
        }
        let before = out.len();
        for &(center, u, v, expected) in &visible {
            for _ in 0..stochastic_count(rng, expected) {
                out.push(self.face_point(center, u, v, rng, &to_world));
            }
        }
        if at_least_one && out.len() == before {
            if let Some(&(center, u, v, _)) = visible.iter().max_by(|a, b| a.3.total_cmp(&b.3)) {
                out.push(self.face_point(center, u, v, rng, &to_world));
            }
        }
    }

    fn face_point(
        &self,
        center: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        rng: &mut ChaCha8Rng,
        to_world: &impl Fn([f64; 3]) -> [f64; 3],
    ) -> Point {
        let a: f64 = rng.random_range(-1.0..1.0);
        let bb: f64 = rng.random_range(-1.0..1.0);
        let mut local: [f64; 3] = std::array::from_fn(|k| center[k] + a * u[k] + bb * v[k]);
        for x in &mut local {
            *x += self.jitter(rng);
        }
        to_world(local).map(|x| x as f32)
    }

    fn bush(&self, center: [f64; 3], radius: f64, rng: &mut ChaCha8Rng, out: &mut Vec<Point>) {
        let r2 = center.iter().map(|x| x * x).sum::<f64>().max(1.0);
        let expected = self.cfg.point_density * PI * radius * radius / r2;
        for _ in 0..stochastic_count(rng, expected) {
            let dir = loop {
                let d: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-3 && n <= 1.0 {
                    break d.map(|x| x / n);
                }
            };
            // Keep the hemisphere facing the sensor.
            let facing = dir.iter().zip(&center).map(|(a, b)| a * b).sum::<f64>() < 0.0;
            let dir = if facing { dir } else { dir.map(|x| -x) };
            out.push(std::array::from_fn(|k| (center[k] + radius * dir[k] + self.jitter(rng)) as f32));
        }
    }
}

fn target_path(cfg: &SceneConfig, spec: BoxSpec, rng: &mut ChaCha8Rng) -> Vec<Box3d> {
    let speed = uniform(rng, cfg.speed);
    let turn = Normal::new(0.0, cfg.turn_noise_deg.to_radians()).expect("validated");
    let max_rate = 5f64.to_radians();
    let mut theta = rng.random_range(-PI..PI);
    let mut rate = 0.0;
    let (mut x, mut z) = (0.0, 0.0);
    let mut poses = Vec::with_capacity(cfg.frames);
    for _ in 0..cfg.frames {
        poses.push((x, z, theta));
        rate = (rate + turn.sample(rng)).clamp(-max_rate, max_rate);
        theta += rate;
        x += speed * theta.cos();
        z += speed * theta.sin();
    }
    let (mx, mz, _) = poses[cfg.frames / 2];
    let range = uniform(rng, cfg.mid_range);
    let bearing = rng.random_range(-PI..PI);
    let (ox, oz) = (range * bearing.cos() - mx, range * bearing.sin() - mz);
    let y = -cfg.sensor_height + spec.h / 2.0;
    poses
        .into_iter()
        .map(|(x, z, t)| Box3d::new(PoseBev::new(x + ox, z + oz, t), spec, y))
        .collect()
}

fn inflate(r: &Rect, m: f64) -> Rect {
    Rect {
        pose: r.pose,
        w: r.w + 2.0 * m,
        l: r.l + 2.0 * m,
    }
}

fn random_spec(rng: &mut ChaCha8Rng, s: SizeRange) -> BoxSpec {
    BoxSpec::new(uniform(rng, s.w), uniform(rng, s.l), uniform(rng, s.h)).expect("validated ranges")
}

fn one_tracklet(cfg: &SceneConfig, index: usize, seed: u64) -> Tracklet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = cfg.classes[rng.random_range(0..cfg.classes.len())];
    let spec = random_spec(&mut rng, cfg.sizes.of(class));
    let path = target_path(cfg, spec, &mut rng);
    let footprints: Vec<Rect> = path.iter().map(|b| inflate(&project_to_bev(b), 0.5)).collect();

    let mut statics = Vec::new();
    for _ in 0..cfg.distractors {
        for _attempt in 0..50 {
            let anchor = path[rng.random_range(0..path.len())].pose;
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let (x, z) = anchor.to_world(rng.random_range(-4.0..4.0), side * rng.random_range(2.5..7.0));
            let flip = if rng.random::<bool>() { PI } else { 0.0 };
            let theta = anchor.theta + flip + rng.random_range(-0.2..0.2);
            let dspec = random_spec(&mut rng, cfg.sizes.car);
            let b = Box3d::new(PoseBev::new(x, z, theta), dspec, -cfg.sensor_height + dspec.h / 2.0);
            let fp = project_to_bev(&b);
            let clear = footprints.iter().all(|t| oriented_iou(t, &fp) == 0.0)
                && statics.iter().all(|s: &Box3d| oriented_iou(&inflate(&project_to_bev(s), 0.3), &fp) == 0.0);
            if clear {
                statics.push(b);
                break;
            }
        }
    }
    let mid = path[path.len() / 2].pose;
    let mut bushes = Vec::new();
    for _ in 0..cfg.bushes {
        for _attempt in 0..50 {
            let (x, z) = mid.to_world(rng.random_range(-15.0..15.0), rng.random_range(-10.0..10.0));
            let radius = rng.random_range(0.3..0.8);
            let clear = footprints
                .iter()
                .all(|t| center_distance(&t.pose, &PoseBev::new(x, z, 0.0)) > 0.5 * t.w.hypot(t.l) + radius + 0.5);
            if clear {
                bushes.push(([x, -cfg.sensor_height + radius, z], radius));
                break;
            }
        }
    }

    let sampler = Sampler {
        cfg,
        noise: (cfg.sensor_noise > 0.0).then(|| Normal::new(0.0, cfg.sensor_noise).expect("validated")),
    };
    let mut frames = Vec::with_capacity(path.len());
    for target in &path {
        let mut pts = Vec::new();
        let range = target.pose.x.hypot(target.pose.z);
        sampler.box_surface(target, &mut rng, &mut pts, range <= 30.0);
        for d in &statics {
            sampler.box_surface(d, &mut rng, &mut pts, false);
        }
        for &(c, r) in &bushes {
            sampler.bush(c, r, &mut rng, &mut pts);
        }
        let e = cfg.frame_extent;
        let r0 = 5.0;
        let candidates = stochastic_count(&mut rng, cfg.ground_density * 4.0 * e * e);
        for _ in 0..candidates {
            let x = target.pose.x + rng.random_range(-e..e);
            let z = target.pose.z + rng.random_range(-e..e);
            let r2 = x * x + z * z;
            if rng.random::<f64>() < (r0 * r0 / r2).min(1.0) {
                let y = -cfg.sensor_height + sampler.jitter(&mut rng);
                pts.push([x as f32, y as f32, z as f32]);
            }
        }
        pts.retain(|p| (p[0] as f64 - target.pose.x).abs() <= e && (p[2] as f64 - target.pose.z).abs() <= e);
        frames.push(PointCloud::new(pts));
    }
    Tracklet {
        id: format!("{index:04}"),
        class,
        frames,
        boxes: path,
    }
}

/// Generates tracklets in memory; the seed fixes every value.
pub fn synthesize(cfg: &SceneConfig) -> Result<Vec<Tracklet>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seeds: Vec<u64> = (0..cfg.n_tracklets).map(|_| rng.random()).collect();
    Ok(seeds.iter().enumerate().map(|(i, &s)| one_tracklet(cfg, i, s)).collect())
}

/// Generates a dataset and writes it under `dir`.
pub fn generate_synthetic(cfg: &SceneConfig, dir: &Path) -> Result<Manifest> {
    let tracklets = synthesize(cfg)?;
    write_dataset(dir, &tracklets, Some(cfg), cfg.frame_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::crop_points_in_box;

    fn small() -> SceneConfig {
        SceneConfig {
            n_tracklets: 3,
            frames: 6,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic_and_rigid() {
        let a = synthesize(&small()).unwrap();
        let b = synthesize(&small()).unwrap();
        assert_eq!(a, b);
        for t in &a {
            assert_eq!(t.frames.len(), 6);
            assert!(t.boxes.iter().all(|b| b.spec == t.boxes[0].spec && b.y_center == t.boxes[0].y_center));
        }
    }

    #[test]
    fn near_targets_have_points() {
        for t in synthesize(&small()).unwrap() {
            for (f, b) in t.frames.iter().zip(&t.boxes) {
                if b.pose.x.hypot(b.pose.z) <= 30.0 {
                    assert!(!crop_points_in_box(f, b).is_empty());
                }
            }
        }
    }
}
