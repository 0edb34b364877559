//! Non-learned candidate generators: constant-velocity Kalman proposals,
//! particle-filter proposals and the exhaustive grid.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{normalize_angle, BoxSpec, PoseBev, Rect};

type Mat5 = [[f64; 5]; 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KalmanConfig {
    /// Process noise variances for (x, z, θ, ẋ, ż).
    pub process_var: [f64; 5],
    /// Measurement noise variances for (x, z, θ).
    pub measurement_var: [f64; 3],
    /// Initial covariance diagonal.
    pub initial_var: [f64; 5],
}

impl Default for KalmanConfig {
    fn default() -> Self {
        let deg2 = |d: f64| d.to_radians().powi(2);
        Self {
            process_var: [0.1f64.powi(2), 0.1f64.powi(2), deg2(2.0), 0.2f64.powi(2), 0.2f64.powi(2)],
            measurement_var: [0.2f64.powi(2), 0.2f64.powi(2), deg2(3.0)],
            initial_var: [0.2f64.powi(2), 0.2f64.powi(2), deg2(3.0), 0.5f64.powi(2), 0.5f64.powi(2)],
        }
    }
}

/// Constant-velocity state `(x, z, θ, ẋ, ż)` in m, rad and m/frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: [f64; 5],
    pub cov: Mat5,
    pub config: KalmanConfig,
}

fn diag5(d: [f64; 5]) -> Mat5 {
    let mut m = [[0.0; 5]; 5];
    for i in 0..5 {
        m[i][i] = d[i];
    }
    m
}

/// Lower-triangular factor of a symmetric PSD matrix; zero pivots yield zero
/// columns instead of failing.
fn cholesky3(a: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).max(0.0).sqrt();
            } else if l[j][j] > 0.0 {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}

fn inverse3(a: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    if det.abs() < 1e-300 {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
        }
    }
    Some(inv)
}

impl KalmanState {
    pub fn new(pose: PoseBev, config: KalmanConfig) -> Self {
        Self {
            mean: [pose.x, pose.z, pose.theta, 0.0, 0.0],
            cov: diag5(config.initial_var),
            config,
        }
    }

    pub fn pose(&self) -> PoseBev {
        PoseBev::new(self.mean[0], self.mean[1], self.mean[2])
    }

    /// Constant-velocity prediction by one frame.
    pub fn predict(&mut self) {
        let m = &mut self.mean;
        m[0] += m[3];
        m[1] += m[4];
        // F = I + E03 + E14
        let p = self.cov;
        let mut fp = p;
        for j in 0..5 {
            fp[0][j] += p[3][j];
            fp[1][j] += p[4][j];
        }
        let mut fpf = fp;
        for row in fpf.iter_mut() {
            row[0] += row[3];
            row[1] += row[4];
        }
        for (i, q) in self.config.process_var.iter().enumerate() {
            fpf[i][i] += q;
        }
        self.cov = fpf;
    }

    /// Measurement update with an observed pose.
    pub fn update(&mut self, obs: PoseBev) {
        let innov = [
            obs.x - self.mean[0],
            obs.z - self.mean[1],
            normalize_angle(obs.theta - self.mean[2]),
        ];
        let mut s = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                s[i][j] = self.cov[i][j];
            }
            s[i][i] += self.config.measurement_var[i];
        }
        let Some(si) = inverse3(s) else { return };
        // K = P Hᵀ S⁻¹, with H selecting the first three states.
        let mut k = [[0.0; 3]; 5];
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|m| self.cov[i][m] * si[m][j]).sum();
            }
        }
        for (i, row) in k.iter().enumerate() {
            self.mean[i] += (0..3).map(|j| row[j] * innov[j]).sum::<f64>();
        }
        self.mean[2] = normalize_angle(self.mean[2]);
        let p = self.cov;
        for i in 0..5 {
            for j in 0..5 {
                self.cov[i][j] = p[i][j] - (0..3).map(|m| k[i][m] * p[m][j]).sum::<f64>();
            }
        }
        for i in 0..5 {
            for j in 0..i {
                let v = 0.5 * (self.cov[i][j] + self.cov[j][i]);
                self.cov[i][j] = v;
                self.cov[j][i] = v;
            }
        }
    }

    /// `count` rects: the current mean first, the rest drawn from the
    /// Gaussian over (x, z, θ).
    pub fn sample(&self, spec: BoxSpec, count: usize, rng: &mut impl Rng) -> Vec<Rect> {
        let mut block = [[0.0; 3]; 3];
        for (i, row) in block.iter_mut().enumerate() {
            row.copy_from_slice(&self.cov[i][..3]);
        }
        let l = cholesky3(block);
        let mut out = Vec::with_capacity(count);
        out.push(Rect::new(self.mean[0], self.mean[1], self.mean[2], spec.w, spec.l));
        for _ in 1..count {
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let d: [f64; 3] = std::array::from_fn(|i| (0..=i).map(|j| l[i][j] * e[j]).sum());
            out.push(Rect::new(self.mean[0] + d[0], self.mean[1] + d[1], self.mean[2] + d[2], spec.w, spec.l));
        }
        out
    }
}

/// Predicts one frame ahead and emits `count` proposals.
pub fn kalman_propose(state: &mut KalmanState, spec: BoxSpec, count: usize, rng: &mut impl Rng) -> Result<Vec<Rect>> {
    if count == 0 {
        return Err(Error::InvalidParameter("proposal count must be positive".into()));
    }
    state.predict();
    Ok(state.sample(spec, count, rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleConfig {
    pub sigma_xz: f64,
    pub sigma_theta_deg: f64,
    /// Added to every clamped score before normalising.
    pub weight_floor: f64,
}

impl Default for ParticleConfig {
    fn default() -> Self {
        Self {
            sigma_xz: 0.3,
            sigma_theta_deg: 3.0,
            weight_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    pub particles: Vec<PoseBev>,
    pub weights: Vec<f64>,
    pub config: ParticleConfig,
}

impl ParticleSet {
    /// `count` equally weighted copies of `pose`.
    pub fn new(pose: PoseBev, count: usize, config: ParticleConfig) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("particle count must be positive".into()));
        }
        Ok(Self {
            particles: vec![pose; count],
            weights: vec![1.0 / count as f64; count],
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Ancestor indices drawn by systematic resampling from normalised weights.
pub fn systematic_resample(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let n = weights.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let u = u0 + k as f64 / n as f64;
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Reweights by the previous frame's scores, resamples, diffuses and emits
/// the particles as proposals. The emitted order is shuffled so that any
/// prefix is an unbiased subsample.
pub fn particle_step(ps: &ParticleSet, scores: &[f64], spec: BoxSpec, rng: &mut impl Rng) -> Result<(ParticleSet, Vec<Rect>)> {
    if scores.len() != ps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} particles",
            scores.len(),
            ps.len()
        )));
    }
    let raw: Vec<f64> = scores.iter().map(|&s| s.max(0.0) + ps.config.weight_floor).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut ancestors = systematic_resample(&weights, rng);
    ancestors.shuffle(rng);
    let sxz = ps.config.sigma_xz;
    let sth = ps.config.sigma_theta_deg.to_radians();
    let n = ps.len();
    let particles: Vec<PoseBev> = ancestors
        .into_iter()
        .map(|a| {
            let p = ps.particles[a];
            let e: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            PoseBev::new(p.x + sxz * e[0], p.z + sxz * e[1], p.theta + sth * e[2])
        })
        .collect();
    let rects = particles.iter().map(|p| Rect { pose: *p, w: spec.w, l: spec.l }).collect();
    Ok((
        ParticleSet {
            particles,
            weights: vec![1.0 / n as f64; n],
            config: ps.config.clone(),
        },
        rects,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub xz_extent: f64,
    pub xz_step: f64,
    pub theta_extent_deg: f64,
    pub theta_step_deg: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            xz_extent: 2.0,
            xz_step: 0.25,
            theta_extent_deg: 10.0,
            theta_step_deg: 2.5,
        }
    }
}

impl GridSpec {
    fn steps(extent: f64, step: f64) -> usize {
        2 * (extent / step + 1e-9).floor() as usize + 1
    }

    /// `(n_xz, n_theta)` grid sizes.
    pub fn counts(&self) -> (usize, usize) {
        (
            Self::steps(self.xz_extent, self.xz_step),
            Self::steps(self.theta_extent_deg, self.theta_step_deg),
        )
    }
}

/// Uniform grid around `prev` in its heading frame, with `gt` appended.
pub fn exhaustive_propose(prev: PoseBev, gt: PoseBev, spec: BoxSpec, grid: &GridSpec) -> Vec<Rect> {
    let (nxz, nth) = grid.counts();
    let off = |i: usize, n: usize, step: f64| (i as f64 - (n / 2) as f64) * step;
    let mut out = Vec::with_capacity(nxz * nxz * nth + 1);
    for t in 0..nth {
        let theta = prev.theta + off(t, nth, grid.theta_step_deg).to_radians();
        for i in 0..nxz {
            for j in 0..nxz {
                let (x, z) = prev.to_world(off(i, nxz, grid.xz_step), off(j, nxz, grid.xz_step));
                out.push(Rect::new(x, z, theta, spec.w, spec.l));
            }
        }
    }
    out.push(Rect { pose: gt, w: spec.w, l: spec.l });
    out
}
