//! The online tracking loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bev::{rasterize_bev, BevConfig};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::geom::{
    aggregate_model, crop_points_in_box, lift_to_3d, oriented_iou, project_to_bev, resample_shape, Aggregation, Box3d,
    BoxSpec, PointCloud, PoseBev, Rect,
};
use crate::harness::Tracklet;
use crate::model::Networks;
use crate::rpn2d::{build_anchor_grid, decode_and_rank};
use crate::search::{
    exhaustive_propose, kalman_propose, particle_step, GridSpec, KalmanConfig, KalmanState, ParticleConfig, ParticleSet,
};
use crate::sim3d::{similarity, LatentVec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    /// Top-`k` region proposals; `k = 1` bypasses the 3D network.
    Rpn(usize),
    Kalman(usize),
    Particle(usize),
    /// Idealised grid that contains the ground truth.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Selector {
    /// Highest cosine similarity to the model shape.
    #[default]
    Siamese,
    /// Highest IoU with the ground truth.
    OracleIou,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub search: SearchMode,
    pub aggregation: Aggregation,
    pub selector: Selector,
    pub bev: BevConfig,
    pub window_weight: f64,
    pub kalman: KalmanConfig,
    pub particle: ParticleConfig,
    pub grid: GridSpec,
    /// Proposals generated, scored and recorded per frame for later
    /// analysis; the selection still only looks at the search mode's count.
    pub record: usize,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search: SearchMode::Rpn(16),
            aggregation: Aggregation::All,
            selector: Selector::Siamese,
            bev: BevConfig::default(),
            window_weight: 0.3,
            kalman: KalmanConfig::default(),
            particle: ParticleConfig::default(),
            grid: GridSpec::default(),
            record: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub spec: BoxSpec,
    pub y_center: f64,
    pub prev_pose: PoseBev,
    pub history: Vec<PointCloud>,
    pub model_pc: PointCloud,
    pub kalman: Option<KalmanState>,
    pub particles: Option<ParticleSet>,
    last_scores: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Proposals of one frame in generation order with their 3D scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalStream {
    pub rects: Vec<Rect>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub prediction: Box3d,
    pub score: f64,
    pub candidates: usize,
    /// Set when no candidate could be scored and the first proposal was kept.
    pub fallback: bool,
    pub ms_raster: f64,
    pub ms_propose: f64,
    pub ms_rank: f64,
    pub stream: Option<ProposalStream>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackletResult {
    pub id: String,
    pub records: Vec<FrameRecord>,
    pub ground_truth: Vec<Box3d>,
}

impl TrackletResult {
    pub fn predictions(&self) -> Vec<Box3d> {
        self.records.iter().map(|r| r.prediction).collect()
    }
}

fn proposal_count(cfg: &TrackerConfig) -> Option<usize> {
    match cfg.search {
        SearchMode::Rpn(k) | SearchMode::Kalman(k) | SearchMode::Particle(k) => Some(k),
        SearchMode::Exhaustive => None,
    }
}

pub fn init(frame0: &PointCloud, gt0: &Box3d, cfg: &TrackerConfig) -> Result<TrackerState> {
    if let Some(0) = proposal_count(cfg) {
        return Err(Error::InvalidParameter("candidate count must be positive".into()));
    }
    let crop = crop_points_in_box(frame0, gt0);
    if crop.is_empty() {
        warn!("initial box encloses no points; the model starts empty");
    }
    let generated = proposal_count(cfg).unwrap_or(0).max(cfg.record);
    let particles = match cfg.search {
        SearchMode::Particle(_) => Some(ParticleSet::new(gt0.pose, generated, cfg.particle.clone())?),
        _ => None,
    };
    Ok(TrackerState {
        spec: gt0.spec,
        y_center: gt0.y_center,
        prev_pose: gt0.pose,
        history: vec![crop.clone()],
        model_pc: crop,
        kalman: matches!(cfg.search, SearchMode::Kalman(_)).then(|| KalmanState::new(gt0.pose, cfg.kalman.clone())),
        last_scores: particles.as_ref().map(|p| vec![0.0; p.len()]).unwrap_or_default(),
        particles,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Advances the tracker by one frame. `gt` is only read by the exhaustive
/// search and the oracle selector.
pub fn step(
    state: &mut TrackerState,
    nets: &Networks<f32>,
    frame: &PointCloud,
    frame_index: usize,
    gt: Option<&Box3d>,
    cfg: &TrackerConfig,
) -> Result<FrameRecord> {
    let bev = &cfg.bev;
    let t0 = Instant::now();
    let search_bev = rasterize_bev(frame, state.prev_pose, state.y_center, bev.search_extent, bev.search_px, bev)?;
    let model_bev = match cfg.search {
        SearchMode::Rpn(_) => Some(rasterize_bev(
            &state.model_pc,
            PoseBev::default(),
            0.0,
            bev.model_extent,
            bev.model_px,
            bev,
        )?),
        _ => None,
    };
    let ms_raster = ms(t0);

    let t1 = Instant::now();
    let need_gt = || gt.ok_or_else(|| Error::InvalidInput("this search mode needs the ground truth".into()));
    let select_count = proposal_count(cfg);
    let generated = select_count.unwrap_or(0).max(cfg.record);
    let mut first_scores = Vec::new();
    let proposals: Vec<Rect> = match cfg.search {
        SearchMode::Rpn(_) => {
            let model_bev = model_bev.as_ref().expect("rasterized above");
            let mf = nets.bev.embed(&nets.store, model_bev)?;
            let sf = nets.bev.embed(&nets.store, &search_bev)?;
            let out = nets.bev.rpn_forward(&nets.store, &mf, &sf)?;
            let grid = build_anchor_grid(state.prev_pose, state.spec, &search_bev);
            let ranked = decode_and_rank(&out, &grid, cfg.window_weight, generated)?;
            first_scores = ranked.iter().map(|p| p.windowed_score).collect();
            ranked.into_iter().map(|p| p.rect).collect()
        }
        SearchMode::Kalman(_) => {
            let kf = state.kalman.as_mut().expect("initialised for this mode");
            kalman_propose(kf, state.spec, generated, &mut state.rng)?
        }
        SearchMode::Particle(_) => {
            let ps = state.particles.as_ref().expect("initialised for this mode");
            let (next, rects) = particle_step(ps, &state.last_scores, state.spec, &mut state.rng)?;
            state.particles = Some(next);
            rects
        }
        SearchMode::Exhaustive => exhaustive_propose(state.prev_pose, need_gt()?.pose, state.spec, &cfg.grid),
    };
    let ms_propose = ms(t1);

    let t2 = Instant::now();
    let n_select = select_count.unwrap_or(proposals.len()).min(proposals.len());
    let n_score = n_select.max(cfg.record).min(proposals.len());
    let bypass = matches!(cfg.search, SearchMode::Rpn(1)) && cfg.record == 0;
    let needs_3d = (cfg.selector == Selector::Siamese && !bypass) || cfg.record > 0;
    let mut scores = vec![-1.0; n_score];
    let mut scored = false;
    if needs_3d && !state.model_pc.is_empty() {
        let model_shape = resample_shape(&state.model_pc, &mut state.rng)?;
        let model: LatentVec = nets.shape.encode(&nets.store, &model_shape)?;
        if model.norm() > 0.0 {
            let mut shapes = Vec::with_capacity(n_score);
            for r in &proposals[..n_score] {
                let crop = crop_points_in_box(frame, &lift_to_3d(r, state.spec, state.y_center));
                shapes.push(if crop.is_empty() { None } else { Some(resample_shape(&crop, &mut state.rng)?) });
            }
            scores = shapes
                .par_iter()
                .map(|s| match s {
                    None => Ok(-1.0),
                    Some(s) => {
                        let z = nets.shape.encode(&nets.store, s)?;
                        Ok(if z.norm() > 0.0 { similarity(&z, &model)? } else { -1.0 })
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            scored = scores[..n_select].iter().any(|&s| s > -1.0);
        }
    }
    let (best, score, fallback) = match cfg.selector {
        Selector::OracleIou => {
            let g = project_to_bev(need_gt()?);
            let mut best = 0;
            let mut best_iou = f64::NEG_INFINITY;
            for (i, r) in proposals[..n_select].iter().enumerate() {
                let iou = oriented_iou(r, &g);
                if iou > best_iou {
                    best = i;
                    best_iou = iou;
                }
            }
            (best, best_iou, false)
        }
        Selector::Siamese if matches!(cfg.search, SearchMode::Rpn(1)) => {
            (0, first_scores.first().copied().unwrap_or(0.0), false)
        }
        Selector::Siamese if scored => {
            let mut best = 0;
            for i in 1..n_select {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            (best, scores[best], false)
        }
        Selector::Siamese => (0, first_scores.first().copied().unwrap_or(-1.0), true),
    };
    let ms_rank = ms(t2);

    let winner = proposals[best];
    state.prev_pose = winner.pose;
    if let Some(kf) = state.kalman.as_mut() {
        kf.update(winner.pose);
    }
    if state.particles.is_some() {
        state.last_scores = (0..proposals.len()).map(|i| scores.get(i).copied().unwrap_or(-1.0)).collect();
    }
    let prediction = lift_to_3d(&winner, state.spec, state.y_center);
    state.history.push(crop_points_in_box(frame, &prediction));
    state.model_pc = aggregate_model(cfg.aggregation, &state.history)?;

    Ok(FrameRecord {
        frame: frame_index,
        prediction,
        score,
        candidates: n_select,
        fallback,
        ms_raster,
        ms_propose,
        ms_rank,
        stream: (cfg.record > 0).then(|| ProposalStream {
            rects: proposals[..n_score].to_vec(),
            scores: scores.clone(),
        }),
    })
}

/// Tracks through a whole tracklet from its frame-0 ground truth.
pub fn run_tracklet(nets: &Networks<f32>, tracklet: &Tracklet, cfg: &TrackerConfig) -> Result<TrackletResult> {
    if tracklet.frames.len() < 2 || tracklet.boxes.len() != tracklet.frames.len() {
        return Err(Error::InvalidInput(format!(
            "tracklet {} needs at least two labelled frames",
            tracklet.id
        )));
    }
    let mut state = init(&tracklet.frames[0], &tracklet.boxes[0], cfg)?;
    let mut records = Vec::with_capacity(tracklet.frames.len() - 1);
    for t in 1..tracklet.frames.len() {
        records.push(step(&mut state, nets, &tracklet.frames[t], t, Some(&tracklet.boxes[t]), cfg)?);
    }
    Ok(TrackletResult {
        id: tracklet.id.clone(),
        records,
        ground_truth: tracklet.boxes[1..].to_vec(),
    })
}

pub fn write_results_csv(path: &Path, results: &[TrackletResult]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "tracklet_id,frame,x,z,theta,w,h,l,score,candidates,ms_raster,ms_propose,ms_rank")?;
    for r in results {
        for f in &r.records {
            let b = &f.prediction;
            writeln!(
                buf,
                "{},{},{},{},{},{},{},{},{},{},{:.3},{:.3},{:.3}",
                r.id,
                f.frame,
                b.pose.x,
                b.pose.z,
                b.pose.theta,
                b.spec.w,
                b.spec.h,
                b.spec.l,
                f.score,
                f.candidates,
                f.ms_raster,
                f.ms_propose,
                f.ms_rank
            )?;
        }
    }
    atomic_write(path, &buf)
}
