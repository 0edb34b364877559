//! Anchor sampling, the four training losses and the training loop.

use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bev::{rasterize_bev, BevConfig, BevImage};
use crate::error::{Error, Result};
use crate::fsutil::atomic_write;
use crate::geom::{
    center_distance, crop_points_in_box, gaussian_score, lift_to_3d, oriented_iou, project_to_bev, resample_fixed,
    resample_shape, Point, PointCloud, PoseBev, Rect, ShapeSample, SHAPE_POINTS,
};
use crate::harness::Tracklet;
use crate::model::{NetConfig, Networks};
use crate::net::{bce, bce_logit_grad, cosine_similarity, sgd_step, smooth_l1, PlateauSchedule, Scalar};
use crate::rpn2d::{build_anchor_grid, AnchorGrid, RpnOutput};
use crate::sim3d::LatentVec;

pub const BATCH_ANCHORS: usize = 48;
pub const MAX_POSITIVES: usize = 16;
pub const MID_NEGATIVES: usize = 16;
const SPLIT_SALT: u64 = 0x5eed_0005;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub tr: f64,
    pub comp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1e-2,
            reg: 1.0,
            tr: 1e-2,
            comp: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.reg, self.tr, self.comp].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParameter("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    MidNegative,
    ZeroNegative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorEntry {
    pub index: usize,
    pub label: AnchorLabel,
    /// Regression target; zero for negatives.
    pub target: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBatch {
    pub entries: Vec<AnchorEntry>,
}

impl AnchorBatch {
    pub fn num_positive(&self) -> usize {
        self.entries.iter().filter(|e| e.label == AnchorLabel::Positive).count()
    }
}

fn subsample<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() <= n {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// Samples 48 anchors: up to 16 with IoU in (0.5, 1], up to 16 in (0, 0.5]
/// and the rest from anchors that do not overlap the ground truth.
pub fn select_training_anchors<R: Rng + ?Sized>(grid: &AnchorGrid, gt: &Rect, rng: &mut R) -> Result<AnchorBatch> {
    let mut pos = Vec::new();
    let mut mid = Vec::new();
    let mut zero = Vec::new();
    for (i, a) in grid.anchors.iter().enumerate() {
        let iou = oriented_iou(a, gt);
        if iou > 0.5 {
            pos.push(i);
        } else if iou > 0.0 {
            mid.push(i);
        } else {
            zero.push(i);
        }
    }
    let pos = subsample(&pos, MAX_POSITIVES, rng);
    let mid = subsample(&mid, MID_NEGATIVES, rng);
    let rest = BATCH_ANCHORS - pos.len() - mid.len();
    if zero.len() < rest {
        return Err(Error::InvalidInput(format!(
            "only {} anchors available for a batch of {BATCH_ANCHORS}",
            pos.len() + mid.len() + zero.len()
        )));
    }
    let zero = subsample(&zero, rest, rng);
    let mut entries = Vec::with_capacity(BATCH_ANCHORS);
    entries.extend(pos.into_iter().map(|i| AnchorEntry {
        index: i,
        label: AnchorLabel::Positive,
        target: grid.encode(i, gt),
    }));
    for (ids, label) in [(mid, AnchorLabel::MidNegative), (zero, AnchorLabel::ZeroNegative)] {
        entries.extend(ids.into_iter().map(|i| AnchorEntry {
            index: i,
            label,
            target: [0.0, 0.0],
        }));
    }
    Ok(AnchorBatch { entries })
}

/// RPN losses with their gradients on the logits and deltas of every anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnLoss {
    pub l_cls: f64,
    pub l_reg: f64,
    pub dlogits: Vec<f64>,
    pub dreg: Vec<[f64; 2]>,
}

/// Mean BCE over the batch and Smooth-L1 over the positives, halved and
/// averaged.
pub fn rpn_loss(out: &RpnOutput, batch: &AnchorBatch) -> RpnLoss {
    let n = out.cls.len();
    let nt = batch.entries.len() as f64;
    let np = batch.num_positive();
    let mut loss = RpnLoss {
        l_cls: 0.0,
        l_reg: 0.0,
        dlogits: vec![0.0; n],
        dreg: vec![[0.0, 0.0]; n],
    };
    for e in &batch.entries {
        let p = out.cls[e.index];
        let t = if e.label == AnchorLabel::Positive { 1.0 } else { 0.0 };
        loss.l_cls += bce(p, t) / nt;
        loss.dlogits[e.index] += bce_logit_grad(p, t) / nt;
        if e.label == AnchorLabel::Positive {
            let norm = 2.0 * np as f64;
            for k in 0..2 {
                let (v, g) = smooth_l1(out.reg[e.index][k] - e.target[k]);
                loss.l_reg += v / norm;
                loss.dreg[e.index][k] += g / norm;
            }
        }
    }
    loss
}

/// Mean squared residual between cosine similarities and their targets,
/// with gradients on each candidate latent and the model latent. Candidates
/// given as `None` are left out of the mean.
pub fn tracking_loss_latent(
    candidates: &[Option<LatentVec>],
    model: &LatentVec,
    targets: &[f64],
) -> Result<(f64, Vec<Option<Vec<f64>>>, Vec<f64>)> {
    if candidates.len() != targets.len() {
        return Err(Error::ShapeMismatch("one target per candidate".into()));
    }
    let used = candidates.iter().filter(|c| c.is_some()).count();
    let mut dmodel = vec![0.0; model.0.len()];
    if used == 0 {
        return Ok((0.0, vec![None; candidates.len()], dmodel));
    }
    let mut loss = 0.0;
    let mut dcands = Vec::with_capacity(candidates.len());
    for (c, &rho) in candidates.iter().zip(targets) {
        let Some(u) = c else {
            dcands.push(None);
            continue;
        };
        let (cos, du, dv) = cosine_similarity(&u.0, &model.0)?;
        let r = cos - rho;
        loss += r * r / used as f64;
        let s = 2.0 * r / used as f64;
        dcands.push(Some(du.iter().map(|g| s * g).collect()));
        dmodel.iter_mut().zip(&dv).for_each(|(a, g)| *a += s * g);
    }
    Ok((loss, dcands, dmodel))
}

/// Tracking loss of candidate shapes cropped at `rects` against the model
/// shape, with Gaussian targets from the distance to `gt`.
pub fn tracking_loss<T: Scalar>(
    nets: &Networks<T>,
    candidates: &[Option<ShapeSample>],
    model: &ShapeSample,
    rects: &[Rect],
    gt: &Rect,
    sigma: f64,
) -> Result<f64> {
    if candidates.len() != rects.len() {
        return Err(Error::ShapeMismatch("one rect per candidate".into()));
    }
    let v = nets.shape.encode(&nets.store, model)?;
    let latents = candidates
        .iter()
        .map(|c| c.as_ref().map(|s| nets.shape.encode(&nets.store, s)).transpose())
        .collect::<Result<Vec<_>>>()?;
    let targets = rects
        .iter()
        .map(|r| gaussian_score(center_distance(&r.pose, &gt.pose), sigma))
        .collect::<Result<Vec<_>>>()?;
    Ok(tracking_loss_latent(&latents, &v, &targets)?.0)
}

/// Chamfer distance between the reconstruction of `model` and `target`;
/// `None` when the target is empty.
pub fn completion_loss<T: Scalar>(nets: &Networks<T>, model: &ShapeSample, target: &PointCloud) -> Result<Option<f64>> {
    if target.is_empty() {
        warn!("empty completion target; skipping the completion term");
        return Ok(None);
    }
    let z = nets.shape.encode(&nets.store, model)?;
    let (flat, _) = nets.shape.decode_with_cache(&nets.store, &z)?;
    Ok(Some(chamfer_with_grad(&flat, &target.points)?.0))
}

/// Chamfer distance between a flat `3·M` prediction and a target cloud,
/// with its gradient on the prediction.
pub fn chamfer_with_grad(pred: &[f64], target: &[Point]) -> Result<(f64, Vec<f64>)> {
    if pred.is_empty() || target.is_empty() || pred.len() % 3 != 0 {
        return Err(Error::InvalidInput("chamfer needs two non-empty clouds".into()));
    }
    let m = pred.len() / 3;
    let tgt: Vec<[f64; 3]> = target.iter().map(|p| p.map(|v| v as f64)).collect();
    let mut best_pred = vec![(f64::INFINITY, 0usize); m];
    let mut best_tgt = vec![(f64::INFINITY, 0usize); tgt.len()];
    for (i, bp) in best_pred.iter_mut().enumerate() {
        let a = &pred[3 * i..3 * i + 3];
        for (j, (b, bt)) in tgt.iter().zip(best_tgt.iter_mut()).enumerate() {
            let d = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
            if d < bp.0 {
                *bp = (d, j);
            }
            if d < bt.0 {
                *bt = (d, i);
            }
        }
    }
    let mut grad = vec![0.0; pred.len()];
    let mut loss = 0.0;
    for (i, &(d, j)) in best_pred.iter().enumerate() {
        loss += d;
        for k in 0..3 {
            grad[3 * i + k] += 2.0 * (pred[3 * i + k] - tgt[j][k]);
        }
    }
    for (j, &(d, i)) in best_tgt.iter().enumerate() {
        loss += d;
        for k in 0..3 {
            grad[3 * i + k] += 2.0 * (pred[3 * i + k] - tgt[j][k]);
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_tr: f64,
    pub l_comp: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    w.cls * parts.l_cls + w.reg * parts.l_reg + w.tr * parts.l_tr + w.comp * parts.l_comp
}

/// Everything one training step needs, independent of the network weights.
#[derive(Debug, Clone)]
pub struct Example {
    pub model_bev: BevImage,
    pub search_bev: BevImage,
    pub grid: AnchorGrid,
    pub gt: Rect,
    pub batch: AnchorBatch,
    /// Shapes cropped at the batch anchors; `None` for empty crops.
    pub candidates: Vec<Option<ShapeSample>>,
    /// Gaussian similarity target of each candidate.
    pub targets: Vec<f64>,
    /// Absent when no ground-truth points have been seen yet.
    pub model_shape: Option<ShapeSample>,
    /// Completion target; empty disables the completion term.
    pub completion_target: Vec<Point>,
}

/// Ground-truth crops of a tracklet, shared by all its examples.
#[derive(Debug, Clone)]
pub struct TrackletCrops {
    pub crops: Vec<PointCloud>,
}

impl TrackletCrops {
    pub fn new(t: &Tracklet) -> Self {
        Self {
            crops: t.frames.iter().zip(&t.boxes).map(|(f, b)| crop_points_in_box(f, b)).collect(),
        }
    }

    fn concat(&self, upto: usize) -> PointCloud {
        PointCloud::new(self.crops[..upto].iter().flat_map(|c| c.points.iter().copied()).collect())
    }
}

/// Gaussian pose perturbation (standard deviations in metres and radians).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseJitter {
    pub position: f64,
    pub heading: f64,
}

impl PoseJitter {
    pub fn is_zero(&self) -> bool {
        self.position == 0.0 && self.heading == 0.0
    }

    pub fn apply<R: Rng + ?Sized>(&self, p: PoseBev, rng: &mut R) -> PoseBev {
        if self.is_zero() {
            return p;
        }
        let mut n = || rng.sample::<f64, _>(StandardNormal);
        let (dx, dz, dt) = (n(), n(), n());
        PoseBev::new(p.x + self.position * dx, p.z + self.position * dz, p.theta + self.heading * dt)
    }
}

/// Perturbations that imitate tracking error: `search` moves the search
/// centre, `model` moves the boxes the model cloud is cropped with (frame 0
/// stays exact).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Jitter {
    pub search: PoseJitter,
    pub model: PoseJitter,
}

/// Builds the example for frame `t` (≥ 1), searching around the ground
/// truth of frame `t − 1`.
pub fn prepare_example<R: Rng + ?Sized>(
    tracklet: &Tracklet,
    crops: &TrackletCrops,
    t: usize,
    bev: &BevConfig,
    sigma: f64,
    jitter: &Jitter,
    rng: &mut R,
) -> Result<Example> {
    if t == 0 || t >= tracklet.frames.len() {
        return Err(Error::InvalidParameter(format!("frame {t} has no predecessor in the tracklet")));
    }
    let b0 = tracklet.boxes[0];
    let prev = jitter.search.apply(tracklet.boxes[t - 1].pose, rng);
    let gt = project_to_bev(&tracklet.boxes[t]);
    let model_pc = if jitter.model.is_zero() {
        crops.concat(t)
    } else {
        let mut points = crops.crops[0].points.clone();
        for k in 1..t {
            let mut b = tracklet.boxes[k];
            b.pose = jitter.model.apply(b.pose, rng);
            points.extend(crop_points_in_box(&tracklet.frames[k], &b).points);
        }
        PointCloud::new(points)
    };
    let model_bev = rasterize_bev(&model_pc, PoseBev::default(), 0.0, bev.model_extent, bev.model_px, bev)?;
    let search_bev = rasterize_bev(&tracklet.frames[t], prev, b0.y_center, bev.search_extent, bev.search_px, bev)?;
    let grid = build_anchor_grid(prev, b0.spec, &search_bev);
    let batch = select_training_anchors(&grid, &gt, rng)?;
    let mut candidates = Vec::with_capacity(batch.entries.len());
    let mut targets = Vec::with_capacity(batch.entries.len());
    for e in &batch.entries {
        let rect = grid.anchors[e.index];
        let crop = crop_points_in_box(&tracklet.frames[t], &lift_to_3d(&rect, b0.spec, b0.y_center));
        candidates.push(if crop.is_empty() { None } else { Some(resample_shape(&crop, rng)?) });
        targets.push(gaussian_score(center_distance(&rect.pose, &gt.pose), sigma)?);
    }
    let model_shape = if model_pc.is_empty() { None } else { Some(resample_shape(&model_pc, rng)?) };
    let full = crops.concat(crops.crops.len());
    let completion_target = if full.is_empty() { Vec::new() } else { resample_fixed(&full, SHAPE_POINTS, rng)? };
    Ok(Example {
        model_bev,
        search_bev,
        grid,
        gt,
        batch,
        candidates,
        targets,
        model_shape,
        completion_target,
    })
}

/// Evaluates the four losses on an example and, when `backward` is set,
/// leaves the gradient of the weighted total in the parameter store.
pub fn forward_backward<T: Scalar>(
    nets: &mut Networks<T>,
    ex: &Example,
    w: &LossWeights,
    backward: bool,
) -> Result<LossParts> {
    if backward {
        nets.store.zero_grad();
    }
    let mut parts = LossParts::default();

    let (mf, mc) = nets.bev.embed_with_cache(&nets.store, &ex.model_bev)?;
    let (sf, sc) = nets.bev.embed_with_cache(&nets.store, &ex.search_bev)?;
    let (out, rc) = nets.bev.rpn_forward_with_cache(&nets.store, &mf, &sf)?;
    let rl = rpn_loss(&out, &ex.batch);
    parts.l_cls = rl.l_cls;
    parts.l_reg = rl.l_reg;
    if backward {
        let dl: Vec<f64> = rl.dlogits.iter().map(|g| w.cls * g).collect();
        let dr: Vec<[f64; 2]> = rl.dreg.iter().map(|g| [w.reg * g[0], w.reg * g[1]]).collect();
        let (dm, ds) = nets.bev.rpn_backward(&mut nets.store, &rc, &dl, &dr)?;
        nets.bev.backbone.backward(&mut nets.store, &mc, &dm)?;
        nets.bev.backbone.backward(&mut nets.store, &sc, &ds)?;
    }

    let Some(model_shape) = &ex.model_shape else {
        return Ok(parts);
    };
    let (v, vcache) = nets.shape.encode_points(&nets.store, model_shape.points())?;
    if v.norm() == 0.0 {
        warn!("model latent vanished; skipping shape terms");
        return Ok(parts);
    }
    let mut dv = vec![0.0; v.0.len()];

    let used = ex
        .candidates
        .iter()
        .filter(|c| c.is_some())
        .count();
    if used > 0 {
        for (c, &rho) in ex.candidates.iter().zip(&ex.targets) {
            let Some(shape) = c else { continue };
            let (u, ucache) = nets.shape.encode_points(&nets.store, shape.points())?;
            let (cos, du, dvi) = cosine_similarity(&u.0, &v.0)?;
            let r = cos - rho;
            parts.l_tr += r * r / used as f64;
            if backward {
                let s = w.tr * 2.0 * r / used as f64;
                let du: Vec<f64> = du.iter().map(|g| s * g).collect();
                nets.shape.encode_backward(&mut nets.store, &ucache, &du)?;
                dv.iter_mut().zip(&dvi).for_each(|(a, g)| *a += s * g);
            }
        }
    }

    if ex.completion_target.is_empty() {
        warn!("empty completion target; skipping the completion term");
    } else {
        let (flat, dcache) = nets.shape.decode_with_cache(&nets.store, &v)?;
        let (lc, dflat) = chamfer_with_grad(&flat, &ex.completion_target)?;
        parts.l_comp = lc;
        if backward && w.comp != 0.0 {
            let dflat: Vec<f64> = dflat.iter().map(|g| w.comp * g).collect();
            let dz = nets.shape.decode_backward(&mut nets.store, &dcache, &dflat)?;
            dv.iter_mut().zip(&dz).for_each(|(a, g)| *a += g);
        }
    }
    if backward {
        nets.shape.encode_backward(&mut nets.store, &vcache, &dv)?;
    }
    Ok(parts)
}

/// One optimisation phase of [`fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub bev: BevConfig,
    pub seed: u64,
    /// Warm-up from random initialisation with stronger weights.
    pub pretrain: Phase,
    pub finetune: Phase,
    pub momentum: f64,
    pub sigma: f64,
    pub val_fraction: f64,
    /// Train on every `frame_stride`-th frame of each tracklet.
    pub frame_stride: usize,
    /// Gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub jitter: Jitter,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            bev: BevConfig::default(),
            seed: 0,
            pretrain: Phase {
                epochs: 2,
                lr: 5e-3,
                weights: LossWeights {
                    cls: 1.0,
                    reg: 1.0,
                    tr: 1.0,
                    comp: 1e-4,
                },
            },
            finetune: Phase {
                epochs: 2,
                lr: 1e-4,
                weights: LossWeights::default(),
            },
            momentum: 0.9,
            sigma: 1.0,
            val_fraction: 0.1,
            frame_stride: 1,
            grad_clip: Some(10.0),
            jitter: Jitter {
                search: PoseJitter {
                    position: 0.3,
                    heading: 0.05,
                },
                model: PoseJitter {
                    position: 0.1,
                    heading: 0.03,
                },
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub parts: LossParts,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub nets: Networks<f32>,
    pub history: Vec<LossRecord>,
    /// Mean validation total per epoch.
    pub validation: Vec<f64>,
}

/// Splits tracklet indices into (train, validation) by a seeded shuffle.
pub fn split_tracklets(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) };
    let mut val = ids.split_off(n - n_val);
    ids.sort_unstable();
    val.sort_unstable();
    (ids, val)
}


/// Trains both networks end to end, one search region per step.
pub fn fit(tracklets: &[Tracklet], cfg: &TrainConfig) -> Result<FitResult> {
    if tracklets.iter().all(|t| t.frames.len() < 2) {
        return Err(Error::InvalidInput("training needs a tracklet with at least two frames".into()));
    }
    if cfg.frame_stride == 0 {
        return Err(Error::InvalidParameter("frame stride must be positive".into()));
    }
    cfg.bev.validate()?;
    cfg.pretrain.weights.validate()?;
    cfg.finetune.weights.validate()?;
    let mut net_cfg = cfg.net.clone();
    net_cfg.backbone.in_channels = cfg.bev.channels();
    let mut nets = Networks::<f32>::new(net_cfg, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let crops: Vec<TrackletCrops> = tracklets.iter().map(TrackletCrops::new).collect();
    let (train_ids, val_ids) = split_tracklets(tracklets.len(), cfg.val_fraction, cfg.seed);
    let frames_of = |ids: &[usize]| -> Vec<(usize, usize)> {
        ids.iter()
            .flat_map(|&i| (1..tracklets[i].frames.len()).step_by(cfg.frame_stride).map(move |t| (i, t)))
            .collect()
    };
    let mut train_frames = frames_of(&train_ids);
    let val_frames = frames_of(&val_ids);
    info!(
        "training on {} frames from {} tracklets, validating on {} frames",
        train_frames.len(),
        train_ids.len(),
        val_frames.len()
    );

    let mut history = Vec::new();
    let mut validation = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    for phase in [&cfg.pretrain, &cfg.finetune] {
        let mut schedule = PlateauSchedule::new(phase.lr);
        let mut lr = phase.lr;
        for _ in 0..phase.epochs {
            train_frames.shuffle(&mut rng);
            for &(i, t) in &train_frames {
                let ex = prepare_example(&tracklets[i], &crops[i], t, &cfg.bev, cfg.sigma, &cfg.jitter, &mut rng)?;
                let parts = forward_backward(&mut nets, &ex, &phase.weights, true)?;
                if let Some(clip) = cfg.grad_clip {
                    let norm = nets.store.grad_norm();
                    if norm > clip {
                        nets.store.scale_grad((clip / norm) as f32);
                    }
                }
                sgd_step(&mut nets.store, lr, cfg.momentum)?;
                history.push(LossRecord {
                    epoch,
                    step,
                    parts,
                    total: total_loss(&parts, &phase.weights),
                    lr,
                });
                step += 1;
            }
            let eval_frames = if val_frames.is_empty() { &train_frames } else { &val_frames };
            let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
            let mut sum = 0.0;
            for &(i, t) in eval_frames {
                let ex = prepare_example(&tracklets[i], &crops[i], t, &cfg.bev, cfg.sigma, &cfg.jitter, &mut val_rng)?;
                sum += total_loss(&forward_backward(&mut nets, &ex, &phase.weights, false)?, &phase.weights);
            }
            let val = sum / eval_frames.len().max(1) as f64;
            validation.push(val);
            lr = schedule.update(val);
            info!("epoch {epoch}: validation loss {val:.6}, next lr {lr:e}");
            epoch += 1;
        }
    }
    nets.store.clear_grad();
    Ok(FitResult {
        nets,
        history,
        validation,
    })
}

pub fn write_loss_history(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "epoch,step,l_cls,l_reg,l_tr,l_comp,total,lr")?;
    for r in history {
        writeln!(
            buf,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.step, r.parts.l_cls, r.parts.l_reg, r.parts.l_tr, r.parts.l_comp, r.total, r.lr
        )?;
    }
    atomic_write(path, &buf)
}
