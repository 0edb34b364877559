//! Bird-eye-view Siamese network and region proposal head.
//!
//! The backbone follows the SiamFC/AlexNet spatial geometry so that a
//! 127-pixel model raster embeds to 6×6 and a 255-pixel search raster to
//! 22×22. Each RPN branch adapts both maps with a 3×3 convolution,
//! correlates them depthwise to 17×17 and maps the result to per-anchor
//! outputs with a 1×1 convolution.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bev::BevImage;
use crate::error::{Error, Result};
use crate::geom::{BoxSpec, PoseBev, Rect};
use crate::net::{
    cross_correlate, cross_correlate_backward, max_pool2d, max_pool2d_backward, relu, relu_backward, sigmoid, Conv2d,
    ConvCache, ParamStore, PoolCache, Scalar, Tensor,
};

/// Correlation output side.
pub const GRID: usize = 17;
/// Heading hypotheses per grid cell.
pub const ANCHORS_PER_CELL: usize = 5;
pub const NUM_ANCHORS: usize = GRID * GRID * ANCHORS_PER_CELL;
/// Heading offsets of the anchors, in degrees.
pub const ANCHOR_ANGLES_DEG: [f64; ANCHORS_PER_CELL] = [-5.0, -2.5, 0.0, 2.5, 5.0];
/// Total backbone stride in pixels.
pub const BACKBONE_STRIDE: usize = 8;
pub const MODEL_FEATURE: usize = 6;
pub const SEARCH_FEATURE: usize = 22;

// (kernel, stride, followed by a 3/2 max-pool)
const BACKBONE_GEOMETRY: [(usize, usize, bool); 5] =
    [(11, 2, true), (5, 1, true), (3, 1, false), (3, 1, false), (3, 1, false)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub widths: [usize; 5],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [8, 16, 32, 32, 64],
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        self.widths[4]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub convs: Vec<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct BackboneCache<T> {
    convs: Vec<ConvCache<T>>,
    relus: Vec<Option<Tensor<T>>>,
    pools: Vec<Option<PoolCache>>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let mut prev = cfg.in_channels;
        let convs = BACKBONE_GEOMETRY
            .iter()
            .zip(cfg.widths)
            .enumerate()
            .map(|(i, (&(k, s, _), w))| {
                let c = Conv2d::new(store, &format!("backbone.conv{}", i + 1), prev, w, k, s, 0, true, rng);
                prev = w;
                c
            })
            .collect();
        Self { convs }
    }

    pub fn output_size(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for (conv, &(_, _, pool)) in self.convs.iter().zip(&BACKBONE_GEOMETRY) {
            s = conv.out_size(s)?;
            if pool {
                s = crate::net::conv_out_size(s, 3, 2, 0)?;
            }
        }
        Some(s)
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BackboneCache<T>)> {
        let last = self.convs.len() - 1;
        let mut cache = BackboneCache {
            convs: Vec::with_capacity(self.convs.len()),
            relus: Vec::with_capacity(self.convs.len()),
            pools: Vec::with_capacity(self.convs.len()),
        };
        let mut h = x.clone();
        for (i, (conv, &(_, _, pool))) in self.convs.iter().zip(&BACKBONE_GEOMETRY).enumerate() {
            let (y, cc) = conv.forward(store, &h)?;
            cache.convs.push(cc);
            h = if i < last {
                let r = relu(&y);
                cache.relus.push(Some(r.clone()));
                r
            } else {
                cache.relus.push(None);
                y
            };
            if pool {
                let (p, pc) = max_pool2d(&h, 3, 2)?;
                cache.pools.push(Some(pc));
                h = p;
            } else {
                cache.pools.push(None);
            }
        }
        Ok((h, cache))
    }

    /// Accumulates parameter gradients; the raster itself needs none.
    pub fn backward<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &BackboneCache<T>, grad: &Tensor<T>) -> Result<()> {
        let mut g = grad.clone();
        for i in (0..self.convs.len()).rev() {
            if let Some(pc) = &cache.pools[i] {
                g = max_pool2d_backward(pc, &g);
            }
            if let Some(r) = &cache.relus[i] {
                g = relu_backward(r, &g);
            }
            match self.convs[i].backward(store, &cache.convs[i], &g, i > 0)? {
                Some(dx) => g = dx,
                None => break,
            }
        }
        Ok(())
    }
}

/// One RPN branch: template/search adapters, correlation and 1×1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnBranch {
    pub template_adapter: Conv2d,
    pub search_adapter: Conv2d,
    pub head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct BranchCache<T> {
    template_conv: ConvCache<T>,
    search_conv: ConvCache<T>,
    template: Tensor<T>,
    search: Tensor<T>,
    head_conv: ConvCache<T>,
}

impl RpnBranch {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, out: usize, rng: &mut R) -> Self {
        Self {
            template_adapter: Conv2d::new(store, &format!("{name}.template"), dim, dim, 3, 1, 1, false, rng),
            search_adapter: Conv2d::new(store, &format!("{name}.search"), dim, dim, 3, 1, 1, false, rng),
            head: Conv2d::new(store, &format!("{name}.head"), dim, out, 1, 1, 0, true, rng),
        }
    }

    fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        model_fm: &Tensor<T>,
        search_fm: &Tensor<T>,
    ) -> Result<(Tensor<T>, BranchCache<T>)> {
        let (template, template_conv) = self.template_adapter.forward(store, model_fm)?;
        let (search, search_conv) = self.search_adapter.forward(store, search_fm)?;
        let corr = cross_correlate(&template, &search)?;
        let (out, head_conv) = self.head.forward(store, &corr)?;
        Ok((
            out,
            BranchCache {
                template_conv,
                search_conv,
                template,
                search,
                head_conv,
            },
        ))
    }

    fn backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &BranchCache<T>,
        grad: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let dcorr = self.head.backward(store, &cache.head_conv, grad, true)?.expect("requested");
        let (dt, ds) = cross_correlate_backward(&cache.template, &cache.search, &dcorr)?;
        let dmodel = self
            .template_adapter
            .backward(store, &cache.template_conv, &dt, true)?
            .expect("requested");
        let dsearch = self
            .search_adapter
            .backward(store, &cache.search_conv, &ds, true)?
            .expect("requested");
        Ok((dmodel, dsearch))
    }
}

/// Per-anchor classification and regression outputs, indexed by
/// [`anchor_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub logits: Vec<f64>,
    /// Sigmoid of the logits.
    pub cls: Vec<f64>,
    /// `(δx, δz)` per anchor.
    pub reg: Vec<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct RpnCache<T> {
    cls: BranchCache<T>,
    reg: BranchCache<T>,
}

/// Flattened anchor index for grid cell (`row`, `col`) and heading slot `k`.
pub fn anchor_index(k: usize, row: usize, col: usize) -> usize {
    (k * GRID + row) * GRID + col
}

/// Inverse of [`anchor_index`]: `(k, row, col)`.
pub fn anchor_cell(index: usize) -> (usize, usize, usize) {
    (index / (GRID * GRID), (index / GRID) % GRID, index % GRID)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevSiamese {
    pub backbone: Backbone,
    pub cls: RpnBranch,
    pub reg: RpnBranch,
    pub in_channels: usize,
}

impl BevSiamese {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &BackboneConfig, rng: &mut R) -> Self {
        let backbone = Backbone::new(store, cfg, rng);
        let d = cfg.feature_dim();
        let cls = RpnBranch::new(store, "rpn.cls", d, ANCHORS_PER_CELL, rng);
        let reg = RpnBranch::new(store, "rpn.reg", d, 2 * ANCHORS_PER_CELL, rng);
        Self {
            backbone,
            cls,
            reg,
            in_channels: cfg.in_channels,
        }
    }

    fn image_tensor<T: Scalar>(&self, bev: &BevImage) -> Result<Tensor<T>> {
        if bev.channels != self.in_channels || !(bev.size == 127 || bev.size == 255) {
            return Err(Error::ShapeMismatch(format!(
                "embedding needs a {}-channel 127 or 255 px raster, got {} channels at {} px",
                self.in_channels, bev.channels, bev.size
            )));
        }
        Tensor::from_f32(vec![bev.channels, bev.size, bev.size], &bev.data)
    }

    /// Feature map of a raster: D×6×6 for 127 px, D×22×22 for 255 px.
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, bev: &BevImage) -> Result<Tensor<T>> {
        Ok(self.embed_with_cache(store, bev)?.0)
    }

    pub fn embed_with_cache<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        bev: &BevImage,
    ) -> Result<(Tensor<T>, BackboneCache<T>)> {
        let x = self.image_tensor(bev)?;
        self.backbone.forward(store, &x)
    }

    pub fn rpn_forward<T: Scalar>(&self, store: &ParamStore<T>, model_fm: &Tensor<T>, search_fm: &Tensor<T>) -> Result<RpnOutput> {
        Ok(self.rpn_forward_with_cache(store, model_fm, search_fm)?.0)
    }

    pub fn rpn_forward_with_cache<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        model_fm: &Tensor<T>,
        search_fm: &Tensor<T>,
    ) -> Result<(RpnOutput, RpnCache<T>)> {
        let (cls_out, cls_cache) = self.cls.forward(store, model_fm, search_fm)?;
        let (reg_out, reg_cache) = self.reg.forward(store, model_fm, search_fm)?;
        if cls_out.shape() != [ANCHORS_PER_CELL, GRID, GRID] {
            return Err(Error::ShapeMismatch(format!(
                "RPN produced {:?}, expected {:?}",
                cls_out.shape(),
                [ANCHORS_PER_CELL, GRID, GRID]
            )));
        }
        let logits: Vec<f64> = cls_out.data().iter().map(|v| v.as_f64()).collect();
        let cls = logits.iter().map(|&z| sigmoid(z)).collect();
        let plane = GRID * GRID;
        let rd = reg_out.data();
        let reg = (0..NUM_ANCHORS)
            .map(|a| {
                let (k, r, c) = anchor_cell(a);
                let cell = r * GRID + c;
                [rd[2 * k * plane + cell].as_f64(), rd[(2 * k + 1) * plane + cell].as_f64()]
            })
            .collect();
        Ok((
            RpnOutput { logits, cls, reg },
            RpnCache {
                cls: cls_cache,
                reg: reg_cache,
            },
        ))
    }

    /// Backpropagates per-anchor gradients (w.r.t. the logits and deltas)
    /// into the RPN and returns the gradients on the two feature maps.
    pub fn rpn_backward<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        cache: &RpnCache<T>,
        dlogits: &[f64],
        dreg: &[[f64; 2]],
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let plane = GRID * GRID;
        let gcls = Tensor::new(
            vec![ANCHORS_PER_CELL, GRID, GRID],
            dlogits.iter().map(|&v| T::lit(v)).collect(),
        )?;
        let mut greg = vec![T::zero(); 2 * ANCHORS_PER_CELL * plane];
        for (a, d) in dreg.iter().enumerate() {
            let (k, r, c) = anchor_cell(a);
            greg[2 * k * plane + r * GRID + c] = T::lit(d[0]);
            greg[(2 * k + 1) * plane + r * GRID + c] = T::lit(d[1]);
        }
        let greg = Tensor::new(vec![2 * ANCHORS_PER_CELL, GRID, GRID], greg)?;
        let (mut dm, mut ds) = self.cls.backward(store, &cache.cls, &gcls)?;
        let (dm2, ds2) = self.reg.backward(store, &cache.reg, &greg)?;
        dm.data_mut().iter_mut().zip(dm2.data()).for_each(|(a, &b)| *a += b);
        ds.data_mut().iter_mut().zip(ds2.data()).for_each(|(a, &b)| *a += b);
        Ok((dm, ds))
    }
}

/// The 17×17×5 anchor set around the previous pose.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<Rect>,
    /// Meters between adjacent grid cells.
    pub feature_stride_m: f64,
    pub center: PoseBev,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Crop-frame offset of an anchor's center.
    pub fn local_offset(&self, index: usize) -> (f64, f64) {
        let (_, row, col) = anchor_cell(index);
        let half = (GRID / 2) as f64;
        (
            (col as f64 - half) * self.feature_stride_m,
            (row as f64 - half) * self.feature_stride_m,
        )
    }

    /// Regression targets that move anchor `index` onto `target`'s center.
    pub fn encode(&self, index: usize, target: &Rect) -> [f64; 2] {
        let a = &self.anchors[index];
        let (ax, az) = self.local_offset(index);
        let (tx, tz) = self.center.to_local(target.pose.x, target.pose.z);
        [(tx - ax) / a.w, (tz - az) / a.l]
    }

    /// Applies regressed deltas to anchor `index`; the heading is the
    /// anchor's.
    pub fn decode(&self, index: usize, delta: [f64; 2]) -> Rect {
        let a = &self.anchors[index];
        let (ax, az) = self.local_offset(index);
        let (x, z) = self.center.to_world(ax + delta[0] * a.w, az + delta[1] * a.l);
        Rect {
            pose: PoseBev::new(x, z, a.pose.theta),
            w: a.w,
            l: a.l,
        }
    }
}

/// Anchors on the search raster centred on `prev`; cell (8, 8) with the zero
/// heading offset sits exactly on `prev`.
pub fn build_anchor_grid(prev: PoseBev, spec: BoxSpec, image: &BevImage) -> AnchorGrid {
    let stride = BACKBONE_STRIDE as f64 * image.resolution;
    let mut grid = AnchorGrid {
        anchors: Vec::with_capacity(NUM_ANCHORS),
        feature_stride_m: stride,
        center: prev,
    };
    for idx in 0..NUM_ANCHORS {
        let (k, _, _) = anchor_cell(idx);
        let (xl, zl) = grid.local_offset(idx);
        let (x, z) = if xl == 0.0 && zl == 0.0 { (prev.x, prev.z) } else { prev.to_world(xl, zl) };
        let theta = prev.theta + ANCHOR_ANGLES_DEG[k].to_radians();
        grid.anchors.push(Rect {
            pose: PoseBev::new(x, z, theta),
            w: spec.w,
            l: spec.l,
        });
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub rect: Rect,
    pub raw_score: f64,
    pub windowed_score: f64,
    pub anchor_index: usize,
}

/// Centred 2D Hann window over the grid, 1 at the center and 0 on the border.
pub fn hann2d(row: usize, col: usize) -> f64 {
    let hann = |n: usize| 0.5 - 0.5 * (2.0 * PI * n as f64 / (GRID - 1) as f64).cos();
    hann(row) * hann(col)
}

/// Decodes every anchor, blends its score with the cosine window and returns
/// the `count` best, ties broken by the lower anchor index.
pub fn decode_and_rank(out: &RpnOutput, grid: &AnchorGrid, window_weight: f64, count: usize) -> Result<Vec<Proposal>> {
    if count == 0 {
        return Err(Error::InvalidParameter("proposal count must be positive".into()));
    }
    if out.cls.len() != grid.len() || out.reg.len() != grid.len() {
        return Err(Error::ShapeMismatch("RPN output and anchor grid disagree".into()));
    }
    let mut order: Vec<(usize, f64)> = out
        .cls
        .iter()
        .enumerate()
        .map(|(i, &raw)| {
            let (_, r, c) = anchor_cell(i);
            (i, (1.0 - window_weight) * raw + window_weight * hann2d(r, c))
        })
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(order
        .into_iter()
        .take(count.min(grid.len()))
        .map(|(i, windowed)| Proposal {
            rect: grid.decode(i, out.reg[i]),
            raw_score: out.cls[i],
            windowed_score: windowed,
            anchor_index: i,
        })
        .collect())
}
