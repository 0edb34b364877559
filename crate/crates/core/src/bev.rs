//! Bird-eye-view rasterization.
//!
//! A raster is a square crop centred on a pose and rotated so that the pose
//! heading runs along the image columns. Channel layout is
//! `[slice_0 .. slice_{N-1}, max_height, density]`, each plane `px × px`,
//! row-major with rows along the crop z' axis and columns along x'.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, PoseBev};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevConfig {
    pub n_slices: usize,
    /// Half-height of the vertical band kept around the object center.
    pub vertical_extent: f64,
    pub model_extent: f64,
    pub search_extent: f64,
    pub model_px: usize,
    pub search_px: usize,
    pub density_saturation: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            n_slices: 1,
            vertical_extent: 1.0,
            model_extent: 2.5,
            search_extent: 5.0,
            model_px: 127,
            search_px: 255,
            density_saturation: 63.0,
        }
    }
}

impl BevConfig {
    pub fn channels(&self) -> usize {
        self.n_slices + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_slices == 0 {
            return Err(Error::InvalidParameter("n_slices must be >= 1".into()));
        }
        if !(self.vertical_extent > 0.0 && self.model_extent > 0.0 && self.search_extent > 0.0) {
            return Err(Error::InvalidParameter("raster extents must be positive".into()));
        }
        if self.model_px % 2 == 0 || self.search_px % 2 == 0 {
            return Err(Error::InvalidParameter("raster sizes must be odd".into()));
        }
        if !(self.density_saturation > 0.0) {
            return Err(Error::InvalidParameter("density saturation must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    pub channels: usize,
    pub size: usize,
    /// `channels × size × size` values in [0, 1].
    pub data: Vec<f32>,
    /// Meters per pixel.
    pub resolution: f64,
    pub center: PoseBev,
    pub extent: f64,
}

impl BevImage {
    pub fn zeros(channels: usize, size: usize, center: PoseBev, extent: f64) -> Self {
        Self {
            channels,
            size,
            data: vec![0.0; channels * size * size],
            resolution: 2.0 * extent / size as f64,
            center,
            extent,
        }
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.size + row) * self.size + col]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.data[c * n..(c + 1) * n]
    }

    fn half_px(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    /// Continuous (col, row) pixel coordinates of a world ground-plane point.
    pub fn world_to_pixel(&self, x: f64, z: f64) -> Result<(f64, f64)> {
        let (xl, zl) = self.center.to_local(x, z);
        if xl.abs() > self.extent || zl.abs() > self.extent {
            return Err(Error::OutOfBounds(x, z));
        }
        Ok((xl / self.resolution + self.half_px(), zl / self.resolution + self.half_px()))
    }

    pub fn pixel_to_world(&self, col: f64, row: f64) -> Result<(f64, f64)> {
        let lo = -0.5;
        let hi = self.size as f64 - 0.5;
        if !(lo..=hi).contains(&col) || !(lo..=hi).contains(&row) {
            return Err(Error::OutOfBounds(col, row));
        }
        let xl = (col - self.half_px()) * self.resolution;
        let zl = (row - self.half_px()) * self.resolution;
        Ok(self.center.to_world(xl, zl))
    }

    /// Writes one 8-bit PGM per channel as `<tag>_c<k>.pgm`.
    pub fn write_pgm(&self, dir: &Path, tag: &str) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let path = dir.join(format!("{tag}_c{c}.pgm"));
            let mut bytes = format!("P5\n{} {}\n255\n", self.size, self.size).into_bytes();
            bytes.extend(
                self.plane(c)
                    .iter()
                    .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
            );
            let mut f = std::fs::File::create(&path)?;
            f.write_all(&bytes)?;
            paths.push(path);
        }
        Ok(paths)
    }
}

fn cell_index(v: f64, resolution: f64, size: usize) -> usize {
    let i = (v / resolution + size as f64 / 2.0).floor();
    (i.max(0.0) as usize).min(size - 1)
}

/// Crop-frame cell and vertical offset of every point kept by the raster.
fn binned_points<'a>(
    pc: &'a PointCloud,
    center: PoseBev,
    y_ref: f64,
    extent: f64,
    size: usize,
    vertical_extent: f64,
) -> impl Iterator<Item = (usize, f64)> + 'a {
    let resolution = 2.0 * extent / size as f64;
    let (s, c) = center.theta.sin_cos();
    pc.points.iter().filter_map(move |p| {
        let dy = p[1] as f64 - y_ref;
        if dy.abs() > vertical_extent {
            return None;
        }
        let dx = p[0] as f64 - center.x;
        let dz = p[2] as f64 - center.z;
        let xl = c * dx + s * dz;
        let zl = -s * dx + c * dz;
        if xl.abs() > extent || zl.abs() > extent {
            return None;
        }
        let col = cell_index(xl, resolution, size);
        let row = cell_index(zl, resolution, size);
        Some((row * size + col, dy))
    })
}

/// Number of raster-kept points per cell, row-major.
pub fn cell_counts(
    pc: &PointCloud,
    center: PoseBev,
    y_ref: f64,
    extent: f64,
    size: usize,
    cfg: &BevConfig,
) -> Vec<u32> {
    let mut counts = vec![0u32; size * size];
    for (cell, _) in binned_points(pc, center, y_ref, extent, size, cfg.vertical_extent) {
        counts[cell] += 1;
    }
    counts
}

/// Rasterizes `pc` into an (N+2)-channel view centred on `center`; `y_ref`
/// is the height the vertical band is measured from.
pub fn rasterize_bev(
    pc: &PointCloud,
    center: PoseBev,
    y_ref: f64,
    extent: f64,
    out_px: usize,
    cfg: &BevConfig,
) -> Result<BevImage> {
    if out_px % 2 == 0 || out_px == 0 {
        return Err(Error::InvalidParameter(format!("raster size must be odd, got {out_px}")));
    }
    if !(extent > 0.0) {
        return Err(Error::InvalidParameter(format!("raster extent must be positive, got {extent}")));
    }
    let n = cfg.n_slices;
    let ve = cfg.vertical_extent;
    let plane = out_px * out_px;
    let mut img = BevImage::zeros(n + 2, out_px, center, extent);
    let mut counts = vec![0u32; plane];
    let band = 2.0 * ve / n as f64;
    for (cell, dy) in binned_points(pc, center, y_ref, extent, out_px, ve) {
        counts[cell] += 1;
        let h = ((dy + ve) / (2.0 * ve)) as f32;
        let max_h = &mut img.data[n * plane + cell];
        *max_h = max_h.max(h);
        let k = (((dy + ve) / band).floor().max(0.0) as usize).min(n - 1);
        let lo = -ve + k as f64 * band;
        let sh = (((dy - lo) / band).clamp(0.0, 1.0)) as f32;
        let slot = &mut img.data[k * plane + cell];
        *slot = slot.max(sh);
    }
    let norm = (1.0 + cfg.density_saturation).ln();
    let density = &mut img.data[(n + 1) * plane..];
    for (d, &c) in density.iter_mut().zip(&counts) {
        if c > 0 {
            *d = ((1.0 + c as f64).ln() / norm).min(1.0) as f32;
        }
    }
    Ok(img)
}
