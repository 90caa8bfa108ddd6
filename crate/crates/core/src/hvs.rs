//! Contrast-sensitivity weighting of image patches.
//!
//! Each patch of a crop is transformed with a 2-D FFT; the contrast
//! sensitivity function `A(f) = 2.6 (0.0192 + 0.114 f) exp(-(0.114 f)^1.1)`
//! is averaged over the spectrum, weighted by bin magnitude, and squashed
//! with a sigmoid into a per-patch weight in `(0, 1)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::fft::fft2_real;
use crate::raster::{GrayImage, LumaImage, RgbImage};
use crate::tensor::Tensor;

/// Patch layout shared by the ViT tokens and the HVS weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize, patch_size: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || !patch_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "patch grid {rows}x{cols} with patch size {patch_size} (must be a power of two)"
            )));
        }
        Ok(PatchGrid { rows, cols, patch_size })
    }

    /// Grid covering a square crop.
    pub fn for_crop(crop_size: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || !crop_size.is_multiple_of(patch_size) {
            return Err(Error::InvalidArgument(format!(
                "crop size {crop_size} is not a multiple of patch size {patch_size}"
            )));
        }
        let n = crop_size / patch_size;
        Self::new(n, n, patch_size)
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewingConfig {
    /// Cycles per degree assigned to the Nyquist radial frequency.
    pub max_frequency_cpd: f64,
    pub dc_excluded: bool,
}

impl Default for ViewingConfig {
    fn default() -> Self {
        ViewingConfig {
            max_frequency_cpd: 32.0,
            dc_excluded: true,
        }
    }
}

/// Per-patch perceptual weights, row-major over `grid`.
#[derive(Clone, Debug, PartialEq)]
pub struct HvsWeightMap {
    pub weights: Vec<f64>,
    pub grid: PatchGrid,
}

impl HvsWeightMap {
    /// Pooling weights `1 + W_h`.
    pub fn pooling_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| 1.0 + w).collect()
    }
}

/// Contrast sensitivity at `f` cycles per degree.
pub fn csf(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative spatial frequency {f}")));
    }
    let s = 0.114 * f;
    Ok(2.6 * (0.0192 + s) * (-s.powf(1.1)).exp())
}

/// Signed frequency index of DFT bin `k` of an `n`-point transform.
fn signed_index(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Spatial frequency in cycles per degree of bin `(u, v)`.
pub fn bin_frequency(u: usize, v: usize, size: usize, cfg: &ViewingConfig) -> f64 {
    let (fu, fv) = (signed_index(u, size), signed_index(v, size));
    let radius = (fu * fu + fv * fv).sqrt();
    cfg.max_frequency_cpd * radius / (size as f64 / 2.0)
}

/// Magnitude-weighted mean CSF over the spectrum of a square patch
/// (`values` row-major, `size`x`size`). Returns 0 when the weighted bins
/// carry no energy.
pub fn patch_sensitivity_values(values: &[f64], size: usize, cfg: &ViewingConfig) -> Result<f64> {
    let spectrum = fft2_real(values, size)?;
    let (mut num, mut den) = (0.0, 0.0);
    for u in 0..size {
        for v in 0..size {
            if cfg.dc_excluded && u == 0 && v == 0 {
                continue;
            }
            let mag = spectrum[u * size + v].norm();
            if mag == 0.0 {
                continue;
            }
            num += mag * csf(bin_frequency(u, v, size, cfg))?;
            den += mag;
        }
    }
    // numerical noise from a flat patch is not texture
    if den <= 1e-9 * size as f64 {
        return Ok(0.0);
    }
    Ok(num / den)
}

pub fn patch_sensitivity(patch: &Tensor, cfg: &ViewingConfig) -> Result<f64> {
    match patch.dims() {
        [a, b] if a == b => patch_sensitivity_values(patch.data(), *a, cfg),
        d => Err(Error::Shape(format!("patch must be square, got {d:?}"))),
    }
}

/// `sigmoid(patch_sensitivity)` for each patch, enumerated row-major.
pub fn hvs_weights(crop: &LumaImage, grid: &PatchGrid, cfg: &ViewingConfig) -> Result<HvsWeightMap> {
    if crop.width != grid.width() || crop.height != grid.height() {
        return Err(Error::Shape(format!(
            "crop {}x{} does not match patch grid {}x{}",
            crop.width,
            crop.height,
            grid.width(),
            grid.height()
        )));
    }
    let ps = grid.patch_size;
    let mut patch = vec![0.0; ps * ps];
    let mut weights = Vec::with_capacity(grid.num_patches());
    for pr in 0..grid.rows {
        for pc in 0..grid.cols {
            for y in 0..ps {
                let row = (pr * ps + y) * crop.width + pc * ps;
                patch[y * ps..(y + 1) * ps].copy_from_slice(&crop.data[row..row + ps]);
            }
            weights.push(sigmoid(patch_sensitivity_values(&patch, ps, cfg)?));
        }
    }
    Ok(HvsWeightMap { weights, grid: *grid })
}

/// Rec. 601 luma scaled to `[0, 1]`.
pub fn luminance(img: &RgbImage) -> LumaImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    LumaImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Min-max normalized heatmap with one `patch_size` block per patch.
/// A constant map renders as uniform 128.
pub fn render_weight_heatmap(map: &HvsWeightMap) -> GrayImage {
    let g = &map.grid;
    let min = map.weights.iter().copied().fold(f64::INFINITY, f64::min);
    let max = map.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = |w: f64| -> u8 {
        if max > min {
            (255.0 * (w - min) / (max - min)).round() as u8
        } else {
            128
        }
    };
    let (width, height) = (g.width(), g.height());
    let mut data = vec![0u8; width * height];
    for y in 0..height {
        for x in 0..width {
            let p = (y / g.patch_size) * g.cols + x / g.patch_size;
            data[y * width + x] = level(map.weights[p]);
        }
    }
    GrayImage { width, height, data }
}
