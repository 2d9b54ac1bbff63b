//! Multi-scale feature pyramid `L2 … L64`, window geometry and the
//! deterministic descriptor backbone.
//!
//! Level `L_n` has downscale factor `n`; its grid is `ceil(H/n) × ceil(W/n)`
//! cells, each holding `C` features computed over the cell's `n×n` pixel
//! footprint. Footprints at the right and bottom borders are partial.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Real;

pub const LEVEL_FACTORS: [u32; 6] = [2, 4, 8, 16, 32, 64];

/// Side of an extraction window, in cells.
pub const WINDOW_SIZE: usize = 10;

pub const MIN_IMAGE_SIDE: u32 = 64;

/// Channel count of [`SyntheticBackbone`].
pub const SYNTH_CHANNELS: usize = 16;

/// Names of the synthetic descriptor channels, in storage order.
pub const CHANNEL_NAMES: [&str; SYNTH_CHANNELS] = [
    "mean_r",
    "mean_g",
    "mean_b",
    "std_r",
    "std_g",
    "std_b",
    "red_lamp_fraction",
    "amber_lamp_fraction",
    "green_lamp_fraction",
    "dark_fraction",
    "gradient_mean",
    "luminance_max",
    "opponent_rg",
    "opponent_yb",
    "edge_density",
    "bias",
];

pub fn level_index(factor: u32) -> Option<usize> {
    LEVEL_FACTORS.iter().position(|&f| f == factor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel<T> {
    pub factor: u32,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// `rows × cols × channels`, row-major.
    pub data: Vec<T>,
}

impl<T: Real> PyramidLevel<T> {
    pub fn zeros(factor: u32, rows: usize, cols: usize, channels: usize) -> Self {
        Self { factor, rows, cols, channels, data: vec![T::zero(); rows * cols * channels] }
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let start = (row * self.cols + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let start = (row * self.cols + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    levels: Vec<PyramidLevel<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    /// Checks that all six levels are present, in order, with geometry
    /// consistent with the image size and a common channel count.
    pub fn from_levels(width: u32, height: u32, levels: Vec<PyramidLevel<T>>) -> Result<Self> {
        if levels.len() != LEVEL_FACTORS.len() {
            return Err(Error::Config(format!("pyramid needs 6 levels, got {}", levels.len())));
        }
        let channels = levels[0].channels;
        for (level, &factor) in levels.iter().zip(&LEVEL_FACTORS) {
            let (rows, cols) = level_dims(width, height, factor);
            if level.factor != factor || level.rows != rows || level.cols != cols {
                return Err(Error::Config(format!(
                    "level L{} has dims {}x{}, expected L{factor} {rows}x{cols}",
                    level.factor, level.rows, level.cols
                )));
            }
            if level.channels != channels || level.data.len() != rows * cols * channels {
                return Err(Error::Config("levels disagree on channel count".into()));
            }
        }
        Ok(Self { width, height, channels, levels })
    }

    pub fn levels(&self) -> &[PyramidLevel<T>] {
        &self.levels
    }

    pub fn level(&self, factor: u32) -> Option<&PyramidLevel<T>> {
        level_index(factor).map(|i| &self.levels[i])
    }
}

/// Grid size of level `factor` for a `width × height` image.
pub fn level_dims(width: u32, height: u32, factor: u32) -> (usize, usize) {
    (height.div_ceil(factor) as usize, width.div_ceil(factor) as usize)
}

/// A 10×10-cell window on one pyramid level, addressed by its top-left cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    pub factor: u32,
    pub row: usize,
    pub col: usize,
}

impl WindowRef {
    pub fn intersects_grid(&self, rows: usize, cols: usize) -> bool {
        self.row < rows && self.col < cols
    }
}

/// Image-pixel footprint of a window (not clipped to the image).
pub fn window_to_box<T: Real>(w: &WindowRef) -> BBox<T> {
    let n = w.factor as f64;
    let side = WINDOW_SIZE as f64;
    BBox {
        x_min: T::lit(n * w.col as f64),
        y_min: T::lit(n * w.row as f64),
        x_max: T::lit(n * (w.col as f64 + side)),
        y_max: T::lit(n * (w.row as f64 + side)),
    }
}

/// Level whose windows best fit the object: the factor minimising
/// `|max(width, height)/n − 10|`, ties going to the finer level.
pub fn level_for_object<T: Real>(b: &BBox<T>) -> u32 {
    let side = b.max_side();
    let target = T::lit(WINDOW_SIZE as f64);
    let mut best = (T::infinity(), LEVEL_FACTORS[0]);
    for &n in &LEVEL_FACTORS {
        let d = (side / T::lit(n as f64) - target).abs();
        if d < best.0 {
            best = (d, n);
        }
    }
    best.1
}

/// Provider of per-level features for an RGB image.
pub trait FeatureProvider<T> {
    fn channels(&self) -> usize;
    /// One level per entry of [`LEVEL_FACTORS`], in that order.
    fn compute_levels(&self, image: &RgbImage) -> Vec<PyramidLevel<T>>;
}

pub fn build_pyramid<T: Real, P: FeatureProvider<T> + ?Sized>(
    image: &RgbImage,
    backbone: &P,
) -> Result<FeaturePyramid<T>> {
    let (width, height) = image.dimensions();
    if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
        return Err(Error::ImageTooSmall { width, height, min: MIN_IMAGE_SIDE });
    }
    let levels = backbone.compute_levels(image);
    let pyramid = FeaturePyramid::from_levels(width, height, levels)?;
    if pyramid.channels != backbone.channels() {
        return Err(Error::Config("backbone produced an unexpected channel count".into()));
    }
    Ok(pyramid)
}

/// Thresholds of the hand-crafted descriptor. Hues are in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticBackbone {
    pub lit_min_value: f64,
    pub lit_min_saturation: f64,
    pub red_hue_halfwidth: f64,
    pub amber_hue: (f64, f64),
    pub green_hue: (f64, f64),
    pub dark_luminance: f64,
    pub edge_gradient: f64,
}

impl Default for SyntheticBackbone {
    fn default() -> Self {
        Self {
            lit_min_value: 0.5,
            lit_min_saturation: 0.45,
            red_hue_halfwidth: 15.0,
            amber_hue: (35.0, 55.0),
            green_hue: (100.0, 140.0),
            dark_luminance: 0.2,
            edge_gradient: 0.1,
        }
    }
}

/// Running sums for one cell footprint; children merge into parents.
#[derive(Debug, Clone, Copy, Default)]
struct CellStats {
    sum: [f64; 3],
    sum_sq: [f64; 3],
    lamp: [f64; 3],
    dark: f64,
    grad: f64,
    edge: f64,
    count: f64,
    lum_max: f64,
}

impl CellStats {
    fn merge(&mut self, o: &CellStats) {
        for k in 0..3 {
            self.sum[k] += o.sum[k];
            self.sum_sq[k] += o.sum_sq[k];
            self.lamp[k] += o.lamp[k];
        }
        self.dark += o.dark;
        self.grad += o.grad;
        self.edge += o.edge;
        self.count += o.count;
        self.lum_max = self.lum_max.max(o.lum_max);
    }

    fn write_features<T: Real>(&self, out: &mut [T]) {
        let n = self.count.max(1.0);
        let mean = self.sum.map(|s| s / n);
        let mut f = [0.0f64; SYNTH_CHANNELS];
        for k in 0..3 {
            f[k] = mean[k];
            f[3 + k] = (self.sum_sq[k] / n - mean[k] * mean[k]).max(0.0).sqrt();
            f[6 + k] = self.lamp[k] / n;
        }
        f[9] = self.dark / n;
        f[10] = self.grad / n;
        f[11] = self.lum_max;
        f[12] = mean[0] - mean[1];
        f[13] = 0.5 * (mean[0] + mean[1]) - mean[2];
        f[14] = self.edge / n;
        f[15] = 1.0;
        for (o, v) in out.iter_mut().zip(f) {
            *o = T::lit(v);
        }
    }
}

#[inline]
pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// `(hue degrees in [0, 360), saturation, value)` of an RGB triple in [0,1].
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta <= 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    (h.rem_euclid(360.0), s, max)
}

impl SyntheticBackbone {
    /// `[red, amber, green]` lit-lamp membership of one pixel.
    pub fn lamp_mask(&self, r: f64, g: f64, b: f64) -> [bool; 3] {
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        // same expressions as rgb_to_hsv, so the early exit changes nothing
        if max < self.lit_min_value || (max - min) / max < self.lit_min_saturation {
            return [false; 3];
        }
        let (h, _, _) = rgb_to_hsv(r, g, b);
        let red = h <= self.red_hue_halfwidth || h >= 360.0 - self.red_hue_halfwidth;
        let amber = h >= self.amber_hue.0 && h <= self.amber_hue.1;
        let green = h >= self.green_hue.0 && h <= self.green_hue.1;
        [red, amber, green]
    }

    fn finest_stats(&self, image: &RgbImage) -> (usize, usize, Vec<CellStats>) {
        let (w, h) = (image.width() as usize, image.height() as usize);
        const N: usize = LEVEL_FACTORS[0] as usize;
        let (rows, cols) = level_dims(w as u32, h as u32, LEVEL_FACTORS[0]);
        let raw = image.as_raw();
        let unit: [f64; 256] = std::array::from_fn(|v| v as f64 / 255.0);
        let lum: Vec<f32> = raw
            .chunks_exact(3)
            .map(|p| luminance(unit[p[0] as usize], unit[p[1] as usize], unit[p[2] as usize]) as f32)
            .collect();
        // No pixel whose largest byte is below this can reach lit_min_value.
        let lit_floor = (self.lit_min_value * 255.0).floor().clamp(0.0, 255.0) as u8;
        let mut cells = vec![CellStats::default(); rows * cols];
        for y in 0..h {
            let up = &lum[y.saturating_sub(1) * w..][..w];
            let mid = &lum[y * w..][..w];
            let down = &lum[(y + 1).min(h - 1) * w..][..w];
            let pixels = &raw[y * w * 3..][..w * 3];
            let row_cells = &mut cells[(y / N) * cols..][..cols];
            for x in 0..w {
                let p = &pixels[3 * x..3 * x + 3];
                let [r, g, b] = [unit[p[0] as usize], unit[p[1] as usize], unit[p[2] as usize]];
                let gx = (mid[(x + 1).min(w - 1)] - mid[x.saturating_sub(1)]) as f64 * 0.5;
                let gy = (down[x] - up[x]) as f64 * 0.5;
                let grad = (gx * gx + gy * gy).sqrt();
                let l = mid[x] as f64;
                let c = &mut row_cells[x / N];
                c.sum[0] += r;
                c.sum[1] += g;
                c.sum[2] += b;
                c.sum_sq[0] += r * r;
                c.sum_sq[1] += g * g;
                c.sum_sq[2] += b * b;
                if p[0].max(p[1]).max(p[2]) >= lit_floor {
                    let lamp = self.lamp_mask(r, g, b);
                    for k in 0..3 {
                        c.lamp[k] += lamp[k] as u8 as f64;
                    }
                }
                c.dark += (l < self.dark_luminance) as u8 as f64;
                c.grad += grad;
                c.edge += (grad > self.edge_gradient) as u8 as f64;
                c.count += 1.0;
                c.lum_max = c.lum_max.max(l);
            }
        }
        (rows, cols, cells)
    }
}

impl<T: Real> FeatureProvider<T> for SyntheticBackbone {
    fn channels(&self) -> usize {
        SYNTH_CHANNELS
    }

    fn compute_levels(&self, image: &RgbImage) -> Vec<PyramidLevel<T>> {
        let (w, h) = image.dimensions();
        let (mut rows, mut cols, mut stats) = self.finest_stats(image);
        let mut levels = Vec::with_capacity(LEVEL_FACTORS.len());
        for (li, &factor) in LEVEL_FACTORS.iter().enumerate() {
            if li > 0 {
                let (nr, nc) = level_dims(w, h, factor);
                let mut next = vec![CellStats::default(); nr * nc];
                for r in 0..rows {
                    for c in 0..cols {
                        next[(r / 2) * nc + c / 2].merge(&stats[r * cols + c]);
                    }
                }
                rows = nr;
                cols = nc;
                stats = next;
            }
            let mut level = PyramidLevel::zeros(factor, rows, cols, SYNTH_CHANNELS);
            for (cell, out) in stats.iter().zip(level.data.chunks_exact_mut(SYNTH_CHANNELS)) {
                cell.write_features(out);
            }
            levels.push(level);
        }
        levels
    }
}
