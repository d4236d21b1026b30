//! Intensity and in-plane geometry preprocessing for 2D slices indexed `[x, y]`.

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocError {
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("image maximum must be positive, got {0}")]
    NonPositiveMax(f32),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocConfig {
    /// Truncation thresholds as fractions of the slice maximum.
    pub thresholds: Vec<f32>,
    /// In-plane spacing (mm) slices are resampled to.
    pub target_spacing: f64,
    /// Input side length of the multi-task network.
    pub multitask_size: usize,
    /// Input side length of the simplified network.
    pub simple_size: usize,
    pub equalize_bins: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        PreprocConfig {
            thresholds: vec![0.6, 0.8, 1.0],
            target_spacing: 1.367,
            multitask_size: 212,
            simple_size: 100,
            equalize_bins: 256,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<(), PreprocError> {
        let t = &self.thresholds;
        if t.is_empty() {
            return Err(PreprocError::InvalidConfig("no thresholds".into()));
        }
        if t.windows(2).any(|w| w[0] >= w[1]) || t[0] <= 0.0 {
            return Err(PreprocError::InvalidConfig("thresholds must be positive and strictly increasing".into()));
        }
        if *t.last().unwrap() != 1.0 {
            return Err(PreprocError::InvalidConfig("last threshold must be 1.0".into()));
        }
        if !(self.target_spacing > 0.0) {
            return Err(PreprocError::InvalidConfig("target_spacing must be positive".into()));
        }
        if self.multitask_size == 0 || self.simple_size == 0 {
            return Err(PreprocError::InvalidConfig("sizes must be positive".into()));
        }
        if self.equalize_bins < 2 {
            return Err(PreprocError::InvalidConfig("equalize_bins must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PreprocError> {
        let cfg: PreprocConfig = serde_json::from_str(text).map_err(|e| PreprocError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Clamps every pixel above `threshold` down to it.
pub fn truncate(img: ArrayView2<'_, f32>, threshold: f32) -> Array2<f32> {
    img.mapv(|v| v.min(threshold))
}

/// Result of histogram equalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Equalized {
    pub image: Array2<f32>,
    /// Set when the input was constant and returned unchanged.
    pub constant_input: bool,
}

/// Histogram equalization onto `0..=bins-1` via the cumulative histogram.
///
/// Intensities are binned uniformly between the image minimum and maximum;
/// each pixel maps to `round((cdf(b) - cdf_min) / (n - cdf_min) · (bins - 1))`.
pub fn equalize(img: ArrayView2<'_, f32>, bins: usize) -> Equalized {
    let (lo, hi) = img
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if img.is_empty() || !(hi > lo) || bins < 2 {
        return Equalized { image: img.to_owned(), constant_input: true };
    }
    let scale = bins as f64 / (hi as f64 - lo as f64);
    let bin_of = |v: f32| (((v as f64 - lo as f64) * scale) as usize).min(bins - 1);
    let mut hist = vec![0usize; bins];
    for &v in img.iter() {
        hist[bin_of(v)] += 1;
    }
    let mut cdf = hist;
    for i in 1..bins {
        cdf[i] += cdf[i - 1];
    }
    let n = img.len() as f64;
    let cdf_min = cdf[bin_of(lo)] as f64;
    let lut: Vec<f32> = cdf
        .iter()
        .map(|&c| (((c as f64 - cdf_min) / (n - cdf_min)).max(0.0) * (bins - 1) as f64).round() as f32)
        .collect();
    Equalized { image: img.mapv(|v| lut[bin_of(v)]), constant_input: false }
}

/// Stacks `equalize(truncate(img, t·G))` for every threshold `t`, giving a
/// `(channels, sx, sy)` array with values in `0..=bins-1`.
pub fn three_channel(img: ArrayView2<'_, f32>, cfg: &PreprocConfig) -> Result<Array3<f32>, PreprocError> {
    let g = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(g > 0.0) {
        return Err(PreprocError::NonPositiveMax(g));
    }
    let (sx, sy) = img.dim();
    let mut out = Array3::zeros((cfg.thresholds.len(), sx, sy));
    for (k, &t) in cfg.thresholds.iter().enumerate() {
        let truncated = truncate(img, t * g);
        let eq = equalize(truncated.view(), cfg.equalize_bins);
        out.slice_mut(s![k, .., ..]).assign(&eq.image);
    }
    Ok(out)
}

fn bilinear_sample(img: &ArrayView2<'_, f32>, fx: f64, fy: f64) -> f32 {
    let (sx, sy) = img.dim();
    let fx = fx.clamp(0.0, (sx - 1) as f64);
    let fy = fy.clamp(0.0, (sy - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(sx - 1);
    let y1 = (y0 + 1).min(sy - 1);
    let ax = fx - x0 as f64;
    let ay = fy - y0 as f64;
    let v00 = img[[x0, y0]] as f64;
    let v10 = img[[x1, y0]] as f64;
    let v01 = img[[x0, y1]] as f64;
    let v11 = img[[x1, y1]] as f64;
    let top = v00 * (1.0 - ax) + v10 * ax;
    let bottom = v01 * (1.0 - ax) + v11 * ax;
    (top * (1.0 - ay) + bottom * ay) as f32
}

/// Resamples to `(ox, oy)` with pixel-centre alignment.
fn resample_to(img: ArrayView2<'_, f32>, ox: usize, oy: usize, nearest: bool) -> Array2<f32> {
    let (sx, sy) = img.dim();
    if (ox, oy) == (sx, sy) {
        return img.to_owned();
    }
    let rx = sx as f64 / ox as f64;
    let ry = sy as f64 / oy as f64;
    Array2::from_shape_fn((ox, oy), |(x, y)| {
        let fx = (x as f64 + 0.5) * rx - 0.5;
        let fy = (y as f64 + 0.5) * ry - 0.5;
        if nearest {
            let nx = ((x as f64 + 0.5) * rx).floor().min((sx - 1) as f64) as usize;
            let ny = ((y as f64 + 0.5) * ry).floor().min((sy - 1) as f64) as usize;
            img[[nx, ny]]
        } else {
            bilinear_sample(&img, fx, fy)
        }
    })
}

/// Resamples a slice from `spacing_in` (per axis, mm) to isotropic
/// `spacing_out`; bilinear for images, nearest-neighbour for label maps.
pub fn resample_inplane(
    slice: ArrayView2<'_, f32>,
    spacing_in: [f64; 2],
    spacing_out: f64,
    is_label: bool,
) -> Result<Array2<f32>, PreprocError> {
    if !(spacing_in[0] > 0.0 && spacing_in[1] > 0.0 && spacing_out > 0.0) {
        return Err(PreprocError::NonPositive("spacing"));
    }
    let (sx, sy) = slice.dim();
    let ox = ((sx as f64 * spacing_in[0] / spacing_out).round() as usize).max(1);
    let oy = ((sy as f64 * spacing_in[1] / spacing_out).round() as usize).max(1);
    Ok(resample_to(slice, ox, oy, is_label))
}

/// Centre crop or symmetric zero pad to `size × size`.
pub fn crop_or_pad<T: Clone + Default>(slice: ArrayView2<'_, T>, size: usize) -> Result<Array2<T>, PreprocError> {
    if size == 0 {
        return Err(PreprocError::NonPositive("size"));
    }
    let (sx, sy) = slice.dim();
    let mut out = Array2::from_elem((size, size), T::default());
    // (source start, target start, length) per axis
    let span = |d: usize| {
        if d >= size {
            ((d - size) / 2, 0, size)
        } else {
            (0, (size - d) / 2, d)
        }
    };
    let (srcx, dstx, lx) = span(sx);
    let (srcy, dsty, ly) = span(sy);
    out.slice_mut(s![dstx..dstx + lx, dsty..dsty + ly])
        .assign(&slice.slice(s![srcx..srcx + lx, srcy..srcy + ly]));
    Ok(out)
}

/// Bilinear resize to `size × size`, scaling the axes independently.
pub fn resize(slice: ArrayView2<'_, f32>, size: usize) -> Result<Array2<f32>, PreprocError> {
    if size == 0 {
        return Err(PreprocError::NonPositive("size"));
    }
    Ok(resample_to(slice, size, size, false))
}

/// Nearest-neighbour resize for label maps.
pub fn resize_labels(slice: ArrayView2<'_, u8>, size: usize) -> Result<Array2<u8>, PreprocError> {
    if size == 0 {
        return Err(PreprocError::NonPositive("size"));
    }
    let as_f = slice.mapv(|v| v as f32);
    Ok(resample_to(as_f.view(), size, size, true).mapv(|v| v as u8))
}

/// Per-slice z-score; a constant slice becomes all zeros.
pub fn normalize(slice: ArrayView2<'_, f32>) -> Array2<f32> {
    let n = slice.len() as f64;
    if n == 0.0 {
        return slice.to_owned();
    }
    let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12) {
        return Array2::zeros(slice.dim());
    }
    slice.mapv(|v| ((v as f64 - mean) / std) as f32)
}

/// Input of the simplified network: resize, three truncation channels,
/// rescaled from `0..=bins-1` to `[0, 1]`.
pub fn simple_input(slice: ArrayView2<'_, f32>, cfg: &PreprocConfig) -> Result<Array3<f32>, PreprocError> {
    let resized = resize(slice, cfg.simple_size)?;
    let scale = 1.0 / (cfg.equalize_bins - 1) as f32;
    Ok(three_channel(resized.view(), cfg)?.mapv(|v| v * scale))
}

/// Input of the multi-task network: resize to `size` and z-score.
pub fn multitask_input(slice: ArrayView2<'_, f32>, size: usize) -> Result<Array3<f32>, PreprocError> {
    let resized = resize(slice, size)?;
    Ok(normalize(resized.view()).insert_axis(ndarray::Axis(0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn truncate_rule() {
        let img = array![[80.0f32, 50.0], [60.0, 10.0]];
        let out = truncate(img.view(), 60.0);
        assert_eq!(out, array![[60.0, 50.0], [60.0, 10.0]]);
        assert_eq!(truncate(img.view(), 80.0), img);
    }

    #[test]
    fn equalize_uniform_fixture() {
        let img = array![[0.0f32, 1.0], [2.0, 3.0]];
        let eq = equalize(img.view(), 4);
        assert!(!eq.constant_input);
        assert_eq!(eq.image, img);
    }

    #[test]
    fn equalize_constant_flags() {
        let img = Array2::from_elem((3, 3), 7.0f32);
        let eq = equalize(img.view(), 256);
        assert!(eq.constant_input);
        assert_eq!(eq.image, img);
    }

    #[test]
    fn equalize_spans_full_range() {
        let img = Array2::from_shape_fn((9, 7), |(x, y)| ((x * 7 + y) as f32).powf(1.7));
        let eq = equalize(img.view(), 256);
        assert_eq!(eq.image.iter().cloned().fold(f32::INFINITY, f32::min), 0.0);
        assert_eq!(eq.image.iter().cloned().fold(f32::NEG_INFINITY, f32::max), 255.0);
    }

    #[test]
    fn three_channel_shapes_and_last_channel() {
        let cfg = PreprocConfig::default();
        let mut img = Array2::from_shape_fn((20, 16), |(x, y)| (x + 2 * y) as f32);
        img[[3, 3]] = 500.0; // outlier maximum
        let out = three_channel(img.view(), &cfg).unwrap();
        assert_eq!(out.dim(), (3, 20, 16));
        let plain = equalize(img.view(), 256).image;
        assert_eq!(out.slice(s![2, .., ..]), plain);
        assert_ne!(out.slice(s![0, .., ..]), plain);
        assert_ne!(out.slice(s![1, .., ..]), plain);
        assert!(three_channel(Array2::zeros((4, 4)).view(), &cfg).is_err());
    }

    #[test]
    fn resample_ratios() {
        let img = Array2::from_shape_fn((100, 100), |(x, y)| (x * y) as f32);
        let same = resample_inplane(img.view(), [1.367, 1.367], 1.367, false).unwrap();
        assert_eq!(same, img);
        let up = resample_inplane(img.view(), [2.734, 2.734], 1.367, false).unwrap();
        assert_eq!(up.dim(), (200, 200));
        let labels = Array2::from_shape_fn((37, 41), |(x, y)| ((x / 9 + y / 13) % 4) as f32);
        let res = resample_inplane(labels.view(), [1.0, 1.3], 1.367, true).unwrap();
        assert!(res.iter().all(|v| [0.0, 1.0, 2.0, 3.0].contains(v)));
    }

    #[test]
    fn crop_pad_arithmetic() {
        let img = Array2::from_elem((100, 100), 1.0f32);
        let padded = crop_or_pad(img.view(), 212).unwrap();
        assert_eq!(padded.dim(), (212, 212));
        assert_eq!(padded[[55, 100]], 0.0);
        assert_eq!(padded[[56, 100]], 1.0);
        assert_eq!(padded[[155, 100]], 1.0);
        assert_eq!(padded[[156, 100]], 0.0);
        let big = Array2::from_shape_fn((300, 300), |(x, y)| (x * 1000 + y) as f32);
        let cropped = crop_or_pad(big.view(), 212).unwrap();
        assert_eq!(cropped[[0, 0]], big[[44, 44]]);
        assert_eq!(cropped[[211, 211]], big[[255, 255]]);
        assert_eq!(crop_or_pad(cropped.view(), 212).unwrap(), cropped);
        assert!(crop_or_pad(img.view(), 0).is_err());
    }

    #[test]
    fn resize_cases() {
        let img = Array2::from_shape_fn((10, 10), |(x, y)| (x as f32).sin() + y as f32);
        let same = resize(img.view(), 10).unwrap();
        assert!((&same - &img).iter().all(|d| d.abs() < 1e-6));
        let c = Array2::from_elem((13, 7), 3.5f32);
        assert!(resize(c.view(), 9).unwrap().iter().all(|&v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn normalize_stats() {
        let img = Array2::from_shape_fn((8, 8), |(x, y)| (x * x + y) as f32);
        let n = normalize(img.view());
        let mean = n.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
        let std = (n.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
        assert!(mean.abs() < 1e-6);
        assert!((std - 1.0).abs() < 1e-6);
        assert!(normalize(Array2::from_elem((3, 3), 2.0f32).view()).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation_and_json() {
        let cfg = PreprocConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PreprocConfig::from_json(&json).unwrap(), cfg);
        assert!(PreprocConfig::from_json(r#"{"thresholds":[0.8,0.6,1.0]}"#).is_err());
        assert!(PreprocConfig::from_json(r#"{"thresholds":[0.6,0.8]}"#).is_err());
        assert!(PreprocConfig::from_json(r#"{"simple_size":0}"#).is_err());
    }
}
