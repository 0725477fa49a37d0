//! Image representation, the grayscale proxy, robust quantiles and ROI extraction.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest edge length accepted anywhere in the engine.
pub const MIN_EDGE: usize = 8;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Row-major `H×W×C` intensity grid with every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

fn check_shape(height: usize, width: usize, channels: usize, len: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::shape(alloc::format!("channels must be 1 or 3, got {channels}")));
    }
    if height < MIN_EDGE || width < MIN_EDGE {
        return Err(Error::shape(alloc::format!(
            "image must be at least {MIN_EDGE}x{MIN_EDGE}, got {height}x{width}"
        )));
    }
    if len != height * width * channels {
        return Err(Error::mismatch(height * width * channels, len));
    }
    Ok(())
}

impl ImageBuffer {
    /// Wraps `data`, rejecting non-finite or out-of-range values.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, channels, data.len())?;
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRange { index, value });
            }
        }
        Ok(Self { height, width, channels, data })
    }

    /// Wraps `data` after clamping every value into `[0, 1]`.
    pub fn clipped(height: usize, width: usize, channels: usize, mut data: Vec<f64>) -> Result<Self> {
        check_shape(height, width, channels, data.len())?;
        clip01(&mut data)?;
        Ok(Self { height, width, channels, data })
    }

    /// Constant image.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub(crate) fn from_trusted(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::mismatch(
                alloc::format!("{:?}", self.shape()),
                alloc::format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// Convex combination `(1 - alpha) * self + alpha * other`.
    pub fn mix(&self, other: &Self, alpha: f64) -> Result<Self> {
        self.same_shape(other)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::param(alloc::format!("mixing coefficient {alpha} outside [0, 1]")));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((1.0 - alpha) * a + alpha * b).clamp(0.0, 1.0))
            .collect();
        Ok(Self::from_trusted(self.height, self.width, self.channels, data))
    }
}

/// Clamps every value into `[0, 1]`, rejecting NaN and infinities.
pub fn clip01(values: &mut [f64]) -> Result<()> {
    for (index, v) in values.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(())
}

/// Single-channel image in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

/// Luminance proxy: `0.299 R + 0.587 G + 0.114 B`, or a copy for one channel.
pub fn grayscale_proxy(img: &ImageBuffer) -> GrayImage {
    let data = if img.channels == 1 {
        img.data.clone()
    } else {
        img.data
            .chunks_exact(3)
            .map(|px| (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]).clamp(0.0, 1.0))
            .collect()
    };
    GrayImage { height: img.height, width: img.width, data }
}

/// Linear-interpolation quantile of sorted values at fraction `q`.
fn interpolate(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lower = libm::floor(pos) as usize;
    let upper = (lower + 1).min(sorted.len() - 1);
    let frac = pos - lower as f64;
    sorted[lower] + (sorted[upper] - sorted[lower]) * frac
}

/// Returns the `(q_lo, q_hi)` quantiles of all pixel values.
///
/// Ranks are `q * (n - 1)` with linear interpolation between neighbours.
/// A constant image yields `lo == hi`.
pub fn robust_quantiles(g: &GrayImage, q_lo: f64, q_hi: f64) -> Result<(f64, f64)> {
    if !(0.0 <= q_lo && q_lo < q_hi && q_hi <= 1.0) {
        return Err(Error::param(alloc::format!("quantiles must satisfy 0 <= {q_lo} < {q_hi} <= 1")));
    }
    if g.data.is_empty() {
        return Err(Error::shape("empty image"));
    }
    let mut sorted = g.data.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let lo = interpolate(&sorted, q_lo);
    let hi = interpolate(&sorted, q_hi);
    Ok((lo, hi.max(lo)))
}

/// Binary foreground mask over `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
    pub foreground_fraction: f64,
}

impl RoiMask {
    pub fn from_bits(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::mismatch(height * width, data.len()));
        }
        let count = data.iter().filter(|&&b| b).count();
        Ok(Self {
            height,
            width,
            foreground_fraction: count as f64 / data.len() as f64,
            data,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![true; height * width], foreground_fraction: 1.0 }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

const OTSU_BINS: usize = 256;
const MIN_FOREGROUND: f64 = 0.01;
const MAX_FOREGROUND: f64 = 0.99;

fn bin_of(v: f64) -> usize {
    ((v * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu threshold as a bin index: pixels in bins `> k` are foreground.
fn otsu_bin(hist: &[u64; OTSU_BINS]) -> usize {
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best = (f64::NEG_INFINITY, 0usize);
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += count;
        sum0 += k as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, k);
        }
    }
    best.1
}

/// Threshold-based foreground extraction on the grayscale proxy.
///
/// Otsu over a 256-bin histogram; foreground is strictly above the threshold
/// bin. Masks covering less than 1% or more than 99% of the image fall back to
/// the all-ones mask.
pub fn roi_mask(img: &ImageBuffer) -> RoiMask {
    let g = grayscale_proxy(img);
    let mut hist = [0u64; OTSU_BINS];
    for &v in &g.data {
        hist[bin_of(v)] += 1;
    }
    let k = otsu_bin(&hist);
    let data: Vec<bool> = g.data.iter().map(|&v| bin_of(v) > k).collect();
    let mask = RoiMask::from_bits(g.height, g.width, data).expect("mask matches image size");
    if mask.foreground_fraction < MIN_FOREGROUND || mask.foreground_fraction > MAX_FOREGROUND {
        return RoiMask::full(g.height, g.width);
    }
    mask
}
