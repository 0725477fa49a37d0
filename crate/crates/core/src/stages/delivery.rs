use alloc::format;
use alloc::vec::Vec;

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use serde::{Deserialize, Serialize};
use zune_core::bytestream::ZCursor;
use zune_core::colorspace::ColorSpace;
use zune_core::options::DecoderOptions;
use zune_jpeg::JpegDecoder;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, MIN_EDGE};

/// Delivery degradation: resize round-trip and JPEG compression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaD {
    /// Downsampling factor in `(0, 1]`.
    pub resize: f64,
    /// JPEG quality in `1..=100`.
    pub quality: u8,
}

impl ThetaD {
    pub fn neutral() -> Self {
        Self { resize: 1.0, quality: 95 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resize > 0.0 && self.resize <= 1.0) {
            return Err(Error::param(format!("resize factor {} outside (0, 1]", self.resize)));
        }
        if !(1..=100).contains(&self.quality) {
            return Err(Error::param(format!("JPEG quality {} outside 1..=100", self.quality)));
        }
        Ok(())
    }
}

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

/// Half-pixel-centre bilinear sampling positions with edge clamping.
fn taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    let mut t = Taps { lo: Vec::with_capacity(dst), hi: Vec::with_capacity(dst), frac: Vec::with_capacity(dst) };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = libm::floor(pos) as usize;
        t.lo.push(lo);
        t.hi.push((lo + 1).min(src - 1));
        t.frac.push(pos - lo as f64);
    }
    t
}

/// Bilinear resize of row-major `h×w×c` data to `nh×nw`.
pub fn resize_bilinear(data: &[f64], h: usize, w: usize, c: usize, nh: usize, nw: usize) -> Vec<f64> {
    let (rows, cols) = (taps(h, nh), taps(w, nw));
    // Horizontal pass into an h×nw buffer, then vertical.
    let mut tmp = Vec::with_capacity(h * nw * c);
    for i in 0..h {
        let row = &data[i * w * c..(i + 1) * w * c];
        for j in 0..nw {
            let (a, b, f) = (cols.lo[j] * c, cols.hi[j] * c, cols.frac[j]);
            for ch in 0..c {
                tmp.push(row[a + ch] * (1.0 - f) + row[b + ch] * f);
            }
        }
    }
    let stride = nw * c;
    let mut out = Vec::with_capacity(nh * stride);
    for i in 0..nh {
        let (a, b, f) = (rows.lo[i] * stride, rows.hi[i] * stride, rows.frac[i]);
        for k in 0..stride {
            out.push(tmp[a + k] * (1.0 - f) + tmp[b + k] * f);
        }
    }
    out
}

fn to_u8(v: f64) -> u8 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Encodes the 8-bit rendering as baseline JPEG at `quality` and decodes it back.
///
/// Grayscale images use a single-component JPEG; colour images use 4:2:0
/// chroma subsampling.
pub fn jpeg_roundtrip(x: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    let (h, w, c) = x.shape();
    let too_big = |_| Error::Codec(format!("{h}x{w} exceeds JPEG limits"));
    let (wh, ww) = (u16::try_from(h).map_err(too_big)?, u16::try_from(w).map_err(too_big)?);
    let bytes: Vec<u8> = x.data().iter().map(|&v| to_u8(v)).collect();
    let mut encoded = Vec::new();
    let mut encoder = Encoder::new(&mut encoded, quality);
    let (color, space) = if c == 1 {
        (ColorType::Luma, ColorSpace::Luma)
    } else {
        encoder.set_sampling_factor(SamplingFactor::F_2_2);
        (ColorType::Rgb, ColorSpace::RGB)
    };
    encoder
        .encode(&bytes, ww, wh, color)
        .map_err(|e| Error::Codec(format!("encode: {e:?}")))?;
    let options = DecoderOptions::default().jpeg_set_out_colorspace(space);
    let mut decoder = JpegDecoder::new_with_options(ZCursor::new(&encoded), options);
    let decoded = decoder.decode().map_err(|e| Error::Codec(format!("decode: {e:?}")))?;
    if decoded.len() != h * w * c {
        return Err(Error::Codec(format!("decoded {} samples, expected {}", decoded.len(), h * w * c)));
    }
    let data = decoded.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(ImageBuffer::from_trusted(h, w, c, data))
}

/// Stage D: bilinear down/up resize round-trip followed by JPEG compression.
pub fn stage_d(x: &ImageBuffer, theta: &ThetaD) -> Result<ImageBuffer> {
    theta.validate()?;
    let (h, w, c) = x.shape();
    let resized = if theta.resize == 1.0 {
        x.clone()
    } else {
        let nh = (libm::round(theta.resize * h as f64) as usize).max(MIN_EDGE);
        let nw = (libm::round(theta.resize * w as f64) as usize).max(MIN_EDGE);
        let small = resize_bilinear(x.data(), h, w, c, nh, nw);
        let mut back = resize_bilinear(&small, nh, nw, c, h, w);
        crate::image::clip01(&mut back)?;
        ImageBuffer::from_trusted(h, w, c, back)
    };
    jpeg_roundtrip(&resized, theta.quality)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn phantom(h: usize, w: usize, c: usize, seed: u64) -> ImageBuffer {
        let mut rng = crate::seed::rng(seed);
        let data = (0..h * w * c)
            .map(|p| {
                let (i, j) = ((p / c) / w, (p / c) % w);
                let base = 0.5 + 0.3 * libm::sin(i as f64 / 5.0) * libm::cos(j as f64 / 7.0);
                (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
            })
            .collect();
        ImageBuffer::new(h, w, c, data).unwrap()
    }

    fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
        let mse: f64 =
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
        10.0 * libm::log10(1.0 / mse)
    }

    #[test]
    fn unit_factor_only_compresses() {
        let x = phantom(24, 24, 1, 1);
        let theta = ThetaD { resize: 1.0, quality: 70 };
        assert_eq!(stage_d(&x, &theta).unwrap(), jpeg_roundtrip(&x, 70).unwrap());
    }

    #[test]
    fn identity_resize_is_exact() {
        let x = phantom(16, 12, 3, 2);
        assert_eq!(resize_bilinear(x.data(), 16, 12, 3, 16, 12), x.data());
    }

    #[test]
    fn quality_monotone_psnr() {
        for c in [1, 3] {
            let x = phantom(64, 64, c, 5);
            let hi = stage_d(&x, &ThetaD { resize: 1.0, quality: 80 }).unwrap();
            let lo = stage_d(&x, &ThetaD { resize: 1.0, quality: 20 }).unwrap();
            assert!(psnr(&x, &hi) >= psnr(&x, &lo));
        }
    }

    #[test]
    fn dimensions_preserved() {
        let x = phantom(30, 23, 1, 3);
        for rho in [0.3, 0.45, 0.77, 0.99, 1.0] {
            let y = stage_d(&x, &ThetaD { resize: rho, quality: 50 }).unwrap();
            assert_eq!(y.shape(), x.shape());
        }
        let y = stage_d(&phantom(16, 16, 3, 4), &ThetaD { resize: 0.3, quality: 10 }).unwrap();
        assert_eq!(y.shape(), (16, 16, 3));
    }

    #[test]
    fn deterministic() {
        let x = phantom(32, 32, 3, 6);
        let t = ThetaD { resize: 0.5, quality: 33 };
        assert_eq!(stage_d(&x, &t).unwrap(), stage_d(&x, &t).unwrap());
    }

    #[test]
    fn rejects_bad_params() {
        let x = phantom(16, 16, 1, 7);
        assert!(stage_d(&x, &ThetaD { resize: 0.0, quality: 50 }).is_err());
        assert!(stage_d(&x, &ThetaD { resize: 1.0, quality: 0 }).is_err());
    }
}
