use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GrayImage, ImageBuffer};

const GAIN_FLOOR: f64 = 0.05;

/// Acquisition-like shading: a smooth elliptical gain bump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaA {
    /// Peak relative gain at the bump centre.
    pub gain: f64,
    /// Centre offset in normalized `[-1, 1]` coordinates.
    pub center_x: f64,
    pub center_y: f64,
    /// Rotation of the ellipse axes, radians.
    pub rotation: f64,
    /// Axis ratio; axes are scaled by `(1/a, a)` after rotation.
    pub anisotropy: f64,
    /// Exponent of the radial falloff `1 - r^k`.
    pub falloff: f64,
}

impl ThetaA {
    pub fn neutral() -> Self {
        Self { gain: 0.0, center_x: 0.0, center_y: 0.0, rotation: 0.0, anisotropy: 1.0, falloff: 2.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.gain, self.center_x, self.center_y, self.rotation, self.anisotropy, self.falloff];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("shading parameters must be finite"));
        }
        if self.anisotropy <= 0.0 || self.falloff <= 0.0 {
            return Err(Error::param("anisotropy and falloff must be positive"));
        }
        Ok(())
    }
}

fn normalized(index: usize, len: usize) -> f64 {
    if len <= 1 {
        0.0
    } else {
        2.0 * index as f64 / (len - 1) as f64 - 1.0
    }
}

/// Multiplicative gain field `max(0.05, 1 + g (1 - r^k))` on an `h×w` grid.
///
/// Pixel centres span `[-1, 1]` corner to corner; the radius is measured in the
/// shifted, rotated and anisotropically scaled frame and normalized by `√2`.
pub fn shading_field(theta: &ThetaA, h: usize, w: usize) -> GrayImage {
    let (sin, cos) = libm::sincos(theta.rotation);
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        let dv = normalized(i, h) - theta.center_y;
        for j in 0..w {
            let du = normalized(j, w) - theta.center_x;
            let ur = (cos * du + sin * dv) / theta.anisotropy;
            let vr = (-sin * du + cos * dv) * theta.anisotropy;
            let r = (libm::sqrt(ur * ur + vr * vr) / core::f64::consts::SQRT_2).min(1.0);
            let value = 1.0 + theta.gain * (1.0 - libm::pow(r, theta.falloff));
            data.push(value.max(GAIN_FLOOR));
        }
    }
    GrayImage { height: h, width: w, data }
}

/// Stage A: multiply by the gain field (broadcast over channels) and clip.
pub fn stage_a(x: &ImageBuffer, theta: &ThetaA) -> ImageBuffer {
    if theta.gain == 0.0 {
        return x.clone();
    }
    let (h, w, c) = x.shape();
    let field = shading_field(theta, h, w);
    let data = x
        .data()
        .chunks_exact(c)
        .zip(&field.data)
        .flat_map(|(px, &gain)| px.iter().map(move |&v| (v * gain).clamp(0.0, 1.0)))
        .collect();
    ImageBuffer::from_trusted(h, w, c, data)
}
