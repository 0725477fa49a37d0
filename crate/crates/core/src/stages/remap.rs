use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{grayscale_proxy, robust_quantiles, ImageBuffer};

const WINDOW_QUANTILES: (f64, f64) = (0.01, 0.99);
const WINDOW_EPS: f64 = 1e-6;

/// Display remapping: window/level offsets, tone curve, gamma and bit depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaR {
    /// Offset added to the robust window centre.
    pub center_offset: f64,
    /// Multiplier on the robust window width.
    pub width_scale: f64,
    /// Tone-curve outputs at 0.25, 0.5 and 0.75 (monotonicity enforced on use).
    pub tone: (f64, f64, f64),
    pub gamma: f64,
    pub bit_depth: u8,
}

impl ThetaR {
    pub fn neutral() -> Self {
        Self { center_offset: 0.0, width_scale: 1.0, tone: (0.25, 0.5, 0.75), gamma: 1.0, bit_depth: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.tone;
        if [self.center_offset, self.width_scale, a, b, c, self.gamma].iter().any(|v| !v.is_finite()) {
            return Err(Error::param("remap parameters must be finite"));
        }
        if self.width_scale <= 0.0 || self.gamma <= 0.0 {
            return Err(Error::param("window scale and gamma must be positive"));
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::param(alloc::format!("bit depth {} outside 1..=16", self.bit_depth)));
        }
        Ok(())
    }
}

/// Running maximum over the control points, then clamp to `[0, 1]`.
pub fn enforce_monotone(y25: f64, y50: f64, y75: f64) -> (f64, f64, f64) {
    let a = y25.clamp(0.0, 1.0);
    let b = y50.max(a).clamp(0.0, 1.0);
    let c = y75.max(b).clamp(0.0, 1.0);
    (a, b, c)
}

/// Piecewise-linear curve through (0,0), (.25,y25), (.5,y50), (.75,y75), (1,1).
pub fn tone_curve(t: f64, points: (f64, f64, f64)) -> f64 {
    let knots = [0.0, points.0, points.1, points.2, 1.0];
    let t = t.clamp(0.0, 1.0);
    let seg = ((t * 4.0) as usize).min(3);
    let frac = t * 4.0 - seg as f64;
    knots[seg] + (knots[seg + 1] - knots[seg]) * frac
}

fn quantize_value(v: f64, levels: f64) -> f64 {
    libm::round(v * levels) / levels
}

/// Uniform `b`-bit quantization: `round(v (2^b - 1)) / (2^b - 1)`.
pub fn quantize_bits(x: &ImageBuffer, bits: u8) -> Result<ImageBuffer> {
    if !(1..=16).contains(&bits) {
        return Err(Error::param(alloc::format!("bit depth {bits} outside 1..=16")));
    }
    let levels = ((1u32 << bits) - 1) as f64;
    let data = x.data().iter().map(|&v| quantize_value(v, levels)).collect();
    let (h, w, c) = x.shape();
    Ok(ImageBuffer::from_trusted(h, w, c, data))
}

/// Stage R: robust window/level, tone curve, gamma, then bit-depth quantization.
///
/// The window comes from the 1%/99% quantiles of the grayscale proxy and is
/// shared by all channels.
pub fn stage_r(x: &ImageBuffer, theta: &ThetaR) -> Result<ImageBuffer> {
    theta.validate()?;
    let (lo, hi) = robust_quantiles(&grayscale_proxy(x), WINDOW_QUANTILES.0, WINDOW_QUANTILES.1)?;
    let center = 0.5 * (lo + hi) + theta.center_offset;
    let width = (hi - lo) * theta.width_scale;
    let points = enforce_monotone(theta.tone.0, theta.tone.1, theta.tone.2);
    let levels = ((1u32 << theta.bit_depth) - 1) as f64;
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let windowed = ((v - center) / (width + WINDOW_EPS) + 0.5).clamp(0.0, 1.0);
            let toned = tone_curve(windowed, points);
            let gamma = if theta.gamma == 1.0 { toned } else { libm::pow(toned, theta.gamma) };
            quantize_value(gamma.clamp(0.0, 1.0), levels)
        })
        .collect();
    let (h, w, c) = x.shape();
    Ok(ImageBuffer::from_trusted(h, w, c, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn monotone_examples() {
        assert_eq!(enforce_monotone(0.25, 0.5, 0.75), (0.25, 0.5, 0.75));
        assert_eq!(enforce_monotone(0.45, 0.25, 0.95), (0.45, 0.45, 0.95));
    }

    #[test]
    fn tone_examples() {
        for i in 0..=100 {
            let t = i as f64 / 100.0;
            assert!((tone_curve(t, (0.25, 0.5, 0.75)) - t).abs() < 1e-12);
        }
        assert!((tone_curve(0.125, (0.1, 0.5, 0.9)) - 0.05).abs() < 1e-12);
        assert_eq!(tone_curve(0.0, (0.3, 0.4, 0.5)), 0.0);
        assert_eq!(tone_curve(1.0, (0.3, 0.4, 0.5)), 1.0);
    }

    #[test]
    fn quantize_examples() {
        let x = ImageBuffer::new(8, 8, 1, [0.4, 0.6].repeat(32)).unwrap();
        let q = quantize_bits(&x, 1).unwrap();
        assert_eq!(&q.data()[..2], &[0.0, 1.0]);
        let half = ImageBuffer::filled(8, 8, 1, 0.5).unwrap();
        assert!((quantize_bits(&half, 3).unwrap().data()[0] - 4.0 / 7.0).abs() < 1e-15);
        assert!(quantize_bits(&half, 0).is_err());
        assert!(quantize_bits(&half, 17).is_err());
    }

    fn eight_bit_image(seed: u64) -> ImageBuffer {
        let mut rng = crate::seed::rng(seed);
        let data: Vec<f64> = (0..32 * 32)
            .map(|i| match i % 25 {
                0 => 0.0,
                1 => 1.0,
                _ => f64::from(rng.random_range(0u32..=255)) / 255.0,
            })
            .collect();
        ImageBuffer::new(32, 32, 1, data).unwrap()
    }

    #[test]
    fn neutral_r_is_fixed_point_on_spanning_8bit_image() {
        let x = eight_bit_image(3);
        let once = stage_r(&x, &ThetaR::neutral()).unwrap();
        assert_eq!(once, x);
        assert_eq!(stage_r(&once, &ThetaR::neutral()).unwrap(), once);
    }

    #[test]
    fn gamma_two_darkens_midtones() {
        // Half the pixels at 0 and half at 1 put the window centre at 0.5.
        let mut data = vec![0.0; 32];
        data.extend(vec![1.0; 32]);
        data[10] = 0.5;
        let x = ImageBuffer::new(8, 8, 1, data).unwrap();
        let theta = ThetaR { gamma: 2.0, bit_depth: 16, ..ThetaR::neutral() };
        let y = stage_r(&x, &theta).unwrap();
        assert!((y.data()[10] - 0.25).abs() < 1e-4);
    }

    #[test]
    fn level_count_bounded_by_bit_depth() {
        let x = eight_bit_image(9);
        for b in 3..=8u8 {
            let theta = ThetaR { bit_depth: b, gamma: 1.3, center_offset: 0.1, ..ThetaR::neutral() };
            let y = stage_r(&x, &theta).unwrap();
            let levels: BTreeSet<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert!(levels.len() <= 1 << b);
        }
    }

    #[test]
    fn constant_image_is_safe() {
        let x = ImageBuffer::filled(8, 8, 1, 0.3).unwrap();
        let y = stage_r(&x, &ThetaR::neutral()).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    proptest! {
        #[test]
        fn enforced_points_are_monotone(a in 0.05f64..0.45, b in 0.25f64..0.75, c in 0.55f64..0.95) {
            let (x, y, z) = enforce_monotone(a, b, c);
            prop_assert!(0.0 <= x && x <= y && y <= z && z <= 1.0);
        }

        #[test]
        fn curve_is_monotone(a in 0.05f64..0.45, b in 0.25f64..0.75, c in 0.55f64..0.95) {
            let pts = enforce_monotone(a, b, c);
            let mut prev = 0.0;
            for i in 0..=200 {
                let v = tone_curve(i as f64 / 200.0, pts);
                prop_assert!(v + 1e-15 >= prev);
                prev = v;
            }
        }

        #[test]
        fn quantize_idempotent(v in proptest::collection::vec(0.0f64..1.0, 64), b in 1u8..=16) {
            let x = ImageBuffer::new(8, 8, 1, v).unwrap();
            let once = quantize_bits(&x, b).unwrap();
            prop_assert_eq!(quantize_bits(&once, b).unwrap(), once);
        }
    }
}
