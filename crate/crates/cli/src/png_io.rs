//! PNG ingestion (8- and 16-bit) and 16-bit archival output.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use chainshift_core::ImageBuffer;

use crate::error::{HarnessError, IoContext, Result};

fn codec(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::format(format!("{}: {e}", path.display()))
}

/// Decodes PNG bytes into `[0, 1]` values; alpha is dropped and palettes expanded.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err("palette was not expanded".into()),
    };
    let samples: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| f64::from(u16::from_be_bytes([b[0], b[1]])) / 65535.0)
            .collect(),
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&b| f64::from(b) / 255.0).collect(),
        other => return Err(format!("unsupported bit depth {other:?}")),
    };
    let data = samples.chunks_exact(stride).flat_map(|px| px[..keep].to_vec()).collect();
    ImageBuffer::new(h, w, keep, data).map_err(|e| e.to_string())
}

/// Encodes `img` as a 16-bit grayscale or RGB PNG.
pub fn encode_png16(img: &ImageBuffer) -> Vec<u8> {
    let (h, w, c) = img.shape();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Sixteen);
        let mut writer = enc.write_header().expect("in-memory PNG header");
        let bytes: Vec<u8> =
            img.data().iter().flat_map(|v| ((v * 65535.0).round() as u16).to_be_bytes()).collect();
        writer.write_image_data(&bytes).expect("in-memory PNG data");
    }
    out
}

pub fn read_png(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).at(path)?;
    decode_png(&bytes).map_err(|e| codec(path, e))
}

/// Writes a 16-bit PNG and returns the encoded bytes (for hashing).
pub fn write_png16(path: &Path, img: &ImageBuffer) -> Result<Vec<u8>> {
    let bytes = encode_png16(img);
    fs::write(path, &bytes).at(path)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_bit_roundtrip_is_within_half_a_step() {
        let data: Vec<f64> = (0..16 * 12 * 3).map(|i| (i as f64 * 0.013).fract()).collect();
        let img = ImageBuffer::new(16, 12, 3, data).unwrap();
        let back = decode_png(&encode_png16(&img)).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
    }

    #[test]
    fn eight_bit_gray_alpha_is_read() {
        let mut bytes = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut bytes, 8, 8);
            enc.set_color(png::ColorType::GrayscaleAlpha);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            let px: Vec<u8> = (0..64).flat_map(|i| [i as u8 * 4, 255]).collect();
            w.write_image_data(&px).unwrap();
        }
        let img = decode_png(&bytes).unwrap();
        assert_eq!(img.shape(), (8, 8, 1));
        assert_eq!(img.data()[1], 4.0 / 255.0);
    }

    #[test]
    fn garbage_is_an_error() {
        assert!(decode_png(b"not a png").is_err());
    }
}
