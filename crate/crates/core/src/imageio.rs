//! PNG decoding/encoding for prior images, latents and heatmaps.

use std::io::Cursor;
use std::path::Path;

use ndarray::Array3;

use crate::error::{HcpError, Result};

/// Decoded image as `[height, width, channels]` with values in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Array3<f64>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| HcpError::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| HcpError::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| HcpError::Image(e.to_string()))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let mut out = Array3::<f64>::zeros((h, w, channels));
    for y in 0..h {
        let line = &buf[y * info.line_size..(y + 1) * info.line_size];
        for x in 0..w {
            for c in 0..channels {
                let i = x * channels + c;
                out[[y, x, c]] = if wide {
                    u16::from_be_bytes([line[2 * i], line[2 * i + 1]]) as f64 / 65535.0
                } else {
                    line[i] as f64 / 255.0
                };
            }
        }
    }
    Ok(out)
}

pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let bytes = std::fs::read(path).map_err(|e| HcpError::io(path, e))?;
    decode_png(&bytes)
}

/// Encodes 8-bit pixels; `channels` must be 1 (grayscale) or 3 (RGB).
pub fn encode_png(width: u32, height: u32, channels: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        other => return Err(HcpError::Image(format!("unsupported channel count {other}"))),
    };
    if pixels.len() != width as usize * height as usize * channels {
        return Err(HcpError::Image("pixel buffer does not match image size".into()));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| HcpError::Image(e.to_string()))?;
        writer
            .write_image_data(pixels)
            .map_err(|e| HcpError::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, width: u32, height: u32, channels: usize, pixels: &[u8]) -> Result<()> {
    let bytes = encode_png(width, height, channels, pixels)?;
    std::fs::write(path, bytes).map_err(|e| HcpError::io(path, e))
}

/// Quantises `[0, 1]` values to bytes (clamped, round-half-up).
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_8bit() {
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13) as u8).collect();
        let bytes = encode_png(3, 2, 3, &pixels).unwrap();
        let img = decode_png(&bytes).unwrap();
        assert_eq!(img.dim(), (2, 3, 3));
        assert_eq!(to_u8(img[[1, 2, 2]]), pixels[17]);
    }

    #[test]
    fn decodes_16bit_grayscale() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0xff, 0xff, 0x80, 0x00]).unwrap();
        }
        let img = decode_png(&out).unwrap();
        assert_eq!(img[[0, 0, 0]], 1.0);
        assert!((img[[0, 1, 0]] - 32768.0 / 65535.0).abs() < 1e-12);
    }
}
