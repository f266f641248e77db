//! PNG ingest and export.
//!
//! 8- and 16-bit PNGs are normalized to `[0, 1]`. Grayscale (with or without
//! alpha) becomes a one-channel image; RGB/RGBA/palette become three channels,
//! which marks the functional modality. Output is always 8-bit.

use std::io::Cursor;
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{io_err, Error, Result};
use crate::imaging::Image;

pub fn decode_png(bytes: &[u8], origin: &str) -> Result<Image> {
    let fail = |m: String| Error::Png {
        path: origin.to_string(),
        message: m,
    };
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples_per_px = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(fail("palette was not expanded".into())),
    };
    let sample = |i: usize| -> f64 {
        match info.bit_depth {
            BitDepth::Sixteen => u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0,
            _ => buf[i] as f64 / 255.0,
        }
    };
    let channels = if samples_per_px <= 2 { 1 } else { 3 };
    let mut data = vec![0.0; channels * h * w];
    let stride = info.line_size
        / match info.bit_depth {
            BitDepth::Sixteen => 2,
            _ => 1,
        };
    for y in 0..h {
        for x in 0..w {
            let base = y * stride + x * samples_per_px;
            for c in 0..channels {
                data[c * h * w + y * w + x] = sample(base + c);
            }
        }
    }
    Image::new(channels, h, w, data)
}

pub fn load_png(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    decode_png(&bytes, &path.display().to_string())
}

/// Encodes as 8-bit PNG with optional `tEXt` key/value chunks.
pub fn encode_png(img: &Image, text: &[(&str, &str)]) -> Result<Vec<u8>> {
    let (h, w) = img.dims();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(if img.is_color() { ColorType::Rgb } else { ColorType::Grayscale });
        enc.set_depth(BitDepth::Eight);
        for (k, v) in text {
            enc.add_text_chunk(k.to_string(), v.to_string())
                .map_err(|e| Error::InvalidInput(e.to_string()))?;
        }
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let n = h * w;
        let c = img.channels();
        let mut bytes = vec![0u8; c * n];
        for i in 0..n {
            for ch in 0..c {
                bytes[i * c + ch] = (img.data()[ch * n + i] * 255.0).round() as u8;
            }
        }
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &Image, text: &[(&str, &str)]) -> Result<()> {
    let bytes = encode_png(img, text)?;
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads the `tEXt` chunks of a PNG.
pub fn png_text(bytes: &[u8]) -> Result<Vec<(String, String)>> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder.read_info().map_err(|e| Error::Png {
        path: "<memory>".into(),
        message: e.to_string(),
    })?;
    Ok(reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip_is_quantized() {
        let img = Image::from_fn(5, 7, |x, y| (x * 7 + y) as f64 / 41.0).unwrap();
        let bytes = encode_png(&img, &[("config_hash", "abc")]).unwrap();
        let back = decode_png(&bytes, "mem").unwrap();
        assert_eq!(back.dims(), (5, 7));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(png_text(&bytes).unwrap(), vec![("config_hash".into(), "abc".into())]);
    }

    #[test]
    fn sixteen_bit_gray_is_normalized() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 2, 1);
            enc.set_color(ColorType::Grayscale);
            enc.set_depth(BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0xff, 0xff, 0x80, 0x00]).unwrap();
        }
        let img = decode_png(&out, "mem").unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert!((img.data()[1] - 32768.0 / 65535.0).abs() < 1e-12);
    }

    #[test]
    fn rgb_becomes_three_channels() {
        let img = Image::new(3, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let back = decode_png(&encode_png(&img, &[]).unwrap(), "mem").unwrap();
        assert_eq!(back.channels(), 3);
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(decode_png(b"not a png", "mem").is_err());
    }
}
