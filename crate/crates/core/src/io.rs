//! PNG input/output, raw float grids, and heatmap overlays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Field, ImageTensor, Shape};

fn codec(e: impl std::fmt::Display) -> Error {
    Error::Image(e.to_string())
}

/// Decode a PNG into a tensor in `[0, 1]`. Palette and low bit depths are
/// expanded, 16-bit samples are reduced to 8 bits, and alpha is dropped.
pub fn read_png(path: &Path) -> Result<ImageTensor> {
    let file = BufReader::new(File::open(path)?);
    let mut decoder = png::Decoder::new(file);
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(codec)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(codec)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let (stride, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(Error::Image("palette was not expanded".into())),
    };
    let shape = Shape::new(channels, h, w);
    let mut data = vec![0f32; shape.len()];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            for c in 0..channels {
                data[c * h * w + y * w + x] = row[x * stride + c] as f32 / 255.0;
            }
        }
    }
    ImageTensor::new(shape, data)
}

/// Quantize to 8 bits, rounding to nearest.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit samples (grey or RGB) of an image.
pub fn interleaved_u8(img: &ImageTensor) -> Vec<u8> {
    let (c, hw) = (img.channels(), img.shape().pixels());
    let data = img.data();
    let mut out = Vec::with_capacity(c * hw);
    for p in 0..hw {
        for ch in 0..c {
            out.push(to_u8(data[ch * hw + p]));
        }
    }
    out
}

pub fn encode_png(width: usize, height: usize, rgb: bool, samples: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(if rgb {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(codec)?;
        writer.write_image_data(samples).map_err(codec)?;
        writer.finish().map_err(codec)?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, img: &ImageTensor) -> Result<()> {
    let c = img.channels();
    if c != 1 && c != 3 {
        return Err(Error::Image(format!("cannot write {c}-channel PNG")));
    }
    let bytes = encode_png(img.width(), img.height(), c == 3, &interleaved_u8(img))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Row-major little-endian `f32` grid.
pub fn write_f32_grid(path: &Path, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f32_grid(path: &Path, height: usize, width: usize) -> Result<Field> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() != 4 * height * width {
        return Err(Error::Image(format!(
            "grid file has {} bytes, expected {}",
            bytes.len(),
            4 * height * width
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Field::new(height, width, values)
}

/// Control points of the overlay colormap (position, RGB); the 256-entry
/// table interpolates linearly between them.
pub const HEAT_ANCHORS: [(f64, [u8; 3]); 6] = [
    (0.0, [0, 0, 128]),
    (0.125, [0, 0, 255]),
    (0.375, [0, 255, 255]),
    (0.625, [255, 255, 0]),
    (0.875, [255, 0, 0]),
    (1.0, [128, 0, 0]),
];

pub fn heat_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, entry) in lut.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        let seg = HEAT_ANCHORS
            .windows(2)
            .find(|w| t <= w[1].0)
            .unwrap_or(&HEAT_ANCHORS[4..6]);
        let (t0, c0) = seg[0];
        let (t1, c1) = seg[1];
        let f = (t - t0) / (t1 - t0);
        for k in 0..3 {
            entry[k] = (c0[k] as f64 + f * (c1[k] as f64 - c0[k] as f64)).round() as u8;
        }
    }
    lut
}

/// Heat colormap of `normalized` (values in `[0, 1]`) blended half and half
/// over the image, as interleaved RGB.
pub fn render_overlay(image: &ImageTensor, normalized: &[f64]) -> Result<Vec<u8>> {
    let hw = image.shape().pixels();
    if normalized.len() != hw {
        return Err(Error::config("overlay field does not match the image"));
    }
    let lut = heat_lut();
    let base = interleaved_u8(image);
    let c = image.channels();
    let mut out = Vec::with_capacity(3 * hw);
    for (p, &v) in normalized.iter().enumerate() {
        let idx = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        for k in 0..3 {
            let b = base[p * c + if c == 3 { k } else { 0 }] as u16;
            out.push(((b + lut[idx][k] as u16 + 1) / 2) as u8);
        }
    }
    Ok(out)
}

pub fn write_overlay(path: &Path, image: &ImageTensor, normalized: &[f64]) -> Result<()> {
    let rgb = render_overlay(image, normalized)?;
    std::fs::write(path, encode_png(image.width(), image.height(), true, &rgb)?)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
