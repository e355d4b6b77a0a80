//! PNG export of rendered plots and attention heatmaps.

use std::io::Cursor;
use std::path::Path;

use plotfuse_core::Tensor;

use crate::error::{write, Error, Result};

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(path, None, e.to_string())
}

/// 8-bit RGB PNG of a channel-major `[3, H, W]` image with values in [0, 1].
pub fn encode_png(pixels: &Tensor) -> Result<Vec<u8>> {
    let s = pixels.shape();
    if s.len() != 3 || s[0] != 3 || s[1] == 0 || s[2] == 0 {
        return Err(Error::Core(plotfuse_core::Error::Contract(format!("png export expects [3, H, W], got {s:?}"))));
    }
    let (h, w) = (s[1], s[2]);
    let d = pixels.data();
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            rgb.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    let here = Path::new("<png>");
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| png_err(here, e))?;
        wr.write_image_data(&rgb).map_err(|e| png_err(here, e))?;
        wr.finish().map_err(|e| png_err(here, e))?;
    }
    Ok(out)
}

pub fn save_png(path: &Path, pixels: &Tensor) -> Result<()> {
    write(path, &encode_png(pixels)?)
}

/// Decode an 8-bit RGB PNG back into `[3, H, W]` values `v / 255`.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let here = Path::new("<png>");
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(|e| png_err(here, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(here, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(here, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(here, "only 8-bit RGB is supported"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f64::from(buf[p * 3 + c]) / 255.0
    }))
}

/// Dark blue → teal → yellow ramp for `t` in [0, 1].
fn ramp(t: f64) -> [f64; 3] {
    const STOPS: [[f64; 3]; 3] = [[0.27, 0.00, 0.33], [0.13, 0.57, 0.55], [0.99, 0.91, 0.14]];
    let t = t.clamp(0.0, 1.0) * 2.0;
    let k = (t as usize).min(1);
    let f = t - k as f64;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    [a[0] + (b[0] - a[0]) * f, a[1] + (b[1] - a[1]) * f, a[2] + (b[2] - a[2]) * f]
}

/// `[3, N·cell, M·cell]` heatmap of an `[N, M]` map, scaled by its maximum.
pub fn heatmap(map: &Tensor, cell: usize) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 2 || cell == 0 {
        return Err(Error::Core(plotfuse_core::Error::Contract(format!("heatmap expects [N, M], got {s:?}"))));
    }
    let (n, m) = (s[0], s[1]);
    let top = map.data().iter().copied().fold(0.0, f64::max);
    let scale = if top > 0.0 { 1.0 / top } else { 0.0 };
    let (h, w) = (n * cell, m * cell);
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let (y, x) = (p / w / cell, p % w / cell);
        ramp(map.data()[y * m + x] * scale)[c]
    }))
}
