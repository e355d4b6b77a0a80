//! Software line-plot rasterizer: one stroked polyline per channel, each in
//! its own band (horizontal layout) or grid cell.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

/// Stroke color used for every channel when color coding is off.
pub const FIXED_STROKE: Rgb = [0.12, 0.47, 0.71];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Horizontal,
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub layout: Layout,
    pub color_coding: bool,
    pub line_width: usize,
    pub antialias: bool,
    pub background: Rgb,
    pub c_max: usize,
    pub corr_threshold: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 224,
            width: 224,
            layout: Layout::Horizontal,
            color_coding: true,
            line_width: 1,
            antialias: true,
            background: [1.0, 1.0, 1.0],
            c_max: 50,
            corr_threshold: 0.95,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width < 2 {
            return Err(Error::config("render.height", "image must be at least 1x2 pixels"));
        }
        if self.line_width == 0 {
            return Err(Error::config("render.line_width", "must be positive"));
        }
        if self.c_max == 0 {
            return Err(Error::config("render.c_max", "must be positive"));
        }
        if !(self.corr_threshold > 0.0 && self.corr_threshold <= 1.0) {
            return Err(Error::config("render.corr_threshold", "must lie in (0, 1]"));
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("render.background", "components must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Pixel rectangle `[top, bottom) × [left, right)` owned by one channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Band {
    pub channel: usize,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedPlot {
    /// `[3, H, W]`, channel-major, row-major within a channel.
    pub pixels: Tensor,
    pub layout: Layout,
    /// One entry per plotted channel, in plotting order.
    pub band_map: Vec<Band>,
    pub palette: Vec<Rgb>,
    pub plotted_channels: Vec<usize>,
    pub advisories: Vec<String>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> Rgb {
    let h6 = h * 6.0;
    let sector = math::floor(h6);
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `n` evenly spaced hues at saturation 0.85 and value 0.90, or `n` copies of
/// [`FIXED_STROKE`] without color coding.
pub fn make_palette(n: usize, color_coding: bool) -> Vec<Rgb> {
    (0..n).map(|i| if color_coding { hsv_to_rgb(i as f64 / n as f64, 0.85, 0.90) } else { FIXED_STROKE }).collect()
}

fn column(x: &Tensor, c: usize) -> Vec<f64> {
    let cs = x.dim(1);
    x.data().iter().skip(c).step_by(cs).copied().collect()
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = math::mean_var(a);
    let (mb, vb) = math::mean_var(b);
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / math::sqrt(va * vb)
}

/// Channels to plot for a `[L, C]` window.
pub fn select_plot_channels(x: &Tensor, c_max: usize, corr_threshold: f64) -> Vec<usize> {
    let c = x.dim(1);
    if c <= c_max {
        return (0..c).collect();
    }
    let cols: Vec<Vec<f64>> = (0..c).map(|i| column(x, i)).collect();
    let vars: Vec<f64> = cols.iter().map(|col| math::mean_var(col).1).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| vars[b].total_cmp(&vars[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let worst = kept.iter().map(|&k| pearson(&cols[i], &cols[k]).abs()).fold(0.0, f64::max);
        if worst < corr_threshold {
            kept.push(i);
        }
    }
    kept.truncate(c_max);
    kept.sort_unstable();
    kept
}

/// Cells for `n` plotted channels.
fn layout_cells(n: usize, cfg: &RenderConfig) -> (Vec<Band>, Vec<String>) {
    let (rows, cols) = match cfg.layout {
        Layout::Horizontal => (n, 1),
        Layout::Grid => {
            let rows = isqrt_ceil(n);
            (rows, math::div_ceil(n, rows))
        }
    };
    let ch = cfg.height / rows;
    let cw = cfg.width / cols;
    let mut cells = Vec::with_capacity(n);
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        // leftover pixels go to the last row / column
        let bottom = if r + 1 == rows { cfg.height } else { (r + 1) * ch };
        let right = if c + 1 == cols { cfg.width } else { (c + 1) * cw };
        cells.push(Band { channel: i, top: r * ch, bottom, left: c * cw, right });
    }
    let mut advisories = Vec::new();
    if ch < 8 {
        advisories.push(format!("bands are {ch} px tall; consider reducing channels or raising the image height"));
    }
    (cells, advisories)
}

fn isqrt_ceil(n: usize) -> usize {
    let mut r = 0;
    while r * r < n {
        r += 1;
    }
    r
}

/// Coverage accumulator for one cell, combined with `max`.
struct Coverage {
    cell: Band,
    w: usize,
    a: Vec<f64>,
}

impl Coverage {
    fn new(cell: Band) -> Self {
        let w = cell.right - cell.left;
        Self { cell, w, a: vec![0.0; w * (cell.bottom - cell.top)] }
    }

    fn plot(&mut self, x: i64, y: i64, v: f64) {
        let c = self.cell;
        if x < c.left as i64 || x >= c.right as i64 || y < c.top as i64 || y >= c.bottom as i64 {
            return;
        }
        let i = (y as usize - c.top) * self.w + (x as usize - c.left);
        if v > self.a[i] {
            self.a[i] = v;
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), antialias: bool) {
        let steep = (y1 - y0).abs() > (x1 - x0).abs();
        let (mut a0, mut b0, mut a1, mut b1) = if steep { (y0, x0, y1, x1) } else { (x0, y0, x1, y1) };
        if a0 > a1 {
            core::mem::swap(&mut a0, &mut a1);
            core::mem::swap(&mut b0, &mut b1);
        }
        let da = a1 - a0;
        let db = b1 - b0;
        for a in a0..=a1 {
            let (base, frac) = if da == 0 {
                (b0, 0.0)
            } else {
                let num = db * (a - a0);
                let q = num.div_euclid(da);
                (b0 + q, num.rem_euclid(da) as f64 / da as f64)
            };
            let mut put = |b: i64, v: f64| {
                if steep {
                    self.plot(b, a, v)
                } else {
                    self.plot(a, b, v)
                }
            };
            if antialias {
                put(base, 1.0 - frac);
                if frac > 0.0 {
                    put(base + 1, frac);
                }
            } else {
                put(if frac >= 0.5 { base + 1 } else { base }, 1.0);
            }
        }
    }

    fn dilate(&mut self, line_width: usize) {
        if line_width <= 1 {
            return;
        }
        let lo = ((line_width - 1) / 2) as i64;
        let hi = (line_width / 2) as i64;
        let h = (self.cell.bottom - self.cell.top) as i64;
        let w = self.w as i64;
        let src = self.a.clone();
        for y in 0..h {
            for x in 0..w {
                let mut m = 0.0f64;
                for dy in -lo..=hi {
                    for dx in -lo..=hi {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && yy < h && xx >= 0 && xx < w {
                            m = m.max(src[(yy * w + xx) as usize]);
                        }
                    }
                }
                self.a[(y * w + x) as usize] = m;
            }
        }
    }
}

fn pixel_x(t: usize, len: usize, cell: &Band) -> i64 {
    let w = (cell.right - cell.left) as i64;
    let (t, l1) = (t as i64, len as i64 - 1);
    // round(t·(w−1)/(L−1)) with halves rounded up, in integers
    cell.left as i64 + (2 * t * (w - 1) + l1) / (2 * l1)
}

fn pixel_ys(col: &[f64], cell: &Band) -> Vec<i64> {
    let h = cell.bottom - cell.top;
    let m = 2.min(h.saturating_sub(1) / 2);
    let y_top = (cell.top + m) as i64;
    let y_bot = (cell.bottom - 1 - m) as i64;
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        let mid = (cell.top + (h - 1) / 2) as i64;
        return vec![mid; col.len()];
    }
    let span = (y_bot - y_top) as f64;
    col.iter()
        .map(|&v| {
            let frac = (v - lo) / (hi - lo);
            y_bot - math::round(frac * span) as i64
        })
        .collect()
}

/// Render a `[L, C]` window.
pub fn rasterize(x: &Tensor, cfg: &RenderConfig) -> Result<RenderedPlot> {
    cfg.validate()?;
    if x.rank() != 2 || x.dim(0) < 2 || x.dim(1) == 0 {
        return Err(Error::Render(format!("need a [L >= 2, C >= 1] window, got {:?}", x.shape())));
    }
    if !x.all_finite() {
        return Err(Error::Render("window contains non-finite values".into()));
    }
    let plotted = select_plot_channels(x, cfg.c_max, cfg.corr_threshold);
    let n = plotted.len();
    if cfg.layout == Layout::Horizontal && cfg.height / n < 4 {
        return Err(Error::Render(format!(
            "{n} channels leave {} px per band (< 4); reduce channels (c_max) or raise the image height",
            cfg.height / n
        )));
    }
    let (mut cells, advisories) = layout_cells(n, cfg);
    if cfg.layout == Layout::Grid && cells.iter().any(|c| c.bottom - c.top < 1 || c.right - c.left < 2) {
        return Err(Error::Render(format!("{n} channels do not fit a grid on a {}x{} image", cfg.height, cfg.width)));
    }
    let palette = make_palette(n, cfg.color_coding);
    let (h, w) = (cfg.height, cfg.width);
    let mut pixels = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        pixels[ch * h * w..(ch + 1) * h * w].fill(cfg.background[ch]);
    }
    let len = x.dim(0);
    for (slot, (&src, cell)) in plotted.iter().zip(cells.iter_mut()).enumerate() {
        cell.channel = src;
        let col = column(x, src);
        let ys = pixel_ys(&col, cell);
        let mut cov = Coverage::new(*cell);
        for t in 0..len - 1 {
            cov.line((pixel_x(t, len, cell), ys[t]), (pixel_x(t + 1, len, cell), ys[t + 1]), cfg.antialias);
        }
        cov.dilate(cfg.line_width);
        let color = palette[slot];
        for yy in cell.top..cell.bottom {
            for xx in cell.left..cell.right {
                let a = cov.a[(yy - cell.top) * cov.w + (xx - cell.left)];
                if a > 0.0 {
                    for ch in 0..3 {
                        let bg = cfg.background[ch];
                        pixels[ch * h * w + yy * w + xx] = bg * (1.0 - a) + color[ch] * a;
                    }
                }
            }
        }
    }
    Ok(RenderedPlot {
        pixels: Tensor::new(&[3, h, w], pixels)?,
        layout: cfg.layout,
        band_map: cells,
        palette,
        plotted_channels: plotted,
        advisories,
    })
}

/// Render every window of a `[B, L, C]` batch into `[B, 3, H, W]`.
pub fn rasterize_batch(x: &Tensor, cfg: &RenderConfig) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::Render(format!("expected [B, L, C], got {:?}", x.shape())));
    }
    let plots = (0..x.dim(0)).map(|b| rasterize(&x.row(b), cfg).map(|p| p.pixels)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&plots)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(h: usize, w: usize) -> RenderConfig {
        RenderConfig { height: h, width: w, ..RenderConfig::default() }
    }

    #[test]
    fn palette_hues() {
        assert_eq!(make_palette(1, true)[0], hsv_to_rgb(0.0, 0.85, 0.9));
        let p = make_palette(4, true);
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(p[i], p[j]);
            }
        }
        let q = make_palette(3, false);
        assert!(q.iter().all(|c| *c == q[0]));
    }

    #[test]
    fn constant_series_single_midline() {
        let x = Tensor::full(&[16, 1], 3.0);
        let p = rasterize(&x, &small(32, 40)).unwrap();
        let mid = 31 / 2;
        for y in 0..32 {
            for xx in 0..40 {
                let v = p.pixels.at(&[0, y, xx]);
                if y == mid {
                    assert_eq!(v, make_palette(1, true)[0][0]);
                } else {
                    assert_eq!(v, 1.0);
                }
            }
        }
    }

    #[test]
    fn two_band_tiling() {
        let x = Tensor::from_fn(&[10, 2], |i| (i as f64).sin());
        let p = rasterize(&x, &RenderConfig::default()).unwrap();
        assert_eq!((p.band_map[0].top, p.band_map[0].bottom), (0, 112));
        assert_eq!((p.band_map[1].top, p.band_map[1].bottom), (112, 224));
    }

    #[test]
    fn too_many_channels_errors() {
        let x = Tensor::from_fn(&[10, 20], |i| ((i * 7919) % 13) as f64);
        let cfg = RenderConfig { c_max: 100, corr_threshold: 1.0, ..small(64, 64) };
        assert!(matches!(rasterize(&x, &cfg), Err(Error::Render(_))));
    }

    #[test]
    fn identical_channels_collapse() {
        let col: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let x = Tensor::from_fn(&[20, 2], |i| col[i / 2]);
        assert_eq!(select_plot_channels(&x, 1, 0.95).len(), 1);
        assert_eq!(select_plot_channels(&x, 50, 0.95), [0, 1]);
    }

    #[test]
    fn grid_cells() {
        let x = Tensor::from_fn(&[10, 5], |i| (i as f64 * 0.37).sin());
        let cfg = RenderConfig { layout: Layout::Grid, ..small(30, 31) };
        let p = rasterize(&x, &cfg).unwrap();
        // 3 rows x 2 columns, leftovers in the last row / column
        assert_eq!(p.band_map[4], Band { channel: 4, top: 20, bottom: 30, left: 0, right: 15 });
        assert_eq!(p.band_map[1].right, 31);
    }

    #[test]
    fn thick_lines_stay_in_band() {
        let x = Tensor::from_fn(&[8, 2], |i| (i % 3) as f64);
        let cfg = RenderConfig { line_width: 3, color_coding: false, ..small(20, 16) };
        let p = rasterize(&x, &cfg).unwrap();
        assert!(p.pixels.all_finite());
        assert!(p.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
