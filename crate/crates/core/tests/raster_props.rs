mod common;

use plotfuse_core::raster::{make_palette, rasterize, Layout, RenderConfig};
use plotfuse_core::tensor::Tensor;
use proptest::prelude::*;

fn pixel(p: &Tensor, y: usize, x: usize) -> [f64; 3] {
    [p.at(&[0, y, x]), p.at(&[1, y, x]), p.at(&[2, y, x])]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pixels_blend_palette_with_background(
        seed in 0u64..10_000,
        c in 1usize..5,
        l in 2usize..60,
        grid in any::<bool>(),
        aa in any::<bool>(),
        width in 1usize..3,
    ) {
        let x = common::random_tensor(seed, &[l, c]);
        let cfg = RenderConfig {
            height: 40,
            width: 48,
            layout: if grid { Layout::Grid } else { Layout::Horizontal },
            antialias: aa,
            line_width: width,
            ..RenderConfig::default()
        };
        let plot = rasterize(&x, &cfg).unwrap();
        let bg = cfg.background;
        for y in 0..cfg.height {
            for xx in 0..cfg.width {
                let px = pixel(&plot.pixels, y, xx);
                if px == bg {
                    continue;
                }
                let explained = plot.palette.iter().any(|color| {
                    let k = (0..3).max_by(|&i, &j| (color[i] - bg[i]).abs().total_cmp(&(color[j] - bg[j]).abs())).unwrap();
                    let a = (px[k] - bg[k]) / (color[k] - bg[k]);
                    (-1e-12..=1.0 + 1e-12).contains(&a)
                        && (0..3).all(|i| (bg[i] * (1.0 - a) + color[i] * a - px[i]).abs() < 1e-12)
                });
                prop_assert!(explained, "pixel ({}, {}) = {:?}", y, xx, px);
            }
        }
    }

    #[test]
    fn grid_cells_match_horizontal_bands(seed in 0u64..10_000, l in 2usize..40, cell_h in 8usize..20, cell_w in 8usize..30) {
        let c = 4;
        let x = common::random_tensor(seed, &[l, c]);
        let grid = rasterize(&x, &RenderConfig { height: 2 * cell_h, width: 2 * cell_w, layout: Layout::Grid, ..RenderConfig::default() }).unwrap();
        let bands = rasterize(&x, &RenderConfig { height: 4 * cell_h, width: cell_w, layout: Layout::Horizontal, ..RenderConfig::default() }).unwrap();
        for (g, b) in grid.band_map.iter().zip(&bands.band_map) {
            prop_assert_eq!(g.channel, b.channel);
            for dy in 0..cell_h {
                for dx in 0..cell_w {
                    prop_assert_eq!(pixel(&grid.pixels, g.top + dy, g.left + dx), pixel(&bands.pixels, b.top + dy, b.left + dx));
                }
            }
        }
    }

    #[test]
    fn palette_is_distinct_and_fixed_without_coding(n in 1usize..60) {
        let p = make_palette(n, true);
        for i in 0..n {
            for j in i + 1..n {
                prop_assert_ne!(p[i], p[j]);
            }
        }
        let q = make_palette(n, false);
        prop_assert!(q.iter().all(|c| *c == q[0]));
    }
}
