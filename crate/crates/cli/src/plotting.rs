//! Minimal PNG line charts: white background, gray grid, one polyline.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;

/// Fraction-vs-threshold points for a Success curve (display convention:
/// inclusive at the threshold so perfect tracking draws the constant 1 line).
pub fn success_curve(ious: &[f64]) -> Vec<(f64, f64)> {
    (0..=100u32)
        .map(|i| {
            let tau = i as f64 / 100.0;
            let frac = ious.iter().filter(|&&v| v >= tau).count() as f64 / ious.len() as f64;
            (tau, frac)
        })
        .collect()
}

/// Fraction-vs-threshold points for a Precision curve.
pub fn precision_curve(dists: &[f64]) -> Vec<(f64, f64)> {
    (0..=100u32)
        .map(|i| {
            let tau = i as f64 * 0.02;
            let frac = dists.iter().filter(|&&v| v <= tau).count() as f64 / dists.len() as f64;
            (tau, frac)
        })
        .collect()
}

/// Per-frame trace points (frame index, value).
pub fn frame_trace(values: &[f64]) -> Vec<(f64, f64)> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| (i as f64, v))
        .collect()
}

/// Render one polyline over `x_range`/`y_range` to a PNG file.
pub fn line_chart(
    path: &Path,
    points: &[(f64, f64)],
    x_range: (f64, f64),
    y_range: (f64, f64),
    color: [u8; 3],
) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));

    let plot_w = WIDTH - 2 * MARGIN;
    let plot_h = HEIGHT - 2 * MARGIN;
    let grid = Rgb([225, 225, 225]);
    let axis = Rgb([60, 60, 60]);
    for i in 0..=10 {
        let x = MARGIN + plot_w * i / 10;
        let y = MARGIN + plot_h * i / 10;
        for yy in MARGIN..=MARGIN + plot_h {
            img.put_pixel(x, yy, grid);
        }
        for xx in MARGIN..=MARGIN + plot_w {
            img.put_pixel(xx, y, grid);
        }
    }
    for xx in MARGIN..=MARGIN + plot_w {
        img.put_pixel(xx, MARGIN, axis);
        img.put_pixel(xx, MARGIN + plot_h, axis);
    }
    for yy in MARGIN..=MARGIN + plot_h {
        img.put_pixel(MARGIN, yy, axis);
        img.put_pixel(MARGIN + plot_w, yy, axis);
    }

    let to_px = |(x, y): (f64, f64)| -> (f64, f64) {
        let fx = ((x - x_range.0) / (x_range.1 - x_range.0)).clamp(0.0, 1.0);
        let fy = ((y - y_range.0) / (y_range.1 - y_range.0)).clamp(0.0, 1.0);
        (
            MARGIN as f64 + fx * plot_w as f64,
            (MARGIN + plot_h) as f64 - fy * plot_h as f64,
        )
    };
    let pen = Rgb(color);
    for pair in points.windows(2) {
        let (x0, y0) = to_px(pair[0]);
        let (x1, y1) = to_px(pair[1]);
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 + t * (x1 - x0)).round() as u32;
            let y = (y0 + t * (y1 - y0)).round() as u32;
            if x < WIDTH && y < HEIGHT {
                img.put_pixel(x, y, pen);
                if x + 1 < WIDTH {
                    img.put_pixel(x + 1, y, pen);
                }
            }
        }
    }

    img.save(path)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracking_success_curve_is_constant_one() {
        let curve = success_curve(&[1.0, 1.0, 1.0]);
        assert_eq!(curve.len(), 101);
        assert!(curve.iter().all(|&(_, f)| f == 1.0));
    }

    #[test]
    fn curves_are_monotone_nonincreasing_and_nondecreasing() {
        let ious = [0.9, 0.4, 0.7, 0.0];
        let s = success_curve(&ious);
        for w in s.windows(2) {
            assert!(w[1].1 <= w[0].1);
        }
        let dists = [0.1, 0.5, 1.3, 2.5];
        let p = precision_curve(&dists);
        for w in p.windows(2) {
            assert!(w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn chart_file_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let pts = success_curve(&[0.8, 0.5]);
        line_chart(&path, &pts, (0.0, 1.0), (0.0, 1.0), [200, 60, 40]).unwrap();
        let meta = std::fs::metadata(&path).unwrap();
        assert!(meta.len() > 500);
    }
}
