//! Static PNG figures: sweep heatmaps and loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{arg, Error, Result};

const CELL: u32 = 48;
const MARGIN: u32 = 16;

/// Piecewise-linear dark-blue → teal → yellow ramp for `v ∈ [0, 1]`.
fn colormap(v: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 3] = [[68.0, 1.0, 84.0], [33.0, 145.0, 140.0], [253.0, 231.0, 37.0]];
    let v = v.clamp(0.0, 1.0) * 2.0;
    let i = (v.floor() as usize).min(1);
    let f = v - i as f64;
    let c = |k: usize| (STOPS[i][k] + f * (STOPS[i + 1][k] - STOPS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Heatmap of `values[row][col]`; NaN cells are drawn grey.
pub fn heatmap(values: &[Vec<f64>], path: &Path) -> Result<()> {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || values.iter().any(|r| r.len() != cols) {
        return arg("heatmap needs a non-empty rectangular matrix");
    }
    let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let w = cols as u32 * CELL + 2 * MARGIN;
    let h = rows as u32 * CELL + 2 * MARGIN;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let color = if v.is_finite() {
                colormap((v - lo) / span)
            } else {
                Rgb([160, 160, 160])
            };
            for y in 0..CELL - 2 {
                for x in 0..CELL - 2 {
                    img.put_pixel(MARGIN + c as u32 * CELL + x, MARGIN + r as u32 * CELL + y, color);
                }
            }
        }
    }
    save(&img, path)
}

/// Line plot of a loss sequence on a log scale when all values are positive.
pub fn loss_curve(losses: &[f64], path: &Path) -> Result<()> {
    let pts: Vec<(usize, f64)> = losses
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .collect();
    if pts.is_empty() {
        return arg("loss curve needs at least one finite value");
    }
    let log = pts.iter().all(|(_, v)| *v > 0.0);
    let ys: Vec<f64> = pts.iter().map(|(_, v)| if log { v.ln() } else { *v }).collect();
    let lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (640u32, 360u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (pw, ph) = (w - 2 * MARGIN, h - 2 * MARGIN);
    for x in MARGIN..w - MARGIN {
        img.put_pixel(x, h - MARGIN, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=h - MARGIN {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    let last = pts.last().unwrap().0.max(1) as f64;
    let to_px = |i: usize, y: f64| {
        let x = MARGIN as f64 + i as f64 / last * (pw - 1) as f64;
        let y = MARGIN as f64 + (1.0 - (y - lo) / span) * (ph - 1) as f64;
        (x, y)
    };
    let color = Rgb([31, 119, 180]);
    for k in 0..pts.len() {
        let (x1, y1) = to_px(pts[k].0, ys[k]);
        let (x0, y0) = if k == 0 { (x1, y1) } else { to_px(pts[k - 1].0, ys[k - 1]) };
        let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=n {
            let f = s as f64 / n as f64;
            let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            img.put_pixel(x.round() as u32, y.round() as u32, color);
        }
    }
    save(&img, path)
}
