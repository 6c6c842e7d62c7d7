//! Minimal PNG line charts for error curves.

use std::path::Path;

use image::{Rgb, RgbImage};
use ikno::{IknoError, Result};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 5] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40], [148, 103, 189]];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Draws each series against its index on shared axes (y from 0 to the
/// largest value). No text is rendered; the CSV carries the numbers.
pub fn line_chart(series: &[Vec<f64>], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let (left, bottom, right, top) = (MARGIN as i64, (H - MARGIN) as i64, (W - MARGIN) as i64, MARGIN as i64);
    line(&mut img, (left, bottom), (right, bottom), black);
    line(&mut img, (left, bottom), (left, top), black);
    let n = series.iter().map(Vec::len).max().unwrap_or(0);
    let ymax = series.iter().flatten().cloned().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if n >= 2 && ymax > 0.0 {
        let px = |i: usize| left + ((right - left) as f64 * i as f64 / (n - 1) as f64).round() as i64;
        let py = |v: f64| bottom - ((bottom - top) as f64 * v / ymax).round() as i64;
        for (k, s) in series.iter().enumerate() {
            let c = Rgb(PALETTE[k % PALETTE.len()]);
            for i in 1..s.len() {
                line(&mut img, (px(i - 1), py(s[i - 1])), (px(i), py(s[i])), c);
            }
        }
    }
    img.save(path).map_err(|e| IknoError::Io(std::io::Error::other(e.to_string())))
}
