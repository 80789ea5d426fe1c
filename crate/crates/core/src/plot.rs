//! Minimal line charts rasterized straight into PNG (no text rendering).

use std::path::Path;

use image::{Rgb, RgbImage as Rgb8};

use crate::error::{Error, Result};

pub struct Series<'a> {
    pub values: &'a [f64],
    pub color: [u8; 3],
}

const MARGIN: u32 = 24;

fn draw_line(img: &mut Rgb8, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + (x1 - x0) * t).round();
        let y = (y0 + (y1 - y0) * t).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Plots every series against its index, sharing one y range. Non-finite
/// values are skipped. Light grid lines mark quarters of each axis.
pub fn line_chart(series: &[Series<'_>], width: u32, height: u32) -> Rgb8 {
    let mut img = Rgb8::from_pixel(width, height, Rgb([255, 255, 255]));
    let finite = || series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let (pw, ph) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let (left, top) = (MARGIN as f64, MARGIN as f64);
    for q in 0..=4 {
        let f = q as f64 / 4.0;
        draw_line(&mut img, (left, top + ph * f), (left + pw, top + ph * f), [225, 225, 225]);
        draw_line(&mut img, (left + pw * f, top), (left + pw * f, top + ph), [225, 225, 225]);
    }
    draw_line(&mut img, (left, top + ph), (left + pw, top + ph), [0, 0, 0]);
    draw_line(&mut img, (left, top), (left, top + ph), [0, 0, 0]);
    if !lo.is_finite() || n == 0 {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let to_px = |i: usize, v: f64| {
        let x = left + if n > 1 { pw * i as f64 / (n - 1) as f64 } else { pw / 2.0 };
        (x, top + ph * (1.0 - (v - lo) / span))
    };
    for s in series {
        let mut prev: Option<(f64, f64)> = None;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = to_px(i, v);
            draw_line(&mut img, prev.unwrap_or(p), p, s.color);
            prev = Some(p);
        }
    }
    img
}

pub fn save_line_chart(path: &Path, series: &[Series<'_>]) -> Result<()> {
    line_chart(series, 640, 360).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
