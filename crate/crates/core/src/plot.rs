//! Minimal static PNG charts: a polyline and a bar chart on plain axes.

use image::{Rgb, RgbImage};

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: u32 = 40;
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const INK: Rgb<u8> = Rgb([31, 119, 180]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    for x in MARGIN..W - MARGIN / 2 {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN / 2..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn encode(img: &RgbImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("png encoding to memory");
    out.into_inner()
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64)) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if (0..W as i64).contains(&x) && (0..H as i64).contains(&y) {
            img.put_pixel(x as u32, y as u32, INK);
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

fn range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) }
}

/// Polyline through `points`; non-finite points are skipped.
pub fn line_png(points: &[(f64, f64)], log_x: bool) -> Vec<u8> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .map(|&(x, y)| (if log_x { x.log10() } else { x }, y))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let mut img = canvas();
    let (x0, x1) = range(pts.iter().map(|p| p.0));
    let (y0, y1) = range(pts.iter().map(|p| p.1));
    let (pw, ph) = ((W - MARGIN - MARGIN / 2) as f64, (H - MARGIN - MARGIN / 2) as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            (MARGIN as f64 + (x - x0) / (x1 - x0) * pw).round() as i64,
            ((H - MARGIN) as f64 - (y - y0) / (y1 - y0) * ph).round() as i64,
        )
    };
    for w in pts.windows(2) {
        line(&mut img, to_px(w[0]), to_px(w[1]));
    }
    encode(&img)
}

/// One bar per value, scaled to the largest of `1` and `max(values)`.
pub fn bar_png(values: &[f64]) -> Vec<u8> {
    let mut img = canvas();
    let top = values.iter().copied().fold(1.0f64, f64::max);
    let pw = (W - MARGIN - MARGIN / 2) as f64;
    let ph = (H - MARGIN - MARGIN / 2) as f64;
    let slot = pw / values.len().max(1) as f64;
    for (i, &v) in values.iter().enumerate() {
        let h = (v.max(0.0) / top * ph).round() as u32;
        let left = MARGIN as f64 + i as f64 * slot + slot * 0.15;
        let right = left + slot * 0.7;
        for x in left.round() as u32..right.round() as u32 {
            for y in (H - MARGIN - h)..(H - MARGIN) {
                img.put_pixel(x, y, INK);
            }
        }
    }
    encode(&img)
}
