//! PNG figures: frame strips, box plots and 2-D scatter plots.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use stylesmooth::metrics::GapSummary;
use stylesmooth::{Error, Result};

const PAD: u32 = 2;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([200, 200, 200]);

/// Ten well-separated colours, one per domain (cycled beyond ten).
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Lays out a `(N, C, H, W)` batch in `[-1, 1]` as one row, left to right.
pub fn frame_strip(frames: &Tensor) -> Result<RgbImage> {
    let (n, c, h, w) = frames.dims4()?;
    if c != 1 && c != 3 {
        return Err(Error::Data(format!("cannot draw {c}-channel frames")));
    }
    let data = frames.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let (h32, w32) = (h as u32, w as u32);
    let mut img = RgbImage::from_pixel(n as u32 * (w32 + PAD) + PAD, h32 + 2 * PAD, WHITE);
    let plane = h * w;
    for k in 0..n {
        let base = k * c * plane;
        let x0 = PAD + k as u32 * (w32 + PAD);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| to_byte(data[base + ch * plane + y * w + x]);
                let rgb = if c == 1 { [px(0); 3] } else { [px(0), px(1), px(2)] };
                img.put_pixel(x0 + x as u32, PAD + y as u32, Rgb(rgb));
            }
        }
    }
    Ok(img)
}

pub fn save_frame_strip(frames: &Tensor, path: &Path) -> Result<()> {
    save(&frame_strip(frames)?, path)
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: u32, c: Rgb<u8>) {
    for x in x0.min(x1)..=x0.max(x1) {
        img.put_pixel(x, y, c);
    }
}

fn vline(img: &mut RgbImage, x: u32, y0: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        img.put_pixel(x, y, c);
    }
}

/// Vertical box-and-whisker plot (min, quartiles, max). A grey line marks zero when
/// it lies in range.
pub fn box_plot(s: &GapSummary) -> RgbImage {
    let (width, height, margin) = (160u32, 320u32, 20u32);
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let lo = s.min.min(0.0);
    let hi = s.max.max(0.0);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = |v: f64| -> u32 {
        let t = (v - lo) / span;
        (height - margin) - (t * (height - 2 * margin) as f64).round() as u32
    };
    hline(&mut img, 5, width - 6, y(0.0), GREY);
    let (cx, half) = (width / 2, 30);
    vline(&mut img, cx, y(s.min), y(s.q1), BLACK);
    vline(&mut img, cx, y(s.q3), y(s.max), BLACK);
    hline(&mut img, cx - half / 2, cx + half / 2, y(s.min), BLACK);
    hline(&mut img, cx - half / 2, cx + half / 2, y(s.max), BLACK);
    hline(&mut img, cx - half, cx + half, y(s.q1), BLACK);
    hline(&mut img, cx - half, cx + half, y(s.q3), BLACK);
    vline(&mut img, cx - half, y(s.q1), y(s.q3), BLACK);
    vline(&mut img, cx + half, y(s.q1), y(s.q3), BLACK);
    let m = y(s.median);
    hline(&mut img, cx - half, cx + half, m, Rgb(PALETTE[3]));
    if m > 0 {
        hline(&mut img, cx - half, cx + half, m - 1, Rgb(PALETTE[3]));
    }
    img
}

pub fn save_box_plot(s: &GapSummary, path: &Path) -> Result<()> {
    save(&box_plot(s), path)
}

/// Scatter of 2-D points coloured by label, with axes through the origin when visible.
pub fn scatter(points: &[[f64; 2]], labels: &[usize]) -> Result<RgbImage> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::Data("scatter needs one label per point".into()));
    }
    let (size, margin) = (480u32, 16u32);
    let mut img = RgbImage::from_pixel(size, size, WHITE);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let inner = (size - 2 * margin - 1) as f64;
    let proj = |v: f64, k: usize| -> Option<u32> {
        let span = if hi[k] > lo[k] { hi[k] - lo[k] } else { 1.0 };
        let t = (v - lo[k]) / span;
        (0.0..=1.0).contains(&t).then(|| margin + (t * inner).round() as u32)
    };
    if let Some(x) = proj(0.0, 0) {
        vline(&mut img, x, margin, size - margin - 1, GREY);
    }
    if let Some(y) = proj(0.0, 1) {
        hline(&mut img, margin, size - margin - 1, size - 1 - y, GREY);
    }
    for (p, &l) in points.iter().zip(labels) {
        let (Some(x), Some(y)) = (proj(p[0], 0), proj(p[1], 1)) else { continue };
        let y = size - 1 - y;
        let c = Rgb(PALETTE[l % PALETTE.len()]);
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                img.put_pixel((x as i32 + dx) as u32, (y as i32 + dy) as u32, c);
            }
        }
    }
    Ok(img)
}

pub fn save_scatter(points: &[[f64; 2]], labels: &[usize], path: &Path) -> Result<()> {
    save(&scatter(points, labels)?, path)
}
