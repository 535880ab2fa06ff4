//! Qualitative panels: input | ground truth | prediction overlay | causal-mask heatmap.

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{shape_err, Result};
use crate::metrics::BinaryMask;

const OVERLAY: Rgb<u8> = Rgb([255, 0, 0]);

/// Colormap stops for values in [0, 1], dark blue through teal to yellow.
const STOPS: [(f32, [f32; 3]); 5] = [
    (0.0, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.5, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.0, [253.0, 231.0, 37.0]),
];

/// Maps a value in [0, 1] (clamped) to RGB.
pub fn colormap(v: f32) -> Rgb<u8> {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let i = STOPS.iter().position(|(t, _)| *t >= v).unwrap_or(STOPS.len() - 1).max(1);
    let (t0, c0) = STOPS[i - 1];
    let (t1, c1) = STOPS[i];
    let a = (v - t0) / (t1 - t0);
    Rgb(std::array::from_fn(|k| (c0[k] + a * (c1[k] - c0[k])).round() as u8))
}

/// Input image with predicted foreground painted red.
pub fn overlay(input: &GrayImage, pred: &BinaryMask) -> Result<RgbImage> {
    let (w, h) = input.dimensions();
    if (pred.width, pred.height) != (w as usize, h as usize) {
        return Err(shape_err!("prediction {}x{} vs image {w}x{h}", pred.height, pred.width));
    }
    Ok(RgbImage::from_fn(w, h, |x, y| {
        if pred.data[y as usize * w as usize + x as usize] {
            OVERLAY
        } else {
            let g = input.get_pixel(x, y).0[0];
            Rgb([g, g, g])
        }
    }))
}

/// Number of pixels painted with the overlay color.
pub fn overlay_count(img: &RgbImage) -> usize {
    img.pixels().filter(|p| **p == OVERLAY).count()
}

pub fn mask_image(mask: &BinaryMask) -> GrayImage {
    GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        image::Luma([if mask.data[y as usize * mask.width + x as usize] { 255 } else { 0 }])
    })
}

/// Nearest-neighbour upsampling of a row-major `h × w` map to `out × out`.
pub fn upsample_nearest(values: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut v = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = (y * h / out_h).min(h - 1);
        for x in 0..out_w {
            let sx = (x * w / out_w).min(w - 1);
            v.push(values[sy * w + sx]);
        }
    }
    v
}

/// Side-by-side panel. `heat` is row-major at the input's resolution with values in [0, 1];
/// a missing ground truth or heatmap leaves its tile black.
pub fn render_panel(
    input: &GrayImage,
    gt: Option<&BinaryMask>,
    pred: &BinaryMask,
    heat: Option<&[f32]>,
) -> Result<RgbImage> {
    let (w, h) = input.dimensions();
    let n = (w * h) as usize;
    if heat.is_some_and(|m| m.len() != n) || gt.is_some_and(|g| g.data.len() != n) {
        return Err(shape_err!("panel inputs must all be {w}x{h}"));
    }
    let mut panel = RgbImage::new(4 * w, h);
    let tile = |panel: &mut RgbImage, k: u32, f: &dyn Fn(u32, u32) -> Rgb<u8>| {
        for y in 0..h {
            for x in 0..w {
                panel.put_pixel(k * w + x, y, f(x, y));
            }
        }
    };
    tile(&mut panel, 0, &|x, y| {
        let g = input.get_pixel(x, y).0[0];
        Rgb([g, g, g])
    });
    if let Some(gt) = gt {
        tile(&mut panel, 1, &|x, y| {
            let v = if gt.data[(y * w + x) as usize] { 255 } else { 0 };
            Rgb([v, v, v])
        });
    }
    let ov = overlay(input, pred)?;
    tile(&mut panel, 2, &|x, y| *ov.get_pixel(x, y));
    if let Some(heat) = heat {
        tile(&mut panel, 3, &|x, y| colormap(heat[(y * w + x) as usize]));
    }
    Ok(panel)
}
