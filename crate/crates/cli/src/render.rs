//! Box overlays and attention-map images.

use attngrounder::{BBox, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, Rgb, RgbImage};

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
/// Fill value when a map has no spread to normalize.
pub const FLAT_GRAY: u8 = 128;
const LINE_WIDTH: u32 = 2;

/// Draws the outline of `b` in red, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox) {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: u32| (v.round().max(0.0) as u32).min(hi - 1);
    let (x0, y0) = (clamp(b.x, w), clamp(b.y, h));
    let (x1, y1) = (clamp(b.right(), w), clamp(b.bottom(), h));
    for t in 0..LINE_WIDTH {
        for x in x0..=x1 {
            img.put_pixel(x, (y0 + t).min(h - 1), RED);
            img.put_pixel(x, y1.saturating_sub(t), RED);
        }
        for y in y0..=y1 {
            img.put_pixel((x0 + t).min(w - 1), y, RED);
            img.put_pixel(x1.saturating_sub(t), y, RED);
        }
    }
}

/// Per-map min-max normalization of a `rows × cols` grid to `[0, 255]`.
/// A constant (or non-finite) map comes out mid-gray.
pub fn normalize_map(map: &Tensor) -> GrayImage {
    let (rows, cols) = (map.dim(0), map.dim(1));
    let data = map.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread = hi - lo;
    let flat = !(spread.is_finite() && spread > 1e-12);
    GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        if flat {
            return Luma([FLAT_GRAY]);
        }
        let v = (data[y as usize * cols + x as usize] - lo) / spread;
        Luma([(255.0 * v).round().clamp(0.0, 255.0) as u8])
    })
}

/// Nearest-neighbour upsampling keeps the cell structure visible.
pub fn upsample(map: &GrayImage, size: u32) -> GrayImage {
    imageops::resize(map, size, size, FilterType::Nearest)
}

/// Input image tinted red by the mean of the attention maps, with the
/// predicted box on top.
pub fn composite(input: &RgbImage, maps: &[GrayImage], predicted: &BBox) -> RgbImage {
    let mut out = input.clone();
    if !maps.is_empty() {
        for (x, y, px) in out.enumerate_pixels_mut() {
            let heat = maps.iter().map(|m| m.get_pixel(x, y).0[0] as f64).sum::<f64>() / maps.len() as f64 / 255.0;
            let [r, g, b] = px.0;
            let mix = |c: u8, target: f64| (0.5 * c as f64 + 0.5 * target).round() as u8;
            *px = Rgb([mix(r, 255.0 * heat), mix(g, 0.0), mix(b, 0.0)]);
        }
    }
    draw_box(&mut out, predicted);
    out
}
