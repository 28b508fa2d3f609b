use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Maps boxes between the original frame and the square network input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_width: u32,
    pub orig_height: u32,
}

impl LetterboxTransform {
    pub fn forward(&self, b: &BBox) -> BBox {
        BBox::new(b.x * self.scale + self.pad_x, b.y * self.scale + self.pad_y, b.w * self.scale, b.h * self.scale)
    }

    /// Back to original pixels, clipped to the original frame.
    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.pad_x) / self.scale,
            (b.y - self.pad_y) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
        .clip(self.orig_width as f64, self.orig_height as f64)
    }
}

fn channel_mean(img: &RgbImage) -> Rgb<u8> {
    let mut sum = [0u64; 3];
    for p in img.pixels() {
        for (s, &v) in sum.iter_mut().zip(&p.0) {
            *s += v as u64;
        }
    }
    let n = (img.width() as u64 * img.height() as u64).max(1);
    Rgb(sum.map(|s| ((s + n / 2) / n) as u8))
}

/// Scales the longer side to `target`, centers the result, and fills the
/// border with the image's per-channel mean.
pub fn letterbox(image: &RgbImage, gt: &BBox, target: u32) -> (RgbImage, BBox, LetterboxTransform) {
    let (w, h) = image.dimensions();
    let scale = target as f64 / w.max(h) as f64;
    let cw = ((w as f64 * scale).round() as u32).clamp(1, target);
    let ch = ((h as f64 * scale).round() as u32).clamp(1, target);
    let pad_x = (target - cw) / 2;
    let pad_y = (target - ch) / 2;
    let mut canvas = RgbImage::from_pixel(target, target, channel_mean(image));
    if (cw, ch) == (w, h) {
        imageops::replace(&mut canvas, image, pad_x as i64, pad_y as i64);
    } else {
        let resized = imageops::resize(image, cw, ch, FilterType::Triangle);
        imageops::replace(&mut canvas, &resized, pad_x as i64, pad_y as i64);
    }
    let t = LetterboxTransform {
        scale,
        pad_x: pad_x as f64,
        pad_y: pad_y as f64,
        orig_width: w,
        orig_height: h,
    };
    (canvas, t.forward(gt), t)
}

/// `3 × H × W` values in `[0, 1]`.
pub fn image_to_chw(image: &RgbImage) -> Vec<f64> {
    let (w, h) = image.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0; 3 * plane];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = p.0[c] as f64 / 255.0;
        }
    }
    out
}
