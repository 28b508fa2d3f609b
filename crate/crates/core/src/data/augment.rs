use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Saturation and value factors are drawn from `[1 - j, 1 + j]`.
    pub jitter: f64,
    /// Translation bound as a fraction of the frame.
    pub max_shift: f64,
    /// Scale factor drawn from `[1 - s, 1 + s]`.
    pub max_scale: f64,
    pub min_box: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            jitter: 0.2,
            max_shift: 0.1,
            max_scale: 0.1,
            min_box: 4.0,
        }
    }
}

/// Swaps the words `left` and `right`.
pub fn flip_query(query: &str) -> String {
    query
        .split(' ')
        .map(|w| match w {
            "left" => "right",
            "right" => "left",
            "Left" => "Right",
            "Right" => "Left",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mirrors the image, the box and the spatial words.
pub fn hflip(sample: &Sample) -> Sample {
    let w = sample.image.width() as f64;
    Sample {
        id: sample.id.clone(),
        image: image::imageops::flip_horizontal(&sample.image),
        query: flip_query(&sample.query),
        gt: BBox::new(w - sample.gt.x - sample.gt.w, sample.gt.y, sample.gt.w, sample.gt.h),
    }
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Multiplies saturation and value of every pixel.
pub fn jitter_hsv(image: &RgbImage, saturation: f64, value: f64) -> RgbImage {
    if saturation == 1.0 && value == 1.0 {
        return image.clone();
    }
    let mut out = image.clone();
    for p in out.pixels_mut() {
        let [h, s, v] = rgb_to_hsv(p.0.map(|c| c as f64 / 255.0));
        let rgb = hsv_to_rgb([h, (s * saturation).min(1.0), (v * value).min(1.0)]);
        p.0 = rgb.map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    out
}

/// Scales about the frame center by `scale`, then shifts by `(dx, dy)`.
/// Uncovered pixels get `fill`.
fn affine(image: &RgbImage, scale: f64, dx: f64, dy: f64, fill: Rgb<u8>) -> RgbImage {
    let (w, h) = image.dimensions();
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    RgbImage::from_fn(w, h, |x, y| {
        let sx = (x as f64 + 0.5 - dx - cx) / scale + cx;
        let sy = (y as f64 + 0.5 - dy - cy) / scale + cy;
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            fill
        } else {
            *image.get_pixel(sx as u32, sy as u32)
        }
    })
}

fn affine_box(b: &BBox, scale: f64, dx: f64, dy: f64, w: f64, h: f64) -> BBox {
    let (cx, cy) = (w / 2.0, h / 2.0);
    let x0 = (b.x - cx) * scale + cx + dx;
    let y0 = (b.y - cy) * scale + cy + dy;
    BBox::new(x0, y0, b.w * scale, b.h * scale).clip(w, h)
}

fn mean_color(img: &RgbImage) -> Rgb<u8> {
    let n = (img.width() * img.height()).max(1) as u64;
    let mut sum = [0u64; 3];
    for p in img.pixels() {
        for (s, &v) in sum.iter_mut().zip(&p.0) {
            *s += v as u64;
        }
    }
    Rgb(sum.map(|s| (s / n) as u8))
}

/// Random flip, HSV jitter and affine transform of a letterboxed sample.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut out = if rng.random_bool(cfg.flip_prob) { hflip(sample) } else { sample.clone() };
    let (sat, val) = if cfg.jitter > 0.0 {
        (rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter), rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter))
    } else {
        (1.0, 1.0)
    };
    out.image = jitter_hsv(&out.image, sat, val);
    let (w, h) = (out.image.width() as f64, out.image.height() as f64);
    for _ in 0..10 {
        let scale = if cfg.max_scale > 0.0 {
            rng.random_range(1.0 - cfg.max_scale..=1.0 + cfg.max_scale)
        } else {
            1.0
        };
        let (dx, dy) = if cfg.max_shift > 0.0 {
            (rng.random_range(-cfg.max_shift..=cfg.max_shift) * w, rng.random_range(-cfg.max_shift..=cfg.max_shift) * h)
        } else {
            (0.0, 0.0)
        };
        let b = affine_box(&out.gt, scale, dx, dy, w, h);
        if b.w >= cfg.min_box && b.h >= cfg.min_box {
            if scale != 1.0 || dx != 0.0 || dy != 0.0 {
                out.image = affine(&out.image, scale, dx, dy, mean_color(&out.image));
            }
            out.gt = b;
            return out;
        }
    }
    out
}
