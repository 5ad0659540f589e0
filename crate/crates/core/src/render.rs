//! PNG overlays of detections: tinted masks, box outlines, class and score.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::class_color;
use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 3x5 glyphs for `0-9` and `.`, one row per `u8`, high bit on the left.
const GLYPHS: [[u8; 5]; 11] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
    [0b000, 0b000, 0b000, 0b000, 0b010],
];

/// `3 x H x W` image in `[0, 1]` to 8-bit RGB.
pub fn to_rgb(image: &Tensor<f32>) -> RgbImage {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = image.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Draws digits and dots at `(x, y)`; other characters leave a gap.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    for (k, ch) in text.chars().enumerate() {
        let glyph = match ch {
            '0'..='9' => GLYPHS[ch as usize - '0' as usize],
            '.' => GLYPHS[10],
            _ => continue,
        };
        let ox = x + 4 * k as i64;
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    put(img, ox + col, y + row as i64, color);
                }
            }
        }
    }
}

fn color_of(class_id: usize, num_classes: usize) -> Rgb<u8> {
    let c = class_color(class_id, num_classes.max(class_id + 1));
    Rgb(c.map(|v| (v * 255.0).round() as u8))
}

/// Overlay of `detections` with score at least `min_score`.
pub fn overlay(image: &Tensor<f32>, detections: &[Detection], num_classes: usize, min_score: f64) -> RgbImage {
    let mut img = to_rgb(image);
    let white = Rgb([255, 255, 255]);
    for det in detections.iter().filter(|d| d.score >= min_score) {
        let color = color_of(det.class_id, num_classes);
        for y in 0..img.height() {
            for x in 0..img.width() {
                if det.mask.get(y as usize, x as usize) {
                    let p = img.get_pixel_mut(x, y);
                    for c in 0..3 {
                        p[c] = ((p[c] as u16 + 2 * color[c] as u16) / 3) as u8;
                    }
                }
            }
        }
        let b = det.bbox;
        let (x1, y1) = (b.x + b.w as i64 - 1, b.y + b.h as i64 - 1);
        for x in b.x..=x1 {
            put(&mut img, x, b.y, white);
            put(&mut img, x, y1, white);
        }
        for y in b.y..=y1 {
            put(&mut img, b.x, y, white);
            put(&mut img, x1, y, white);
        }
        let label = format!("{} {:.2}", det.class_id, det.score);
        draw_text(&mut img, b.x.max(0) + 1, (b.y - 6).max(0), &label, white);
    }
    img
}

/// Panels placed left to right with a 2-pixel gap.
pub fn side_by_side(panels: &[RgbImage]) -> RgbImage {
    let h = panels.iter().map(RgbImage::height).max().unwrap_or(0);
    let w = panels.iter().map(|p| p.width() + 2).sum::<u32>().saturating_sub(2);
    let mut out = RgbImage::new(w, h);
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, x0 as i64, 0);
        x0 += p.width() + 2;
    }
    out
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
