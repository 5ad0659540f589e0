//! Binary masks, tight boxes and run-length encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask; every stored byte is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

/// Integer pixel box, `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Intersection with a `height x width` canvas, if non-empty.
    pub fn clip(&self, height: usize, width: usize) -> Option<PixelBox> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = (self.x + self.w as i64).min(width as i64);
        let y1 = (self.y + self.h as i64).min(height as i64);
        (x1 > x0 && y1 > y0).then(|| PixelBox {
            x: x0,
            y: y0,
            w: (x1 - x0) as usize,
            h: (y1 - y0) as usize,
        })
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (y, x) = (y as i64, x as i64);
        x >= self.x && x < self.x + self.w as i64 && y >= self.y && y < self.y + self.h as i64
    }
}

/// Uncompressed run-length encoding: alternating run lengths over the
/// row-major pixel sequence, starting with a (possibly empty) run of zeros.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    /// Builds a mask from bytes, treating every non-zero byte as foreground.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::dim("mask", "pixels", height * width, bytes.len()));
        }
        Ok(BinaryMask {
            height,
            width,
            data: bytes.iter().map(|&b| u8::from(b != 0)).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        BinaryMask { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    /// Tight bounding box of the foreground.
    pub fn bbox(&self) -> Option<PixelBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        (x0 != usize::MAX).then(|| PixelBox {
            x: x0 as i64,
            y: y0 as i64,
            w: x1 - x0 + 1,
            h: y1 - y0 + 1,
        })
    }

    pub fn intersection(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a & b != 0)
            .count()
    }

    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = 0u8;
        let mut run = 0usize;
        for &b in &self.data {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            size: [self.height, self.width],
            counts,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Self> {
        let [height, width] = rle.size;
        let total: usize = rle.counts.iter().sum();
        if total != height * width {
            return Err(Error::dim("rle", "pixels", height * width, total));
        }
        let mut data = Vec::with_capacity(total);
        for (i, &run) in rle.counts.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, run));
        }
        Ok(BinaryMask { height, width, data })
    }
}

/// `|a ∩ b| / |a ∪ b|`, zero when the union is empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.height != b.height {
        return Err(Error::dim("mask_iou", "height", a.height, b.height));
    }
    if a.width != b.width {
        return Err(Error::dim("mask_iou", "width", a.width, b.width));
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_fixtures() {
        let a = BinaryMask::from_fn(3, 3, |y, x| y < 2 && x < 2);
        let b = BinaryMask::from_fn(3, 3, |y, x| y >= 1 && x >= 1);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        let c = BinaryMask::from_fn(3, 3, |y, _| y == 2);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let empty = BinaryMask::zeros(3, 3);
        assert_eq!(mask_iou(&empty, &empty).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::zeros(3, 4)).is_err());
    }

    #[test]
    fn rle_starts_with_zero_run() {
        let m = BinaryMask::from_bytes(2, 3, &[1, 1, 0, 0, 0, 1]).unwrap();
        assert_eq!(m.to_rle().counts, vec![0, 2, 3, 1]);
        let z = BinaryMask::zeros(2, 2);
        assert_eq!(z.to_rle().counts, vec![4]);
    }

    #[test]
    fn bbox_is_tight() {
        let m = BinaryMask::from_fn(10, 10, |y, x| (2..5).contains(&y) && (3..9).contains(&x));
        assert_eq!(m.bbox(), Some(PixelBox { x: 3, y: 2, w: 6, h: 3 }));
        assert_eq!(BinaryMask::zeros(4, 4).bbox(), None);
    }

    #[test]
    fn box_clipping() {
        let b = PixelBox { x: -3, y: 5, w: 10, h: 10 };
        assert_eq!(b.clip(8, 8), Some(PixelBox { x: 0, y: 5, w: 7, h: 3 }));
        let outside = PixelBox { x: 9, y: 0, w: 3, h: 3 };
        assert_eq!(outside.clip(8, 8), None);
    }

    proptest! {
        #[test]
        fn rle_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let m = BinaryMask::from_fn(h, w, |y, x| (seed >> ((y * w + x) % 64)) & 1 == 1);
            let rle = m.to_rle();
            prop_assert_eq!(rle.counts.iter().sum::<usize>(), h * w);
            prop_assert_eq!(BinaryMask::from_rle(&rle).unwrap(), m);
        }
    }
}
