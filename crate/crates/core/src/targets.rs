//! Ground-truth instances and the training targets derived from them.

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, PixelBox};
use crate::tensor::Tensor;

/// IoU a box displaced by the heatmap radius must keep.
pub const MIN_OVERLAP: f64 = 0.7;

/// A ground-truth object with its visible mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub class_id: usize,
    pub mask: BinaryMask,
    /// Tight box of `mask`.
    pub bbox: PixelBox,
    /// Box center `(x, y)` in input pixels.
    pub center: (f64, f64),
}

impl GroundTruthInstance {
    pub fn new(class_id: usize, mask: BinaryMask) -> Result<Self> {
        let bbox = mask
            .bbox()
            .ok_or_else(|| Error::Encoding("instance mask has no foreground pixels".into()))?;
        Ok(GroundTruthInstance {
            class_id,
            mask,
            bbox,
            center: box_center(&bbox),
        })
    }
}

pub fn box_center(b: &PixelBox) -> (f64, f64) {
    (b.x as f64 + b.w as f64 / 2.0, b.y as f64 + b.h as f64 / 2.0)
}

/// Small row-major grid of 0/1 values at feature stride.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl MaskGrid {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(
            [1, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("grid dimensions")
    }
}

/// Per-object training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTarget {
    pub class_id: usize,
    /// Low-resolution center `floor(p / R)` as `(x, y)` cells.
    pub center_index: (usize, usize),
    /// `p / R - floor(p / R)` as `(x, y)`.
    pub offset: [f64; 2],
    /// `(h, w)` in input pixels.
    pub size: [f64; 2],
    pub bbox: PixelBox,
    pub mask: MaskGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEncoding {
    /// `C x H x W` Gaussian center heatmap.
    pub heatmap: Tensor<f64>,
    pub objects: Vec<ObjectTarget>,
}

/// Radius (in the units of `box_h`/`box_w`) within which both box corners may
/// move while keeping IoU with the original at least `min_overlap`.
///
/// Minimum over three displacement cases: translated, shrunk on both sides and
/// grown on both sides.
pub fn gaussian_radius(box_h: f64, box_w: f64, min_overlap: f64) -> f64 {
    let (h, w, m) = (box_h, box_w, min_overlap);
    let sum = h + w;
    // (h - r)(w - r) / (2hw - (h - r)(w - r)) >= m
    let c1 = w * h * (1.0 - m) / (1.0 + m);
    let r1 = (sum - (sum * sum - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    // (h - 2r)(w - 2r) / hw >= m
    let c2 = (1.0 - m) * w * h;
    let r2 = (2.0 * sum - (4.0 * sum * sum - 16.0 * c2).max(0.0).sqrt()) / 8.0;
    // hw / ((h + 2r)(w + 2r)) >= m
    let b3 = 2.0 * m * sum;
    let c3 = (m - 1.0) * w * h;
    let r3 = (-b3 + (b3 * b3 - 16.0 * m * c3).max(0.0).sqrt()) / (8.0 * m);
    r1.min(r2).min(r3).max(0.0)
}

/// `floor(p / R)` and its fractional remainder, per axis.
pub fn split_center(center: (f64, f64), stride: usize) -> ((i64, i64), [f64; 2]) {
    let r = stride as f64;
    let (sx, sy) = (center.0 / r, center.1 / r);
    let (fx, fy) = (sx.floor(), sy.floor());
    ((fx as i64, fy as i64), [sx - fx, sy - fy])
}

fn center_cell(inst: &GroundTruthInstance, stride: usize, (h, w): (usize, usize)) -> Result<(usize, usize)> {
    let ((cx, cy), _) = split_center(inst.center, stride);
    if cx < 0 || cy < 0 || cx as usize >= w || cy as usize >= h {
        return Err(Error::Encoding(format!(
            "center ({:.2}, {:.2}) maps to cell ({cx}, {cy}) outside the {h}x{w} map",
            inst.center.0, inst.center.1
        )));
    }
    Ok((cx as usize, cy as usize))
}

/// `C x H x W` heatmap with an unnormalized Gaussian per object on its class
/// channel, overlapping splats merged by elementwise max.
pub fn render_heatmap(
    instances: &[GroundTruthInstance],
    num_classes: usize,
    map_size: (usize, usize),
    stride: usize,
) -> Result<Tensor<f64>> {
    let (h, w) = map_size;
    let mut heat = Tensor::<f64>::zeros([num_classes, h, w]);
    for inst in instances {
        if inst.class_id >= num_classes {
            return Err(Error::Encoding(format!(
                "class {} out of range for {num_classes} classes",
                inst.class_id
            )));
        }
        let (cx, cy) = center_cell(inst, stride, map_size)?;
        let r = stride as f64;
        let radius = gaussian_radius(inst.bbox.h as f64 / r, inst.bbox.w as f64 / r, MIN_OVERLAP);
        let sigma = radius / 3.0;
        let plane = &mut heat.data_mut()[inst.class_id * h * w..(inst.class_id + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx as f64, y as f64 - cy as f64);
                let v = gaussian(dx * dx + dy * dy, sigma);
                let cell = &mut plane[y * w + x];
                *cell = cell.max(v);
            }
        }
    }
    Ok(heat)
}

fn gaussian(dist2: f64, sigma: f64) -> f64 {
    if dist2 == 0.0 {
        1.0
    } else if sigma <= 0.0 {
        0.0
    } else {
        (-dist2 / (2.0 * sigma * sigma)).exp()
    }
}

/// Offset `p / R - floor(p / R)` as `(x, y)` and size `(h, w)` in pixels.
pub fn encode_offset_size(inst: &GroundTruthInstance, stride: usize) -> ([f64; 2], [f64; 2]) {
    let (_, offset) = split_center(inst.center, stride);
    (offset, [inst.bbox.h as f64, inst.bbox.w as f64])
}

/// Number of feature cells covering `len` pixels.
pub fn grid_cells(len: usize, stride: usize) -> usize {
    len.div_ceil(stride).max(1)
}

/// The instance mask inside its tight box, reduced to a
/// `ceil(h/R) x ceil(w/R)` grid: a cell is on when at least half of the box
/// pixels it covers are foreground.
pub fn encode_mask_target(inst: &GroundTruthInstance, stride: usize) -> MaskGrid {
    let b = inst.bbox;
    let (gh, gw) = (grid_cells(b.h, stride), grid_cells(b.w, stride));
    let mut data = vec![0u8; gh * gw];
    for gy in 0..gh {
        let ys = gy * stride..((gy + 1) * stride).min(b.h);
        for gx in 0..gw {
            let xs = gx * stride..((gx + 1) * stride).min(b.w);
            let total = ys.len() * xs.len();
            let on = ys
                .clone()
                .flat_map(|y| xs.clone().map(move |x| (y, x)))
                .filter(|&(y, x)| inst.mask.get(b.y as usize + y, b.x as usize + x))
                .count();
            data[gy * gw + gx] = u8::from(2 * on >= total);
        }
    }
    MaskGrid {
        height: gh,
        width: gw,
        data,
    }
}

/// Full target encoding for one image.
pub fn encode_targets(
    instances: &[GroundTruthInstance],
    num_classes: usize,
    map_size: (usize, usize),
    stride: usize,
) -> Result<TargetEncoding> {
    let heatmap = render_heatmap(instances, num_classes, map_size, stride)?;
    let objects = instances
        .iter()
        .map(|inst| {
            let center_index = center_cell(inst, stride, map_size)?;
            let (offset, size) = encode_offset_size(inst, stride);
            Ok(ObjectTarget {
                class_id: inst.class_id,
                center_index,
                offset,
                size,
                bbox: inst.bbox,
                mask: encode_mask_target(inst, stride),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TargetEncoding { heatmap, objects })
}

/// Origin (in feature cells) of the grid window for a box starting at pixel
/// `start`.
pub fn window_origin(start: f64, stride: usize) -> i64 {
    (start / stride as f64).round() as i64
}

/// Window origin shifted so `cells` cells fit inside a map of `len` cells.
pub fn clamped_origin(start: f64, stride: usize, cells: usize, len: usize) -> usize {
    let max = len.saturating_sub(cells) as i64;
    window_origin(start, stride).clamp(0, max) as usize
}

/// Per-class union of instance masks at feature stride (`classes x H x W`),
/// majority vote per cell. With one channel every class maps onto it.
pub fn rasterize_union(
    instances: &[GroundTruthInstance],
    channels: usize,
    map_size: (usize, usize),
    stride: usize,
) -> Tensor<f64> {
    let (h, w) = map_size;
    let mut out = Tensor::<f64>::zeros([channels, h, w]);
    if instances.is_empty() {
        return out;
    }
    let (ih, iw) = (instances[0].mask.height(), instances[0].mask.width());
    for c in 0..channels {
        let members: Vec<_> = instances
            .iter()
            .filter(|i| channels == 1 || i.class_id == c)
            .collect();
        if members.is_empty() {
            continue;
        }
        for gy in 0..h {
            for gx in 0..w {
                let (y0, y1) = (gy * stride, ((gy + 1) * stride).min(ih));
                let (x0, x1) = (gx * stride, ((gx + 1) * stride).min(iw));
                let total = (y1.saturating_sub(y0)) * (x1.saturating_sub(x0));
                if total == 0 {
                    continue;
                }
                let mut on = 0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        if members.iter().any(|m| m.mask.get(y, x)) {
                            on += 1;
                        }
                    }
                }
                if 2 * on >= total {
                    out.data_mut()[(c * h + gy) * w + gx] = 1.0;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |y, x| (y0..y0 + bh).contains(&y) && (x0..x0 + bw).contains(&x))
    }

    fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
        let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
        let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
        let i = ix * iy;
        i / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - i)
    }

    /// Largest r (to `step`) such that every displacement of the two corners by
    /// {-r, 0, r} per coordinate keeps IoU >= m.
    fn radius_by_shift_scan(h: f64, w: f64, m: f64, step: f64) -> f64 {
        let worst = |r: f64| {
            let mut best = f64::INFINITY;
            for code in 0..81 {
                let d: Vec<f64> = (0..4).map(|k| ((code / 3usize.pow(k)) % 3) as f64 - 1.0).collect();
                let b = [d[0] * r, d[1] * r, w + d[2] * r, h + d[3] * r];
                best = best.min(iou([0.0, 0.0, w, h], b));
            }
            best
        };
        let mut r = 0.0;
        while worst(r + step) >= m {
            r += step;
        }
        r
    }

    #[test]
    fn radius_vanishes_as_overlap_goes_to_one() {
        assert!(gaussian_radius(10.0, 10.0, 1.0 - 1e-12) < 1e-9);
        assert!(gaussian_radius(30.0, 5.0, 0.999999) < 1e-4);
    }

    #[test]
    fn radius_matches_shift_scan() {
        // 10x10: the integer scan stops at r = 0, and the fine scan pins the value.
        assert_eq!(radius_by_shift_scan(10.0, 10.0, 0.7, 1.0), 0.0);
        for &(h, w) in &[(10.0, 10.0), (5.0, 30.0), (40.0, 12.0), (3.0, 3.0)] {
            let oracle = radius_by_shift_scan(h, w, 0.7, 1e-4);
            let r = gaussian_radius(h, w, 0.7);
            assert!(r >= oracle && r < oracle + 1e-4, "{h}x{w}: {r} vs {oracle}");
        }
    }

    #[test]
    fn radius_monotone_in_box_size() {
        let mut prev = 0.0;
        for s in 1..200 {
            let r = gaussian_radius(s as f64 * 0.5, s as f64 * 0.75, 0.7);
            assert!(r >= prev);
            prev = r;
        }
        for h in 1..40 {
            for w in 1..40 {
                let r = gaussian_radius(h as f64, w as f64, 0.7);
                assert!(gaussian_radius(h as f64 + 1.0, w as f64, 0.7) >= r);
                assert!(gaussian_radius(h as f64, w as f64 + 1.0, 0.7) >= r);
            }
        }
    }

    #[test]
    fn offsets_and_sizes() {
        let inst = GroundTruthInstance::new(0, rect(32, 32, 10, 6, 4, 4)).unwrap();
        assert_eq!(inst.center, (8.0, 12.0));
        let ((cx, cy), off) = split_center(inst.center, 4);
        assert_eq!((cx, cy), (2, 3));
        assert_eq!(off, [0.0, 0.0]);

        let inst = GroundTruthInstance::new(0, rect(32, 32, 12, 7, 4, 4)).unwrap();
        assert_eq!(inst.center, (9.0, 14.0));
        assert_eq!(encode_offset_size(&inst, 4).0, [0.25, 0.5]);

        let inst = GroundTruthInstance::new(1, rect(64, 64, 3, 5, 37, 21)).unwrap();
        for r in [1, 2, 4, 8] {
            assert_eq!(encode_offset_size(&inst, r).1, [37.0, 21.0]);
        }
    }

    #[test]
    fn heatmap_peak_and_empty() {
        let inst = GroundTruthInstance::new(1, rect(64, 64, 20, 8, 17, 23)).unwrap();
        let y = render_heatmap(std::slice::from_ref(&inst), 3, (16, 16), 4).unwrap();
        let ((cx, cy), _) = split_center(inst.center, 4);
        assert_eq!(y.at(&[1, cy as usize, cx as usize]), 1.0);
        assert_eq!(y.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert!(y.data()[..256].iter().all(|&v| v == 0.0));

        let empty = render_heatmap(&[], 3, (16, 16), 4).unwrap();
        assert!(empty.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlapping_splats_take_max() {
        let a = GroundTruthInstance::new(0, rect(64, 64, 10, 10, 20, 20)).unwrap();
        let b = GroundTruthInstance::new(0, rect(64, 64, 18, 16, 20, 24)).unwrap();
        let y = render_heatmap(&[a.clone(), b.clone()], 1, (16, 16), 4).unwrap();
        let splat = |inst: &GroundTruthInstance, x: usize, yy: usize| {
            let ((cx, cy), _) = split_center(inst.center, 4);
            let r = gaussian_radius(inst.bbox.h as f64 / 4.0, inst.bbox.w as f64 / 4.0, 0.7);
            let s = r / 3.0;
            let d2 = (x as f64 - cx as f64).powi(2) + (yy as f64 - cy as f64).powi(2);
            (-d2 / (2.0 * s * s)).exp()
        };
        for yy in 0..16 {
            for x in 0..16 {
                let expected = splat(&a, x, yy).max(splat(&b, x, yy));
                assert!((y.at(&[0, yy, x]) - expected).abs() < 1e-15);
                assert!(y.at(&[0, yy, x]) <= 1.0);
            }
        }
    }

    #[test]
    fn center_outside_map_is_an_error() {
        let inst = GroundTruthInstance::new(0, rect(64, 64, 50, 50, 10, 10)).unwrap();
        assert!(matches!(
            render_heatmap(&[inst], 1, (8, 8), 4),
            Err(Error::Encoding(_))
        ));
    }

    #[test]
    fn mask_targets() {
        let solid = GroundTruthInstance::new(0, rect(40, 40, 3, 5, 13, 10)).unwrap();
        let t = encode_mask_target(&solid, 4);
        assert_eq!((t.height, t.width), (4, 3));
        assert!(t.data.iter().all(|&v| v == 1));

        let tiny = GroundTruthInstance::new(0, rect(40, 40, 3, 5, 2, 3)).unwrap();
        let t = encode_mask_target(&tiny, 4);
        assert_eq!((t.height, t.width, t.data.clone()), (1, 1, vec![1]));
    }

    #[test]
    fn disk_target_matches_pixel_count() {
        let (cy, cx, r) = (20.3, 17.8, 9.5);
        let disk = BinaryMask::from_fn(48, 48, |y, x| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            dy * dy + dx * dx <= r * r
        });
        let inst = GroundTruthInstance::new(0, disk.clone()).unwrap();
        let t = encode_mask_target(&inst, 4);
        let b = inst.bbox;
        for gy in 0..t.height {
            for gx in 0..t.width {
                let mut on = 0;
                let mut total = 0;
                for y in b.y as usize..b.y as usize + b.h {
                    for x in b.x as usize..b.x as usize + b.w {
                        let (ry, rx) = (y - b.y as usize, x - b.x as usize);
                        if ry / 4 == gy && rx / 4 == gx {
                            total += 1;
                            on += disk.get(y, x) as usize;
                        }
                    }
                }
                let expected = on as f64 / total as f64 >= 0.5;
                assert_eq!(t.get(gy, gx), expected, "cell ({gy}, {gx})");
            }
        }
    }

    #[test]
    fn coincident_centers_keep_both_objects() {
        let a = GroundTruthInstance::new(2, rect(32, 32, 8, 8, 8, 8)).unwrap();
        let b = GroundTruthInstance::new(2, rect(32, 32, 6, 6, 12, 12)).unwrap();
        let enc = encode_targets(&[a, b], 3, (8, 8), 4).unwrap();
        assert_eq!(enc.objects.len(), 2);
        assert_eq!(enc.objects[0].center_index, enc.objects[1].center_index);
        assert_ne!(enc.objects[0].size, enc.objects[1].size);
        assert_eq!(enc.heatmap.data().iter().filter(|&&v| v == 1.0).count(), 1);
    }

    #[test]
    fn union_raster_per_class() {
        let a = GroundTruthInstance::new(0, rect(16, 16, 0, 0, 8, 8)).unwrap();
        let b = GroundTruthInstance::new(1, rect(16, 16, 8, 8, 8, 8)).unwrap();
        let per_class = rasterize_union(&[a.clone(), b.clone()], 2, (4, 4), 4);
        assert_eq!(per_class.at(&[0, 0, 0]), 1.0);
        assert_eq!(per_class.at(&[0, 3, 3]), 0.0);
        assert_eq!(per_class.at(&[1, 3, 3]), 1.0);
        let agnostic = rasterize_union(&[a, b], 1, (4, 4), 4);
        assert_eq!(agnostic.data().iter().sum::<f64>(), 8.0);
    }
}
