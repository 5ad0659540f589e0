//! COCO-style mask average precision.

use serde::{Deserialize, Serialize};

use crate::decode::Detection;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, PixelBox};
use crate::targets::GroundTruthInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Detections kept per image and class, best first.
    pub max_dets: usize,
    /// Objects below this fraction of the canvas area count as small.
    pub small_fraction: f64,
    /// Objects above this fraction of the canvas area count as large.
    pub large_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
            max_dets: 100,
            small_fraction: 1.0 / 64.0,
            large_fraction: 1.0 / 16.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() || self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("IoU thresholds must be non-empty and in (0, 1]".into()));
        }
        if !(0.0 <= self.small_fraction && self.small_fraction <= self.large_fraction) {
            return Err(Error::Config("area fractions must satisfy 0 <= small <= large".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Mean over all IoU thresholds.
    pub ap: f64,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// `None` when no ground truth falls in the bucket.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    /// AP per class over all thresholds; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// `(threshold, AP)` pairs.
    pub per_threshold: Vec<(f64, f64)>,
    pub num_gt: usize,
    pub num_det: usize,
}

impl ApReport {
    /// `ap50`, or 0 when there was nothing to score.
    pub fn ap50_or_zero(&self) -> f64 {
        self.ap50.unwrap_or(0.0)
    }
}

impl std::fmt::Display for ApReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let o = |v: Option<f64>| v.map_or("  n/a".to_string(), |v| format!("{v:.4}"));
        writeln!(f, "AP      {:.4}", self.ap)?;
        writeln!(f, "AP50    {}", o(self.ap50))?;
        writeln!(f, "AP75    {}", o(self.ap75))?;
        writeln!(f, "AP_S    {}", o(self.ap_small))?;
        writeln!(f, "AP_M    {}", o(self.ap_medium))?;
        writeln!(f, "AP_L    {}", o(self.ap_large))?;
        for (c, ap) in self.per_class.iter().enumerate() {
            writeln!(f, "class {c} {}", o(*ap))?;
        }
        write!(f, "gt {} / det {}", self.num_gt, self.num_det)
    }
}

struct Item<'a> {
    mask: &'a BinaryMask,
    area: usize,
    bbox: Option<PixelBox>,
}

impl<'a> Item<'a> {
    fn new(mask: &'a BinaryMask) -> Self {
        Item {
            mask,
            area: mask.area(),
            bbox: mask.bbox(),
        }
    }
}

fn iou(a: &Item, b: &Item) -> f64 {
    let (Some(ba), Some(bb)) = (a.bbox, b.bbox) else {
        return 0.0;
    };
    let x0 = ba.x.max(bb.x);
    let y0 = ba.y.max(bb.y);
    let x1 = (ba.x + ba.w as i64).min(bb.x + bb.w as i64);
    let y1 = (ba.y + ba.h as i64).min(bb.y + bb.h as i64);
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let mut inter = 0usize;
    for y in y0 as usize..y1 as usize {
        for x in x0 as usize..x1 as usize {
            inter += usize::from(a.mask.get(y, x) && b.mask.get(y, x));
        }
    }
    inter as f64 / (a.area + b.area - inter) as f64
}

/// One image's candidates and truths for a single class.
struct ClassImage<'a> {
    dets: Vec<(f64, Item<'a>)>,
    gts: Vec<Item<'a>>,
    /// `ious[d][g]`
    ious: Vec<Vec<f64>>,
}

/// Flattened per-detection outcome used for the PR curve.
struct Scored {
    score: f64,
    matched: bool,
    ignored: bool,
}

/// Greedy score-order matching at one threshold for one area range.
fn match_image(ci: &ClassImage, threshold: f64, range: (f64, f64), out: &mut Vec<Scored>) -> usize {
    let outside = |area: usize| (area as f64) < range.0 || (area as f64) > range.1;
    // Non-ignored truths first, stable.
    let mut order: Vec<usize> = (0..ci.gts.len()).collect();
    order.sort_by_key(|&g| outside(ci.gts[g].area));
    let gt_ignored: Vec<bool> = order.iter().map(|&g| outside(ci.gts[g].area)).collect();
    let mut taken = vec![false; order.len()];
    let limit = threshold.min(1.0 - 1e-10);
    for (d, (score, det)) in ci.dets.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = limit;
        for (slot, &g) in order.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            // Once a real match exists, ignored truths cannot replace it.
            if let Some(b) = best {
                if !gt_ignored[b] && gt_ignored[slot] {
                    break;
                }
            }
            let v = ci.ious[d][g];
            if v < best_iou || (best.is_some() && v == best_iou) {
                continue;
            }
            best_iou = v;
            best = Some(slot);
        }
        let (matched, ignored) = match best {
            Some(slot) => {
                taken[slot] = true;
                (true, gt_ignored[slot])
            }
            None => (false, outside(det.area)),
        };
        out.push(Scored {
            score: *score,
            matched,
            ignored,
        });
    }
    gt_ignored.iter().filter(|i| !**i).count()
}

/// 101-point interpolated AP from outcomes pooled over images.
fn interpolated_ap(mut scored: Vec<Scored>, num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    // Stable sort keeps image order among equal scores.
    scored.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for s in scored.iter().filter(|s| !s.ignored) {
        if s.matched {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / 101.0)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Mask AP of `detections` against `ground_truth`, image by image.
pub fn match_and_score(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruthInstance>],
    num_classes: usize,
    cfg: &EvalConfig,
) -> Result<ApReport> {
    cfg.validate()?;
    if detections.len() != ground_truth.len() {
        return Err(Error::dim("match_and_score", "images", ground_truth.len(), detections.len()));
    }
    let mut num_gt = 0;
    let mut num_det = 0;
    let mut canvas_area = 0.0f64;
    // per class, per image
    let mut table: Vec<Vec<ClassImage>> = (0..num_classes).map(|_| Vec::new()).collect();
    for (dets, gts) in detections.iter().zip(ground_truth) {
        for g in gts {
            if g.class_id >= num_classes {
                return Err(Error::dim("match_and_score", "class", num_classes, g.class_id + 1));
            }
            let area = (g.mask.height() * g.mask.width()) as f64;
            canvas_area = canvas_area.max(area);
        }
        for (c, slot) in table.iter_mut().enumerate() {
            let mut ds: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
            ds.sort_by(|a, b| b.score.total_cmp(&a.score));
            ds.truncate(cfg.max_dets);
            let gs: Vec<Item> = gts.iter().filter(|g| g.class_id == c).map(|g| Item::new(&g.mask)).collect();
            let ds: Vec<(f64, Item)> = ds.into_iter().map(|d| (d.score, Item::new(&d.mask))).collect();
            for (_, d) in &ds {
                if let Some(g) = gs.first() {
                    if (d.mask.height(), d.mask.width()) != (g.mask.height(), g.mask.width()) {
                        return Err(Error::Contract(format!(
                            "detection canvas {}x{} differs from ground truth {}x{}",
                            d.mask.height(),
                            d.mask.width(),
                            g.mask.height(),
                            g.mask.width()
                        )));
                    }
                }
            }
            num_gt += gs.len();
            num_det += ds.len();
            let ious = ds.iter().map(|(_, d)| gs.iter().map(|g| iou(d, g)).collect()).collect();
            slot.push(ClassImage { dets: ds, gts: gs, ious });
        }
    }
    if canvas_area == 0.0 {
        canvas_area = detections
            .iter()
            .flatten()
            .map(|d| (d.mask.height() * d.mask.width()) as f64)
            .fold(0.0, f64::max);
    }
    let small = canvas_area * cfg.small_fraction;
    let large = canvas_area * cfg.large_fraction;
    let ranges = [(0.0, f64::INFINITY), (0.0, small), (small, large), (large, f64::INFINITY)];

    // ap[range][threshold][class]
    let ap_at = |range: (f64, f64), t: f64, class: &[ClassImage]| -> Option<f64> {
        let mut scored = Vec::new();
        let mut n = 0;
        for ci in class {
            n += match_image(ci, t, range, &mut scored);
        }
        interpolated_ap(scored, n)
    };
    let grid: Vec<Vec<Vec<Option<f64>>>> = ranges
        .iter()
        .map(|&range| {
            cfg.iou_thresholds
                .iter()
                .map(|&t| table.iter().map(|class| ap_at(range, t, class)).collect())
                .collect()
        })
        .collect();
    let summarize = |range: usize, thr: Option<usize>| -> Option<f64> {
        let rows: Vec<&Vec<Option<f64>>> = match thr {
            Some(i) => vec![&grid[range][i]],
            None => grid[range].iter().collect(),
        };
        mean(rows.into_iter().flat_map(|r| r.iter().flatten().copied()))
    };
    let find = |t: f64| cfg.iou_thresholds.iter().position(|&v| (v - t).abs() < 1e-9);
    let per_class = (0..num_classes)
        .map(|c| mean(grid[0].iter().filter_map(|row| row[c])))
        .collect();
    let per_threshold = cfg
        .iou_thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, summarize(0, Some(i)).unwrap_or(0.0)))
        .collect();
    Ok(ApReport {
        ap: summarize(0, None).unwrap_or(0.0),
        ap50: find(0.5).map(|i| summarize(0, Some(i)).unwrap_or(0.0)),
        ap75: find(0.75).map(|i| summarize(0, Some(i)).unwrap_or(0.0)),
        ap_small: summarize(1, None),
        ap_medium: summarize(2, None),
        ap_large: summarize(3, None),
        per_class,
        per_threshold,
        num_gt,
        num_det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(canvas: usize, y: usize, x: usize, side: usize) -> BinaryMask {
        BinaryMask::from_fn(canvas, canvas, |py, px| {
            (y..y + side).contains(&py) && (x..x + side).contains(&px)
        })
    }

    fn det(class_id: usize, score: f64, mask: BinaryMask) -> Detection {
        let bbox = mask.bbox().unwrap_or(PixelBox { x: 0, y: 0, w: 1, h: 1 });
        Detection {
            class_id,
            score,
            center: (0.0, 0.0),
            bbox,
            mask,
        }
    }

    fn gt(class_id: usize, mask: BinaryMask) -> GroundTruthInstance {
        GroundTruthInstance::new(class_id, mask).unwrap()
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![vec![gt(0, square(32, 2, 2, 6)), gt(1, square(32, 16, 16, 10))]];
        let dets = vec![gts[0].iter().map(|g| det(g.class_id, 1.0, g.mask.clone())).collect()];
        let r = match_and_score(&dets, &gts, 2, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.ap50, Some(1.0));
        assert_eq!(r.ap75, Some(1.0));
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
    }

    #[test]
    fn no_detections_score_zero() {
        let gts = vec![vec![gt(0, square(16, 2, 2, 4))]];
        let r = match_and_score(&[vec![]], &gts, 1, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.ap50, Some(0.0));
    }

    #[test]
    fn half_recall() {
        let gts = vec![vec![gt(0, square(32, 0, 0, 8)), gt(0, square(32, 16, 16, 8))]];
        let dets = vec![vec![det(0, 0.9, square(32, 0, 0, 8))]];
        let r = match_and_score(&dets, &gts, 1, &EvalConfig::default()).unwrap();
        // precision 1 up to recall 0.5: 51 of 101 points
        assert!((r.ap - 51.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let gts = vec![vec![gt(0, square(32, 0, 0, 8))]];
        let m = square(32, 0, 0, 8);
        let dets = vec![vec![det(0, 0.9, m.clone()), det(0, 0.8, m)]];
        let r = match_and_score(&dets, &gts, 1, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, 1.0);
        let dets = vec![vec![det(0, 0.7, square(32, 0, 0, 8)), det(0, 0.8, square(32, 20, 20, 8))]];
        let r = match_and_score(&dets, &gts, 1, &EvalConfig::default()).unwrap();
        assert!((r.ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn area_buckets() {
        // canvas 64x64: small < 64 px, large > 256 px
        let gts = vec![vec![gt(0, square(64, 0, 0, 4)), gt(0, square(64, 30, 30, 20))]];
        let dets = vec![vec![det(0, 0.9, square(64, 30, 30, 20))]];
        let r = match_and_score(&dets, &gts, 1, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap_large, Some(1.0));
        assert_eq!(r.ap_small, Some(0.0));
        assert_eq!(r.ap_medium, None);
    }

    #[test]
    fn wrong_class_does_not_match() {
        let gts = vec![vec![gt(0, square(16, 0, 0, 8))]];
        let dets = vec![vec![det(1, 0.9, square(16, 0, 0, 8))]];
        let r = match_and_score(&dets, &gts, 2, &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, 0.0);
        assert_eq!(r.per_class, vec![Some(0.0), None]);
    }
}
