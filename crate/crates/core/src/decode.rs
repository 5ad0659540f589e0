//! Turning head outputs into scored instance masks. There is no suppression
//! step: every local maximum of the center heatmap is a candidate.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::sigmoid;
use crate::losses::Ablation;
use crate::mask::{BinaryMask, PixelBox, Rle};
use crate::model::{HeadOutputs, ModelConfig, SaliencyMode};
use crate::targets::{clamped_origin, grid_cells, window_origin};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub top_k: usize,
    /// Side of the square peak neighborhood; odd.
    pub window: usize,
    pub mask_threshold: f64,
    pub score_threshold: f64,
    pub ablation: Ablation,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            top_k: 100,
            window: 3,
            mask_threshold: 0.4,
            score_threshold: 0.0,
            ablation: Ablation::Full,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("peak window must be odd and >= 1, got {}", self.window)));
        }
        if !(self.mask_threshold > 0.0 && self.mask_threshold < 1.0) {
            return Err(Error::Config(format!(
                "mask threshold must lie in (0, 1), got {}",
                self.mask_threshold
            )));
        }
        if !self.score_threshold.is_finite() {
            return Err(Error::Config("score threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub y: usize,
    pub x: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    /// `(x, y)` in input pixels.
    pub center: (f64, f64),
    /// Unclipped predicted box.
    pub bbox: PixelBox,
    /// Full-canvas mask, zero outside the clipped box.
    pub mask: BinaryMask,
}

/// Result of decoding one image.
#[derive(Debug, Clone, Default)]
pub struct Decoded {
    pub detections: Vec<Detection>,
    /// Candidates whose box missed the image entirely.
    pub dropped: usize,
}

/// Local maxima of each heatmap channel, best first.
///
/// A pixel is a peak when no neighbor in its `window x window` neighborhood
/// (clipped to the map) is larger. Equal scores order by flat index.
pub fn extract_peaks<T: Float>(heatmap_logits: &Tensor<T>, cfg: &DecodeConfig) -> Result<Vec<Peak>> {
    let s = heatmap_logits.shape();
    if s.len() != 3 {
        return Err(Error::dim("extract_peaks", "rank", 3, s.len()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let half = cfg.window / 2;
    let data = heatmap_logits.data();
    let mut peaks = Vec::new();
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let ys = y.saturating_sub(half)..(y + half + 1).min(h);
            for x in 0..w {
                let v = plane[y * w + x];
                let xs = x.saturating_sub(half)..(x + half + 1).min(w);
                let is_peak = ys
                    .clone()
                    .all(|ny| xs.clone().all(|nx| plane[ny * w + nx] <= v));
                if is_peak {
                    peaks.push((ch * h * w + y * w + x, v));
                }
            }
        }
    }
    // Sigmoid is monotone, so ranking by logit ranks by score.
    peaks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    peaks.truncate(cfg.top_k);
    Ok(peaks
        .into_iter()
        .map(|(flat, v)| Peak {
            class_id: flat / (h * w),
            y: flat % (h * w) / w,
            x: flat % w,
            score: sigmoid(v.to_f64().unwrap_or(f64::NAN)),
        })
        .collect())
}

/// `(p~ + offset) * R` as `(x, y)` in input pixels.
pub fn refine_center<T: Float>(peak: &Peak, offset_map: &Tensor<T>, stride: usize) -> (f64, f64) {
    let dx = offset_map.at(&[0, peak.y, peak.x]).to_f64().unwrap_or(0.0);
    let dy = offset_map.at(&[1, peak.y, peak.x]).to_f64().unwrap_or(0.0);
    let r = stride as f64;
    ((peak.x as f64 + dx) * r, (peak.y as f64 + dy) * r)
}

/// Predicted `(h, w)` at the peak, at least one pixel per side.
pub fn predicted_size<T: Float>(peak: &Peak, size_map: &Tensor<T>) -> (f64, f64) {
    let h = size_map.at(&[0, peak.y, peak.x]).to_f64().unwrap_or(1.0);
    let w = size_map.at(&[1, peak.y, peak.x]).to_f64().unwrap_or(1.0);
    (h.max(1.0), w.max(1.0))
}

/// Integer box around a center, each side at least one pixel.
pub fn box_from_center(center: (f64, f64), size: (f64, f64)) -> PixelBox {
    let (h, w) = size;
    PixelBox {
        x: (center.0 - w / 2.0).round() as i64,
        y: (center.1 - h / 2.0).round() as i64,
        w: (w.round() as usize).max(1),
        h: (h.round() as usize).max(1),
    }
}

/// Local shape logits at the peak: the `S^2` vector as a row-major `S x S`
/// array, resized to the box grid.
pub fn build_local_shape<T: Float>(
    shape_map: &Tensor<T>,
    peak: &Peak,
    shape_size: usize,
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    let s = shape_map.shape();
    if s.len() != 3 || s[0] != shape_size * shape_size {
        return Err(Error::dim(
            "build_local_shape",
            "shape channels",
            shape_size * shape_size,
            s.first().copied().unwrap_or(0),
        ));
    }
    let vector: Vec<T> = (0..s[0]).map(|k| shape_map.at(&[k, peak.y, peak.x])).collect();
    Tensor::new([shape_size, shape_size], vector)?.resize_bilinear(grid.0, grid.1)
}

/// Saliency logits on the box grid of `bbox`, or `None` when the box misses
/// the `canvas` entirely.
///
/// A box inside the canvas reads the same window as training. Otherwise the
/// window follows the box and cells outside the map get `-inf`.
pub fn crop_saliency<T: Float>(
    saliency: &Tensor<T>,
    bbox: &PixelBox,
    class_id: usize,
    mode: SaliencyMode,
    stride: usize,
    canvas: (usize, usize),
) -> Result<Option<Tensor<T>>> {
    let s = saliency.shape();
    if s.len() != 3 {
        return Err(Error::dim("crop_saliency", "rank", 3, s.len()));
    }
    let channel = match mode {
        SaliencyMode::ClassAgnostic => 0,
        SaliencyMode::ClassSpecific => class_id,
    };
    if channel >= s[0] {
        return Err(Error::dim("crop_saliency", "channel", s[0], channel + 1));
    }
    if bbox.clip(canvas.0, canvas.1).is_none() {
        return Ok(None);
    }
    let (map_h, map_w) = (s[1], s[2]);
    let (gh, gw) = (grid_cells(bbox.h, stride), grid_cells(bbox.w, stride));
    let inside = bbox.x >= 0
        && bbox.y >= 0
        && bbox.x as usize + bbox.w <= canvas.1
        && bbox.y as usize + bbox.h <= canvas.0;
    let (oy, ox) = if inside {
        (
            clamped_origin(bbox.y as f64, stride, gh, map_h) as i64,
            clamped_origin(bbox.x as f64, stride, gw, map_w) as i64,
        )
    } else {
        (window_origin(bbox.y as f64, stride), window_origin(bbox.x as f64, stride))
    };
    let plane = &saliency.data()[channel * map_h * map_w..(channel + 1) * map_h * map_w];
    Ok(Some(Tensor::from_fn([gh, gw], |i| {
        let (my, mx) = (oy + (i / gw) as i64, ox + (i % gw) as i64);
        if my < 0 || mx < 0 || my >= map_h as i64 || mx >= map_w as i64 {
            T::neg_infinity()
        } else {
            plane[my as usize * map_w + mx as usize]
        }
    })))
}

/// Mask probabilities on the box grid for the selected branches.
pub fn assemble_probabilities<T: Float>(local: Option<&Tensor<T>>, global: Option<&Tensor<T>>) -> Result<Vec<f64>> {
    let p = |t: &Tensor<T>| -> Vec<f64> { t.data().iter().map(|v| sigmoid(v.to_f64().unwrap_or(f64::NAN))).collect() };
    match (local, global) {
        (Some(l), Some(g)) => {
            if l.shape() != g.shape() {
                return Err(Error::Contract(format!(
                    "assemble: shape {:?} and saliency {:?} grids differ",
                    l.shape(),
                    g.shape()
                )));
            }
            Ok(p(l).into_iter().zip(p(g)).map(|(a, b)| a * b).collect())
        }
        (Some(t), None) | (None, Some(t)) => Ok(p(t)),
        (None, None) => Err(Error::Contract("assemble needs at least one branch".into())),
    }
}

/// Thresholds the box-grid probabilities and pastes them into a full canvas
/// with nearest-neighbor upsampling (grid cell = pixel offset / R).
pub fn paste_mask(
    probs: &[f64],
    grid: (usize, usize),
    bbox: &PixelBox,
    stride: usize,
    canvas: (usize, usize),
    threshold: f64,
) -> BinaryMask {
    let mut mask = BinaryMask::zeros(canvas.0, canvas.1);
    let Some(clip) = bbox.clip(canvas.0, canvas.1) else {
        return mask;
    };
    for py in clip.y as usize..clip.y as usize + clip.h {
        let gy = ((py as i64 - bbox.y) as usize / stride).min(grid.0 - 1);
        for px in clip.x as usize..clip.x as usize + clip.w {
            let gx = ((px as i64 - bbox.x) as usize / stride).min(grid.1 - 1);
            if probs[gy * grid.1 + gx] > threshold {
                mask.set(py, px, true);
            }
        }
    }
    mask
}

/// Full decode of one image's head outputs.
pub fn decode_instances<T: Float>(outputs: &HeadOutputs<T>, model: &ModelConfig, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let stride = model.output_stride;
    let (map_h, map_w) = (outputs.heatmap.shape()[1], outputs.heatmap.shape()[2]);
    let canvas = (map_h * stride, map_w * stride);
    let mut out = Decoded::default();
    for peak in extract_peaks(&outputs.heatmap, cfg)? {
        if peak.score < cfg.score_threshold {
            continue;
        }
        let center = refine_center(&peak, &outputs.offset, stride);
        let bbox = box_from_center(center, predicted_size(&peak, &outputs.size));
        let grid = (grid_cells(bbox.h, stride), grid_cells(bbox.w, stride));
        let global = if cfg.ablation.uses_saliency() {
            match crop_saliency(&outputs.saliency, &bbox, peak.class_id, model.saliency_mode, stride, canvas)? {
                Some(g) => Some(g),
                None => {
                    out.dropped += 1;
                    continue;
                }
            }
        } else if bbox.clip(canvas.0, canvas.1).is_none() {
            out.dropped += 1;
            continue;
        } else {
            None
        };
        let local = if cfg.ablation.uses_shape() {
            Some(build_local_shape(&outputs.shape, &peak, model.shape_size, grid)?)
        } else {
            None
        };
        let probs = assemble_probabilities(local.as_ref(), global.as_ref())?;
        out.detections.push(Detection {
            class_id: peak.class_id,
            score: peak.score,
            center,
            bbox,
            mask: paste_mask(&probs, grid, &bbox, stride, canvas, cfg.mask_threshold),
        });
    }
    Ok(out)
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class: usize,
    pub score: f64,
    /// `[x, y, h, w]`
    #[serde(rename = "box")]
    pub bbox: [i64; 4],
    pub mask: Rle,
}

impl DetectionRecord {
    pub fn new(image_id: &str, det: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            class: det.class_id,
            score: det.score,
            bbox: [det.bbox.x, det.bbox.y, det.bbox.h as i64, det.bbox.w as i64],
            mask: det.mask.to_rle(),
        }
    }

    pub fn to_detection(&self) -> Result<Detection> {
        let [x, y, h, w] = self.bbox;
        if h < 1 || w < 1 {
            return Err(Error::Format(format!("detection box {:?} has a non-positive side", self.bbox)));
        }
        Ok(Detection {
            class_id: self.class,
            score: self.score,
            center: (x as f64 + w as f64 / 2.0, y as f64 + h as f64 / 2.0),
            bbox: PixelBox {
                x,
                y,
                w: w as usize,
                h: h as usize,
            },
            mask: BinaryMask::from_rle(&self.mask)?,
        })
    }
}

pub fn write_detections(w: &mut impl Write, records: &[DetectionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a detections file; blank lines are skipped.
pub fn read_detections(r: impl BufRead, path: &std::path::Path) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
