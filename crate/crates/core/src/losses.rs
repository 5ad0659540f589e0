//! Center, offset, size and assembled-mask losses, plus the optional direct
//! saliency supervision.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::SaliencyMode;
use crate::targets::{clamped_origin, ObjectTarget};
use crate::tensor::{Float, Tensor};

/// Which branches form the instance mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// `sigmoid(L) * sigmoid(G)`
    #[default]
    Full,
    /// `sigmoid(L)`
    ShapeOnly,
    /// `sigmoid(G)`
    SaliencyOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::ShapeOnly, Ablation::SaliencyOnly];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::ShapeOnly => "shape-only",
            Ablation::SaliencyOnly => "saliency-only",
        }
    }

    pub fn uses_shape(self) -> bool {
        self != Ablation::SaliencyOnly
    }

    pub fn uses_saliency(self) -> bool {
        self != Ablation::ShapeOnly
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s || a.name().replace('-', "_") == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_p: f64,
    pub lambda_off: f64,
    pub lambda_size: f64,
    pub lambda_mask: f64,
    /// Direct BCE on class-specific saliency; ignored for class-agnostic maps.
    pub aux_saliency: bool,
    pub aux_weight: f64,
    pub ablation: Ablation,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 2.0,
            beta: 4.0,
            lambda_p: 1.0,
            lambda_off: 1.0,
            lambda_size: 0.1,
            lambda_mask: 1.0,
            aux_saliency: true,
            aux_weight: 1.0,
            ablation: Ablation::Full,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha,
            self.beta,
            self.lambda_p,
            self.lambda_off,
            self.lambda_size,
            self.lambda_mask,
            self.aux_weight,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights and focal exponents must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn aux_enabled(&self, mode: SaliencyMode) -> bool {
        self.aux_saliency && mode == SaliencyMode::ClassSpecific && self.ablation.uses_saliency()
    }
}

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_p: f64,
    pub l_off: f64,
    pub l_size: f64,
    pub l_mask: f64,
    pub l_aux: f64,
    pub l_seg: f64,
}

impl LossBreakdown {
    /// Elementwise running sum, for averaging over a batch.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_p += other.l_p;
        self.l_off += other.l_off;
        self.l_size += other.l_size;
        self.l_mask += other.l_mask;
        self.l_aux += other.l_aux;
        self.l_seg += other.l_seg;
    }

    pub fn scaled(&self, f: f64) -> LossBreakdown {
        LossBreakdown {
            l_p: self.l_p * f,
            l_off: self.l_off * f,
            l_size: self.l_size * f,
            l_mask: self.l_mask * f,
            l_aux: self.l_aux * f,
            l_seg: self.l_seg * f,
        }
    }
}

fn zero<T: Float>(tape: &mut Tape<T>) -> Var {
    tape.constant(Tensor::scalar(T::zero()))
}

/// Focal center loss normalized by the object count (at least one).
pub fn focal_center_loss<T: Float>(
    tape: &mut Tape<T>,
    heatmap_logits: Var,
    target: &Tensor<f64>,
    num_objects: usize,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let norm = T::lit(num_objects.max(1) as f64);
    tape.focal_loss(heatmap_logits, &target.cast(), T::lit(alpha), T::lit(beta), norm)
}

fn point_l1<T: Float>(
    tape: &mut Tape<T>,
    map: Var,
    objects: &[ObjectTarget],
    value: impl Fn(&ObjectTarget) -> [f64; 2],
) -> Result<Var> {
    if objects.is_empty() {
        return Ok(zero(tape));
    }
    let points: Vec<_> = objects.iter().map(|o| (o.center_index.1, o.center_index.0)).collect();
    let pred = tape.gather(map, &points)?;
    let target = Tensor::new(
        [objects.len(), 2],
        objects.iter().flat_map(|o| value(o).map(T::lit)).collect(),
    )?;
    let total = tape.l1_sum(pred, &target)?;
    Ok(tape.scale(total, T::lit(1.0 / objects.len() as f64)))
}

/// Mean L1 between predicted and true sub-cell offsets at object centers.
pub fn offset_loss<T: Float>(tape: &mut Tape<T>, offset_map: Var, objects: &[ObjectTarget]) -> Result<Var> {
    point_l1(tape, offset_map, objects, |o| o.offset)
}

/// Mean L1 between predicted and true `(h, w)` at object centers.
pub fn size_loss<T: Float>(tape: &mut Tape<T>, size_map: Var, objects: &[ObjectTarget]) -> Result<Var> {
    point_l1(tape, size_map, objects, |o| o.size)
}

#[derive(Debug, Clone, Copy)]
pub struct MaskLossSpec {
    pub shape_size: usize,
    pub stride: usize,
    pub saliency_mode: SaliencyMode,
    pub ablation: Ablation,
}

pub struct MaskLoss {
    pub loss: Var,
    /// Objects dropped because their window could not be cropped.
    pub skipped: usize,
}

/// Mean per-object BCE between the assembled mask and its target grid.
///
/// `shape_vectors` is `N x S^2`, one row per object in `objects` order, read at
/// the ground-truth centers. Saliency is cropped at the ground-truth boxes.
pub fn mask_loss<T: Float>(
    tape: &mut Tape<T>,
    shape_vectors: Option<Var>,
    saliency: Var,
    objects: &[ObjectTarget],
    spec: &MaskLossSpec,
) -> Result<MaskLoss> {
    if objects.is_empty() {
        return Ok(MaskLoss {
            loss: zero(tape),
            skipped: 0,
        });
    }
    let s = spec.shape_size;
    let shapes = match (spec.ablation.uses_shape(), shape_vectors) {
        (true, Some(v)) => {
            let rows = tape.shape(v)[0];
            if rows != objects.len() {
                return Err(Error::dim("mask_loss", "shape rows", objects.len(), rows));
            }
            Some(tape.reshape(v, [rows, s, s])?)
        }
        (true, None) => {
            return Err(Error::Contract("mask_loss needs shape vectors unless saliency-only".into()))
        }
        (false, _) => None,
    };
    let sal_shape = tape.shape(saliency).to_vec();
    let (map_h, map_w) = (sal_shape[1], sal_shape[2]);
    let mut terms = Vec::with_capacity(objects.len());
    let mut skipped = 0;
    for (k, obj) in objects.iter().enumerate() {
        let (gh, gw) = (obj.mask.height, obj.mask.width);
        let target = obj.mask.to_tensor().cast::<T>();
        let local = match shapes {
            Some(sv) => {
                let one = tape.channels(sv, k, 1)?;
                Some(tape.bilinear_resize(one, gh, gw)?)
            }
            None => None,
        };
        let global = if spec.ablation.uses_saliency() {
            let channel = match spec.saliency_mode {
                SaliencyMode::ClassAgnostic => 0,
                SaliencyMode::ClassSpecific => obj.class_id,
            };
            let y0 = clamped_origin(obj.bbox.y as f64, spec.stride, gh, map_h);
            let x0 = clamped_origin(obj.bbox.x as f64, spec.stride, gw, map_w);
            let plane = tape.channels(saliency, channel, 1)?;
            match tape.crop(plane, y0, x0, gh.min(map_h), gw.min(map_w)) {
                Ok(g) if tape.shape(g) == [1, gh, gw] => Some(g),
                Ok(_) | Err(Error::EmptyCrop { .. }) => {
                    skipped += 1;
                    log::warn!("mask loss: skipped object {k} with an uncroppable window");
                    continue;
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let term = match (local, global) {
            (Some(l), Some(g)) => tape.assembled_bce(l, g, &target)?,
            (Some(l), None) => tape.bce_with_logits(l, &target)?,
            (None, Some(g)) => tape.bce_with_logits(g, &target)?,
            (None, None) => unreachable!("every ablation keeps one branch"),
        };
        terms.push(term);
    }
    let total = tape.sum_all(&terms)?;
    let loss = tape.scale(total, T::lit(1.0 / objects.len() as f64));
    Ok(MaskLoss { loss, skipped })
}

/// Mean BCE between the saliency map and the rasterized per-class union of
/// ground-truth masks.
pub fn aux_saliency_loss<T: Float>(tape: &mut Tape<T>, saliency_logits: Var, union: &Tensor<f64>) -> Result<Var> {
    tape.bce_with_logits(saliency_logits, &union.cast())
}

/// The loss terms of one image as tape scalars.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub center: Var,
    pub offset: Var,
    pub size: Var,
    pub mask: Var,
    pub aux: Option<Var>,
}

/// Weighted sum of the parts. Fails if any part is not finite.
pub fn total_loss<T: Float>(tape: &mut Tape<T>, parts: &LossParts, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let value = |tape: &Tape<T>, v: Var, part: &'static str| -> Result<f64> {
        let x = tape.value(v).item().to_f64().unwrap_or(f64::NAN);
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::NonFinite { part })
        }
    };
    let l_p = value(tape, parts.center, "center")?;
    let l_off = value(tape, parts.offset, "offset")?;
    let l_size = value(tape, parts.size, "size")?;
    let l_mask = value(tape, parts.mask, "mask")?;
    let l_aux = match parts.aux {
        Some(a) => value(tape, a, "aux_saliency")?,
        None => 0.0,
    };

    let mut weighted = vec![
        tape.scale(parts.center, T::lit(cfg.lambda_p)),
        tape.scale(parts.offset, T::lit(cfg.lambda_off)),
        tape.scale(parts.size, T::lit(cfg.lambda_size)),
        tape.scale(parts.mask, T::lit(cfg.lambda_mask)),
    ];
    if let Some(a) = parts.aux {
        weighted.push(tape.scale(a, T::lit(cfg.aux_weight)));
    }
    let total = tape.sum_all(&weighted)?;
    let l_seg = value(tape, total, "total")?;
    Ok((
        total,
        LossBreakdown {
            l_p,
            l_off,
            l_size,
            l_mask,
            l_aux,
            l_seg,
        },
    ))
}
