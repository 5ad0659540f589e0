//! Per-image loss and gradients, batched steps, and the training loop.

use rand::{seq::index, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{
    aux_saliency_loss, focal_center_loss, mask_loss, offset_loss, size_loss, total_loss, LossBreakdown, LossConfig,
    LossParts, MaskLossSpec,
};
use crate::model::{forward_on_tape, ModelParams};
use crate::optim::{Adam, OptimConfig};
use crate::targets::{encode_targets, rasterize_union, GroundTruthInstance};
use crate::tensor::{Float, Tensor};

/// Loss terms and parameter gradients of one image.
pub struct ImageGrad<T> {
    pub loss: LossBreakdown,
    /// One per parameter, in [`ModelParams::tensors`] order.
    pub grads: Vec<Tensor<T>>,
    pub skipped: usize,
}

/// Forward, loss and backward for one image with ground-truth centers and
/// boxes driving the mask crops.
pub fn image_gradients<T: Float>(
    params: &ModelParams<T>,
    image: &Tensor<T>,
    instances: &[GroundTruthInstance],
    cfg: &LossConfig,
) -> Result<ImageGrad<T>> {
    let model = params.config();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(image.clone());
    let heads = forward_on_tape(model, &bound, &mut tape, x)?;
    let map = model.output_size();
    let stride = model.output_stride;
    let targets = encode_targets(instances, model.num_classes, map, stride)?;
    let objects = &targets.objects;

    let center = focal_center_loss(&mut tape, heads.heatmap, &targets.heatmap, objects.len(), cfg.alpha, cfg.beta)?;
    let offset = offset_loss(&mut tape, heads.offset, objects)?;
    let size = size_loss(&mut tape, heads.size, objects)?;
    let shape_vectors = if cfg.ablation.uses_shape() && !objects.is_empty() {
        let points: Vec<_> = objects.iter().map(|o| (o.center_index.1, o.center_index.0)).collect();
        Some(heads.shape_at(&mut tape, &points)?)
    } else {
        None
    };
    let spec = MaskLossSpec {
        shape_size: model.shape_size,
        stride,
        saliency_mode: model.saliency_mode,
        ablation: cfg.ablation,
    };
    let mask = mask_loss(&mut tape, shape_vectors, heads.saliency, objects, &spec)?;
    let aux = if cfg.aux_enabled(model.saliency_mode) {
        let union = rasterize_union(instances, model.saliency_channels(), map, stride);
        Some(aux_saliency_loss(&mut tape, heads.saliency, &union)?)
    } else {
        None
    };
    let parts = LossParts {
        center,
        offset,
        size,
        mask: mask.loss,
        aux,
    };
    let (total, loss) = total_loss(&mut tape, &parts, cfg)?;
    let mut g = tape.backward(total)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok(ImageGrad {
        loss,
        grads,
        skipped: mask.skipped,
    })
}

/// Dataset indices for `step`, a pure function of `(seed, step)`.
pub fn batch_indices(seed: u64, step: u64, dataset_len: usize, batch: usize) -> Vec<usize> {
    let mixed = seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    if batch >= dataset_len {
        let mut all: Vec<usize> = (0..dataset_len).collect();
        // Cycle when the batch exceeds the data.
        while all.len() < batch {
            all.push(all.len() % dataset_len);
        }
        all.truncate(batch);
        return all;
    }
    index::sample(&mut rng, dataset_len, batch).into_vec()
}

/// Mean loss and gradients over a batch. Images run in parallel; their
/// gradients are summed in batch order, so the result is deterministic.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    batch: &[(&Tensor<f32>, &[GroundTruthInstance])],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Tensor<f32>>, usize)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let per_image: Vec<ImageGrad<f32>> = batch
        .par_iter()
        .map(|(img, inst)| image_gradients(params, img, inst, cfg))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut iter = per_image.into_iter();
    let first = iter.next().expect("non-empty batch");
    let mut loss = first.loss;
    let mut grads = first.grads;
    let mut skipped = first.skipped;
    for ig in iter {
        loss.accumulate(&ig.loss);
        skipped += ig.skipped;
        for (acc, g) in grads.iter_mut().zip(&ig.grads) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= scale;
        }
    }
    if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
        log::error!("non-finite gradient for {}", params.names()[i]);
        return Err(Error::NonFinite { part: "gradient" });
    }
    Ok((loss.scaled(1.0 / batch.len() as f64), grads, skipped))
}

/// Mutable state of a run: parameters, optimizer moments and the step count.
pub struct TrainState {
    pub params: ModelParams<f32>,
    pub adam: Adam<f32>,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>, optim: &OptimConfig) -> Self {
        let adam = Adam::new(optim, params.tensors());
        TrainState { params, adam, step: 0 }
    }

    /// One optimizer update on `batch`.
    pub fn step(
        &mut self,
        batch: &[(&Tensor<f32>, &[GroundTruthInstance])],
        loss_cfg: &LossConfig,
        optim: &OptimConfig,
    ) -> Result<(LossBreakdown, usize)> {
        let (loss, grads, skipped) = batch_gradients(&self.params, batch, loss_cfg)?;
        let lr = optim.lr_at(self.step);
        self.adam.step(self.params.tensors_mut(), &grads, lr)?;
        self.step += 1;
        Ok((loss, skipped))
    }
}
