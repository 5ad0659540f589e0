//! Shared fixtures: finite-difference gradient checks and small random
//! scenes for the loss and decode oracles.
#![allow(dead_code)]

use centermask::losses::{
    aux_saliency_loss, focal_center_loss, mask_loss, offset_loss, size_loss, total_loss, Ablation, LossConfig,
    LossParts, MaskLossSpec,
};
use centermask::mask::BinaryMask;
use centermask::model::{build_model, forward_on_tape, ModelConfig, SaliencyMode};
use centermask::targets::{encode_targets, rasterize_union, GroundTruthInstance, ObjectTarget};
use centermask::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: usize = 20;
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Builds a scalar loss from leaf variables bound to `inputs`.
pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn random_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..scale);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * r)` for a fixed random `r`, so every output entry is checked.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xA5A5);
    let weights = random(&mut r, tape.shape(y), 1.0);
    let c = tape.constant(weights);
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

fn eval(inputs: &[Tensor<f64>], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("loss builds");
    tape.value(loss).item()
}

/// Norm-wise relative error between backprop and central differences over
/// `coords` coordinates (all when `None`) of every input.
pub fn gradient_error(inputs: &[Tensor<f64>], build: &Build, coords: Option<(usize, u64)>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("loss builds");
    let grads = tape.backward(loss).expect("backward");

    let mut picks: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    if let Some((n, seed)) = coords {
        let mut r = rng(seed);
        let mut chosen = Vec::with_capacity(n);
        for _ in 0..n.min(picks.len()) {
            let k = r.random_range(0..picks.len());
            chosen.push(picks.swap_remove(k));
        }
        picks = chosen;
    }
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut work = inputs.to_vec();
    for (i, j) in picks {
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + EPS;
        let up = eval(&work, build);
        work[i].data_mut()[j] = orig - EPS;
        let down = eval(&work, build);
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        diff2 += (analytic - numeric).powi(2);
        a2 += analytic * analytic;
        n2 += numeric * numeric;
    }
    let scale = a2.sqrt().max(n2.sqrt());
    if scale < 1e-10 {
        diff2.sqrt()
    } else {
        diff2.sqrt() / scale
    }
}

pub struct CheckResult {
    pub name: &'static str,
    pub configs: usize,
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.configs >= CONFIGS && self.max_error < TOLERANCE
    }
}

/// One random configuration: inputs plus the loss that consumes them.
pub type Case = (Vec<Tensor<f64>>, Box<Build<'static>>);

fn run(name: &'static str, seed: u64, coords: Option<usize>, make: impl Fn(&mut ChaCha8Rng, u64) -> Case) -> CheckResult {
    let mut r = rng(seed);
    let mut max_error: f64 = 0.0;
    for k in 0..CONFIGS {
        let case_seed = seed * 1000 + k as u64;
        let (inputs, build) = make(&mut r, case_seed);
        let e = gradient_error(&inputs, &*build, coords.map(|n| (n, case_seed)));
        max_error = max_error.max(e);
    }
    CheckResult {
        name,
        configs: CONFIGS,
        max_error,
    }
}

fn dims(r: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(lo..=hi)).collect()
}

pub fn check_conv2d() -> CheckResult {
    run("conv2d", 1, None, |r, s| {
        let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
        let k = [1, 3][r.random_range(0..2)];
        let stride = r.random_range(1..=2);
        let padding = r.random_range(0..=k / 2);
        let (h, w) = (r.random_range(k..=6), r.random_range(k..=6));
        let bias = r.random_bool(0.5);
        let mut inputs = vec![random(r, &[n, c, h, w], 1.0), random(r, &[o, c, k, k], 1.0)];
        if bias {
            inputs.push(random(r, &[o], 1.0));
        }
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.conv2d(v[0], v[1], v.get(2).copied(), stride, padding)?;
            project(t, y, s)
        };
        (inputs, Box::new(build) as Box<Build>)
    })
}

pub fn check_relu() -> CheckResult {
    run("relu", 2, None, |r, s| {
        let rank = r.random_range(1..=3);
        let shape = dims(r, rank, 1, 5);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.relu(v[0]);
            project(t, y, s)
        };
        (vec![random_off_zero(r, &shape, 2.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_sigmoid() -> CheckResult {
    run("sigmoid", 3, None, |r, s| {
        let rank = r.random_range(1..=3);
        let shape = dims(r, rank, 1, 5);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.sigmoid(v[0]);
            project(t, y, s)
        };
        (vec![random(r, &shape, 4.0)], Box::new(build) as Box<Build>)
    })
}

fn broadcast_case(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let rank = r.random_range(1..=4);
    let big = dims(r, rank, 1, 4);
    let keep = r.random_range(0..=big.len());
    (big.clone(), big[big.len() - keep..].to_vec())
}

pub fn check_add() -> CheckResult {
    run("add", 4, None, |r, s| {
        let (a, b) = broadcast_case(r);
        let swap = r.random_bool(0.5);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = if swap { t.add(v[1], v[0])? } else { t.add(v[0], v[1])? };
            project(t, y, s)
        };
        (vec![random(r, &a, 1.0), random(r, &b, 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_mul() -> CheckResult {
    run("mul", 5, None, |r, s| {
        let (a, b) = broadcast_case(r);
        let swap = r.random_bool(0.5);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = if swap { t.mul(v[1], v[0])? } else { t.mul(v[0], v[1])? };
            project(t, y, s)
        };
        (vec![random(r, &a, 1.0), random(r, &b, 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_scale() -> CheckResult {
    run("scale", 6, None, |r, s| {
        let shape = dims(r, 2, 1, 5);
        let f = r.random_range(-3.0..3.0);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.scale(v[0], f);
            project(t, y, s)
        };
        (vec![random(r, &shape, 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_sum() -> CheckResult {
    run("sum", 7, None, |r, _| {
        let rank = r.random_range(1..=3);
        let shape = dims(r, rank, 1, 5);
        let f = r.random_range(0.5..2.0);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            // square first so the gradient depends on the input
            let sq = t.mul(v[0], v[0])?;
            let y = t.sum(sq);
            Ok(t.scale(y, f))
        };
        (vec![random(r, &shape, 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_sum_all() -> CheckResult {
    run("sum_all", 8, None, |r, s| {
        let n = r.random_range(1..=4);
        let inputs: Vec<_> = (0..n).map(|_| random(r, &[3, 2], 1.0)).collect();
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let mut terms = Vec::new();
            for (i, &x) in v.iter().enumerate() {
                terms.push(project(t, x, s + i as u64)?);
            }
            let total = t.sum_all(&terms)?;
            let sq = t.mul(total, total)?;
            Ok(sq)
        };
        (inputs, Box::new(build) as Box<Build>)
    })
}

pub fn check_reshape() -> CheckResult {
    run("reshape", 9, None, |r, s| {
        let (a, b) = (r.random_range(1..=4), r.random_range(1..=4));
        let c = r.random_range(1..=3);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.reshape(v[0], [a * b, c])?;
            let sq = t.mul(y, y)?;
            project(t, sq, s)
        };
        (vec![random(r, &[a, b, c], 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_resize() -> CheckResult {
    run("bilinear_resize", 10, None, |r, s| {
        let planes = r.random_range(1..=3);
        let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
        let (oh, ow) = (r.random_range(1..=9), r.random_range(1..=9));
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.bilinear_resize(v[0], oh, ow)?;
            project(t, y, s)
        };
        (vec![random(r, &[planes, h, w], 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_crop() -> CheckResult {
    run("crop", 11, None, |r, s| {
        let (c, h, w) = (r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6));
        let (y0, x0) = (r.random_range(0..h), r.random_range(0..w));
        let (ch, cw) = (r.random_range(1..=h - y0), r.random_range(1..=w - x0));
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.crop(v[0], y0, x0, ch, cw)?;
            project(t, y, s)
        };
        (vec![random(r, &[c, h, w], 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_channels() -> CheckResult {
    run("channels", 12, None, |r, s| {
        let (c, h, w) = (r.random_range(1..=5), r.random_range(1..=4), r.random_range(1..=4));
        let c0 = r.random_range(0..c);
        let n = r.random_range(1..=c - c0);
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.channels(v[0], c0, n)?;
            project(t, y, s)
        };
        (vec![random(r, &[c, h, w], 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_gather() -> CheckResult {
    run("gather", 13, None, |r, s| {
        let (c, h, w) = (r.random_range(1..=4), r.random_range(1..=5), r.random_range(1..=5));
        let points: Vec<(usize, usize)> =
            (0..r.random_range(1..=5)).map(|_| (r.random_range(0..h), r.random_range(0..w))).collect();
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.gather(v[0], &points)?;
            project(t, y, s)
        };
        (vec![random(r, &[c, h, w], 1.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_l1_sum() -> CheckResult {
    run("l1_sum", 14, None, |r, _| {
        let shape = dims(r, 2, 1, 5);
        let target = random(r, &shape, 2.0);
        let gap = random_off_zero(r, &shape, 1.0);
        let pred = Tensor::from_fn(shape.clone(), |i| target.data()[i] + gap.data()[i]);
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.l1_sum(v[0], &target);
        (vec![pred], Box::new(build) as Box<Build>)
    })
}

fn soft_target(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if r.random_bool(0.2) { 1.0 } else { r.random_range(0.0..0.99) })
}

pub fn check_focal_op() -> CheckResult {
    run("focal_loss op", 15, None, |r, _| {
        let shape = dims(r, 3, 1, 4);
        let target = soft_target(r, &shape);
        let alpha = [1.0, 2.0, 3.0][r.random_range(0..3)];
        let beta = [2.0, 4.0][r.random_range(0..2)];
        let norm = r.random_range(1.0..4.0);
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.focal_loss(v[0], &target, alpha, beta, norm);
        (vec![random(r, &shape, 4.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_bce() -> CheckResult {
    run("bce_with_logits", 16, None, |r, _| {
        let shape = dims(r, 3, 1, 4);
        let target = Tensor::from_fn(shape.clone(), |_| if r.random_bool(0.5) { 1.0 } else { r.random_range(0.0..1.0) });
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.bce_with_logits(v[0], &target);
        (vec![random(r, &shape, 5.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_assembled_bce() -> CheckResult {
    run("assembled_bce", 17, None, |r, _| {
        let shape = dims(r, 3, 1, 4);
        let target = Tensor::from_fn(shape.clone(), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 });
        let build = move |t: &mut Tape<f64>, v: &[Var]| t.assembled_bce(v[0], v[1], &target);
        (vec![random(r, &shape, 5.0), random(r, &shape, 5.0)], Box::new(build) as Box<Build>)
    })
}

/// Up to `max` random non-empty instances on an `h x w` canvas.
pub fn random_instances(r: &mut ChaCha8Rng, h: usize, w: usize, classes: usize, max: usize) -> Vec<GroundTruthInstance> {
    let n = r.random_range(1..=max);
    (0..n)
        .map(|_| {
            let bh = r.random_range(2..=h / 2);
            let bw = r.random_range(2..=w / 2);
            let y0 = r.random_range(0..=h - bh);
            let x0 = r.random_range(0..=w - bw);
            let ellipse = r.random_bool(0.5);
            let mask = BinaryMask::from_fn(h, w, |y, x| {
                if y < y0 || y >= y0 + bh || x < x0 || x >= x0 + bw {
                    return false;
                }
                if !ellipse {
                    return true;
                }
                let dy = (y as f64 + 0.5 - y0 as f64 - bh as f64 / 2.0) / (bh as f64 / 2.0);
                let dx = (x as f64 + 0.5 - x0 as f64 - bw as f64 / 2.0) / (bw as f64 / 2.0);
                dy * dy + dx * dx <= 1.0 || (y == y0 + bh / 2 && x == x0 + bw / 2)
            });
            GroundTruthInstance::new(r.random_range(0..classes), mask).expect("non-empty mask")
        })
        .collect()
}

fn random_objects(r: &mut ChaCha8Rng, classes: usize) -> (Vec<GroundTruthInstance>, Vec<ObjectTarget>, Tensor<f64>) {
    let inst = random_instances(r, 32, 32, classes, 3);
    let enc = encode_targets(&inst, classes, (8, 8), 4).expect("targets");
    (inst, enc.objects, enc.heatmap)
}

pub fn check_focal_center_loss() -> CheckResult {
    run("center focal loss", 18, None, |r, _| {
        let classes = r.random_range(1..=3);
        let (_, objects, heatmap) = random_objects(r, classes);
        let n = objects.len();
        let build = move |t: &mut Tape<f64>, v: &[Var]| focal_center_loss(t, v[0], &heatmap, n, 2.0, 4.0);
        (vec![random(r, &[classes, 8, 8], 3.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_offset_loss() -> CheckResult {
    run("offset loss", 19, None, |r, _| {
        let (_, objects, _) = random_objects(r, 2);
        let mut map = random(r, &[2, 8, 8], 1.0);
        // keep predictions away from the L1 kink at the targets
        for o in &objects {
            let (x, y) = o.center_index;
            for k in 0..2 {
                let i = k * 64 + y * 8 + x;
                map.data_mut()[i] = o.offset[k] + if r.random_bool(0.5) { 0.3 } else { -0.3 };
            }
        }
        let build = move |t: &mut Tape<f64>, v: &[Var]| offset_loss(t, v[0], &objects);
        (vec![map], Box::new(build) as Box<Build>)
    })
}

pub fn check_size_loss() -> CheckResult {
    run("size loss", 20, None, |r, _| {
        let (_, objects, _) = random_objects(r, 2);
        let mut map = random(r, &[2, 8, 8], 20.0);
        for o in &objects {
            let (x, y) = o.center_index;
            for k in 0..2 {
                let i = k * 64 + y * 8 + x;
                map.data_mut()[i] = o.size[k] + if r.random_bool(0.5) { 1.5 } else { -1.5 };
            }
        }
        let build = move |t: &mut Tape<f64>, v: &[Var]| size_loss(t, v[0], &objects);
        (vec![map], Box::new(build) as Box<Build>)
    })
}

pub fn check_mask_loss() -> CheckResult {
    run("mask loss", 21, None, |r, _| {
        let ablation = Ablation::ALL[r.random_range(0..3)];
        let mode = [SaliencyMode::ClassAgnostic, SaliencyMode::ClassSpecific][r.random_range(0..2)];
        let classes = 3;
        let s = r.random_range(2..=4);
        let (_, objects, _) = random_objects(r, classes);
        let n = objects.len();
        let sal_c = if mode == SaliencyMode::ClassAgnostic { 1 } else { classes };
        let spec = MaskLossSpec {
            shape_size: s,
            stride: 4,
            saliency_mode: mode,
            ablation,
        };
        let inputs = vec![random(r, &[n, s * s], 3.0), random(r, &[sal_c, 8, 8], 3.0)];
        let build = move |t: &mut Tape<f64>, v: &[Var]| Ok(mask_loss(t, Some(v[0]), v[1], &objects, &spec)?.loss);
        (inputs, Box::new(build) as Box<Build>)
    })
}

pub fn check_aux_loss() -> CheckResult {
    run("aux saliency loss", 22, None, |r, _| {
        let classes = r.random_range(1..=3);
        let (inst, _, _) = random_objects(r, classes);
        let union = rasterize_union(&inst, classes, (8, 8), 4);
        let build = move |t: &mut Tape<f64>, v: &[Var]| aux_saliency_loss(t, v[0], &union);
        (vec![random(r, &[classes, 8, 8], 3.0)], Box::new(build) as Box<Build>)
    })
}

pub fn check_total_loss() -> CheckResult {
    run("total loss", 23, None, |r, _| {
        let cfg = LossConfig {
            lambda_p: r.random_range(0.1..2.0),
            lambda_off: r.random_range(0.1..2.0),
            lambda_size: r.random_range(0.01..0.5),
            lambda_mask: r.random_range(0.1..2.0),
            aux_weight: r.random_range(0.1..2.0),
            ..LossConfig::default()
        };
        let with_aux = r.random_bool(0.5);
        let inputs = (0..5).map(|_| random(r, &[3], 1.0)).collect();
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let mut parts = Vec::new();
            for &x in v {
                let sq = t.mul(x, x)?;
                parts.push(t.sum(sq));
            }
            let p = LossParts {
                center: parts[0],
                offset: parts[1],
                size: parts[2],
                mask: parts[3],
                aux: with_aux.then_some(parts[4]),
            };
            Ok(total_loss(t, &p, &cfg)?.0)
        };
        (inputs, Box::new(build) as Box<Build>)
    })
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        shape_size: 3,
        output_stride: 4,
        backbone_channels: vec![3, 4, 4],
        head_channels: 3,
        input_size: (16, 16),
        size_prior: 4.0,
        ..ModelConfig::default()
    }
}

/// The whole network and summed loss, checked on sampled coordinates.
pub fn check_model_loss() -> CheckResult {
    run("model + total loss", 24, Some(60), |r, _| {
        let cfg = tiny_model();
        let params = build_model::<f64>(cfg.clone(), r.random()).expect("model");
        let image = Tensor::from_fn([3, 16, 16], |_| r.random_range(0.0..1.0));
        let instances = random_instances(r, 16, 16, 2, 2);
        let loss_cfg = LossConfig {
            ablation: Ablation::ALL[r.random_range(0..3)],
            ..LossConfig::default()
        };
        let mut inputs = vec![image];
        inputs.extend(params.tensors().iter().cloned());
        let build = move |t: &mut Tape<f64>, v: &[Var]| {
            let bound = params.bind_vars(&v[1..])?;
            let heads = forward_on_tape(&cfg, &bound, t, v[0])?;
            let enc = encode_targets(&instances, 2, cfg.output_size(), 4)?;
            let center = focal_center_loss(t, heads.heatmap, &enc.heatmap, enc.objects.len(), 2.0, 4.0)?;
            let offset = offset_loss(t, heads.offset, &enc.objects)?;
            let size = size_loss(t, heads.size, &enc.objects)?;
            let points: Vec<_> = enc.objects.iter().map(|o| (o.center_index.1, o.center_index.0)).collect();
            let shapes = heads.shape_at(t, &points)?;
            let spec = MaskLossSpec {
                shape_size: cfg.shape_size,
                stride: 4,
                saliency_mode: cfg.saliency_mode,
                ablation: loss_cfg.ablation,
            };
            let mask = mask_loss(t, Some(shapes), heads.saliency, &enc.objects, &spec)?.loss;
            let union = rasterize_union(&instances, 2, cfg.output_size(), 4);
            let aux = Some(aux_saliency_loss(t, heads.saliency, &union)?);
            let parts = LossParts {
                center,
                offset,
                size,
                mask,
                aux,
            };
            Ok(total_loss(t, &parts, &loss_cfg)?.0)
        };
        (inputs, Box::new(build) as Box<Build>)
    })
}

pub fn all_checks() -> Vec<fn() -> CheckResult> {
    vec![
        check_conv2d,
        check_relu,
        check_sigmoid,
        check_add,
        check_mul,
        check_scale,
        check_sum,
        check_sum_all,
        check_reshape,
        check_resize,
        check_crop,
        check_channels,
        check_gather,
        check_l1_sum,
        check_focal_op,
        check_bce,
        check_assembled_bce,
        check_focal_center_loss,
        check_offset_loss,
        check_size_loss,
        check_mask_loss,
        check_aux_loss,
        check_total_loss,
        check_model_loss,
    ]
}
