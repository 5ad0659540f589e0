//! Small fully convolutional backbone and the five prediction heads.
//!
//! The backbone is a plain stack of stride-2 stages. The deepest stage is
//! projected with a 1x1 conv, bilinearly upsampled to the output stride and
//! added to the stage that already sits at that stride. Every head is a 3x3
//! conv + relu followed by a 1x1 conv, and all heads read the same fused map.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Prior probability of a center at initialization.
const HEATMAP_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMode {
    /// One foreground channel shared by every class.
    #[serde(alias = "agnostic")]
    ClassAgnostic,
    /// One foreground channel per class.
    #[serde(alias = "specific")]
    ClassSpecific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Side of the square local-shape array; the shape head emits its square.
    pub shape_size: usize,
    pub output_stride: usize,
    pub saliency_mode: SaliencyMode,
    /// Output channels of each stride-2 backbone stage.
    pub backbone_channels: Vec<usize>,
    pub head_channels: usize,
    /// `(height, width)` of input images.
    pub input_size: (usize, usize),
    /// Initial bias of the size head, in input pixels.
    pub size_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            shape_size: 32,
            output_stride: 4,
            saliency_mode: SaliencyMode::ClassSpecific,
            backbone_channels: vec![16, 32, 64, 64],
            head_channels: 32,
            input_size: (128, 128),
            size_prior: 32.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.shape_size < 2 {
            return bad(format!("shape_size must be at least 2, got {}", self.shape_size));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad("backbone_channels must be non-empty and positive".into());
        }
        if self.head_channels == 0 {
            return bad("head_channels must be positive".into());
        }
        let (h, w) = self.input_size;
        let r = self.output_stride;
        if r == 0 || h % r != 0 || w % r != 0 {
            return bad(format!("output stride {r} must divide the input size {h}x{w}"));
        }
        if self.skip_stage().is_none() {
            return bad(format!(
                "output stride {r} must be the stride of a backbone stage (2^1..2^{})",
                self.backbone_channels.len()
            ));
        }
        let total = 1usize << self.backbone_channels.len();
        if h % total != 0 || w % total != 0 {
            return bad(format!("input size {h}x{w} must be divisible by the backbone stride {total}"));
        }
        Ok(())
    }

    /// Index of the backbone stage whose output stride equals the head stride.
    fn skip_stage(&self) -> Option<usize> {
        (0..self.backbone_channels.len()).find(|&i| 2usize << i == self.output_stride)
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.output_stride, self.input_size.1 / self.output_stride)
    }

    pub fn shape_channels(&self) -> usize {
        self.shape_size * self.shape_size
    }

    pub fn saliency_channels(&self) -> usize {
        match self.saliency_mode {
            SaliencyMode::ClassAgnostic => 1,
            SaliencyMode::ClassSpecific => self.num_classes,
        }
    }

    fn fused_channels(&self) -> usize {
        self.backbone_channels[self.skip_stage().expect("validated config")]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Heatmap,
    Offset,
    Shape,
    Size,
    Saliency,
}

impl Head {
    pub const ALL: [Head; 5] = [Head::Heatmap, Head::Offset, Head::Shape, Head::Size, Head::Saliency];

    pub fn name(self) -> &'static str {
        match self {
            Head::Heatmap => "heatmap",
            Head::Offset => "offset",
            Head::Shape => "shape",
            Head::Size => "size",
            Head::Saliency => "saliency",
        }
    }

    fn out_channels(self, cfg: &ModelConfig) -> usize {
        match self {
            Head::Heatmap => cfg.num_classes,
            Head::Offset | Head::Size => 2,
            Head::Shape => cfg.shape_channels(),
            Head::Saliency => cfg.saliency_channels(),
        }
    }
}

/// Named, ordered model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Deterministic initialization from a seed.
pub fn build_model<T: Float>(config: ModelConfig, rng_seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut named: Vec<(String, Tensor<T>)> = Vec::new();
    let mut conv = |name: String, out: usize, inp: usize, k: usize, std: f64, bias: f64| {
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_fn([out, inp, k, k], |_| T::lit(normal.sample(&mut rng)));
        named.push((format!("{name}.weight"), w));
        named.push((format!("{name}.bias"), Tensor::full([out], T::lit(bias))));
    };
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();

    let mut inp = 3;
    for (i, &ch) in config.backbone_channels.iter().enumerate() {
        conv(format!("backbone.stage{i}.down"), ch, inp, 3, he(inp * 9), 0.0);
        conv(format!("backbone.stage{i}.conv"), ch, ch, 3, he(ch * 9), 0.0);
        inp = ch;
    }
    let fused = config.fused_channels();
    let deepest = *config.backbone_channels.last().expect("validated");
    conv("neck.lateral".into(), fused, deepest, 1, (1.0 / deepest as f64).sqrt(), 0.0);
    conv("neck.fuse".into(), fused, fused, 3, he(fused * 9), 0.0);

    let hid = config.head_channels;
    for head in Head::ALL {
        let name = head.name();
        conv(format!("head.{name}.hidden"), hid, fused, 3, he(fused * 9), 0.0);
        let (std, bias) = match head {
            Head::Heatmap => (0.01, -((1.0 - HEATMAP_PRIOR) / HEATMAP_PRIOR).ln()),
            Head::Size => ((1.0 / hid as f64).sqrt(), config.size_prior),
            _ => ((1.0 / hid as f64).sqrt(), 0.0),
        };
        conv(format!("head.{name}.out"), head.out_channels(&config), hid, 1, std, bias);
    }
    Ok(ModelParams::from_named(config, named))
}

impl<T: Float> ModelParams<T> {
    fn from_named(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors): (Vec<_>, Vec<_>) = named.into_iter().unzip();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        ModelParams {
            config,
            names,
            tensors,
            index,
        }
    }

    /// Rebuilds parameters from named tensors, checking them against the
    /// layout `config` implies.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let reference = build_model::<T>(config.clone(), 0)?;
        let mut by_name: HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut out = Vec::with_capacity(reference.names.len());
        for (name, expected) in reference.iter() {
            let t = by_name
                .remove(name)
                .ok_or_else(|| Error::Version(format!("missing parameter `{name}`")))?;
            if t.shape() != expected.shape() {
                return Err(Error::Version(format!(
                    "parameter `{name}` has shape {:?}, config implies {:?}",
                    t.shape(),
                    expected.shape()
                )));
            }
            out.push((name.to_string(), t));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Version(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self::from_named(config, out))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Float>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
            index: self.index.clone(),
        }
    }
}

impl<T: Float> ModelParams<T> {
    /// Uses existing tape variables, in [`ModelParams::names`] order, as the
    /// parameters.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.names.len() {
            return Err(Error::dim("bind_vars", "parameter count", self.names.len(), vars.len()));
        }
        Ok(BoundParams {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }
}

/// Parameters recorded on a particular tape.
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))]
    }

    fn conv<T: Float>(&self, tape: &mut Tape<T>, x: Var, name: &str, stride: usize, padding: usize) -> Result<Var> {
        let w = self.get(&format!("{name}.weight"));
        let b = self.get(&format!("{name}.bias"));
        tape.conv2d(x, w, Some(b), stride, padding)
    }
}

/// Head outputs still on the tape. The shape head's last 1x1 layer is applied
/// lazily so training only evaluates it at object centers.
pub struct HeadVars {
    /// `C x H x W` center logits.
    pub heatmap: Var,
    /// `2 x H x W`, (x, y) order.
    pub offset: Var,
    /// `2 x H x W`, (h, w) order, input pixels.
    pub size: Var,
    /// `(1 | C) x H x W` saliency logits.
    pub saliency: Var,
    shape_hidden: Var,
    shape_weight: Var,
    shape_bias: Var,
    out_hw: (usize, usize),
    shape_channels: usize,
}

impl HeadVars {
    /// Full `S^2 x H x W` shape map.
    pub fn shape_dense<T: Float>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let (h, w) = self.out_hw;
        let hid = tape.shape(self.shape_hidden)[0];
        let x = tape.reshape(self.shape_hidden, [1, hid, h, w])?;
        let y = tape.conv2d(x, self.shape_weight, Some(self.shape_bias), 1, 0)?;
        tape.reshape(y, [self.shape_channels, h, w])
    }

    /// Shape vectors at `(y, x)` feature cells, `P x S^2`.
    pub fn shape_at<T: Float>(&self, tape: &mut Tape<T>, points: &[(usize, usize)]) -> Result<Var> {
        let hid = tape.shape(self.shape_hidden)[0];
        let g = tape.gather(self.shape_hidden, points)?;
        let x = tape.reshape(g, [points.len(), hid, 1, 1])?;
        let y = tape.conv2d(x, self.shape_weight, Some(self.shape_bias), 1, 0)?;
        tape.reshape(y, [points.len(), self.shape_channels])
    }
}

/// Runs the backbone and heads for one `3 x H_in x W_in` image.
pub fn forward_on_tape<T: Float>(
    config: &ModelConfig,
    params: &BoundParams,
    tape: &mut Tape<T>,
    image: Var,
) -> Result<HeadVars> {
    let (h_in, w_in) = config.input_size;
    let s = tape.shape(image).to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("forward", "image channels", 3, s.first().copied().unwrap_or(0)));
    }
    if s[1] != h_in {
        return Err(Error::dim("forward", "image height", h_in, s[1]));
    }
    if s[2] != w_in {
        return Err(Error::dim("forward", "image width", w_in, s[2]));
    }
    let mut x = tape.reshape(image, [1, 3, h_in, w_in])?;
    let skip_at = config.skip_stage().expect("validated config");
    let mut skip = x;
    for i in 0..config.backbone_channels.len() {
        x = params.conv(tape, x, &format!("backbone.stage{i}.down"), 2, 1)?;
        x = tape.relu(x);
        x = params.conv(tape, x, &format!("backbone.stage{i}.conv"), 1, 1)?;
        x = tape.relu(x);
        if i == skip_at {
            skip = x;
        }
    }
    let (h, w) = config.output_size();
    let lateral = params.conv(tape, x, "neck.lateral", 1, 0)?;
    let up = if tape.shape(lateral)[2..] == [h, w] {
        lateral
    } else {
        let fused = config.fused_channels();
        let flat = tape.reshape(lateral, [fused, tape.shape(lateral)[2], tape.shape(lateral)[3]])?;
        let r = tape.bilinear_resize(flat, h, w)?;
        tape.reshape(r, [1, fused, h, w])?
    };
    let merged = tape.add(up, skip)?;
    let merged = tape.relu(merged);
    let fused = params.conv(tape, merged, "neck.fuse", 1, 1)?;
    let features = tape.relu(fused);

    let head = |tape: &mut Tape<T>, head: Head, finish: bool| -> Result<Var> {
        let name = head.name();
        let hidden = params.conv(tape, features, &format!("head.{name}.hidden"), 1, 1)?;
        let hidden = tape.relu(hidden);
        if !finish {
            let c = tape.shape(hidden)[1];
            return tape.reshape(hidden, [c, h, w]);
        }
        let out = params.conv(tape, hidden, &format!("head.{name}.out"), 1, 0)?;
        let c = tape.shape(out)[1];
        tape.reshape(out, [c, h, w])
    };
    let heatmap = head(tape, Head::Heatmap, true)?;
    let offset = head(tape, Head::Offset, true)?;
    let size = head(tape, Head::Size, true)?;
    let saliency = head(tape, Head::Saliency, true)?;
    let shape_hidden = head(tape, Head::Shape, false)?;
    Ok(HeadVars {
        heatmap,
        offset,
        size,
        saliency,
        shape_hidden,
        shape_weight: params.get("head.shape.out.weight"),
        shape_bias: params.get("head.shape.out.bias"),
        out_hw: (h, w),
        shape_channels: config.shape_channels(),
    })
}

/// The five dense per-image prediction maps.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    /// `C x H x W` pre-sigmoid center logits.
    pub heatmap: Tensor<T>,
    /// `2 x H x W` sub-cell offsets, (x, y).
    pub offset: Tensor<T>,
    /// `S^2 x H x W` local-shape logits.
    pub shape: Tensor<T>,
    /// `2 x H x W` object sizes in input pixels, (h, w).
    pub size: Tensor<T>,
    /// `(1 | C) x H x W` pre-sigmoid saliency logits.
    pub saliency: Tensor<T>,
}

/// Inference forward pass; parameters are only read.
pub fn forward<T: Float>(params: &ModelParams<T>, image: &Tensor<T>) -> Result<HeadOutputs<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(image.clone());
    let heads = forward_on_tape(params.config(), &bound, &mut tape, x)?;
    let shape = heads.shape_dense(&mut tape)?;
    Ok(HeadOutputs {
        heatmap: tape.value(heads.heatmap).clone(),
        offset: tape.value(heads.offset).clone(),
        shape: tape.value(shape).clone(),
        size: tape.value(heads.size).clone(),
        saliency: tape.value(heads.saliency).clone(),
    })
}
