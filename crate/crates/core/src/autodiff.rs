//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every op in execution order, so walking it backwards is
//! a valid reverse topological order. Values are never mutated once recorded.
//! Loss ops are fused (stable log-space forms with hand-written adjoints)
//! rather than composed from primitives.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, Tap};
use crate::tensor::{gemm, Float, Mat, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        /// Per-image im2col buffers, kept only when the weight needs a grad.
        cols: Vec<Vec<T>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Resize {
        input: Var,
        planes: usize,
        in_hw: (usize, usize),
        ys: Vec<Tap>,
        xs: Vec<Tap>,
    },
    Slice {
        input: Var,
        origin: [usize; 3],
    },
    Gather {
        input: Var,
        points: Vec<(usize, usize)>,
    },
    L1 {
        pred: Var,
        target: Vec<T>,
    },
    Focal {
        logits: Var,
        target: Vec<T>,
        alpha: T,
        beta: T,
        norm: T,
    },
    Bce {
        logits: Var,
        target: Vec<T>,
    },
    AssembledBce {
        shape: Var,
        saliency: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar w.r.t. every leaf that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.all_finite());
            debug_assert!(
                !inputs_finite || value.all_finite(),
                "non-finite output from finite inputs"
            );
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// 2-D convolution over an `N x C x H x W` input with an `O x C x K x K`
    /// weight and optional length-`O` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(OP, "input rank", 4, xs.len()));
        }
        if ws.len() != 4 {
            return Err(Error::dim(OP, "weight rank", 4, ws.len()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        if ws[1] != c {
            return Err(Error::dim(OP, "in_channels", c, ws[1]));
        }
        if ws[3] != k {
            return Err(Error::dim(OP, "kernel_width", k, ws[3]));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < k {
            return Err(Error::dim(OP, "height", k, h + 2 * padding));
        }
        if w + 2 * padding < k {
            return Err(Error::dim(OP, "width", k, w + 2 * padding));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [o] {
                return Err(Error::dim(OP, "bias", o, bs.iter().product()));
            }
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: k,
            stride,
            padding,
            out_h: (h + 2 * padding - k) / stride + 1,
            out_w: (w + 2 * padding - k) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let keep_cols = self.requires_grad(weight);
        let mut out = vec![T::zero(); n * o * ncols];
        let mut saved = Vec::new();
        {
            let x = self.value(input).data();
            let wt = self.value(weight).data();
            let b = bias.map(|b| self.value(b).data());
            let mut cols = vec![T::zero(); rows * ncols];
            for (img, out_img) in out.chunks_exact_mut(o * ncols).enumerate() {
                kernels::im2col(&x[img * c * h * w..(img + 1) * c * h * w], &geom, &mut cols);
                if let Some(b) = b {
                    for (oc, chunk) in out_img.chunks_exact_mut(ncols).enumerate() {
                        chunk.fill(b[oc]);
                    }
                }
                let beta = if b.is_some() { T::one() } else { T::zero() };
                gemm(Mat::new(wt, o, rows), Mat::new(&cols, rows, ncols), beta, out_img);
                if keep_cols {
                    saved.push(cols.clone());
                }
            }
        }
        let value = Tensor::new([n, o, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: saved,
            },
            &inputs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Elementwise sum; the operand with fewer dims is broadcast over the
    /// other's leading dims.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("add", a, b)?;
        let s = self.value(small).data();
        let value = Tensor::new(
            self.shape(big).to_vec(),
            self.value(big)
                .data()
                .chunks_exact(s.len())
                .flat_map(|chunk| chunk.iter().zip(s).map(|(&x, &y)| x + y))
                .collect(),
        )?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("mul", a, b)?;
        let s = self.value(small).data();
        let value = Tensor::new(
            self.shape(big).to_vec(),
            self.value(big)
                .data()
                .chunks_exact(s.len())
                .flat_map(|chunk| chunk.iter().zip(s).map(|(&x, &y)| x * y))
                .collect(),
        )?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (big, small) = if sa.len() >= sb.len() { (a, b) } else { (b, a) };
        let (bs, ss) = (self.shape(big), self.shape(small));
        let lead = bs.len() - ss.len();
        for (&x, &y) in bs[lead..].iter().zip(ss) {
            if x != y {
                return Err(Error::dim(op, "trailing", x, y));
            }
        }
        Ok((big, small))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Sum of scalars; an empty list yields a constant zero.
    pub fn sum_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Bilinear resize of the trailing two axes with half-pixel centers
    /// (align-corners false). Leading axes are treated as independent planes.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        const OP: &str = "bilinear_resize";
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(OP, "rank", 2, s.len()));
        }
        let (in_h, in_w) = (s[s.len() - 2], s[s.len() - 1]);
        if in_h == 0 || in_w == 0 {
            return Err(Error::dim(OP, "input size", 1, 0));
        }
        if out_h == 0 {
            return Err(Error::dim(OP, "out_h", 1, 0));
        }
        if out_w == 0 {
            return Err(Error::dim(OP, "out_w", 1, 0));
        }
        let planes: usize = s[..s.len() - 2].iter().product();
        let ys = kernels::resize_taps(in_h, out_h);
        let xs = kernels::resize_taps(in_w, out_w);
        let mut out = vec![T::zero(); planes * out_h * out_w];
        kernels::resize_forward(self.value(x).data(), planes, (in_h, in_w), &ys, &xs, &mut out);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([out_h, out_w]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Resize {
                input: x,
                planes,
                in_hw: (in_h, in_w),
                ys,
                xs,
            },
            &[x],
        ))
    }

    /// Spatial window `(y0, x0, h, w)` of a `C x H x W` map, all channels.
    pub fn crop(&mut self, x: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let c = self.shape(x).first().copied().unwrap_or(0);
        self.slice(x, [0, y0, x0], [c, h, w])
    }

    /// `n` consecutive channels of a `C x H x W` map starting at `c0`.
    pub fn channels(&mut self, x: Var, c0: usize, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("channels", "rank", 3, s.len()));
        }
        self.slice(x, [c0, 0, 0], [n, s[1], s[2]])
    }

    fn slice(&mut self, x: Var, origin: [usize; 3], extent: [usize; 3]) -> Result<Var> {
        const OP: &str = "crop";
        const AXES: [&str; 3] = ["channel", "height", "width"];
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim(OP, "rank", 3, s.len()));
        }
        if extent.contains(&0) || (0..3).any(|a| origin[a] >= s[a]) {
            return Err(Error::EmptyCrop { op: OP });
        }
        for a in 0..3 {
            if origin[a] + extent[a] > s[a] {
                return Err(Error::dim(OP, AXES[a], s[a], origin[a] + extent[a]));
            }
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(extent.iter().product());
        for c in origin[0]..origin[0] + extent[0] {
            for y in origin[1]..origin[1] + extent[1] {
                let row = (c * s[1] + y) * s[2];
                out.extend_from_slice(&src[row + origin[2]..row + origin[2] + extent[2]]);
            }
        }
        let value = Tensor::new(extent.to_vec(), out)?;
        Ok(self.push(value, Op::Slice { input: x, origin }, &[x]))
    }

    /// Channel vectors of a `C x H x W` map at `(y, x)` points, as `P x C`.
    pub fn gather(&mut self, x: Var, points: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("gather", "rank", 3, s.len()));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        for &(y, xx) in points {
            if y >= h {
                return Err(Error::dim("gather", "height", h, y + 1));
            }
            if xx >= w {
                return Err(Error::dim("gather", "width", w, xx + 1));
            }
        }
        let src = self.value(x).data();
        let out = points
            .iter()
            .flat_map(|&(y, xx)| (0..c).map(move |ch| src[(ch * h + y) * w + xx]))
            .collect();
        let value = Tensor::new([points.len(), c], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                input: x,
                points: points.to_vec(),
            },
            &[x],
        ))
    }

    fn check_target(&self, op: &'static str, x: Var, target: &Tensor<T>) -> Result<()> {
        if self.shape(x) != target.shape() {
            return Err(Error::dim(op, "target", self.value(x).len(), target.len()));
        }
        Ok(())
    }

    /// `sum |pred - target|`.
    pub fn l1_sum(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("l1_sum", pred, target)?;
        let total = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs())
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::L1 {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
        ))
    }

    /// Penalty-reduced pixel-wise focal loss on logits against a soft
    /// heatmap target, negated and divided by `norm`.
    ///
    /// Pixels whose target is exactly one are positives.
    pub fn focal_loss(
        &mut self,
        logits: Var,
        target: &Tensor<T>,
        alpha: T,
        beta: T,
        norm: T,
    ) -> Result<Var> {
        self.check_target("focal_loss", logits, target)?;
        let one = T::one();
        let mut total = T::zero();
        for (&x, &y) in self.value(logits).data().iter().zip(target.data()) {
            total += if y == one {
                kernels::sigmoid(-x).powf(alpha) * -kernels::softplus(-x)
            } else {
                (one - y).powf(beta) * kernels::sigmoid(x).powf(alpha) * -kernels::softplus(x)
            };
        }
        Ok(self.push(
            Tensor::scalar(-total / norm),
            Op::Focal {
                logits,
                target: target.data().to_vec(),
                alpha,
                beta,
                norm,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("bce_with_logits", logits, target)?;
        let n = T::lit(target.len().max(1) as f64);
        let total: T = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| kernels::softplus(x) - t * x)
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                logits,
                target: target.data().to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(shape) * sigmoid(saliency)`
    /// against `target`, evaluated in log space.
    pub fn assembled_bce(&mut self, shape: Var, saliency: Var, target: &Tensor<T>) -> Result<Var> {
        self.check_target("assembled_bce", shape, target)?;
        self.check_target("assembled_bce", saliency, target)?;
        let n = T::lit(target.len().max(1) as f64);
        let one = T::one();
        let total: T = self
            .value(shape)
            .data()
            .iter()
            .zip(self.value(saliency).data())
            .zip(target.data())
            .map(|((&l, &g), &t)| {
                let (log_m, log_1m) = assembled_logs(l, g);
                -(t * log_m + (one - t) * log_1m)
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::AssembledBce {
                shape,
                saliency,
                target: target.data().to_vec(),
            },
            &[shape, saliency],
        ))
    }

    /// Gradients of the scalar `loss` w.r.t. every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => self.conv_backward(&mut grads, &g, *input, *weight, *bias, geom, cols),
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    self.accumulate(&mut grads, *x, |dst| {
                        for ((d, &gv), &v) in dst.iter_mut().zip(&g).zip(xv) {
                            if v > T::zero() {
                                *d += gv;
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *x, |dst| {
                        for ((d, &gv), &s) in dst.iter_mut().zip(&g).zip(y) {
                            *d += gv * s * (T::one() - s);
                        }
                    });
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        let n = self.value(v).len();
                        self.accumulate(&mut grads, v, |dst| {
                            for chunk in g.chunks_exact(n) {
                                for (d, &gv) in dst.iter_mut().zip(chunk) {
                                    *d += gv;
                                }
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    for (v, other) in [(*a, *b), (*b, *a)] {
                        let n = self.value(v).len();
                        let ov = self.value(other).data();
                        let m = ov.len();
                        self.accumulate(&mut grads, v, |dst| {
                            // g and the product have the shape of the larger operand.
                            for (j, &gv) in g.iter().enumerate() {
                                dst[j % n] += gv * ov[j % m];
                            }
                        });
                    }
                }
                Op::Scale(x, f) => {
                    self.accumulate(&mut grads, *x, |dst| {
                        for (d, &gv) in dst.iter_mut().zip(&g) {
                            *d += gv * *f;
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    self.accumulate(&mut grads, *x, |dst| dst.iter_mut().for_each(|d| *d += gv));
                }
                Op::Reshape(x) => {
                    self.accumulate(&mut grads, *x, |dst| {
                        dst.iter_mut().zip(&g).for_each(|(d, &gv)| *d += gv)
                    });
                }
                Op::Resize {
                    input,
                    planes,
                    in_hw,
                    ys,
                    xs,
                } => {
                    self.accumulate(&mut grads, *input, |dst| {
                        kernels::resize_backward(&g, *planes, *in_hw, ys, xs, dst)
                    });
                }
                Op::Slice { input, origin } => {
                    let s = self.shape(*input);
                    let (h, w) = (s[1], s[2]);
                    let e = node.value.shape();
                    self.accumulate(&mut grads, *input, |dst| {
                        let mut k = 0;
                        for c in origin[0]..origin[0] + e[0] {
                            for y in origin[1]..origin[1] + e[1] {
                                let row = (c * h + y) * w + origin[2];
                                for d in &mut dst[row..row + e[2]] {
                                    *d += g[k];
                                    k += 1;
                                }
                            }
                        }
                    });
                }
                Op::Gather { input, points } => {
                    let s = self.shape(*input);
                    let (c, h, w) = (s[0], s[1], s[2]);
                    self.accumulate(&mut grads, *input, |dst| {
                        for (p, &(y, x)) in points.iter().enumerate() {
                            for ch in 0..c {
                                dst[(ch * h + y) * w + x] += g[p * c + ch];
                            }
                        }
                    });
                }
                Op::L1 { pred, target } => {
                    let pv = self.value(*pred).data();
                    let gv = g[0];
                    self.accumulate(&mut grads, *pred, |dst| {
                        for ((d, &p), &t) in dst.iter_mut().zip(pv).zip(target) {
                            if p > t {
                                *d += gv;
                            } else if p < t {
                                *d -= gv;
                            }
                        }
                    });
                }
                Op::Focal {
                    logits,
                    target,
                    alpha,
                    beta,
                    norm,
                } => {
                    let xv = self.value(*logits).data();
                    let scale = -g[0] / *norm;
                    let (a, b) = (*alpha, *beta);
                    let one = T::one();
                    self.accumulate(&mut grads, *logits, |dst| {
                        for ((d, &x), &y) in dst.iter_mut().zip(xv).zip(target) {
                            let p = kernels::sigmoid(x);
                            let q = kernels::sigmoid(-x);
                            let term = if y == one {
                                // d/dx (1-p)^a log p
                                q.powf(a) * (q + a * p * kernels::softplus(-x))
                            } else {
                                // d/dx (1-y)^b p^a log(1-p)
                                (one - y).powf(b) * p.powf(a) * (-a * q * kernels::softplus(x) - p)
                            };
                            *d += scale * term;
                        }
                    });
                }
                Op::Bce { logits, target } => {
                    let xv = self.value(*logits).data();
                    let scale = g[0] / T::lit(target.len().max(1) as f64);
                    self.accumulate(&mut grads, *logits, |dst| {
                        for ((d, &x), &t) in dst.iter_mut().zip(xv).zip(target) {
                            *d += scale * (kernels::sigmoid(x) - t);
                        }
                    });
                }
                Op::AssembledBce {
                    shape,
                    saliency,
                    target,
                } => {
                    let lv = self.value(*shape).data();
                    let gvv = self.value(*saliency).data();
                    let scale = g[0] / T::lit(target.len().max(1) as f64);
                    let one = T::one();
                    // d/dL = -t sigma(-L) + (1-t) M/(1-M) sigma(-L), the second
                    // factor evaluated in log space.
                    let adjoint = |own: T, log_m: T, log_1m: T, t: T| {
                        -t * kernels::sigmoid(-own)
                            + (one - t) * (log_m - log_1m - kernels::softplus(own)).exp()
                    };
                    let mut dl = vec![T::zero(); lv.len()];
                    let mut dg = vec![T::zero(); lv.len()];
                    for i in 0..lv.len() {
                        let (log_m, log_1m) = assembled_logs(lv[i], gvv[i]);
                        dl[i] = scale * adjoint(lv[i], log_m, log_1m, target[i]);
                        dg[i] = scale * adjoint(gvv[i], log_m, log_1m, target[i]);
                    }
                    self.accumulate(&mut grads, *shape, |dst| {
                        dst.iter_mut().zip(&dl).for_each(|(d, &v)| *d += v)
                    });
                    self.accumulate(&mut grads, *saliency, |dst| {
                        dst.iter_mut().zip(&dg).for_each(|(d, &v)| *d += v)
                    });
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        cols: &[Vec<T>],
    ) {
        let o = self.shape(weight)[0];
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let n = self.shape(input)[0];
        let img_len = geom.channels * geom.height * geom.width;
        if let Some(b) = bias {
            self.accumulate(grads, b, |dst| {
                for go in g.chunks_exact(o * ncols) {
                    for (oc, chunk) in go.chunks_exact(ncols).enumerate() {
                        dst[oc] += chunk.iter().copied().sum();
                    }
                }
            });
        }
        self.accumulate(grads, weight, |dst| {
            for (img, go) in g.chunks_exact(o * ncols).enumerate() {
                gemm(
                    Mat::new(go, o, ncols),
                    Mat::t(&cols[img], ncols, rows),
                    T::one(),
                    dst,
                );
            }
        });
        if self.requires_grad(input) {
            let wt = self.value(weight).data();
            let mut dcols = vec![T::zero(); rows * ncols];
            self.accumulate(grads, input, |dst| {
                for img in 0..n {
                    let go = &g[img * o * ncols..(img + 1) * o * ncols];
                    gemm(Mat::t(wt, rows, o), Mat::new(go, o, ncols), T::zero(), &mut dcols);
                    kernels::col2im(&dcols, geom, &mut dst[img * img_len..(img + 1) * img_len]);
                }
            });
        }
    }
}

/// `(log M, log(1 - M))` for `M = sigmoid(l) * sigmoid(g)`.
fn assembled_logs<T: Float>(l: T, g: T) -> (T, T) {
    let (sl, sg) = (kernels::softplus(-l), kernels::softplus(-g));
    let log_m = -sl - sg;
    let log_1m = kernels::log_sum_exp3(-l, -g, -l - g) - sl - sg;
    (log_m, log_1m)
}
