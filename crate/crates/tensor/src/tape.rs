//! Recorded-operation tape for reverse-mode differentiation.
//!
//! Every op appends one node whose inputs already exist on the tape, so node
//! ids are topologically ordered by construction. [`Tape::backward`] walks the
//! nodes once in reverse and returns the gradient of every node that depends
//! on a `requires_grad` leaf.

use crate::kernels;
use crate::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var },
    Pointwise { input: Var, weight: Var, bias: Var },
    Affine { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Tanh(Var),
    CrossEntropy { logits: Var, labels: Vec<u8>, ignore: u8, scale: f64, probs: Vec<f64> },
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Mean(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Reshape(Var),
    ChannelScale { input: Var, scales: Var },
    Softmax(Var),
    WeightedSum { items: Vec<Var>, weights: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(TensorError::dim(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    /// Constant leaf: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = chw(self.value(input), "conv2d")?;
        let ks = self.value(kernel).shape().to_vec();
        let cout = match ks.as_slice() {
            &[o, i, 3, 3] if i == cin => o,
            s => return Err(TensorError::dim("conv2d", format!("kernel {s:?} incompatible with input channels {cin}"))),
        };
        if self.value(bias).shape() != [cout] {
            return Err(TensorError::dim("conv2d", format!("bias {:?} for {cout} output channels", self.value(bias).shape())));
        }
        let out = kernels::conv2d(self.value(input).data(), cin, h, w, self.value(kernel).data(), self.value(bias).data());
        let value = Tensor::new(vec![cout, h, w], out)?;
        self.push(value, Op::Conv2d { input, kernel, bias }, "conv2d", &[input, kernel, bias])
    }

    pub fn pointwise_conv(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = chw(self.value(input), "pointwise_conv")?;
        let cout = match self.value(weight).shape() {
            &[o, i] if i == cin => o,
            s => return Err(TensorError::dim("pointwise_conv", format!("weight {s:?} incompatible with input channels {cin}"))),
        };
        if self.value(bias).shape() != [cout] {
            return Err(TensorError::dim("pointwise_conv", "bias length differs from output channels"));
        }
        let out = kernels::pointwise(self.value(input).data(), cin, h * w, self.value(weight).data(), self.value(bias).data());
        let value = Tensor::new(vec![cout, h, w], out)?;
        self.push(value, Op::Pointwise { input, weight, bias }, "pointwise_conv", &[input, weight, bias])
    }

    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let n = self.value(input).len();
        if self.value(input).shape().len() != 1 {
            return Err(TensorError::dim("affine", "input must be a vector"));
        }
        let m = match self.value(weight).shape() {
            &[m, k] if k == n => m,
            s => return Err(TensorError::dim("affine", format!("weight {s:?} for input length {n}"))),
        };
        if self.value(bias).shape() != [m] {
            return Err(TensorError::dim("affine", "bias length differs from output width"));
        }
        let out = kernels::affine(self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        self.push(Tensor::vector(out), Op::Affine { input, weight, bias }, "affine", &[input, weight, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a.max(0.0)).collect())?;
        self.push(out, Op::Relu(x), "relu", &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a.tanh()).collect())?;
        self.push(out, Op::Tanh(x), "tanh", &[x])
    }

    /// Mean pixel-wise cross-entropy over pixels whose label is not `ignore`.
    pub fn pixel_cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let count = labels.iter().filter(|&&l| l != ignore).count();
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        self.pixel_cross_entropy_scaled(logits, labels, ignore, 1.0 / count as f64)
    }

    /// `scale * sum(-log softmax(logits)[label])` over non-ignored pixels.
    ///
    /// Batch losses are built from this by scaling every image with
    /// `1 / total_pixels` and adding. An image whose pixels are all ignored
    /// contributes an exact zero.
    pub fn pixel_cross_entropy_scaled(&mut self, logits: Var, labels: &[u8], ignore: u8, scale: f64) -> Result<Var> {
        let (classes, h, w) = chw(self.value(logits), "pixel_cross_entropy")?;
        let plane = h * w;
        if labels.len() != plane {
            return Err(TensorError::dim("pixel_cross_entropy", format!("{} labels for {h}x{w} logits", labels.len())));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; classes * plane];
        let mut total = 0.0;
        let mut col = vec![0.0; classes];
        for (p, &label) in labels.iter().enumerate() {
            if label == ignore {
                continue;
            }
            if label as usize >= classes {
                return Err(TensorError::Label { label, classes });
            }
            for c in 0..classes {
                col[c] = z[c * plane + p];
            }
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = col.iter().map(|&v| (v - max).exp()).sum();
            let log_sum = sum.ln();
            total += log_sum - (col[label as usize] - max);
            for c in 0..classes {
                probs[c * plane + p] = (col[c] - max - log_sum).exp();
            }
        }
        let value = Tensor::scalar(scale * total);
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), ignore, scale, probs }, "pixel_cross_entropy", &[logits])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw(self.value(x), "global_avg_pool")?;
        let plane = h * w;
        let d = self.value(x).data();
        let out = (0..c).map(|i| d[i * plane..(i + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
        self.push(Tensor::vector(out), Op::GlobalAvgPool(x), "global_avg_pool", &[x])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::dim(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_map(a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub", &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())?;
        self.push(out, Op::Scale(a, factor), "scale", &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * x).collect())?;
        self.push(out, Op::Square(a), "square", &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean", &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum", &[a])
    }

    /// Flattening concatenation into a vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::dim("concat", "nothing to concatenate"));
        }
        let data: Vec<f64> = parts.iter().flat_map(|&p| self.value(p).data().iter().copied()).collect();
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), "concat", parts)
    }

    /// Contiguous range `[start, start+len)` of the flattened input, as a vector.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(input).len();
        if len == 0 || start + len > n {
            return Err(TensorError::dim("slice", format!("[{start}, {}) out of {n}", start + len)));
        }
        let data = self.value(input).data()[start..start + len].to_vec();
        self.push(Tensor::vector(data), Op::Slice { input, start }, "slice", &[input])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(input).reshape(shape)?;
        self.push(out, Op::Reshape(input), "reshape", &[input])
    }

    /// Multiplies every entry of leading-axis slice `c` by `scales[c]`.
    pub fn channel_scale(&mut self, input: Var, scales: Var) -> Result<Var> {
        let v = self.value(input);
        let s = self.value(scales);
        if s.shape().len() != 1 || s.len() != v.leading() {
            return Err(TensorError::dim("channel_scale", format!("scales {:?} for input {:?}", s.shape(), v.shape())));
        }
        let row = v.row_len();
        let data = v.data().iter().enumerate().map(|(k, x)| x * s.data()[k / row]).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::ChannelScale { input, scales }, "channel_scale", &[input, scales])
    }

    /// Softmax of a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        if self.value(x).shape().len() != 1 {
            return Err(TensorError::dim("softmax", "input must be a vector"));
        }
        let out = kernels::softmax(self.value(x).data());
        self.push(Tensor::vector(out), Op::Softmax(x), "softmax", &[x])
    }

    /// `sum_i weights[i] * items[i]` for equally shaped items.
    pub fn weighted_sum(&mut self, items: &[Var], weights: Var) -> Result<Var> {
        let w = self.value(weights);
        if items.is_empty() || w.len() != items.len() {
            return Err(TensorError::dim("weighted_sum", format!("{} weights for {} items", w.len(), items.len())));
        }
        let shape = self.value(items[0]).shape().to_vec();
        let mut acc = vec![0.0; self.value(items[0]).len()];
        for (k, &it) in items.iter().enumerate() {
            let v = self.value(it);
            if v.shape() != shape.as_slice() {
                return Err(TensorError::dim("weighted_sum", "items differ in shape"));
            }
            let wk = w.data()[k];
            for (a, b) in acc.iter_mut().zip(v.data()) {
                *a += wk * b;
            }
        }
        let out = Tensor::new(shape, acc)?;
        let mut inputs = items.to_vec();
        inputs.push(weights);
        self.push(out, Op::WeightedSum { items: items.to_vec(), weights }, "weighted_sum", &inputs)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        let ls = self.value(loss);
        if !ls.is_scalar() {
            return Err(TensorError::NotScalar(ls.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(self.nodes)
            .map(|(g, node)| match g {
                Some(g) if node.requires_grad => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite { op: "backward" });
                    }
                    Tensor::new(node.value.shape().to_vec(), g).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Grads { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let (cin, h, w) = chw(self.value(*input), "conv2d")?;
                let cout = self.value(*bias).len();
                if wants(*input) {
                    let gi = kernels::conv2d_grad_input(g, cin, h, w, self.value(*kernel).data(), cout);
                    accumulate(grads, *input, &gi);
                }
                if wants(*kernel) || wants(*bias) {
                    let (gk, gb) = kernels::conv2d_grad_params(g, self.value(*input).data(), cin, h, w, cout);
                    accumulate_if(grads, *kernel, &gk, wants(*kernel));
                    accumulate_if(grads, *bias, &gb, wants(*bias));
                }
            }
            Op::Pointwise { input, weight, bias } => {
                let (cin, h, w) = chw(self.value(*input), "pointwise_conv")?;
                let cout = self.value(*bias).len();
                if wants(*input) {
                    let gi = kernels::pointwise_grad_input(g, cin, h * w, self.value(*weight).data(), cout);
                    accumulate(grads, *input, &gi);
                }
                if wants(*weight) || wants(*bias) {
                    let (gw, gb) = kernels::pointwise_grad_params(g, self.value(*input).data(), cin, h * w, cout);
                    accumulate_if(grads, *weight, &gw, wants(*weight));
                    accumulate_if(grads, *bias, &gb, wants(*bias));
                }
            }
            Op::Affine { input, weight, bias } => {
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let n = x.len();
                if wants(*input) {
                    let mut gi = vec![0.0; n];
                    for (o, go) in g.iter().enumerate() {
                        for (a, b) in gi.iter_mut().zip(&wt[o * n..(o + 1) * n]) {
                            *a += go * b;
                        }
                    }
                    accumulate(grads, *input, &gi);
                }
                if wants(*weight) {
                    let gw: Vec<f64> = g.iter().flat_map(|go| x.iter().map(move |xi| go * xi)).collect();
                    accumulate(grads, *weight, &gw);
                }
                accumulate_if(grads, *bias, g, wants(*bias));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gi: Vec<f64> = g.iter().zip(xv).map(|(gv, &a)| if a > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(grads, *x, &gi);
            }
            Op::Tanh(x) => {
                let out = node.value.data();
                let gi: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                accumulate(grads, *x, &gi);
            }
            Op::CrossEntropy { logits, labels, ignore, scale, probs } => {
                let plane = labels.len();
                let classes = probs.len() / plane;
                let k = g[0] * scale;
                let mut gi = vec![0.0; probs.len()];
                for (p, &label) in labels.iter().enumerate() {
                    if label == *ignore {
                        continue;
                    }
                    for c in 0..classes {
                        let onehot = if c == label as usize { 1.0 } else { 0.0 };
                        gi[c * plane + p] = k * (probs[c * plane + p] - onehot);
                    }
                }
                accumulate(grads, *logits, &gi);
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = chw(self.value(*x), "global_avg_pool")?;
                let plane = h * w;
                let mut gi = vec![0.0; c * plane];
                for i in 0..c {
                    gi[i * plane..(i + 1) * plane].fill(g[i] / plane as f64);
                }
                accumulate(grads, *x, &gi);
            }
            Op::Add(a, b) => {
                accumulate_if(grads, *a, g, wants(*a));
                accumulate_if(grads, *b, g, wants(*b));
            }
            Op::Sub(a, b) => {
                accumulate_if(grads, *a, g, wants(*a));
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &ga);
                }
                if wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Scale(a, f) => {
                let gi: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(grads, *a, &gi);
            }
            Op::Square(a) => {
                let gi: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(gv, x)| 2.0 * x * gv).collect();
                accumulate(grads, *a, &gi);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    accumulate_if(grads, p, &g[offset..offset + n], wants(p));
                    offset += n;
                }
            }
            Op::Slice { input, start } => {
                let mut gi = vec![0.0; self.value(*input).len()];
                gi[*start..*start + g.len()].copy_from_slice(g);
                accumulate(grads, *input, &gi);
            }
            Op::Reshape(x) => accumulate(grads, *x, g),
            Op::ChannelScale { input, scales } => {
                let x = self.value(*input);
                let s = self.value(*scales).data();
                let row = x.row_len();
                if wants(*input) {
                    let gi: Vec<f64> = g.iter().enumerate().map(|(k, gv)| gv * s[k / row]).collect();
                    accumulate(grads, *input, &gi);
                }
                if wants(*scales) {
                    let mut gs = vec![0.0; s.len()];
                    for (k, (gv, xv)) in g.iter().zip(x.data()).enumerate() {
                        gs[k / row] += gv * xv;
                    }
                    accumulate(grads, *scales, &gs);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let gi: Vec<f64> = y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect();
                accumulate(grads, *x, &gi);
            }
            Op::WeightedSum { items, weights } => {
                let w = self.value(*weights).data();
                if wants(*weights) {
                    let gw: Vec<f64> = items.iter().map(|&it| self.value(it).data().iter().zip(g).map(|(a, b)| a * b).sum()).collect();
                    accumulate(grads, *weights, &gw);
                }
                for (k, &it) in items.iter().enumerate() {
                    if wants(it) {
                        let gi: Vec<f64> = g.iter().map(|v| v * w[k]).collect();
                        accumulate(grads, it, &gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_if(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], cond: bool) {
    if cond {
        accumulate(grads, v, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_zero_input_is_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 4])).unwrap();
        let k = tape.constant(Tensor::full(&[1, 2, 3, 3], 0.7)).unwrap();
        let b = tape.constant(Tensor::vector(vec![1.5])).unwrap();
        let y = tape.conv2d(x, k, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
        assert_eq!(tape.value(y).shape(), &[1, 3, 4]);
    }

    #[test]
    fn conv_center_tap_scales_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[5.0])).unwrap();
        let mut kd = vec![0.0; 9];
        kd[4] = 2.0;
        let k = tape.constant(t(&[1, 1, 3, 3], &kd)).unwrap();
        let b = tape.constant(Tensor::vector(vec![0.0])).unwrap();
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 3])).unwrap();
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1])).unwrap();
        assert!(matches!(tape.conv2d(x, k, b), Err(TensorError::Dimension { .. })));
    }

    #[test]
    fn pointwise_identity_and_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 1, 1], &[1.0, 2.0])).unwrap();
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.pointwise_conv(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w = tape.constant(t(&[2, 2], &[1.0, 1.0, 0.0, 3.0])).unwrap();
        let b = tape.constant(t(&[2], &[0.0, 1.0])).unwrap();
        let y = tape.pointwise_conv(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(tape.pointwise_conv(x, bad, b).is_err());
    }

    #[test]
    fn affine_identity_and_relu_signs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])).unwrap();
        let zero = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.affine(x, eye, zero).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 0.0, 2.0]);
        let r = tape.relu(y).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.affine(x, bad, zero).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full(&[2, 3, 3], 0.25)).unwrap();
        let labels = [0u8, 1, 0, 1, 1, 0, 0, 0, 1];
        let l = tape.pixel_cross_entropy(z, &labels, 255).unwrap();
        assert_eq!(tape.value(l).item(), std::f64::consts::LN_2);
    }

    #[test]
    fn cross_entropy_large_logit_is_stable() {
        let mut tape = Tape::new();
        let z = tape.param(t(&[2, 1, 1], &[1000.0, 0.0])).unwrap();
        let l = tape.pixel_cross_entropy(z, &[0], 255).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).unwrap().all_finite());
    }

    #[test]
    fn cross_entropy_errors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 1, 2])).unwrap();
        assert_eq!(tape.pixel_cross_entropy(z, &[255, 255], 255), Err(TensorError::DegenerateBatch));
        assert!(matches!(tape.pixel_cross_entropy(z, &[0, 2], 255), Err(TensorError::Label { label: 2, classes: 2 })));
    }

    #[test]
    fn global_pool_of_constant_and_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 3, 3], 4.0)).unwrap();
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0, 4.0]);
        let x = tape.constant(t(&[3, 1, 1], &[1.0, -2.0, 3.0])).unwrap();
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let th = tape.param(t(&[2, 2], &[0.3, -1.0, 2.0, 5.0])).unwrap();
        let l = tape.sum(th).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(th).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_zero_times_f_is_zero() {
        let mut tape = Tape::new();
        let th = tape.param(t(&[3], &[0.3, -1.0, 2.0])).unwrap();
        let sq = tape.square(th).unwrap();
        let s = tape.sum(sq).unwrap();
        let l = tape.scale(s, 0.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(th).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let th = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(tape.backward(th).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[1e308])).unwrap();
        assert_eq!(tape.scale(a, 10.0), Err(TensorError::NonFinite { op: "scale" }));
        assert!(tape.leaf(t(&[1], &[f64::NAN]), true).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let m = tape.mul(a, c).unwrap();
        let l = tape.sum(m).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn softmax_of_equal_scores_is_uniform() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.7; 4])).unwrap();
        let w = tape.softmax(s).unwrap();
        assert_eq!(tape.value(w).data(), &[0.25; 4]);
    }

    #[test]
    fn slice_concat_reshape_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let lo = tape.slice(a, 0, 2).unwrap();
        let hi = tape.slice(a, 2, 2).unwrap();
        let c = tape.concat(&[hi, lo]).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 1.0, 2.0]);
        let r = tape.reshape(c, &[2, 2]).unwrap();
        assert_eq!(tape.value(r).shape(), &[2, 2]);
        assert!(tape.slice(a, 3, 2).is_err());
    }
}
