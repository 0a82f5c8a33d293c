//! Three-group segmentation network with an expandable classifier head.

use std::ops::Range;

use fcl_tensor::{kernels, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IN_CHANNELS: usize = 3;
const INPUT_CENTER: f64 = 0.5;
pub const SHALLOW_CHANNELS: usize = 8;
pub const DEEP_CHANNELS: usize = 16;
/// Width of the feature map the head consumes.
pub const FEATURE_DIM: usize = DEEP_CHANNELS;

/// Parameter slots in storage order.
pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const CONV3_W: usize = 4;
pub const CONV3_B: usize = 5;
pub const HEAD_W: usize = 6;
pub const HEAD_B: usize = 7;
pub const PARAM_COUNT: usize = 8;

pub const PARAM_NAMES: [&str; PARAM_COUNT] =
    ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "conv3.weight", "conv3.bias", "head.weight", "head.bias"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerGroup {
    Shallow,
    Deep,
    Head,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Shallow, LayerGroup::Deep, LayerGroup::Head];

    /// Parameter slots owned by this group.
    pub fn slots(self) -> Range<usize> {
        match self {
            LayerGroup::Shallow => CONV1_W..CONV2_W,
            LayerGroup::Deep => CONV2_W..HEAD_W,
            LayerGroup::Head => HEAD_W..PARAM_COUNT,
        }
    }

    pub fn of_slot(slot: usize) -> LayerGroup {
        match slot {
            CONV1_W | CONV1_B => LayerGroup::Shallow,
            CONV2_W..=CONV3_B => LayerGroup::Deep,
            _ => LayerGroup::Head,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerGroup::Shallow => "shallow",
            LayerGroup::Deep => "deep",
            LayerGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<LayerGroup> {
        LayerGroup::ALL.into_iter().find(|g| g.name() == s)
    }

    /// Output channels across the group's layers (fixed for the backbone).
    pub fn channel_count(self, class_count: usize) -> usize {
        match self {
            LayerGroup::Shallow => SHALLOW_CHANNELS,
            LayerGroup::Deep => 2 * DEEP_CHANNELS,
            LayerGroup::Head => class_count,
        }
    }
}

/// Convolutional segmenter: one shallow conv, two deep convs, 1x1 head.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    params: Vec<Tensor>,
}

/// Tape handles for every parameter of a [`SegNet`], in slot order.
pub type NetVars = [Var; PARAM_COUNT];

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if bound > 0.0 {
        for v in t.data_mut() {
            *v = rng.random_range(-bound..=bound);
        }
    }
    t
}

fn shapes(class_count: usize) -> [Vec<usize>; PARAM_COUNT] {
    [
        vec![SHALLOW_CHANNELS, IN_CHANNELS, 3, 3],
        vec![SHALLOW_CHANNELS],
        vec![DEEP_CHANNELS, SHALLOW_CHANNELS, 3, 3],
        vec![DEEP_CHANNELS],
        vec![DEEP_CHANNELS, DEEP_CHANNELS, 3, 3],
        vec![DEEP_CHANNELS],
        vec![class_count, DEEP_CHANNELS],
        vec![class_count],
    ]
}

impl SegNet {
    /// He-uniform weights, zero biases.
    pub fn new(class_count: usize, rng: &mut impl Rng) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::contract("a network needs at least one class"));
        }
        let params = shapes(class_count)
            .iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
                }
            })
            .collect();
        Ok(SegNet { params })
    }

    pub fn zeros(class_count: usize) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::contract("a network needs at least one class"));
        }
        Ok(SegNet { params: shapes(class_count).iter().map(|s| Tensor::zeros(s)).collect() })
    }

    /// Builds a network from tensors in slot order, validating every shape.
    pub fn from_params(params: Vec<Tensor>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::contract(format!("expected {PARAM_COUNT} tensors, got {}", params.len())));
        }
        let classes = params[HEAD_B].len();
        for (slot, (p, want)) in params.iter().zip(shapes(classes)).enumerate() {
            if p.shape() != want.as_slice() {
                return Err(Error::contract(format!("{} has shape {:?}, expected {want:?}", PARAM_NAMES[slot], p.shape())));
            }
        }
        Ok(SegNet { params })
    }

    pub fn class_count(&self) -> usize {
        self.params[HEAD_B].len()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor> {
        self.params
    }

    pub fn group(&self, group: LayerGroup) -> &[Tensor] {
        &self.params[group.slots()]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Values of every parameter, grouped shallow, deep, head, in slot order.
    pub fn flatten(&self) -> Vec<f64> {
        LayerGroup::ALL.iter().flat_map(|&g| self.group(g).iter().flat_map(|t| t.data().iter().copied())).collect()
    }

    /// Registers every parameter on `tape`; `trainable` decides which track gradients.
    pub fn register(&self, tape: &mut Tape, trainable: impl Fn(LayerGroup) -> bool) -> Result<NetVars> {
        let mut vars = Vec::with_capacity(PARAM_COUNT);
        for (slot, p) in self.params.iter().enumerate() {
            vars.push(tape.leaf(p.clone(), trainable(LayerGroup::of_slot(slot)))?);
        }
        Ok(vars.try_into().expect("slot count"))
    }

    /// Appends `n_new` head rows drawn from uniform(-init_scale, init_scale).
    pub fn expand_head(&self, n_new: usize, init_scale: f64, rng: &mut impl Rng) -> Result<SegNet> {
        if n_new == 0 {
            return Err(Error::contract("head expansion needs at least one new class"));
        }
        let old = self.class_count();
        let mut w = self.params[HEAD_W].data().to_vec();
        let mut b = self.params[HEAD_B].data().to_vec();
        let fresh = uniform(rng, &[n_new, FEATURE_DIM], init_scale);
        w.extend_from_slice(fresh.data());
        let fresh_b = uniform(rng, &[n_new], init_scale);
        b.extend_from_slice(fresh_b.data());
        let mut params = self.params.clone();
        params[HEAD_W] = Tensor::new(vec![old + n_new, FEATURE_DIM], w)?;
        params[HEAD_B] = Tensor::new(vec![old + n_new], b)?;
        Ok(SegNet { params })
    }

    /// Keeps the first `class_count` head rows.
    pub fn truncate_head(&self, class_count: usize) -> Result<SegNet> {
        if class_count == 0 || class_count > self.class_count() {
            return Err(Error::contract(format!("cannot truncate a {}-class head to {class_count}", self.class_count())));
        }
        let mut params = self.params.clone();
        params[HEAD_W] = Tensor::new(vec![class_count, FEATURE_DIM], self.params[HEAD_W].data()[..class_count * FEATURE_DIM].to_vec())?;
        params[HEAD_B] = Tensor::new(vec![class_count], self.params[HEAD_B].data()[..class_count].to_vec())?;
        Ok(SegNet { params })
    }

    /// Copy of `base` whose `group` comes from `donor`; a donor head is cut
    /// to the base's class rows.
    pub fn replace_group(base: &SegNet, donor: &SegNet, group: LayerGroup) -> Result<SegNet> {
        let donor = if group == LayerGroup::Head {
            if donor.class_count() < base.class_count() {
                return Err(Error::Tensor(fcl_tensor::TensorError::Dimension {
                    op: "replace_group",
                    detail: format!("donor head has {} classes, base needs {}", donor.class_count(), base.class_count()),
                }));
            }
            donor.truncate_head(base.class_count())?
        } else {
            donor.clone()
        };
        let mut params = base.params.clone();
        for slot in group.slots() {
            params[slot] = donor.params[slot].clone();
        }
        Ok(SegNet { params })
    }

    /// Backbone output `[16, H, W]` computed without a tape.
    pub fn deep_features(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = check_image(image)?;
        let p = &self.params;
        let x = centered(image);
        let mut a = kernels::conv2d(x.data(), IN_CHANNELS, h, w, p[CONV1_W].data(), p[CONV1_B].data());
        relu_in_place(&mut a);
        let mut b = kernels::conv2d(&a, SHALLOW_CHANNELS, h, w, p[CONV2_W].data(), p[CONV2_B].data());
        relu_in_place(&mut b);
        let mut c = kernels::conv2d(&b, DEEP_CHANNELS, h, w, p[CONV3_W].data(), p[CONV3_B].data());
        relu_in_place(&mut c);
        Ok(Tensor::new(vec![DEEP_CHANNELS, h, w], c)?)
    }

    /// Head logits for a precomputed feature map.
    pub fn head_logits(&self, features: &Tensor) -> Result<Tensor> {
        head_logits(&self.params[HEAD_W], &self.params[HEAD_B], features)
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.head_logits(&self.deep_features(image)?)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Vec<u8>> {
        let logits = self.forward(image)?;
        let plane = logits.row_len();
        Ok(kernels::argmax_pixels(logits.data(), self.class_count(), plane))
    }
}

/// Logits of a head given as separate weight/bias tensors.
pub fn head_logits(weight: &Tensor, bias: &Tensor, features: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match features.shape() {
        &[c, h, w] if c == FEATURE_DIM => (c, h, w),
        s => return Err(Error::contract(format!("feature map shape {s:?}"))),
    };
    let out = kernels::pointwise(features.data(), c, h * w, weight.data(), bias.data());
    Ok(Tensor::new(vec![bias.len(), h, w], out)?)
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[IN_CHANNELS, h, w] => Ok((h, w)),
        s => {
            Err(Error::Tensor(fcl_tensor::TensorError::Dimension { op: "forward", detail: format!("image shape {s:?}, expected [3,H,W]") }))
        }
    }
}

/// Inputs live in [0, 1]; the backbone sees them shifted to [-0.5, 0.5].
fn centered(image: &Tensor) -> Tensor {
    let data = image.data().iter().map(|v| v - INPUT_CENTER).collect();
    Tensor::new(image.shape().to_vec(), data).expect("shape unchanged")
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Records the backbone on `tape` and returns the deep feature map.
pub fn record_backbone(tape: &mut Tape, vars: &NetVars, image: &Tensor) -> Result<Var> {
    check_image(image)?;
    let x = tape.constant(centered(image))?;
    let h = tape.conv2d(x, vars[CONV1_W], vars[CONV1_B])?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, vars[CONV2_W], vars[CONV2_B])?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, vars[CONV3_W], vars[CONV3_B])?;
    Ok(tape.relu(h)?)
}

/// Records a full forward pass and returns `(deep features, logits)`.
pub fn record_forward(tape: &mut Tape, vars: &NetVars, image: &Tensor) -> Result<(Var, Var)> {
    let deep = record_backbone(tape, vars, image)?;
    let logits = tape.pointwise_conv(deep, vars[HEAD_W], vars[HEAD_B])?;
    Ok((deep, logits))
}

/// Per-output-channel population statistics of a layer group.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSummary {
    pub per_channel_mean: Vec<f64>,
    pub per_channel_var: Vec<f64>,
}

impl ChannelSummary {
    /// Statistics over `(weight, bias)` pairs; each channel pools its weight
    /// row with its bias entry. Layers are concatenated in order.
    pub fn of_layers(layers: &[(&Tensor, &Tensor)]) -> Result<Self> {
        let mut mean = Vec::new();
        let mut var = Vec::new();
        for (w, b) in layers {
            if w.leading() != b.len() {
                return Err(Error::contract(format!("weight {:?} and bias {:?} disagree on channels", w.shape(), b.shape())));
            }
            for c in 0..b.len() {
                let row = w.row(c);
                let n = (row.len() + 1) as f64;
                let m = (row.iter().sum::<f64>() + b.data()[c]) / n;
                let v = (row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() + (b.data()[c] - m).powi(2)) / n;
                mean.push(m);
                var.push(v);
            }
        }
        Ok(ChannelSummary { per_channel_mean: mean, per_channel_var: var })
    }

    /// Summary of a group given its tensors in slot order (weights and
    /// biases alternating), parameters or gradients alike.
    pub fn of_group(tensors: &[Tensor]) -> Result<Self> {
        let pairs: Vec<(&Tensor, &Tensor)> = tensors.chunks(2).map(|c| (&c[0], &c[1])).collect();
        Self::of_layers(&pairs)
    }

    pub fn channels(&self) -> usize {
        self.per_channel_mean.len()
    }

    /// Means followed by variances.
    pub fn to_vector(&self) -> Vec<f64> {
        self.per_channel_mean.iter().chain(&self.per_channel_var).copied().collect()
    }
}
