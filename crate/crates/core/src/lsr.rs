//! Layer-selective rehearsal: learned per-channel update corrections with
//! group-specific strengths, trained online against the memory loss.

use std::collections::BTreeMap;

use fcl_tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;

use crate::data::{MemoryBuffer, TerrainSample};
use crate::error::{Error, Result};
use crate::model::{ChannelSummary, LayerGroup, NetVars, SegNet, DEEP_CHANNELS, FEATURE_DIM, PARAM_COUNT};
use crate::nn::{grad_norm, sgd_step, Activation, Mlp, MlpVars};
use crate::train::{batch_ce, shuffled_batches, Velocity};

/// Correction strengths per group; shallow < deep < head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtectionWeights {
    alpha_s: f64,
    alpha_d: f64,
    alpha_c: f64,
}

impl ProtectionWeights {
    pub fn new(alpha_s: f64, alpha_d: f64, alpha_c: f64) -> Result<Self> {
        let ordered = 0.0 <= alpha_s && alpha_s < alpha_d && alpha_d < alpha_c;
        if !ordered || !alpha_c.is_finite() {
            return Err(Error::Config(format!(
                "protection weights must satisfy 0 <= alpha_s < alpha_d < alpha_c, got ({alpha_s}, {alpha_d}, {alpha_c})"
            )));
        }
        Ok(ProtectionWeights { alpha_s, alpha_d, alpha_c })
    }

    /// Strengths indexed by [`LayerGroup::index`].
    pub fn per_group(&self) -> [f64; 3] {
        [self.alpha_s, self.alpha_d, self.alpha_c]
    }

    /// The single strength with the same total budget.
    pub fn uniform(&self) -> f64 {
        (self.alpha_s + self.alpha_d + self.alpha_c) / 3.0
    }
}

impl Default for ProtectionWeights {
    fn default() -> Self {
        ProtectionWeights { alpha_s: 0.05, alpha_d: 0.2, alpha_c: 0.8 }
    }
}

/// What the memory says about old classes, under the current backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct PreservedKnowledge {
    /// Mean pooled deep feature over all exemplars.
    pub memory_feature: Vec<f64>,
    /// Per-class mean deep feature over that class's labelled exemplar pixels.
    pub prototypes: BTreeMap<u8, Vec<f64>>,
    /// (min, mean, max) pairwise cosine similarity of the prototypes.
    pub geometry: [f64; 3],
}

impl PreservedKnowledge {
    /// Stand-in used before any memory exists.
    pub fn empty() -> Self {
        PreservedKnowledge { memory_feature: vec![0.0; FEATURE_DIM], prototypes: BTreeMap::new(), geometry: [1.0; 3] }
    }

    pub fn collect(buffer: &MemoryBuffer, net: &SegNet) -> Result<Self> {
        let memory_feature = memory_features(buffer, net)?;
        let prototypes = class_prototypes(buffer, net)?;
        let rows: Vec<&[f64]> = prototypes.values().map(Vec::as_slice).collect();
        Ok(PreservedKnowledge { memory_feature, geometry: geometric_features(&rows), prototypes })
    }
}

fn pooled(features: &Tensor) -> Vec<f64> {
    (0..features.leading()).map(|c| features.row(c).iter().sum::<f64>() / features.row_len() as f64).collect()
}

/// Mean over exemplars of the spatially pooled deep features.
pub fn memory_features(buffer: &MemoryBuffer, net: &SegNet) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        return Err(Error::MemoryEmpty);
    }
    let mut acc = vec![0.0; FEATURE_DIM];
    for s in buffer.samples() {
        for (a, v) in acc.iter_mut().zip(pooled(&net.deep_features(&s.image)?)) {
            *a += v;
        }
    }
    let n = buffer.len() as f64;
    Ok(acc.into_iter().map(|v| v / n).collect())
}

/// Per stored class, the mean deep feature over its exemplars' pixels of that class.
pub fn class_prototypes(buffer: &MemoryBuffer, net: &SegNet) -> Result<BTreeMap<u8, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (&class, samples) in buffer.exemplars() {
        let mut acc = vec![0.0; FEATURE_DIM];
        let mut count = 0usize;
        for s in samples {
            let f = net.deep_features(&s.image)?;
            let plane = f.row_len();
            for (p, &l) in s.labels.iter().enumerate() {
                if l == class {
                    count += 1;
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += f.data()[c * plane + p];
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::PrototypeUndefined(class));
        }
        out.insert(class, acc.into_iter().map(|v| v / count as f64).collect());
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// (min, mean, max) cosine over unordered prototype pairs; (1, 1, 1) with fewer than two.
pub fn geometric_features(prototypes: &[&[f64]]) -> [f64; 3] {
    let mut sims = Vec::new();
    for i in 0..prototypes.len() {
        for j in i + 1..prototypes.len() {
            sims.push(cosine(prototypes[i], prototypes[j]));
        }
    }
    if sims.is_empty() {
        return [1.0; 3];
    }
    let min = sims.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    [min, sims.iter().sum::<f64>() / sims.len() as f64, max]
}

const ENC_WIDTH: usize = 32;
const HEAD_STATS: usize = 4;
/// Largest magnitude of a generated per-channel factor.
pub const FACTOR_BOUND: f64 = 0.1;
/// Generator gradients are rescaled to at most this global norm before a step.
pub const GEN_GRAD_CLIP: f64 = 1.0;

/// `sign(x) * ln(1 + |x|)`: keeps generator inputs in a narrow range
/// however large the raw parameter or gradient statistics grow.
fn squash(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    values.into_iter().map(|x| x.signum() * x.abs().ln_1p()).collect()
}

/// The three correction generators. Output layers start at zero, so fresh
/// generators emit null corrections until they have been trained.
/// The head generator runs one shared
/// fusion network per class row so its width does not depend on the class count.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSet {
    pub shallow: Mlp,
    pub deep: Mlp,
    pub proto_enc: Mlp,
    pub memory_enc: Mlp,
    pub geometry_enc: Mlp,
    pub fusion: Mlp,
}

fn summary_width(group: LayerGroup) -> usize {
    2 * group.channel_count(0)
}

impl GeneratorSet {
    pub fn new(rng: &mut impl Rng) -> Self {
        let shallow_in = 2 * summary_width(LayerGroup::Shallow) + FEATURE_DIM;
        let deep_in = 2 * summary_width(LayerGroup::Deep) + FEATURE_DIM;
        GeneratorSet {
            shallow: Mlp::new(&[shallow_in, 32, summary_width(LayerGroup::Shallow)], Activation::Tanh, 0.0, rng),
            deep: Mlp::new(&[deep_in, 64, 64, summary_width(LayerGroup::Deep)], Activation::Tanh, 0.0, rng),
            proto_enc: Mlp::new(&[FEATURE_DIM, ENC_WIDTH], Activation::Relu, 1.0, rng),
            memory_enc: Mlp::new(&[FEATURE_DIM, ENC_WIDTH], Activation::Relu, 1.0, rng),
            geometry_enc: Mlp::new(&[3, ENC_WIDTH], Activation::Relu, 1.0, rng),
            fusion: Mlp::new(&[HEAD_STATS + 3 * ENC_WIDTH, 64, 2], Activation::Tanh, 0.0, rng),
        }
    }

    fn nets(&self) -> [&Mlp; 6] {
        [&self.shallow, &self.deep, &self.proto_enc, &self.memory_enc, &self.geometry_enc, &self.fusion]
    }

    fn nets_mut(&mut self) -> [&mut Mlp; 6] {
        [&mut self.shallow, &mut self.deep, &mut self.proto_enc, &mut self.memory_enc, &mut self.geometry_enc, &mut self.fusion]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.nets().into_iter().flat_map(Mlp::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.nets_mut().into_iter().flat_map(Mlp::tensors_mut).collect()
    }

    /// Forces every generator output to zero.
    pub fn nullify(&mut self) {
        self.shallow.zero_output_layer();
        self.deep.zero_output_layer();
        self.fusion.zero_output_layer();
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<GenVars> {
        let v = self.nets().into_iter().map(|m| m.register(tape, trainable)).collect::<Result<Vec<_>>>()?;
        Ok(GenVars(v))
    }

    fn vars<'a>(&self, gv: &'a GenVars) -> impl Iterator<Item = Var> + 'a {
        gv.0.iter().flat_map(MlpVars::vars)
    }

    /// Per-channel `(u, v)` for `group`, recorded on `tape`.
    pub fn record_uv(&self, tape: &mut Tape, gv: &GenVars, group: LayerGroup, inputs: &GroupInputs) -> Result<(Var, Var)> {
        let (z, g) = (&inputs.params, &inputs.grads);
        if z.channels() != g.channels() {
            return Err(Error::contract("parameter and gradient summaries differ in channels"));
        }
        let channels = z.channels();
        let pk = inputs.knowledge;
        match group {
            LayerGroup::Shallow | LayerGroup::Deep => {
                let (mlp, vars) = if group == LayerGroup::Shallow { (&self.shallow, &gv.0[0]) } else { (&self.deep, &gv.0[1]) };
                let input = squash(z.to_vector().into_iter().chain(g.to_vector()).chain(pk.memory_feature.iter().copied()));
                if input.len() != mlp.input_dim() {
                    return Err(Error::Tensor(TensorError::Dimension {
                        op: "gen_correction",
                        detail: format!("{} inputs for a generator of width {}", input.len(), mlp.input_dim()),
                    }));
                }
                let x = tape.constant(Tensor::vector(input))?;
                let out = mlp.record(tape, vars, x)?;
                let out = tape.scale(out, FACTOR_BOUND)?;
                Ok((tape.slice(out, 0, channels)?, tape.slice(out, channels, channels)?))
            }
            LayerGroup::Head => {
                let proto = if pk.prototypes.is_empty() {
                    tape.constant(Tensor::zeros(&[ENC_WIDTH]))?
                } else {
                    let mut acc: Option<Var> = None;
                    for p in pk.prototypes.values() {
                        let x = tape.constant(Tensor::vector(squash(p.iter().copied())))?;
                        let e = self.proto_enc.record(tape, &gv.0[2], x)?;
                        acc = Some(match acc {
                            Some(a) => tape.add(a, e)?,
                            None => e,
                        });
                    }
                    let sum = acc.expect("non-empty prototypes");
                    tape.scale(sum, 1.0 / pk.prototypes.len() as f64)?
                };
                let m = tape.constant(Tensor::vector(squash(pk.memory_feature.iter().copied())))?;
                let mem = self.memory_enc.record(tape, &gv.0[3], m)?;
                let a = tape.constant(Tensor::vector(pk.geometry.to_vec()))?;
                let geo = self.geometry_enc.record(tape, &gv.0[4], a)?;
                let mut us = Vec::with_capacity(channels);
                let mut vs = Vec::with_capacity(channels);
                for c in 0..channels {
                    let stats = tape.constant(Tensor::vector(squash([
                        z.per_channel_mean[c],
                        z.per_channel_var[c],
                        g.per_channel_mean[c],
                        g.per_channel_var[c],
                    ])))?;
                    let x = tape.concat(&[stats, proto, mem, geo])?;
                    let out = self.fusion.record(tape, &gv.0[5], x)?;
                    us.push(tape.slice(out, 0, 1)?);
                    vs.push(tape.slice(out, 1, 1)?);
                }
                let (u, v) = (tape.concat(&us)?, tape.concat(&vs)?);
                Ok((tape.scale(u, FACTOR_BOUND)?, tape.scale(v, FACTOR_BOUND)?))
            }
        }
    }
}

/// Tape handles for a [`GeneratorSet`].
#[derive(Debug, Clone)]
pub struct GenVars(Vec<MlpVars>);

/// Everything a generator looks at for one group.
#[derive(Debug, Clone)]
pub struct GroupInputs<'a> {
    pub params: ChannelSummary,
    pub grads: ChannelSummary,
    pub knowledge: &'a PreservedKnowledge,
}

impl<'a> GroupInputs<'a> {
    pub fn new(group: LayerGroup, net: &SegNet, grads: &[Tensor], knowledge: &'a PreservedKnowledge) -> Result<Self> {
        Ok(GroupInputs {
            params: ChannelSummary::of_group(net.group(group))?,
            grads: ChannelSummary::of_group(&grads[group.slots()])?,
            knowledge,
        })
    }
}

/// Channel offset of a parameter slot inside its group's `(u, v)` vectors.
fn channel_offset(slot: usize) -> usize {
    match slot {
        crate::model::CONV3_W | crate::model::CONV3_B => DEEP_CHANNELS,
        _ => 0,
    }
}

/// `u[c] * (-grad[c, ..]) + v[c] * (theta_ref[c, ..] - theta[c, ..])` per leading-axis channel.
pub fn channel_correction(u: &[f64], v: &[f64], theta: &Tensor, theta_ref: &Tensor, grad: &Tensor) -> Result<Tensor> {
    if theta.shape() != theta_ref.shape() || theta.shape() != grad.shape() || u.len() != theta.leading() || v.len() != u.len() {
        return Err(Error::Tensor(TensorError::Dimension {
            op: "gen_correction",
            detail: format!(
                "theta {:?}, reference {:?}, grad {:?}, {} channel factors",
                theta.shape(),
                theta_ref.shape(),
                grad.shape(),
                u.len()
            ),
        }));
    }
    let row = theta.row_len();
    let data = (0..theta.len())
        .map(|k| {
            let c = k / row;
            u[c] * -grad.data()[k] + v[c] * (theta_ref.data()[k] - theta.data()[k])
        })
        .collect();
    Ok(Tensor::new(theta.shape().to_vec(), data)?)
}

/// Corrections for every slot of `group` given its channel factors.
pub fn group_correction(
    group: LayerGroup,
    u: &[f64],
    v: &[f64],
    theta: &[Tensor],
    theta_ref: &[Tensor],
    grads: &[Tensor],
) -> Result<Vec<Tensor>> {
    group
        .slots()
        .map(|s| {
            let n = theta[s].leading();
            let off = channel_offset(s);
            if off + n > u.len() {
                return Err(Error::contract("channel factors shorter than the group"));
            }
            channel_correction(&u[off..off + n], &v[off..off + n], &theta[s], &theta_ref[s], &grads[s])
        })
        .collect()
}

/// Correction of one group produced by the current generators.
pub fn gen_correction(
    gen: &GeneratorSet,
    group: LayerGroup,
    inputs: &GroupInputs,
    theta: &[Tensor],
    theta_ref: &[Tensor],
    grads: &[Tensor],
) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let gv = gen.register(&mut tape, false)?;
    let (u, v) = gen.record_uv(&mut tape, &gv, group, inputs)?;
    group_correction(group, tape.value(u).data(), tape.value(v).data(), theta, theta_ref, grads)
}

/// Applies `velocity <- mu * velocity + (grad + weight_decay * theta)` and
/// `theta <- theta - eta * velocity + alpha_l * correction` to every slot.
/// A missing correction counts as zero.
#[allow(clippy::too_many_arguments)]
pub fn stratified_update(
    net: &mut SegNet,
    grads: &[Tensor],
    corrections: &[Option<Tensor>],
    eta: f64,
    alphas: [f64; 3],
    velocity: &mut Velocity,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != PARAM_COUNT || corrections.len() != PARAM_COUNT {
        return Err(Error::contract("update needs one gradient and correction slot per parameter"));
    }
    velocity.conform(net);
    for slot in 0..PARAM_COUNT {
        let alpha = alphas[LayerGroup::of_slot(slot).index()];
        let theta = &net.params()[slot];
        if grads[slot].shape() != theta.shape() {
            return Err(Error::contract(format!("gradient shape {:?} for slot {slot}", grads[slot].shape())));
        }
        let vel = velocity.advance(slot, &grads[slot], theta, momentum, weight_decay).clone();
        let theta = &mut net.params_mut()[slot];
        for (k, t) in theta.data_mut().iter_mut().enumerate() {
            *t -= eta * vel.data()[k];
        }
        if let Some(delta) = &corrections[slot] {
            if delta.shape() != theta.shape() {
                return Err(Error::contract(format!("correction shape {:?} for slot {slot}", delta.shape())));
            }
            for (t, d) in theta.data_mut().iter_mut().zip(delta.data()) {
                *t += alpha * d;
            }
        }
    }
    Ok(())
}

/// Task cross-entropy plus `lambda` times memory cross-entropy, as separate parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub task: Option<Var>,
    pub memory: Option<Var>,
}

pub fn lsr_loss_parts(
    tape: &mut Tape,
    vars: &NetVars,
    task: &[&TerrainSample],
    memory: &[&TerrainSample],
    lambda: f64,
) -> Result<LossParts> {
    let t = batch_ce(tape, vars, task)?;
    let m = batch_ce(tape, vars, memory)?;
    let total = match (t, m) {
        (Some(t), Some(m)) => {
            let weighted = tape.scale(m, lambda)?;
            tape.add(t, weighted)?
        }
        (Some(t), None) => t,
        (None, Some(m)) => tape.scale(m, lambda)?,
        (None, None) => return Err(Error::Tensor(TensorError::DegenerateBatch)),
    };
    Ok(LossParts { total, task: t, memory: m })
}

/// `CE(task) + lambda * CE(memory)`; a batch without labelled pixels contributes zero.
pub fn lsr_loss(tape: &mut Tape, vars: &NetVars, task: &[&TerrainSample], memory: &[&TerrainSample], lambda: f64) -> Result<Var> {
    Ok(lsr_loss_parts(tape, vars, task, memory, lambda)?.total)
}

/// State the corrected update depends on, fixed while the generators move.
#[derive(Debug, Clone, Copy)]
pub struct UpdateContext<'a> {
    pub net: &'a SegNet,
    pub grads: &'a [Tensor],
    pub theta_ref: &'a SegNet,
    pub velocity: &'a Velocity,
    pub knowledge: &'a PreservedKnowledge,
    pub eta: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alphas: [f64; 3],
}

struct Unrolled {
    uv: [(Var, Var); 3],
    memory_loss: Option<Var>,
}

/// Records the corrected update as a function of the generator variables,
/// then the memory loss at the updated parameters.
fn record_unrolled(tape: &mut Tape, gen: &GeneratorSet, gv: &GenVars, ctx: &UpdateContext, memory: &[&TerrainSample]) -> Result<Unrolled> {
    let mut uv = Vec::with_capacity(3);
    for group in LayerGroup::ALL {
        let inputs = GroupInputs::new(group, ctx.net, ctx.grads, ctx.knowledge)?;
        uv.push(gen.record_uv(tape, gv, group, &inputs)?);
    }
    let uv: [(Var, Var); 3] = uv.try_into().expect("three groups");

    let mut velocity = ctx.velocity.clone();
    velocity.conform(ctx.net);
    let mut updated = Vec::with_capacity(PARAM_COUNT);
    for slot in 0..PARAM_COUNT {
        let group = LayerGroup::of_slot(slot);
        let theta = &ctx.net.params()[slot];
        let vel = velocity.advance(slot, &ctx.grads[slot], theta, ctx.momentum, ctx.weight_decay);
        let stepped: Vec<f64> = theta.data().iter().zip(vel.data()).map(|(t, v)| t - ctx.eta * v).collect();
        let base = tape.constant(Tensor::new(theta.shape().to_vec(), stepped)?)?;
        let alpha = ctx.alphas[group.index()];
        if alpha == 0.0 {
            updated.push(base);
            continue;
        }
        let n = theta.leading();
        let off = channel_offset(slot);
        let (u, v) = uv[group.index()];
        let u = tape.slice(u, off, n)?;
        let v = tape.slice(v, off, n)?;
        let neg_grad: Vec<f64> = ctx.grads[slot].data().iter().map(|g| -g).collect();
        let dir = tape.constant(Tensor::new(theta.shape().to_vec(), neg_grad)?)?;
        let drift: Vec<f64> = ctx.theta_ref.params()[slot].data().iter().zip(theta.data()).map(|(r, t)| r - t).collect();
        let anchor = tape.constant(Tensor::new(theta.shape().to_vec(), drift)?)?;
        let a = tape.channel_scale(dir, u)?;
        let b = tape.channel_scale(anchor, v)?;
        let delta = tape.add(a, b)?;
        let scaled = tape.scale(delta, alpha)?;
        updated.push(tape.add(base, scaled)?);
    }
    let vars: NetVars = updated.try_into().expect("slot count");
    let memory_loss = batch_ce(tape, &vars, memory)?;
    Ok(Unrolled { uv, memory_loss })
}

/// Outcome of one generator step: the corrections the pre-step generators
/// produced and the unrolled memory loss they achieved.
#[derive(Debug, Clone)]
pub struct GeneratorStep {
    pub corrections: Vec<Option<Tensor>>,
    pub memory_loss: Option<f64>,
}

/// Memory loss after one corrected update, as a function of the generators.
pub fn unrolled_memory_loss(gen: &GeneratorSet, ctx: &UpdateContext, memory: &[&TerrainSample]) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let gv = gen.register(&mut tape, false)?;
    let un = record_unrolled(&mut tape, gen, &gv, ctx, memory)?;
    Ok(un.memory_loss.map(|l| tape.value(l).item()))
}

/// Differentiates the unrolled memory loss with respect to the generator
/// parameters only and takes one SGD step of size `eta_gen`. Without
/// labelled memory pixels the generators are left untouched.
pub fn generator_step(gen: &mut GeneratorSet, ctx: &UpdateContext, memory: &[&TerrainSample], eta_gen: f64) -> Result<GeneratorStep> {
    let mut tape = Tape::new();
    let gv = gen.register(&mut tape, true)?;
    let un = record_unrolled(&mut tape, gen, &gv, ctx, memory)?;
    let mut corrections = Vec::with_capacity(PARAM_COUNT);
    for group in LayerGroup::ALL {
        let (u, v) = un.uv[group.index()];
        let c = group_correction(group, tape.value(u).data(), tape.value(v).data(), ctx.net.params(), ctx.theta_ref.params(), ctx.grads)?;
        corrections.extend(c.into_iter().map(Some));
    }
    let Some(loss) = un.memory_loss else {
        return Ok(GeneratorStep { corrections, memory_loss: None });
    };
    let value = tape.value(loss).item();
    let vars: Vec<Var> = gen.vars(&gv).collect();
    let grads = tape.backward(loss)?;
    let norm = grad_norm(vars.iter().copied(), &grads);
    let lr = if norm > GEN_GRAD_CLIP { eta_gen * GEN_GRAD_CLIP / norm } else { eta_gen };
    sgd_step(gen.tensors_mut(), vars, &grads, lr);
    Ok(GeneratorStep { corrections, memory_loss: Some(value) })
}

/// Gradient of the unrolled memory loss for every generator tensor.
pub fn generator_gradients(gen: &GeneratorSet, ctx: &UpdateContext, memory: &[&TerrainSample]) -> Result<Option<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let gv = gen.register(&mut tape, true)?;
    let un = record_unrolled(&mut tape, gen, &gv, ctx, memory)?;
    let Some(loss) = un.memory_loss else { return Ok(None) };
    let vars: Vec<Var> = gen.vars(&gv).collect();
    let grads = tape.backward(loss)?;
    Ok(Some(vars.iter().zip(gen.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t)).collect()))
}

/// Local optimization settings for one client round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub lr_gen: f64,
    /// Group strengths; `None` disables corrections.
    pub alphas: Option<[f64; 3]>,
    /// Whether memory batches join the loss.
    pub rehearse: bool,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub net: SegNet,
    /// Mean combined loss over every batch.
    pub mean_loss: f64,
    /// Mean task cross-entropy per epoch.
    pub epoch_task_loss: Vec<f64>,
}

/// Runs the per-batch loop on one client: combined loss, generator step,
/// corrected update. Generators and momentum stay with the caller.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    global: &SegNet,
    shard: &[TerrainSample],
    buffer: &MemoryBuffer,
    gen: &mut GeneratorSet,
    velocity: &mut Velocity,
    theta_ref: &SegNet,
    hyper: &LocalHyper,
    rng: &mut impl Rng,
) -> Result<LocalOutcome> {
    let mut net = global.clone();
    velocity.conform(&net);
    let memory: Vec<&TerrainSample> = if hyper.rehearse { buffer.samples().collect() } else { Vec::new() };
    let correcting = hyper.alphas.is_some() && !memory.is_empty();
    let knowledge = if correcting { PreservedKnowledge::collect(buffer, global)? } else { PreservedKnowledge::empty() };
    let alphas = hyper.alphas.filter(|_| correcting).unwrap_or([0.0; 3]);

    let mut total_loss = 0.0;
    let mut batches = 0usize;
    let mut epoch_task_loss = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        let mut task_sum = 0.0;
        let mut task_batches = 0usize;
        for idx in shuffled_batches(shard.len(), hyper.batch, rng) {
            let task: Vec<&TerrainSample> = idx.iter().map(|&i| &shard[i]).collect();
            let mem: Vec<&TerrainSample> = if memory.is_empty() {
                Vec::new()
            } else {
                let take = hyper.batch.min(memory.len());
                rand::seq::index::sample(rng, memory.len(), take).into_iter().map(|i| memory[i]).collect()
            };
            let mut tape = Tape::new();
            let vars = net.register(&mut tape, |_| true)?;
            let parts = match lsr_loss_parts(&mut tape, &vars, &task, &mem, hyper.lambda) {
                Ok(p) => p,
                Err(Error::Tensor(TensorError::DegenerateBatch)) => continue,
                Err(e) => return Err(e),
            };
            total_loss += tape.value(parts.total).item();
            batches += 1;
            if let Some(t) = parts.task {
                task_sum += tape.value(t).item();
                task_batches += 1;
            }
            let g = tape.backward(parts.total)?;
            let grads: Vec<Tensor> = (0..PARAM_COUNT).map(|s| g.get_or_zeros(vars[s], &net.params()[s])).collect();

            let corrections = if correcting {
                let ctx = UpdateContext {
                    net: &net,
                    grads: &grads,
                    theta_ref,
                    velocity,
                    knowledge: &knowledge,
                    eta: hyper.lr,
                    momentum: hyper.momentum,
                    weight_decay: hyper.weight_decay,
                    alphas,
                };
                generator_step(gen, &ctx, &mem, hyper.lr_gen)?.corrections
            } else {
                vec![None; PARAM_COUNT]
            };
            stratified_update(&mut net, &grads, &corrections, hyper.lr, alphas, velocity, hyper.momentum, hyper.weight_decay)?;
        }
        epoch_task_loss.push(if task_batches == 0 { 0.0 } else { task_sum / task_batches as f64 });
    }
    Ok(LocalOutcome { net, mean_loss: if batches == 0 { 0.0 } else { total_loss / batches as f64 }, epoch_task_loss })
}
