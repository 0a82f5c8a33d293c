//! Rapid knowledge recovery: an attention-fused recovery function that
//! proposes a head correction, meta-trained on simulated degradation.

use fcl_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::MemoryBuffer;
use crate::error::{Error, Result};
use crate::lsr::PreservedKnowledge;
use crate::model::{ChannelSummary, SegNet, FEATURE_DIM};
use crate::nn::{grad_norm, sgd_step, Activation, Mlp, MlpVars};
use crate::train::{evaluate_head, head_batch_ce, FeatureSet, Head};

/// Shared latent width of the four encoders.
pub const LATENT: usize = 32;
/// Correction row length: one weight per feature channel plus a bias.
pub const ROW: usize = FEATURE_DIM + 1;
const SOURCES: usize = 4;

/// Encoders for head statistics, prototypes, memory and geometry, a
/// query for attention over them, and a per-class row decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryFn {
    pub summary_rows: Mlp,
    pub summary_out: Mlp,
    pub proto_rows: Mlp,
    pub proto_out: Mlp,
    pub memory: Mlp,
    pub geometry: Mlp,
    pub query: Tensor,
    pub decoder: Mlp,
}

/// Tape handles for a [`RecoveryFn`].
#[derive(Debug, Clone)]
pub struct RecoveryVars {
    mlps: Vec<MlpVars>,
    query: Var,
}

impl RecoveryVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.mlps.iter().flat_map(MlpVars::vars).collect();
        v.push(self.query);
        v
    }
}

/// Inputs the recovery function conditions on.
#[derive(Debug, Clone, Copy)]
pub struct RecoveryInputs<'a> {
    pub head_summary: &'a ChannelSummary,
    pub knowledge: &'a PreservedKnowledge,
}

/// A proposed head correction.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadDelta {
    pub weight: Tensor,
    pub bias: Tensor,
    pub attention: [f64; SOURCES],
}

impl HeadDelta {
    pub fn apply(&self, head: &Head) -> Result<Head> {
        if head.weight.shape() != self.weight.shape() || head.bias.shape() != self.bias.shape() {
            return Err(Error::contract("head correction shape differs from the head"));
        }
        let add = |a: &Tensor, b: &Tensor| {
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::new(a.shape().to_vec(), data)
        };
        Ok(Head { weight: add(&head.weight, &self.weight)?, bias: add(&head.bias, &self.bias)? })
    }
}

struct Recorded {
    weight: Var,
    bias: Var,
    attention: Var,
}

impl RecoveryFn {
    pub fn new(rng: &mut impl Rng) -> Self {
        let query_bound = (1.0 / LATENT as f64).sqrt();
        let query = Tensor::vector((0..LATENT).map(|_| rng.random_range(-query_bound..=query_bound)).collect());
        RecoveryFn {
            summary_rows: Mlp::new(&[2, LATENT], Activation::Relu, 1.0, rng),
            summary_out: Mlp::new(&[LATENT, LATENT], Activation::Tanh, 1.0, rng),
            proto_rows: Mlp::new(&[FEATURE_DIM, LATENT], Activation::Relu, 1.0, rng),
            proto_out: Mlp::new(&[LATENT, LATENT], Activation::Tanh, 1.0, rng),
            memory: Mlp::new(&[FEATURE_DIM, LATENT], Activation::Tanh, 1.0, rng),
            geometry: Mlp::new(&[3, LATENT], Activation::Tanh, 1.0, rng),
            query,
            decoder: Mlp::new(&[LATENT + FEATURE_DIM, 64, ROW], Activation::Identity, 0.1, rng),
        }
    }

    fn mlps(&self) -> [&Mlp; 7] {
        [&self.summary_rows, &self.summary_out, &self.proto_rows, &self.proto_out, &self.memory, &self.geometry, &self.decoder]
    }

    /// All parameters in a fixed order, the query last.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t: Vec<&Tensor> = self.mlps().into_iter().flat_map(Mlp::tensors).collect();
        t.push(&self.query);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let RecoveryFn { summary_rows, summary_out, proto_rows, proto_out, memory, geometry, query, decoder } = self;
        let mut t: Vec<&mut Tensor> =
            [summary_rows, summary_out, proto_rows, proto_out, memory, geometry, decoder].into_iter().flat_map(Mlp::tensors_mut).collect();
        t.push(query);
        t
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Makes every proposed correction zero.
    pub fn nullify(&mut self) {
        self.decoder.zero_output_layer();
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Result<RecoveryVars> {
        let mlps = self.mlps().into_iter().map(|m| m.register(tape, trainable)).collect::<Result<Vec<_>>>()?;
        let query = tape.leaf(self.query.clone(), trainable)?;
        Ok(RecoveryVars { mlps, query })
    }

    fn pooled_rows(&self, tape: &mut Tape, rows: &Mlp, rv: &MlpVars, inputs: &[Vec<f64>]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for x in inputs {
            let c = tape.constant(Tensor::vector(x.clone()))?;
            let e = rows.record(tape, rv, c)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, e)?,
                None => e,
            });
        }
        let sum = acc.ok_or_else(|| Error::contract("pooling over zero rows"))?;
        Ok(tape.scale(sum, 1.0 / inputs.len() as f64)?)
    }

    fn record(&self, tape: &mut Tape, rv: &RecoveryVars, inputs: &RecoveryInputs) -> Result<Recorded> {
        let summary = inputs.head_summary;
        let pk = inputs.knowledge;
        let classes = summary.channels();
        if pk.prototypes.is_empty() {
            return Err(Error::contract("recovery needs at least one prototype"));
        }
        if pk.memory_feature.len() != FEATURE_DIM || pk.prototypes.values().any(|p| p.len() != FEATURE_DIM) {
            return Err(Error::Tensor(fcl_tensor::TensorError::Dimension {
                op: "encode_and_fuse",
                detail: format!("memory and prototypes must have width {FEATURE_DIM}"),
            }));
        }
        if let Some((&c, _)) = pk.prototypes.iter().find(|(&c, _)| c as usize >= classes) {
            return Err(Error::Tensor(fcl_tensor::TensorError::Dimension {
                op: "encode_and_fuse",
                detail: format!("prototype for class {c} but the head has {classes} rows"),
            }));
        }
        let m = &rv.mlps;
        let stat_rows: Vec<Vec<f64>> = (0..classes).map(|c| vec![summary.per_channel_mean[c], summary.per_channel_var[c]]).collect();
        let s = self.pooled_rows(tape, &self.summary_rows, &m[0], &stat_rows)?;
        let e_s = self.summary_out.record(tape, &m[1], s)?;
        let proto_rows: Vec<Vec<f64>> = pk.prototypes.values().cloned().collect();
        let p = self.pooled_rows(tape, &self.proto_rows, &m[2], &proto_rows)?;
        let e_p = self.proto_out.record(tape, &m[3], p)?;
        let h = tape.constant(Tensor::vector(pk.memory_feature.clone()))?;
        let e_m = self.memory.record(tape, &m[4], h)?;
        let a = tape.constant(Tensor::vector(pk.geometry.to_vec()))?;
        let e_g = self.geometry.record(tape, &m[5], a)?;

        let encodings = [e_s, e_p, e_m, e_g];
        let mut scores = Vec::with_capacity(SOURCES);
        for &e in &encodings {
            let prod = tape.mul(rv.query, e)?;
            scores.push(tape.sum(prod)?);
        }
        let scores = tape.concat(&scores)?;
        let attention = tape.softmax(scores)?;
        let fused = tape.weighted_sum(&encodings, attention)?;

        let mut weights = Vec::with_capacity(classes);
        let mut biases = Vec::with_capacity(classes);
        for c in 0..classes {
            match pk.prototypes.get(&(c as u8)) {
                Some(proto) => {
                    let pc = tape.constant(Tensor::vector(proto.clone()))?;
                    let x = tape.concat(&[fused, pc])?;
                    let row = self.decoder.record(tape, &m[6], x)?;
                    weights.push(tape.slice(row, 0, FEATURE_DIM)?);
                    biases.push(tape.slice(row, FEATURE_DIM, 1)?);
                }
                None => {
                    weights.push(tape.constant(Tensor::zeros(&[FEATURE_DIM]))?);
                    biases.push(tape.constant(Tensor::zeros(&[1]))?);
                }
            }
        }
        let flat = tape.concat(&weights)?;
        Ok(Recorded { weight: tape.reshape(flat, &[classes, FEATURE_DIM])?, bias: tape.concat(&biases)?, attention })
    }
}

/// Proposes a head correction. Rows of classes without a prototype stay zero.
pub fn encode_and_fuse(psi: &RecoveryFn, inputs: &RecoveryInputs) -> Result<HeadDelta> {
    let mut tape = Tape::new();
    let rv = psi.register(&mut tape, false)?;
    let rec = psi.record(&mut tape, &rv, inputs)?;
    let attention: [f64; SOURCES] = tape.value(rec.attention).data().try_into().expect("four sources");
    Ok(HeadDelta { weight: tape.value(rec.weight).clone(), bias: tape.value(rec.bias).clone(), attention })
}

/// A simulated degradation of the task-0 head.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub y_minus: Vec<u8>,
    pub y_plus: Vec<u8>,
    pub degraded: Head,
}

/// Settings for one simulated degradation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeHyper {
    pub split_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

/// Size of the retained class subset.
pub fn retained_count(classes: usize, split_fraction: f64) -> usize {
    ((split_fraction * classes as f64).round() as usize).clamp(1, classes - 1)
}

/// Splits `classes` at random and trains a copy of `head` only on the retained
/// part, with the remaining classes' pixels ignored.
pub fn make_episode(head: &Head, data: &FeatureSet, classes: &[u8], hyper: &EpisodeHyper, rng: &mut impl Rng) -> Result<Episode> {
    if classes.len() < 2 {
        return Err(Error::Config(format!("episodes need at least two base classes, got {}", classes.len())));
    }
    let mut order = classes.to_vec();
    order.shuffle(rng);
    let keep = retained_count(classes.len(), hyper.split_fraction);
    let mut y_minus = order[..keep].to_vec();
    let mut y_plus = order[keep..].to_vec();
    y_minus.sort_unstable();
    y_plus.sort_unstable();

    let mut degraded = head.clone();
    if hyper.steps > 0 && !data.is_empty() {
        let masked = data.masked(&y_minus);
        let take = hyper.batch.clamp(1, masked.len());
        for _ in 0..hyper.steps {
            let idx = rand::seq::index::sample(rng, masked.len(), take);
            let batch: Vec<(&Tensor, &[u8])> = idx.into_iter().map(|i| (&masked.items[i].0, masked.items[i].1.as_slice())).collect();
            degraded.sgd_step(&batch, hyper.lr)?;
        }
    }
    Ok(Episode { y_minus, y_plus, degraded })
}

/// Meta-training settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaHyper {
    pub episodes: usize,
    pub episode: EpisodeHyper,
    pub outer_lr: f64,
    /// Samples per outer-loss evaluation.
    pub outer_batch: usize,
}

fn outer_loss(
    psi: &RecoveryFn,
    tape: &mut Tape,
    rv: &RecoveryVars,
    degraded: &Head,
    knowledge: &PreservedKnowledge,
    batch: &[(&Tensor, &[u8])],
) -> Result<Option<Var>> {
    let summary = ChannelSummary::of_layers(&[(&degraded.weight, &degraded.bias)])?;
    let inputs = RecoveryInputs { head_summary: &summary, knowledge };
    let rec = psi.record(tape, rv, &inputs)?;
    let w0 = tape.constant(degraded.weight.clone())?;
    let b0 = tape.constant(degraded.bias.clone())?;
    let w = tape.add(w0, rec.weight)?;
    let b = tape.add(b0, rec.bias)?;
    head_batch_ce(tape, w, b, batch)
}

/// Outer loss of one episode with the degraded head held constant.
pub fn episode_loss(
    psi: &RecoveryFn,
    episode: &Episode,
    knowledge: &PreservedKnowledge,
    batch: &[(&Tensor, &[u8])],
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let rv = psi.register(&mut tape, false)?;
    Ok(outer_loss(psi, &mut tape, &rv, &episode.degraded, knowledge, batch)?.map(|l| tape.value(l).item()))
}

/// Gradient of [`episode_loss`] for every parameter of `psi`, in [`RecoveryFn::tensors`] order.
pub fn episode_gradients(
    psi: &RecoveryFn,
    episode: &Episode,
    knowledge: &PreservedKnowledge,
    batch: &[(&Tensor, &[u8])],
) -> Result<Option<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let rv = psi.register(&mut tape, true)?;
    let Some(loss) = outer_loss(psi, &mut tape, &rv, &episode.degraded, knowledge, batch)? else {
        return Ok(None);
    };
    let vars = rv.vars();
    let grads = tape.backward(loss)?;
    Ok(Some(vars.iter().zip(psi.tensors()).map(|(&v, t)| grads.get_or_zeros(v, t)).collect()))
}

/// Outer gradients are rescaled to at most this global norm before a step.
pub const OUTER_GRAD_CLIP: f64 = 1.0;

/// Outer losses observed during meta-training, one per episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetaTrace {
    pub losses: Vec<f64>,
}

/// Episodic first-order meta-training on the task-0 head and memory
/// features. The outer loss scores the corrected head on the withheld classes only.
pub fn meta_train(
    psi: &mut RecoveryFn,
    head: &Head,
    data: &FeatureSet,
    classes: &[u8],
    knowledge: &PreservedKnowledge,
    hyper: &MetaHyper,
    rng: &mut impl Rng,
) -> Result<MetaTrace> {
    let mut trace = MetaTrace::default();
    if hyper.episodes == 0 {
        return Ok(trace);
    }
    if data.is_empty() {
        return Err(Error::MemoryEmpty);
    }
    for _ in 0..hyper.episodes {
        let episode = make_episode(head, data, classes, &hyper.episode, rng)?;
        let target = data.masked(&episode.y_plus);
        let take = hyper.outer_batch.clamp(1, target.len());
        let idx = rand::seq::index::sample(rng, target.len(), take);
        let batch: Vec<(&Tensor, &[u8])> = idx.into_iter().map(|i| (&target.items[i].0, target.items[i].1.as_slice())).collect();
        let mut tape = Tape::new();
        let rv = psi.register(&mut tape, true)?;
        let Some(loss) = outer_loss(psi, &mut tape, &rv, &episode.degraded, knowledge, &batch)? else {
            continue;
        };
        trace.losses.push(tape.value(loss).item());
        let vars = rv.vars();
        let grads = tape.backward(loss)?;
        let norm = grad_norm(vars.iter().copied(), &grads);
        let lr = if norm > OUTER_GRAD_CLIP { hyper.outer_lr * OUTER_GRAD_CLIP / norm } else { hyper.outer_lr };
        sgd_step(psi.tensors_mut(), vars, &grads, lr);
    }
    Ok(trace)
}

/// Recovery fires strictly below the threshold.
pub fn check_trigger(cumulative_miou: f64, tau: f64) -> bool {
    cumulative_miou < tau
}

/// Threshold as a fraction of the task-0 cumulative mIoU.
pub fn threshold(task0_miou: f64, fraction: f64) -> f64 {
    task0_miou * fraction
}

/// Head fine-tuning settings for recovery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoverHyper {
    pub max_epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub net: SegNet,
    /// Fine-tuning epochs consumed.
    pub epochs: usize,
    pub reached: bool,
    pub miou_before: f64,
    pub miou_after_correction: f64,
    pub miou_after: f64,
}

/// Applies the proposed head correction (when `psi` is given) and fine-tunes
/// the head on the memory until the cumulative mIoU on `eval` reaches the
/// threshold. The backbone is left untouched.
#[allow(clippy::too_many_arguments)]
pub fn recover(
    net: &SegNet,
    psi: Option<&RecoveryFn>,
    buffer: &MemoryBuffer,
    knowledge: &PreservedKnowledge,
    eval: &FeatureSet,
    include: &[u8],
    hyper: &RecoverHyper,
    rng: &mut impl Rng,
) -> Result<RecoveryOutcome> {
    if buffer.is_empty() {
        return Err(Error::RecoveryImpossible);
    }
    let train = FeatureSet::extract_refs(net, buffer.samples())?;
    let head = Head::of(net);
    let score = |h: &Head| -> Result<f64> { Ok(evaluate_head(&h.weight, &h.bias, eval, Some(include))?.iou.miou) };
    let miou_before = score(&head)?;
    let mut head = match psi {
        Some(psi) => {
            let summary = ChannelSummary::of_layers(&[(&head.weight, &head.bias)])?;
            let delta = encode_and_fuse(psi, &RecoveryInputs { head_summary: &summary, knowledge })?;
            delta.apply(&head)?
        }
        None => head,
    };
    let miou_after_correction = score(&head)?;
    let mut miou = miou_after_correction;
    let mut epochs = 0;
    while miou < hyper.tau && epochs < hyper.max_epochs {
        head.epoch(&train, hyper.batch, hyper.lr, rng)?;
        epochs += 1;
        miou = score(&head)?;
    }
    Ok(RecoveryOutcome {
        net: head.install(net)?,
        epochs,
        reached: miou >= hyper.tau,
        miou_before,
        miou_after_correction,
        miou_after: miou,
    })
}

/// Knowledge for recovery; prototypes restricted to classes the head has rows for.
pub fn recovery_knowledge(buffer: &MemoryBuffer, net: &SegNet) -> Result<PreservedKnowledge> {
    let mut pk = PreservedKnowledge::collect(buffer, net)?;
    let classes = net.class_count();
    pk.prototypes.retain(|&c, _| (c as usize) < classes);
    Ok(pk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_terrain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn knowledge(classes: &[u8], rng: &mut impl Rng) -> PreservedKnowledge {
        PreservedKnowledge {
            memory_feature: (0..FEATURE_DIM).map(|_| rng.random_range(0.0..1.0)).collect(),
            prototypes: classes.iter().map(|&c| (c, (0..FEATURE_DIM).map(|_| rng.random_range(0.0..1.0)).collect())).collect(),
            geometry: [0.1, 0.4, 0.9],
        }
    }

    #[test]
    fn attention_is_a_distribution() {
        let mut r = rng(1);
        let psi = RecoveryFn::new(&mut r);
        let net = SegNet::new(4, &mut r).unwrap();
        let head = Head::of(&net);
        let summary = ChannelSummary::of_layers(&[(&head.weight, &head.bias)]).unwrap();
        let pk = knowledge(&[0, 2], &mut r);
        let d = encode_and_fuse(&psi, &RecoveryInputs { head_summary: &summary, knowledge: &pk }).unwrap();
        assert!((d.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(d.attention.iter().all(|&w| w >= 0.0));
        assert_eq!(d.weight.shape(), &[4, FEATURE_DIM]);
        assert!(d.weight.row(1).iter().all(|&v| v == 0.0));
        assert_eq!(d.bias.data()[3], 0.0);
    }

    #[test]
    fn zero_query_gives_equal_attention() {
        let mut r = rng(2);
        let mut psi = RecoveryFn::new(&mut r);
        psi.query.data_mut().fill(0.0);
        let summary = ChannelSummary { per_channel_mean: vec![0.1, 0.2], per_channel_var: vec![0.3, 0.4] };
        let pk = knowledge(&[0, 1], &mut r);
        let d = encode_and_fuse(&psi, &RecoveryInputs { head_summary: &summary, knowledge: &pk }).unwrap();
        assert_eq!(d.attention, [0.25; 4]);
    }

    #[test]
    fn nullified_decoder_is_identity_recovery() {
        let mut r = rng(3);
        let mut psi = RecoveryFn::new(&mut r);
        psi.nullify();
        let head = Head::of(&SegNet::new(3, &mut r).unwrap());
        let summary = ChannelSummary::of_layers(&[(&head.weight, &head.bias)]).unwrap();
        let pk = knowledge(&[0, 1, 2], &mut r);
        let d = encode_and_fuse(&psi, &RecoveryInputs { head_summary: &summary, knowledge: &pk }).unwrap();
        assert_eq!(d.apply(&head).unwrap(), head);
    }

    #[test]
    fn missing_prototypes_are_rejected() {
        let mut r = rng(4);
        let psi = RecoveryFn::new(&mut r);
        let summary = ChannelSummary { per_channel_mean: vec![0.0], per_channel_var: vec![0.0] };
        let pk = PreservedKnowledge::empty();
        assert!(encode_and_fuse(&psi, &RecoveryInputs { head_summary: &summary, knowledge: &pk }).is_err());
    }

    #[test]
    fn trigger_is_strict() {
        assert!(check_trigger(0.30, 0.32));
        assert!(!check_trigger(0.32, 0.32));
        assert!((threshold(0.45, 0.8) - 0.36).abs() < 1e-15);
    }

    #[test]
    fn split_sizes() {
        assert_eq!(retained_count(5, 0.6), 3);
        assert_eq!(retained_count(2, 0.99), 1);
        assert_eq!(retained_count(2, 0.0), 1);
    }

    fn features(n: usize, classes: &[u8], net: &SegNet) -> FeatureSet {
        let samples: Vec<_> = (0..n).map(|i| gen_terrain(i as u64, classes, 6, 6, 4, 0.08).unwrap()).collect();
        FeatureSet::extract(net, &samples).unwrap()
    }

    #[test]
    fn episode_without_steps_keeps_head() {
        let mut r = rng(5);
        let net = SegNet::new(5, &mut r).unwrap();
        let data = features(4, &[0, 1, 2, 3, 4], &net);
        let hyper = EpisodeHyper { split_fraction: 0.6, steps: 0, lr: 0.5, batch: 2 };
        let ep = make_episode(&Head::of(&net), &data, &[0, 1, 2, 3, 4], &hyper, &mut r).unwrap();
        assert_eq!(ep.y_minus.len(), 3);
        assert_eq!(ep.y_plus.len(), 2);
        assert_eq!(ep.degraded, Head::of(&net));
        assert!(make_episode(&Head::of(&net), &data, &[0], &hyper, &mut r).is_err());
    }

    #[test]
    fn zero_episodes_leave_psi_unchanged() {
        let mut r = rng(6);
        let mut psi = RecoveryFn::new(&mut r);
        let before = psi.clone();
        let net = SegNet::new(3, &mut r).unwrap();
        let hyper = MetaHyper {
            episodes: 0,
            episode: EpisodeHyper { split_fraction: 0.6, steps: 3, lr: 0.5, batch: 2 },
            outer_lr: 0.1,
            outer_batch: 4,
        };
        let pk = knowledge(&[0, 1, 2], &mut r);
        meta_train(&mut psi, &Head::of(&net), &FeatureSet { items: vec![] }, &[0, 1, 2], &pk, &hyper, &mut r).unwrap();
        assert_eq!(psi, before);
    }

    #[test]
    fn recovery_keeps_backbone_and_needs_memory() {
        let mut r = rng(7);
        let net = SegNet::new(3, &mut r).unwrap();
        let psi = RecoveryFn::new(&mut r);
        let eval = features(3, &[0, 1, 2], &net);
        let hyper = RecoverHyper { max_epochs: 2, lr: 0.1, batch: 2, tau: 1.1 };
        let pk = knowledge(&[0, 1], &mut r);
        assert!(matches!(
            recover(&net, Some(&psi), &MemoryBuffer::new(2), &pk, &eval, &[0, 1, 2], &hyper, &mut r),
            Err(Error::RecoveryImpossible)
        ));
    }
}
