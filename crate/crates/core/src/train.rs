//! Loss construction, momentum state and evaluation shared by the training loops.

use fcl_tensor::{kernels, Tape, Tensor, TensorError, Var, IGNORE_LABEL};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::analysis::{Confusion, IouReport};
use crate::data::TerrainSample;
use crate::error::Result;
use crate::model::{head_logits, record_forward, LayerGroup, NetVars, SegNet, FEATURE_DIM, HEAD_B, HEAD_W, PARAM_COUNT};

/// Mean cross-entropy over every labelled pixel of `samples`, each sample
/// run through the network described by `vars`. `None` when no pixel is labelled.
pub fn batch_ce(tape: &mut Tape, vars: &NetVars, samples: &[&TerrainSample]) -> Result<Option<Var>> {
    let total: usize = samples.iter().map(|s| s.labelled_pixels()).sum();
    if total == 0 {
        return Ok(None);
    }
    let scale = 1.0 / total as f64;
    let mut loss: Option<Var> = None;
    for s in samples.iter().filter(|s| s.labelled_pixels() > 0) {
        let (_, logits) = record_forward(tape, vars, &s.image)?;
        let l = tape.pixel_cross_entropy_scaled(logits, &s.labels, IGNORE_LABEL, scale)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(loss)
}

/// Like [`batch_ce`] for a head applied to precomputed feature maps.
pub fn head_batch_ce(tape: &mut Tape, weight: Var, bias: Var, batch: &[(&Tensor, &[u8])]) -> Result<Option<Var>> {
    let total: usize = batch.iter().map(|(_, l)| l.iter().filter(|&&v| v != IGNORE_LABEL).count()).sum();
    if total == 0 {
        return Ok(None);
    }
    let scale = 1.0 / total as f64;
    let mut loss: Option<Var> = None;
    for (features, labels) in batch {
        if labels.iter().all(|&v| v == IGNORE_LABEL) {
            continue;
        }
        let f = tape.constant((*features).clone())?;
        let logits = tape.pointwise_conv(f, weight, bias)?;
        let l = tape.pixel_cross_entropy_scaled(logits, labels, IGNORE_LABEL, scale)?;
        loss = Some(match loss {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    Ok(loss)
}

/// Heavy-ball momentum buffers, one per network parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    buffers: Vec<Tensor>,
}

impl Velocity {
    pub fn zeros_like(net: &SegNet) -> Self {
        Velocity { buffers: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }

    /// Resets any buffer whose shape no longer matches `net`.
    pub fn conform(&mut self, net: &SegNet) {
        for (b, p) in self.buffers.iter_mut().zip(net.params()) {
            if b.shape() != p.shape() {
                *b = Tensor::zeros(p.shape());
            }
        }
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// `v <- mu * v + (grad + weight_decay * theta)` for one slot; returns the new velocity.
    pub fn advance(&mut self, slot: usize, grad: &Tensor, theta: &Tensor, mu: f64, weight_decay: f64) -> &Tensor {
        let v = &mut self.buffers[slot];
        for ((vi, g), t) in v.data_mut().iter_mut().zip(grad.data()).zip(theta.data()) {
            *vi = mu * *vi + (g + weight_decay * t);
        }
        &self.buffers[slot]
    }
}

/// Splits `0..n` into shuffled batches of at most `size`.
pub fn shuffled_batches(n: usize, size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Prediction quality of a network on a labelled set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub iou: IouReport,
    /// Mean pixel cross-entropy over labelled pixels.
    pub loss: f64,
}

fn pixel_loss_sum(logits: &[f64], classes: usize, labels: &[u8]) -> f64 {
    let plane = labels.len();
    let mut total = 0.0;
    let mut col = vec![0.0; classes];
    for (p, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL || l as usize >= classes {
            continue;
        }
        for c in 0..classes {
            col[c] = logits[c * plane + p];
        }
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = col.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - col[l as usize];
    }
    total
}

/// Accumulates confusion and loss for one logit map.
fn accumulate(conf: &mut Confusion, loss: &mut (f64, usize), logits: &Tensor, labels: &[u8]) {
    let classes = logits.leading();
    let preds = kernels::argmax_pixels(logits.data(), classes, labels.len());
    conf.add(&preds, labels);
    loss.0 += pixel_loss_sum(logits.data(), classes, labels);
    loss.1 += labels.iter().filter(|&&l| l != IGNORE_LABEL && (l as usize) < classes).count();
}

fn finish(conf: Confusion, loss: (f64, usize), include: Option<&[u8]>) -> Result<Evaluation> {
    let iou = conf.report(include)?;
    Ok(Evaluation { iou, loss: if loss.1 == 0 { 0.0 } else { loss.0 / loss.1 as f64 } })
}

/// Evaluates `net` on `samples`; the mean covers `include` classes when given.
pub fn evaluate(net: &SegNet, samples: &[TerrainSample], include: Option<&[u8]>) -> Result<Evaluation> {
    let mut conf = Confusion::new(net.class_count());
    let mut loss = (0.0, 0);
    for s in samples {
        let logits = net.forward(&s.image)?;
        accumulate(&mut conf, &mut loss, &logits, &s.labels);
    }
    finish(conf, loss, include)
}

/// Feature maps of a frozen backbone paired with labels.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub items: Vec<(Tensor, Vec<u8>)>,
}

impl FeatureSet {
    pub fn extract(net: &SegNet, samples: &[TerrainSample]) -> Result<Self> {
        let items = samples.iter().map(|s| Ok((net.deep_features(&s.image)?, s.labels.clone()))).collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet { items })
    }

    pub fn extract_refs<'a>(net: &SegNet, samples: impl IntoIterator<Item = &'a TerrainSample>) -> Result<Self> {
        let items = samples.into_iter().map(|s| Ok((net.deep_features(&s.image)?, s.labels.clone()))).collect::<Result<Vec<_>>>()?;
        Ok(FeatureSet { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Copy with labels outside `keep` replaced by the ignore value.
    pub fn masked(&self, keep: &[u8]) -> FeatureSet {
        FeatureSet {
            items: self
                .items
                .iter()
                .map(|(f, l)| {
                    let labels = l.iter().map(|&v| if keep.contains(&v) { v } else { IGNORE_LABEL }).collect();
                    (f.clone(), labels)
                })
                .collect(),
        }
    }
}

/// Evaluates a head on cached features.
pub fn evaluate_head(weight: &Tensor, bias: &Tensor, set: &FeatureSet, include: Option<&[u8]>) -> Result<Evaluation> {
    let mut conf = Confusion::new(bias.len());
    let mut loss = (0.0, 0);
    for (f, labels) in &set.items {
        let logits = head_logits(weight, bias, f)?;
        accumulate(&mut conf, &mut loss, &logits, labels);
    }
    finish(conf, loss, include)
}

/// Head parameters `(weight, bias)` trained on cached features with plain SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn of(net: &SegNet) -> Head {
        Head { weight: net.params()[HEAD_W].clone(), bias: net.params()[HEAD_B].clone() }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn install(&self, net: &SegNet) -> Result<SegNet> {
        let mut params = net.params().to_vec();
        params[HEAD_W] = self.weight.clone();
        params[HEAD_B] = self.bias.clone();
        SegNet::from_params(params)
    }

    /// One SGD step on a batch; returns the batch loss, or `None` if nothing was labelled.
    pub fn sgd_step(&mut self, batch: &[(&Tensor, &[u8])], lr: f64) -> Result<Option<f64>> {
        let mut tape = Tape::new();
        let w = tape.param(self.weight.clone())?;
        let b = tape.param(self.bias.clone())?;
        let Some(loss) = head_batch_ce(&mut tape, w, b, batch)? else {
            return Ok(None);
        };
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        for (p, v) in [(&mut self.weight, w), (&mut self.bias, b)] {
            let g = grads.get(v).ok_or(TensorError::Contract("head received no gradient".into()))?;
            for (a, d) in p.data_mut().iter_mut().zip(g.data()) {
                *a -= lr * d;
            }
        }
        Ok(Some(value))
    }

    /// One pass over `set` in shuffled batches.
    pub fn epoch(&mut self, set: &FeatureSet, batch: usize, lr: f64, rng: &mut impl Rng) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0;
        for idx in shuffled_batches(set.len(), batch, rng) {
            let b: Vec<(&Tensor, &[u8])> = idx.iter().map(|&i| (&set.items[i].0, set.items[i].1.as_slice())).collect();
            if let Some(l) = self.sgd_step(&b, lr)? {
                total += l;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { total / n as f64 })
    }

    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.weight.len(), self.bias.len() * FEATURE_DIM);
        self.bias.len()
    }
}

/// Gradients of the mean batch cross-entropy with respect to every parameter.
pub fn full_gradients(net: &SegNet, samples: &[&TerrainSample]) -> Result<Option<Vec<Tensor>>> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, |_| true)?;
    let Some(loss) = batch_ce(&mut tape, &vars, samples)? else {
        return Ok(None);
    };
    let grads = tape.backward(loss)?;
    Ok(Some((0..PARAM_COUNT).map(|s| grads.get_or_zeros(vars[s], &net.params()[s])).collect()))
}

/// Squared Euclidean norm of the difference of two gradient sets over one group.
pub fn group_sq_distance(a: &[Tensor], b: &[Tensor], group: LayerGroup) -> f64 {
    group.slots().map(|s| a[s].data().iter().zip(b[s].data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_terrain;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_loss_is_pixel_mean_over_batch() {
        let net = SegNet::new(3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let a = gen_terrain(1, &[0, 1], 4, 4, 3, 0.08).unwrap();
        let mut b = gen_terrain(2, &[1, 2], 4, 4, 3, 0.08).unwrap();
        b.labels[..10].fill(IGNORE_LABEL);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, |_| false).unwrap();
        let joint = batch_ce(&mut tape, &vars, &[&a, &b]).unwrap().unwrap();
        let ea = evaluate(&net, std::slice::from_ref(&a), None).unwrap().loss;
        let eb = evaluate(&net, std::slice::from_ref(&b), None).unwrap().loss;
        let expect = (ea * 16.0 + eb * 6.0) / 22.0;
        assert!((tape.value(joint).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn unlabeled_batch_has_no_loss() {
        let net = SegNet::new(2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut a = gen_terrain(1, &[0, 1], 4, 4, 3, 0.08).unwrap();
        a.labels.fill(IGNORE_LABEL);
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, |_| true).unwrap();
        assert!(batch_ce(&mut tape, &vars, &[&a]).unwrap().is_none());
    }

    #[test]
    fn head_evaluation_matches_full_evaluation() {
        let net = SegNet::new(3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let samples: Vec<_> = (0..4).map(|i| gen_terrain(i, &[0, 1, 2], 6, 6, 4, 0.08).unwrap()).collect();
        let full = evaluate(&net, &samples, None).unwrap();
        let feats = FeatureSet::extract(&net, &samples).unwrap();
        let head = Head::of(&net);
        let cached = evaluate_head(&head.weight, &head.bias, &feats, None).unwrap();
        assert_eq!(full, cached);
    }
}
