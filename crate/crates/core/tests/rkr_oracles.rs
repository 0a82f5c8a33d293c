//! Recovery function, episodes and meta-training against direct oracles
//! on synthetic, linearly separable feature maps.

use fcl_core::lsr::PreservedKnowledge;
use fcl_core::model::{ChannelSummary, FEATURE_DIM};
use fcl_core::rkr::{
    encode_and_fuse, episode_gradients, episode_loss, make_episode, meta_train, Episode, EpisodeHyper, MetaHyper, RecoveryFn,
    RecoveryInputs,
};
use fcl_core::train::{evaluate_head, FeatureSet, Head};
use fcl_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const CLASSES: u8 = 5;
const SIDE: usize = 4;

/// Feature maps where a pixel of class `c` lights channel `c` on top of noise.
fn separable_set(n: usize, noise: f64, rng: &mut ChaCha8Rng) -> FeatureSet {
    let normal = Normal::new(0.0, noise).unwrap();
    let pixels = SIDE * SIDE;
    let items = (0..n)
        .map(|_| {
            let labels: Vec<u8> = (0..pixels).map(|_| rng.random_range(0..CLASSES)).collect();
            let mut data = vec![0.0; FEATURE_DIM * pixels];
            for (ch, plane) in data.chunks_mut(pixels).enumerate() {
                for (p, v) in plane.iter_mut().enumerate() {
                    *v = normal.sample(rng) + if labels[p] as usize == ch { 1.0 } else { 0.0 };
                }
            }
            (Tensor::new(vec![FEATURE_DIM, SIDE, SIDE], data).unwrap(), labels)
        })
        .collect();
    FeatureSet { items }
}

fn trained_head(set: &FeatureSet, rng: &mut ChaCha8Rng) -> Head {
    let mut head = Head { weight: Tensor::zeros(&[CLASSES as usize, FEATURE_DIM]), bias: Tensor::zeros(&[CLASSES as usize]) };
    for _ in 0..10 {
        head.epoch(set, 4, 0.5, rng).unwrap();
    }
    head
}

/// Prototypes and memory statistics computed straight from the feature set.
fn knowledge_of(set: &FeatureSet) -> PreservedKnowledge {
    let mut sums = vec![vec![0.0; FEATURE_DIM]; CLASSES as usize];
    let mut counts = vec![0usize; CLASSES as usize];
    let mut memory = vec![0.0; FEATURE_DIM];
    for (f, labels) in &set.items {
        let pixels = labels.len();
        for (ch, plane) in f.data().chunks(pixels).enumerate() {
            memory[ch] += plane.iter().sum::<f64>() / pixels as f64 / set.len() as f64;
            for (p, &l) in labels.iter().enumerate() {
                sums[l as usize][ch] += plane[p];
            }
        }
        for &l in labels {
            counts[l as usize] += 1;
        }
    }
    let prototypes = (0..CLASSES).map(|c| (c, sums[c as usize].iter().map(|s| s / counts[c as usize] as f64).collect())).collect();
    PreservedKnowledge { memory_feature: memory, prototypes, geometry: [0.1, 0.3, 0.6] }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

#[test]
fn encode_and_fuse_matches_direct_attention_oracle() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = RecoveryFn::new(&mut rng);
        let classes = 4usize;
        let weight =
            Tensor::new(vec![classes, FEATURE_DIM], (0..classes * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let bias = Tensor::vector((0..classes).map(|_| rng.random_range(-1.0..1.0)).collect());
        let summary = ChannelSummary::of_layers(&[(&weight, &bias)]).unwrap();
        let mut pk = PreservedKnowledge {
            memory_feature: (0..FEATURE_DIM).map(|_| rng.random_range(0.0..2.0)).collect(),
            prototypes: Default::default(),
            geometry: [rng.random_range(-1.0..0.0), rng.random_range(0.0..0.5), rng.random_range(0.5..1.0)],
        };
        for c in [0u8, 2, 3] {
            pk.prototypes.insert(c, (0..FEATURE_DIM).map(|_| rng.random_range(0.0..2.0)).collect());
        }

        let stat_rows: Vec<Vec<f64>> =
            (0..classes).map(|c| psi.summary_rows.eval(&[summary.per_channel_mean[c], summary.per_channel_var[c]])).collect();
        let e_s = psi.summary_out.eval(&mean_rows(&stat_rows));
        let proto_rows: Vec<Vec<f64>> = pk.prototypes.values().map(|p| psi.proto_rows.eval(p)).collect();
        let e_p = psi.proto_out.eval(&mean_rows(&proto_rows));
        let e_m = psi.memory.eval(&pk.memory_feature);
        let e_g = psi.geometry.eval(&pk.geometry);
        let encodings = [e_s, e_p, e_m, e_g];
        let scores: Vec<f64> = encodings.iter().map(|e| e.iter().zip(psi.query.data()).map(|(a, b)| a * b).sum()).collect();
        let attention = softmax(&scores);
        let fused: Vec<f64> = (0..encodings[0].len()).map(|i| encodings.iter().zip(&attention).map(|(e, a)| a * e[i]).sum()).collect();

        let delta = encode_and_fuse(&psi, &RecoveryInputs { head_summary: &summary, knowledge: &pk }).unwrap();
        for (a, b) in delta.attention.iter().zip(&attention) {
            assert!((a - b).abs() < 1e-12);
        }
        for c in 0..classes {
            let expect = match pk.prototypes.get(&(c as u8)) {
                Some(p) => psi.decoder.eval(&fused.iter().chain(p).copied().collect::<Vec<_>>()),
                None => vec![0.0; FEATURE_DIM + 1],
            };
            for (a, b) in delta.weight.row(c).iter().zip(&expect[..FEATURE_DIM]) {
                assert!((a - b).abs() < 1e-12, "seed {seed} class {c}");
            }
            assert!((delta.bias.data()[c] - expect[FEATURE_DIM]).abs() < 1e-12);
        }
    }
}

fn episode_setup(seed: u64) -> (FeatureSet, Head, PreservedKnowledge, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = separable_set(24, 0.6, &mut rng);
    let head = trained_head(&set, &mut rng);
    let pk = knowledge_of(&set);
    (set, head, pk, rng)
}

const DEGRADE: EpisodeHyper = EpisodeHyper { split_fraction: 0.6, steps: 30, lr: 0.5, batch: 4 };

fn classes() -> Vec<u8> {
    (0..CLASSES).collect()
}

fn plus_miou(head: &Head, set: &FeatureSet, ep: &Episode) -> f64 {
    evaluate_head(&head.weight, &head.bias, set, Some(&ep.y_plus)).unwrap().iou.miou
}

#[test]
fn degradation_lowers_withheld_class_miou() {
    let mut lowered = 0;
    for seed in 0..10 {
        let (set, head, _, mut rng) = episode_setup(seed);
        let ep = make_episode(&head, &set, &classes(), &DEGRADE, &mut rng).unwrap();
        assert_eq!(ep.y_minus.len() + ep.y_plus.len(), CLASSES as usize);
        if plus_miou(&ep.degraded, &set, &ep) < plus_miou(&head, &set, &ep) {
            lowered += 1;
        }
    }
    assert!(lowered >= 9, "degradation lowered withheld mIoU in only {lowered}/10 seeds");
}

#[test]
fn episode_gradients_match_central_differences() {
    let (set, head, pk, mut rng) = episode_setup(3);
    let mut psi = RecoveryFn::new(&mut rng);
    let ep = make_episode(&head, &set, &classes(), &DEGRADE, &mut rng).unwrap();
    let target = set.masked(&ep.y_plus);
    let batch: Vec<(&Tensor, &[u8])> = target.items[..4].iter().map(|(f, l)| (f, l.as_slice())).collect();
    let grads = episode_gradients(&psi, &ep, &pk, &batch).unwrap().unwrap();
    let step = 1e-5;
    let tensor_count = grads.len();
    let mut checked = 0;
    for (t, grad) in grads.iter().enumerate() {
        let len = grad.len();
        for _ in 0..4 {
            let i = rng.random_range(0..len);
            let original = psi.tensors()[t].data()[i];
            psi.tensors_mut()[t].data_mut()[i] = original + step;
            let up = episode_loss(&psi, &ep, &pk, &batch).unwrap().unwrap();
            psi.tensors_mut()[t].data_mut()[i] = original - step;
            let down = episode_loss(&psi, &ep, &pk, &batch).unwrap().unwrap();
            psi.tensors_mut()[t].data_mut()[i] = original;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads[t].data()[i];
            let err = (numeric - analytic).abs();
            assert!(err <= 1e-7 + 1e-4 * numeric.abs().max(analytic.abs()), "tensor {t} entry {i}: analytic {analytic} numeric {numeric}");
            checked += 1;
        }
    }
    assert_eq!(checked, 4 * tensor_count);
}

fn meta_hyper(episodes: usize) -> MetaHyper {
    MetaHyper { episodes, episode: DEGRADE, outer_lr: 0.1, outer_batch: 4 }
}

#[test]
fn meta_training_lowers_the_outer_loss() {
    let mut improved = 0;
    for seed in 0..5 {
        let (set, head, pk, mut rng) = episode_setup(100 + seed);
        let mut psi = RecoveryFn::new(&mut rng);
        let trace = meta_train(&mut psi, &head, &set, &classes(), &pk, &meta_hyper(150), &mut rng).unwrap();
        let window = trace.losses.len() / 5;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let first = mean(&trace.losses[..window]);
        let last = mean(&trace.losses[trace.losses.len() - window..]);
        if last < first {
            improved += 1;
        }
    }
    assert!(improved >= 4, "outer loss fell in only {improved}/5 seeds");
}

#[test]
fn meta_training_is_deterministic() {
    let run = || {
        let (set, head, pk, mut rng) = episode_setup(7);
        let mut psi = RecoveryFn::new(&mut rng);
        let trace = meta_train(&mut psi, &head, &set, &classes(), &pk, &meta_hyper(10), &mut rng).unwrap();
        (psi, trace)
    };
    assert_eq!(run(), run());
}
