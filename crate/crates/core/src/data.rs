//! Synthetic terrain scenes, task sequences, client sharding and the
//! exemplar memory.

use std::collections::BTreeMap;

use fcl_tensor::{Tensor, IGNORE_LABEL};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

/// Mean colors; classes beyond the table cycle through it with a shift.
pub const PALETTE: [[f64; 3]; 12] = [
    [0.80, 0.62, 0.42],
    [0.90, 0.82, 0.55],
    [0.45, 0.40, 0.38],
    [0.64, 0.56, 0.50],
    [0.30, 0.22, 0.18],
    [0.86, 0.44, 0.30],
    [0.55, 0.70, 0.82],
    [0.35, 0.55, 0.35],
    [0.70, 0.35, 0.62],
    [0.22, 0.35, 0.62],
    [0.95, 0.95, 0.88],
    [0.12, 0.14, 0.12],
];

pub fn class_color(class: u8) -> [f64; 3] {
    let base = PALETTE[class as usize % PALETTE.len()];
    let cycle = (class as usize / PALETTE.len()) as f64;
    base.map(|c| (c + 0.17 * cycle).rem_euclid(1.0))
}

/// One labelled scene. `labels` is row-major `[height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerrainSample {
    pub image: Tensor,
    pub labels: Vec<u8>,
}

impl TerrainSample {
    pub fn new(image: Tensor, labels: Vec<u8>) -> Result<Self> {
        match image.shape() {
            &[3, h, w] if h * w == labels.len() => Ok(TerrainSample { image, labels }),
            s => Err(Error::contract(format!("image {s:?} does not match {} labels", labels.len()))),
        }
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn labelled_pixels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    /// Most frequent non-ignored label; ties go to the lowest id.
    pub fn majority_label(&self) -> Option<u8> {
        let mut counts = [0usize; 256];
        for &l in &self.labels {
            if l != IGNORE_LABEL {
                counts[l as usize] += 1;
            }
        }
        let (best, n) = counts.iter().enumerate().fold((0, 0), |acc, (c, &n)| if n > acc.1 { (c, n) } else { acc });
        (n > 0).then_some(best as u8)
    }
}

/// Scene generator settings shared by every task.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub n_cells: usize,
    pub noise: f64,
    /// Previously seen classes mixed into each scene of a later task.
    pub old_per_scene: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec { height: 16, width: 16, n_cells: 6, noise: 0.08, old_per_scene: 2 }
    }
}

/// Voronoi scene: each cell takes a class from `active`, each pixel the
/// class of its nearest site, colors are class means plus Gaussian noise.
pub fn gen_terrain(seed: u64, active: &[u8], height: usize, width: usize, n_cells: usize, noise: f64) -> Result<TerrainSample> {
    if n_cells == 0 || active.is_empty() || height == 0 || width == 0 {
        return Err(Error::contract("a scene needs cells, classes and a non-empty grid"));
    }
    let mut rng = seed::Rng::seed_from_u64(seed);
    let sites: Vec<(f64, f64, u8)> = (0..n_cells)
        .map(|_| {
            let y = rng.random_range(0.0..height as f64);
            let x = rng.random_range(0.0..width as f64);
            (y, x, active[rng.random_range(0..active.len())])
        })
        .collect();
    let plane = height * width;
    let mut labels = vec![0u8; plane];
    for y in 0..height {
        for x in 0..width {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = f64::INFINITY;
            for &(sy, sx, class) in &sites {
                let d = (py - sy).powi(2) + (px - sx).powi(2);
                if d < best {
                    best = d;
                    labels[y * width + x] = class;
                }
            }
        }
    }
    let mut data = vec![0.0; 3 * plane];
    let normal = (noise > 0.0).then(|| Normal::new(0.0, noise).expect("positive noise"));
    for ch in 0..3 {
        for p in 0..plane {
            let base = class_color(labels[p])[ch];
            let jitter = normal.map_or(0.0, |n| n.sample(&mut rng));
            data[ch * plane + p] = (base + jitter).clamp(0.0, 1.0);
        }
    }
    TerrainSample::new(Tensor::new(vec![3, height, width], data)?, labels)
}

/// A task's exclusive class set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: usize,
    pub classes: Vec<u8>,
    pub sample_count: usize,
}

/// Base task owns `[0, base)`; each later task owns the next `per_increment` ids.
pub fn make_task_sequence(total: usize, base: usize, per_increment: usize, samples_per_task: usize) -> Result<Vec<TaskSpec>> {
    if base == 0 || per_increment == 0 || base > total || total > IGNORE_LABEL as usize {
        return Err(Error::Config(format!("cannot split {total} classes into a base of {base} and increments of {per_increment}")));
    }
    let increments = (total - base) / per_increment;
    let mut tasks = vec![TaskSpec { id: 0, classes: (0..base as u8).collect(), sample_count: samples_per_task }];
    for k in 0..increments {
        let start = base + k * per_increment;
        tasks.push(TaskSpec { id: k + 1, classes: (start as u8..(start + per_increment) as u8).collect(), sample_count: samples_per_task });
    }
    Ok(tasks)
}

/// Which pool a generated scene belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Scenes for `task`. Later tasks mix in up to `old_per_scene` classes from
/// `seen_before`. Labels are full; training callers mask them.
pub fn task_scenes(
    spec: &SceneSpec,
    task: &TaskSpec,
    seen_before: &[u8],
    count: usize,
    split: Split,
    experiment_seed: u64,
) -> Result<Vec<TerrainSample>> {
    let purpose = match split {
        Split::Train => Purpose::TrainData,
        Split::Test => Purpose::TestData,
    };
    (0..count)
        .map(|i| {
            let key = seed::derive(experiment_seed, purpose, &[task.id as u64, i as u64]);
            let mut rng = seed::Rng::seed_from_u64(key);
            let mut active = task.classes.clone();
            let mut old = seen_before.to_vec();
            old.shuffle(&mut rng);
            active.extend(old.into_iter().take(spec.old_per_scene));
            gen_terrain(rng.random(), &active, spec.height, spec.width, spec.n_cells, spec.noise)
        })
        .collect()
}

/// Labels outside `classes` become the ignore value; the image is untouched.
pub fn mask_for_task(sample: &TerrainSample, classes: &[u8]) -> TerrainSample {
    let labels = sample.labels.iter().map(|&l| if classes.contains(&l) { l } else { IGNORE_LABEL }).collect();
    TerrainSample { image: sample.image.clone(), labels }
}

/// Counts proportional to `weights` summing to `n`: floors first, then the
/// remainder to the largest fractional parts (lowest index on ties).
pub fn largest_remainder(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet(k: usize, beta: f64, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|d| d / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// Splits sample indices across `k` clients. Samples are grouped by
/// majority label; each group is shuffled and cut by a Dirichlet(beta)
/// proportion vector with largest-remainder rounding. Scenes without any
/// labelled pixel form their own group.
pub fn partition_indices(samples: &[TerrainSample], k: usize, beta: f64, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if k == 0 || beta.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("partition needs K >= 1 and beta > 0, got K={k}, beta={beta}")));
    }
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = s.majority_label().map_or(u16::from(IGNORE_LABEL), u16::from);
        groups.entry(key).or_default().push(i);
    }
    let mut shards = vec![Vec::new(); k];
    for (_, mut members) in groups {
        members.shuffle(rng);
        let counts = largest_remainder(&dirichlet(k, beta, rng), members.len());
        let mut start = 0;
        for (client, &c) in counts.iter().enumerate() {
            shards[client].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// One client's slice of a task's data.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub client_id: usize,
    pub samples: Vec<TerrainSample>,
}

pub fn dirichlet_partition(samples: &[TerrainSample], k: usize, beta: f64, rng: &mut impl Rng) -> Result<Vec<Shard>> {
    Ok(partition_indices(samples, k, beta, rng)?
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| Shard { client_id, samples: idx.into_iter().map(|i| samples[i].clone()).collect() })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Greedy exemplar selection: each step adds the index that brings the
/// running mean of the selection closest to the mean of all features.
pub fn herding_select(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    if n == 0 {
        return Vec::new();
    }
    let dim = features[0].len();
    let mut mu = vec![0.0; dim];
    for f in features {
        for (a, b) in mu.iter_mut().zip(f) {
            *a += b;
        }
    }
    mu.iter_mut().for_each(|v| *v /= n as f64);

    let mut taken = vec![false; n];
    let mut sum = vec![0.0; dim];
    let mut picked = Vec::with_capacity(m.min(n));
    let mut candidate = vec![0.0; dim];
    for j in 0..m.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for (i, f) in features.iter().enumerate() {
            if taken[i] {
                continue;
            }
            for d in 0..dim {
                candidate[d] = (sum[d] + f[d]) / (j + 1) as f64;
            }
            let dist = sq_dist(&mu, &candidate);
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("unselected index remains");
        taken[i] = true;
        for (s, v) in sum.iter_mut().zip(&features[i]) {
            *s += v;
        }
        picked.push(i);
    }
    picked
}

/// Per-class allocation of `capacity` over `classes`: the first
/// `capacity % classes` classes get one extra slot.
pub fn class_quotas(capacity: usize, classes: usize) -> Vec<usize> {
    if classes == 0 {
        return Vec::new();
    }
    let base = capacity / classes;
    let extra = capacity % classes;
    (0..classes).map(|c| base + usize::from(c < extra)).collect()
}

/// Candidate exemplars for one class with their herding features.
#[derive(Debug, Clone, Default)]
pub struct Candidates {
    pub samples: Vec<TerrainSample>,
    pub features: Vec<Vec<f64>>,
}

/// Fixed-capacity exemplar store; each class keeps its exemplars in
/// selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    exemplars: BTreeMap<u8, Vec<TerrainSample>>,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        MemoryBuffer { capacity, exemplars: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn exemplars(&self) -> &BTreeMap<u8, Vec<TerrainSample>> {
        &self.exemplars
    }

    pub fn len(&self) -> usize {
        self.exemplars.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> BTreeMap<u8, usize> {
        self.exemplars.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Union of several buffers with their capacities summed; classes keep buffer order.
    pub fn merged<'a>(buffers: impl IntoIterator<Item = &'a MemoryBuffer>) -> MemoryBuffer {
        let mut out = MemoryBuffer::new(0);
        for b in buffers {
            out.capacity += b.capacity;
            for (&c, v) in &b.exemplars {
                out.exemplars.entry(c).or_default().extend(v.iter().cloned());
            }
        }
        out
    }

    /// Every stored exemplar, class by class.
    pub fn samples(&self) -> impl Iterator<Item = &TerrainSample> {
        self.exemplars.values().flatten()
    }

    /// Reallocates the capacity over the classes this buffer will hold
    /// (stored classes plus classes with candidates), trims stored classes
    /// to their prefix, and herds exemplars for every class in `candidates`.
    ///
    /// Targets follow [`class_quotas`] in ascending class order. When some
    /// class has fewer exemplars available than its quota, every target is
    /// capped at one above that shortest supply, so per-class counts always
    /// stay within one of each other.
    pub fn update(&mut self, candidates: BTreeMap<u8, Candidates>, seen_classes: usize) -> Result<()> {
        if seen_classes == 0 {
            return Err(Error::contract("buffer update needs at least one seen class"));
        }
        let out_of_range = self.exemplars.keys().chain(candidates.keys()).find(|&&c| c as usize >= seen_classes);
        if let Some(c) = out_of_range {
            return Err(Error::contract(format!("class {c} outside the {seen_classes} seen classes")));
        }
        if candidates.values().any(|c| c.samples.len() != c.features.len()) {
            return Err(Error::contract("candidate samples and features differ in count"));
        }
        let available: BTreeMap<u8, usize> = self
            .exemplars
            .iter()
            .map(|(&c, v)| (c, v.len()))
            .chain(candidates.iter().map(|(&c, cand)| (c, cand.samples.len())))
            .filter(|&(_, n)| n > 0)
            .collect();
        let Some(&shortest) = available.values().min() else {
            self.exemplars.clear();
            return Ok(());
        };
        let quotas = class_quotas(self.capacity, available.len());
        let short = available.values().zip(&quotas).any(|(&n, &q)| n < q);
        let targets: BTreeMap<u8, usize> =
            available.iter().zip(quotas).map(|((&c, &n), q)| (c, if short { q.min(shortest + 1).min(n) } else { q })).collect();
        for (class, stored) in self.exemplars.iter_mut() {
            stored.truncate(targets.get(class).copied().unwrap_or(0));
        }
        for (class, cand) in candidates {
            let chosen = herding_select(&cand.features, targets.get(&class).copied().unwrap_or(0));
            let picked: Vec<TerrainSample> = chosen.into_iter().map(|i| cand.samples[i].clone()).collect();
            self.exemplars.insert(class, picked);
        }
        self.exemplars.retain(|_, v| !v.is_empty());
        Ok(())
    }
}
