//! In-process federated continual training: client selection, local
//! training, aggregation, task transitions and recovery.

use std::collections::{BTreeMap, BTreeSet};

use fcl_tensor::IGNORE_LABEL;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{forgetting, EvalLog, ForgettingTable, SplitScore};
use crate::config::{Config, Mode};
use crate::data::{
    dirichlet_partition, make_task_sequence, mask_for_task, task_scenes, Candidates, MemoryBuffer, SceneSpec, Split, TaskSpec,
    TerrainSample,
};
use crate::error::{Error, Result};
use crate::lsr::{GeneratorSet, LocalHyper};
use crate::model::SegNet;
use crate::nn::fingerprint;
use crate::rkr::{self, EpisodeHyper, MetaHyper, RecoverHyper, RecoveryFn};
use crate::seed::{self, Purpose};
use crate::train::{evaluate, FeatureSet, Head, Velocity};

/// Bytes per transmitted parameter.
pub const BYTES_PER_PARAM: u64 = 8;

/// Seed tag separating recovery streams from round streams.
const RECOVERY_TAG: u64 = u64::MAX;

/// Everything one client keeps to itself.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Vec<TerrainSample>,
    pub buffer: MemoryBuffer,
    pub generators: GeneratorSet,
    pub velocity: Velocity,
    pub psi: Option<RecoveryFn>,
}

/// The coordinator's view.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub net: SegNet,
    pub task: usize,
    pub round: usize,
    pub psi: Option<RecoveryFn>,
    pub log: Vec<RoundRecord>,
}

/// One communication round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub task: usize,
    pub round: usize,
    pub clients: Vec<usize>,
    pub client_losses: Vec<f64>,
    pub mean_train_loss: f64,
    pub miou_cumulative: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Fingerprint of every uploaded parameter set, in selection order.
    pub upload_fingerprint: u64,
}

/// One client's recovery attempt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRecovery {
    pub client: usize,
    pub epochs: usize,
    pub reached: bool,
    pub miou_after_correction: f64,
}

/// Recovery after a task whose cumulative mIoU fell below the threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryEvent {
    pub clients: Vec<ClientRecovery>,
    /// Clients skipped because their memory is empty.
    pub skipped: Vec<usize>,
    pub miou_after: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// End-of-task summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    pub task: usize,
    pub classes: Vec<u8>,
    pub class_count: usize,
    /// Scores on each seen task's test split, after any recovery.
    pub splits: Vec<SplitScore>,
    /// Cumulative mIoU before any recovery; the trigger compares this value.
    pub miou_before_recovery: f64,
    /// Cumulative mIoU of the model that enters the next task.
    pub miou_cumulative: f64,
    pub triggered: bool,
    pub recovery: Option<RecoveryEvent>,
    /// Per-client exemplar counts after the buffer update.
    pub buffer_counts: Vec<BTreeMap<u8, usize>>,
}

/// The one-time copy of the recovery function to every client.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsiBroadcast {
    pub after_task: usize,
    pub recipients: usize,
    pub parameters: usize,
    pub bytes: u64,
}

/// Results of a full run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub mode: Mode,
    pub task0_miou: f64,
    pub tau: f64,
    pub final_miou: f64,
    pub tasks: Vec<TaskRecord>,
    pub forgetting: ForgettingTable,
    pub psi_broadcast: Option<PsiBroadcast>,
    pub meta_losses: Vec<f64>,
    /// Fingerprint of the recovery function when broadcast and at the end of the run.
    pub psi_fingerprints: Option<(u64, u64)>,
    #[serde(skip)]
    pub rounds: Vec<RoundRecord>,
}

/// Uniform sample without replacement of `ceil(fraction * k)` clients, ascending.
pub fn select_clients(k: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let n = ((fraction * k as f64 - 1e-9).ceil() as usize).clamp(1, k);
    let mut chosen = rand::seq::index::sample(rng, k, n).into_vec();
    chosen.sort_unstable();
    chosen
}

/// Unweighted elementwise mean, summed in sequence order.
pub fn aggregate(models: &[SegNet]) -> Result<SegNet> {
    let first = models.first().ok_or_else(|| Error::contract("aggregation over zero models"))?;
    let mut params: Vec<_> = first.params().to_vec();
    for m in &models[1..] {
        for (acc, p) in params.iter_mut().zip(m.params()) {
            if acc.shape() != p.shape() {
                return Err(Error::Tensor(fcl_tensor::TensorError::Dimension {
                    op: "aggregate",
                    detail: format!("{:?} vs {:?}", acc.shape(), p.shape()),
                }));
            }
            for (a, v) in acc.data_mut().iter_mut().zip(p.data()) {
                *a += v;
            }
        }
        if m.params().len() != first.params().len() {
            return Err(Error::contract("aggregated models differ in parameter count"));
        }
    }
    if models.len() > 1 {
        let n = models.len() as f64;
        for acc in params.iter_mut() {
            acc.data_mut().iter_mut().for_each(|a| *a /= n);
        }
    }
    SegNet::from_params(params)
}

fn net_bytes(net: &SegNet, copies: usize) -> u64 {
    net.param_count() as u64 * BYTES_PER_PARAM * copies as u64
}

/// Cumulative evaluation on every seen task's test split.
struct Cumulative {
    miou: f64,
    per_class: Vec<Option<f64>>,
}

/// Settings of one round.
#[derive(Debug, Clone)]
pub struct RoundHyper {
    pub local: LocalHyper,
    pub client_fraction: f64,
    pub seed: u64,
}

/// A running experiment that advances one task at a time.
pub struct Lifecycle {
    cfg: Config,
    tasks: Vec<TaskSpec>,
    scene: SceneSpec,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    test_pools: Vec<Vec<TerrainSample>>,
    theta_ref: SegNet,
    eval_log: EvalLog,
    task_records: Vec<TaskRecord>,
    /// Server model at the end of every completed task.
    pub task_nets: Vec<SegNet>,
    task0_miou: f64,
    tau: f64,
    psi_broadcast: Option<PsiBroadcast>,
    meta_losses: Vec<f64>,
    psi_fingerprint: Option<u64>,
    pool: Option<rayon::ThreadPool>,
}

/// Final state of a run.
pub struct LifecycleResult {
    pub report: RunReport,
    pub net: SegNet,
    pub psi: Option<RecoveryFn>,
    pub clients: Vec<ClientState>,
    pub task_nets: Vec<SegNet>,
    /// Test scenes of every task, in task order.
    pub test_pools: Vec<Vec<TerrainSample>>,
}

/// A scene is a candidate for every class it labels; its herding feature is
/// the global average pool of its deep features.
fn candidates_by_class(shard: &[TerrainSample], net: &SegNet) -> Result<BTreeMap<u8, Candidates>> {
    let mut out: BTreeMap<u8, Candidates> = BTreeMap::new();
    for s in shard {
        let classes: BTreeSet<u8> = s.labels.iter().copied().filter(|&l| l != IGNORE_LABEL).collect();
        if classes.is_empty() {
            continue;
        }
        let f = net.deep_features(&s.image)?;
        let pooled: Vec<f64> = (0..f.leading()).map(|c| f.row(c).iter().sum::<f64>() / f.row_len() as f64).collect();
        for class in classes {
            let entry = out.entry(class).or_default();
            entry.samples.push(s.clone());
            entry.features.push(pooled.clone());
        }
    }
    Ok(out)
}

impl Lifecycle {
    pub fn new(cfg: &Config) -> Result<Self> {
        let per_increment = cfg.classes_per_increment.max(1);
        let tasks = make_task_sequence(cfg.total_classes(), cfg.base_classes, per_increment, cfg.samples_per_task)?;
        if tasks.len() != cfg.tasks {
            return Err(Error::Config(format!("class layout yields {} tasks, expected {}", tasks.len(), cfg.tasks)));
        }
        let scene = cfg.scene();
        let mut init = seed::stream(cfg.seed, Purpose::Init, &[]);
        let net = SegNet::new(tasks[0].classes.len(), &mut init)?;
        let clients = (0..cfg.clients)
            .map(|k| {
                let mut rng = seed::stream(cfg.seed, Purpose::Generators, &[k as u64]);
                ClientState {
                    id: k,
                    shard: Vec::new(),
                    buffer: MemoryBuffer::new(cfg.capacity_of(k)),
                    generators: GeneratorSet::new(&mut rng),
                    velocity: Velocity::zeros_like(&net),
                    psi: None,
                }
            })
            .collect();
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", cfg.threads)))?,
            )
        } else {
            None
        };
        Ok(Lifecycle {
            cfg: cfg.clone(),
            tasks,
            scene,
            theta_ref: net.clone(),
            server: ServerState { net, task: 0, round: 0, psi: None, log: Vec::new() },
            clients,
            test_pools: Vec::new(),
            eval_log: Vec::new(),
            task_records: Vec::new(),
            task_nets: Vec::new(),
            task0_miou: 0.0,
            tau: 0.0,
            psi_broadcast: None,
            meta_losses: Vec::new(),
            psi_fingerprint: None,
            pool,
        })
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn completed_tasks(&self) -> usize {
        self.task_records.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn test_pools(&self) -> &[Vec<TerrainSample>] {
        &self.test_pools
    }

    fn seen_classes(&self, through: usize) -> Vec<u8> {
        self.tasks[..=through].iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    /// Concatenated test pools of tasks `0..=through`.
    pub fn cumulative_test(&self, through: usize) -> Vec<TerrainSample> {
        self.test_pools[..=through].iter().flatten().cloned().collect()
    }

    fn evaluate_cumulative(&self, net: &SegNet, through: usize) -> Result<Cumulative> {
        let seen = self.seen_classes(through);
        let e = evaluate(net, &self.cumulative_test(through), Some(&seen))?;
        Ok(Cumulative { miou: e.iou.miou, per_class: e.iou.per_class })
    }

    fn local_hyper(&self, task: usize) -> Result<LocalHyper> {
        let protection = self.cfg.protection()?;
        let alphas = match (task, self.cfg.mode) {
            (0, _) | (_, Mode::Finetune) => None,
            (_, Mode::Lsr) => Some(protection.per_group()),
            (_, Mode::Uniform) => Some([protection.uniform(); 3]),
        };
        Ok(LocalHyper {
            epochs: if task == 0 { self.cfg.base_epochs } else { self.cfg.local_epochs },
            batch: self.cfg.batch,
            lr: if task == 0 { self.cfg.lr_base } else { self.cfg.lr_incr },
            momentum: self.cfg.momentum,
            weight_decay: self.cfg.weight_decay,
            lambda: self.cfg.lambda,
            lr_gen: self.cfg.lr_gen,
            alphas,
            rehearse: task > 0 && self.cfg.mode != Mode::Finetune,
        })
    }

    /// Prepares task `t`: grows the head, generates and shards the data.
    fn begin_task(&mut self, t: usize) -> Result<()> {
        let task = self.tasks[t].clone();
        if t > 0 {
            let mut rng = seed::stream(self.cfg.seed, Purpose::Expand, &[t as u64]);
            self.server.net = self.server.net.expand_head(task.classes.len(), self.cfg.head_init, &mut rng)?;
        }
        self.server.task = t;
        self.theta_ref = self.server.net.clone();
        let seen_before = if t == 0 { Vec::new() } else { self.seen_classes(t - 1) };
        let train = task_scenes(&self.scene, &task, &seen_before, self.cfg.samples_per_task, Split::Train, self.cfg.seed)?;
        let masked: Vec<TerrainSample> = train.iter().map(|s| mask_for_task(s, &task.classes)).collect();
        let mut rng = seed::stream(self.cfg.seed, Purpose::Partition, &[t as u64]);
        let shards = dirichlet_partition(&masked, self.cfg.clients, self.cfg.beta, &mut rng)?;
        for (client, shard) in self.clients.iter_mut().zip(shards) {
            client.shard = shard.samples;
            client.velocity = Velocity::zeros_like(&self.server.net);
        }
        self.test_pools.push(task_scenes(&self.scene, &task, &seen_before, self.cfg.test_per_task, Split::Test, self.cfg.seed)?);
        Ok(())
    }

    /// One round of distribute, local training, aggregate, evaluate.
    pub fn run_round(&mut self, round: usize) -> Result<&RoundRecord> {
        let t = self.server.task;
        let hyper = RoundHyper { local: self.local_hyper(t)?, client_fraction: self.cfg.client_fraction, seed: self.cfg.seed };
        let mut select_rng = seed::stream(hyper.seed, Purpose::Select, &[t as u64, round as u64]);
        let selected = select_clients(self.clients.len(), hyper.client_fraction, &mut select_rng);
        let global = &self.server.net;
        let theta_ref = &self.theta_ref;
        let train_one = |client: &mut ClientState| -> Result<(SegNet, f64)> {
            let mut rng = seed::stream(hyper.seed, Purpose::Client, &[client.id as u64, t as u64, round as u64]);
            let out = crate::lsr::local_train(
                global,
                &client.shard,
                &client.buffer,
                &mut client.generators,
                &mut client.velocity,
                theta_ref,
                &hyper.local,
                &mut rng,
            )?;
            Ok((out.net, out.mean_loss))
        };
        let chosen: Vec<&mut ClientState> = self.clients.iter_mut().filter(|c| selected.contains(&c.id)).collect();
        let results: Vec<Result<(SegNet, f64)>> = match &self.pool {
            Some(pool) => pool.install(|| chosen.into_par_iter().map(train_one).collect()),
            None => chosen.into_iter().map(train_one).collect(),
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let (uploads, losses): (Vec<SegNet>, Vec<f64>) = results.into_iter().unzip();
        let upload_fingerprint = fingerprint(uploads.iter().flat_map(|n| n.params()));
        let bytes = net_bytes(&self.server.net, selected.len());
        self.server.net = aggregate(&uploads)?;
        self.server.round = round;
        let eval = self.evaluate_cumulative(&self.server.net, t)?;
        let mean_train_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        self.server.log.push(RoundRecord {
            task: t,
            round,
            clients: selected,
            client_losses: losses,
            mean_train_loss,
            miou_cumulative: eval.miou,
            per_class_iou: eval.per_class,
            bytes_up: bytes,
            bytes_down: bytes,
            upload_fingerprint,
        });
        Ok(self.server.log.last().expect("just pushed"))
    }

    fn update_buffers(&mut self, t: usize) -> Result<Vec<BTreeMap<u8, usize>>> {
        let seen = self.seen_classes(t).len();
        let net = &self.server.net;
        let mut counts = Vec::with_capacity(self.clients.len());
        for client in &mut self.clients {
            let candidates = candidates_by_class(&client.shard, net)?;
            client.buffer.update(candidates, seen)?;
            counts.push(client.buffer.counts());
        }
        Ok(counts)
    }

    fn meta_train_psi(&mut self) -> Result<()> {
        let mut rng = seed::stream(self.cfg.seed, Purpose::Init, &[1]);
        let mut psi = RecoveryFn::new(&mut rng);
        let pooled = MemoryBuffer::merged(self.clients.iter().map(|c| &c.buffer));
        if self.cfg.episodes > 0 && !pooled.is_empty() {
            let net = &self.server.net;
            let data = FeatureSet::extract_refs(net, pooled.samples())?;
            let knowledge = rkr::recovery_knowledge(&pooled, net)?;
            let hyper = MetaHyper {
                episodes: self.cfg.episodes,
                episode: EpisodeHyper {
                    split_fraction: self.cfg.split_fraction,
                    steps: self.cfg.inner_steps,
                    lr: self.cfg.degrade_lr,
                    batch: self.cfg.batch,
                },
                outer_lr: self.cfg.meta_lr,
                outer_batch: self.cfg.meta_batch,
            };
            let mut meta_rng = seed::stream(self.cfg.seed, Purpose::Meta, &[]);
            let trace = rkr::meta_train(&mut psi, &Head::of(net), &data, &self.tasks[0].classes, &knowledge, &hyper, &mut meta_rng)?;
            self.meta_losses = trace.losses;
        }
        for client in &mut self.clients {
            client.psi = Some(psi.clone());
        }
        self.psi_broadcast = Some(PsiBroadcast {
            after_task: 0,
            recipients: self.clients.len(),
            parameters: psi.parameter_count(),
            bytes: psi.parameter_count() as u64 * BYTES_PER_PARAM * self.clients.len() as u64,
        });
        self.psi_fingerprint = Some(fingerprint(psi.tensors()));
        self.server.psi = Some(psi);
        Ok(())
    }

    fn recover_all(&mut self, t: usize) -> Result<RecoveryEvent> {
        let net = self.server.net.clone();
        let seen = self.seen_classes(t);
        let eval = FeatureSet::extract(&net, &self.cumulative_test(t))?;
        let hyper = RecoverHyper {
            max_epochs: self.cfg.max_finetune_epochs,
            lr: self.cfg.lr_recover,
            batch: self.cfg.recover_batch,
            tau: self.tau,
        };
        let mut recovered = Vec::new();
        let mut summaries = Vec::new();
        let mut skipped = Vec::new();
        for client in &self.clients {
            if client.buffer.is_empty() {
                skipped.push(client.id);
                continue;
            }
            let mut rng = seed::stream(self.cfg.seed, Purpose::Client, &[client.id as u64, t as u64, RECOVERY_TAG]);
            let knowledge = rkr::recovery_knowledge(&client.buffer, &net)?;
            let out = rkr::recover(&net, client.psi.as_ref(), &client.buffer, &knowledge, &eval, &seen, &hyper, &mut rng)?;
            summaries.push(ClientRecovery {
                client: client.id,
                epochs: out.epochs,
                reached: out.reached,
                miou_after_correction: out.miou_after_correction,
            });
            recovered.push(out.net);
        }
        let copies = recovered.len();
        if !recovered.is_empty() {
            self.server.net = aggregate(&recovered)?;
        }
        let miou_after = self.evaluate_cumulative(&self.server.net, t)?.miou;
        Ok(RecoveryEvent {
            clients: summaries,
            skipped,
            miou_after,
            bytes_up: net_bytes(&net, copies),
            bytes_down: net_bytes(&net, copies),
        })
    }

    /// Runs task `t` end to end. Tasks must be run in order.
    pub fn run_task(&mut self, t: usize) -> Result<&TaskRecord> {
        if t != self.task_records.len() || t >= self.tasks.len() {
            return Err(Error::contract(format!("task {t} requested after {} completed", self.task_records.len())));
        }
        self.begin_task(t)?;
        for round in 1..=self.cfg.rounds {
            self.run_round(round)?;
        }
        let buffer_counts = self.update_buffers(t)?;
        let before = self.evaluate_cumulative(&self.server.net, t)?.miou;
        let mut triggered = false;
        let mut recovery = None;
        if t == 0 {
            self.task0_miou = before;
            self.tau = self.cfg.tau_override.unwrap_or_else(|| rkr::threshold(before, self.cfg.tau_fraction));
            self.meta_train_psi()?;
        } else if self.cfg.recovery && rkr::check_trigger(before, self.tau) {
            triggered = true;
            recovery = Some(self.recover_all(t)?);
        }
        let cumulative = self.evaluate_cumulative(&self.server.net, t)?.miou;
        let splits = (0..=t)
            .map(|j| {
                let e = evaluate(&self.server.net, &self.test_pools[j], Some(&self.tasks[j].classes))?;
                Ok(SplitScore { loss: e.loss, miou: e.iou.miou })
            })
            .collect::<Result<Vec<_>>>()?;
        self.eval_log.push(splits.clone());
        self.task_nets.push(self.server.net.clone());
        self.task_records.push(TaskRecord {
            task: t,
            classes: self.tasks[t].classes.clone(),
            class_count: self.server.net.class_count(),
            splits,
            miou_before_recovery: before,
            miou_cumulative: cumulative,
            triggered,
            recovery,
            buffer_counts,
        });
        Ok(self.task_records.last().expect("just pushed"))
    }

    pub fn finish(self) -> Result<LifecycleResult> {
        let forgetting = forgetting(&self.eval_log)?;
        let final_fp = self.clients.first().and_then(|c| c.psi.as_ref()).map(|p| fingerprint(p.tensors()));
        let report = RunReport {
            seed: self.cfg.seed,
            mode: self.cfg.mode,
            task0_miou: self.task0_miou,
            tau: self.tau,
            final_miou: self.task_records.last().map_or(0.0, |r| r.miou_cumulative),
            tasks: self.task_records,
            forgetting,
            psi_broadcast: self.psi_broadcast,
            meta_losses: self.meta_losses,
            psi_fingerprints: self.psi_fingerprint.zip(final_fp),
            rounds: self.server.log,
        };
        Ok(LifecycleResult {
            report,
            net: self.server.net,
            psi: self.server.psi,
            clients: self.clients,
            task_nets: self.task_nets,
            test_pools: self.test_pools,
        })
    }
}

/// Every task of `cfg` in order.
pub fn run_lifecycle(cfg: &Config) -> Result<LifecycleResult> {
    let mut life = Lifecycle::new(cfg)?;
    for t in 0..cfg.tasks {
        life.run_task(t)?;
    }
    life.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn selection_sizes_and_determinism() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(select_clients(8, 1.0, &mut r), (0..8).collect::<Vec<_>>());
        assert_eq!(select_clients(8, 1.0 / 8.0, &mut r).len(), 1);
        assert_eq!(select_clients(7, 1.0 / 7.0, &mut r).len(), 1);
        assert_eq!(select_clients(10, 0.35, &mut r).len(), 4);
        let a = select_clients(10, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let b = select_clients(10, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn aggregation_identities() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let a = SegNet::new(3, &mut r).unwrap();
        assert_eq!(aggregate(std::slice::from_ref(&a)).unwrap(), a);
        let mean = aggregate(&[a.clone(), a.clone(), a.clone()]).unwrap();
        for (x, y) in mean.flatten().iter().zip(a.flatten()) {
            assert!((x - y).abs() <= 1e-15);
        }
        let mut one = SegNet::zeros(2).unwrap();
        let mut three = SegNet::zeros(2).unwrap();
        one.params_mut()[0].data_mut()[0] = 1.0;
        three.params_mut()[0].data_mut()[0] = 3.0;
        assert_eq!(aggregate(&[one, three]).unwrap().params()[0].data()[0], 2.0);
        assert!(aggregate(&[a, SegNet::zeros(4).unwrap()]).is_err());
        assert!(aggregate(&[]).is_err());
    }
}
