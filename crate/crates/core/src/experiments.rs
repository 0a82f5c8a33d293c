//! Experiment drivers built on the lifecycle: layer sensitivity with
//! gradient conflict, the recovery benchmark, and parameter sweeps.

use fcl_tensor::{grad_check, GradCheckReport, Var, IGNORE_LABEL};
use serde::Serialize;

use crate::analysis::{gradient_conflict, layer_sensitivity, SensitivityReport};
use crate::config::Config;
use crate::data::{gen_terrain, mask_for_task, task_scenes, MemoryBuffer, Split, TerrainSample};
use crate::error::{Error, Result};
use crate::federation::{run_lifecycle, Lifecycle, RunReport};
use crate::model::{record_forward, NetVars, SegNet};
use crate::rkr::{self, RecoverHyper};
use crate::seed::{self, Purpose};
use crate::train::{FeatureSet, Head};

/// Finite-difference step and tolerance of the autodiff check.
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Checks tape gradients of the full segmenter loss on one random scene
/// against central differences.
pub fn autodiff_check(seed: u64, class_count: usize, grid: usize) -> Result<GradCheckReport> {
    let mut rng = seed::stream(seed, Purpose::Init, &[u64::MAX]);
    let net = SegNet::new(class_count, &mut rng)?;
    let classes: Vec<u8> = (0..class_count as u8).collect();
    let sample = gen_terrain(seed, &classes, grid, grid, 4, 0.08)?;
    let loss = |tape: &mut fcl_tensor::Tape, vars: &[Var]| -> fcl_tensor::Result<Var> {
        let vars: NetVars = vars.try_into().expect("one leaf per parameter");
        let (_, logits) = record_forward(tape, &vars, &sample.image).map_err(|e| fcl_tensor::TensorError::Contract(e.to_string()))?;
        tape.pixel_cross_entropy(logits, &sample.labels, IGNORE_LABEL)
    };
    Ok(grad_check(loss, net.params(), GRADCHECK_STEP, GRADCHECK_TOLERANCE)?)
}

/// Group sensitivity of the base model to a plainly fine-tuned successor,
/// and the gradient conflict between old- and new-class batches at that successor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityOutcome {
    pub seed: u64,
    pub report: SensitivityReport,
    /// Squared group-gradient distance (shallow, deep, head).
    pub conflict: [f64; 3],
}

fn require_increment(cfg: &Config) -> Result<()> {
    if cfg.tasks < 2 {
        return Err(Error::Config("this experiment needs at least one incremental task (T >= 2)".into()));
    }
    Ok(())
}

/// Trains the base task and one increment in fine-tune mode, then
/// transplants each group of the successor into the base model.
pub fn sensitivity(cfg: &Config) -> Result<SensitivityOutcome> {
    require_increment(cfg)?;
    let cfg = cfg.with("mode", "finetune")?.with("recovery", "off")?.with("episodes", "0")?;
    let mut life = Lifecycle::new(&cfg)?;
    life.run_task(0)?;
    life.run_task(1)?;
    let base = &life.task_nets[0];
    let later = &life.task_nets[1];
    let report = layer_sensitivity(base, later, &life.test_pools()[0])?;

    let tasks = life.tasks();
    let scene = cfg.scene();
    let fresh = |task: usize, seen: &[u8]| -> Result<Vec<TerrainSample>> {
        let scenes = task_scenes(&scene, &tasks[task], seen, cfg.batch, Split::Train, cfg.seed ^ 0x5eed)?;
        Ok(scenes.iter().map(|s| mask_for_task(s, &tasks[task].classes)).collect())
    };
    let old = fresh(0, &[])?;
    let new = fresh(1, &tasks[0].classes)?;
    let new_refs: Vec<&TerrainSample> = new.iter().collect();
    let old_refs: Vec<&TerrainSample> = old.iter().collect();
    let conflict = gradient_conflict(later, &new_refs, &old_refs)?;
    Ok(SensitivityOutcome { seed: cfg.seed, report, conflict })
}

/// Epochs needed by one recovery method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodResult {
    pub epochs: usize,
    pub reached: bool,
    pub start_miou: f64,
    pub final_miou: f64,
}

/// Degrade-then-recover comparison on the model after the first increment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOutcome {
    pub seed: u64,
    pub pre_degradation_miou: f64,
    pub degraded_miou: f64,
    pub target: f64,
    pub rkr: MethodResult,
    pub warm_start: MethodResult,
    pub retrain: MethodResult,
}

fn random_head(class_count: usize, seed: u64, tag: u64) -> Result<Head> {
    let mut rng = seed::stream(seed, Purpose::Bench, &[tag]);
    Ok(Head::of(&SegNet::new(class_count, &mut rng)?))
}

/// Trains through the first increment without recovery, re-initializes the
/// head at random, and measures fine-tuning epochs to reach the threshold
/// for the recovery function, a zero-correction warm start, and a fresh head.
pub fn recover_bench(cfg: &Config) -> Result<BenchOutcome> {
    require_increment(cfg)?;
    let cfg = cfg.with("recovery", "off")?;
    if cfg.episodes == 0 {
        return Err(Error::Config("the recovery benchmark needs meta-training episodes".into()));
    }
    let mut life = Lifecycle::new(&cfg)?;
    life.run_task(0)?;
    life.run_task(1)?;
    let trained = life.server.net.clone();
    let psi = life.server.psi.clone().ok_or_else(|| Error::contract("recovery function missing after task 0"))?;
    let seen: Vec<u8> = (0..trained.class_count() as u8).collect();
    let eval = FeatureSet::extract(&trained, &life.cumulative_test(1))?;
    let pooled = MemoryBuffer::merged(life.clients.iter().map(|c| &c.buffer));
    let knowledge = rkr::recovery_knowledge(&pooled, &trained)?;
    let score = |h: &Head| -> Result<f64> { Ok(crate::train::evaluate_head(&h.weight, &h.bias, &eval, Some(&seen))?.iou.miou) };
    let pre = score(&Head::of(&trained))?;
    let target = pre * cfg.tau_fraction;
    let degraded = random_head(trained.class_count(), cfg.seed, 0)?.install(&trained)?;
    let fresh = random_head(trained.class_count(), cfg.seed, 1)?.install(&trained)?;
    let run = |net: &SegNet, use_psi: bool, cap: usize, tag: u64| -> Result<MethodResult> {
        let hyper = RecoverHyper { max_epochs: cap, lr: cfg.lr_recover, batch: cfg.recover_batch, tau: target };
        let mut rng = seed::stream(cfg.seed, Purpose::Bench, &[2, tag]);
        let out = rkr::recover(net, use_psi.then_some(&psi), &pooled, &knowledge, &eval, &seen, &hyper, &mut rng)?;
        Ok(MethodResult { epochs: out.epochs, reached: out.reached, start_miou: out.miou_after_correction, final_miou: out.miou_after })
    };
    Ok(BenchOutcome {
        seed: cfg.seed,
        pre_degradation_miou: pre,
        degraded_miou: score(&Head::of(&degraded))?,
        target,
        rkr: run(&degraded, true, cfg.max_finetune_epochs, 0)?,
        warm_start: run(&degraded, false, cfg.max_finetune_epochs, 0)?,
        retrain: run(&fresh, false, cfg.retrain_epochs, 1)?,
    })
}

/// Which configuration key a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Buffers,
    Tau,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<SweepParam> {
        match s {
            "beta" => Some(SweepParam::Beta),
            "buffers" => Some(SweepParam::Buffers),
            "tau" => Some(SweepParam::Tau),
            _ => None,
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Buffers => "buffer_capacity",
            SweepParam::Tau => "tau_fraction",
        }
    }
}

/// One sweep setting and its run summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: String,
    pub final_miou: f64,
    pub triggers: usize,
    /// Cumulative mIoU forgetting after the last task.
    pub mean_forgetting: f64,
}

/// Runs the full lifecycle once per value.
pub fn sweep(cfg: &Config, param: SweepParam, values: &[String]) -> Result<Vec<SweepPoint>> {
    values
        .iter()
        .map(|v| {
            let run = run_lifecycle(&cfg.with(param.key(), v)?)?;
            Ok(summarize(v, &run.report))
        })
        .collect()
}

fn summarize(value: &str, report: &RunReport) -> SweepPoint {
    let rows = &report.forgetting.cumulative_miou;
    SweepPoint {
        value: value.to_string(),
        final_miou: report.final_miou,
        triggers: report.tasks.iter().filter(|t| t.triggered).count(),
        mean_forgetting: rows.last().copied().unwrap_or(0.0),
    }
}
