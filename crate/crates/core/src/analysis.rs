//! Metrics, forgetting tables, group-wise diagnostics and result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fcl_tensor::IGNORE_LABEL;
use serde::Serialize;

use crate::data::TerrainSample;
use crate::error::{Error, Result};
use crate::federation::{RoundRecord, RunReport};
use crate::model::{LayerGroup, SegNet};
use crate::train::{evaluate, full_gradients, group_sq_distance};

/// Per-class true positive, false positive and false negative pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { tp: vec![0; classes], fp: vec![0; classes], fn_: vec![0; classes] }
    }

    fn ensure(&mut self, class: usize) {
        if class >= self.tp.len() {
            self.tp.resize(class + 1, 0);
            self.fp.resize(class + 1, 0);
            self.fn_.resize(class + 1, 0);
        }
    }

    /// Adds one prediction map; ignored pixels are skipped.
    pub fn add(&mut self, preds: &[u8], labels: &[u8]) {
        for (&p, &l) in preds.iter().zip(labels) {
            if l == IGNORE_LABEL {
                continue;
            }
            self.ensure(p.max(l) as usize);
            if p == l {
                self.tp[l as usize] += 1;
            } else {
                self.fn_[l as usize] += 1;
                self.fp[p as usize] += 1;
            }
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    pub fn counts(&self, class: usize) -> (u64, u64, u64) {
        (self.tp[class], self.fp[class], self.fn_[class])
    }

    /// IoU per class (`None` for an empty union) and the mean over the
    /// scored classes, restricted to `include` when given.
    pub fn report(&self, include: Option<&[u8]>) -> Result<IouReport> {
        let per_class: Vec<Option<f64>> = (0..self.classes())
            .map(|c| {
                let union = self.tp[c] + self.fp[c] + self.fn_[c];
                (union > 0).then(|| self.tp[c] as f64 / union as f64)
            })
            .collect();
        let scored: Vec<f64> = per_class
            .iter()
            .enumerate()
            .filter(|(c, _)| include.is_none_or(|inc| inc.contains(&(*c as u8))))
            .filter_map(|(_, v)| *v)
            .collect();
        if scored.is_empty() {
            return Err(Error::UndefinedMetric);
        }
        let miou = scored.iter().sum::<f64>() / scored.len() as f64;
        Ok(IouReport { per_class, miou })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// IoU of prediction maps against label maps over `class_count` classes.
pub fn iou_metrics(preds: &[Vec<u8>], labels: &[Vec<u8>], class_count: usize) -> Result<IouReport> {
    if preds.len() != labels.len() || preds.iter().zip(labels).any(|(p, l)| p.len() != l.len()) {
        return Err(Error::contract("prediction and label maps differ in shape"));
    }
    let mut conf = Confusion::new(class_count);
    for (p, l) in preds.iter().zip(labels) {
        conf.add(p, l);
    }
    conf.report(None)
}

/// Loss and mIoU of one model on one task's test split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitScore {
    pub loss: f64,
    pub miou: f64,
}

/// `log[t][j]` scores the model after task `t` on the test split of task `j <= t`.
pub type EvalLog = Vec<Vec<SplitScore>>;

/// Forgetting of earlier tasks; row `t` holds entries for `j < t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForgettingTable {
    /// Increase of split-`j` loss between the model after task `j` and after task `t`.
    pub loss: Vec<Vec<f64>>,
    /// Drop of split-`j` mIoU (fraction) over the same interval.
    pub miou: Vec<Vec<f64>>,
    /// Row means of `loss`; zero for the first task.
    pub cumulative_loss: Vec<f64>,
    pub cumulative_miou: Vec<f64>,
}

pub fn forgetting(log: &EvalLog) -> Result<ForgettingTable> {
    let mut table = ForgettingTable { loss: Vec::new(), miou: Vec::new(), cumulative_loss: Vec::new(), cumulative_miou: Vec::new() };
    for (t, row) in log.iter().enumerate() {
        if row.len() < t + 1 {
            return Err(Error::contract(format!("evaluation log row {t} has {} of {} splits", row.len(), t + 1)));
        }
        let mut dl = Vec::with_capacity(t);
        let mut dm = Vec::with_capacity(t);
        for j in 0..t {
            dl.push(row[j].loss - log[j][j].loss);
            dm.push(log[j][j].miou - row[j].miou);
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        table.cumulative_loss.push(mean(&dl));
        table.cumulative_miou.push(mean(&dm));
        table.loss.push(dl);
        table.miou.push(dm);
    }
    Ok(table)
}

/// Effect of transplanting each group of a later model into the base model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub base_miou: f64,
    /// mIoU after replacing shallow, deep, head respectively.
    pub replaced_miou: [f64; 3],
    /// Signed mIoU change per group.
    pub delta: [f64; 3],
    /// `delta / sum |delta|`; all zero when `degenerate`.
    pub shares: [f64; 3],
    pub degenerate: bool,
}

impl SensitivityReport {
    pub fn unsigned_shares(&self) -> [f64; 3] {
        self.shares.map(f64::abs)
    }
}

/// Replaces each group of `base` with `later`'s and measures the mIoU
/// change on `test` over the base model's classes.
pub fn layer_sensitivity(base: &SegNet, later: &SegNet, test: &[TerrainSample]) -> Result<SensitivityReport> {
    let classes: Vec<u8> = (0..base.class_count() as u8).collect();
    let score = |net: &SegNet| evaluate(net, test, Some(&classes)).map(|e| e.iou.miou);
    let base_miou = score(base)?;
    let mut replaced = [0.0; 3];
    for g in LayerGroup::ALL {
        replaced[g.index()] = score(&SegNet::replace_group(base, later, g)?)?;
    }
    let delta = replaced.map(|m| m - base_miou);
    let total: f64 = delta.iter().map(|d| d.abs()).sum();
    let degenerate = total == 0.0;
    let shares = if degenerate { [0.0; 3] } else { delta.map(|d| d / total) };
    Ok(SensitivityReport { base_miou, replaced_miou: replaced, delta, shares, degenerate })
}

/// Squared distance between the group gradients of two batches.
pub fn gradient_conflict(net: &SegNet, new_batch: &[&TerrainSample], old_batch: &[&TerrainSample]) -> Result<[f64; 3]> {
    let unlabeled = || Error::contract("conflict batches need labelled pixels");
    let gn = full_gradients(net, new_batch)?.ok_or_else(unlabeled)?;
    let go = full_gradients(net, old_batch)?.ok_or_else(unlabeled)?;
    Ok(LayerGroup::ALL.map(|g| group_sq_distance(&gn, &go, g)))
}

/// Mean squared deviation of per-client full-shard gradients from their average.
pub fn heterogeneity_estimate(shards: &[Vec<TerrainSample>], net: &SegNet) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::contract("heterogeneity needs at least one client"));
    }
    let mut flat = Vec::with_capacity(shards.len());
    for (k, shard) in shards.iter().enumerate() {
        let refs: Vec<&TerrainSample> = shard.iter().collect();
        let grads = full_gradients(net, &refs)?.ok_or_else(|| Error::contract(format!("client {k} has no labelled pixels")))?;
        flat.push(grads.into_iter().flat_map(|t| t.into_data()).collect::<Vec<f64>>());
    }
    let k = flat.len() as f64;
    let dim = flat[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| flat.iter().map(|g| g[i]).sum::<f64>() / k).collect();
    let spread: f64 = flat.iter().map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).sum();
    Ok(spread / k)
}

pub const ROUNDS_HEADER: &str = "task,round,client_count,mean_train_loss,miou_cumulative,per_class_iou_joined,bytes_up,bytes_down";

/// Round log as CSV; excluded classes appear as `-` in the joined IoU column.
pub fn rounds_csv(rounds: &[RoundRecord]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in rounds {
        let joined: Vec<String> = r.per_class_iou.iter().map(|v| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))).collect();
        writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{},{}",
            r.task,
            r.round,
            r.clients.len(),
            r.mean_train_loss,
            r.miou_cumulative,
            joined.join(";"),
            r.bytes_up,
            r.bytes_down
        )
        .expect("string write");
    }
    out
}

pub fn tasks_json(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// mIoU-per-round curve with task boundaries and recovery markers.
pub fn curves_svg(report: &RunReport) -> String {
    let (w, h, pad) = (640.0, 360.0, 48.0);
    let rounds = &report.rounds;
    let n = rounds.len().max(2) as f64;
    let x = |i: usize| pad + (w - 2.0 * pad) * i as f64 / (n - 1.0);
    let y = |m: f64| h - pad - (h - 2.0 * pad) * m.clamp(0.0, 1.0);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<line x1="{pad}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#, h - pad, w - pad, h - pad).unwrap();
    writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{:.2}" stroke="black"/>"#, h - pad).unwrap();
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{tick:.2}</text>"#, pad - 4.0, y(tick) + 3.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">round</text>"#, w / 2.0, h - 12.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.2}" font-size="12" transform="rotate(-90 14 {:.2})" text-anchor="middle">cumulative mIoU</text>"#,
        h / 2.0,
        h / 2.0
    )
    .unwrap();
    for (i, r) in rounds.iter().enumerate() {
        if i > 0 && rounds[i - 1].task != r.task {
            let bx = (x(i - 1) + x(i)) / 2.0;
            writeln!(s, r#"<line x1="{bx:.2}" y1="{pad}" x2="{bx:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/>"#, h - pad)
                .unwrap();
            writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10">task {}</text>"#, bx + 3.0, pad + 10.0, r.task).unwrap();
        }
    }
    let points: Vec<String> = rounds.iter().enumerate().map(|(i, r)| format!("{:.2},{:.2}", x(i), y(r.miou_cumulative))).collect();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
    for task in report.tasks.iter().filter(|t| t.triggered) {
        if let Some(i) = rounds.iter().rposition(|r| r.task == task.task) {
            writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="none" stroke="crimson" stroke-width="2"/>"#,
                x(i),
                y(task.miou_before_recovery)
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, contents: &str) -> Result<PathBuf> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

/// Writes `rounds.csv`, `tasks.json` and optionally `curves.svg` into `dir`.
pub fn emit(dir: &Path, report: &RunReport, svg: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written =
        vec![write(&dir.join("rounds.csv"), &rounds_csv(&report.rounds))?, write(&dir.join("tasks.json"), &tasks_json(report))?];
    if svg {
        written.push(write(&dir.join("curves.svg"), &curves_svg(report))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_example() {
        let r = iou_metrics(&[vec![0, 1, 1, 1]], &[vec![0, 1, 0, 1]], 2).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_excluded_classes() {
        let r = iou_metrics(&[vec![0, 2, 2]], &[vec![0, 2, 2]], 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, Some(1.0), None]);
        assert_eq!(r.miou, 1.0);
        assert!(matches!(iou_metrics(&[vec![0]], &[vec![IGNORE_LABEL]], 2), Err(Error::UndefinedMetric)));
    }

    #[test]
    fn ignored_pixels_count_nowhere() {
        let mut c = Confusion::new(2);
        c.add(&[1, 1], &[IGNORE_LABEL, 1]);
        assert_eq!(c.counts(1), (1, 0, 0));
        assert_eq!(c.counts(0), (0, 0, 0));
    }

    fn score(loss: f64, miou: f64) -> SplitScore {
        SplitScore { loss, miou }
    }

    #[test]
    fn forgetting_arithmetic() {
        let log = vec![vec![score(0.4, 0.8)], vec![score(0.9, 0.5), score(0.3, 0.7)]];
        let t = forgetting(&log).unwrap();
        assert!((t.loss[1][0] - 0.5).abs() < 1e-15);
        assert!((t.miou[1][0] - 0.3).abs() < 1e-15);
        assert_eq!(t.cumulative_loss[0], 0.0);
        assert!(forgetting(&vec![vec![], vec![score(0.0, 0.0)]]).is_err());
    }

    #[test]
    fn three_task_table_matches_hand_computation() {
        let log = vec![
            vec![score(0.2, 0.90)],
            vec![score(0.5, 0.70), score(0.3, 0.80)],
            vec![score(0.9, 0.40), score(0.6, 0.60), score(0.1, 0.95)],
        ];
        let t = forgetting(&log).unwrap();
        assert!((t.loss[2][0] - 0.7).abs() < 1e-12);
        assert!((t.loss[2][1] - 0.3).abs() < 1e-12);
        assert!((t.cumulative_loss[2] - 0.5).abs() < 1e-12);
        assert!((t.miou[2][0] - 0.5).abs() < 1e-12);
        assert!((t.miou[2][1] - 0.2).abs() < 1e-12);
        assert!((t.cumulative_miou[2] - 0.35).abs() < 1e-12);
        assert!((t.cumulative_miou[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn empty_round_log_is_header_only() {
        assert_eq!(rounds_csv(&[]), format!("{ROUNDS_HEADER}\n"));
    }
}
