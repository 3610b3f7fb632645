//! Class-aware average precision over point-index instances.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn ap_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub point_indices: Vec<u32>,
    pub label: Option<String>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub label: String,
    pub point_indices: Vec<u32>,
}

fn sorted_unique(v: &[u32]) -> Vec<u32> {
    let mut v = v.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

fn intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// `|a ∩ b| / |a ∪ b|` of two point-index sets.
pub fn iou(a: &[u32], b: &[u32]) -> Result<f64> {
    let (a, b) = (sorted_unique(a), sorted_unique(b));
    if a.is_empty() && b.is_empty() {
        return Err(Error::InvalidArgument("IoU of two empty sets".into()));
    }
    Ok(iou_sorted(&a, &b))
}

fn iou_sorted(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection_len(a, b);
    inter as f64 / (a.len() + b.len() - inter) as f64
}

/// Order in which predictions are matched: confidence descending, then
/// larger point set, then input order.
pub fn ranking(preds: &[&PredictionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then(preds[b].point_indices.len().cmp(&preds[a].point_indices.len()))
            .then(a.cmp(&b))
    });
    order
}

/// Area under the all-point interpolated precision-recall curve of a
/// ranked TP/FP sequence.
pub fn ap_from_hits(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        area += (r - prev_recall) * p;
        prev_recall = *r;
    }
    area
}

/// IoU of every (ranked prediction, GT) pair.
struct LabelCase {
    ious: Vec<Vec<f64>>,
    num_gt: usize,
}

impl LabelCase {
    fn new(preds: &[&PredictionRecord], gts: &[&GtInstance]) -> Self {
        let gt_sets: Vec<Vec<u32>> = gts.iter().map(|g| sorted_unique(&g.point_indices)).collect();
        let ious = ranking(preds)
            .into_iter()
            .map(|p| {
                let ps = sorted_unique(&preds[p].point_indices);
                gt_sets.iter().map(|g| iou_sorted(&ps, g)).collect()
            })
            .collect();
        LabelCase {
            ious,
            num_gt: gts.len(),
        }
    }

    /// Greedy matching: each prediction takes the unmatched GT with the
    /// highest IoU at or above the threshold, ties to the lower GT index.
    fn hits(&self, iou_thresh: f64) -> Vec<bool> {
        let mut taken = vec![false; self.num_gt];
        self.ious
            .iter()
            .map(|row| {
                let mut best: Option<(usize, f64)> = None;
                for (g, &v) in row.iter().enumerate() {
                    if !taken[g] && v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                match best {
                    Some((g, _)) => {
                        taken[g] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect()
    }

    fn ap(&self, iou_thresh: f64) -> f64 {
        ap_from_hits(&self.hits(iou_thresh), self.num_gt)
    }
}

/// AP of one class: `preds` and `gts` all carry the same label.
pub fn label_average_precision(
    preds: &[&PredictionRecord],
    gts: &[&GtInstance],
    iou_thresh: f64,
) -> Result<f64> {
    check_threshold(iou_thresh)?;
    Ok(LabelCase::new(preds, gts).ap(iou_thresh))
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "IoU threshold must be in (0, 1], got {t}"
        )))
    }
}

fn fold(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Mean per-label AP at one IoU threshold over labels that have GT.
/// `None` when there is no GT at all.
pub fn average_precision(
    preds: &[PredictionRecord],
    gts: &[GtInstance],
    iou_thresh: f64,
) -> Result<Option<f64>> {
    check_threshold(iou_thresh)?;
    let cases = label_cases(preds, gts);
    if cases.is_empty() {
        return Ok(None);
    }
    let sum: f64 = cases.values().map(|c| c.ap(iou_thresh)).sum();
    Ok(Some(sum / cases.len() as f64))
}

fn label_cases(preds: &[PredictionRecord], gts: &[GtInstance]) -> BTreeMap<String, LabelCase> {
    let mut gt_by: BTreeMap<String, Vec<&GtInstance>> = BTreeMap::new();
    for g in gts {
        gt_by.entry(fold(&g.label)).or_default().push(g);
    }
    let mut pred_by: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
    for p in preds {
        if let Some(l) = &p.label {
            pred_by.entry(fold(l)).or_default().push(p);
        }
    }
    let labels: Vec<(String, Vec<&GtInstance>)> = gt_by.into_iter().collect();
    labels
        .into_par_iter()
        .map(|(label, g)| {
            let p = pred_by.get(&label).map(Vec::as_slice).unwrap_or(&[]);
            let case = LabelCase::new(p, &g);
            (label, case)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApTriple {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    #[serde(flatten)]
    pub scores: ApTriple,
    pub gt_count: usize,
    pub prediction_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    #[serde(flatten)]
    pub scores: ApTriple,
    pub label_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap25: Option<f64>,
    pub per_label: BTreeMap<String, LabelMetrics>,
    pub per_group: BTreeMap<String, GroupMetrics>,
    /// Fraction of GT points covered by any prediction, labeled or not.
    pub coverage: Option<f64>,
    pub unlabeled_predictions: usize,
}

fn mean_triple<'a>(items: impl Iterator<Item = &'a ApTriple>) -> Option<ApTriple> {
    let mut n = 0usize;
    let mut acc = ApTriple {
        ap: 0.0,
        ap50: 0.0,
        ap25: 0.0,
    };
    for t in items {
        n += 1;
        acc.ap += t.ap;
        acc.ap50 += t.ap50;
        acc.ap25 += t.ap25;
    }
    (n > 0).then(|| ApTriple {
        ap: acc.ap / n as f64,
        ap50: acc.ap50 / n as f64,
        ap25: acc.ap25 / n as f64,
    })
}

/// Full report. `groups` maps a label to its group name; labels without a
/// group are left out of the group means.
pub fn evaluate(
    preds: &[PredictionRecord],
    gts: &[GtInstance],
    groups: Option<&BTreeMap<String, String>>,
) -> MetricsReport {
    let cases = label_cases(preds, gts);
    let mut pred_counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in preds {
        if let Some(l) = &p.label {
            *pred_counts.entry(fold(l)).or_default() += 1;
        }
    }
    let thresholds = ap_thresholds();
    let per_label: BTreeMap<String, LabelMetrics> = cases
        .iter()
        .map(|(label, case)| {
            let ap = thresholds.iter().map(|&t| case.ap(t)).sum::<f64>() / thresholds.len() as f64;
            (
                label.clone(),
                LabelMetrics {
                    scores: ApTriple {
                        ap,
                        ap50: case.ap(0.5),
                        ap25: case.ap(0.25),
                    },
                    gt_count: case.num_gt,
                    prediction_count: pred_counts.get(label).copied().unwrap_or(0),
                },
            )
        })
        .collect();

    let overall = mean_triple(per_label.values().map(|m| &m.scores));
    let mut per_group = BTreeMap::new();
    if let Some(groups) = groups {
        let folded: BTreeMap<String, &String> = groups.iter().map(|(l, g)| (fold(l), g)).collect();
        let names: BTreeSet<&String> = folded.values().copied().collect();
        for name in names {
            let members: Vec<&ApTriple> = per_label
                .iter()
                .filter(|(l, _)| folded.get(*l) == Some(&name))
                .map(|(_, m)| &m.scores)
                .collect();
            if let Some(scores) = mean_triple(members.iter().copied()) {
                per_group.insert(
                    name.clone(),
                    GroupMetrics {
                        scores,
                        label_count: members.len(),
                    },
                );
            }
        }
    }

    let gt_points: BTreeSet<u32> = gts.iter().flat_map(|g| g.point_indices.iter().copied()).collect();
    let coverage = (!gt_points.is_empty()).then(|| {
        let predicted: BTreeSet<u32> =
            preds.iter().flat_map(|p| p.point_indices.iter().copied()).collect();
        gt_points.intersection(&predicted).count() as f64 / gt_points.len() as f64
    });

    MetricsReport {
        ap: overall.map(|t| t.ap),
        ap50: overall.map(|t| t.ap50),
        ap25: overall.map(|t| t.ap25),
        per_label,
        per_group,
        coverage,
        unlabeled_predictions: preds.iter().filter(|p| p.label.is_none()).count(),
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.3}", x))
}

impl MetricsReport {
    /// Plain-text table with one row per label, then groups, then the mean.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![[
            "label".into(),
            "AP".into(),
            "AP50".into(),
            "AP25".into(),
        ]];
        for (label, m) in &self.per_label {
            rows.push([
                label.clone(),
                cell(Some(m.scores.ap)),
                cell(Some(m.scores.ap50)),
                cell(Some(m.scores.ap25)),
            ]);
        }
        for (name, g) in &self.per_group {
            rows.push([
                format!("[{name}]"),
                cell(Some(g.scores.ap)),
                cell(Some(g.scores.ap50)),
                cell(Some(g.scores.ap25)),
            ]);
        }
        rows.push(["mean".into(), cell(self.ap), cell(self.ap50), cell(self.ap25)]);
        let width = rows.iter().map(|r| r[0].chars().count()).max().unwrap_or(5);
        let mut out = String::new();
        for r in &rows {
            let _ = writeln!(out, "{:<width$}  {:>6}  {:>6}  {:>6}", r[0], r[1], r[2], r[3]);
        }
        let _ = writeln!(out, "coverage  {}", cell(self.coverage));
        out
    }
}
