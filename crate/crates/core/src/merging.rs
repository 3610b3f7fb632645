//! Updatable merging of coarse masks into instances.
//!
//! Two coarse masks `n` and `j` are similar when the dot product of their
//! score-table columns exceeds `max(1, |F_n| / tau)`. A merged group carries
//! the elementwise sum of its members' columns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::overlap::{CoarseMask, OverlapScoreTable};

pub const DEFAULT_TAU: f64 = 0.45;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnNorm {
    #[default]
    L1,
    L2,
    NonzeroCount,
}

impl std::str::FromStr for ColumnNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(ColumnNorm::L1),
            "l2" => Ok(ColumnNorm::L2),
            "nonzero" | "nonzero_count" | "nonzero-count" => Ok(ColumnNorm::NonzeroCount),
            other => Err(Error::Config(format!("unknown column norm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub tau: f64,
    pub column_norm: ColumnNorm,
    /// `None` means one pass per coarse mask, which always reaches the fixpoint.
    pub max_passes: Option<usize>,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            tau: DEFAULT_TAU,
            column_norm: ColumnNorm::L1,
            max_passes: None,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!(
                "tau must be in (0, 1], got {}",
                self.tau
            )));
        }
        if self.max_passes == Some(0) {
            return Err(Error::Config("max_passes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: usize,
    pub point_indices: Vec<u32>,
    /// Coarse mask ids, first member first.
    pub composition: Vec<usize>,
    pub label: Option<String>,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub instances: Vec<Instance>,
    /// Passes run, including the final pass that found nothing to merge.
    pub passes: usize,
}

fn dot(a: &[u64], b: &[u64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn norm(column: &[u64], kind: ColumnNorm) -> f64 {
    match kind {
        ColumnNorm::L1 => column.iter().map(|&v| v as f64).sum(),
        ColumnNorm::L2 => column.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt(),
        ColumnNorm::NonzeroCount => column.iter().filter(|&&v| v > 0).count() as f64,
    }
}

/// `TS_n[j] = F_n . F_j` for every column `j` of the table.
pub fn similarity_scores(table: &OverlapScoreTable, n: usize) -> Result<Vec<f64>> {
    if n >= table.cols() {
        return Err(Error::InvalidArgument(format!(
            "column {n} out of range for {} prompts",
            table.cols()
        )));
    }
    let columns = columns_of(table);
    Ok(columns.iter().map(|c| dot(&columns[n], c)).collect())
}

/// `max(1, |F_n| / tau)` under the chosen column norm.
pub fn merge_threshold(column: &[u64], tau: f64, column_norm: ColumnNorm) -> f64 {
    (norm(column, column_norm) / tau).max(1.0)
}

fn columns_of(table: &OverlapScoreTable) -> Vec<Vec<u64>> {
    (0..table.cols())
        .map(|n| table.column(n).into_iter().map(u64::from).collect())
        .collect()
}

struct Group {
    column: Vec<u64>,
    composition: Vec<usize>,
    points: Vec<u32>,
}

/// Merges coarse masks until no group sees another above its threshold.
///
/// Groups are keyed by their smallest coarse-mask id and visited in
/// ascending order. The visiting group compares its current column against
/// every other current group and absorbs all that exceed its threshold;
/// the merged group sums the columns and keeps the smallest id. Passes
/// repeat until one performs no merge or `max_passes` is reached.
pub fn merge_coarse_masks(
    table: &OverlapScoreTable,
    coarse_masks: &[CoarseMask],
    config: &MergeConfig,
) -> Result<MergeOutcome> {
    config.validate()?;
    let columns = columns_of(table);
    let mut groups: BTreeMap<usize, Group> = BTreeMap::new();
    for cm in coarse_masks {
        let column = columns.get(cm.id).cloned().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "coarse mask {} has no column in a table with {} prompts",
                cm.id,
                table.cols()
            ))
        })?;
        if groups
            .insert(
                cm.id,
                Group {
                    column,
                    composition: vec![cm.id],
                    points: cm.point_indices.clone(),
                },
            )
            .is_some()
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate coarse mask id {}",
                cm.id
            )));
        }
    }

    let max_passes = config.max_passes.unwrap_or(coarse_masks.len()).max(1);
    let mut passes = 0;
    while passes < max_passes {
        passes += 1;
        let mut merged_any = false;
        let anchors: Vec<usize> = groups.keys().copied().collect();
        for anchor in anchors {
            let Some(group) = groups.get(&anchor) else {
                continue;
            };
            let threshold = merge_threshold(&group.column, config.tau, config.column_norm);
            let absorbed: Vec<usize> = groups
                .iter()
                .filter(|(&j, g)| j != anchor && dot(&group.column, &g.column) > threshold)
                .map(|(&j, _)| j)
                .collect();
            if absorbed.is_empty() {
                continue;
            }
            merged_any = true;
            let mut ids = absorbed;
            ids.push(anchor);
            ids.sort_unstable();
            let mut parts = ids.iter().map(|id| groups.remove(id).expect("live group"));
            let mut merged = parts.next().expect("at least two groups");
            for part in parts {
                for (a, b) in merged.column.iter_mut().zip(&part.column) {
                    *a += b;
                }
                merged.composition.extend(part.composition);
                merged.points.extend(part.points);
            }
            groups.insert(ids[0], merged);
        }
        if !merged_any {
            break;
        }
    }

    let instances = groups
        .into_values()
        .enumerate()
        .map(|(id, mut g)| {
            g.points.sort_unstable();
            g.points.dedup();
            Instance {
                id,
                point_indices: g.points,
                composition: g.composition,
                label: None,
                confidence: None,
            }
        })
        .collect();
    Ok(MergeOutcome { instances, passes })
}

/// Ordered pairs of instances `(a, b)` whose summed columns still satisfy
/// `TS > max(1, |F_a| / tau)`. Empty at a fixpoint.
pub fn fixpoint_violations(
    table: &OverlapScoreTable,
    instances: &[Instance],
    config: &MergeConfig,
) -> Vec<(usize, usize)> {
    let columns = columns_of(table);
    let summed: Vec<Vec<u64>> = instances
        .iter()
        .map(|inst| {
            let mut col = vec![0u64; table.rows()];
            for &c in &inst.composition {
                for (a, b) in col.iter_mut().zip(&columns[c]) {
                    *a += b;
                }
            }
            col
        })
        .collect();
    let mut out = Vec::new();
    for (a, ca) in summed.iter().enumerate() {
        let threshold = merge_threshold(ca, config.tau, config.column_norm);
        for (b, cb) in summed.iter().enumerate() {
            if a != b && dot(ca, cb) > threshold {
                out.push((a, b));
            }
        }
    }
    out
}
