//! The overlapping score table and coarse-mask assembly.
//!
//! `F[m][n]` counts the views `t` of prompt `n` whose back-projected mask
//! covers more than `theta` of superpoint `m`. Each superpoint then joins the
//! prompt with the largest score in its row.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BackProjection;
use crate::mask::CropBox;
use crate::superpoints::Superpoint;

pub const DEFAULT_THETA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapScoreTable {
    rows: usize,
    cols: usize,
    values: Vec<u32>,
}

impl OverlapScoreTable {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        OverlapScoreTable {
            rows,
            cols,
            values: vec![0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged score table rows".into()));
        }
        Ok(OverlapScoreTable {
            rows: rows.len(),
            cols,
            values: rows.concat(),
        })
    }

    /// Number of superpoints (M).
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of prompts (N).
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, m: usize, n: usize) -> u32 {
        self.values[m * self.cols + n]
    }

    #[inline]
    fn get_mut(&mut self, m: usize, n: usize) -> &mut u32 {
        &mut self.values[m * self.cols + n]
    }

    pub fn row(&self, m: usize) -> &[u32] {
        &self.values[m * self.cols..(m + 1) * self.cols]
    }

    pub fn column(&self, n: usize) -> Vec<u32> {
        (0..self.rows).map(|m| self.get(m, n)).collect()
    }

    /// Elementwise sum with another table of the same shape.
    pub fn add(&mut self, other: &OverlapScoreTable) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// Dense CSV, one superpoint per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let header: Vec<String> = (0..self.cols).map(|n| format!("prompt_{n}")).collect();
        writeln!(out, "superpoint,{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for m in 0..self.rows {
            let row: Vec<String> = self.row(m).iter().map(u32::to_string).collect();
            writeln!(out, "{m},{}", row.join(",")).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// `|S ∩ BP| / |S|` for sorted index sets.
pub fn overlap_ratio(superpoint: &[u32], back_projection: &[u32]) -> Result<f64> {
    if superpoint.is_empty() {
        return Err(Error::InvalidArgument("empty superpoint".into()));
    }
    let mut hits = 0usize;
    let (mut i, mut j) = (0, 0);
    while i < superpoint.len() && j < back_projection.len() {
        match superpoint[i].cmp(&back_projection[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                hits += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(hits as f64 / superpoint.len() as f64)
}

/// Superpoints (row indices) whose overlap with one back-projection exceeds `theta`.
fn rows_above(
    owner: &[u32],
    sizes: &[usize],
    back_projection: &[u32],
    theta: f64,
) -> Vec<usize> {
    let mut hit_rows: Vec<u32> = back_projection
        .iter()
        .filter_map(|&p| owner.get(p as usize).copied())
        .filter(|&m| m != u32::MAX)
        .collect();
    hit_rows.sort_unstable();
    let mut out = Vec::new();
    for run in hit_rows.chunk_by(|a, b| a == b) {
        let m = run[0] as usize;
        if run.len() as f64 / sizes[m] as f64 > theta {
            out.push(m);
        }
    }
    out
}

/// Builds the M x N overlap score table. Rows follow the order of
/// `superpoints`, columns are `prompt_id`s in `0..num_prompts`.
///
/// Each `(prompt, view)` pair is expected once; back-projections are processed
/// in parallel and their increments summed, so the result does not depend on
/// evaluation order.
pub fn build_score_table(
    superpoints: &[Superpoint],
    back_projections: &[BackProjection],
    num_prompts: usize,
    theta: f64,
) -> Result<OverlapScoreTable> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!(
            "theta must be in [0, 1), got {theta}"
        )));
    }
    if let Some(bp) = back_projections.iter().find(|bp| bp.prompt_id >= num_prompts) {
        return Err(Error::InvalidArgument(format!(
            "back-projection references prompt {} of {num_prompts}",
            bp.prompt_id
        )));
    }
    if superpoints.iter().any(|s| s.point_indices.is_empty()) {
        return Err(Error::InvalidArgument("empty superpoint".into()));
    }
    let span = superpoints
        .iter()
        .flat_map(|s| s.point_indices.last())
        .max()
        .map_or(0, |&m| m as usize + 1);
    let mut owner = vec![u32::MAX; span];
    for (m, sp) in superpoints.iter().enumerate() {
        for &p in &sp.point_indices {
            owner[p as usize] = m as u32;
        }
    }
    let sizes: Vec<usize> = superpoints.iter().map(Superpoint::size).collect();

    let increments: Vec<(usize, Vec<usize>)> = back_projections
        .par_iter()
        .map(|bp| {
            (
                bp.prompt_id,
                rows_above(&owner, &sizes, &bp.point_indices, theta),
            )
        })
        .collect();

    let mut table = OverlapScoreTable::zeros(superpoints.len(), num_prompts);
    for (n, rows) in increments {
        for m in rows {
            *table.get_mut(m, n) += 1;
        }
    }
    Ok(table)
}

/// One segmentation of a prompt in one view, kept for labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub frame_id: u32,
    pub mask_pixels: usize,
    pub back_projected: usize,
    pub crop: Option<CropBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarseMask {
    /// Origin prompt, which is also this mask's column in the score table.
    pub id: usize,
    pub point_indices: Vec<u32>,
    pub member_superpoints: Vec<usize>,
    pub view_masks: Vec<ViewRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseAssembly {
    /// Non-empty coarse masks in ascending prompt order.
    pub masks: Vec<CoarseMask>,
    /// Superpoint rows with an all-zero score row (background).
    pub unassigned: Vec<usize>,
    /// Prompt columns no superpoint chose.
    pub dropped_prompts: Vec<usize>,
}

/// Row argmax (ties to the lower prompt) assigns each superpoint to a prompt.
///
/// `prompt_views` may be empty; otherwise it must hold one entry per prompt
/// column and is copied into the matching coarse masks.
pub fn assemble_coarse_masks(
    table: &OverlapScoreTable,
    superpoints: &[Superpoint],
    prompt_views: &[Vec<ViewRecord>],
) -> Result<CoarseAssembly> {
    if table.rows() != superpoints.len() {
        return Err(Error::InvalidArgument(format!(
            "table has {} rows for {} superpoints",
            table.rows(),
            superpoints.len()
        )));
    }
    if !prompt_views.is_empty() && prompt_views.len() != table.cols() {
        return Err(Error::InvalidArgument(format!(
            "{} view lists for {} prompts",
            prompt_views.len(),
            table.cols()
        )));
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); table.cols()];
    let mut unassigned = Vec::new();
    for m in 0..table.rows() {
        let row = table.row(m);
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .filter(|(_, &v)| v > 0)
            .map(|(n, _)| n);
        match best {
            Some(n) => members[n].push(m),
            None => unassigned.push(m),
        }
    }

    let mut masks = Vec::new();
    let mut dropped_prompts = Vec::new();
    for (n, member_superpoints) in members.into_iter().enumerate() {
        if member_superpoints.is_empty() {
            dropped_prompts.push(n);
            continue;
        }
        let mut point_indices: Vec<u32> = member_superpoints
            .iter()
            .flat_map(|&m| superpoints[m].point_indices.iter().copied())
            .collect();
        point_indices.sort_unstable();
        masks.push(CoarseMask {
            id: n,
            point_indices,
            member_superpoints,
            view_masks: prompt_views.get(n).cloned().unwrap_or_default(),
        });
    }
    Ok(CoarseAssembly {
        masks,
        unassigned,
        dropped_prompts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn sp(id: usize, idx: &[u32]) -> Superpoint {
        Superpoint {
            id,
            point_indices: idx.to_vec(),
        }
    }

    fn bp(n: usize, t: u32, idx: &[u32]) -> BackProjection {
        BackProjection {
            prompt_id: n,
            view_id: t,
            point_indices: idx.to_vec(),
        }
    }

    #[test]
    fn ratios() {
        assert_eq!(overlap_ratio(&[1, 2, 3, 4], &[2, 3]).unwrap(), 0.5);
        assert_eq!(overlap_ratio(&[1, 2], &[3, 4]).unwrap(), 0.0);
        assert_eq!(overlap_ratio(&[1, 2], &[0, 1, 2, 9]).unwrap(), 1.0);
        assert!(overlap_ratio(&[], &[1]).is_err());
    }

    /// Literal triple loop over (n, t, m) with explicit set intersection.
    fn oracle(
        sps: &[Superpoint],
        bps: &[BackProjection],
        n_prompts: usize,
        theta: f64,
    ) -> Vec<Vec<u32>> {
        let mut f = vec![vec![0u32; n_prompts]; sps.len()];
        for n in 0..n_prompts {
            for b in bps.iter().filter(|b| b.prompt_id == n) {
                let bset: BTreeSet<u32> = b.point_indices.iter().copied().collect();
                for (m, s) in sps.iter().enumerate() {
                    let inter = s.point_indices.iter().filter(|p| bset.contains(p)).count();
                    if inter as f64 / s.point_indices.len() as f64 > theta {
                        f[m][n] += 1;
                    }
                }
            }
        }
        f
    }

    #[test]
    fn small_instance_matches_triple_loop() {
        let sps = [sp(0, &[0, 1, 2, 3]), sp(1, &[4, 5]), sp(2, &[6, 7, 8])];
        let bps = [
            bp(0, 0, &[0, 1, 2, 4]),
            bp(0, 1, &[1, 2, 3, 5, 6]),
            bp(1, 0, &[4, 5, 6, 7]),
            bp(1, 1, &[8]),
        ];
        let table = build_score_table(&sps, &bps, 2, 0.3).unwrap();
        let expect = oracle(&sps, &bps, 2, 0.3);
        assert_eq!(table, OverlapScoreTable::from_rows(&expect).unwrap());
        // frozen: computed by the oracle above
        assert_eq!(expect, vec![vec![2, 0], vec![2, 1], vec![1, 2]]);
    }

    #[test]
    fn threshold_edges() {
        let sps = [sp(0, &[0, 1]), sp(1, &[2, 3])];
        let bps = [bp(0, 0, &[0, 1, 2]), bp(0, 1, &[0])];
        let high = build_score_table(&sps, &bps, 1, 0.99).unwrap();
        assert_eq!(high.column(0), vec![1, 0]);
        let sps2 = [sp(0, &[0, 1, 2]), sp(1, &[3, 4, 5])];
        let none = build_score_table(&sps2, &[bp(0, 0, &[0, 3])], 1, 0.99).unwrap();
        assert_eq!(none.column(0), vec![0, 0]);
        let zero = build_score_table(&sps, &bps, 1, 0.0).unwrap();
        assert_eq!(zero.column(0), vec![2, 1]);
        assert!(build_score_table(&sps, &bps, 1, 1.0).is_err());
        assert!(build_score_table(&sps, &bps, 0, 0.3).is_err());
    }

    #[test]
    fn argmax_rules() {
        let table = OverlapScoreTable::from_rows(&[vec![0, 3, 1], vec![0, 0, 0], vec![2, 2, 0]])
            .unwrap();
        let sps = [sp(0, &[0, 1]), sp(1, &[2]), sp(2, &[3, 4])];
        let a = assemble_coarse_masks(&table, &sps, &[]).unwrap();
        assert_eq!(a.unassigned, vec![1]);
        assert_eq!(a.dropped_prompts, vec![2]);
        assert_eq!(a.masks.len(), 2);
        assert_eq!((a.masks[0].id, &a.masks[0].member_superpoints), (0, &vec![2]));
        assert_eq!((a.masks[1].id, &a.masks[1].point_indices), (1, &vec![0, 1]));
        assert!(assemble_coarse_masks(&table, &sps[..2], &[]).is_err());
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<Superpoint>, Vec<BackProjection>, usize)> {
        (1usize..=20, 1usize..=5, 1u32..=3).prop_flat_map(|(m, n, t)| {
            let sizes = proptest::collection::vec(1usize..6, m);
            let bps = proptest::collection::vec(proptest::collection::btree_set(0u32..120, 0..40), n * t as usize);
            (sizes, bps).prop_map(move |(sizes, raw)| {
                let mut next = 0u32;
                let sps = sizes
                    .iter()
                    .enumerate()
                    .map(|(id, &s)| {
                        let idx: Vec<u32> = (next..next + s as u32).collect();
                        next += s as u32;
                        Superpoint { id, point_indices: idx }
                    })
                    .collect();
                let bps = raw
                    .into_iter()
                    .enumerate()
                    .map(|(k, set)| BackProjection {
                        prompt_id: k / t as usize,
                        view_id: (k % t as usize) as u32,
                        point_indices: set.into_iter().collect(),
                    })
                    .collect();
                (sps, bps, n)
            })
        })
    }

    proptest! {
        #[test]
        fn table_equals_oracle((sps, bps, n) in arb_instance(), theta in prop::sample::select(vec![0.0, 0.3, 0.7])) {
            let table = build_score_table(&sps, &bps, n, theta).unwrap();
            prop_assert_eq!(&table, &OverlapScoreTable::from_rows(&oracle(&sps, &bps, n, theta)).unwrap());
            let mut rev = bps.clone();
            rev.reverse();
            prop_assert_eq!(&table, &build_score_table(&sps, &rev, n, theta).unwrap());
            for p in 0..n {
                let views = bps.iter().filter(|b| b.prompt_id == p).count() as u32;
                prop_assert!(table.column(p).iter().all(|&v| v <= views));
            }
            let a = assemble_coarse_masks(&table, &sps, &[]).unwrap();
            let mut covered = BTreeSet::new();
            for cm in &a.masks {
                for &p in &cm.point_indices {
                    prop_assert!(covered.insert(p));
                }
            }
            let assigned: BTreeSet<u32> = (0..sps.len())
                .filter(|m| !a.unassigned.contains(m))
                .flat_map(|m| sps[m].point_indices.clone())
                .collect();
            prop_assert_eq!(covered, assigned);
        }
    }
}
