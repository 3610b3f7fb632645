//! Geometric over-segmentation into superpoints and prompt selection.
//!
//! Points are connected by mesh edges when the scene carries them, otherwise
//! by a symmetric k-NN graph. Edge weights measure normal disagreement,
//! `1 - |n_i . n_j|`, and the graph is segmented with the
//! Felzenszwalb-Huttenlocher merge criterion followed by a minimum-size pass.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsu::DisjointSets;
use crate::error::{Error, Result};
use crate::knn::k_nearest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuperpointConfig {
    pub k_nn: usize,
    pub k_fh: f64,
    pub min_size: usize,
}

impl Default for SuperpointConfig {
    fn default() -> Self {
        SuperpointConfig {
            k_nn: 10,
            k_fh: 0.05,
            min_size: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Superpoint {
    pub id: usize,
    /// Sorted point indices.
    pub point_indices: Vec<u32>,
}

impl Superpoint {
    pub fn size(&self) -> usize {
        self.point_indices.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    pub node_count: usize,
    /// Undirected, deduplicated, `i < j`.
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone)]
pub struct Normals {
    pub normals: Vec<Vector3<f64>>,
    /// Points whose neighborhood was rank-deficient and got the `+z` fallback.
    pub degenerate: Vec<bool>,
}

fn canonical_sign(mut n: Vector3<f64>) -> Vector3<f64> {
    let max = n.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    // first component within rounding of the largest magnitude decides the sign
    if let Some(c) = n.iter().find(|c| c.abs() >= max - 1e-9) {
        if *c < 0.0 {
            n = -n;
        }
    }
    n
}

fn normal_from_neighborhood(points: &[Point3<f64>], idx: impl Iterator<Item = usize> + Clone) -> Option<Vector3<f64>> {
    let count = idx.clone().count() as f64;
    let mean = idx.clone().fold(Vector3::zeros(), |acc, i| acc + points[i].coords) / count;
    let cov = idx.fold(Matrix3::zeros(), |acc, i| {
        let d = points[i].coords - mean;
        acc + d * d.transpose()
    }) / count;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(hi > 0.0) || mid <= 1e-12 * hi || !lo.is_finite() {
        return None;
    }
    let n = eig.eigenvectors.column(order[0]).into_owned();
    let norm = n.norm();
    (norm > 0.0).then(|| canonical_sign(n / norm))
}

/// PCA normals over each point and its `k_nn - 1` nearest neighbors.
pub fn estimate_normals(points: &[Point3<f64>], k_nn: usize) -> Result<Normals> {
    if k_nn < 3 {
        return Err(Error::InvalidArgument("k_nn must be >= 3 for normals".into()));
    }
    if points.len() < k_nn {
        return Err(Error::InvalidArgument(format!(
            "{} points is fewer than k_nn = {k_nn}",
            points.len()
        )));
    }
    let neighbors = k_nearest(points, k_nn - 1);
    let (normals, degenerate) = neighbors
        .par_iter()
        .enumerate()
        .map(|(i, nb)| {
            let idx = std::iter::once(i).chain(nb.iter().map(|&j| j as usize));
            match normal_from_neighborhood(points, idx) {
                Some(n) => (n, false),
                None => (Vector3::z(), true),
            }
        })
        .unzip();
    Ok(Normals {
        normals,
        degenerate,
    })
}

/// Normals that tolerate tiny scenes: falls back to `+z` everywhere when
/// there are fewer than three points.
pub fn estimate_normals_lenient(points: &[Point3<f64>], k_nn: usize) -> Normals {
    let k = k_nn.max(3).min(points.len());
    match estimate_normals(points, k) {
        Ok(n) => n,
        Err(_) => Normals {
            normals: vec![Vector3::z(); points.len()],
            degenerate: vec![true; points.len()],
        },
    }
}

/// Adjacency graph weighted by `1 - |n_i . n_j|`.
pub fn build_graph(
    points: &[Point3<f64>],
    mesh_edges: Option<&[(u32, u32)]>,
    normals: &[Vector3<f64>],
    k_nn: usize,
) -> Result<WeightedGraph> {
    if k_nn == 0 {
        return Err(Error::InvalidArgument("k_nn must be >= 1".into()));
    }
    let pairs: BTreeSet<(u32, u32)> = match mesh_edges {
        Some(edges) => edges
            .iter()
            .filter(|(a, b)| a != b)
            .map(|&(a, b)| (a.min(b), a.max(b)))
            .collect(),
        None => k_nearest(points, k_nn)
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| {
                let i = i as u32;
                nb.iter().map(move |&j| (i.min(j), i.max(j)))
            })
            .collect(),
    };
    let edges = pairs
        .into_iter()
        .map(|(i, j)| {
            let dot = normals[i as usize].dot(&normals[j as usize]).abs().min(1.0);
            Edge {
                i,
                j,
                weight: 1.0 - dot,
            }
        })
        .collect();
    Ok(WeightedGraph {
        node_count: points.len(),
        edges,
    })
}

/// Felzenszwalb-Huttenlocher segmentation of `graph`.
///
/// Components still smaller than `min_size` after the size pass (isolated
/// fragments) are background and do not appear in the output. Superpoints
/// are ordered by descending size, ties by smallest member index, and
/// numbered in that order.
pub fn segment_superpoints(
    graph: &WeightedGraph,
    k_fh: f64,
    min_size: usize,
) -> Result<Vec<Superpoint>> {
    if !(k_fh > 0.0) {
        return Err(Error::InvalidArgument("k_fh must be > 0".into()));
    }
    if min_size == 0 {
        return Err(Error::InvalidArgument("min_size must be >= 1".into()));
    }
    let mut edges = graph.edges.clone();
    edges.sort_by(|a, b| {
        a.weight
            .total_cmp(&b.weight)
            .then(a.i.cmp(&b.i))
            .then(a.j.cmp(&b.j))
    });

    let n = graph.node_count;
    let mut sets = DisjointSets::new(n);
    let mut internal = vec![0.0f64; n];
    for e in &edges {
        let a = sets.find(e.i as usize);
        let b = sets.find(e.j as usize);
        if a == b {
            continue;
        }
        let ta = internal[a] + k_fh / sets.size_of_root(a) as f64;
        let tb = internal[b] + k_fh / sets.size_of_root(b) as f64;
        if e.weight <= ta.min(tb) {
            let r = sets.union(a, b);
            internal[r] = e.weight;
        }
    }
    for e in &edges {
        let a = sets.find(e.i as usize);
        let b = sets.find(e.j as usize);
        if a != b && (sets.size_of_root(a) < min_size || sets.size_of_root(b) < min_size) {
            sets.union(a, b);
        }
    }

    let mut groups: Vec<Vec<u32>> = vec![Vec::new(); n];
    for v in 0..n {
        let r = sets.find(v);
        groups[r].push(v as u32);
    }
    let mut groups: Vec<Vec<u32>> = groups
        .into_iter()
        .filter(|g| !g.is_empty() && g.len() >= min_size)
        .collect();
    groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, point_indices)| Superpoint { id, point_indices })
        .collect())
}

/// The `n` largest superpoints (ties to lower id), largest first.
pub fn select_prompts(superpoints: &[Superpoint], n: usize) -> Result<Vec<Superpoint>> {
    if n == 0 {
        return Err(Error::InvalidArgument("number of prompts must be >= 1".into()));
    }
    let mut order: Vec<&Superpoint> = superpoints.iter().collect();
    order.sort_by(|a, b| b.size().cmp(&a.size()).then(a.id.cmp(&b.id)));
    Ok(order.into_iter().take(n).cloned().collect())
}

/// Normals, graph and segmentation in one call.
pub fn compute_superpoints(
    points: &[Point3<f64>],
    mesh_edges: Option<&[(u32, u32)]>,
    config: &SuperpointConfig,
) -> Result<Vec<Superpoint>> {
    let normals = estimate_normals_lenient(points, config.k_nn);
    let graph = build_graph(points, mesh_edges, &normals.normals, config.k_nn)?;
    segment_superpoints(&graph, config.k_fh, config.min_size)
}

/// Superpoint id per point, `None` for background.
pub fn point_labels(superpoints: &[Superpoint], num_points: usize) -> Vec<Option<u32>> {
    let mut out = vec![None; num_points];
    for sp in superpoints {
        for &p in &sp.point_indices {
            out[p as usize] = Some(sp.id as u32);
        }
    }
    out
}

/// Debug export: one superpoint id per line, `-1` for background.
pub fn write_partition(path: &Path, superpoints: &[Superpoint], num_points: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for label in point_labels(superpoints, num_points) {
        match label {
            Some(id) => writeln!(out, "{id}"),
            None => writeln!(out, "-1"),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
