//! Scene representation, on-disk loading, frame subsampling and
//! box-derived ground truth.

mod disk;
mod ply;

use std::collections::BTreeMap;

use nalgebra::{Isometry3, Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use disk::{
    load_ground_truth, load_scene, read_depth_png, read_gt_boxes, write_depth_png,
    write_ground_truth, write_scene,
};
pub use ply::{read_ply_points, write_ply_points, PlyPoints};
pub(crate) use disk::{ensure_parent, write_json, write_text};

/// Tolerance used when checking that a rotation is orthonormal.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Boxes holding fewer points than this are dropped from box ground truth.
pub const DEFAULT_BOX_MIN_POINTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Depth image in meters; `0.0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "depth data has {} values, expected {width}x{height}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid depth value {bad}")));
        }
        Ok(DepthMap {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn get_mut(&mut self, x: usize, y: usize) -> &mut f32 {
        &mut self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedFrame {
    pub frame_id: u32,
    pub width: usize,
    pub height: usize,
    pub intrinsics: Intrinsics,
    pub world_to_cam: Isometry3<f64>,
    pub depth: DepthMap,
    /// Opaque handle handed to backends (usually an image path).
    pub image_ref: String,
}

impl PosedFrame {
    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "frame {}: focal lengths must be positive",
                self.frame_id
            )));
        }
        if !(0.0 <= k.cx && k.cx < self.width as f64 && 0.0 <= k.cy && k.cy < self.height as f64)
        {
            return Err(Error::InvalidArgument(format!(
                "frame {}: principal point ({}, {}) outside {}x{}",
                self.frame_id, k.cx, k.cy, self.width, self.height
            )));
        }
        if self.depth.width() != self.width || self.depth.height() != self.height {
            return Err(Error::InvalidArgument(format!(
                "frame {}: depth is {}x{}, frame is {}x{}",
                self.frame_id,
                self.depth.width(),
                self.depth.height(),
                self.width,
                self.height
            )));
        }
        check_rotation(self.world_to_cam.rotation.to_rotation_matrix().matrix())
            .map_err(|e| Error::InvalidArgument(format!("frame {}: {e}", self.frame_id)))?;
        Ok(())
    }
}

/// Checks `R^T R = I` and `det R = +1` within [`ROTATION_TOLERANCE`].
pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if err > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "rotation is not orthonormal (deviation {err:.2e}, det {det:.6})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3<f64>>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub mesh_edges: Option<Vec<(u32, u32)>>,
    pub frames: Vec<PosedFrame>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::Consistency("scene has no points".into()));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !p.coords.iter().all(|c| c.is_finite()))
        {
            return Err(Error::Consistency(format!("point {i} is not finite")));
        }
        if let Some(colors) = &self.colors {
            if colors.len() != self.points.len() {
                return Err(Error::Consistency(format!(
                    "{} colors for {} points",
                    colors.len(),
                    self.points.len()
                )));
            }
        }
        if let Some(edges) = &self.mesh_edges {
            let n = self.points.len() as u32;
            for &(a, b) in edges {
                if a >= n || b >= n || a == b {
                    return Err(Error::Consistency(format!("invalid mesh edge ({a}, {b})")));
                }
            }
        }
        for f in &self.frames {
            f.validate()?;
        }
        Ok(())
    }
}

/// Per-point instance annotation. Instance id 0 means unannotated.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    pub instance_ids: Vec<u32>,
    pub labels: BTreeMap<u32, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_group: Option<BTreeMap<String, String>>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        for &id in &self.instance_ids {
            if id != 0 && !self.labels.contains_key(&id) {
                return Err(Error::Consistency(format!(
                    "instance {id} has no label"
                )));
            }
        }
        Ok(())
    }

    /// Point index lists per instance id, in ascending id order.
    pub fn instances(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in self.instance_ids.iter().enumerate() {
            if id != 0 {
                out.entry(id).or_default().push(i);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    /// Row-major box-to-world rotation.
    pub rotation: [f64; 9],
    pub label: String,
}

impl OrientedBox {
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.rotation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.half_extents.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "box {:?}: half extents must be positive",
                self.label
            )));
        }
        check_rotation(&self.rotation_matrix())
    }

    pub fn volume(&self) -> f64 {
        8.0 * self.half_extents.iter().product::<f64>()
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        let local = self.rotation_matrix().transpose() * (p - Point3::from(self.center));
        local
            .iter()
            .zip(self.half_extents.iter())
            .all(|(c, h)| c.abs() <= *h)
    }
}

/// Keeps frames at indices `0, stride, 2*stride, ...`.
pub fn sample_frames(frames: &[PosedFrame], stride: usize) -> Result<Vec<PosedFrame>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("frame stride must be >= 1".into()));
    }
    Ok(frames.iter().step_by(stride).cloned().collect())
}

/// Builds per-point ground truth from oriented boxes.
///
/// Box `i` becomes instance `i + 1`. Boxes containing fewer than
/// `min_points` points are dropped. A point inside several surviving boxes
/// goes to the one with the smallest volume, ties to the lower box index.
pub fn assign_instances_from_boxes(
    points: &[Point3<f64>],
    boxes: &[OrientedBox],
    min_points: usize,
) -> Result<GroundTruth> {
    if min_points == 0 {
        return Err(Error::InvalidArgument("min_points must be >= 1".into()));
    }
    for b in boxes {
        b.validate()?;
    }

    let containment: Vec<Vec<usize>> = points
        .iter()
        .map(|p| {
            boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| b.contains(p))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut counts = vec![0usize; boxes.len()];
    for inside in &containment {
        for &b in inside {
            counts[b] += 1;
        }
    }
    let survives: Vec<bool> = counts.iter().map(|&c| c >= min_points).collect();

    let instance_ids = containment
        .iter()
        .map(|inside| {
            inside
                .iter()
                .copied()
                .filter(|&b| survives[b])
                .min_by(|&a, &b| {
                    boxes[a]
                        .volume()
                        .total_cmp(&boxes[b].volume())
                        .then(a.cmp(&b))
                })
                .map_or(0, |b| b as u32 + 1)
        })
        .collect();

    let labels = boxes
        .iter()
        .enumerate()
        .filter(|(i, _)| survives[*i])
        .map(|(i, b)| (i as u32 + 1, b.label.clone()))
        .collect();

    Ok(GroundTruth {
        instance_ids,
        labels,
        category_group: None,
    })
}

/// Builds an isometry from a row-major 4x4 rigid transform.
pub(crate) fn isometry_from_rows(rows: &[[f64; 4]; 4]) -> Result<Isometry3<f64>> {
    let r = Matrix3::new(
        rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
        rows[2][1], rows[2][2],
    );
    let det = r.determinant();
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    // Text poses carry limited precision; accept small drift and snap to SO(3).
    if err > 1e-3 || (det - 1.0).abs() > 1e-3 {
        return Err(Error::InvalidArgument(format!(
            "pose rotation is not orthonormal (deviation {err:.2e}, det {det:.6})"
        )));
    }
    let rotation = nalgebra::Rotation3::from_matrix_eps(&r, 1e-12, 100, nalgebra::Rotation3::identity());
    let t = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
    Ok(Isometry3::from_parts(
        nalgebra::Translation3::from(t),
        nalgebra::UnitQuaternion::from_rotation_matrix(&rotation),
    ))
}

pub(crate) fn isometry_to_rows(iso: &Isometry3<f64>) -> [[f64; 4]; 4] {
    let m = iso.to_homogeneous();
    let mut rows = [[0.0; 4]; 4];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(id: u32) -> PosedFrame {
        PosedFrame {
            frame_id: id,
            width: 2,
            height: 2,
            intrinsics: Intrinsics {
                fx: 1.0,
                fy: 1.0,
                cx: 1.0,
                cy: 1.0,
            },
            world_to_cam: Isometry3::identity(),
            depth: DepthMap::zeros(2, 2),
            image_ref: String::new(),
        }
    }

    fn ids(frames: &[PosedFrame]) -> Vec<u32> {
        frames.iter().map(|f| f.frame_id).collect()
    }

    fn axis_box(center: [f64; 3], half: f64, label: &str) -> OrientedBox {
        OrientedBox {
            center,
            half_extents: [half; 3],
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            label: label.into(),
        }
    }

    #[test]
    fn stride_ten_keeps_every_tenth_frame() {
        let frames: Vec<_> = (0..25).map(frame).collect();
        assert_eq!(ids(&sample_frames(&frames, 10).unwrap()), vec![0, 10, 20]);
        assert_eq!(ids(&sample_frames(&frames, 1).unwrap()), ids(&frames));
        assert_eq!(ids(&sample_frames(&frames[..5], 100).unwrap()), vec![0]);
        assert!(matches!(
            sample_frames(&frames, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn point_at_box_center_is_assigned() {
        let pts = vec![Point3::new(1.0, 2.0, 3.0)];
        let gt = assign_instances_from_boxes(&pts, &[axis_box([1.0, 2.0, 3.0], 0.5, "car")], 1)
            .unwrap();
        assert_eq!(gt.instance_ids, vec![1]);
        assert_eq!(gt.labels[&1], "car");
    }

    #[test]
    fn sparse_box_is_dropped() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(0.1, 0.0, 0.0)];
        let gt =
            assign_instances_from_boxes(&pts, &[axis_box([0.0; 3], 1.0, "cone")], 5).unwrap();
        assert_eq!(gt.instance_ids, vec![0, 0]);
        assert!(gt.labels.is_empty());
        assert!(assign_instances_from_boxes(&pts, &[], 0).is_err());
    }

    #[test]
    fn nested_boxes_prefer_smaller_volume() {
        // outer volume 8*2^3 = 64, inner volume 8*0.5^3 = 1
        let outer = axis_box([0.0; 3], 2.0, "car");
        let inner = axis_box([0.5, 0.0, 0.0], 0.5, "seat");
        assert!(inner.volume() < outer.volume());
        let pts = vec![Point3::new(0.5, 0.0, 0.0), Point3::new(-1.5, 0.0, 0.0)];
        for boxes in [vec![outer.clone(), inner.clone()], vec![inner, outer]] {
            let gt = assign_instances_from_boxes(&pts, &boxes, 1).unwrap();
            let inner_id = boxes.iter().position(|b| b.label == "seat").unwrap() as u32 + 1;
            let outer_id = boxes.iter().position(|b| b.label == "car").unwrap() as u32 + 1;
            assert_eq!(gt.instance_ids, vec![inner_id, outer_id]);
        }
    }

    #[test]
    fn rotated_box_containment() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let b = OrientedBox {
            center: [0.0; 3],
            half_extents: [2.0, 0.1, 0.1],
            rotation: [s, -s, 0.0, s, s, 0.0, 0.0, 0.0, 1.0],
            label: "pole".into(),
        };
        assert!(b.contains(&Point3::new(1.0, 1.0, 0.0)));
        assert!(!b.contains(&Point3::new(1.0, -1.0, 0.0)));
    }

    proptest! {
        #[test]
        fn stride_composition(n in 0usize..60, a in 1usize..7, b in 1usize..7) {
            let frames: Vec<_> = (0..n as u32).map(frame).collect();
            let twice = sample_frames(&sample_frames(&frames, a).unwrap(), b).unwrap();
            let once = sample_frames(&frames, a * b).unwrap();
            prop_assert_eq!(ids(&twice), ids(&once));
        }

        #[test]
        fn box_order_does_not_matter_for_distinct_volumes(
            pts in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -3.0f64..3.0), 1..40),
            halves in proptest::collection::vec((0.3f64..2.5, -1.0f64..1.0), 1..5),
        ) {
            let pts: Vec<_> = pts.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect();
            let boxes: Vec<_> = halves
                .iter()
                .enumerate()
                .map(|(i, (h, c))| axis_box([*c, 0.0, 0.0], h + i as f64 * 1e-3, &format!("b{i}")))
                .collect();
            let forward = assign_instances_from_boxes(&pts, &boxes, 1).unwrap();
            let mut rev = boxes.clone();
            rev.reverse();
            let backward = assign_instances_from_boxes(&pts, &rev, 1).unwrap();
            let label_of = |gt: &GroundTruth, id: u32| gt.labels.get(&id).cloned();
            for i in 0..pts.len() {
                prop_assert_eq!(
                    label_of(&forward, forward.instance_ids[i]),
                    label_of(&backward, backward.instance_ids[i])
                );
            }
        }
    }
}
