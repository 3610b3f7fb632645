//! Synthetic scenes with known instances, a point z-buffer renderer and an
//! oracle backend that answers from ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backend, FrameRef};
use crate::error::{Error, Result};
use crate::geometry::project_point;
use crate::mask::{CropBox, Mask2d};
use crate::scene_io::{
    write_ground_truth, write_scene, DepthMap, GroundTruth, Intrinsics, PosedFrame, Scene,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Surface of an axis-aligned (before yaw) box with edge lengths `size`.
    Box,
    /// Sphere of diameter `size[0]`.
    Sphere,
    /// Horizontal rectangle `size[0] x size[1]`.
    Plane,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub center: [f64; 3],
    pub size: [f64; 3],
    /// Rotation about +z, degrees.
    #[serde(default)]
    pub yaw_deg: f64,
    pub label: String,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub eye: [f64; 3],
    pub target: [f64; 3],
}

/// `count` cameras evenly spaced in azimuth on a circle of `radius` around
/// `center`, cycling through `heights` (relative to `center`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Orbit {
    pub center: [f64; 3],
    pub radius: f64,
    pub heights: Vec<f64>,
    pub count: usize,
}

impl Orbit {
    pub fn poses(&self) -> Vec<CameraPose> {
        (0..self.count)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / self.count as f64;
                let h = self.heights[i % self.heights.len()];
                CameraPose {
                    eye: [
                        self.center[0] + self.radius * a.cos(),
                        self.center[1] + self.radius * a.sin(),
                        self.center[2] + h,
                    ],
                    target: self.center,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

fn default_px_radius() -> usize {
    1
}

fn default_embed_dim() -> usize {
    768
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub cameras: Vec<CameraPose>,
    #[serde(default)]
    pub orbit: Option<Orbit>,
    pub intrinsics: ImageSpec,
    /// Gaussian jitter of sampled points, meters.
    #[serde(default)]
    pub point_noise: f64,
    /// Gaussian jitter added to oracle embeddings before renormalizing.
    #[serde(default)]
    pub embedding_noise: f64,
    /// Extra tags the oracle tagger reports in every frame.
    #[serde(default)]
    pub distractor_tags: Vec<String>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_px_radius")]
    pub px_radius: usize,
}

impl SceneSpec {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SceneSpec =
            serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// All camera poses: explicit ones first, then the orbit.
    pub fn camera_poses(&self) -> Vec<CameraPose> {
        let mut poses = self.cameras.clone();
        if let Some(o) = &self.orbit {
            poses.extend(o.poses());
        }
        poses
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.objects.is_empty() {
            return bad("scene spec needs at least one object".into());
        }
        if let Some(o) = &self.orbit {
            if o.heights.is_empty() || o.count == 0 || !(o.radius > 0.0) {
                return bad("orbit needs heights, count >= 1 and radius > 0".into());
            }
        }
        if self.camera_poses().is_empty() {
            return bad("scene spec needs at least one camera".into());
        }
        if !(self.point_noise >= 0.0 && self.embedding_noise >= 0.0) {
            return bad("noise levels must be >= 0".into());
        }
        for o in &self.objects {
            if o.size.iter().take(2).any(|&s| !(s > 0.0)) || (o.shape == Shape::Box && !(o.size[2] > 0.0)) {
                return bad(format!("object {:?}: sizes must be positive", o.label));
            }
            if o.points == 0 {
                return bad(format!("object {:?}: needs points", o.label));
            }
        }
        let mut vocab: Vec<&String> = self.objects.iter().map(|o| &o.label).collect();
        vocab.extend(&self.distractor_tags);
        vocab.sort();
        vocab.dedup();
        if self.embed_dim < vocab.len() {
            return bad(format!(
                "embed_dim {} cannot hold {} orthogonal tag vectors",
                self.embed_dim,
                vocab.len()
            ));
        }
        let k = &self.intrinsics;
        if k.width == 0 || k.height == 0 || !(k.fx > 0.0 && k.fy > 0.0) {
            return bad("intrinsics need positive size and focal lengths".into());
        }
        Ok(())
    }

    /// `n` objects of assorted shapes on a ring, watched by a 20-pose
    /// orbit that alternates between above and below.
    pub fn demo(n_objects: usize, total_points: usize) -> Self {
        const CATALOG: [(&str, Shape, [f64; 3]); 5] = [
            ("chair", Shape::Box, [0.5, 0.5, 0.9]),
            ("table", Shape::Box, [1.0, 0.7, 0.4]),
            ("ball", Shape::Sphere, [0.6, 0.6, 0.6]),
            ("cabinet", Shape::Box, [0.6, 0.4, 1.0]),
            ("lamp", Shape::Sphere, [0.4, 0.4, 0.4]),
        ];
        let n = n_objects.clamp(1, CATALOG.len());
        let per = (total_points / n).max(1);
        let objects = (0..n)
            .map(|i| {
                let (label, shape, size) = CATALOG[i];
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                let r = if n == 1 { 0.0 } else { 1.3 };
                ObjectSpec {
                    shape,
                    center: [r * a.cos(), r * a.sin(), 0.0],
                    size,
                    yaw_deg: 20.0 * i as f64,
                    label: label.into(),
                    points: if i + 1 == n { total_points - per * (n - 1) } else { per },
                }
            })
            .collect();
        SceneSpec {
            objects,
            cameras: Vec::new(),
            orbit: Some(Orbit {
                center: [0.0, 0.0, 0.0],
                radius: 4.5,
                heights: vec![2.0, -1.5],
                count: 20,
            }),
            // at coarser pixels the 3x3 splat hides faces seen at grazing
            // angles from the depth test
            intrinsics: ImageSpec {
                fx: 560.0,
                fy: 560.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            },
            point_noise: 0.0,
            embedding_noise: 0.0,
            distractor_tags: vec!["wall".into(), "blue".into()],
            embed_dim: default_embed_dim(),
            px_radius: default_px_radius(),
        }
    }
}

/// World-to-camera transform of a camera at `eye` looking at `target`
/// (x right, y down, z forward).
pub fn look_at(eye: [f64; 3], target: [f64; 3]) -> Result<Isometry3<f64>> {
    let eye = Point3::from(eye);
    let forward = Point3::from(target) - eye;
    if forward.norm() == 0.0 {
        return Err(Error::InvalidArgument("camera eye equals target".into()));
    }
    let forward = forward.normalize();
    let mut up = Vector3::z();
    if forward.cross(&up).norm() < 1e-9 {
        up = Vector3::y();
    }
    let right = forward.cross(&up).normalize();
    let down = forward.cross(&right);
    let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let t = -(rot * eye.coords);
    Ok(Isometry3::from_parts(Translation3::from(t), rot))
}

fn sample_object(obj: &ObjectSpec, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), obj.yaw_deg.to_radians());
    let center = Vector3::from(obj.center);
    let [sx, sy, sz] = obj.size;
    // faces as (area, fixed axis, sign)
    let faces = [
        (sy * sz, 0usize, -1.0),
        (sy * sz, 0, 1.0),
        (sx * sz, 1, -1.0),
        (sx * sz, 1, 1.0),
        (sx * sy, 2, -1.0),
        (sx * sy, 2, 1.0),
    ];
    let total_area: f64 = faces.iter().map(|f| f.0).sum();
    (0..obj.points)
        .map(|_| {
            let local = match obj.shape {
                Shape::Box => {
                    let mut pick = rng.random::<f64>() * total_area;
                    let mut face = faces[5];
                    for f in faces {
                        if pick < f.0 {
                            face = f;
                            break;
                        }
                        pick -= f.0;
                    }
                    let mut c = [
                        (rng.random::<f64>() - 0.5) * sx,
                        (rng.random::<f64>() - 0.5) * sy,
                        (rng.random::<f64>() - 0.5) * sz,
                    ];
                    c[face.1] = face.2 * obj.size[face.1] / 2.0;
                    Vector3::from(c)
                }
                Shape::Sphere => {
                    let v: Vector3<f64> = Vector3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    );
                    let n = v.norm();
                    if n == 0.0 {
                        Vector3::new(0.0, 0.0, sx / 2.0)
                    } else {
                        v * (sx / 2.0 / n)
                    }
                }
                Shape::Plane => Vector3::new(
                    (rng.random::<f64>() - 0.5) * sx,
                    (rng.random::<f64>() - 0.5) * sy,
                    0.0,
                ),
            };
            let mut p = yaw * local + center;
            if noise > 0.0 {
                for c in p.iter_mut() {
                    let g: f64 = StandardNormal.sample(rng);
                    *c += noise * g;
                }
            }
            Point3::from(p)
        })
        .collect()
}

fn frame_shell(spec: &SceneSpec, frame_id: u32, pose: &CameraPose) -> Result<PosedFrame> {
    let k = &spec.intrinsics;
    Ok(PosedFrame {
        frame_id,
        width: k.width,
        height: k.height,
        intrinsics: Intrinsics {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        },
        world_to_cam: look_at(pose.eye, pose.target)?,
        depth: DepthMap::zeros(k.width, k.height),
        image_ref: format!("synthetic/frame_{frame_id}"),
    })
}

/// Depth map and, when `instance_ids` is given, the instance of the
/// nearest point at every pixel (0 where nothing landed).
///
/// Every point in front of the camera writes its depth to the pixels within
/// `px_radius` (Chebyshev) of its rounded projection; the smallest depth
/// wins.
pub fn render(
    points: &[Point3<f64>],
    instance_ids: Option<&[u32]>,
    frame: &PosedFrame,
    px_radius: usize,
) -> (DepthMap, Vec<u32>) {
    let (w, h) = (frame.width, frame.height);
    let mut depth = vec![f32::INFINITY; w * h];
    let mut owner = vec![0u32; if instance_ids.is_some() { w * h } else { 0 }];
    let r = px_radius as isize;
    for (i, p) in points.iter().enumerate() {
        let Some(px) = project_point(p, frame) else {
            continue;
        };
        let Some((x, y)) = px.pixel(w, h) else {
            continue;
        };
        let z = px.z as f32;
        for dy in -r..=r {
            for dx in -r..=r {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                    continue;
                }
                let k = yy as usize * w + xx as usize;
                if z < depth[k] {
                    depth[k] = z;
                    if let Some(ids) = instance_ids {
                        owner[k] = ids[i];
                    }
                }
            }
        }
    }
    for d in &mut depth {
        if !d.is_finite() {
            *d = 0.0;
        }
    }
    (
        DepthMap::from_vec(w, h, depth).expect("sized buffer"),
        owner,
    )
}

/// Depth-only rendering.
pub fn render_depth(points: &[Point3<f64>], frame: &PosedFrame, px_radius: usize) -> DepthMap {
    render(points, None, frame, px_radius).0
}

/// Samples the objects, renders every camera and labels every point.
/// Object `i` becomes instance `i + 1`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(Scene, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut instance_ids = Vec::new();
    let mut labels = BTreeMap::new();
    for (i, obj) in spec.objects.iter().enumerate() {
        let id = i as u32 + 1;
        let pts = sample_object(obj, spec.point_noise, &mut rng);
        instance_ids.extend(std::iter::repeat_n(id, pts.len()));
        points.extend(pts);
        labels.insert(id, obj.label.to_lowercase());
    }
    let frames = spec
        .camera_poses()
        .iter()
        .enumerate()
        .map(|(i, pose)| frame_shell(spec, i as u32, pose))
        .collect::<Result<Vec<_>>>()?;
    let frames: Vec<PosedFrame> = frames
        .into_par_iter()
        .map(|mut f| {
            f.depth = render_depth(&points, &f, spec.px_radius);
            f
        })
        .collect();
    let scene = Scene {
        points,
        colors: None,
        mesh_edges: None,
        frames,
    };
    let gt = GroundTruth {
        instance_ids,
        labels,
        category_group: None,
    };
    Ok((scene, gt))
}

/// Writes a generated scene and its ground truth in the on-disk scene layout.
pub fn export_scene(dir: &Path, scene: &Scene, gt: &GroundTruth) -> Result<()> {
    write_scene(dir, scene)?;
    write_ground_truth(dir, gt)
}

/// Answers backend calls from ground truth.
///
/// Segmentation returns the rendered silhouette of the instance found under
/// most pixel prompts; crops embed as the basis vector of the instance found
/// under most mask pixels. Tags are the labels visible in a frame plus the
/// distractors. Every tag has its own basis vector.
pub struct OracleBackend {
    instance_maps: BTreeMap<u32, (usize, usize, Vec<u32>)>,
    labels: BTreeMap<u32, String>,
    vocabulary: BTreeMap<String, usize>,
    distractors: Vec<String>,
    dim: usize,
    noise: f64,
    seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl OracleBackend {
    pub fn new(scene: &Scene, gt: &GroundTruth, spec: &SceneSpec, seed: u64) -> Result<Self> {
        if gt.instance_ids.len() != scene.points.len() {
            return Err(Error::Consistency(format!(
                "ground truth covers {} points, scene has {}",
                gt.instance_ids.len(),
                scene.points.len()
            )));
        }
        let instance_maps = scene
            .frames
            .par_iter()
            .map(|f| {
                let (_, owner) = render(&scene.points, Some(&gt.instance_ids), f, spec.px_radius);
                (f.frame_id, (f.width, f.height, owner))
            })
            .collect();
        let mut vocabulary = BTreeMap::new();
        let labels: BTreeMap<u32, String> = gt
            .labels
            .iter()
            .map(|(&id, l)| (id, l.to_lowercase()))
            .collect();
        for l in labels.values().chain(spec.distractor_tags.iter()) {
            let next = vocabulary.len();
            vocabulary.entry(l.to_lowercase()).or_insert(next);
        }
        if vocabulary.len() > spec.embed_dim {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} cannot hold {} tags",
                spec.embed_dim,
                vocabulary.len()
            )));
        }
        Ok(OracleBackend {
            instance_maps,
            labels,
            vocabulary,
            distractors: spec.distractor_tags.iter().map(|t| t.to_lowercase()).collect(),
            dim: spec.embed_dim,
            noise: spec.embedding_noise,
            seed,
        })
    }

    fn map(&self, frame_id: u32) -> Result<&(usize, usize, Vec<u32>)> {
        self.instance_maps
            .get(&frame_id)
            .ok_or_else(|| Error::Backend(format!("oracle has no frame {frame_id}")))
    }

    fn vector(&self, tag: &str, salt: u64) -> Result<Vec<f32>> {
        let &axis = self
            .vocabulary
            .get(tag)
            .ok_or_else(|| Error::Backend(format!("oracle has no embedding for {tag:?}")))?;
        let mut v = vec![0.0f64; self.dim];
        v[axis] = 1.0;
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
            for x in &mut v {
                let g: f64 = StandardNormal.sample(&mut rng);
                *x += self.noise * g;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| (x / n) as f32).collect())
    }
}

/// Most frequent nonzero id, ties to the smaller id.
fn majority(ids: impl Iterator<Item = u32>) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for id in ids.filter(|&id| id != 0) {
        *counts.entry(id).or_default() += 1;
    }
    let mut best: Option<(u32, usize)> = None;
    for (id, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((id, c));
        }
    }
    best.map(|(id, _)| id)
}

impl Backend for OracleBackend {
    fn segment(
        &self,
        frame: FrameRef<'_>,
        _prompt_id: usize,
        pixels: &[(usize, usize)],
    ) -> Result<Option<Mask2d>> {
        let (w, h, owner) = self.map(frame.frame_id)?;
        let hit = majority(
            pixels
                .iter()
                .filter(|&&(u, v)| u < *w && v < *h)
                .map(|&(u, v)| owner[v * w + u]),
        );
        let Some(id) = hit else {
            return Ok(None);
        };
        let data = owner.iter().map(|&o| o == id).collect();
        Mask2d::from_vec(*w, *h, data).map(Some)
    }

    fn tag(&self, frame: FrameRef<'_>) -> Result<Vec<String>> {
        let (_, _, owner) = self.map(frame.frame_id)?;
        let mut present: Vec<u32> = owner.iter().copied().filter(|&o| o != 0).collect();
        present.sort_unstable();
        present.dedup();
        let mut tags: Vec<String> = present
            .iter()
            .filter_map(|id| self.labels.get(id).cloned())
            .collect();
        tags.extend(self.distractors.iter().cloned());
        Ok(tags)
    }

    fn embed_crop(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        _crop: CropBox,
        mask: &Mask2d,
    ) -> Result<Option<Vec<f32>>> {
        let (_, _, owner) = self.map(frame.frame_id)?;
        let hit = majority(
            mask.as_slice()
                .iter()
                .zip(owner)
                .filter(|(m, _)| **m)
                .map(|(_, &o)| o),
        );
        match hit.and_then(|id| self.labels.get(&id)) {
            Some(label) => {
                let salt = ((frame.frame_id as u64) << 32) ^ prompt_id as u64 ^ 0x5eed;
                self.vector(label, salt).map(Some)
            }
            None => Ok(None),
        }
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        texts
            .iter()
            .map(|t| self.vector(&t.to_lowercase(), fnv1a(t.as_bytes())))
            .collect()
    }
}
