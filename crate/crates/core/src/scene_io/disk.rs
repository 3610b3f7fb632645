//! On-disk scene layout:
//!
//! ```text
//! scene/
//!   points.ply                  x,y,z (+ optional red,green,blue, faces)
//!   intrinsics.txt              fx fy cx cy width height
//!   frames.json                 [{"frame_id": 0, "image": "color/0.jpg"}, ...]
//!   depth/frame_<id>.png        16-bit grayscale, millimeters, 0 = invalid
//!   pose/frame_<id>.txt         4x4 row-major camera-to-world
//!   gt/instance_ids.txt         optional, one id per point (0 = none)
//!   gt/labels.json              optional, {"<id>": "<label>"}
//!   gt_boxes.json               optional, oriented boxes
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    assign_instances_from_boxes, isometry_from_rows, isometry_to_rows, read_ply_points,
    write_ply_points, DepthMap, GroundTruth, Intrinsics, OrientedBox, PosedFrame, Scene,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameEntry {
    frame_id: u32,
    #[serde(default)]
    image: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_floats(path: &Path, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::load(path, format!("invalid number {t:?}")))
        })
        .collect()
}

fn depth_path(dir: &Path, id: u32) -> std::path::PathBuf {
    dir.join("depth").join(format!("frame_{id}.png"))
}

fn pose_path(dir: &Path, id: u32) -> std::path::PathBuf {
    dir.join("pose").join(format!("frame_{id}.txt"))
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::load(path, format!("invalid PNG: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::load(
            path,
            format!(
                "expected 16-bit grayscale depth, got {:?} {:?}",
                info.color_type, info.bit_depth
            ),
        ));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::load(path, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::load(path, format!("invalid PNG: {e}")))?;
    let data = buf
        .chunks_exact(2)
        .take(width * height)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 1000.0)
        .collect();
    DepthMap::from_vec(width, height, data).map_err(|e| Error::load(path, e.to_string()))
}

/// Writes depth as 16-bit millimeters, rounding to the nearest millimeter.
pub fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        depth.width() as u32,
        depth.height() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::load(path, e.to_string()))?;
    let bytes: Vec<u8> = depth
        .as_slice()
        .iter()
        .flat_map(|&d| ((d as f64 * 1000.0).round().clamp(0.0, 65535.0) as u16).to_be_bytes())
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::load(path, e.to_string()))?;
    Ok(())
}

fn read_pose(path: &Path) -> Result<nalgebra::Isometry3<f64>> {
    let text = read_text(path)?;
    let values = parse_floats(path, &text)?;
    if values.len() != 16 {
        return Err(Error::load(
            path,
            format!("expected 16 pose values, found {}", values.len()),
        ));
    }
    let mut rows = [[0.0; 4]; 4];
    for (i, v) in values.iter().enumerate() {
        rows[i / 4][i % 4] = *v;
    }
    let cam_to_world = isometry_from_rows(&rows).map_err(|e| Error::load(path, e.to_string()))?;
    Ok(cam_to_world.inverse())
}

fn read_intrinsics(path: &Path) -> Result<(Intrinsics, usize, usize)> {
    let text = read_text(path)?;
    let v = parse_floats(path, &text)?;
    if v.len() != 6 {
        return Err(Error::load(
            path,
            "expected `fx fy cx cy width height`".to_string(),
        ));
    }
    if v[4] < 1.0 || v[5] < 1.0 || v[4].fract() != 0.0 || v[5].fract() != 0.0 {
        return Err(Error::load(path, "width and height must be positive integers"));
    }
    Ok((
        Intrinsics {
            fx: v[0],
            fy: v[1],
            cx: v[2],
            cy: v[3],
        },
        v[4] as usize,
        v[5] as usize,
    ))
}

/// Loads a scene directory. Frames are returned sorted by `frame_id`.
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let ply = read_ply_points(&dir.join("points.ply"))?;
    let intr_path = dir.join("intrinsics.txt");
    let (intrinsics, width, height) = read_intrinsics(&intr_path)?;

    let manifest_path = dir.join("frames.json");
    let mut entries: Vec<FrameEntry> = serde_json::from_str(&read_text(&manifest_path)?)
        .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    entries.sort_by_key(|e| e.frame_id);
    if let Some(w) = entries.windows(2).find(|w| w[0].frame_id == w[1].frame_id) {
        return Err(Error::load(
            &manifest_path,
            format!("duplicate frame_id {}", w[0].frame_id),
        ));
    }

    let pose_dir = dir.join("pose");
    let pose_count = match fs::read_dir(&pose_dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "txt"))
            .count(),
        Err(_) => 0,
    };
    if pose_count != entries.len() {
        return Err(Error::Consistency(format!(
            "frames.json lists {} frames but {} pose files exist in {}",
            entries.len(),
            pose_count,
            pose_dir.display()
        )));
    }

    let mut frames = Vec::with_capacity(entries.len());
    for entry in entries {
        let id = entry.frame_id;
        let dpath = depth_path(dir, id);
        if !dpath.exists() {
            return Err(Error::load(&dpath, format!("missing depth for frame {id}")));
        }
        let depth = read_depth_png(&dpath)?;
        if depth.width() != width || depth.height() != height {
            return Err(Error::load(
                &dpath,
                format!(
                    "frame {id}: depth is {}x{}, intrinsics declare {width}x{height}",
                    depth.width(),
                    depth.height()
                ),
            ));
        }
        let ppath = pose_path(dir, id);
        if !ppath.exists() {
            return Err(Error::load(&ppath, format!("missing pose for frame {id}")));
        }
        let frame = PosedFrame {
            frame_id: id,
            width,
            height,
            intrinsics,
            world_to_cam: read_pose(&ppath)?,
            depth,
            image_ref: entry.image,
        };
        frame
            .validate()
            .map_err(|e| Error::load(&intr_path, e.to_string()))?;
        frames.push(frame);
    }

    let scene = Scene {
        points: ply.points,
        colors: ply.colors,
        mesh_edges: ply.edges,
        frames,
    };
    scene.validate()?;
    Ok(scene)
}

/// Writes `scene` in the layout [`load_scene`] reads. All frames must share
/// intrinsics and image size.
pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    let first = scene
        .frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("scene has no frames to write".into()))?;
    if scene
        .frames
        .iter()
        .any(|f| f.intrinsics != first.intrinsics || f.width != first.width || f.height != first.height)
    {
        return Err(Error::InvalidArgument(
            "all frames must share intrinsics and size".into(),
        ));
    }
    for sub in ["depth", "pose"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    write_ply_points(&dir.join("points.ply"), &scene.points, scene.colors.as_deref())?;

    let k = first.intrinsics;
    let intr = format!(
        "{} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, first.width, first.height
    );
    write_text(&dir.join("intrinsics.txt"), &intr)?;

    let entries: Vec<FrameEntry> = scene
        .frames
        .iter()
        .map(|f| FrameEntry {
            frame_id: f.frame_id,
            image: f.image_ref.clone(),
        })
        .collect();
    write_json(&dir.join("frames.json"), &entries)?;

    for f in &scene.frames {
        write_depth_png(&depth_path(dir, f.frame_id), &f.depth)?;
        let rows = isometry_to_rows(&f.world_to_cam.inverse());
        let text: String = rows
            .iter()
            .map(|r| format!("{:e} {:e} {:e} {:e}\n", r[0], r[1], r[2], r[3]))
            .collect();
        write_text(&pose_path(dir, f.frame_id), &text)?;
    }
    Ok(())
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| Error::load(path, e.to_string()))?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gt_boxes(path: &Path) -> Result<Vec<OrientedBox>> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::load(path, e.to_string()))
}

/// Loads ground truth from `gt/` if present, otherwise from `gt_boxes.json`
/// via box assignment. Returns `None` when the scene carries neither.
pub fn load_ground_truth(
    dir: &Path,
    num_points: usize,
    points: Option<&[nalgebra::Point3<f64>]>,
    box_min_points: usize,
) -> Result<Option<GroundTruth>> {
    let ids_path = dir.join("gt").join("instance_ids.txt");
    if ids_path.exists() {
        let text = read_text(&ids_path)?;
        let instance_ids = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::load(&ids_path, format!("invalid instance id {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if instance_ids.len() != num_points {
            return Err(Error::Consistency(format!(
                "{} has {} ids for {} points",
                ids_path.display(),
                instance_ids.len(),
                num_points
            )));
        }
        let labels_path = dir.join("gt").join("labels.json");
        let labels: BTreeMap<u32, String> = serde_json::from_str(&read_text(&labels_path)?)
            .map_err(|e| Error::load(&labels_path, e.to_string()))?;
        let gt = GroundTruth {
            instance_ids,
            labels: labels
                .into_iter()
                .map(|(k, v)| (k, v.to_lowercase()))
                .collect(),
            category_group: None,
        };
        gt.validate()?;
        return Ok(Some(gt));
    }
    let boxes_path = dir.join("gt_boxes.json");
    if boxes_path.exists() {
        let points = points.ok_or_else(|| {
            Error::InvalidArgument("box ground truth needs scene points".into())
        })?;
        let boxes = read_gt_boxes(&boxes_path)?;
        return assign_instances_from_boxes(points, &boxes, box_min_points).map(Some);
    }
    Ok(None)
}

pub fn write_ground_truth(dir: &Path, gt: &GroundTruth) -> Result<()> {
    let gt_dir = dir.join("gt");
    fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    let mut text = String::with_capacity(gt.instance_ids.len() * 3);
    for id in &gt.instance_ids {
        text.push_str(&id.to_string());
        text.push('\n');
    }
    write_text(&gt_dir.join("instance_ids.txt"), &text)?;
    write_json(&gt_dir.join("labels.json"), &gt.labels)
}
