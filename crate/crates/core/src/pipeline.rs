//! End-to-end driver: scene in, labeled instances out.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{
    Backend, BackendBundle, FixtureStore, FrameRef, RecordingBackend, SubprocessBackend,
};
use crate::config::{BackendChoice, PipelineConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, GtInstance, MetricsReport, PredictionRecord};
use crate::geometry::{
    project_point, rank_views_cached, sample_pixel_prompts, BackProjection, FrameVisibility,
};
use crate::labeling::{collect_open_tags, match_labels, Blocklist, CropEmbedding, TagSet};
use crate::merging::{merge_coarse_masks, Instance};
use crate::overlap::{assemble_coarse_masks, build_score_table, CoarseMask, ViewRecord};
use crate::scene_io::{
    load_ground_truth, load_scene, read_ply_points, sample_frames, write_json, write_ply_points,
    write_text, GroundTruth, PosedFrame, Scene, DEFAULT_BOX_MIN_POINTS,
};
use crate::superpoints::{compute_superpoints, select_prompts, write_partition, Superpoint};
use crate::synthbench::{OracleBackend, SceneSpec};

/// The settings a run actually used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub n_prompts: usize,
    pub frame_stride: usize,
    pub views: usize,
    pub theta: f64,
    pub tau: f64,
    pub column_norm: String,
    pub max_merge_passes: Option<usize>,
    pub label_strategy: String,
    pub k_pixel_prompts: usize,
    pub eps_depth: f64,
    pub crop_padding: f64,
    pub superpoint_k_nn: usize,
    pub superpoint_k_fh: f64,
    pub superpoint_min_size: usize,
    pub seed: u64,
}

impl Hyperparameters {
    fn of(c: &PipelineConfig) -> Self {
        let name = |v: serde_json::Value| v.as_str().unwrap_or_default().to_string();
        Hyperparameters {
            n_prompts: c.n_prompts,
            frame_stride: c.frame_stride,
            views: c.views,
            theta: c.theta,
            tau: c.tau,
            column_norm: name(serde_json::to_value(c.column_norm).unwrap_or_default()),
            max_merge_passes: c.max_merge_passes,
            label_strategy: name(serde_json::to_value(c.label_strategy).unwrap_or_default()),
            k_pixel_prompts: c.k_pixel_prompts,
            eps_depth: c.eps_depth,
            crop_padding: c.crop_padding,
            superpoint_k_nn: c.superpoint.k_nn,
            superpoint_k_fh: c.superpoint.k_fh,
            superpoint_min_size: c.superpoint.min_size,
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub points: usize,
    pub frames_total: usize,
    pub frames_used: usize,
    pub superpoints: usize,
    pub prompts: usize,
    pub segmentations: usize,
    /// (prompt, view) pairs the backend had no mask for.
    pub skipped_segmentations: usize,
    pub crop_embeddings: usize,
    pub coarse_masks: usize,
    pub dropped_prompts: usize,
    pub unassigned_superpoints: usize,
    pub merge_passes: usize,
    pub instances: usize,
    pub labeled_instances: usize,
    /// Fraction of instances that received a label.
    pub label_coverage: f64,
    pub points_in_instances: usize,
    pub tags: Vec<String>,
    pub hyperparameters: Hyperparameters,
    pub warnings: Vec<String>,
    /// Wall-clock milliseconds per stage.
    pub timings_ms: BTreeMap<String, f64>,
}

/// Everything a run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub instances: Vec<Instance>,
    pub superpoints: Vec<Superpoint>,
    pub coarse_masks: Vec<CoarseMask>,
    pub score_table: crate::overlap::OverlapScoreTable,
}

impl RunOutput {
    /// Instance id per point, -1 for background.
    pub fn instance_ids(&self) -> Vec<i64> {
        let mut ids = vec![-1i64; self.summary.points];
        for inst in &self.instances {
            for &p in &inst.point_indices {
                ids[p as usize] = inst.id as i64;
            }
        }
        ids
    }
}

/// One line of `instances.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: usize,
    // present but possibly null
    #[serde(deserialize_with = "Option::deserialize")]
    pub label: Option<String>,
    #[serde(deserialize_with = "Option::deserialize")]
    pub confidence: Option<f64>,
    pub composition: Vec<usize>,
    pub point_count: usize,
}

#[derive(Default)]
struct PromptResult {
    views: Vec<ViewRecord>,
    back_projections: Vec<BackProjection>,
    crops: Vec<CropEmbedding>,
    skipped: usize,
}

struct Stopwatch {
    timings: BTreeMap<String, f64>,
    last: Instant,
}

impl Stopwatch {
    fn new() -> Self {
        Stopwatch {
            timings: BTreeMap::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), (now - self.last).as_secs_f64() * 1e3);
        self.last = now;
    }
}

#[allow(clippy::too_many_arguments)]
fn process_prompt(
    n: usize,
    prompt: &Superpoint,
    scene: &Scene,
    frames: &[PosedFrame],
    visibility: &[FrameVisibility],
    backend: &BackendBundle,
    config: &PipelineConfig,
) -> Result<PromptResult> {
    let mut out = PromptResult::default();
    for view in rank_views_cached(&prompt.point_indices, frames, visibility, config.views)? {
        let frame = &frames[view.frame_index];
        let vis = &visibility[view.frame_index];
        let projected: Vec<_> = prompt
            .point_indices
            .iter()
            .filter(|&&i| vis.is_visible(i))
            .filter_map(|&i| project_point(&scene.points[i as usize], frame))
            .collect();
        let chosen = sample_pixel_prompts(&projected, config.k_pixel_prompts)?;
        let pixels: Vec<(usize, usize)> = chosen
            .iter()
            .filter_map(|&k| projected[k].pixel(frame.width, frame.height))
            .collect();
        let fref = FrameRef::from(frame);
        let Some(mask) = backend.segment(fref, n, &pixels)? else {
            out.skipped += 1;
            continue;
        };
        let crop = mask
            .bounding_box()
            .map(|b| b.padded(config.crop_padding, frame.width, frame.height));
        if let Some(c) = crop {
            if let Some(vector) = backend.embed_crop(fref, n, c, &mask)? {
                out.crops.push(CropEmbedding {
                    coarse_mask_id: n,
                    view_id: frame.frame_id,
                    vector,
                });
            }
        }
        let point_indices = vis.back_project(&mask);
        out.views.push(ViewRecord {
            frame_id: frame.frame_id,
            mask_pixels: mask.count(),
            back_projected: point_indices.len(),
            crop,
        });
        out.back_projections.push(BackProjection {
            prompt_id: n,
            view_id: frame.frame_id,
            point_indices,
        });
    }
    Ok(out)
}

/// Runs every stage on an already loaded scene. Parallel stages use the
/// current rayon pool; results do not depend on its size.
pub fn process_scene(
    scene: &Scene,
    backend: &BackendBundle,
    config: &PipelineConfig,
) -> Result<RunOutput> {
    config.validate()?;
    let blocklist = match &config.blocklist {
        Some(p) => Blocklist::from_file(p)?,
        None => Blocklist::builtin(),
    };
    let mut clock = Stopwatch::new();
    let mut warnings = Vec::new();

    let frames = sample_frames(&scene.frames, config.frame_stride)?;
    if frames.is_empty() {
        warnings.push("scene has no frames; every prompt is skipped".to_string());
    }
    clock.lap("sample_frames");

    let superpoints = compute_superpoints(
        &scene.points,
        scene.mesh_edges.as_deref(),
        &config.superpoint,
    )?;
    clock.lap("superpoints");

    let prompts = select_prompts(&superpoints, config.n_prompts)?;
    if prompts.len() < config.n_prompts {
        log::info!(
            "only {} superpoints available for {} prompts",
            prompts.len(),
            config.n_prompts
        );
    }
    let visibility = FrameVisibility::compute_all(&scene.points, &frames, config.eps_depth);
    clock.lap("visibility");

    let results = prompts
        .par_iter()
        .enumerate()
        .map(|(n, p)| process_prompt(n, p, scene, &frames, &visibility, backend, config))
        .collect::<Result<Vec<_>>>()?;
    clock.lap("segmentation");

    let mut prompt_views = Vec::with_capacity(results.len());
    let mut back_projections = Vec::new();
    let mut crops = Vec::new();
    let mut skipped = 0;
    for r in results {
        prompt_views.push(r.views);
        back_projections.extend(r.back_projections);
        crops.extend(r.crops);
        skipped += r.skipped;
    }
    if skipped > 0 {
        log::warn!("{skipped} (prompt, view) pairs had no mask and were skipped");
    }

    let table = build_score_table(&superpoints, &back_projections, prompts.len(), config.theta)?;
    let assembly = assemble_coarse_masks(&table, &superpoints, &prompt_views)?;
    clock.lap("score_table");

    let merged = merge_coarse_masks(&table, &assembly.masks, &config.merge_config())?;
    let mut instances = merged.instances;
    clock.lap("merging");

    let per_frame_tags = frames
        .par_iter()
        .map(|f| backend.tag(f.into()))
        .collect::<Result<Vec<_>>>()?;
    let tags = collect_open_tags(&per_frame_tags, &blocklist);
    let text_embeddings = backend.embed_texts(&tags)?;
    let tag_set = TagSet::new(tags.clone(), text_embeddings)?;
    if tag_set.is_empty() {
        let msg = "no open tags survived the blocklist; instances stay unlabeled".to_string();
        log::warn!("{msg}");
        warnings.push(msg);
    }
    match_labels(&mut instances, &crops, &tag_set, config.label_strategy)?;
    clock.lap("labeling");

    let labeled = instances.iter().filter(|i| i.label.is_some()).count();
    let summary = RunSummary {
        points: scene.points.len(),
        frames_total: scene.frames.len(),
        frames_used: frames.len(),
        superpoints: superpoints.len(),
        prompts: prompts.len(),
        segmentations: back_projections.len(),
        skipped_segmentations: skipped,
        crop_embeddings: crops.len(),
        coarse_masks: assembly.masks.len(),
        dropped_prompts: assembly.dropped_prompts.len(),
        unassigned_superpoints: assembly.unassigned.len(),
        merge_passes: merged.passes,
        instances: instances.len(),
        labeled_instances: labeled,
        label_coverage: if instances.is_empty() {
            0.0
        } else {
            labeled as f64 / instances.len() as f64
        },
        points_in_instances: instances.iter().map(|i| i.point_indices.len()).sum(),
        tags,
        hyperparameters: Hyperparameters::of(config),
        warnings,
        timings_ms: clock.timings,
    };
    Ok(RunOutput {
        summary,
        instances,
        superpoints,
        coarse_masks: assembly.masks,
        score_table: table,
    })
}

/// Writes `instances.json`, `instance_ids.txt`, `run_summary.json` and,
/// with `debug`, the superpoint partition, score table and coarse masks.
pub fn write_outputs(dir: &Path, output: &RunOutput, debug: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<InstanceRecord> = output
        .instances
        .iter()
        .map(|i| InstanceRecord {
            id: i.id,
            label: i.label.clone(),
            confidence: i.confidence,
            composition: i.composition.clone(),
            point_count: i.point_indices.len(),
        })
        .collect();
    write_json(&dir.join("instances.json"), &records)?;
    let mut ids = String::with_capacity(output.summary.points * 3);
    for id in output.instance_ids() {
        ids.push_str(&id.to_string());
        ids.push('\n');
    }
    write_text(&dir.join("instance_ids.txt"), &ids)?;
    write_json(&dir.join("run_summary.json"), &output.summary)?;
    if debug {
        let debug_dir = dir.join("debug");
        std::fs::create_dir_all(&debug_dir).map_err(|e| Error::io(&debug_dir, e))?;
        write_partition(
            &debug_dir.join("superpoints.txt"),
            &output.superpoints,
            output.summary.points,
        )?;
        output.score_table.write_csv(&debug_dir.join("score_table.csv"))?;
        write_json(&debug_dir.join("coarse_masks.json"), &output.coarse_masks)?;
    }
    Ok(())
}

/// Builds the backend named by the config.
pub fn open_backend(config: &PipelineConfig, scene: &Scene, scene_dir: &Path) -> Result<Arc<dyn Backend>> {
    match &config.backend.choice {
        None => Err(Error::Config(
            "no backend: set backend.fixture, backend.subprocess or backend.oracle".into(),
        )),
        Some(BackendChoice::Fixture(dir)) => Ok(Arc::new(FixtureStore::open(dir)?)),
        Some(BackendChoice::Subprocess(cmd)) => Ok(Arc::new(SubprocessBackend::spawn(
            cmd,
            config.backend.subprocess_workers,
            Duration::from_secs(config.backend.timeout_secs),
        )?)),
        Some(BackendChoice::Oracle(spec_path)) => {
            let spec = SceneSpec::from_json_file(spec_path)?;
            let gt = load_ground_truth(
                scene_dir,
                scene.points.len(),
                Some(&scene.points),
                DEFAULT_BOX_MIN_POINTS,
            )?
            .ok_or_else(|| Error::Config("the oracle backend needs scene ground truth".into()))?;
            Ok(Arc::new(OracleBackend::new(scene, &gt, &spec, config.seed)?))
        }
    }
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

const FAILURE_MARKER: &str = "run_failed.json";

/// Loads the scene and backend named by `config`, runs every stage and
/// writes the outputs. On failure a `run_failed.json` marker in the output
/// directory flags whatever was written as partial.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunSummary> {
    config.validate()?;
    let scene_dir = config
        .scene
        .clone()
        .ok_or_else(|| Error::Config("scene is not set".into()))?;
    let out_dir = config.output.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let marker = out_dir.join(FAILURE_MARKER);
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    }
    let result = with_workers(config.workers, || run_inner(config, &scene_dir, &out_dir))
        .and_then(|r| r);
    if let Err(e) = &result {
        let note = serde_json::json!({ "error": e.to_string() });
        if let Err(w) = write_json(&marker, &note) {
            log::error!("could not flag partial outputs: {w}");
        }
    }
    result
}

fn run_inner(config: &PipelineConfig, scene_dir: &Path, out_dir: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let scene = load_scene(scene_dir)?;
    scene.validate()?;
    let load_ms = started.elapsed().as_secs_f64() * 1e3;
    let backend = open_backend(config, &scene, scene_dir)?;
    let (mut output, recorder) = match &config.backend.record {
        Some(_) => {
            let recorder = Arc::new(RecordingBackend::new(backend));
            let bundle = BackendBundle::new(Box::new(recorder.clone()));
            (process_scene(&scene, &bundle, config)?, Some(recorder))
        }
        None => {
            let bundle = BackendBundle::new(Box::new(backend));
            (process_scene(&scene, &bundle, config)?, None)
        }
    };
    output.summary.timings_ms.insert("load".into(), load_ms);
    write_outputs(out_dir, &output, config.debug)?;
    if let (Some(dir), Some(rec)) = (&config.backend.record, recorder) {
        rec.snapshot().write(dir)?;
    }
    Ok(output.summary)
}

/// Reads `instances.json` and `instance_ids.txt` back into prediction
/// records. A directory holding neither yields no predictions.
pub fn read_predictions(dir: &Path) -> Result<Vec<PredictionRecord>> {
    let json = dir.join("instances.json");
    let ids = dir.join("instance_ids.txt");
    match (json.exists(), ids.exists()) {
        (false, false) => return Ok(Vec::new()),
        (true, false) | (false, true) => {
            return Err(Error::load(
                dir,
                "expected both instances.json and instance_ids.txt",
            ))
        }
        _ => {}
    }
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let records: Vec<InstanceRecord> =
        serde_json::from_str(&text).map_err(|e| Error::load(&json, e.to_string()))?;
    let mut points: BTreeMap<usize, Vec<u32>> =
        records.iter().map(|r| (r.id, Vec::new())).collect();
    let text = std::fs::read_to_string(&ids).map_err(|e| Error::io(&ids, e))?;
    for (p, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let id: i64 = line
            .trim()
            .parse()
            .map_err(|_| Error::load(&ids, format!("line {}: invalid id {line:?}", p + 1)))?;
        if id < 0 {
            continue;
        }
        points
            .get_mut(&(id as usize))
            .ok_or_else(|| {
                Error::load(&ids, format!("line {}: id {id} is not in instances.json", p + 1))
            })?
            .push(p as u32);
    }
    records
        .into_iter()
        .map(|r| {
            let pts = points.remove(&r.id).unwrap_or_default();
            if pts.len() != r.point_count {
                return Err(Error::load(
                    &json,
                    format!(
                        "point_count of instance {} is {}, instance_ids.txt has {}",
                        r.id,
                        r.point_count,
                        pts.len()
                    ),
                ));
            }
            Ok(PredictionRecord {
                point_indices: pts,
                label: r.label.map(|l| l.to_lowercase()),
                confidence: r.confidence.unwrap_or(0.0),
            })
        })
        .collect()
}

pub fn gt_instances(gt: &GroundTruth) -> Vec<GtInstance> {
    gt.instances()
        .into_iter()
        .filter_map(|(id, pts)| {
            gt.labels.get(&id).map(|label| GtInstance {
                label: label.to_lowercase(),
                point_indices: pts.into_iter().map(|p| p as u32).collect(),
            })
        })
        .collect()
}

/// Evaluates the predictions in `pred_dir` against the ground truth of
/// `scene_dir`. `groups` is a JSON object mapping label to group name and
/// takes precedence over any grouping stored with the ground truth.
pub fn run_eval(pred_dir: &Path, scene_dir: &Path, groups: Option<&Path>) -> Result<MetricsReport> {
    let ply = read_ply_points(&scene_dir.join("points.ply"))?;
    let gt = load_ground_truth(
        scene_dir,
        ply.points.len(),
        Some(&ply.points),
        DEFAULT_BOX_MIN_POINTS,
    )?
    .ok_or_else(|| Error::load(scene_dir, "scene has no ground truth"))?;
    let preds = read_predictions(pred_dir)?;
    if let Some(bad) = preds
        .iter()
        .flat_map(|p| &p.point_indices)
        .find(|&&i| i as usize >= ply.points.len())
    {
        return Err(Error::Consistency(format!(
            "prediction references point {bad}, scene has {}",
            ply.points.len()
        )));
    }
    let group_map: Option<BTreeMap<String, String>> = match groups {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let m: BTreeMap<String, String> =
                serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?;
            Some(m.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect())
        }
        None => gt.category_group.clone(),
    };
    Ok(evaluate(&preds, &gt_instances(&gt), group_map.as_ref()))
}

pub fn write_metrics(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_json(&dir.join("metrics.json"), report)?;
    write_text(&dir.join("metrics.txt"), &report.to_table())
}

/// Color per instance id, fixed by `seed`.
pub fn instance_color(id: i64, seed: u64) -> [u8; 3] {
    if id < 0 {
        return [128, 128, 128];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    [
        rng.random_range(30..=255),
        rng.random_range(30..=255),
        rng.random_range(30..=255),
    ]
}

/// Writes the scene points colored by predicted instance.
pub fn export_ply(scene_dir: &Path, pred_dir: &Path, out: &Path, seed: u64) -> Result<()> {
    let ply = read_ply_points(&scene_dir.join("points.ply"))?;
    let ids_path = pred_dir.join("instance_ids.txt");
    let text = std::fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
    let ids = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<i64>()
                .map_err(|_| Error::load(&ids_path, format!("invalid id {l:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.len() != ply.points.len() {
        return Err(Error::Consistency(format!(
            "{} ids for {} points",
            ids.len(),
            ply.points.len()
        )));
    }
    let colors: Vec<[u8; 3]> = ids.iter().map(|&id| instance_color(id, seed)).collect();
    crate::scene_io::ensure_parent(out)?;
    write_ply_points(out, &ply.points, Some(&colors))
}
