//! Pipeline configuration with flat dotted keys.
//!
//! Every field is reachable through [`PipelineConfig::set`] under the key
//! listed in [`KEYS`]; the CLI builds its flags and reads config files from
//! the same table.

use std::path::PathBuf;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::DEFAULT_EPS_DEPTH;
use crate::labeling::LabelStrategy;
use crate::merging::{ColumnNorm, MergeConfig, DEFAULT_TAU};
use crate::overlap::DEFAULT_THETA;
use crate::superpoints::SuperpointConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    /// Directory in the fixture layout.
    Fixture(PathBuf),
    /// Shell command speaking the line protocol.
    Subprocess(String),
    /// Scene spec JSON; answers come from the scene's ground truth.
    Oracle(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendConfig {
    pub choice: Option<BackendChoice>,
    pub subprocess_workers: usize,
    pub timeout_secs: u64,
    /// Write every backend answer of the run to this fixture directory.
    pub record: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            choice: None,
            subprocess_workers: 1,
            timeout_secs: 60,
            record: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub scene: Option<PathBuf>,
    pub output: PathBuf,
    pub backend: BackendConfig,
    pub n_prompts: usize,
    pub frame_stride: usize,
    /// Views per prompt (T).
    pub views: usize,
    pub theta: f64,
    pub tau: f64,
    pub column_norm: ColumnNorm,
    pub max_merge_passes: Option<usize>,
    pub label_strategy: LabelStrategy,
    pub k_pixel_prompts: usize,
    pub eps_depth: f64,
    /// Crop box growth on each side, as a fraction of the box size.
    pub crop_padding: f64,
    pub superpoint: SuperpointConfig,
    /// Replaces the built-in blocklist.
    pub blocklist: Option<PathBuf>,
    pub seed: u64,
    /// Worker threads; `None` uses every core.
    pub workers: Option<usize>,
    pub debug: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene: None,
            output: PathBuf::from("ovlift_out"),
            backend: BackendConfig::default(),
            n_prompts: 200,
            frame_stride: 10,
            views: 5,
            theta: DEFAULT_THETA,
            tau: DEFAULT_TAU,
            column_norm: ColumnNorm::L1,
            max_merge_passes: None,
            label_strategy: LabelStrategy::Score,
            k_pixel_prompts: 5,
            eps_depth: DEFAULT_EPS_DEPTH,
            crop_padding: 0.1,
            superpoint: SuperpointConfig::default(),
            blocklist: None,
            seed: 0,
            workers: None,
            debug: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Path,
    Text,
    Integer,
    Float,
    Bool,
}

/// `(key, kind, help)` for every settable field.
pub const KEYS: &[(&str, ValueKind, &str)] = &[
    ("scene", ValueKind::Path, "scene directory"),
    ("output", ValueKind::Path, "output directory"),
    ("backend.fixture", ValueKind::Path, "fixture directory to answer backend calls"),
    ("backend.subprocess", ValueKind::Text, "shell command of a backend worker"),
    ("backend.oracle", ValueKind::Path, "synthetic scene spec for the ground-truth oracle"),
    ("backend.subprocess_workers", ValueKind::Integer, "number of backend worker processes"),
    ("backend.timeout_secs", ValueKind::Integer, "per-request backend timeout in seconds"),
    ("backend.record", ValueKind::Path, "record backend answers into this fixture directory"),
    ("n_prompts", ValueKind::Integer, "number of 3D prompts (largest superpoints)"),
    ("frame_stride", ValueKind::Integer, "keep every k-th frame"),
    ("views", ValueKind::Integer, "views segmented per prompt"),
    ("theta", ValueKind::Float, "overlap ratio a superpoint must exceed, in [0, 1)"),
    ("tau", ValueKind::Float, "merge threshold, in (0, 1]"),
    ("column_norm", ValueKind::Text, "norm of score-table columns: l1, l2 or nonzero"),
    ("max_merge_passes", ValueKind::Integer, "cap on merging passes"),
    ("label_strategy", ValueKind::Text, "score or number"),
    ("k_pixel_prompts", ValueKind::Integer, "pixel prompts per view"),
    ("eps_depth", ValueKind::Float, "depth tolerance of the visibility test, meters"),
    ("crop_padding", ValueKind::Float, "crop box padding as a fraction of its size"),
    ("superpoint.k_nn", ValueKind::Integer, "neighbors for normals and the point graph"),
    ("superpoint.k_fh", ValueKind::Float, "graph segmentation scale"),
    ("superpoint.min_size", ValueKind::Integer, "minimum superpoint size"),
    ("blocklist", ValueKind::Path, "tag blocklist file replacing the built-in one"),
    ("seed", ValueKind::Integer, "seed for the oracle and export colors"),
    ("workers", ValueKind::Integer, "worker threads"),
    ("debug", ValueKind::Bool, "write intermediate artifacts"),
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scene" => self.scene = Some(value.into()),
            "output" => self.output = value.into(),
            "backend.fixture" => self.backend.choice = Some(BackendChoice::Fixture(value.into())),
            "backend.subprocess" => {
                self.backend.choice = Some(BackendChoice::Subprocess(value.into()))
            }
            "backend.oracle" => self.backend.choice = Some(BackendChoice::Oracle(value.into())),
            "backend.subprocess_workers" => self.backend.subprocess_workers = parse(key, value)?,
            "backend.timeout_secs" => self.backend.timeout_secs = parse(key, value)?,
            "backend.record" => self.backend.record = Some(value.into()),
            "n_prompts" => self.n_prompts = parse(key, value)?,
            "frame_stride" => self.frame_stride = parse(key, value)?,
            "views" => self.views = parse(key, value)?,
            "theta" => self.theta = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "column_norm" => {
                self.column_norm = value.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))?
            }
            "max_merge_passes" => self.max_merge_passes = Some(parse(key, value)?),
            "label_strategy" => {
                self.label_strategy = value.parse().map_err(|e: Error| Error::Config(format!("{key}: {e}")))?
            }
            "k_pixel_prompts" => self.k_pixel_prompts = parse(key, value)?,
            "eps_depth" => self.eps_depth = parse(key, value)?,
            "crop_padding" => self.crop_padding = parse(key, value)?,
            "superpoint.k_nn" => self.superpoint.k_nn = parse(key, value)?,
            "superpoint.k_fh" => self.superpoint.k_fh = parse(key, value)?,
            "superpoint.min_size" => self.superpoint.min_size = parse(key, value)?,
            "blocklist" => self.blocklist = Some(value.into()),
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = Some(parse(key, value)?),
            "debug" => self.debug = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            tau: self.tau,
            column_norm: self.column_norm,
            max_passes: self.max_merge_passes,
        }
    }

    /// Range checks only; paths are checked when they are opened.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_prompts == 0 {
            return fail("n_prompts must be >= 1".into());
        }
        if self.frame_stride == 0 {
            return fail("frame_stride must be >= 1".into());
        }
        if self.views == 0 {
            return fail("views must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.theta) {
            return fail(format!("theta must be in [0, 1), got {}", self.theta));
        }
        self.merge_config().validate()?;
        if self.k_pixel_prompts == 0 {
            return fail("k_pixel_prompts must be >= 1".into());
        }
        if !(self.eps_depth > 0.0 && self.eps_depth.is_finite()) {
            return fail(format!("eps_depth must be > 0, got {}", self.eps_depth));
        }
        if !(self.crop_padding >= 0.0 && self.crop_padding.is_finite()) {
            return fail(format!("crop_padding must be >= 0, got {}", self.crop_padding));
        }
        if self.superpoint.k_nn == 0 || self.superpoint.min_size == 0 {
            return fail("superpoint.k_nn and superpoint.min_size must be >= 1".into());
        }
        if !(self.superpoint.k_fh >= 0.0 && self.superpoint.k_fh.is_finite()) {
            return fail("superpoint.k_fh must be >= 0".into());
        }
        if self.workers == Some(0) || self.backend.subprocess_workers == 0 {
            return fail("worker counts must be >= 1".into());
        }
        if self.backend.timeout_secs == 0 {
            return fail("backend.timeout_secs must be >= 1".into());
        }
        Ok(())
    }
}
