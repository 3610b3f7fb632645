//! Recorded backend outputs on disk.
//!
//! ```text
//! masks/frame_<id>/prompt_<id>.rle   "H W" line, then run lengths
//! tags/frame_<id>.json               ["chair", ...]
//! embeds/manifest.json               {"dim": D, "records": {"text/chair": 0, "crop/3/7": 1}}
//! embeds/vectors.f32                 record i at floats [i*D, (i+1)*D), little-endian
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Backend, FrameRef};
use crate::error::{Error, Result};
use crate::mask::{parse_runs, CropBox, Mask2d};
use crate::scene_io::{ensure_parent, write_json, write_text};

#[derive(Debug, Clone, PartialEq, Eq)]
struct RleMask {
    width: usize,
    height: usize,
    runs: Vec<u32>,
}

/// In-memory fixture contents, keyed the same way as on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureData {
    masks: BTreeMap<(u32, usize), RleMask>,
    tags: BTreeMap<u32, Vec<String>>,
    embeds: BTreeMap<String, Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dim: usize,
    records: BTreeMap<String, usize>,
}

fn text_key(tag: &str) -> String {
    format!("text/{tag}")
}

fn crop_key(frame_id: u32, prompt_id: usize) -> String {
    format!("crop/{frame_id}/{prompt_id}")
}

fn id_suffix(name: &str, prefix: &str, ext: &str) -> Option<u64> {
    name.strip_prefix(prefix)?.strip_suffix(ext)?.parse().ok()
}

impl FixtureData {
    pub fn insert_mask(&mut self, frame_id: u32, prompt_id: usize, mask: &Mask2d) {
        self.masks.insert(
            (frame_id, prompt_id),
            RleMask {
                width: mask.width(),
                height: mask.height(),
                runs: mask.to_rle(),
            },
        );
    }

    pub fn insert_tags(&mut self, frame_id: u32, tags: Vec<String>) {
        self.tags.insert(frame_id, tags);
    }

    pub fn insert_text_embedding(&mut self, tag: &str, vector: Vec<f32>) {
        self.embeds.insert(text_key(tag), vector);
    }

    pub fn insert_crop_embedding(&mut self, frame_id: u32, prompt_id: usize, vector: Vec<f32>) {
        self.embeds.insert(crop_key(frame_id, prompt_id), vector);
    }

    pub fn mask_count(&self) -> usize {
        self.masks.len()
    }

    /// Drops one recorded mask; returns whether it existed.
    pub fn remove_mask(&mut self, frame_id: u32, prompt_id: usize) -> bool {
        self.masks.remove(&(frame_id, prompt_id)).is_some()
    }

    pub fn mask_keys(&self) -> Vec<(u32, usize)> {
        self.masks.keys().copied().collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (&(frame, prompt), m) in &self.masks {
            let runs: Vec<String> = m.runs.iter().map(|r| r.to_string()).collect();
            write_text(
                &dir.join(format!("masks/frame_{frame}/prompt_{prompt}.rle")),
                &format!("{} {}\n{}\n", m.height, m.width, runs.join(" ")),
            )?;
        }
        for (&frame, tags) in &self.tags {
            write_json(&dir.join(format!("tags/frame_{frame}.json")), tags)?;
        }
        let dim = self.embeds.values().next().map_or(0, Vec::len);
        let mut records = BTreeMap::new();
        let mut floats: Vec<u8> = Vec::with_capacity(self.embeds.len() * dim * 4);
        for (i, (key, v)) in self.embeds.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::InvalidArgument(format!(
                    "embedding {key} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            records.insert(key.clone(), i);
            for x in v {
                floats.extend_from_slice(&x.to_le_bytes());
            }
        }
        write_json(&dir.join("embeds/manifest.json"), &Manifest { dim, records })?;
        let path = dir.join("embeds/vectors.f32");
        ensure_parent(&path)?;
        fs::write(&path, floats).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::load(dir, "fixture directory not found"));
        }
        let mut data = FixtureData::default();

        let masks_dir = dir.join("masks");
        if masks_dir.is_dir() {
            for frame_dir in read_dir_sorted(&masks_dir)? {
                let name = file_name(&frame_dir);
                let Some(frame) = id_suffix(&name, "frame_", "") else {
                    continue;
                };
                for file in read_dir_sorted(&frame_dir)? {
                    let Some(prompt) = id_suffix(&file_name(&file), "prompt_", ".rle") else {
                        continue;
                    };
                    let mask = read_rle(&file)?;
                    data.masks.insert((frame as u32, prompt as usize), mask);
                }
            }
        }

        let tags_dir = dir.join("tags");
        if tags_dir.is_dir() {
            for file in read_dir_sorted(&tags_dir)? {
                let Some(frame) = id_suffix(&file_name(&file), "frame_", ".json") else {
                    continue;
                };
                let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
                let tags: Vec<String> = serde_json::from_str(&text)
                    .map_err(|e| Error::load(&file, e.to_string()))?;
                data.tags.insert(frame as u32, tags);
            }
        }

        let manifest_path = dir.join("embeds/manifest.json");
        if manifest_path.is_file() {
            let text =
                fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let manifest: Manifest = serde_json::from_str(&text)
                .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
            let vec_path = dir.join("embeds/vectors.f32");
            let bytes = fs::read(&vec_path).map_err(|e| Error::io(&vec_path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::load(&vec_path, "length is not a multiple of 4"));
            }
            let floats: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            for (key, index) in manifest.records {
                let start = index * manifest.dim;
                let v = floats.get(start..start + manifest.dim).ok_or_else(|| {
                    Error::load(&vec_path, format!("record {key} at {index} is past the end"))
                })?;
                data.embeds.insert(key, v.to_vec());
            }
        }
        Ok(data)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn read_rle(path: &Path) -> Result<RleMask> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<usize> = lines
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::load(path, "first line must be \"H W\""))?;
    let [height, width] = header[..] else {
        return Err(Error::load(path, "first line must be \"H W\""));
    };
    let runs = parse_runs(lines.next().unwrap_or("")).map_err(|e| Error::load(path, e.to_string()))?;
    Ok(RleMask {
        width,
        height,
        runs,
    })
}

/// Read-only fixture backend.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    data: FixtureData,
}

impl FixtureStore {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(FixtureStore {
            data: FixtureData::read(dir)?,
        })
    }

    pub fn from_data(data: FixtureData) -> Self {
        FixtureStore { data }
    }

    pub fn data(&self) -> &FixtureData {
        &self.data
    }
}

impl Backend for FixtureStore {
    fn segment(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        _pixels: &[(usize, usize)],
    ) -> Result<Option<Mask2d>> {
        match self.data.masks.get(&(frame.frame_id, prompt_id)) {
            Some(m) => Mask2d::from_rle(m.width, m.height, &m.runs)
                .map(Some)
                .map_err(|e| {
                    Error::Backend(format!(
                        "fixture mask frame {} prompt {prompt_id}: {e}",
                        frame.frame_id
                    ))
                }),
            None => Ok(None),
        }
    }

    fn tag(&self, frame: FrameRef<'_>) -> Result<Vec<String>> {
        Ok(self.data.tags.get(&frame.frame_id).cloned().unwrap_or_default())
    }

    fn embed_crop(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        _crop: CropBox,
        _mask: &Mask2d,
    ) -> Result<Option<Vec<f32>>> {
        Ok(self.data.embeds.get(&crop_key(frame.frame_id, prompt_id)).cloned())
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let missing: Vec<&str> = texts
            .iter()
            .filter(|t| !self.data.embeds.contains_key(&text_key(t)))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Backend(format!(
                "no fixture text embedding for: {}",
                missing.join(", ")
            )));
        }
        Ok(texts
            .iter()
            .map(|t| self.data.embeds[&text_key(t)].clone())
            .collect())
    }
}

/// Passes calls through to `inner` and keeps every answer.
pub struct RecordingBackend<B> {
    inner: B,
    data: Mutex<FixtureData>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        RecordingBackend {
            inner,
            data: Mutex::new(FixtureData::default()),
        }
    }

    pub fn snapshot(&self) -> FixtureData {
        self.data.lock().expect("recorder lock").clone()
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn segment(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        pixels: &[(usize, usize)],
    ) -> Result<Option<Mask2d>> {
        let mask = self.inner.segment(frame, prompt_id, pixels)?;
        if let Some(m) = &mask {
            self.data
                .lock()
                .expect("recorder lock")
                .insert_mask(frame.frame_id, prompt_id, m);
        }
        Ok(mask)
    }

    fn tag(&self, frame: FrameRef<'_>) -> Result<Vec<String>> {
        let tags = self.inner.tag(frame)?;
        self.data
            .lock()
            .expect("recorder lock")
            .insert_tags(frame.frame_id, tags.clone());
        Ok(tags)
    }

    fn embed_crop(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        crop: CropBox,
        mask: &Mask2d,
    ) -> Result<Option<Vec<f32>>> {
        let v = self.inner.embed_crop(frame, prompt_id, crop, mask)?;
        if let Some(v) = &v {
            self.data
                .lock()
                .expect("recorder lock")
                .insert_crop_embedding(frame.frame_id, prompt_id, v.clone());
        }
        Ok(v)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let rows = self.inner.embed_texts(texts)?;
        let mut data = self.data.lock().expect("recorder lock");
        for (t, v) in texts.iter().zip(&rows) {
            data.insert_text_embedding(t, v.clone());
        }
        Ok(rows)
    }
}
