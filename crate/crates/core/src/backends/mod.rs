//! External perception: segmentation, tagging and embedding.
//!
//! Pipeline code talks to a [`BackendBundle`], which wraps any [`Backend`]
//! and enforces mask sizes and unit-norm embeddings.

mod fixture;
mod subprocess;

pub use fixture::{FixtureData, FixtureStore, RecordingBackend};
pub use subprocess::{serve, SubprocessBackend, DEFAULT_TIMEOUT};

use crate::error::{Error, Result};
use crate::mask::{CropBox, Mask2d};
use crate::scene_io::PosedFrame;

/// The parts of a frame a backend may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameRef<'a> {
    pub frame_id: u32,
    pub width: usize,
    pub height: usize,
    pub image: &'a str,
}

impl<'a> From<&'a PosedFrame> for FrameRef<'a> {
    fn from(f: &'a PosedFrame) -> Self {
        FrameRef {
            frame_id: f.frame_id,
            width: f.width,
            height: f.height,
            image: &f.image_ref,
        }
    }
}

pub trait Backend: Send + Sync {
    /// Mask for `prompt_id` in `frame` guided by pixel prompts `(u, v)`.
    /// `None` when the backend has nothing for this pair.
    fn segment(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        pixels: &[(usize, usize)],
    ) -> Result<Option<Mask2d>>;

    fn tag(&self, frame: FrameRef<'_>) -> Result<Vec<String>>;

    /// Embedding of the image region `crop` cut around `mask`.
    fn embed_crop(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        crop: CropBox,
        mask: &Mask2d,
    ) -> Result<Option<Vec<f32>>>;

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>>;
}

impl<T: Backend + ?Sized> Backend for std::sync::Arc<T> {
    fn segment(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        pixels: &[(usize, usize)],
    ) -> Result<Option<Mask2d>> {
        (**self).segment(frame, prompt_id, pixels)
    }

    fn tag(&self, frame: FrameRef<'_>) -> Result<Vec<String>> {
        (**self).tag(frame)
    }

    fn embed_crop(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        crop: CropBox,
        mask: &Mask2d,
    ) -> Result<Option<Vec<f32>>> {
        (**self).embed_crop(frame, prompt_id, crop, mask)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        (**self).embed_texts(texts)
    }
}

/// Validating front for a [`Backend`].
pub struct BackendBundle {
    inner: Box<dyn Backend>,
}

impl BackendBundle {
    pub fn new(inner: Box<dyn Backend>) -> Self {
        BackendBundle { inner }
    }

    pub fn segment(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        pixels: &[(usize, usize)],
    ) -> Result<Option<Mask2d>> {
        let mask = self.inner.segment(frame, prompt_id, pixels)?;
        if let Some(m) = &mask {
            if m.width() != frame.width || m.height() != frame.height {
                return Err(Error::Backend(format!(
                    "mask for prompt {prompt_id} in frame {} is {}x{}, frame is {}x{}",
                    frame.frame_id,
                    m.width(),
                    m.height(),
                    frame.width,
                    frame.height
                )));
            }
        }
        Ok(mask)
    }

    pub fn tag(&self, frame: FrameRef<'_>) -> Result<Vec<String>> {
        self.inner.tag(frame)
    }

    pub fn embed_crop(
        &self,
        frame: FrameRef<'_>,
        prompt_id: usize,
        crop: CropBox,
        mask: &Mask2d,
    ) -> Result<Option<Vec<f32>>> {
        match self.inner.embed_crop(frame, prompt_id, crop, mask)? {
            Some(v) => normalized(v).map(Some),
            None => Ok(None),
        }
    }

    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.inner.embed_texts(texts)?;
        if rows.len() != texts.len() {
            return Err(Error::Backend(format!(
                "asked for {} text embeddings, got {}",
                texts.len(),
                rows.len()
            )));
        }
        let rows: Vec<Vec<f32>> = rows.into_iter().map(normalized).collect::<Result<_>>()?;
        if rows.iter().any(|r| r.len() != rows[0].len()) {
            return Err(Error::Backend("text embeddings differ in dimension".into()));
        }
        Ok(rows)
    }
}

/// Scales `v` to unit length.
pub fn normalized(mut v: Vec<f32>) -> Result<Vec<f32>> {
    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if v.is_empty() || !norm.is_finite() || norm == 0.0 {
        return Err(Error::Backend(
            "backend returned an empty, zero or non-finite embedding".into(),
        ));
    }
    for x in &mut v {
        *x = (*x as f64 / norm) as f32;
    }
    Ok(v)
}
