//! Open-tag collection and cosine matching of crop embeddings against tags.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merging::Instance;

const DEFAULT_BLOCKLIST: &str = include_str!("../data/blocklist.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStrategy {
    /// Label of the member with the highest similarity.
    #[default]
    Score,
    /// Most frequent member label.
    Number,
}

impl std::str::FromStr for LabelStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "score" => Ok(LabelStrategy::Score),
            "number" => Ok(LabelStrategy::Number),
            other => Err(Error::Config(format!("unknown label strategy {other:?}"))),
        }
    }
}

/// Case-folded tags that never become labels.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist(BTreeSet<String>);

impl Blocklist {
    /// One tag per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        Blocklist(
            text.lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .map(fold)
                .filter(|t| !t.is_empty())
                .collect(),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    /// The list shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_BLOCKLIST)
    }

    pub fn from_tags<I: IntoIterator<Item = S>, S: AsRef<str>>(tags: I) -> Self {
        Blocklist(tags.into_iter().map(|t| fold(t.as_ref())).collect())
    }

    pub fn contains(&self, tag: &str) -> bool {
        self.0.contains(&fold(tag))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn fold(tag: &str) -> String {
    tag.trim().to_lowercase()
}

/// Union of per-frame tags, case-folded, in first-seen order, minus the
/// blocklist.
pub fn collect_open_tags<S: AsRef<str>>(per_frame_tags: &[Vec<S>], blocklist: &Blocklist) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for tag in per_frame_tags.iter().flatten() {
        let t = fold(tag.as_ref());
        if t.is_empty() || blocklist.0.contains(&t) {
            continue;
        }
        if seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagSet {
    pub tags: Vec<String>,
    /// One unit-norm row per tag.
    pub text_embeddings: Vec<Vec<f32>>,
}

impl TagSet {
    pub fn new(tags: Vec<String>, text_embeddings: Vec<Vec<f32>>) -> Result<Self> {
        if tags.len() != text_embeddings.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tags but {} text embeddings",
                tags.len(),
                text_embeddings.len()
            )));
        }
        let unique: BTreeSet<&String> = tags.iter().collect();
        if unique.len() != tags.len() {
            return Err(Error::InvalidArgument("duplicate tags".into()));
        }
        if let Some(first) = text_embeddings.first() {
            if text_embeddings.iter().any(|r| r.len() != first.len()) {
                return Err(Error::InvalidArgument(
                    "text embeddings differ in dimension".into(),
                ));
            }
        }
        Ok(TagSet {
            tags,
            text_embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropEmbedding {
    pub coarse_mask_id: usize,
    pub view_id: u32,
    pub vector: Vec<f32>,
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Err(Error::InvalidArgument("zero vector in cosine similarity".into()));
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Best tag of one coarse mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskMatch {
    pub tag_index: usize,
    pub score: f64,
}

/// For every coarse mask with at least one crop: similarity to each tag is
/// the max over its views, and the match is the argmax (ties to the lower
/// tag index).
pub fn match_coarse_masks(
    crops: &[CropEmbedding],
    tag_set: &TagSet,
) -> Result<BTreeMap<usize, MaskMatch>> {
    let mut by_mask: BTreeMap<usize, Vec<&CropEmbedding>> = BTreeMap::new();
    for c in crops {
        by_mask.entry(c.coarse_mask_id).or_default().push(c);
    }
    if tag_set.is_empty() {
        return Ok(BTreeMap::new());
    }
    let entries: Vec<(usize, Vec<&CropEmbedding>)> = by_mask.into_iter().collect();
    let matched: Vec<(usize, MaskMatch)> = entries
        .par_iter()
        .map(|(id, views)| {
            let mut sims = vec![f64::NEG_INFINITY; tag_set.len()];
            for view in views {
                for (c, text) in tag_set.text_embeddings.iter().enumerate() {
                    let s = cosine_similarity(&view.vector, text)?;
                    if s > sims[c] {
                        sims[c] = s;
                    }
                }
            }
            let mut best = MaskMatch {
                tag_index: 0,
                score: sims[0],
            };
            for (c, &s) in sims.iter().enumerate().skip(1) {
                if s > best.score {
                    best = MaskMatch {
                        tag_index: c,
                        score: s,
                    };
                }
            }
            Ok((*id, best))
        })
        .collect::<Result<_>>()?;
    Ok(matched.into_iter().collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelReport {
    /// Composition members that had no crop embedding.
    pub members_without_crops: Vec<usize>,
    pub unlabeled_instances: Vec<usize>,
}

/// Chooses one label per instance from its members' matches.
pub fn select_label(
    composition: &[usize],
    matches: &BTreeMap<usize, MaskMatch>,
    strategy: LabelStrategy,
) -> Option<MaskMatch> {
    let members: Vec<MaskMatch> = composition
        .iter()
        .filter_map(|id| matches.get(id).copied())
        .collect();
    match strategy {
        LabelStrategy::Score => members.into_iter().fold(None, |best, m| match best {
            Some(b) if b.score >= m.score => Some(b),
            _ => Some(m),
        }),
        LabelStrategy::Number => {
            // tag -> (votes, best score)
            let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
            for m in &members {
                let e = tally.entry(m.tag_index).or_insert((0, f64::NEG_INFINITY));
                e.0 += 1;
                e.1 = e.1.max(m.score);
            }
            let mut best: Option<(usize, usize, f64)> = None;
            for (&tag, &(votes, score)) in &tally {
                let better = match best {
                    None => true,
                    Some((_, bv, bs)) => votes > bv || (votes == bv && score > bs),
                };
                if better {
                    best = Some((tag, votes, score));
                }
            }
            best.map(|(tag_index, _, score)| MaskMatch { tag_index, score })
        }
    }
}

/// Writes `label` and `confidence` into every instance that has at least
/// one matched member; the rest keep `None`.
pub fn match_labels(
    instances: &mut [Instance],
    crops: &[CropEmbedding],
    tag_set: &TagSet,
    strategy: LabelStrategy,
) -> Result<LabelReport> {
    let matches = match_coarse_masks(crops, tag_set)?;
    let with_crops: BTreeSet<usize> = crops.iter().map(|c| c.coarse_mask_id).collect();
    let mut report = LabelReport::default();
    for inst in instances.iter_mut() {
        for &m in &inst.composition {
            if !with_crops.contains(&m) {
                report.members_without_crops.push(m);
            }
        }
        match select_label(&inst.composition, &matches, strategy) {
            Some(best) => {
                inst.label = Some(tag_set.tags[best.tag_index].clone());
                inst.confidence = Some(best.score);
            }
            None => {
                inst.label = None;
                inst.confidence = None;
                report.unlabeled_instances.push(inst.id);
            }
        }
    }
    if !report.members_without_crops.is_empty() {
        log::warn!(
            "{} coarse masks had no crop embedding and were ignored for labeling",
            report.members_without_crops.len()
        );
    }
    Ok(report)
}
