//! Binary 2D masks, their run-length encoding, and crop boxes.
//!
//! The at-rest encoding is row-major and lists alternating run lengths,
//! always starting with a run of zeros (which may be empty). A mask whose
//! first pixel is set therefore encodes with a leading `0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2d {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask2d {
    pub fn new(width: usize, height: usize) -> Self {
        Mask2d {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "mask data has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Mask2d {
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

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Tight bounding box of the set pixels, or `None` for an empty mask.
    pub fn bounding_box(&self) -> Option<CropBox> {
        let mut bbox: Option<CropBox> = None;
        for y in 0..self.height {
            let row = &self.data[y * self.width..(y + 1) * self.width];
            let Some(first) = row.iter().position(|&b| b) else {
                continue;
            };
            let last = row.iter().rposition(|&b| b).unwrap_or(first);
            let b = bbox.get_or_insert(CropBox {
                x0: first,
                y0: y,
                x1: last + 1,
                y1: y + 1,
            });
            b.x0 = b.x0.min(first);
            b.x1 = b.x1.max(last + 1);
            b.y1 = y + 1;
        }
        bbox
    }

    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.data {
            if b == current {
                run += 1;
            } else {
                runs.push(run);
                current = b;
                run = 1;
            }
        }
        runs.push(run);
        runs
    }

    pub fn from_rle(width: usize, height: usize, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        if total != (width * height) as u64 {
            return Err(Error::Rle(format!(
                "runs sum to {total}, expected {width}x{height} = {}",
                width * height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        let mut value = false;
        for &run in runs {
            data.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        Ok(Mask2d {
            width,
            height,
            data,
        })
    }

    /// Parses whitespace-separated run lengths.
    pub fn from_rle_str(width: usize, height: usize, text: &str) -> Result<Self> {
        let runs = parse_runs(text)?;
        Self::from_rle(width, height, &runs)
    }

    pub fn to_rle_string(&self) -> String {
        self.to_rle()
            .iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub(crate) fn parse_runs(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>()
                .map_err(|_| Error::Rle(format!("invalid run length {tok:?}")))
        })
        .collect()
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl CropBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Grows the box by `fraction` of its size on every side, clamped to the image.
    pub fn padded(&self, fraction: f64, image_width: usize, image_height: usize) -> CropBox {
        let pad_x = (self.width() as f64 * fraction).round() as usize;
        let pad_y = (self.height() as f64 * fraction).round() as usize;
        CropBox {
            x0: self.x0.saturating_sub(pad_x),
            y0: self.y0.saturating_sub(pad_y),
            x1: (self.x1 + pad_x).min(image_width),
            y1: (self.y1 + pad_y).min(image_height),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decode_runs_start_with_zeros() {
        let m = Mask2d::from_rle_str(2, 2, "1 3").unwrap();
        assert_eq!(m.as_slice(), &[false, true, true, true]);
        let m = Mask2d::from_rle_str(2, 2, "0 1 3").unwrap();
        assert_eq!(m.as_slice(), &[true, false, false, false]);
    }

    #[test]
    fn bad_run_sum_is_rejected() {
        assert!(matches!(
            Mask2d::from_rle_str(2, 2, "1 1"),
            Err(Error::Rle(_))
        ));
        assert!(Mask2d::from_rle_str(2, 2, "1 x 2").is_err());
    }

    #[test]
    fn bounding_box_and_padding() {
        let mut m = Mask2d::new(20, 10);
        assert_eq!(m.bounding_box(), None);
        m.set(5, 2, true);
        m.set(14, 7, true);
        let b = m.bounding_box().unwrap();
        assert_eq!(
            b,
            CropBox {
                x0: 5,
                y0: 2,
                x1: 15,
                y1: 8
            }
        );
        let p = b.padded(0.1, 20, 10);
        assert_eq!(
            p,
            CropBox {
                x0: 4,
                y0: 1,
                x1: 16,
                y1: 9
            }
        );
        let clamped = b.padded(1.0, 20, 10);
        assert_eq!((clamped.x0, clamped.x1, clamped.y1), (0, 20, 10));
    }

    proptest! {
        #[test]
        fn rle_roundtrip(w in 1usize..12, h in 1usize..12, seed in proptest::collection::vec(any::<bool>(), 144)) {
            let data: Vec<bool> = seed.into_iter().take(w * h).collect();
            let m = Mask2d::from_vec(w, h, data).unwrap();
            let back = Mask2d::from_rle_str(w, h, &m.to_rle_string()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
