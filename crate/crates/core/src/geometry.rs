//! Pinhole projection, depth-map visibility, view ranking, pixel prompt
//! sampling and mask back-projection.
//!
//! Pixel lookups round continuous coordinates half-up to the nearest integer
//! pixel; a point whose rounded pixel falls outside the image is invisible.

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask2d;
use crate::scene_io::PosedFrame;

pub const DEFAULT_EPS_DEPTH: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
    /// Camera-space depth in meters, always positive.
    pub z: f64,
}

impl PixelPoint {
    /// Nearest integer pixel (half-up), if it lies inside a `width x height` image.
    #[inline]
    pub fn pixel(&self, width: usize, height: usize) -> Option<(usize, usize)> {
        let x = (self.u + 0.5).floor();
        let y = (self.v + 0.5).floor();
        if x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Points of the scene selected by the `prompt_id`-th mask in view `view_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackProjection {
    pub prompt_id: usize,
    pub view_id: u32,
    /// Sorted, deduplicated point indices.
    pub point_indices: Vec<u32>,
}

#[inline]
pub fn project_point(p: &Point3<f64>, frame: &PosedFrame) -> Option<PixelPoint> {
    let c = frame.world_to_cam * p;
    if c.z <= 0.0 {
        return None;
    }
    let k = &frame.intrinsics;
    let u = k.fx * c.x / c.z + k.cx;
    let v = k.fy * c.y / c.z + k.cy;
    if u.is_finite()
        && v.is_finite()
        && u >= 0.0
        && v >= 0.0
        && u < frame.width as f64
        && v < frame.height as f64
    {
        Some(PixelPoint { u, v, z: c.z })
    } else {
        None
    }
}

/// Rounded pixel of `p` if it projects into the frame and agrees with the
/// depth map within `eps_depth`.
#[inline]
fn visible_pixel(p: &Point3<f64>, frame: &PosedFrame, eps_depth: f64) -> Option<(usize, usize)> {
    let px = project_point(p, frame)?;
    let (x, y) = px.pixel(frame.width, frame.height)?;
    let d = frame.depth.get(x, y) as f64;
    (d > 0.0 && (px.z - d).abs() <= eps_depth).then_some((x, y))
}

pub fn visible_points(
    points: &[Point3<f64>],
    indices: &[u32],
    frame: &PosedFrame,
    eps_depth: f64,
) -> Vec<u32> {
    indices
        .iter()
        .copied()
        .filter(|&i| visible_pixel(&points[i as usize], frame, eps_depth).is_some())
        .collect()
}

/// Per-frame visibility of every scene point: the flat pixel index of each
/// visible point, or `u32::MAX`. Equivalent to calling [`visible_points`]
/// and rounding, computed once per frame.
#[derive(Debug, Clone)]
pub struct FrameVisibility {
    pixel_of: Vec<u32>,
}

pub const INVISIBLE: u32 = u32::MAX;

impl FrameVisibility {
    pub fn compute(points: &[Point3<f64>], frame: &PosedFrame, eps_depth: f64) -> Self {
        let pixel_of = points
            .iter()
            .map(|p| {
                visible_pixel(p, frame, eps_depth)
                    .map_or(INVISIBLE, |(x, y)| (y * frame.width + x) as u32)
            })
            .collect();
        FrameVisibility { pixel_of }
    }

    pub fn compute_all(
        points: &[Point3<f64>],
        frames: &[PosedFrame],
        eps_depth: f64,
    ) -> Vec<FrameVisibility> {
        frames
            .par_iter()
            .map(|f| Self::compute(points, f, eps_depth))
            .collect()
    }

    #[inline]
    pub fn is_visible(&self, point: u32) -> bool {
        self.pixel_of[point as usize] != INVISIBLE
    }

    #[inline]
    pub fn pixel(&self, point: u32) -> Option<usize> {
        let p = self.pixel_of[point as usize];
        (p != INVISIBLE).then_some(p as usize)
    }

    pub fn count_visible(&self, indices: &[u32]) -> usize {
        indices.iter().filter(|&&i| self.is_visible(i)).count()
    }

    /// Same result as [`back_project_mask`] for the frame this was computed on.
    pub fn back_project(&self, mask: &Mask2d) -> Vec<u32> {
        let bits = mask.as_slice();
        self.pixel_of
            .iter()
            .enumerate()
            .filter(|(_, &px)| px != INVISIBLE && bits[px as usize])
            .map(|(i, _)| i as u32)
            .collect()
    }
}

/// A frame chosen for a prompt, with the number of prompt points it sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankedView {
    /// Index into the frame slice that was ranked.
    pub frame_index: usize,
    pub frame_id: u32,
    pub visible_count: usize,
}

/// Orders frames by descending visible count (ties to lower frame id),
/// dropping frames that see nothing, and keeps the first `t`.
pub fn rank_by_counts(frames: &[PosedFrame], counts: &[usize], t: usize) -> Vec<RankedView> {
    let mut views: Vec<RankedView> = frames
        .iter()
        .zip(counts)
        .enumerate()
        .filter(|(_, (_, &c))| c > 0)
        .map(|(i, (f, &c))| RankedView {
            frame_index: i,
            frame_id: f.frame_id,
            visible_count: c,
        })
        .collect();
    views.sort_by(|a, b| {
        b.visible_count
            .cmp(&a.visible_count)
            .then(a.frame_id.cmp(&b.frame_id))
    });
    views.truncate(t);
    views
}

/// Top-`t` least occluded views of a prompt.
pub fn rank_views(
    points: &[Point3<f64>],
    prompt: &[u32],
    frames: &[PosedFrame],
    t: usize,
    eps_depth: f64,
) -> Result<Vec<RankedView>> {
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let counts: Vec<usize> = frames
        .iter()
        .map(|f| visible_points(points, prompt, f, eps_depth).len())
        .collect();
    Ok(rank_by_counts(frames, &counts, t))
}

/// Cached-visibility variant of [`rank_views`].
pub fn rank_views_cached(
    prompt: &[u32],
    frames: &[PosedFrame],
    visibility: &[FrameVisibility],
    t: usize,
) -> Result<Vec<RankedView>> {
    if t == 0 {
        return Err(Error::InvalidArgument("T must be >= 1".into()));
    }
    let counts: Vec<usize> = visibility.iter().map(|v| v.count_visible(prompt)).collect();
    Ok(rank_by_counts(frames, &counts, t))
}

fn dist2(a: &PixelPoint, b: &PixelPoint) -> f64 {
    (a.u - b.u).powi(2) + (a.v - b.v).powi(2)
}

/// Farthest-point sampling in pixel space, seeded at the pixel nearest the
/// centroid. Returns indices into `pixels` in selection order; ties go to the
/// lower index.
pub fn sample_pixel_prompts(pixels: &[PixelPoint], k: usize) -> Result<Vec<usize>> {
    if pixels.is_empty() {
        return Err(Error::InvalidArgument("no pixels to sample from".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let n = pixels.len() as f64;
    let centroid = PixelPoint {
        u: pixels.iter().map(|p| p.u).sum::<f64>() / n,
        v: pixels.iter().map(|p| p.v).sum::<f64>() / n,
        z: 0.0,
    };
    let argmin = |f: &dyn Fn(usize) -> f64| -> usize {
        (0..pixels.len())
            .min_by(|&a, &b| f(a).total_cmp(&f(b)).then(a.cmp(&b)))
            .unwrap_or(0)
    };
    let seed = argmin(&|i| dist2(&pixels[i], &centroid));

    let mut chosen = vec![seed];
    let mut nearest: Vec<f64> = pixels.iter().map(|p| dist2(p, &pixels[seed])).collect();
    nearest[seed] = f64::NEG_INFINITY;
    while chosen.len() < k.min(pixels.len()) {
        let next = argmin(&|i| -nearest[i]);
        chosen.push(next);
        for (d, p) in nearest.iter_mut().zip(pixels) {
            *d = d.min(dist2(p, &pixels[next]));
        }
        nearest[next] = f64::NEG_INFINITY;
    }
    Ok(chosen)
}

/// Scene points that project onto a set mask pixel and pass the depth test.
pub fn back_project_mask(
    prompt_id: usize,
    frame: &PosedFrame,
    mask: &Mask2d,
    points: &[Point3<f64>],
    eps_depth: f64,
) -> Result<BackProjection> {
    if mask.width() != frame.width || mask.height() != frame.height {
        return Err(Error::InvalidArgument(format!(
            "mask is {}x{}, frame {} is {}x{}",
            mask.width(),
            mask.height(),
            frame.frame_id,
            frame.width,
            frame.height
        )));
    }
    let point_indices = points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            visible_pixel(p, frame, eps_depth).is_some_and(|(x, y)| mask.get(x, y))
        })
        .map(|(i, _)| i as u32)
        .collect();
    Ok(BackProjection {
        prompt_id,
        view_id: frame.frame_id,
        point_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{DepthMap, Intrinsics};
    use nalgebra::{Isometry3, Matrix3x4, Matrix4, Translation3, UnitQuaternion, Vector3, Vector4};
    use proptest::prelude::*;

    fn frame_with(pose: Isometry3<f64>, w: usize, h: usize, depth: DepthMap) -> PosedFrame {
        PosedFrame {
            frame_id: 0,
            width: w,
            height: h,
            intrinsics: Intrinsics {
                fx: 100.0,
                fy: 100.0,
                cx: 50.0,
                cy: 50.0,
            },
            world_to_cam: pose,
            depth,
            image_ref: String::new(),
        }
    }

    fn ident_frame() -> PosedFrame {
        frame_with(Isometry3::identity(), 200, 100, DepthMap::zeros(200, 100))
    }

    #[test]
    fn principal_point_and_sign() {
        let f = ident_frame();
        let p = project_point(&Point3::new(0.0, 0.0, 2.0), &f).unwrap();
        assert_eq!((p.u, p.v, p.z), (50.0, 50.0, 2.0));
        assert!(project_point(&Point3::new(0.0, 0.0, -1.0), &f).is_none());
        let p = project_point(&Point3::new(1.0, 0.0, 2.0), &f).unwrap();
        assert_eq!(p.u, 100.0);
        // u = 100*2/1 + 50 = 250 is outside a 200-wide image
        assert!(project_point(&Point3::new(2.0, 0.0, 1.0), &f).is_none());
    }

    #[test]
    fn visibility_rules() {
        let mut depth = DepthMap::zeros(100, 100);
        *depth.get_mut(50, 50) = 2.0;
        *depth.get_mut(60, 50) = 1.5;
        let f = frame_with(Isometry3::identity(), 100, 100, depth);
        let pts = vec![
            Point3::new(0.0, 0.0, 2.0),  // exact match
            Point3::new(0.3, 0.0, 3.0),  // pixel (60,50), occluded at 1.5
            Point3::new(5.0, 0.0, 1.0),  // outside
            Point3::new(0.0, 0.01, 2.0), // pixel (50,51) has no depth
        ];
        assert_eq!(visible_points(&pts, &[0, 1, 2, 3], &f, 0.05), vec![0]);
        let cache = FrameVisibility::compute(&pts, &f, 0.05);
        assert_eq!(cache.count_visible(&[0, 1, 2, 3]), 1);
    }

    fn frames_with_ids(n: u32) -> Vec<PosedFrame> {
        (0..n)
            .map(|i| {
                let mut f = ident_frame();
                f.frame_id = i;
                f
            })
            .collect()
    }

    #[test]
    fn ranking_order_and_ties() {
        let frames = frames_with_ids(3);
        let r = rank_by_counts(&frames, &[10, 50, 30], 2);
        assert_eq!(r.iter().map(|v| v.frame_id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(rank_by_counts(&frames, &[0, 0, 0], 2).is_empty());
        let r = rank_by_counts(&frames[..2], &[10, 10], 1);
        assert_eq!(r[0].frame_id, 0);
    }

    fn px(u: f64) -> PixelPoint {
        PixelPoint { u, v: 0.0, z: 1.0 }
    }

    #[test]
    fn fps_small_cases() {
        let three = [px(0.0), px(5.0), px(10.0)];
        assert_eq!(sample_pixel_prompts(&three, 5).unwrap().len(), 3);
        assert_eq!(sample_pixel_prompts(&three, 1).unwrap(), vec![1]);
        assert!(sample_pixel_prompts(&[], 2).is_err());
    }

    /// Exhaustive FPS: at each step, enumerate all candidates and take the
    /// lexicographically smallest (-min_dist, index).
    fn fps_oracle(pixels: &[PixelPoint], k: usize) -> Vec<usize> {
        let n = pixels.len();
        let cu: f64 = pixels.iter().map(|p| p.u).sum::<f64>() / n as f64;
        let cv: f64 = pixels.iter().map(|p| p.v).sum::<f64>() / n as f64;
        let mut best = 0;
        for i in 0..n {
            let d = |j: usize| (pixels[j].u - cu).powi(2) + (pixels[j].v - cv).powi(2);
            if d(i) < d(best) {
                best = i;
            }
        }
        let mut out = vec![best];
        while out.len() < k.min(n) {
            let mut cand: Option<(f64, usize)> = None;
            for i in (0..n).filter(|i| !out.contains(i)) {
                let md = out
                    .iter()
                    .map(|&j| dist2(&pixels[i], &pixels[j]))
                    .fold(f64::INFINITY, f64::min);
                if cand.is_none_or(|(d, _)| md > d) {
                    cand = Some((md, i));
                }
            }
            out.push(cand.unwrap().1);
        }
        out
    }

    #[test]
    fn fps_collinear_matches_enumeration() {
        let three = [px(0.0), px(5.0), px(10.0)];
        let got = sample_pixel_prompts(&three, 2).unwrap();
        assert_eq!(got, fps_oracle(&three, 2));
        assert_eq!(got, vec![1, 0]);
    }

    #[test]
    fn back_projection_of_masked_plane() {
        // plane z = 2 seen head-on; depth rendered analytically
        let w = 100;
        let depth = DepthMap::from_vec(w, w, vec![2.0; w * w]).unwrap();
        let f = frame_with(Isometry3::identity(), w, w, depth);
        let pts: Vec<_> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Point3::new(-0.2 + 0.04 * i as f64, -0.2 + 0.04 * j as f64, 2.0)))
            .collect();
        let full = Mask2d::from_vec(w, w, vec![true; w * w]).unwrap();
        let bp = back_project_mask(7, &f, &full, &pts, 0.05).unwrap();
        assert_eq!(bp.point_indices.len(), pts.len());
        assert_eq!(bp.prompt_id, 7);
        let none = back_project_mask(7, &f, &Mask2d::new(w, w), &pts, 0.05).unwrap();
        assert!(none.point_indices.is_empty());
        // a nearer occluding plane hides everything
        let near = DepthMap::from_vec(w, w, vec![1.0; w * w]).unwrap();
        let f2 = frame_with(Isometry3::identity(), w, w, near);
        assert!(back_project_mask(0, &f2, &full, &pts, 0.05)
            .unwrap()
            .point_indices
            .is_empty());
        assert!(back_project_mask(0, &f, &Mask2d::new(3, 3), &pts, 0.05).is_err());
        let cache = FrameVisibility::compute(&pts, &f, 0.05);
        assert_eq!(cache.back_project(&full), bp.point_indices);
    }

    fn oracle_project(p: &Point3<f64>, f: &PosedFrame) -> Option<(f64, f64)> {
        let k = &f.intrinsics;
        let kmat = Matrix3x4::new(k.fx, 0.0, k.cx, 0.0, 0.0, k.fy, k.cy, 0.0, 0.0, 0.0, 1.0, 0.0);
        let ext: Matrix4<f64> = f.world_to_cam.to_homogeneous();
        let h = kmat * ext * Vector4::new(p.x, p.y, p.z, 1.0);
        (h[2] > 0.0).then(|| (h[0] / h[2], h[1] / h[2]))
    }

    proptest! {
        #[test]
        fn matches_homogeneous_oracle(
            axis in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            angle in -3.0f64..3.0,
            t in (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0),
            p in (-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0),
        ) {
            let axis = Vector3::new(axis.0, axis.1, axis.2 + 1.5);
            let pose = Isometry3::from_parts(
                Translation3::new(t.0, t.1, t.2),
                UnitQuaternion::from_scaled_axis(axis.normalize() * angle),
            );
            let f = frame_with(pose, 100_000, 100_000, DepthMap::zeros(1, 1));
            let p = Point3::new(p.0, p.1, p.2);
            match (project_point(&p, &f), oracle_project(&p, &f)) {
                (Some(a), Some((u, v))) => {
                    prop_assert!((a.u - u).abs() < 1e-6 && (a.v - v).abs() < 1e-6);
                }
                (None, Some((u, v))) => {
                    prop_assert!(!(u >= 0.0 && v >= 0.0 && u < 1e5 && v < 1e5));
                }
                (Some(_), None) => prop_assert!(false, "oracle rejects a projected point"),
                (None, None) => {}
            }
        }

        #[test]
        fn visibility_monotone_in_eps(eps_a in 0.001f64..0.5, eps_b in 0.001f64..0.5, zs in proptest::collection::vec(0.5f64..3.0, 1..30)) {
            let w = 40;
            let depth = DepthMap::from_vec(w, w, vec![1.5; w * w]).unwrap();
            let f = frame_with(Isometry3::identity(), w, w, depth);
            let pts: Vec<_> = zs.iter().map(|&z| Point3::new(-0.1, -0.1, z)).collect();
            let idx: Vec<u32> = (0..pts.len() as u32).collect();
            let (lo, hi) = if eps_a < eps_b { (eps_a, eps_b) } else { (eps_b, eps_a) };
            let small = visible_points(&pts, &idx, &f, lo);
            let large = visible_points(&pts, &idx, &f, hi);
            prop_assert!(small.iter().all(|i| large.contains(i)));
            prop_assert!(large.iter().all(|i| idx.contains(i)));
        }

        #[test]
        fn ranked_counts_never_increase(counts in proptest::collection::vec(0usize..6, 1..15), t in 1usize..8) {
            let frames: Vec<PosedFrame> = (0..counts.len())
                .map(|i| PosedFrame { frame_id: 100 - i as u32, ..frame_with(Isometry3::identity(), 1, 1, DepthMap::zeros(1, 1)) })
                .collect();
            let ranked = rank_by_counts(&frames, &counts, t);
            prop_assert_eq!(ranked.len(), t.min(counts.iter().filter(|&&c| c > 0).count()));
            for pair in ranked.windows(2) {
                prop_assert!(pair[0].visible_count > pair[1].visible_count
                    || (pair[0].visible_count == pair[1].visible_count && pair[0].frame_id < pair[1].frame_id));
            }
            prop_assert!(ranked.iter().all(|r| counts[r.frame_index] == r.visible_count && r.visible_count > 0));
        }

        #[test]
        fn fps_equals_enumeration(us in proptest::collection::vec((0u8..20, 0u8..20), 1..12), k in 1usize..8) {
            let pixels: Vec<_> = us.iter().map(|&(u, v)| PixelPoint { u: u as f64, v: v as f64, z: 1.0 }).collect();
            prop_assert_eq!(sample_pixel_prompts(&pixels, k).unwrap(), fps_oracle(&pixels, k));
        }
    }
}
