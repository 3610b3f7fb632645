use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Point3;
use rayon::prelude::*;

/// The `k` nearest other points of every point, nearest first, ties by index.
pub(crate) fn k_nearest(points: &[Point3<f64>], k: usize) -> Vec<Vec<u32>> {
    if points.len() < 2 || k == 0 {
        return vec![Vec::new(); points.len()];
    }
    let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let tree: ImmutableKdTree<f64, 3> =
        ImmutableKdTree::new_from_slice(&coords).expect("finite coordinates");
    let want = NonZeroUsize::new((k + 1).min(points.len())).expect("non-zero");
    coords
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut found: Vec<(f64, u32)> = tree
                .query(q)
                .nearest_n::<SquaredEuclidean<f64>>(want)
                .execute()
                .into_iter()
                .map(|r| (r.distance, r.item))
                .filter(|&(_, item)| item as usize != i)
                .collect();
            found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            found.truncate(k);
            found.into_iter().map(|(_, item)| item).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_agreement() {
        let pts: Vec<_> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                Point3::new(t.sin() * 3.0, (t * 1.3).cos() * 2.0, (t * 0.7).sin())
            })
            .collect();
        let nn = k_nearest(&pts, 5);
        for (i, got) in nn.iter().enumerate() {
            let mut all: Vec<(f64, u32)> = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| ((pts[i] - pts[j]).norm_squared(), j as u32))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<u32> = all.iter().take(5).map(|x| x.1).collect();
            assert_eq!(got, &want, "point {i}");
        }
    }
}
