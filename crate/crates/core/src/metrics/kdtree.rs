//! Exact nearest-neighbour search over integer voxel coordinates.
//!
//! Distances are squared Euclidean in `i64`, so comparisons are exact. Among
//! equidistant candidates the lowest point index wins.

pub struct KdTree {
    pts: Vec<[i64; 3]>,
    /// Point indices arranged as an implicit balanced tree: the median of
    /// every sub-range is its node.
    order: Vec<u32>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: impl IntoIterator<Item = [i32; 3]>) -> Self {
        let pts: Vec<[i64; 3]> = points
            .into_iter()
            .map(|p| [p[0] as i64, p[1] as i64, p[2] as i64])
            .collect();
        let mut order: Vec<u32> = (0..pts.len() as u32).collect();
        let mut axes = vec![0u8; pts.len()];
        build(&pts, &mut order, &mut axes);
        KdTree { pts, order, axes }
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// `(index, squared distance)` of the nearest point, `None` when empty.
    pub fn nearest(&self, q: [i32; 3]) -> Option<(u32, i64)> {
        if self.pts.is_empty() {
            return None;
        }
        let q = [q[0] as i64, q[1] as i64, q[2] as i64];
        let mut best = (u32::MAX, i64::MAX);
        self.search(0, self.order.len(), &q, &mut best);
        Some(best)
    }

    fn search(&self, lo: usize, hi: usize, q: &[i64; 3], best: &mut (u32, i64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.pts[idx as usize];
        let d2 = dist2(p, q);
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, best);
        // `<=` keeps equidistant points on the far side reachable for the tie-break
        if diff * diff <= best.1 {
            self.search(far.0, far.1, q, best);
        }
    }
}

#[inline]
pub(crate) fn dist2(a: &[i64; 3], b: &[i64; 3]) -> i64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn build(pts: &[[i64; 3]], order: &mut [u32], axes: &mut [u8]) {
    if order.len() <= 1 {
        if let Some(a) = axes.first_mut() {
            *a = 0;
        }
        return;
    }
    let mut lo = [i64::MAX; 3];
    let mut hi = [i64::MIN; 3];
    for &i in order.iter() {
        let p = &pts[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let axis = (0..3).max_by_key(|&a| (hi[a] - lo[a], std::cmp::Reverse(a))).unwrap();
    let mid = order.len() / 2;
    order.select_nth_unstable_by_key(mid, |&i| (pts[i as usize][axis], i));
    axes[mid] = axis as u8;
    let (left, right) = order.split_at_mut(mid);
    let (left_axes, right_axes) = axes.split_at_mut(mid);
    build(pts, left, left_axes);
    build(pts, &mut right[1..], &mut right_axes[1..]);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(pts: &[[i32; 3]], q: [i32; 3]) -> (u32, i64) {
        let q = [q[0] as i64, q[1] as i64, q[2] as i64];
        let mut best = (u32::MAX, i64::MAX);
        for (i, p) in pts.iter().enumerate() {
            let d = dist2(&[p[0] as i64, p[1] as i64, p[2] as i64], &q);
            if d < best.1 {
                best = (i as u32, d);
            }
        }
        best
    }

    #[test]
    fn agrees_with_brute_force_including_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.random_range(1..=200);
            // small extent forces many equidistant candidates and duplicates
            let ext = rng.random_range(2..12);
            let pts: Vec<[i32; 3]> = (0..n)
                .map(|_| [rng.random_range(0..ext), rng.random_range(0..ext), rng.random_range(0..ext)])
                .collect();
            let tree = KdTree::new(pts.iter().copied());
            for _ in 0..50 {
                let q = [rng.random_range(-2..ext + 2), rng.random_range(-2..ext + 2), rng.random_range(-2..ext + 2)];
                assert_eq!(tree.nearest(q), Some(brute(&pts, q)));
            }
        }
    }

    #[test]
    fn empty_tree() {
        assert_eq!(KdTree::new(std::iter::empty()).nearest([0, 0, 0]), None);
    }
}
