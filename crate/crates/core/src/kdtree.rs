//! Static 3D kd-tree for exact nearest-neighbour queries.
//!
//! Built once by recursive median partitioning over an index array; the
//! tree is implicit (node = index range, pivot = middle element). Many
//! points sharing a coordinate (ground planes) are handled without any
//! bucket limits.

const LEAF_SIZE: usize = 8;

pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
    axes: Vec<u8>,
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::partition(points, &mut order, &mut axes);
        Self { points, order, axes }
    }

    fn partition(points: &[[f64; 3]], order: &mut [usize], axes: &mut [u8]) {
        let n = order.len();
        if n <= LEAF_SIZE {
            return;
        }
        // Split on the axis of widest spread.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in order.iter() {
            for a in 0..3 {
                lo[a] = lo[a].min(points[i][a]);
                hi[a] = hi[a].max(points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = n / 2;
        order.select_nth_unstable_by(mid, |&i, &j| points[i][axis].total_cmp(&points[j][axis]));
        axes[mid] = axis as u8;
        let (left, rest) = order.split_at_mut(mid);
        let (left_axes, rest_axes) = axes.split_at_mut(mid);
        Self::partition(points, left, left_axes);
        Self::partition(points, &mut rest[1..], &mut rest_axes[1..]);
    }

    /// Index and squared distance of the point nearest to `query`.
    pub fn nearest(&self, query: &[f64; 3]) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(query, 0, self.order.len(), &mut best);
        Some(best)
    }

    fn search(&self, q: &[f64; 3], lo: usize, hi: usize, best: &mut (usize, f64)) {
        let n = hi - lo;
        if n <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                let d = dist2(q, &self.points[i]);
                if d < best.1 || (d == best.1 && i < best.0) {
                    *best = (i, d);
                }
            }
            return;
        }
        let mid = lo + n / 2;
        let pivot = self.order[mid];
        let axis = self.axes[mid] as usize;
        let d = dist2(q, &self.points[pivot]);
        if d < best.1 || (d == best.1 && pivot < best.0) {
            *best = (pivot, d);
        }
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..500)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..200 {
            let q = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0), rng.gen_range(-2.0..2.0)];
            let (_, d) = tree.nearest(&q).unwrap();
            let brute = pts.iter().map(|p| dist2(&q, p)).fold(f64::INFINITY, f64::min);
            assert_eq!(d, brute);
        }
    }

    #[test]
    fn coplanar_points() {
        let pts: Vec<[f64; 3]> = (0..1000).map(|i| [(i % 40) as f64, (i / 40) as f64, -1.7]).collect();
        let tree = KdTree::build(&pts);
        let (i, d) = tree.nearest(&[3.2, 7.9, -1.7]).unwrap();
        assert_eq!(pts[i], [3.0, 8.0, -1.7]);
        assert!((d - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_tree() {
        let pts: Vec<[f64; 3]> = Vec::new();
        assert!(KdTree::build(&pts).nearest(&[0.0; 3]).is_none());
    }
}
