//! A static 3D kd-tree for nearest-neighbour and k-nearest queries.

use crate::geometry::Vec3;

const LEAF: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Permutation of point indices; leaves own contiguous ranges.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

fn dist2(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm_squared()
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY));
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = (start + end) / 2;
        let pts = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// Index and squared distance of the nearest point; ties go to the
    /// lowest index. `None` for an empty tree.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        let mut best = self.knn(q, 1);
        best.pop()
    }

    /// The `k` nearest points as `(index, squared distance)`, sorted by
    /// distance then index.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return heap;
        }
        self.search(0, q, k, &mut heap);
        heap
    }

    fn worst(heap: &[(usize, f64)], k: usize) -> f64 {
        if heap.len() < k {
            f64::INFINITY
        } else {
            heap[heap.len() - 1].1
        }
    }

    fn search(&self, node: usize, q: &Vec3, k: usize, heap: &mut Vec<(usize, f64)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = dist2(&self.points[i], q);
                    let key = (d, i);
                    if heap.len() == k && key >= (heap[k - 1].1, heap[k - 1].0) {
                        continue;
                    }
                    let pos = heap.partition_point(|&(j, e)| (e, j) < key);
                    heap.insert(pos, (i, d));
                    heap.truncate(k);
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // `<=` keeps equal-distance candidates with lower indices.
                if diff * diff <= Self::worst(heap, k) {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = cloud(1000, 1);
        let tree = KdTree::new(&pts);
        for q in cloud(500, 2) {
            let brute = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, dist2(p, &q)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .unwrap();
            assert_eq!(tree.nearest(&q), Some(brute));
        }
    }

    #[test]
    fn knn_matches_sorted_brute_force() {
        let pts = cloud(700, 3);
        let tree = KdTree::new(&pts);
        for q in cloud(100, 4) {
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, dist2(p, &q))).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(tree.knn(&q, 16), all[..16].to_vec());
        }
    }

    #[test]
    fn duplicates_and_edges() {
        let pts = vec![Vec3::zeros(); 20];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Vec3::x()), Some((0, 1.0)));
        assert_eq!(tree.knn(&Vec3::x(), 3).iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(KdTree::new(&[]).nearest(&Vec3::zeros()).is_none());
        assert_eq!(tree.knn(&Vec3::zeros(), 50).len(), 20);
    }
}
