//! Exact k-d tree for neighbor queries.
//!
//! Results are ordered by `(squared distance, index)` and agree exactly with a
//! brute-force scan: pruning only discards subtrees whose plane distance
//! exceeds the current bound by a relative margin, so floating-point rounding
//! in the bound can never hide a candidate.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::matrix::{squared_distance, RowMatrix};

const LEAF_SIZE: usize = 16;
const PRUNE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

pub struct KdTree<'a> {
    points: &'a RowMatrix,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a RowMatrix) -> Self {
        let mut tree = Self {
            points,
            order: (0..points.rows()).collect(),
            nodes: Vec::new(),
        };
        if points.rows() > 0 {
            tree.build(0, points.rows());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let dim = self.widest_dim(start, end);
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points.get(a, dim).total_cmp(&points.get(b, dim))
        });
        let value = points.get(self.order[mid], dim);
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[id] = Node::Split {
            dim,
            value,
            left,
            right,
        };
        id
    }

    fn widest_dim(&self, start: usize, end: usize) -> usize {
        let d = self.points.cols();
        let mut best = (0, f64::NEG_INFINITY);
        for dim in 0..d {
            let (lo, hi) = self.order[start..end]
                .iter()
                .map(|&i| self.points.get(i, dim))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if hi - lo > best.1 {
                best = (dim, hi - lo);
            }
        }
        best.0
    }

    /// The `k` nearest points to `query`, skipping `exclude`, sorted ascending.
    pub fn nearest(&self, query: &[f64], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search_knn(0, query, k, exclude, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn search_knn(
        &self,
        node: usize,
        query: &[f64],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = Neighbor {
                        index: i,
                        dist2: squared_distance(query, self.points.row(i)),
                    };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_knn(near, query, k, exclude, heap);
                let plane = diff * diff;
                let visit = heap.len() < k || plane <= heap.peek().expect("heap is full").dist2 * (1.0 + PRUNE_SLACK);
                if visit {
                    self.search_knn(far, query, k, exclude, heap);
                }
            }
        }
    }

    /// Indices `j != exclude` with `sqrt(d2(query, x_j)) < radius`, ascending by index.
    pub fn within(&self, query: &[f64], radius: f64, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut out = Vec::new();
        if !self.nodes.is_empty() {
            self.search_radius(0, query, radius, exclude, &mut out);
        }
        out.sort_unstable_by_key(|n| n.index);
        out
    }

    fn search_radius(&self, node: usize, query: &[f64], radius: f64, exclude: Option<usize>, out: &mut Vec<Neighbor>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let dist2 = squared_distance(query, self.points.row(i));
                    if dist2.sqrt() < radius {
                        out.push(Neighbor { index: i, dist2 });
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = query[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_radius(near, query, radius, exclude, out);
                if diff.abs() <= radius * (1.0 + PRUNE_SLACK) {
                    self.search_radius(far, query, radius, exclude, out);
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

    fn brute_knn(points: &RowMatrix, q: usize, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = (0..points.rows())
            .filter(|&j| j != q)
            .map(|j| Neighbor {
                index: j,
                dist2: squared_distance(points.row(q), points.row(j)),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in 1..=3 {
            // integer grid coordinates produce many exact distance ties
            let rows: Vec<Vec<f64>> = (0..200)
                .map(|_| (0..d).map(|_| rng.random_range(0..6) as f64).collect())
                .collect();
            let points = RowMatrix::from_rows(&rows).unwrap();
            let tree = KdTree::new(&points);
            for q in 0..points.rows() {
                for k in [1, 4, 17] {
                    assert_eq!(tree.nearest(points.row(q), k, Some(q)), brute_knn(&points, q, k));
                }
            }
        }
    }

    #[test]
    fn radius_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<[f64; 2]> = (0..300).map(|_| [rng.random(), rng.random()]).collect();
        let points = RowMatrix::from_rows(&rows).unwrap();
        let tree = KdTree::new(&points);
        for q in 0..points.rows() {
            let got: Vec<usize> = tree.within(points.row(q), 0.1, Some(q)).iter().map(|n| n.index).collect();
            let want: Vec<usize> = (0..points.rows())
                .filter(|&j| j != q && squared_distance(points.row(q), points.row(j)).sqrt() < 0.1)
                .collect();
            assert_eq!(got, want);
        }
    }
}
