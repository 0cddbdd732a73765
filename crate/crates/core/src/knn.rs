//! Exact k-nearest-neighbor search.
//!
//! Neighbors are ordered by `(squared distance, index)`, so every backend
//! yields identical lists including tie order. A point is never its own
//! neighbor, even when duplicated elsewhere in the input.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use thiserror::Error;

use crate::metric::squared_euclidean;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KnnError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} requires more than {k} points, got {population}")]
    PopulationTooSmall { k: usize, population: usize },
    #[error("point {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KnnBackend {
    /// Full scan per query.
    Exhaustive,
    /// Kd-tree with exact pruning.
    KdTree,
    /// Kd-tree for low dimensions and large inputs, scan otherwise.
    #[default]
    Auto,
}

const KD_MAX_DIM: usize = 16;
const KD_MIN_POINTS: usize = 128;
const LEAF_SIZE: usize = 12;

#[derive(Clone, Copy, Debug)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

/// Bounded max-heap keeping the k smallest candidates.
struct Best {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl Best {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if c < *self.heap.peek().unwrap() {
            self.heap.pop();
            self.heap.push(c);
        }
    }

    fn worst_dist2(&self) -> Option<f64> {
        (self.heap.len() == self.k).then(|| self.heap.peek().unwrap().dist2)
    }

    fn finish(self) -> Vec<Neighbor> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                index: c.index,
                distance: c.dist2.sqrt(),
            })
            .collect()
    }
}

fn check<P: AsRef<[f64]>>(points: &[P], k: usize) -> Result<(), KnnError> {
    if k == 0 {
        return Err(KnnError::ZeroK);
    }
    if k >= points.len() {
        return Err(KnnError::PopulationTooSmall {
            k,
            population: points.len(),
        });
    }
    let expected = points[0].as_ref().len();
    for (index, p) in points.iter().enumerate() {
        let found = p.as_ref().len();
        if found != expected {
            return Err(KnnError::DimensionMismatch {
                index,
                expected,
                found,
            });
        }
    }
    Ok(())
}

pub fn knn_neighbors<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
) -> Result<Vec<Vec<Neighbor>>, KnnError> {
    knn_neighbors_with(points, k, KnnBackend::Auto)
}

pub fn knn_neighbors_with<P: AsRef<[f64]> + Sync>(
    points: &[P],
    k: usize,
    backend: KnnBackend,
) -> Result<Vec<Vec<Neighbor>>, KnnError> {
    check(points, k)?;
    let dim = points[0].as_ref().len();
    let use_tree = match backend {
        KnnBackend::Exhaustive => false,
        KnnBackend::KdTree => true,
        KnnBackend::Auto => dim <= KD_MAX_DIM && points.len() >= KD_MIN_POINTS,
    };
    if use_tree {
        let tree = KdTree::build(points);
        Ok((0..points.len())
            .into_par_iter()
            .map(|q| tree.query(points, q, k))
            .collect())
    } else {
        Ok((0..points.len())
            .into_par_iter()
            .map(|q| scan(points, q, k))
            .collect())
    }
}

fn scan<P: AsRef<[f64]>>(points: &[P], query: usize, k: usize) -> Vec<Neighbor> {
    let q = points[query].as_ref();
    let mut best = Best::new(k);
    for (index, p) in points.iter().enumerate() {
        if index != query {
            best.offer(Candidate {
                dist2: squared_euclidean(q, p.as_ref()),
                index,
            });
        }
    }
    best.finish()
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

struct KdTree {
    order: Vec<usize>,
    root: Node,
}

impl KdTree {
    fn build<P: AsRef<[f64]>>(points: &[P]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let n = order.len();
        let root = Self::build_node(points, &mut order, 0, n);
        Self { order, root }
    }

    fn build_node<P: AsRef<[f64]>>(
        points: &[P],
        order: &mut [usize],
        start: usize,
        end: usize,
    ) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut order[start..end];
        let dim = points[slice[0]].as_ref().len();
        let axis = (0..dim)
            .max_by(|&a, &b| {
                let spread = |ax: usize| {
                    let (lo, hi) =
                        slice
                            .iter()
                            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                                let v = points[i].as_ref()[ax];
                                (lo.min(v), hi.max(v))
                            });
                    hi - lo
                };
                spread(a).total_cmp(&spread(b)).then(b.cmp(&a))
            })
            .unwrap();
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a].as_ref()[axis]
                .total_cmp(&points[b].as_ref()[axis])
                .then(a.cmp(&b))
        });
        let value = points[slice[mid]].as_ref()[axis];
        // Left holds coordinates <= value, right holds >= value.
        let split = start + mid;
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build_node(points, order, start, split)),
            right: Box::new(Self::build_node(points, order, split, end)),
        }
    }

    fn query<P: AsRef<[f64]>>(&self, points: &[P], query: usize, k: usize) -> Vec<Neighbor> {
        let mut best = Best::new(k);
        self.visit(&self.root, points, query, &mut best);
        best.finish()
    }

    fn visit<P: AsRef<[f64]>>(&self, node: &Node, points: &[P], query: usize, best: &mut Best) {
        let q = points[query].as_ref();
        match node {
            Node::Leaf { start, end } => {
                for &index in &self.order[*start..*end] {
                    if index != query {
                        best.offer(Candidate {
                            dist2: squared_euclidean(q, points[index].as_ref()),
                            index,
                        });
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff <= 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.visit(near, points, query, best);
                // Equal bound is not pruned: a tie may still win on index.
                let plane2 = diff * diff;
                if best.worst_dist2().is_none_or(|w| plane2 <= w) {
                    self.visit(far, points, query, best);
                }
            }
        }
    }
}
