//! Internal exact nearest-neighbor acceleration.
//!
//! The tree is an implementation detail of [`crate::store::PrototypeDatabase`]:
//! every query returns exactly what a linear scan ordered by `(distance, id)`
//! would return. Pruning uses per-node bounding boxes with a strict `>`
//! comparison so that distance ties are still resolved by ascending id.
//!
//! Points with identical coordinates are collapsed into one group holding the
//! sorted id list. Databases in this domain are duplicate-heavy, and a plain
//! kd-tree degenerates into giant unsplittable leaves on them.

use crate::store::PrototypeId;

const LEAF_GROUPS: usize = 16;

/// Candidate ordering: ascending squared distance, then ascending id.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Candidate {
    pub d2: f64,
    pub id: PrototypeId,
}

impl Candidate {
    #[inline]
    fn key(&self) -> (f64, PrototypeId) {
        (self.d2, self.id)
    }

    #[inline]
    pub(crate) fn before(&self, other: &Candidate) -> bool {
        let (a, b) = (self.key(), other.key());
        match a.0.total_cmp(&b.0) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Greater => false,
            std::cmp::Ordering::Equal => a.1 < b.1,
        }
    }
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded collector for the k lexicographically smallest `(d2, id)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: std::collections::BinaryHeap<Candidate>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        TopK {
            k,
            heap: std::collections::BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn is_full(&self) -> bool {
        self.heap.len() == self.k
    }

    /// Current worst accepted squared distance, if the collector is full.
    #[inline]
    pub(crate) fn worst_d2(&self) -> Option<f64> {
        if self.is_full() {
            self.heap.peek().map(|c| c.d2)
        } else {
            None
        }
    }

    /// Offers a candidate; returns whether it was kept.
    #[inline]
    pub(crate) fn offer(&mut self, cand: Candidate) -> bool {
        if self.heap.len() < self.k {
            self.heap.push(cand);
            true
        } else {
            let top = *self.heap.peek().expect("non-empty");
            if cand.before(&top) {
                *self.heap.peek_mut().expect("non-empty") = cand;
                true
            } else {
                false
            }
        }
    }

    /// Drains into a list sorted by ascending `(d2, id)`.
    pub(crate) fn into_sorted(self) -> Vec<Candidate> {
        let mut v = self.heap.into_vec();
        v.sort_unstable();
        v
    }
}

struct Group {
    /// Offset of this group's coordinates in `coords` (in units of points).
    point: u32,
    /// Ids sharing these coordinates, ascending.
    ids: Vec<PrototypeId>,
}

enum NodeKind {
    Leaf { start: u32, end: u32 },
    Split { left: u32, right: u32 },
}

struct Node {
    kind: NodeKind,
    /// Offset into `boxes` (2 * dim f64 per node: mins then maxs).
    bbox: u32,
}

pub(crate) struct KdTree {
    dim: usize,
    coords: Vec<f64>,
    groups: Vec<Group>,
    /// Permutation of group indices; leaves reference contiguous ranges.
    order: Vec<u32>,
    nodes: Vec<Node>,
    boxes: Vec<f64>,
    root: u32,
}

/// Normalizes -0.0 to +0.0 so numerically equal points share one group.
#[inline]
fn norm_bits(x: f64) -> u64 {
    (x + 0.0).to_bits()
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Squared distance with early exit once `acc` exceeds `bound`.
#[inline]
fn squared_distance_bounded(a: &[f64], b: &[f64], bound: f64) -> f64 {
    let mut acc = 0.0;
    let mut i = 0;
    let n = a.len();
    while i < n {
        let stop = (i + 8).min(n);
        while i < stop {
            let d = a[i] - b[i];
            acc += d * d;
            i += 1;
        }
        if acc > bound {
            return acc;
        }
    }
    acc
}

impl KdTree {
    /// Builds a tree over `(id, coordinates)` pairs. Coordinates are copied.
    pub(crate) fn build<'a>(
        dim: usize,
        points: impl Iterator<Item = (PrototypeId, &'a [f64])>,
    ) -> KdTree {
        // Group identical points, preserving first-occurrence order.
        let mut lookup: std::collections::HashMap<Vec<u64>, usize> =
            std::collections::HashMap::new();
        let mut coords: Vec<f64> = Vec::new();
        let mut groups: Vec<Group> = Vec::new();
        for (id, feat) in points {
            debug_assert_eq!(feat.len(), dim);
            let key: Vec<u64> = feat.iter().map(|&x| norm_bits(x)).collect();
            match lookup.entry(key) {
                std::collections::hash_map::Entry::Occupied(e) => {
                    groups[*e.get()].ids.push(id);
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    let point = (coords.len() / dim) as u32;
                    coords.extend_from_slice(feat);
                    e.insert(groups.len());
                    groups.push(Group {
                        point,
                        ids: vec![id],
                    });
                }
            }
        }
        for g in &mut groups {
            g.ids.sort_unstable();
        }

        let mut tree = KdTree {
            dim,
            coords,
            order: (0..groups.len() as u32).collect(),
            groups,
            nodes: Vec::new(),
            boxes: Vec::new(),
            root: 0,
        };
        let n = tree.order.len();
        tree.root = tree.build_node(0, n);
        tree
    }

    fn group_coords(&self, group: u32) -> &[f64] {
        let p = self.groups[group as usize].point as usize * self.dim;
        &self.coords[p..p + self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> u32 {
        let bbox_off = self.boxes.len() as u32;
        let dim = self.dim;
        let mut mins = vec![f64::INFINITY; dim];
        let mut maxs = vec![f64::NEG_INFINITY; dim];
        for &g in &self.order[start..end] {
            let c = self.group_coords(g);
            for d in 0..dim {
                if c[d] < mins[d] {
                    mins[d] = c[d];
                }
                if c[d] > maxs[d] {
                    maxs[d] = c[d];
                }
            }
        }
        let (mut split_dim, mut spread) = (0, 0.0);
        for d in 0..dim {
            let s = maxs[d] - mins[d];
            if s > spread {
                spread = s;
                split_dim = d;
            }
        }
        self.boxes.extend_from_slice(&mins);
        self.boxes.extend_from_slice(&maxs);

        let count = end - start;
        if count <= LEAF_GROUPS || spread == 0.0 {
            self.nodes.push(Node {
                kind: NodeKind::Leaf {
                    start: start as u32,
                    end: end as u32,
                },
                bbox: bbox_off,
            });
            return (self.nodes.len() - 1) as u32;
        }

        let mid = start + count / 2;
        {
            // Split borrows: order is partitioned by coordinate on split_dim.
            let order = std::mem::take(&mut self.order);
            let mut order = order;
            {
                let slice = &mut order[start..end];
                let coords = &self.coords;
                let groups = &self.groups;
                slice.select_nth_unstable_by(mid - start, |&a, &b| {
                    let ca = coords[groups[a as usize].point as usize * dim + split_dim];
                    let cb = coords[groups[b as usize].point as usize * dim + split_dim];
                    ca.total_cmp(&cb).then(a.cmp(&b))
                });
            }
            self.order = order;
        }
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes.push(Node {
            kind: NodeKind::Split { left, right },
            bbox: bbox_off,
        });
        (self.nodes.len() - 1) as u32
    }

    #[inline]
    fn box_d2(&self, node: &Node, query: &[f64]) -> f64 {
        let b = node.bbox as usize;
        let (mins, maxs) = (
            &self.boxes[b..b + self.dim],
            &self.boxes[b + self.dim..b + 2 * self.dim],
        );
        let mut acc = 0.0;
        for d in 0..self.dim {
            let q = query[d];
            let gap = if q < mins[d] {
                mins[d] - q
            } else if q > maxs[d] {
                q - maxs[d]
            } else {
                0.0
            };
            acc += gap * gap;
        }
        acc
    }

    /// Exact k-nearest query; `exclude` must be sorted ascending.
    pub(crate) fn knn(&self, query: &[f64], k: usize, exclude: &[PrototypeId]) -> Vec<Candidate> {
        debug_assert_eq!(query.len(), self.dim);
        let mut top = TopK::new(k);
        self.search(self.root, query, exclude, &mut top);
        top.into_sorted()
    }

    fn search(&self, node_idx: u32, query: &[f64], exclude: &[PrototypeId], top: &mut TopK) {
        let node = &self.nodes[node_idx as usize];
        match &node.kind {
            NodeKind::Leaf { start, end } => {
                for &g in &self.order[*start as usize..*end as usize] {
                    let group = &self.groups[g as usize];
                    let d2 = match top.worst_d2() {
                        Some(bound) => {
                            let d2 = squared_distance_bounded(
                                self.group_coords(g),
                                query,
                                bound,
                            );
                            if d2 > bound {
                                continue;
                            }
                            d2
                        }
                        None => squared_distance(self.group_coords(g), query),
                    };
                    // Ids ascend, so the first rejection ends the group.
                    for &id in &group.ids {
                        if exclude.binary_search(&id).is_ok() {
                            continue;
                        }
                        if !top.offer(Candidate { d2, id }) {
                            break;
                        }
                    }
                }
            }
            NodeKind::Split { left, right } => {
                let (l, r) = (*left, *right);
                let dl = self.box_d2(&self.nodes[l as usize], query);
                let dr = self.box_d2(&self.nodes[r as usize], query);
                let (first, d_first, second, d_second) = if dl <= dr {
                    (l, dl, r, dr)
                } else {
                    (r, dr, l, dl)
                };
                if top.worst_d2().map_or(true, |w| d_first <= w) {
                    self.search(first, query, exclude, top);
                }
                if top.worst_d2().map_or(true, |w| d_second <= w) {
                    self.search(second, query, exclude, top);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn linear_knn(
        points: &[(PrototypeId, Vec<f64>)],
        query: &[f64],
        k: usize,
        exclude: &[PrototypeId],
    ) -> Vec<Candidate> {
        let mut all: Vec<Candidate> = points
            .iter()
            .filter(|(id, _)| exclude.binary_search(id).is_err())
            .map(|(id, p)| Candidate {
                d2: squared_distance(p, query),
                id: *id,
            })
            .collect();
        all.sort_unstable();
        all.truncate(k);
        all
    }

    fn random_points(n: usize, dim: usize, seed: u64, grid: Option<i64>) -> Vec<(u64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n as u64)
            .map(|id| {
                let feat = (0..dim)
                    .map(|_| match grid {
                        // Coarse grid forces heavy distance ties and duplicates.
                        Some(g) => rng.random_range(0..g) as f64,
                        None => rng.random_range(-1.0..1.0),
                    })
                    .collect();
                (id, feat)
            })
            .collect()
    }

    #[test]
    fn matches_linear_scan_on_continuous_data() {
        for seed in 0..5 {
            let points = random_points(200, 4, seed, None);
            let tree = KdTree::build(4, points.iter().map(|(id, p)| (*id, p.as_slice())));
            let queries = random_points(20, 4, seed + 100, None);
            for (_, q) in &queries {
                for k in [1, 3, 10, 250] {
                    assert_eq!(tree.knn(q, k, &[]), linear_knn(&points, q, k, &[]));
                }
            }
        }
    }

    #[test]
    fn matches_linear_scan_on_tied_grid_data() {
        for seed in 0..5 {
            let points = random_points(300, 3, seed, Some(2));
            let tree = KdTree::build(3, points.iter().map(|(id, p)| (*id, p.as_slice())));
            let queries = random_points(15, 3, seed + 77, Some(2));
            for (_, q) in &queries {
                for k in [1, 5, 17] {
                    assert_eq!(tree.knn(q, k, &[]), linear_knn(&points, q, k, &[]));
                }
            }
        }
    }

    #[test]
    fn respects_exclusions() {
        let points = random_points(100, 2, 9, Some(3));
        let tree = KdTree::build(2, points.iter().map(|(id, p)| (*id, p.as_slice())));
        for (qid, q) in points.iter().take(25) {
            let excl = vec![*qid];
            let got = tree.knn(q, 4, &excl);
            assert_eq!(got, linear_knn(&points, q, 4, &excl));
            assert!(got.iter().all(|c| c.id != *qid));
        }
    }

    #[test]
    fn all_identical_points_resolve_by_id() {
        let points: Vec<(u64, Vec<f64>)> = (0..50).map(|id| (id, vec![1.0, 2.0])).collect();
        let tree = KdTree::build(2, points.iter().map(|(id, p)| (*id, p.as_slice())));
        let got = tree.knn(&[1.0, 2.0], 3, &[]);
        let ids: Vec<u64> = got.iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(got.iter().all(|c| c.d2 == 0.0));
    }

    #[test]
    fn negative_zero_groups_with_positive_zero() {
        let points = vec![(0u64, vec![-0.0]), (1u64, vec![0.0]), (2u64, vec![5.0])];
        let tree = KdTree::build(1, points.iter().map(|(id, p)| (*id, p.as_slice())));
        let got = tree.knn(&[0.0], 2, &[]);
        let ids: Vec<u64> = got.iter().map(|c| c.id).collect();
        assert_eq!(ids, vec![0, 1]);
    }
}
