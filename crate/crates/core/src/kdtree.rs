//! Static 3-D kd-tree with exact nearest-neighbor and radius queries.
//!
//! Distances are computed with the same expression as the brute-force
//! reference (`(a - b).norm()`), and ties resolve to the lowest point index,
//! so results match a linear scan bit for bit.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    /// Point indices, permuted so every leaf owns a contiguous run.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[inline]
pub fn distance(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

/// Linear-scan nearest neighbor: `(index, distance)`, lowest index on ties.
pub fn brute_force_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = distance(p, q);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

impl KdTree {
    /// Builds the tree; non-finite points are kept but never returned.
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).filter(|&i| points[i].iter().all(|v| v.is_finite())).collect();
        let mut nodes = Vec::new();
        if !order.is_empty() {
            let n = order.len();
            build(&points, &mut order, 0, n, &mut nodes);
        }
        Self { points, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Nearest point to `q` as `(index, distance)`.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(0, q, &mut best);
        (best.0 != usize::MAX).then_some(best)
    }

    fn nearest_in(&self, node: usize, q: &Vector3<f64>, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = distance(&self.points[i], q);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                // `<=` keeps equal-distance candidates reachable for the tie rule
                if diff.abs() <= best.1 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// True when some point lies within `radius` (inclusive) of `q`.
    pub fn any_within(&self, q: &Vector3<f64>, radius: f64) -> bool {
        !self.nodes.is_empty() && radius >= 0.0 && self.any_in(0, q, radius)
    }

    fn any_in(&self, node: usize, q: &Vector3<f64>, radius: f64) -> bool {
        match self.nodes[node] {
            Node::Leaf { start, end } => self.order[start..end]
                .iter()
                .any(|&i| distance(&self.points[i], q) <= radius),
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.any_in(near, q, radius) || (diff.abs() <= radius && self.any_in(far, q, radius))
            }
        }
    }

    /// Distances to the `k` nearest points, excluding index `skip`, ascending.
    pub fn k_nearest_distances(&self, q: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.knn_in(0, q, k, skip, &mut out);
        }
        out
    }

    fn knn_in(&self, node: usize, q: &Vector3<f64>, k: usize, skip: Option<usize>, out: &mut Vec<f64>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == skip {
                        continue;
                    }
                    let d = distance(&self.points[i], q);
                    if out.len() < k || d < out[k - 1] {
                        let pos = out.partition_point(|&x| x <= d);
                        out.insert(pos, d);
                        out.truncate(k);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_in(near, q, k, skip, out);
                if out.len() < k || diff.abs() <= out[k - 1] {
                    self.knn_in(far, q, k, skip, out);
                }
            }
        }
    }
}

fn build(points: &[Vector3<f64>], order: &mut [usize], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
    let id = nodes.len();
    if end - start <= LEAF_SIZE {
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let slice = &mut order[start..end];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in slice.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let axis = (hi - lo).imax();
    if hi[axis] == lo[axis] {
        // all points coincide
        nodes.push(Node::Leaf { start, end });
        return id;
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let value = points[slice[mid]][axis];
    nodes.push(Node::Leaf { start: 0, end: 0 });
    let left = build(points, order, start, start + mid, nodes);
    let right = build(points, order, start + mid, end, nodes);
    nodes[id] = Node::Split { axis, value, left, right };
    id
}
