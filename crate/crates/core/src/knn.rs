//! A static 3-d tree for exact nearest-neighbour queries.
//!
//! Distances are computed with `(a - b).norm()`, the same expression a
//! brute-force scan would use, so results are bitwise reproducible against
//! an exhaustive search.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

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

pub struct KdTree<'a> {
    points: &'a [Vector3<f64>],
    order: Vec<usize>,
    root: Node,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vector3<f64>]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = build(points, &mut order, 0, points.len(), 0);
        Self {
            points,
            order,
            root,
        }
    }

    /// Distance to the nearest point and its index, `None` for an empty tree.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best = Neighbours::new(1);
        self.search(&self.root, query, None, &mut best);
        best.items.first().copied()
    }

    /// The `k` nearest points sorted by ascending distance, optionally
    /// skipping one index (the query's own slot).
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
        let mut best = Neighbours::new(k);
        if k > 0 {
            self.search(&self.root, query, exclude, &mut best);
        }
        best.items
    }

    fn search(&self, node: &Node, query: &Vector3<f64>, exclude: Option<usize>, best: &mut Neighbours) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    best.offer((query - self.points[i]).norm(), i);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = query[*axis] - value;
                let (near, far) = if delta <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, exclude, best);
                if delta.abs() <= best.bound() {
                    self.search(far, query, exclude, best);
                }
            }
        }
    }
}

fn build(points: &[Vector3<f64>], order: &mut [usize], start: usize, end: usize, depth: usize) -> Node {
    if end - start <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    // split on the widest axis of the bounding box
    let slice = &mut order[start..end];
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in slice.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let extent = hi - lo;
    let axis = if extent.x >= extent.y && extent.x >= extent.z {
        0
    } else if extent.y >= extent.z {
        1
    } else {
        2
    };
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[slice[mid]][axis];
    let left = build(points, order, start, start + mid, depth + 1);
    let right = build(points, order, start + mid, end, depth + 1);
    Node::Split {
        axis,
        value,
        left: Box::new(left),
        right: Box::new(right),
    }
}

struct Neighbours {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Neighbours {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    fn bound(&self) -> f64 {
        if self.items.len() < self.k {
            f64::INFINITY
        } else {
            self.items[self.items.len() - 1].0
        }
    }

    fn offer(&mut self, dist: f64, index: usize) {
        if self.items.len() == self.k && dist >= self.bound() {
            return;
        }
        let pos = self
            .items
            .partition_point(|&(d, i)| d < dist || (d == dist && i < index));
        self.items.insert(pos, (dist, index));
        self.items.truncate(self.k);
    }
}
