//! Minimal 3D kd-tree for radius queries over keyframe positions.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
struct Node {
    point: Vector3<f64>,
    id: u64,
    axis: usize,
    left: Option<Box<Node>>,
    right: Option<Box<Node>>,
}

/// Static kd-tree built once over a point set.
#[derive(Debug, Clone, Default)]
pub struct KdTree {
    root: Option<Box<Node>>,
    len: usize,
}

impl KdTree {
    pub fn build(points: &[(u64, Vector3<f64>)]) -> Self {
        let mut items: Vec<(u64, Vector3<f64>)> = points.to_vec();
        let len = items.len();
        Self {
            root: Self::build_rec(&mut items, 0),
            len,
        }
    }

    fn build_rec(items: &mut [(u64, Vector3<f64>)], depth: usize) -> Option<Box<Node>> {
        if items.is_empty() {
            return None;
        }
        let axis = depth % 3;
        items.sort_by(|a, b| {
            a.1[axis]
                .partial_cmp(&b.1[axis])
                .unwrap()
                .then(a.0.cmp(&b.0))
        });
        let mid = items.len() / 2;
        let (lo, rest) = items.split_at_mut(mid);
        let (pivot, hi) = rest.split_first_mut().expect("non-empty");
        Some(Box::new(Node {
            point: pivot.1,
            id: pivot.0,
            axis,
            left: Self::build_rec(lo, depth + 1),
            right: Self::build_rec(hi, depth + 1),
        }))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Ids of all points within `radius` of `center` (inclusive), ascending.
    pub fn query_radius(&self, center: &Vector3<f64>, radius: f64) -> Vec<u64> {
        let mut out = Vec::new();
        let r2 = radius * radius;
        Self::query_rec(&self.root, center, radius, r2, &mut out);
        out.sort_unstable();
        out
    }

    fn query_rec(
        node: &Option<Box<Node>>,
        center: &Vector3<f64>,
        radius: f64,
        r2: f64,
        out: &mut Vec<u64>,
    ) {
        let Some(n) = node else { return };
        if (n.point - center).norm_squared() <= r2 {
            out.push(n.id);
        }
        let diff = center[n.axis] - n.point[n.axis];
        if diff <= radius {
            Self::query_rec(&n.left, center, radius, r2, out);
        }
        if diff >= -radius {
            Self::query_rec(&n.right, center, radius, r2, out);
        }
    }
}

/// Reference implementation for the kd-tree: plain linear scan.
pub fn linear_radius_scan(
    points: &[(u64, Vector3<f64>)],
    center: &Vector3<f64>,
    radius: f64,
) -> Vec<u64> {
    let r2 = radius * radius;
    let mut out: Vec<u64> = points
        .iter()
        .filter(|(_, p)| (p - center).norm_squared() <= r2)
        .map(|(id, _)| *id)
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_tree_returns_nothing() {
        let tree = KdTree::build(&[]);
        assert!(tree.query_radius(&Vector3::zeros(), 10.0).is_empty());
    }

    #[test]
    fn simple_distances() {
        let pts = vec![
            (0u64, Vector3::new(1.0, 0.0, 0.0)),
            (1, Vector3::new(0.0, 2.0, 0.0)),
            (2, Vector3::new(0.0, 0.0, 3.0)),
        ];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.query_radius(&Vector3::zeros(), 2.0), vec![0, 1]);
        // Radius is inclusive.
        assert_eq!(tree.query_radius(&Vector3::zeros(), 3.0), vec![0, 1, 2]);
    }

    #[test]
    fn matches_linear_scan_on_10k_points() {
        let mut rng = StdRng::seed_from_u64(1234);
        let pts: Vec<(u64, Vector3<f64>)> = (0..10_000)
            .map(|i| {
                (
                    i,
                    Vector3::new(
                        rng.random_range(-50.0..50.0),
                        rng.random_range(-50.0..50.0),
                        rng.random_range(-50.0..50.0),
                    ),
                )
            })
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..50 {
            let center = Vector3::new(
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
                rng.random_range(-50.0..50.0),
            );
            let radius = rng.random_range(0.5..30.0);
            assert_eq!(
                tree.query_radius(&center, radius),
                linear_radius_scan(&pts, &center, radius)
            );
        }
    }
}
