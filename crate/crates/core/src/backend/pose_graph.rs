//! Pose-graph optimization over relative-pose edges.
//!
//! Nodes are world-from-base keyframe poses; an edge stores the expected
//! relative pose of node `j` in node `i`'s frame. The residual per edge is
//! the se(3) log of the discrepancy, and a consistent graph reaches exactly
//! zero cost. The first node pins the gauge.

use nalgebra::{DMatrix, DVector, Matrix6};
use thiserror::Error;

use crate::geometry::{
    se3_adjoint, se3_log, se3_right_jacobian_inv, RigidTransform,
};
use crate::solvers::{Factor, LinearSolver, LmSettings, Problem, VarKey, Variable};

pub type NodeId = u64;

#[derive(Debug, Clone, Copy)]
pub struct PoseGraphEdge {
    pub from: NodeId,
    pub to: NodeId,
    /// Expected pose of `to` expressed in `from`'s frame.
    pub delta: RigidTransform,
    /// Isotropic standard deviation of the 6-DoF residual.
    pub sigma: f64,
}

impl PoseGraphEdge {
    pub fn new(from: NodeId, to: NodeId, delta: RigidTransform) -> Self {
        assert_ne!(from, to, "self edges are not allowed");
        Self {
            from,
            to,
            delta,
            sigma: 1.0,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        assert!(sigma > 0.0);
        self.sigma = sigma;
        self
    }
}

#[derive(Debug, Error)]
pub enum PgoError {
    #[error("pose graph is disconnected: {components} components")]
    Disconnected { components: usize },
    #[error("edge references unknown node {id}")]
    UnknownNode { id: NodeId },
    #[error("optimization failed")]
    SolveFailed,
}

/// Between-pose factor: `Log(delta^-1 * T_i^-1 * T_j)`, whitened by the
/// edge sigma.
struct BetweenFactor {
    keys: [VarKey; 2],
    delta_inv: RigidTransform,
    inv_sigma: f64,
}

impl Factor for BetweenFactor {
    fn variables(&self) -> &[VarKey] {
        &self.keys
    }

    fn dim(&self) -> usize {
        6
    }

    fn evaluate(
        &self,
        vars: &[&Variable],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64> {
        let t_i = vars[0].as_pose();
        let t_j = vars[1].as_pose();
        let arg = self.delta_inv.compose(&t_i.inverse()).compose(t_j);
        let xi = se3_log(&arg).expect("edge discrepancy too close to pi");
        let r = xi.to_vector() * self.inv_sigma;

        if let Some(jacs) = jacobians {
            // With the left-multiplicative update T <- Exp(d) T:
            //   d r / d d_i = -Jr^-1(xi) Adj(T_j^-1)
            //   d r / d d_j = +Jr^-1(xi) Adj(T_j^-1)
            let jr_inv = se3_right_jacobian_inv(&xi);
            let adj: Matrix6<f64> = se3_adjoint(&t_j.inverse());
            let base = jr_inv * adj * self.inv_sigma;
            jacs[0].copy_from(&(-base));
            jacs[1].copy_from(&base);
        }
        DVector::from_iterator(6, r.iter().copied())
    }
}

#[derive(Debug, Clone)]
pub struct PgoResult {
    pub nodes: Vec<(NodeId, RigidTransform)>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
}

fn check_connected(nodes: &[(NodeId, RigidTransform)], edges: &[PoseGraphEdge]) -> Result<(), PgoError> {
    use std::collections::{BTreeMap, BTreeSet, VecDeque};
    let index: BTreeMap<NodeId, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, (id, _))| (*id, i))
        .collect();
    let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for e in edges {
        let (Some(&a), Some(&b)) = (index.get(&e.from), index.get(&e.to)) else {
            return Err(PgoError::UnknownNode {
                id: if index.contains_key(&e.from) { e.to } else { e.from },
            });
        };
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::from([0usize]);
    seen.insert(0usize);
    while let Some(v) = queue.pop_front() {
        for &n in &adjacency[v] {
            if seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    if seen.len() != nodes.len() {
        // Count components for the error message.
        let mut components = 1usize;
        let mut all_seen = seen;
        for start in 0..nodes.len() {
            if all_seen.contains(&start) {
                continue;
            }
            components += 1;
            let mut queue = VecDeque::from([start]);
            all_seen.insert(start);
            while let Some(v) = queue.pop_front() {
                for &n in &adjacency[v] {
                    if all_seen.insert(n) {
                        queue.push_back(n);
                    }
                }
            }
        }
        return Err(PgoError::Disconnected { components });
    }
    Ok(())
}

/// Refines node poses to minimize the summed edge discrepancies. The first
/// node is held fixed.
pub fn optimize_pose_graph(
    nodes: &[(NodeId, RigidTransform)],
    edges: &[PoseGraphEdge],
    settings: &LmSettings,
) -> Result<PgoResult, PgoError> {
    if nodes.is_empty() {
        return Ok(PgoResult {
            nodes: Vec::new(),
            initial_cost: 0.0,
            final_cost: 0.0,
            iterations: 0,
        });
    }
    check_connected(nodes, edges)?;

    let mut problem = Problem::new();
    let mut keys = Vec::with_capacity(nodes.len());
    for (_, pose) in nodes {
        keys.push(problem.add_pose(*pose));
    }
    problem.set_fixed(keys[0]);

    let index_of = |id: NodeId| nodes.iter().position(|(n, _)| *n == id).expect("checked");
    for e in edges {
        problem.add_factor(Box::new(BetweenFactor {
            keys: [keys[index_of(e.from)], keys[index_of(e.to)]],
            delta_inv: e.delta.inverse(),
            inv_sigma: 1.0 / e.sigma,
        }));
    }

    let report = problem
        .solve(settings, LinearSolver::Dense)
        .map_err(|_| PgoError::SolveFailed)?;

    Ok(PgoResult {
        nodes: nodes
            .iter()
            .zip(keys.iter())
            .map(|((id, _), k)| (*id, *problem.var(*k).as_pose()))
            .collect(),
        initial_cost: report.initial_cost,
        final_cost: report.final_cost,
        iterations: report.iterations,
    })
}

/// Residual of a single edge at the given node poses; the zero twist means
/// the edge is perfectly consistent.
pub fn edge_residual(
    t_i: &RigidTransform,
    t_j: &RigidTransform,
    delta: &RigidTransform,
) -> crate::geometry::Twist {
    let arg = delta.inverse().compose(&t_i.inverse()).compose(t_j);
    se3_log(&arg).expect("edge discrepancy too close to pi")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{se3_exp, Twist};
    use crate::solvers::{jacobian_relative_error, numeric_factor_jacobians};
    use nalgebra::Vector3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn rand_twist(rng: &mut StdRng, r: f64, t: f64) -> Twist {
        Twist::new(
            Vector3::new(
                rng.random_range(-r..r),
                rng.random_range(-r..r),
                rng.random_range(-r..r),
            ),
            Vector3::new(
                rng.random_range(-t..t),
                rng.random_range(-t..t),
                rng.random_range(-t..t),
            ),
        )
    }

    #[test]
    fn between_factor_jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(101);
        for _ in 0..60 {
            let f = BetweenFactor {
                keys: [VarKey(0), VarKey(1)],
                delta_inv: se3_exp(&rand_twist(&mut rng, 0.5, 1.0)).inverse(),
                inv_sigma: 1.0,
            };
            let vars = vec![
                Variable::Pose(se3_exp(&rand_twist(&mut rng, 0.6, 1.0))),
                Variable::Pose(se3_exp(&rand_twist(&mut rng, 0.6, 1.0))),
            ];
            let gathered: Vec<&Variable> = vars.iter().collect();
            let mut jacs = vec![DMatrix::zeros(6, 6), DMatrix::zeros(6, 6)];
            f.evaluate(&gathered, Some(&mut jacs));
            let numeric = numeric_factor_jacobians(&f, &vars, 1e-6);
            for (a, n) in jacs.iter().zip(numeric.iter()) {
                let err = jacobian_relative_error(a, n);
                assert!(err < 1e-5, "error {err}");
            }
        }
    }

    fn chain(n: usize, rng: &mut StdRng) -> (Vec<(NodeId, RigidTransform)>, Vec<PoseGraphEdge>) {
        let mut nodes = vec![(0u64, RigidTransform::identity())];
        let mut edges = Vec::new();
        for i in 1..n {
            let delta = se3_exp(&rand_twist(rng, 0.3, 0.8));
            let prev = nodes[i - 1].1;
            nodes.push((i as u64, prev.compose(&delta)));
            edges.push(PoseGraphEdge::new((i - 1) as u64, i as u64, delta));
        }
        (nodes, edges)
    }

    #[test]
    fn perturbed_chain_returns_to_ground_truth() {
        let mut rng = StdRng::seed_from_u64(7);
        let (truth, edges) = chain(5, &mut rng);
        let mut noisy = truth.clone();
        for (i, (_, pose)) in noisy.iter_mut().enumerate() {
            if i > 0 {
                *pose = se3_exp(&rand_twist(&mut rng, 0.05, 0.1)).compose(pose);
            }
        }
        let result = optimize_pose_graph(&noisy, &edges, &LmSettings::default()).unwrap();
        for ((_, got), (_, want)) in result.nodes.iter().zip(truth.iter()) {
            assert!(got.max_abs_diff(want) < 1e-9, "gap {}", got.max_abs_diff(want));
        }
        assert!(result.final_cost < 1e-18);
    }

    #[test]
    fn consistent_graph_stays_put() {
        let mut rng = StdRng::seed_from_u64(8);
        let (truth, edges) = chain(6, &mut rng);
        let result = optimize_pose_graph(&truth, &edges, &LmSettings::default()).unwrap();
        assert_eq!(result.iterations, 0);
        for ((_, got), (_, want)) in result.nodes.iter().zip(truth.iter()) {
            assert!(got.max_abs_diff(want) == 0.0);
        }
    }

    #[test]
    fn drifted_square_loop_with_exact_closure() {
        // The odometry *initialization* accumulates 10 degrees of yaw drift
        // around a square; the edges carry the exact relative poses plus an
        // exact closure edge. Optimization must drive the closure residual
        // to zero.
        let side = 2.0;
        let quarter = std::f64::consts::FRAC_PI_2;
        let drift = 10.0f64.to_radians() / 4.0;

        let exact_step = se3_exp(&Twist::new(
            Vector3::new(0.0, 0.0, quarter),
            Vector3::new(side, 0.0, 0.0),
        ));
        let drifted_step = se3_exp(&Twist::new(
            Vector3::new(0.0, 0.0, quarter + drift),
            Vector3::new(side, 0.0, 0.0),
        ));

        let mut nodes = vec![(0u64, RigidTransform::identity())];
        let mut edges = Vec::new();
        for i in 1..5u64 {
            let prev = nodes[(i - 1) as usize].1;
            nodes.push((i, prev.compose(&drifted_step)));
            edges.push(PoseGraphEdge::new(i - 1, i, exact_step));
        }
        // Exact closure: after four quarter turns the pose returns to the
        // start, so the relative pose of node 4 in node 0 is identity.
        edges.push(PoseGraphEdge::new(0, 4, RigidTransform::identity()));

        let result = optimize_pose_graph(&nodes, &edges, &LmSettings::default()).unwrap();
        assert!(result.initial_cost > 1e-4);
        assert!(result.final_cost < result.initial_cost);
        assert!(result.final_cost < 1e-12, "final cost {}", result.final_cost);
        let closure = edge_residual(
            &result.nodes[0].1,
            &result.nodes[4].1,
            &RigidTransform::identity(),
        );
        assert!(
            closure.to_vector().norm() < 1e-9,
            "closure residual {}",
            closure.to_vector().norm()
        );
    }

    #[test]
    fn gauge_covariance() {
        let mut rng = StdRng::seed_from_u64(10);
        let (truth, edges) = chain(5, &mut rng);
        let mut noisy = truth.clone();
        for (i, (_, pose)) in noisy.iter_mut().enumerate() {
            if i > 0 {
                *pose = se3_exp(&rand_twist(&mut rng, 0.04, 0.08)).compose(pose);
            }
        }
        let plain = optimize_pose_graph(&noisy, &edges, &LmSettings::default()).unwrap();

        // Pre-compose every node with a common transform and re-anchor.
        let g = se3_exp(&rand_twist(&mut rng, 0.7, 2.0));
        let moved: Vec<(NodeId, RigidTransform)> = noisy
            .iter()
            .map(|(id, p)| (*id, g.compose(p)))
            .collect();
        let moved_result = optimize_pose_graph(&moved, &edges, &LmSettings::default()).unwrap();

        // Relative poses agree.
        for w in 0..4 {
            let a = plain.nodes[w].1.inverse().compose(&plain.nodes[w + 1].1);
            let b = moved_result.nodes[w]
                .1
                .inverse()
                .compose(&moved_result.nodes[w + 1].1);
            assert!(a.max_abs_diff(&b) < 1e-9, "gap {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn disconnected_graph_is_an_error() {
        let nodes = vec![
            (0u64, RigidTransform::identity()),
            (1, RigidTransform::identity()),
            (2, RigidTransform::identity()),
        ];
        let edges = vec![PoseGraphEdge::new(0, 1, RigidTransform::identity())];
        assert!(matches!(
            optimize_pose_graph(&nodes, &edges, &LmSettings::default()),
            Err(PgoError::Disconnected { components: 2 })
        ));
    }
}
