//! Factor-graph nonlinear least squares with Levenberg-Marquardt.
//!
//! Variables live on their manifolds: poses update by a left-multiplicative
//! se(3) increment, points and plain 3-vectors additively, gravity tilt by a
//! 2-DoF rotation about the horizontal axes. Factors return whitened
//! residuals and analytic Jacobians with respect to those local increments.
//!
//! Two linear solvers share the same damped normal equations: a dense solve
//! over all free variables, and block elimination of the 3-DoF point
//! variables followed by a dense solve of the reduced system and
//! back-substitution. The damping `H + lambda I` is applied before
//! elimination so both paths solve the identical system.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{
    huber_cost, huber_sqrt_weight, se3_exp, so3_exp, RigidTransform, Twist,
};

/// Handle to a variable inside a [`Problem`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct VarKey(pub usize);

/// Optimization variable and its manifold.
#[derive(Debug, Clone)]
pub enum Variable {
    /// SE(3) pose, 6 DoF, updated as `T <- Exp(delta) ∘ T`.
    Pose(RigidTransform),
    /// 3D point, additive. Point variables are the ones the Schur path
    /// eliminates.
    Point(Vector3<f64>),
    /// Free 3-vector (velocity, bias), additive.
    Vec3(Vector3<f64>),
    /// Rotation with 2 free DoF, updated as `R <- R ∘ Exp([d0, d1, 0])`.
    /// The rotation about the constrained axis stays fixed.
    Tilt(UnitQuaternion<f64>),
}

impl Variable {
    pub fn local_dim(&self) -> usize {
        match self {
            Variable::Pose(_) => 6,
            Variable::Point(_) | Variable::Vec3(_) => 3,
            Variable::Tilt(_) => 2,
        }
    }

    pub fn retract(&mut self, delta: &[f64]) {
        match self {
            Variable::Pose(t) => {
                let xi = Twist::new(
                    Vector3::new(delta[0], delta[1], delta[2]),
                    Vector3::new(delta[3], delta[4], delta[5]),
                );
                *t = se3_exp(&xi).compose(t);
            }
            Variable::Point(p) | Variable::Vec3(p) => {
                *p += Vector3::new(delta[0], delta[1], delta[2]);
            }
            Variable::Tilt(q) => {
                let inc = so3_exp(&Vector3::new(delta[0], delta[1], 0.0));
                *q = UnitQuaternion::new_normalize((*q * inc).into_inner());
            }
        }
    }

    pub fn as_pose(&self) -> &RigidTransform {
        match self {
            Variable::Pose(t) => t,
            _ => panic!("variable is not a pose"),
        }
    }

    pub fn as_point(&self) -> &Vector3<f64> {
        match self {
            Variable::Point(p) => p,
            _ => panic!("variable is not a point"),
        }
    }

    pub fn as_vec3(&self) -> &Vector3<f64> {
        match self {
            Variable::Vec3(v) => v,
            _ => panic!("variable is not a vec3"),
        }
    }

    pub fn as_tilt(&self) -> &UnitQuaternion<f64> {
        match self {
            Variable::Tilt(q) => q,
            _ => panic!("variable is not a tilt rotation"),
        }
    }
}

/// A residual block. Implementations return the whitened residual and, on
/// request, the whitened Jacobians with respect to each connected variable's
/// local increment, in the order reported by [`Factor::variables`].
pub trait Factor {
    fn variables(&self) -> &[VarKey];
    fn dim(&self) -> usize;
    fn evaluate(
        &self,
        vars: &[&Variable],
        jacobians: Option<&mut [DMatrix<f64>]>,
    ) -> DVector<f64>;
    /// Huber threshold on the whitened residual norm, if robustified.
    fn huber_delta(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_lambda: f64,
    pub min_lambda: f64,
    pub gradient_tolerance: f64,
    pub step_tolerance: f64,
    pub cost_tolerance: f64,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            max_lambda: 1e12,
            min_lambda: 1e-12,
            gradient_tolerance: 1e-12,
            step_tolerance: 1e-14,
            cost_tolerance: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    CostTolerance,
    MaxIterations,
    /// No trial step was accepted before the damping hit its ceiling.
    LambdaExhausted,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Point variables whose damped block failed to invert and were held
    /// fixed for the affected iterations.
    pub dropped_points: Vec<VarKey>,
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("residual is not finite at the initial point")]
    InvalidProblem,
    #[error("problem has no residual blocks")]
    EmptyProblem,
}

/// Which linear solver backs each LM iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolver {
    Dense,
    /// Eliminate free point variables first, solve the reduced system, then
    /// back-substitute. Requires every factor to touch at most one free
    /// point variable.
    SchurPoints,
}

pub struct Problem {
    vars: Vec<Variable>,
    fixed: Vec<bool>,
    factors: Vec<Box<dyn Factor>>,
}

struct Layout {
    /// Column offset per free dense variable index; usize::MAX otherwise.
    dense_offset: Vec<usize>,
    dense_dim: usize,
    /// Free point variables in ascending key order.
    points: Vec<usize>,
    /// Position of each free point in `points`; usize::MAX otherwise.
    point_slot: Vec<usize>,
}

struct NormalEquations {
    a: DMatrix<f64>,
    b_dense: DVector<f64>,
    /// Per point: 3x3 data block and gradient.
    c: Vec<Matrix3<f64>>,
    b_point: Vec<Vector3<f64>>,
    /// Per point: map from dense variable index to the (dense_dim x 3)
    /// coupling block.
    cross: Vec<BTreeMap<usize, DMatrix<f64>>>,
    gradient_inf_norm: f64,
}

impl Default for Problem {
    fn default() -> Self {
        Self::new()
    }
}

impl Problem {
    pub fn new() -> Self {
        Self {
            vars: Vec::new(),
            fixed: Vec::new(),
            factors: Vec::new(),
        }
    }

    pub fn add_variable(&mut self, v: Variable) -> VarKey {
        self.vars.push(v);
        self.fixed.push(false);
        VarKey(self.vars.len() - 1)
    }

    pub fn add_pose(&mut self, t: RigidTransform) -> VarKey {
        self.add_variable(Variable::Pose(t))
    }

    pub fn add_point(&mut self, p: Vector3<f64>) -> VarKey {
        self.add_variable(Variable::Point(p))
    }

    pub fn add_vec3(&mut self, v: Vector3<f64>) -> VarKey {
        self.add_variable(Variable::Vec3(v))
    }

    pub fn add_tilt(&mut self, q: UnitQuaternion<f64>) -> VarKey {
        self.add_variable(Variable::Tilt(q))
    }

    pub fn set_fixed(&mut self, key: VarKey) {
        self.fixed[key.0] = true;
    }

    pub fn add_factor(&mut self, f: Box<dyn Factor>) {
        self.factors.push(f);
    }

    pub fn var(&self, key: VarKey) -> &Variable {
        &self.vars[key.0]
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    fn gather<'a>(&'a self, keys: &[VarKey]) -> Vec<&'a Variable> {
        keys.iter().map(|k| &self.vars[k.0]).collect()
    }

    /// Robustified total cost at the current variable values.
    pub fn cost(&self) -> f64 {
        Self::cost_of(&self.vars, &self.factors)
    }

    fn cost_of(vars: &[Variable], factors: &[Box<dyn Factor>]) -> f64 {
        let mut total = 0.0;
        for f in factors {
            let gathered: Vec<&Variable> = f.variables().iter().map(|k| &vars[k.0]).collect();
            let r = f.evaluate(&gathered, None);
            total += huber_cost(r.norm_squared(), f.huber_delta());
        }
        total
    }

    fn layout(&self) -> Layout {
        let mut dense_offset = vec![usize::MAX; self.vars.len()];
        let mut point_slot = vec![usize::MAX; self.vars.len()];
        let mut points = Vec::new();
        let mut dense_dim = 0;
        for (i, v) in self.vars.iter().enumerate() {
            if self.fixed[i] {
                continue;
            }
            if matches!(v, Variable::Point(_)) {
                point_slot[i] = points.len();
                points.push(i);
            } else {
                dense_offset[i] = dense_dim;
                dense_dim += v.local_dim();
            }
        }
        Layout {
            dense_offset,
            dense_dim,
            points,
            point_slot,
        }
    }

    /// Evaluates every factor and accumulates the (undamped) normal
    /// equations split into dense / point / coupling parts.
    fn build_normal_equations(&self, layout: &Layout) -> Option<NormalEquations> {
        let np = layout.points.len();
        let mut ne = NormalEquations {
            a: DMatrix::zeros(layout.dense_dim, layout.dense_dim),
            b_dense: DVector::zeros(layout.dense_dim),
            c: vec![Matrix3::zeros(); np],
            b_point: vec![Vector3::zeros(); np],
            cross: (0..np).map(|_| BTreeMap::new()).collect(),
            gradient_inf_norm: 0.0,
        };

        for f in &self.factors {
            let keys = f.variables();
            let gathered = self.gather(keys);
            let mut jacs: Vec<DMatrix<f64>> = gathered
                .iter()
                .map(|v| DMatrix::zeros(f.dim(), v.local_dim()))
                .collect();
            let mut r = f.evaluate(&gathered, Some(&mut jacs));
            if !r.iter().all(|x| x.is_finite()) {
                return None;
            }
            let w = huber_sqrt_weight(r.norm(), f.huber_delta());
            if w != 1.0 {
                r *= w;
                for j in &mut jacs {
                    *j *= w;
                }
            }

            // Count free point variables per factor; the Schur layout
            // supports at most one.
            debug_assert!(
                keys.iter()
                    .filter(|k| layout.point_slot[k.0] != usize::MAX)
                    .count()
                    <= 1,
                "a factor may reference at most one free point variable"
            );

            for (ai, ka) in keys.iter().enumerate() {
                let ia = ka.0;
                let free_dense = layout.dense_offset[ia] != usize::MAX;
                let free_point = layout.point_slot[ia] != usize::MAX;
                if !free_dense && !free_point {
                    continue;
                }
                let ja = &jacs[ai];
                let grad = ja.transpose() * &r;
                for g in grad.iter() {
                    ne.gradient_inf_norm = ne.gradient_inf_norm.max(g.abs());
                }
                if free_dense {
                    let off = layout.dense_offset[ia];
                    for k in 0..grad.len() {
                        ne.b_dense[off + k] += grad[k];
                    }
                } else {
                    let slot = layout.point_slot[ia];
                    ne.b_point[slot] += Vector3::new(grad[0], grad[1], grad[2]);
                }

                for (bi, kb) in keys.iter().enumerate() {
                    let ib = kb.0;
                    let b_dense = layout.dense_offset[ib] != usize::MAX;
                    let b_point = layout.point_slot[ib] != usize::MAX;
                    if !b_dense && !b_point {
                        continue;
                    }
                    let block = ja.transpose() * &jacs[bi];
                    match (free_dense, b_dense) {
                        (true, true) => {
                            let (ra, ca) = (layout.dense_offset[ia], layout.dense_offset[ib]);
                            for r0 in 0..block.nrows() {
                                for c0 in 0..block.ncols() {
                                    ne.a[(ra + r0, ca + c0)] += block[(r0, c0)];
                                }
                            }
                        }
                        (true, false) => {
                            let slot = layout.point_slot[ib];
                            let entry = ne.cross[slot]
                                .entry(ia)
                                .or_insert_with(|| DMatrix::zeros(block.nrows(), 3));
                            *entry += block;
                        }
                        (false, false) => {
                            let slot = layout.point_slot[ia];
                            debug_assert_eq!(slot, layout.point_slot[ib]);
                            for r0 in 0..3 {
                                for c0 in 0..3 {
                                    ne.c[slot][(r0, c0)] += block[(r0, c0)];
                                }
                            }
                        }
                        // Handled symmetrically from the dense side.
                        (false, true) => {}
                    }
                }
            }
        }
        Some(ne)
    }

    /// Solves the damped system `(H + lambda I) delta = -g`, returning the
    /// full update stacked as [dense | points]. Returns None when the linear
    /// solve fails. Point blocks that fail to invert are reported.
    fn damped_step(
        &self,
        layout: &Layout,
        ne: &NormalEquations,
        lambda: f64,
        solver: LinearSolver,
        dropped: &mut Vec<VarKey>,
    ) -> Option<DVector<f64>> {
        let np = layout.points.len();
        match solver {
            LinearSolver::Dense => {
                let n = layout.dense_dim + 3 * np;
                let mut h = DMatrix::zeros(n, n);
                let mut rhs = DVector::zeros(n);
                h.view_mut((0, 0), (layout.dense_dim, layout.dense_dim))
                    .copy_from(&ne.a);
                for i in 0..layout.dense_dim {
                    rhs[i] = -ne.b_dense[i];
                }
                for (slot, _) in layout.points.iter().enumerate() {
                    let off = layout.dense_dim + 3 * slot;
                    for r0 in 0..3 {
                        rhs[off + r0] = -ne.b_point[slot][r0];
                        for c0 in 0..3 {
                            h[(off + r0, off + c0)] = ne.c[slot][(r0, c0)];
                        }
                    }
                    for (ia, block) in &ne.cross[slot] {
                        let ra = layout.dense_offset[*ia];
                        for r0 in 0..block.nrows() {
                            for c0 in 0..3 {
                                h[(ra + r0, off + c0)] = block[(r0, c0)];
                                h[(off + c0, ra + r0)] = block[(r0, c0)];
                            }
                        }
                    }
                }
                for i in 0..n {
                    h[(i, i)] += lambda;
                }
                solve_spd(&h, &rhs)
            }
            LinearSolver::SchurPoints => {
                let mut reduced = ne.a.clone();
                for i in 0..layout.dense_dim {
                    reduced[(i, i)] += lambda;
                }
                let mut rhs = DVector::zeros(layout.dense_dim);
                for i in 0..layout.dense_dim {
                    rhs[i] = -ne.b_dense[i];
                }

                let mut c_inv = vec![None::<Matrix3<f64>>; np];
                for slot in 0..np {
                    let mut c = ne.c[slot];
                    for d in 0..3 {
                        c[(d, d)] += lambda;
                    }
                    match c.try_inverse() {
                        Some(inv) if inv.iter().all(|x| x.is_finite()) => c_inv[slot] = Some(inv),
                        _ => dropped.push(VarKey(layout.points[slot])),
                    }
                }

                // reduced -= B C^-1 B^T ; rhs += B C^-1 g_point
                for slot in 0..np {
                    let Some(inv) = c_inv[slot] else { continue };
                    let blocks: Vec<(&usize, &DMatrix<f64>)> = ne.cross[slot].iter().collect();
                    for (ia, ba) in &blocks {
                        let ba_cinv = *ba * inv;
                        let ra = layout.dense_offset[**ia];
                        let gp = &ba_cinv * ne.b_point[slot];
                        for r0 in 0..ba.nrows() {
                            rhs[ra + r0] += gp[r0];
                        }
                        for (ib, bb) in &blocks {
                            let rb = layout.dense_offset[**ib];
                            let prod = &ba_cinv * bb.transpose();
                            for r0 in 0..prod.nrows() {
                                for c0 in 0..prod.ncols() {
                                    reduced[(ra + r0, rb + c0)] -= prod[(r0, c0)];
                                }
                            }
                        }
                    }
                }

                let dense_step = solve_spd(&reduced, &rhs)?;

                let mut full = DVector::zeros(layout.dense_dim + 3 * np);
                full.rows_mut(0, layout.dense_dim).copy_from(&dense_step);
                for slot in 0..np {
                    let off = layout.dense_dim + 3 * slot;
                    let Some(inv) = c_inv[slot] else {
                        // dropped point keeps a zero step this iteration
                        continue;
                    };
                    let mut acc = -ne.b_point[slot];
                    for (ia, ba) in &ne.cross[slot] {
                        let ra = layout.dense_offset[*ia];
                        let da = dense_step.rows(ra, ba.nrows());
                        acc -= Vector3::from_iterator(
                            (ba.transpose() * da).iter().copied(),
                        );
                    }
                    let dp = inv * acc;
                    for r0 in 0..3 {
                        full[off + r0] = dp[r0];
                    }
                }
                Some(full)
            }
        }
    }

    /// One damped Gauss-Newton step at the current values, without applying
    /// it. Exposed so the two linear solvers can be compared directly.
    pub fn normal_equation_step(
        &self,
        lambda: f64,
        solver: LinearSolver,
    ) -> Option<DVector<f64>> {
        let layout = self.layout();
        let ne = self.build_normal_equations(&layout)?;
        let mut dropped = Vec::new();
        self.damped_step(&layout, &ne, lambda, solver, &mut dropped)
    }

    fn apply_step(&self, layout: &Layout, step: &DVector<f64>) -> Vec<Variable> {
        let mut trial = self.vars.clone();
        for (i, v) in trial.iter_mut().enumerate() {
            if self.fixed[i] {
                continue;
            }
            if layout.dense_offset[i] != usize::MAX {
                let off = layout.dense_offset[i];
                let dim = v.local_dim();
                let slice: Vec<f64> = (0..dim).map(|k| step[off + k]).collect();
                v.retract(&slice);
            } else if layout.point_slot[i] != usize::MAX {
                let off = layout.dense_dim + 3 * layout.point_slot[i];
                let slice = [step[off], step[off + 1], step[off + 2]];
                v.retract(&slice);
            }
        }
        trial
    }

    /// Runs Levenberg-Marquardt until convergence or exhaustion. Variable
    /// values are updated in place with the accepted result.
    pub fn solve(
        &mut self,
        settings: &LmSettings,
        solver: LinearSolver,
    ) -> Result<LmReport, SolveError> {
        if self.factors.is_empty() {
            return Err(SolveError::EmptyProblem);
        }
        let layout = self.layout();
        let initial_cost = Self::cost_of(&self.vars, &self.factors);
        if !initial_cost.is_finite() {
            return Err(SolveError::InvalidProblem);
        }

        let mut cost = initial_cost;
        let mut lambda = settings.initial_lambda;
        let mut report = LmReport {
            iterations: 0,
            accepted_steps: 0,
            initial_cost,
            final_cost: initial_cost,
            termination: Termination::MaxIterations,
            dropped_points: Vec::new(),
        };

        for iter in 0..settings.max_iterations {
            report.iterations = iter;
            let Some(ne) = self.build_normal_equations(&layout) else {
                // Residual became non-finite; treat as exhaustion of this
                // iterate (cannot linearize here).
                report.termination = Termination::LambdaExhausted;
                report.final_cost = cost;
                return Ok(report);
            };
            if ne.gradient_inf_norm < settings.gradient_tolerance {
                report.termination = Termination::GradientTolerance;
                report.final_cost = cost;
                return Ok(report);
            }

            let mut accepted = false;
            while lambda <= settings.max_lambda {
                let mut dropped = Vec::new();
                let step = self.damped_step(&layout, &ne, lambda, solver, &mut dropped);
                let Some(step) = step else {
                    lambda *= settings.lambda_up;
                    continue;
                };
                let trial = self.apply_step(&layout, &step);
                let trial_cost = Self::cost_of(&trial, &self.factors);
                if trial_cost.is_finite() && trial_cost <= cost {
                    let decrease = cost - trial_cost;
                    let step_norm = step.norm();
                    self.vars = trial;
                    cost = trial_cost;
                    lambda = (lambda * settings.lambda_down).max(settings.min_lambda);
                    report.accepted_steps += 1;
                    for d in dropped {
                        if !report.dropped_points.contains(&d) {
                            report.dropped_points.push(d);
                        }
                    }
                    accepted = true;
                    if step_norm < settings.step_tolerance {
                        report.termination = Termination::StepTolerance;
                        report.final_cost = cost;
                        report.iterations = iter + 1;
                        return Ok(report);
                    }
                    if decrease <= settings.cost_tolerance * cost.max(1e-300) {
                        report.termination = Termination::CostTolerance;
                        report.final_cost = cost;
                        report.iterations = iter + 1;
                        return Ok(report);
                    }
                    break;
                }
                lambda *= settings.lambda_up;
            }
            if !accepted {
                report.termination = Termination::LambdaExhausted;
                report.final_cost = cost;
                return Ok(report);
            }
        }

        report.iterations = settings.max_iterations;
        report.final_cost = cost;
        Ok(report)
    }
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = h.clone().cholesky() {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    let x = h.clone().lu().solve(rhs)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Central finite-difference Jacobians of a factor with respect to each of
/// its variables' local increments. Test oracle for the analytic Jacobians.
pub fn numeric_factor_jacobians(
    factor: &dyn Factor,
    vars: &[Variable],
    h: f64,
) -> Vec<DMatrix<f64>> {
    let keys = factor.variables();
    assert_eq!(keys.len(), vars.len());
    let mut out = Vec::with_capacity(vars.len());
    for (vi, v) in vars.iter().enumerate() {
        let dim = v.local_dim();
        let mut jac = DMatrix::zeros(factor.dim(), dim);
        for col in 0..dim {
            let mut delta = vec![0.0; dim];
            delta[col] = h;
            let mut plus = vars.to_vec();
            plus[vi].retract(&delta);
            delta[col] = -h;
            let mut minus = vars.to_vec();
            minus[vi].retract(&delta);
            let rp = factor.evaluate(&plus.iter().collect::<Vec<_>>(), None);
            let rm = factor.evaluate(&minus.iter().collect::<Vec<_>>(), None);
            let fd = (rp - rm) / (2.0 * h);
            jac.set_column(col, &fd);
        }
        out.push(jac);
    }
    out
}

/// Max relative deviation between analytic and numeric Jacobians, where the
/// denominator is the larger of the two magnitudes clamped below by 1.
pub fn jacobian_relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..analytic.nrows() {
        for c in 0..analytic.ncols() {
            let a = analytic[(r, c)];
            let n = numeric[(r, c)];
            let scale = a.abs().max(n.abs()).max(1.0);
            worst = worst.max((a - n).abs() / scale);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    /// r = x - target on a single Vec3 variable component.
    struct Shift {
        keys: [VarKey; 1],
        target: Vector3<f64>,
    }

    impl Factor for Shift {
        fn variables(&self) -> &[VarKey] {
            &self.keys
        }
        fn dim(&self) -> usize {
            3
        }
        fn evaluate(
            &self,
            vars: &[&Variable],
            jacobians: Option<&mut [DMatrix<f64>]>,
        ) -> DVector<f64> {
            let x = vars[0].as_vec3();
            if let Some(jacs) = jacobians {
                jacs[0].copy_from(&DMatrix::identity(3, 3));
            }
            DVector::from_iterator(3, (x - self.target).iter().copied())
        }
    }

    /// Rosenbrock as a 2-residual least-squares problem over two scalars
    /// stored in a Vec3 (third component pinned by a zero residual).
    struct Rosenbrock {
        keys: [VarKey; 1],
    }

    impl Factor for Rosenbrock {
        fn variables(&self) -> &[VarKey] {
            &self.keys
        }
        fn dim(&self) -> usize {
            3
        }
        fn evaluate(
            &self,
            vars: &[&Variable],
            jacobians: Option<&mut [DMatrix<f64>]>,
        ) -> DVector<f64> {
            let v = vars[0].as_vec3();
            let (x, y) = (v.x, v.y);
            if let Some(jacs) = jacobians {
                jacs[0].copy_from(&DMatrix::from_row_slice(
                    3,
                    3,
                    &[-20.0 * x, 10.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                ));
            }
            DVector::from_vec(vec![10.0 * (y - x * x), 1.0 - x, v.z])
        }
    }

    #[test]
    fn quadratic_toy_converges_exactly() {
        let mut p = Problem::new();
        let k = p.add_vec3(Vector3::zeros());
        p.add_factor(Box::new(Shift {
            keys: [k],
            target: Vector3::new(3.0, 0.0, 0.0),
        }));
        let report = p.solve(&LmSettings::default(), LinearSolver::Dense).unwrap();
        let x = p.var(k).as_vec3();
        assert!((x - Vector3::new(3.0, 0.0, 0.0)).norm() < 1e-10);
        assert!(report.final_cost < 1e-20);
    }

    #[test]
    fn rosenbrock_reaches_the_global_optimum() {
        let mut p = Problem::new();
        let k = p.add_vec3(Vector3::new(-1.2, 1.0, 0.0));
        p.add_factor(Box::new(Rosenbrock { keys: [k] }));
        let settings = LmSettings {
            max_iterations: 200,
            ..LmSettings::default()
        };
        let report = p.solve(&settings, LinearSolver::Dense).unwrap();
        let x = p.var(k).as_vec3();
        assert!(
            (x - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-6,
            "got {x:?} after {} iterations",
            report.iterations
        );
    }

    #[test]
    fn rosenbrock_jacobian_matches_finite_differences() {
        let f = Rosenbrock { keys: [VarKey(0)] };
        let vars = vec![Variable::Vec3(Vector3::new(-0.7, 0.4, 0.2))];
        let gathered: Vec<&Variable> = vars.iter().collect();
        let mut jacs = vec![DMatrix::zeros(3, 3)];
        f.evaluate(&gathered, Some(&mut jacs));
        let numeric = numeric_factor_jacobians(&f, &vars, 1e-6);
        assert!(jacobian_relative_error(&jacs[0], &numeric[0]) < 1e-7);
    }

    #[test]
    fn zero_residual_start_terminates_immediately() {
        let mut p = Problem::new();
        let k = p.add_vec3(Vector3::new(1.0, 2.0, 3.0));
        p.add_factor(Box::new(Shift {
            keys: [k],
            target: Vector3::new(1.0, 2.0, 3.0),
        }));
        let report = p.solve(&LmSettings::default(), LinearSolver::Dense).unwrap();
        assert_eq!(report.iterations, 0);
        assert_eq!(report.termination, Termination::GradientTolerance);
        assert_eq!(report.final_cost, 0.0);
    }

    #[test]
    fn non_finite_initial_residual_is_invalid() {
        let mut p = Problem::new();
        let k = p.add_vec3(Vector3::new(f64::NAN, 0.0, 0.0));
        p.add_factor(Box::new(Shift {
            keys: [k],
            target: Vector3::zeros(),
        }));
        assert!(matches!(
            p.solve(&LmSettings::default(), LinearSolver::Dense),
            Err(SolveError::InvalidProblem)
        ));
    }
}
