//! Batch MAP localization of a newly detected anchor jointly with the window states.

use std::path::Path;

use nalgebra::{Cholesky, Matrix2, Matrix3, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nav_ekf::{
    process_noise_covariance, propagate_state, range_model_metres, transition_matrix, FilterModel, ImuInput, Matrix19,
    NavBelief, NavState, Vector19, IDX_ATT, IDX_POS, STATE_DIM,
};
use crate::se_math::{exp_so3, right_jacobian_inv};
use crate::sparse::{levenberg_marquardt, ArrowSystem};
use crate::uwb_protocol::RangeMeasurementSet;
use crate::world_sim::TagGeometry;
use crate::SPEED_OF_LIGHT;

const MAX_CONDITION: f64 = 1e6;
/// Robot positions closer than this count as one for the observability guard.
const DISTINCT_POSITION_TOL: f64 = 0.01;

#[derive(Error, Clone, Debug, PartialEq)]
pub enum AnchorInitError {
    #[error("tag geometry is degenerate for the analytic seed (condition number {condition:.3e})")]
    DegenerateGeometry { condition: f64 },
    #[error("window has range sets from the new anchor at only {positions} distinct positions")]
    InsufficientExcitation { positions: usize },
    #[error("no convergence after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("solution places the anchor below the floor (z = {z:.3})")]
    BelowFloor { z: f64 },
    #[error("normal equations are not positive definite")]
    Singular,
}

/// Prior `z ~ N(h, R_h)` on the anchor height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightPrior {
    pub h: f64,
    pub variance: f64,
}

impl Default for HeightPrior {
    fn default() -> Self {
        Self { h: 2.0, variance: 0.25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WindowAnchor {
    /// The anchor being initialized.
    New,
    /// An already initialized anchor at a fixed estimated position.
    Known(Vector3<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowRange {
    /// Step index relative to the window start.
    pub offset: usize,
    pub measurement: RangeMeasurementSet,
    pub anchor: WindowAnchor,
}

/// Data for one initialization over steps `k..=k+λ`.
#[derive(Clone, Debug, PartialEq)]
pub struct InitWindow {
    /// Predicted belief at `k`.
    pub prior: NavBelief,
    /// `u_k … u_{k+λ−1}`.
    pub imu: Vec<ImuInput>,
    pub heights: Vec<(usize, f64)>,
    pub ranges: Vec<WindowRange>,
}

impl InitWindow {
    /// λ in steps.
    pub fn len(&self) -> usize {
        self.imu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.imu.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSolution {
    /// x̂_k … x̂_{k+λ}.
    pub states: Vec<NavState>,
    /// Marginal covariance of x̂_{k+λ}.
    pub last_covariance: Matrix19,
    pub anchor: Vector3<f64>,
    /// Cost after the seed and after every accepted iteration.
    pub costs: Vec<f64>,
    pub iterations: usize,
    /// `sqrt(gᵀH⁻¹g / (1 + cost))` at the solution.
    pub scaled_gradient: f64,
}

/// Anchor position at height `h` from one range set.
///
/// Horizontal position from the differenced squared ranges of the three tags, rescaled so
/// the distance to tag 1 matches its range. Tag clock offsets are removed with the
/// tag-to-tag measurements of the same set.
pub fn analytic_anchor_seed(
    range_set: &RangeMeasurementSet,
    robot: &NavState,
    h: f64,
    tags: &TagGeometry,
) -> Result<Vector3<f64>, AnchorInitError> {
    let tag_pos: Vec<Vector3<f64>> = (0..3).map(|i| robot.position + robot.attitude * *tags.offset(i)).collect();
    let mut d = [range_set.tag1_anchor * SPEED_OF_LIGHT, 0.0, 0.0];
    for j in 0..2 {
        let baseline = (tags.offset(j + 1) - tags.offset(0)).norm();
        let offset = range_set.tag_tag[j] * SPEED_OF_LIGHT - baseline;
        d[j + 1] = range_set.tag_anchor[j] * SPEED_OF_LIGHT - offset;
    }
    let mut m = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    let p0 = tag_pos[0];
    for l in 1..3 {
        let diff = tag_pos[l] - p0;
        m[(l - 1, 0)] = 2.0 * diff.x;
        m[(l - 1, 1)] = 2.0 * diff.y;
        rhs[l - 1] = tag_pos[l].norm_squared() - p0.norm_squared() - d[l] * d[l] + d[0] * d[0] - 2.0 * diff.z * h;
    }
    let sv = m.singular_values();
    let condition = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        return Err(AnchorInitError::DegenerateGeometry { condition });
    }
    let xy = m.lu().solve(&rhs).ok_or(AnchorInitError::DegenerateGeometry { condition })?;
    let horizontal = Vector2::new(xy.x - p0.x, xy.y - p0.y);
    let dz = h - p0.z;
    let target = d[0] * d[0] - dz * dz;
    let xy = if target > 0.0 && horizontal.norm() > 0.0 {
        Vector2::new(p0.x, p0.y) + horizontal * (target.sqrt() / horizontal.norm())
    } else {
        xy
    };
    Ok(Vector3::new(xy.x, xy.y, h))
}

/// Pure IMU propagation from `x0`; returns `λ + 1` states.
pub fn dead_reckon_window(x0: &NavState, imu: &[ImuInput]) -> Vec<NavState> {
    let mut states = Vec::with_capacity(imu.len() + 1);
    states.push(*x0);
    for u in imu {
        let next = propagate_state(states.last().expect("nonempty"), u);
        states.push(next);
    }
    states
}

/// Fixed weights of the window cost, evaluated once at the initial iterate.
pub(crate) struct Weights {
    prior_info: Matrix19,
    process_info: Vec<Matrix19>,
    range_info: SMatrix<f64, 5, 5>,
    height_info: f64,
    anchor_height_info: f64,
}

impl Weights {
    pub(crate) fn new(
        window: &InitWindow,
        prior: &HeightPrior,
        model: &FilterModel,
        states: &[NavState],
    ) -> Result<Self, AnchorInitError> {
        let inv19 = |m: Matrix19| Cholesky::new(m).map(|c| c.inverse()).ok_or(AnchorInitError::Singular);
        let prior_info = inv19(window.prior.covariance)?;
        let process_info = window
            .imu
            .iter()
            .zip(states)
            .map(|(u, x)| inv19(process_noise_covariance(x, u, &model.noise)))
            .collect::<Result<Vec<_>, _>>()?;
        let r = model.range_cov * (SPEED_OF_LIGHT * SPEED_OF_LIGHT);
        let range_info = Cholesky::new(r).map(|c| c.inverse()).ok_or(AnchorInitError::Singular)?;
        Ok(Self {
            prior_info,
            process_info,
            range_info,
            height_info: 1.0 / model.height_var,
            anchor_height_info: 1.0 / prior.variance,
        })
    }
}

/// Process residual `x_{j+1} ⊟ f(x_j, u_j)` and its Jacobians with respect to `x_j`, `x_{j+1}`.
pub fn process_residual(x: &NavState, u: &ImuInput, next: &NavState) -> (Vector19, Matrix19, Matrix19) {
    let predicted = propagate_state(x, u);
    let e = next.difference(&predicted);
    let j_next = next.difference_jacobian(&predicted);
    let phi = Vector3::new(e[IDX_ATT], e[IDX_ATT + 1], e[IDX_ATT + 2]);
    let mut m = Matrix19::identity();
    let att: Matrix3<f64> = right_jacobian_inv(&phi) * exp_so3(&phi).matrix().transpose();
    m.fixed_view_mut::<3, 3>(IDX_ATT, IDX_ATT).copy_from(&att);
    let j_prev = -m * transition_matrix(x, u);
    (e, j_prev, j_next)
}

fn height_jacobian() -> SMatrix<f64, 1, STATE_DIM> {
    let mut h = SMatrix::<f64, 1, STATE_DIM>::zeros();
    h[IDX_POS + 2] = 1.0;
    h
}

fn anchor_position(range: &WindowRange, anchor: &Vector3<f64>) -> Vector3<f64> {
    match range.anchor {
        WindowAnchor::New => *anchor,
        WindowAnchor::Known(p) => p,
    }
}

/// Half the weighted squared residual norm.
pub(crate) fn evaluate_cost(
    window: &InitWindow,
    prior: &HeightPrior,
    model: &FilterModel,
    weights: &Weights,
    states: &[NavState],
    anchor: &Vector3<f64>,
) -> f64 {
    let mut cost = 0.0;
    let e0 = states[0].difference(&window.prior.mean);
    cost += e0.dot(&(weights.prior_info * e0));
    for (j, u) in window.imu.iter().enumerate() {
        let e = states[j + 1].difference(&propagate_state(&states[j], u));
        cost += e.dot(&(weights.process_info[j] * e));
    }
    for &(j, y) in &window.heights {
        let e = states[j].position.z - y;
        cost += e * e * weights.height_info;
    }
    for r in &window.ranges {
        let (pred, _, _) = range_model_metres(&states[r.offset], &anchor_position(r, anchor), &model.tags);
        let e = pred - r.measurement.as_vector() * SPEED_OF_LIGHT;
        cost += e.dot(&(weights.range_info * e));
    }
    let e = anchor.z - prior.h;
    cost += e * e * weights.anchor_height_info;
    0.5 * cost
}

/// Gauss-Newton system of the window cost at the given iterate.
pub(crate) fn assemble(
    window: &InitWindow,
    prior: &HeightPrior,
    model: &FilterModel,
    weights: &Weights,
    states: &[NavState],
    anchor: &Vector3<f64>,
) -> (ArrowSystem<STATE_DIM, 3>, f64) {
    let mut sys = ArrowSystem::<STATE_DIM, 3>::new(states.len());
    let mut cost = 0.0;
    let e0 = states[0].difference(&window.prior.mean);
    let j0 = states[0].difference_jacobian(&window.prior.mean);
    sys.add_factor(&[(0, j0)], None, &e0, &weights.prior_info);
    cost += e0.dot(&(weights.prior_info * e0));
    for (j, u) in window.imu.iter().enumerate() {
        let (e, j_prev, j_next) = process_residual(&states[j], u, &states[j + 1]);
        sys.add_factor(&[(j, j_prev), (j + 1, j_next)], None, &e, &weights.process_info[j]);
        cost += e.dot(&(weights.process_info[j] * e));
    }
    let hj = height_jacobian();
    let hinfo = SMatrix::<f64, 1, 1>::new(weights.height_info);
    for &(j, y) in &window.heights {
        let e = SVector::<f64, 1>::new(states[j].position.z - y);
        sys.add_factor(&[(j, hj)], None, &e, &hinfo);
        cost += e[0] * e[0] * weights.height_info;
    }
    for r in &window.ranges {
        let (pred, jx, ja) = range_model_metres(&states[r.offset], &anchor_position(r, anchor), &model.tags);
        let e = pred - r.measurement.as_vector() * SPEED_OF_LIGHT;
        let border = matches!(r.anchor, WindowAnchor::New).then_some(&ja);
        sys.add_factor(&[(r.offset, jx)], border, &e, &weights.range_info);
        cost += e.dot(&(weights.range_info * e));
    }
    let ez = SVector::<f64, 1>::new(anchor.z - prior.h);
    let jz = SMatrix::<f64, 1, 3>::new(0.0, 0.0, 1.0);
    sys.add_factor::<1>(&[], Some(&jz), &ez, &SMatrix::<f64, 1, 1>::new(weights.anchor_height_info));
    cost += ez[0] * ez[0] * weights.anchor_height_info;
    (sys, 0.5 * cost)
}

fn distinct_positions(positions: &[Vector3<f64>]) -> usize {
    let mut kept: Vec<Vector3<f64>> = Vec::new();
    for p in positions {
        if kept.iter().all(|q| (p - q).norm() > DISTINCT_POSITION_TOL) {
            kept.push(*p);
        }
    }
    kept.len()
}

/// Seeds with [`analytic_anchor_seed`] and [`dead_reckon_window`], then minimizes the window cost.
pub fn solve_anchor_map(
    window: &InitWindow,
    prior: &HeightPrior,
    model: &FilterModel,
) -> Result<AnchorSolution, AnchorInitError> {
    let states = dead_reckon_window(&window.prior.mean, &window.imu);
    let new_ranges: Vec<&WindowRange> = window.ranges.iter().filter(|r| r.anchor == WindowAnchor::New).collect();
    let positions: Vec<Vector3<f64>> = new_ranges.iter().map(|r| states[r.offset].position).collect();
    let count = distinct_positions(&positions);
    if count < 3 {
        return Err(AnchorInitError::InsufficientExcitation { positions: count });
    }
    let first = new_ranges[0];
    let seed = analytic_anchor_seed(&first.measurement, &states[first.offset], prior.h, &model.tags)?;
    solve_anchor_map_from(window, prior, model, states, seed)
}

/// Minimizes the window cost from a given iterate.
pub fn solve_anchor_map_from(
    window: &InitWindow,
    prior: &HeightPrior,
    model: &FilterModel,
    states: Vec<NavState>,
    anchor: Vector3<f64>,
) -> Result<AnchorSolution, AnchorInitError> {
    assert_eq!(states.len(), window.len() + 1, "one state per window step");
    let weights = Weights::new(window, prior, model, &states)?;
    let out = levenberg_marquardt(
        states,
        anchor,
        |x, a| assemble(window, prior, model, &weights, x, a),
        |x, a| evaluate_cost(window, prior, model, &weights, x, a),
        |x, d| x.retract(d),
        |a, d| a + d,
    )
    .map_err(|iterations| AnchorInitError::NonConvergence { iterations })?;
    let (sys, anchor, cost) = (out.system, out.border, out.cost);
    if anchor.z <= 0.0 {
        return Err(AnchorInitError::BelowFloor { z: anchor.z });
    }
    let marginal = sys.marginal().map_err(|_| AnchorInitError::Singular)?;
    let decrement = sys.decrement().map_err(|_| AnchorInitError::Singular)?;
    Ok(AnchorSolution {
        states: out.states,
        last_covariance: marginal.last,
        anchor,
        costs: out.costs,
        iterations: out.iterations,
        scaled_gradient: (decrement / (1.0 + cost)).sqrt(),
    })
}

/// Writes one `iteration,cost` row per accepted iteration.
pub fn write_iteration_log(path: &Path, costs: &[f64]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "cost"])?;
    for (i, c) in costs.iter().enumerate() {
        w.write_record([i.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
