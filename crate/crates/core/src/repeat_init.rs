//! Static batch estimate of the repeat-pass start: planar pose, IMU biases and tag clocks,
//! from ranging against the first mapped anchor while the robot rests on the floor.

use nalgebra::{Cholesky, SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nav_ekf::{
    process_noise_covariance, FilterModel, ImuInput, Matrix19, NavBelief, NavState, PriorStds, SensorFrame,
    IDX_ACC_BIAS, IDX_ATT, IDX_POS, IDX_VEL,
};
use crate::se_math::{Heading2D, Rotation};
use crate::sparse::{levenberg_marquardt, ArrowSystem};
use crate::uwb_protocol::{predict_ranges, RangeMeasurementSet};
use crate::world_sim::TagGeometry;
use crate::{GRAVITY, SPEED_OF_LIGHT};

/// Per-step states: `[β_acc, β_gyr, cτ₂, cτ₃, cγ₂, cγ₃]`.
const SLOW_DIM: usize = 10;
/// Error-state order of the reported covariance: `[x, y, θ, β_acc, β_gyr, cτ, cγ]`.
pub const INIT_DIM: usize = 13;
pub type Matrix13 = SMatrix<f64, INIT_DIM, INIT_DIM>;
type SlowVector = SVector<f64, SLOW_DIM>;
type SlowMatrix = SMatrix<f64, SLOW_DIM, SLOW_DIM>;

#[derive(Error, Clone, Debug, PartialEq)]
pub enum RepeatInitError {
    #[error("{count} anchors in range at step {step}; the static initialization needs exactly one")]
    MultipleAnchors { step: usize, count: usize },
    #[error("ranged anchor {found} is not the first mapped anchor {expected}")]
    UnexpectedAnchor { found: u32, expected: u32 },
    #[error("no range measurements in the static window")]
    NoMeasurements,
    #[error("no convergence after {iterations} iterations")]
    NonConvergence { iterations: usize },
    #[error("normal equations are not positive definite")]
    Singular,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitState2D {
    pub position: Vector2<f64>,
    pub heading: Heading2D,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub clock_offset: [f64; 2],
    pub clock_skew: [f64; 2],
}

impl Default for InitState2D {
    fn default() -> Self {
        Self {
            position: Vector2::zeros(),
            heading: Heading2D::new(0.0),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            clock_offset: [0.0; 2],
            clock_skew: [0.0; 2],
        }
    }
}

impl InitState2D {
    /// Embedding on the floor: z = 0, level attitude.
    pub fn nav_state(&self) -> NavState {
        NavState {
            position: Vector3::new(self.position.x, self.position.y, 0.0),
            velocity: Vector3::zeros(),
            attitude: Rotation::from_yaw(self.heading.angle()),
            accel_bias: self.accel_bias,
            gyro_bias: self.gyro_bias,
            clock_offset: self.clock_offset,
            clock_skew: self.clock_skew,
        }
    }

    /// Tag positions in the map frame; heights are the body-frame tag heights.
    pub fn tag_positions(&self, tags: &TagGeometry) -> [Vector3<f64>; 3] {
        let (s, c) = self.heading.angle().sin_cos();
        std::array::from_fn(|i| {
            let l = tags.offset(i);
            Vector3::new(self.position.x + c * l.x - s * l.y, self.position.y + s * l.x + c * l.y, l.z)
        })
    }

    fn with_slow(&self, v: &SlowVector) -> Self {
        Self {
            accel_bias: v.fixed_rows::<3>(0).into(),
            gyro_bias: v.fixed_rows::<3>(3).into(),
            clock_offset: [v[6] / SPEED_OF_LIGHT, v[7] / SPEED_OF_LIGHT],
            clock_skew: [v[8] / SPEED_OF_LIGHT, v[9] / SPEED_OF_LIGHT],
            ..*self
        }
    }
}

/// Planar pose shared by every step of the static window.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Pose2 {
    position: Vector2<f64>,
    heading: Heading2D,
}

/// Predicted ToF set (seconds) and its Jacobian over `[x, y, θ, β_acc, β_gyr, τ (s), γ (s/s)]`.
pub fn static_range_model(
    s: &InitState2D,
    anchor: &Vector3<f64>,
    tags: &TagGeometry,
) -> (SVector<f64, 5>, SMatrix<f64, 5, INIT_DIM>) {
    let x = s.nav_state();
    let p = predict_ranges(&x.position, &x.attitude, &x.clock_offset, anchor, tags);
    let mut j = SMatrix::<f64, 5, INIT_DIM>::zeros();
    j.fixed_view_mut::<5, 2>(0, 0).copy_from(&p.d_position.fixed_columns::<2>(0));
    // yaw is a right perturbation about body z for a level attitude
    j.set_column(2, &p.d_attitude.column(2));
    j.fixed_view_mut::<5, 2>(0, 9).copy_from(&p.d_clock);
    (p.mean, j)
}

/// Noise-free static IMU output: `(−β_acc − g_b, −β_gyr)` with `g_b = (0, 0, −g)`.
pub fn static_imu_model(s: &InitState2D) -> (Vector3<f64>, Vector3<f64>) {
    (Vector3::new(0.0, 0.0, GRAVITY) - s.accel_bias, -s.gyro_bias)
}

/// Prior of the static initialization; the pose prior is centred on the teach start.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepeatInitPrior {
    pub position_std: f64,
    pub heading_std: f64,
    pub slow: PriorStds,
}

impl Default for RepeatInitPrior {
    fn default() -> Self {
        Self { position_std: 0.5, heading_std: 15f64.to_radians(), slow: PriorStds::default() }
    }
}

/// Standard deviations assigned to the flat-floor states when building the EKF prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatFloorStds {
    pub height: f64,
    pub velocity: f64,
    pub roll_pitch: f64,
}

impl Default for FlatFloorStds {
    fn default() -> Self {
        Self { height: 0.01, velocity: 0.01, roll_pitch: 0.5f64.to_radians() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitEstimate {
    /// Estimate at the end of the static window.
    pub state: InitState2D,
    /// Order `[x, y, θ, β_acc, β_gyr, cτ, cγ]`, clock blocks in metres.
    pub covariance: Matrix13,
    pub costs: Vec<f64>,
    pub iterations: usize,
    pub scaled_gradient: f64,
    /// Information over `(x, y, θ)` from the measurements alone, prior excluded.
    pub pose_information: SMatrix<f64, 3, 3>,
}

struct StaticProblem<'a> {
    frames: &'a [SensorFrame],
    anchor: Vector3<f64>,
    tags: &'a TagGeometry,
    prior_slow: SlowVector,
    prior_slow_info: SlowMatrix,
    prior_pose_info: SMatrix<f64, 3, 3>,
    process_info: Vec<SlowMatrix>,
    accel_info: f64,
    gyro_info: f64,
    range_info: SMatrix<f64, 5, 5>,
}

impl StaticProblem<'_> {
    fn state(&self, slow: &SlowVector, pose: &Pose2) -> InitState2D {
        InitState2D { position: pose.position, heading: pose.heading, ..InitState2D::default() }.with_slow(slow)
    }

    fn pose_error(pose: &Pose2) -> SVector<f64, 3> {
        SVector::<f64, 3>::new(pose.position.x, pose.position.y, pose.heading.angle())
    }

    fn range_error(&self, s: &InitState2D, meas: &RangeMeasurementSet) -> (SVector<f64, 5>, SMatrix<f64, 5, INIT_DIM>) {
        let (pred, j) = static_range_model(s, &self.anchor, self.tags);
        let mut jm = j * SPEED_OF_LIGHT;
        // clock columns are per metre already
        jm.fixed_view_mut::<5, 2>(0, 9).copy_from(&j.fixed_view::<5, 2>(0, 9));
        ((pred - meas.as_vector()) * SPEED_OF_LIGHT, jm)
    }

    fn assemble(&self, slow: &[SlowVector], pose: &Pose2, with_prior: bool) -> (ArrowSystem<SLOW_DIM, 3>, f64) {
        let mut sys = ArrowSystem::<SLOW_DIM, 3>::new(slow.len());
        let mut cost = 0.0;
        let eye = SlowMatrix::identity();
        if with_prior {
            let e0 = slow[0] - self.prior_slow;
            sys.add_factor(&[(0, eye)], None, &e0, &self.prior_slow_info);
            cost += e0.dot(&(self.prior_slow_info * e0));
            let ep = Self::pose_error(pose);
            sys.add_factor::<3>(&[], Some(&SMatrix::<f64, 3, 3>::identity()), &ep, &self.prior_pose_info);
            cost += ep.dot(&(self.prior_pose_info * ep));
        }
        for j in 0..slow.len() - 1 {
            let a = clock_transition(self.frames[j].imu.expect("IMU sample").dt);
            let e = slow[j + 1] - a * slow[j];
            sys.add_factor(&[(j, -a), (j + 1, eye)], None, &e, &self.process_info[j]);
            cost += e.dot(&(self.process_info[j] * e));
        }
        for (j, frame) in self.frames.iter().enumerate() {
            if let Some(u) = frame.imu.filter(|_| j + 1 < self.frames.len()) {
                let s = self.state(&slow[j], pose);
                let (acc, gyr) = static_imu_model(&s);
                let mut ja = SMatrix::<f64, 3, SLOW_DIM>::zeros();
                ja.fixed_view_mut::<3, 3>(0, 0).copy_from(&-nalgebra::Matrix3::identity());
                let mut jg = SMatrix::<f64, 3, SLOW_DIM>::zeros();
                jg.fixed_view_mut::<3, 3>(0, 3).copy_from(&-nalgebra::Matrix3::identity());
                let (ea, eg) = (acc - u.acc, gyr - u.gyr);
                let ia = SMatrix::<f64, 3, 3>::identity() * self.accel_info;
                let ig = SMatrix::<f64, 3, 3>::identity() * self.gyro_info;
                sys.add_factor(&[(j, ja)], None, &ea, &ia);
                sys.add_factor(&[(j, jg)], None, &eg, &ig);
                cost += ea.norm_squared() * self.accel_info + eg.norm_squared() * self.gyro_info;
            }
            if let Some(meas) = frame.ranging.as_ref().and_then(|r| r.measurement.as_ref()) {
                let s = self.state(&slow[j], pose);
                let (e, jm) = self.range_error(&s, meas);
                let jx: SMatrix<f64, 5, SLOW_DIM> = jm.fixed_columns::<SLOW_DIM>(3).into();
                let jp: SMatrix<f64, 5, 3> = jm.fixed_columns::<3>(0).into();
                sys.add_factor(&[(j, jx)], Some(&jp), &e, &self.range_info);
                cost += e.dot(&(self.range_info * e));
            }
        }
        (sys, 0.5 * cost)
    }
}

/// Error-state transition of the slow states: biases held, offsets advanced by skew.
fn clock_transition(dt: f64) -> SlowMatrix {
    let mut a = SlowMatrix::identity();
    a[(6, 8)] = dt;
    a[(7, 9)] = dt;
    a
}

/// Solves the static window `frames[0..=L]` for the start state against the first mapped anchor.
pub fn solve_initialization(
    frames: &[SensorFrame],
    anchor_id: u32,
    anchor: &Vector3<f64>,
    prior: &RepeatInitPrior,
    model: &FilterModel,
) -> Result<InitEstimate, RepeatInitError> {
    let mut ranges = 0;
    for (step, frame) in frames.iter().enumerate() {
        if let Some(slot) = &frame.ranging {
            if slot.in_range.len() > 1 {
                return Err(RepeatInitError::MultipleAnchors { step, count: slot.in_range.len() });
            }
            if let Some(m) = &slot.measurement {
                if m.anchor_id != anchor_id {
                    return Err(RepeatInitError::UnexpectedAnchor { found: m.anchor_id, expected: anchor_id });
                }
                ranges += 1;
            }
        }
    }
    if ranges == 0 {
        return Err(RepeatInitError::NoMeasurements);
    }
    let inv = |m: SlowMatrix| Cholesky::new(m).map(|c| c.inverse()).ok_or(RepeatInitError::Singular);
    let slow_block = |m: Matrix19| -> SlowMatrix { m.fixed_view::<SLOW_DIM, SLOW_DIM>(IDX_ACC_BIAS, IDX_ACC_BIAS).into() };
    let rest = NavState::default();
    let process_info = frames[..frames.len() - 1]
        .iter()
        .map(|f| {
            let u = f.imu.expect("IMU sample in static window");
            let level = ImuInput { acc: Vector3::new(0.0, 0.0, GRAVITY), gyr: Vector3::zeros(), dt: u.dt };
            inv(slow_block(process_noise_covariance(&rest, &level, &model.noise)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dt = frames[0].imu.map(|u| u.dt).unwrap_or(0.01);
    let prior_belief = NavBelief::with_stds(rest, &prior.slow);
    let pose_var = SVector::<f64, 3>::new(prior.position_std.powi(2), prior.position_std.powi(2), prior.heading_std.powi(2));
    let problem = StaticProblem {
        frames,
        anchor: *anchor,
        tags: &model.tags,
        prior_slow: SlowVector::zeros(),
        prior_slow_info: inv(slow_block(prior_belief.covariance))?,
        prior_pose_info: SMatrix::from_diagonal(&pose_var.map(|v| 1.0 / v)),
        process_info,
        accel_info: dt / model.noise.accel,
        gyro_info: dt / model.noise.gyro,
        range_info: Cholesky::new(model.range_cov * (SPEED_OF_LIGHT * SPEED_OF_LIGHT))
            .map(|c| c.inverse())
            .ok_or(RepeatInitError::Singular)?,
    };
    let start = Pose2 { position: Vector2::zeros(), heading: Heading2D::new(0.0) };
    let out = levenberg_marquardt(
        vec![SlowVector::zeros(); frames.len()],
        start,
        |x, p| problem.assemble(x, p, true),
        |x, p| problem.assemble(x, p, true).1,
        |x, d| x + d,
        |p, d| Pose2 { position: p.position + Vector2::new(d[0], d[1]), heading: Heading2D::new(p.heading.angle() + d[2]) },
    )
    .map_err(|iterations| RepeatInitError::NonConvergence { iterations })?;
    let marginal = out.system.marginal().map_err(|_| RepeatInitError::Singular)?;
    let decrement = out.system.decrement().map_err(|_| RepeatInitError::Singular)?;
    let mut covariance = Matrix13::zeros();
    covariance.fixed_view_mut::<3, 3>(0, 0).copy_from(&marginal.border);
    covariance.fixed_view_mut::<SLOW_DIM, SLOW_DIM>(3, 3).copy_from(&marginal.last);
    covariance.fixed_view_mut::<SLOW_DIM, 3>(3, 0).copy_from(&marginal.cross);
    covariance.fixed_view_mut::<3, SLOW_DIM>(0, 3).copy_from(&marginal.cross.transpose());
    let last = *out.states.last().expect("nonempty window");
    let (measurement_only, _) = problem.assemble(&out.states, &out.border, false);
    Ok(InitEstimate {
        state: problem.state(&last, &out.border),
        covariance,
        costs: out.costs,
        iterations: out.iterations,
        scaled_gradient: (decrement / (1.0 + out.cost)).sqrt(),
        pose_information: measurement_only.corner,
    })
}

/// Repeat-pass EKF prior: the planar estimate embedded on the floor.
pub fn to_ekf_prior(est: &InitEstimate, flat: &FlatFloorStds) -> NavBelief {
    let mut p = Matrix19::zeros();
    // error-state index of each INIT_DIM coordinate
    let map: [usize; INIT_DIM] = std::array::from_fn(|i| match i {
        0 => IDX_POS,
        1 => IDX_POS + 1,
        2 => IDX_ATT + 2,
        _ => IDX_ACC_BIAS + i - 3,
    });
    for a in 0..INIT_DIM {
        for b in 0..INIT_DIM {
            p[(map[a], map[b])] = est.covariance[(a, b)];
        }
    }
    p[(IDX_POS + 2, IDX_POS + 2)] = flat.height.powi(2);
    for i in 0..3 {
        p[(IDX_VEL + i, IDX_VEL + i)] = flat.velocity.powi(2);
    }
    for i in 0..2 {
        p[(IDX_ATT + i, IDX_ATT + i)] = flat.roll_pitch.powi(2);
    }
    NavBelief::new(est.state.nav_state(), p)
}
