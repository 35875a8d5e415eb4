//! Error-state EKF over pose, IMU biases and inter-tag clock states.
//!
//! Error-state layout (19): `[δr, δv, δφ, δβ_acc, δβ_gyr, cδτ₂, cδτ₃, cδγ₂, cδγ₃]`. Clock errors
//! are carried in metres (scaled by the speed of light) so the covariance stays well
//! conditioned; [`NavState`] itself stores seconds.

use std::path::Path;

use nalgebra::{Cholesky, Matrix3, Matrix5, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::anchor_init::{self, AnchorInitError, HeightPrior, InitWindow, WindowAnchor, WindowRange};
use crate::se_math::{exp_so3, right_jacobian, right_jacobian_inv, skew, ExtendedPose, Rotation};
use crate::sequence_tracker::{teach_sequence_tracker, ActiveSet, AnchorMap, Lookup, RepeatTracker};
use crate::uwb_protocol::{predict_ranges, range_noise_covariance, RangeMeasurementSet};
use crate::world_sim::{integrate_kinematics, SensorSpec, TagGeometry, WorldError};
use crate::{gravity_vector, SPEED_OF_LIGHT};

pub const STATE_DIM: usize = 19;
pub type Matrix19 = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type Vector19 = SVector<f64, STATE_DIM>;

pub const IDX_POS: usize = 0;
pub const IDX_VEL: usize = 3;
pub const IDX_ATT: usize = 6;
pub const IDX_ACC_BIAS: usize = 9;
pub const IDX_GYR_BIAS: usize = 12;
pub const IDX_CLOCK_OFFSET: usize = 15;
pub const IDX_CLOCK_SKEW: usize = 17;

/// Bias-uncorrected IMU sample held over `dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuInput {
    pub acc: Vector3<f64>,
    pub gyr: Vector3<f64>,
    pub dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: Rotation,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    /// τ^{p₂p₁}, τ^{p₃p₁} in seconds.
    pub clock_offset: [f64; 2],
    /// γ^{p₂p₁}, γ^{p₃p₁} in s/s.
    pub clock_skew: [f64; 2],
}

impl Default for NavState {
    fn default() -> Self {
        Self::from_pose(&ExtendedPose::identity())
    }
}

impl NavState {
    pub fn from_pose(pose: &ExtendedPose) -> Self {
        Self {
            position: pose.position,
            velocity: pose.velocity,
            attitude: pose.rotation,
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            clock_offset: [0.0; 2],
            clock_skew: [0.0; 2],
        }
    }

    pub fn pose(&self) -> ExtendedPose {
        ExtendedPose::new(self.attitude, self.velocity, self.position)
    }

    /// `self ⊞ δ`.
    pub fn retract(&self, dx: &Vector19) -> NavState {
        let v3 = |i: usize| Vector3::new(dx[i], dx[i + 1], dx[i + 2]);
        NavState {
            position: self.position + v3(IDX_POS),
            velocity: self.velocity + v3(IDX_VEL),
            attitude: self.attitude.perturb(&v3(IDX_ATT)),
            accel_bias: self.accel_bias + v3(IDX_ACC_BIAS),
            gyro_bias: self.gyro_bias + v3(IDX_GYR_BIAS),
            clock_offset: [
                self.clock_offset[0] + dx[IDX_CLOCK_OFFSET] / SPEED_OF_LIGHT,
                self.clock_offset[1] + dx[IDX_CLOCK_OFFSET + 1] / SPEED_OF_LIGHT,
            ],
            clock_skew: [
                self.clock_skew[0] + dx[IDX_CLOCK_SKEW] / SPEED_OF_LIGHT,
                self.clock_skew[1] + dx[IDX_CLOCK_SKEW + 1] / SPEED_OF_LIGHT,
            ],
        }
    }

    /// `self ⊟ reference`, the inverse of [`retract`](Self::retract).
    pub fn difference(&self, reference: &NavState) -> Vector19 {
        let mut dx = Vector19::zeros();
        dx.fixed_rows_mut::<3>(IDX_POS).copy_from(&(self.position - reference.position));
        dx.fixed_rows_mut::<3>(IDX_VEL).copy_from(&(self.velocity - reference.velocity));
        dx.fixed_rows_mut::<3>(IDX_ATT).copy_from(&self.attitude.minus(&reference.attitude));
        dx.fixed_rows_mut::<3>(IDX_ACC_BIAS).copy_from(&(self.accel_bias - reference.accel_bias));
        dx.fixed_rows_mut::<3>(IDX_GYR_BIAS).copy_from(&(self.gyro_bias - reference.gyro_bias));
        for j in 0..2 {
            dx[IDX_CLOCK_OFFSET + j] = (self.clock_offset[j] - reference.clock_offset[j]) * SPEED_OF_LIGHT;
            dx[IDX_CLOCK_SKEW + j] = (self.clock_skew[j] - reference.clock_skew[j]) * SPEED_OF_LIGHT;
        }
        dx
    }

    /// Jacobian of `self ⊞ δ ⊟ reference` with respect to δ at δ = 0.
    pub fn difference_jacobian(&self, reference: &NavState) -> Matrix19 {
        let mut j = Matrix19::identity();
        let phi = self.attitude.minus(&reference.attitude);
        j.fixed_view_mut::<3, 3>(IDX_ATT, IDX_ATT).copy_from(&right_jacobian_inv(&phi));
        j
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavBelief {
    pub mean: NavState,
    pub covariance: Matrix19,
}

impl NavBelief {
    pub fn new(mean: NavState, covariance: Matrix19) -> Self {
        Self { mean, covariance }
    }

    /// Diagonal prior from per-block standard deviations. Clock stds are in seconds and s/s.
    pub fn with_stds(mean: NavState, stds: &PriorStds) -> Self {
        let mut p = Matrix19::zeros();
        let blocks = [
            (IDX_POS, 3, stds.position),
            (IDX_VEL, 3, stds.velocity),
            (IDX_ATT, 3, stds.attitude),
            (IDX_ACC_BIAS, 3, stds.accel_bias),
            (IDX_GYR_BIAS, 3, stds.gyro_bias),
            (IDX_CLOCK_OFFSET, 2, stds.clock_offset * SPEED_OF_LIGHT),
            (IDX_CLOCK_SKEW, 2, stds.clock_skew * SPEED_OF_LIGHT),
        ];
        for (start, len, std) in blocks {
            for i in start..start + len {
                p[(i, i)] = std * std;
            }
        }
        Self { mean, covariance: p }
    }

    /// Normalized estimation error squared of `truth` under this belief.
    pub fn nees(&self, truth: &NavState) -> f64 {
        let e = truth.difference(&self.mean);
        let chol = Cholesky::new(self.covariance).expect("covariance is positive definite");
        e.dot(&chol.solve(&e))
    }
}

/// Prior standard deviations per state block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorStds {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
    pub clock_offset: f64,
    pub clock_skew: f64,
}

impl Default for PriorStds {
    fn default() -> Self {
        Self {
            position: 0.01,
            velocity: 0.01,
            attitude: 0.5_f64.to_radians(),
            accel_bias: 0.05,
            gyro_bias: 0.005,
            clock_offset: 5e-9,
            clock_skew: 1e-8,
        }
    }
}

/// Continuous-time noise densities assumed by the estimators. Clock entries are in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessNoise {
    pub accel: f64,
    pub gyro: f64,
    pub accel_bias: f64,
    pub gyro_bias: f64,
    pub clock_offset: f64,
    pub clock_skew: f64,
}

impl ProcessNoise {
    pub fn from_spec(spec: &SensorSpec) -> Self {
        Self {
            accel: spec.accel_noise_psd,
            gyro: spec.gyro_noise_psd,
            accel_bias: spec.accel_bias_psd,
            gyro_bias: spec.gyro_bias_psd,
            clock_offset: spec.clock_offset_psd,
            clock_skew: spec.clock_skew_psd,
        }
    }
}

/// Everything the estimators assume about the sensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterModel {
    pub noise: ProcessNoise,
    pub height_var: f64,
    /// 5×5 ToF covariance in s².
    pub range_cov: Matrix5<f64>,
    pub tags: TagGeometry,
}

impl FilterModel {
    pub fn from_spec(spec: &SensorSpec, tags: TagGeometry) -> Self {
        Self {
            noise: ProcessNoise::from_spec(spec),
            height_var: spec.height_std * spec.height_std,
            range_cov: range_noise_covariance(spec.timestamp_std),
            tags,
        }
    }
}

/// Bias-corrected map-frame acceleration and body rate over a step.
fn corrected_motion(x: &NavState, u: &ImuInput) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let f = u.acc + x.accel_bias;
    let accel = x.attitude * f + gravity_vector();
    let rate = u.gyr + x.gyro_bias;
    (f, accel, rate)
}

/// Mean propagation over one IMU step.
pub fn propagate_state(x: &NavState, u: &ImuInput) -> NavState {
    let (_, accel, rate) = corrected_motion(x, u);
    let pose = integrate_kinematics(&x.pose(), &accel, &rate, u.dt);
    NavState {
        position: pose.position,
        velocity: pose.velocity,
        attitude: pose.rotation,
        accel_bias: x.accel_bias,
        gyro_bias: x.gyro_bias,
        clock_offset: [x.clock_offset[0] + x.clock_skew[0] * u.dt, x.clock_offset[1] + x.clock_skew[1] * u.dt],
        clock_skew: x.clock_skew,
    }
}

/// Error-state transition of [`propagate_state`], exact to first order in the error.
pub fn transition_matrix(x: &NavState, u: &ImuInput) -> Matrix19 {
    let dt = u.dt;
    let (f, _, rate) = corrected_motion(x, u);
    let c = x.attitude.matrix();
    let dv_dphi = -c * skew(&f) * dt;
    let dv_dba = c * dt;
    let e = exp_so3(&(rate * dt));
    let mut a = Matrix19::identity();
    let i3 = Matrix3::identity();
    a.fixed_view_mut::<3, 3>(IDX_POS, IDX_VEL).copy_from(&(i3 * dt));
    a.fixed_view_mut::<3, 3>(IDX_POS, IDX_ATT).copy_from(&(0.5 * dv_dphi * dt));
    a.fixed_view_mut::<3, 3>(IDX_POS, IDX_ACC_BIAS).copy_from(&(0.5 * dv_dba * dt));
    a.fixed_view_mut::<3, 3>(IDX_VEL, IDX_ATT).copy_from(&dv_dphi);
    a.fixed_view_mut::<3, 3>(IDX_VEL, IDX_ACC_BIAS).copy_from(&dv_dba);
    a.fixed_view_mut::<3, 3>(IDX_ATT, IDX_ATT).copy_from(&e.matrix().transpose());
    a.fixed_view_mut::<3, 3>(IDX_ATT, IDX_GYR_BIAS).copy_from(&(right_jacobian(&(rate * dt)) * dt));
    for j in 0..2 {
        a[(IDX_CLOCK_OFFSET + j, IDX_CLOCK_SKEW + j)] = dt;
    }
    a
}

/// Continuous-time error-state system matrix at the current mean and input.
fn continuous_system(x: &NavState, u: &ImuInput) -> Matrix19 {
    let (f, _, rate) = corrected_motion(x, u);
    let c = x.attitude.matrix();
    let mut m = Matrix19::zeros();
    m.fixed_view_mut::<3, 3>(IDX_POS, IDX_VEL).copy_from(&Matrix3::identity());
    m.fixed_view_mut::<3, 3>(IDX_VEL, IDX_ATT).copy_from(&(-c * skew(&f)));
    m.fixed_view_mut::<3, 3>(IDX_VEL, IDX_ACC_BIAS).copy_from(c);
    m.fixed_view_mut::<3, 3>(IDX_ATT, IDX_ATT).copy_from(&(-skew(&rate)));
    m.fixed_view_mut::<3, 3>(IDX_ATT, IDX_GYR_BIAS).copy_from(&Matrix3::identity());
    for j in 0..2 {
        m[(IDX_CLOCK_OFFSET + j, IDX_CLOCK_SKEW + j)] = 1.0;
    }
    m
}

/// Discrete process noise `∫ Φ(s) L Q_c Lᵀ Φ(s)ᵀ ds` expanded to third order in `dt`.
pub fn process_noise_covariance(x: &NavState, u: &ImuInput, noise: &ProcessNoise) -> Matrix19 {
    let dt = u.dt;
    let c2 = SPEED_OF_LIGHT * SPEED_OF_LIGHT;
    let mut q = Matrix19::zeros();
    let densities = [
        (IDX_VEL, 3, noise.accel),
        (IDX_ATT, 3, noise.gyro),
        (IDX_ACC_BIAS, 3, noise.accel_bias),
        (IDX_GYR_BIAS, 3, noise.gyro_bias),
        (IDX_CLOCK_OFFSET, 2, noise.clock_offset * c2),
        (IDX_CLOCK_SKEW, 2, noise.clock_skew * c2),
    ];
    for (start, len, psd) in densities {
        for i in start..start + len {
            q[(i, i)] = psd;
        }
    }
    let f = continuous_system(x, u);
    let fq = f * q;
    let out = q * dt + (fq + fq.transpose()) * (0.5 * dt * dt) + fq * f.transpose() * (dt * dt * dt / 3.0);
    symmetrize(out)
}

fn symmetrize(p: Matrix19) -> Matrix19 {
    0.5 * (p + p.transpose())
}

fn debug_check_covariance(p: &Matrix19) {
    if cfg!(debug_assertions) {
        for i in 0..STATE_DIM {
            debug_assert!(p[(i, i)] >= -1e-12, "negative variance at {i}: {}", p[(i, i)]);
            for j in 0..i {
                debug_assert!((p[(i, j)] - p[(j, i)]).abs() <= 1e-12 * (1.0 + p[(i, j)].abs()));
            }
        }
    }
}

pub fn predict(belief: &NavBelief, u: &ImuInput, noise: &ProcessNoise) -> NavBelief {
    assert!(u.dt > 0.0, "dt must be positive");
    let a = transition_matrix(&belief.mean, u);
    let q = process_noise_covariance(&belief.mean, u, noise);
    let covariance = symmetrize(a * belief.covariance * a.transpose() + q);
    debug_check_covariance(&covariance);
    NavBelief { mean: propagate_state(&belief.mean, u), covariance }
}

/// Joseph-form update with innovation `y − h(x̂)` and measurement Jacobian `H`.
pub fn kalman_update<const M: usize>(
    belief: &NavBelief,
    innovation: &SVector<f64, M>,
    h: &SMatrix<f64, M, STATE_DIM>,
    r: &SMatrix<f64, M, M>,
) -> NavBelief {
    let p = &belief.covariance;
    let pht = p * h.transpose();
    let s = h * pht + r;
    let chol = Cholesky::new(0.5 * (s + s.transpose())).expect("innovation covariance is positive definite");
    let gain: SMatrix<f64, STATE_DIM, M> = chol.solve(&pht.transpose()).transpose();
    let dx = gain * innovation;
    let ikh = Matrix19::identity() - gain * h;
    let covariance = symmetrize(ikh * p * ikh.transpose() + gain * r * gain.transpose());
    debug_check_covariance(&covariance);
    NavBelief { mean: belief.mean.retract(&dx), covariance }
}

pub fn correct_height(belief: &NavBelief, y: f64, r_height: f64) -> NavBelief {
    assert!(r_height > 0.0, "height variance must be positive");
    let mut h = SMatrix::<f64, 1, STATE_DIM>::zeros();
    h[IDX_POS + 2] = 1.0;
    let innovation = SVector::<f64, 1>::new(y - belief.mean.position.z);
    kalman_update(belief, &innovation, &h, &SMatrix::<f64, 1, 1>::new(r_height))
}

/// Range model in metres: predicted `c·ŷ` and its Jacobian over the error state and anchor.
pub fn range_model_metres(
    x: &NavState,
    anchor: &Vector3<f64>,
    tags: &TagGeometry,
) -> (SVector<f64, 5>, SMatrix<f64, 5, STATE_DIM>, SMatrix<f64, 5, 3>) {
    let pred = predict_ranges(&x.position, &x.attitude, &x.clock_offset, anchor, tags);
    let mut h = SMatrix::<f64, 5, STATE_DIM>::zeros();
    h.fixed_view_mut::<5, 3>(0, IDX_POS).copy_from(&(pred.d_position * SPEED_OF_LIGHT));
    h.fixed_view_mut::<5, 3>(0, IDX_ATT).copy_from(&(pred.d_attitude * SPEED_OF_LIGHT));
    h.fixed_view_mut::<5, 2>(0, IDX_CLOCK_OFFSET).copy_from(&pred.d_clock);
    (pred.mean * SPEED_OF_LIGHT, h, pred.d_anchor * SPEED_OF_LIGHT)
}

pub fn correct_range(
    belief: &NavBelief,
    meas: &RangeMeasurementSet,
    anchor_pos: &Vector3<f64>,
    r5: &Matrix5<f64>,
    tags: &TagGeometry,
) -> NavBelief {
    correct_range_uncertain_anchor(belief, meas, anchor_pos, 0.0, r5, tags)
}

/// Range update with an isotropic anchor position uncertainty `anchor_std` (m) folded into the
/// measurement covariance.
pub fn correct_range_uncertain_anchor(
    belief: &NavBelief,
    meas: &RangeMeasurementSet,
    anchor_pos: &Vector3<f64>,
    anchor_std: f64,
    r5: &Matrix5<f64>,
    tags: &TagGeometry,
) -> NavBelief {
    let (predicted, h, h_anchor) = range_model_metres(&belief.mean, anchor_pos, tags);
    let innovation = meas.as_vector() * SPEED_OF_LIGHT - predicted;
    let r = r5 * (SPEED_OF_LIGHT * SPEED_OF_LIGHT) + h_anchor * h_anchor.transpose() * anchor_std.powi(2);
    kalman_update(belief, &innovation, &h, &r)
}

/// One ranging slot: the anchors in communication range and the exchange with the scheduled one.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RangingSlot {
    pub in_range: Vec<u32>,
    pub measurement: Option<RangeMeasurementSet>,
}

/// Sensor data available at one IMU step. `imu` is the input held over `[k, k+1)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SensorFrame {
    pub imu: Option<ImuInput>,
    pub height: Option<f64>,
    pub ranging: Option<RangingSlot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeachOptions {
    pub model: FilterModel,
    /// λ in IMU steps.
    pub window_steps: usize,
    pub height_prior: HeightPrior,
    pub record_covariance: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitRecord {
    pub step: usize,
    pub anchor_id: u32,
    pub result: Result<usize, AnchorInitError>,
}

#[derive(Clone, Debug)]
pub struct TeachOutcome {
    /// π̂_k for every step.
    pub estimates: Vec<NavState>,
    /// Present when requested; entries inside initialization windows hold the window marginal
    /// only at the window end and are `None` elsewhere in the window.
    pub covariances: Option<Vec<Option<Matrix19>>>,
    pub map: AnchorMap,
    pub inits: Vec<InitRecord>,
}

/// Teach-pass filter over pre-recorded frames `0..=K`.
///
/// New anchors pause the filter: the window `k..=k+λ` is solved in batch, its states replace
/// the estimates over that span and filtering resumes from the window posterior.
pub fn run_teach_pass(init: &NavBelief, frames: &[SensorFrame], opts: &TeachOptions) -> TeachOutcome {
    let n = frames.len();
    let r5 = opts.model.range_cov;
    let mut estimates = vec![init.mean; n];
    let mut covariances = opts.record_covariance.then(|| vec![None; n]);
    let mut map = AnchorMap::new();
    let mut active = ActiveSet::new();
    let mut inits = Vec::new();
    let mut belief = *init;
    let mut k = 0;
    let mut resumed = false;
    while k < n {
        if k > 0 && !resumed {
            let u = frames[k - 1].imu.expect("every frame before the last carries an IMU sample");
            belief = predict(&belief, &u, &opts.model.noise);
        }
        resumed = false;
        let frame = &frames[k];
        let mut window_result = None;
        if let Some(slot) = &frame.ranging {
            if let Some(meas) = &slot.measurement {
                let id = meas.anchor_id;
                let window = (!active.contains(&id)).then(|| build_window(&belief, frames, k, opts, id, &active, &map));
                let mut solution = None;
                let outcome = teach_sequence_tracker(id, &slot.in_range, &mut active, &mut map, |_| {
                    let window = window.expect("window built for new anchor");
                    let sol = anchor_init::solve_anchor_map(&window, &opts.height_prior, &opts.model)?;
                    let anchor = sol.anchor;
                    solution = Some(sol);
                    Ok::<_, AnchorInitError>(anchor)
                });
                match outcome {
                    Ok((anchor, false)) => belief = correct_range(&belief, meas, &anchor, &r5, &opts.model.tags),
                    Ok((_, true)) => {
                        let sol = solution.expect("solution recorded on creation");
                        inits.push(InitRecord { step: k, anchor_id: id, result: Ok(map.len()) });
                        window_result = Some(sol);
                    }
                    Err(err) => inits.push(InitRecord { step: k, anchor_id: id, result: Err(err) }),
                }
            } else {
                active.retain(|id| slot.in_range.contains(id));
            }
        }
        if let Some(sol) = window_result {
            let end = k + sol.states.len() - 1;
            for (j, state) in sol.states.iter().enumerate() {
                estimates[k + j] = *state;
            }
            for f in &frames[k + 1..=end] {
                if let Some(slot) = &f.ranging {
                    active.retain(|id| slot.in_range.contains(id));
                }
            }
            belief = NavBelief { mean: *sol.states.last().expect("nonempty window"), covariance: sol.last_covariance };
            if let Some(c) = covariances.as_mut() {
                c[end] = Some(belief.covariance);
            }
            k = end + 1;
            continue;
        }
        if let Some(y) = frame.height {
            belief = correct_height(&belief, y, opts.model.height_var);
        }
        estimates[k] = belief.mean;
        if let Some(c) = covariances.as_mut() {
            c[k] = Some(belief.covariance);
        }
        k += 1;
    }
    TeachOutcome { estimates, covariances, map, inits }
}

fn build_window(
    predicted: &NavBelief,
    frames: &[SensorFrame],
    k: usize,
    opts: &TeachOptions,
    new_id: u32,
    active: &ActiveSet,
    map: &AnchorMap,
) -> InitWindow {
    let end = (k + opts.window_steps).min(frames.len() - 1);
    let mut local_active = active.clone();
    let mut window = InitWindow { prior: *predicted, imu: Vec::new(), heights: Vec::new(), ranges: Vec::new() };
    for (offset, frame) in frames[k..=end].iter().enumerate() {
        if k + offset < end {
            window.imu.push(frame.imu.expect("IMU sample inside window"));
        }
        if let Some(y) = frame.height {
            window.heights.push((offset, y));
        }
        if let Some(slot) = &frame.ranging {
            if let Some(meas) = &slot.measurement {
                let anchor = if meas.anchor_id == new_id {
                    Some(WindowAnchor::New)
                } else if local_active.contains(&meas.anchor_id) {
                    map.most_recent(meas.anchor_id).map(|e| WindowAnchor::Known(e.position))
                } else {
                    None
                };
                if let Some(anchor) = anchor {
                    window.ranges.push(WindowRange { offset, measurement: *meas, anchor });
                }
            }
            local_active.retain(|id| slot.in_range.contains(id));
        }
    }
    window
}

/// Repeat-pass filter stepped by the caller, which interleaves it with the controller.
#[derive(Clone, Debug)]
pub struct RepeatFilter {
    pub belief: NavBelief,
    pub tracker: RepeatTracker,
    pub model: FilterModel,
    /// Standard deviation attributed to mapped anchor positions (m).
    pub map_std: f64,
}

impl RepeatFilter {
    pub fn new(init: NavBelief, model: FilterModel, max_skip: usize) -> Self {
        let mut tracker = RepeatTracker::new(max_skip);
        // the static initialization consumed the first map entry
        tracker.cursor = 1;
        Self { belief: init, tracker, model, map_std: 0.0 }
    }

    /// Binds the anchor used by the static initialization to the first map entry.
    pub fn bind_first(&mut self, anchor_id: u32) {
        self.tracker.active.insert(anchor_id, 1);
    }

    pub fn predict(&mut self, u: &ImuInput) {
        self.belief = predict(&self.belief, u, &self.model.noise);
    }

    /// Applies the measurements of one frame. Returns the tracker decision for a range set.
    pub fn correct(&mut self, frame: &SensorFrame, map: &AnchorMap) -> Option<Lookup> {
        let mut decision = None;
        if let Some(slot) = &frame.ranging {
            match &slot.measurement {
                Some(meas) => {
                    let lookup = self.tracker.lookup(meas.anchor_id, &slot.in_range, map);
                    if let Lookup::Matched { position, .. } = lookup {
                        self.belief = correct_range_uncertain_anchor(
                            &self.belief,
                            meas,
                            &position,
                            self.map_std,
                            &self.model.range_cov,
                            &self.model.tags,
                        );
                    }
                    decision = Some(lookup);
                }
                None => self.tracker.prune(&slot.in_range),
            }
        }
        if let Some(y) = frame.height {
            self.belief = correct_height(&self.belief, y, self.model.height_var);
        }
        decision
    }
}

/// Writes `t, x, y, z, vx, vy, vz, phi_x, phi_y, phi_z` for each estimate.
pub fn write_trajectory_csv(path: &Path, dt: f64, states: &[NavState]) -> Result<(), WorldError> {
    let poses: Vec<(f64, ExtendedPose)> = states.iter().enumerate().map(|(k, s)| (k as f64 * dt, s.pose())).collect();
    crate::world_sim::write_pose_csv(path, &poses)
}
