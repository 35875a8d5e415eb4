use std::path::Path;

use nalgebra::{Cholesky, Matrix4, SMatrix, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::se_math::{exp_so3, left_invariant_error, right_jacobian, skew, ExtendedPose, Vector9};
use crate::sequence_tracker::AnchorMap;
use crate::GRAVITY;

/// Mass-normalized body-z thrust (m/s²) and body angular velocity (rad/s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub thrust: f64,
    pub omega: Vector3<f64>,
}

impl ControlInput {
    pub fn hover() -> Self {
        Self { thrust: GRAVITY, omega: Vector3::zeros() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InputLimits {
    pub max_thrust: f64,
    /// Bound on each body-rate component (rad/s).
    pub max_rate: f64,
}

impl Default for InputLimits {
    fn default() -> Self {
        Self { max_thrust: 2.0 * GRAVITY, max_rate: 2.0 }
    }
}

impl InputLimits {
    pub fn clamp(&self, u: &ControlInput) -> ControlInput {
        ControlInput {
            thrust: u.thrust.clamp(0.0, self.max_thrust),
            omega: u.omega.map(|w| w.clamp(-self.max_rate, self.max_rate)),
        }
    }
}

/// Left-invariant tracking error `δX = X̂ᵗ⁻¹X̂ʳ` and its log coordinates `[φ, ν, ρ]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackingError {
    pub group: ExtendedPose,
    pub log: Vector9,
}

pub fn compute_error(teach_pose: &ExtendedPose, repeat_pose: &ExtendedPose) -> TrackingError {
    let group = left_invariant_error(teach_pose, repeat_pose);
    TrackingError { group, log: group.log() }
}

pub type Matrix9 = SMatrix<f64, 9, 9>;
pub type Matrix9x4 = SMatrix<f64, 9, 4>;
pub type Matrix4x9 = SMatrix<f64, 4, 9>;

/// Error dynamics `δx_{k+1} ≈ A δx_k + B δu_k` about a reference pose and input, with
/// `δu = [δf, δω]`.
///
/// The result does not depend on the reference pose itself, only on the input.
pub fn linearize_error_dynamics(_teach_pose: &ExtendedPose, teach_input: &ControlInput, dt: f64) -> (Matrix9, Matrix9x4) {
    let e = exp_so3(&(teach_input.omega * dt));
    let et = e.matrix().transpose();
    let e3 = Vector3::z();
    let thrust_coupling = -et * skew(&e3) * teach_input.thrust;
    let mut a = Matrix9::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&et);
    a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(thrust_coupling * dt));
    a.fixed_view_mut::<3, 3>(3, 3).copy_from(&et);
    a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(0.5 * thrust_coupling * dt * dt));
    a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(et * dt));
    a.fixed_view_mut::<3, 3>(6, 6).copy_from(&et);
    let mut b = Matrix9x4::zeros();
    b.fixed_view_mut::<3, 3>(0, 1).copy_from(&(right_jacobian(&(teach_input.omega * dt)) * dt));
    b.fixed_view_mut::<3, 1>(3, 0).copy_from(&(et * e3 * dt));
    b.fixed_view_mut::<3, 1>(6, 0).copy_from(&(0.5 * et * e3 * dt * dt));
    (a, b)
}

#[derive(Error, Clone, Debug, PartialEq)]
pub enum ControllerError {
    #[error("Riccati recursion diverged")]
    RiccatiDivergence,
    #[error("teach record is empty")]
    EmptyRecord,
}

/// Diagonal LQR weights on `[φ, ν, ρ]` and `[f, ω]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LqrWeights {
    pub attitude: f64,
    pub velocity: f64,
    pub position: f64,
    pub thrust: f64,
    pub rate: f64,
}

impl Default for LqrWeights {
    fn default() -> Self {
        Self { attitude: 10.0, velocity: 5.0, position: 100.0, thrust: 1.0, rate: 1.0 }
    }
}

impl LqrWeights {
    pub fn q(&self) -> Matrix9 {
        let mut d = Vector9::zeros();
        for i in 0..3 {
            d[i] = self.attitude;
            d[3 + i] = self.velocity;
            d[6 + i] = self.position;
        }
        Matrix9::from_diagonal(&d)
    }

    pub fn r(&self) -> Matrix4<f64> {
        Matrix4::from_diagonal(&Vector4::new(self.thrust, self.rate, self.rate, self.rate))
    }
}

/// Backward Riccati recursion with terminal cost `Q`; returns `K_0 … K_{H−1}`.
pub fn lqr_gains(schedule: &[(Matrix9, Matrix9x4)], q: &Matrix9, r: &Matrix4<f64>) -> Result<Vec<Matrix4x9>, ControllerError> {
    let mut p = *q;
    let mut gains = vec![Matrix4x9::zeros(); schedule.len()];
    for (k, (a, b)) in schedule.iter().enumerate().rev() {
        let btp = b.transpose() * p;
        let s = r + btp * b;
        let chol = Cholesky::new(s).ok_or(ControllerError::RiccatiDivergence)?;
        let gain = chol.solve(&(btp * a));
        let next = q + a.transpose() * p * (a - b * gain);
        p = 0.5 * (next + next.transpose());
        if !p.iter().all(|v| v.is_finite()) || p.amax() > 1e12 {
            return Err(ControllerError::RiccatiDivergence);
        }
        gains[k] = gain;
    }
    Ok(gains)
}

/// Products of the teach pass consumed by the repeat pass.
#[derive(Clone, Debug, PartialEq)]
pub struct TeachRecord {
    pub dt: f64,
    /// π̂ᵗ_k for k = 0..=K.
    pub poses: Vec<ExtendedPose>,
    /// Commands recorded over `[k, k+1)`, k = 0..K.
    pub inputs: Vec<ControlInput>,
    pub map: AnchorMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub weights: LqrWeights,
    /// Receding horizon in steps.
    pub horizon: usize,
    pub limits: InputLimits,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { weights: LqrWeights::default(), horizon: 50, limits: InputLimits::default() }
    }
}

/// Command issued at one repeat step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Command {
    pub input: ControlInput,
    pub fallback: bool,
}

/// Receding-horizon LQR about the teach record.
#[derive(Clone, Debug)]
pub struct TrackingController {
    config: ControllerConfig,
    q: Matrix9,
    r: Matrix4<f64>,
    schedule: Vec<(Matrix9, Matrix9x4)>,
}

impl TrackingController {
    pub fn new(record: &TeachRecord, config: ControllerConfig) -> Result<Self, ControllerError> {
        if record.inputs.is_empty() {
            return Err(ControllerError::EmptyRecord);
        }
        let schedule = record
            .inputs
            .iter()
            .zip(&record.poses)
            .map(|(u, pose)| linearize_error_dynamics(pose, u, record.dt))
            .collect();
        Ok(Self { q: config.weights.q(), r: config.weights.r(), config, schedule })
    }

    /// Gain applied at step `k`: the first gain of the horizon starting at `k`.
    pub fn gain(&self, k: usize) -> Result<Matrix4x9, ControllerError> {
        let end = (k + self.config.horizon).min(self.schedule.len());
        let window = &self.schedule[k.min(end - 1)..end];
        Ok(lqr_gains(window, &self.q, &self.r)?[0])
    }

    /// `u = u_ff − K δx`, saturated; pure feedforward when no anchor is in range or the
    /// Riccati recursion fails.
    pub fn compute_command(&self, k: usize, record: &TeachRecord, repeat_pose: &ExtendedPose, anchors_in_range: bool) -> Command {
        let k = k.min(record.inputs.len() - 1);
        let feedforward = record.inputs[k];
        if !anchors_in_range {
            return Command { input: feedforward, fallback: true };
        }
        let Ok(gain) = self.gain(k) else {
            return Command { input: feedforward, fallback: true };
        };
        let err = compute_error(&record.poses[k], repeat_pose);
        let du = -gain * err.log;
        let raw = ControlInput { thrust: feedforward.thrust + du[0], omega: feedforward.omega + Vector3::new(du[1], du[2], du[3]) };
        Command { input: self.config.limits.clamp(&raw), fallback: false }
    }
}

/// Writes `t, f, omega_x, omega_y, omega_z, fallback`.
pub fn write_command_csv(path: &Path, dt: f64, commands: &[Command]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "f", "omega_x", "omega_y", "omega_z", "fallback"])?;
    for (k, c) in commands.iter().enumerate() {
        let u = &c.input;
        w.write_record([
            (k as f64 * dt).to_string(),
            u.thrust.to_string(),
            u.omega.x.to_string(),
            u.omega.y.to_string(),
            u.omega.z.to_string(),
            u8::from(c.fallback).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se_math::Rotation;
    use crate::world_sim::integrate_kinematics;
    use crate::{gravity_vector, GRAVITY};
    use nalgebra::{Matrix2, Matrix3, Vector2};
    use std::f64::consts::FRAC_PI_2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn step(x: &ExtendedPose, u: &ControlInput, dt: f64) -> ExtendedPose {
        let accel = x.rotation * Vector3::new(0.0, 0.0, u.thrust) + gravity_vector();
        integrate_kinematics(x, &accel, &u.omega, dt)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> ExtendedPose {
        let mut v = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        ExtendedPose::new(exp_so3(&v()), v(), v() * 3.0)
    }

    #[test]
    fn identical_poses_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_pose(&mut rng);
        assert!(compute_error(&x, &x).log.norm() < 1e-12);
    }

    #[test]
    fn position_offset_in_teach_frame() {
        let teach = ExtendedPose::new(Rotation::from_yaw(FRAC_PI_2), Vector3::zeros(), Vector3::zeros());
        let repeat = ExtendedPose::new(Rotation::from_yaw(FRAC_PI_2), Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let e = compute_error(&teach, &repeat).log;
        assert!((e.fixed_rows::<3>(6) - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn error_is_left_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b, g) = (random_pose(&mut rng), random_pose(&mut rng), random_pose(&mut rng));
        let e1 = compute_error(&a, &b).log;
        let e2 = compute_error(&g.compose(&a), &g.compose(&b)).log;
        assert!((e1 - e2).norm() < 1e-9);
    }

    #[test]
    fn linearization_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random_pose(&mut rng);
            let u = ControlInput {
                thrust: rng.random_range(5.0..15.0),
                omega: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            let dt = 0.05;
            let (a, b) = linearize_error_dynamics(&x, &u, dt);
            let next = step(&x, &u, dt);
            let eps = 1e-6;
            for i in 0..9 {
                let mut d = Vector9::zeros();
                d[i] = eps;
                let plus = compute_error(&next, &step(&x.compose(&ExtendedPose::exp(&d)), &u, dt)).log;
                let minus = compute_error(&next, &step(&x.compose(&ExtendedPose::exp(&-d)), &u, dt)).log;
                let col = (plus - minus) / (2.0 * eps);
                assert!((col - a.column(i)).norm() <= 1e-5 * (1.0 + col.norm()), "A column {i}");
            }
            for i in 0..4 {
                let mut up = u;
                let mut um = u;
                if i == 0 {
                    up.thrust += eps;
                    um.thrust -= eps;
                } else {
                    up.omega[i - 1] += eps;
                    um.omega[i - 1] -= eps;
                }
                let col = (compute_error(&next, &step(&x, &up, dt)).log - compute_error(&next, &step(&x, &um, dt)).log) / (2.0 * eps);
                assert!((col - b.column(i)).norm() <= 1e-5 * (1.0 + col.norm()), "B column {i}");
            }
        }
    }

    #[test]
    fn hover_linearization_structure() {
        let (a, b) = linearize_error_dynamics(&ExtendedPose::identity(), &ControlInput::hover(), 0.01);
        // tilt couples into horizontal velocity through g
        let dv_dphi = a.fixed_view::<3, 3>(3, 0);
        assert!((dv_dphi[(0, 1)] - GRAVITY * 0.01).abs() < 1e-12);
        assert!((dv_dphi[(1, 0)] + GRAVITY * 0.01).abs() < 1e-12);
        assert!((a.fixed_view::<3, 3>(6, 3) - Matrix3::identity() * 0.01).norm() < 1e-12);
        assert!((b[(5, 0)] - 0.01).abs() < 1e-12);
        let (a0, _) = linearize_error_dynamics(&ExtendedPose::identity(), &ControlInput::hover(), 0.0);
        assert_eq!(a0, Matrix9::identity());
    }

    /// Scalar double integrator embedded in the first two states; compare with the algebraic
    /// Riccati solution obtained by iterating to a fixed point.
    #[test]
    fn long_horizon_gain_matches_riccati_fixed_point() {
        let dt = 0.1;
        let mut a = Matrix9::identity();
        a[(1, 0)] = dt;
        let mut b = Matrix9x4::zeros();
        b[(0, 0)] = dt;
        let q = Matrix9::identity();
        let r = Matrix4::identity();
        let gains = lqr_gains(&vec![(a, b); 400], &q, &r).unwrap();
        // reference: Kleinman-free fixed-point iteration on the 2-state system
        let a2 = Matrix2::new(1.0, 0.0, dt, 1.0);
        let b2 = Vector2::new(dt, 0.0);
        let mut p = Matrix2::identity();
        for _ in 0..10_000 {
            let s = 1.0 + (b2.transpose() * p * b2)[0];
            let k = (b2.transpose() * p * a2) / s;
            p = Matrix2::identity() + a2.transpose() * p * (a2 - b2 * k);
        }
        let k_are = (b2.transpose() * p * a2) / (1.0 + (b2.transpose() * p * b2)[0]);
        for i in 0..2 {
            assert!((gains[0][(0, i)] - k_are[i]).abs() <= 0.01 * k_are[i].abs());
        }
        // gains settle monotonically going backward in time
        let g: Vec<f64> = gains.iter().map(|k| k[(0, 1)]).collect();
        assert!(g.windows(2).take(300).all(|w| w[0] >= w[1] - 1e-12));
    }

    #[test]
    fn heavy_input_weight_shrinks_gains() {
        let (a, b) = linearize_error_dynamics(&ExtendedPose::identity(), &ControlInput::hover(), 0.01);
        let q = LqrWeights::default().q();
        let small = lqr_gains(&vec![(a, b); 50], &q, &(Matrix4::identity() * 1e12)).unwrap();
        assert!(small[0].amax() < 1e-6);
    }

    fn hover_record(steps: usize) -> TeachRecord {
        let pose = ExtendedPose::new(Rotation::identity(), Vector3::zeros(), Vector3::new(0.0, 0.0, 1.0));
        TeachRecord { dt: 0.01, poses: vec![pose; steps + 1], inputs: vec![ControlInput::hover(); steps], map: AnchorMap::new() }
    }

    #[test]
    fn zero_error_gives_feedforward() {
        let record = hover_record(100);
        let ctl = TrackingController::new(&record, ControllerConfig::default()).unwrap();
        let cmd = ctl.compute_command(10, &record, &record.poses[10], true);
        assert!(!cmd.fallback);
        assert!((cmd.input.thrust - GRAVITY).abs() < 1e-12 && cmd.input.omega.norm() < 1e-12);
    }

    #[test]
    fn fallback_ignores_the_estimate() {
        let record = hover_record(100);
        let ctl = TrackingController::new(&record, ControllerConfig::default()).unwrap();
        let far = ExtendedPose::new(Rotation::from_yaw(1.0), Vector3::new(1.0, 0.0, 0.0), Vector3::new(5.0, 2.0, 0.0));
        let a = ctl.compute_command(10, &record, &far, false);
        let b = ctl.compute_command(10, &record, &record.poses[3], false);
        assert_eq!(a, b);
        assert!(a.fallback);
        assert_eq!(a.input, record.inputs[10]);
    }

    /// Noise-free closed loop from a 0.3 m / 5° offset about a hover reference.
    #[test]
    fn closed_loop_regulates_offset() {
        let steps = 1500;
        let record = hover_record(steps);
        let ctl = TrackingController::new(&record, ControllerConfig::default()).unwrap();
        let mut x = ExtendedPose::new(Rotation::from_yaw(5f64.to_radians()), Vector3::zeros(), Vector3::new(0.3, 0.0, 1.0));
        let initial = compute_error(&record.poses[0], &x).log.norm();
        let mut after_5s = 0.0;
        for k in 0..steps {
            let cmd = ctl.compute_command(k, &record, &x, true);
            x = step(&x, &cmd.input, record.dt);
            if k + 1 == 500 {
                after_5s = compute_error(&record.poses[k + 1], &x).log.norm();
            }
        }
        assert!(after_5s < initial);
        assert!((x.position - record.poses[steps].position).norm() < 0.05);
    }
}
