//! Ground-truth world: anchors, vehicle kinematics, IMU/height/clock simulation and
//! scripted teach trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControlInput;
use crate::nav_ekf::ImuInput;
use crate::se_math::{exp_so3, log_so3, ExtendedPose, Rotation};
use crate::{gravity_vector, GRAVITY};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("duplicate anchor id {0}")]
    DuplicateAnchor(u32),
    #[error("anchor {0} is below the floor")]
    AnchorBelowFloor(u32),
    #[error("tag offsets are collinear")]
    CollinearTags,
    #[error("invalid sensor spec: {0}")]
    InvalidSensorSpec(&'static str),
    #[error("teach script is invalid: {0}")]
    InvalidScript(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    std * rng.sample::<f64, _>(StandardNormal)
}

fn gaussian3<R: Rng + ?Sized>(rng: &mut R, std: f64) -> Vector3<f64> {
    Vector3::new(gaussian(rng, std), gaussian(rng, std), gaussian(rng, std))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub id: u32,
    pub position: Vector3<f64>,
}

/// Fixed anchors plus the communication model (closed ball of radius `comm_range`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub anchors: Vec<Anchor>,
    pub comm_range: f64,
}

impl Environment {
    pub fn new(anchors: Vec<Anchor>, comm_range: f64) -> Result<Self, WorldError> {
        let env = Self { anchors, comm_range };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let mut seen = BTreeSet::new();
        for a in &self.anchors {
            if !seen.insert(a.id) {
                return Err(WorldError::DuplicateAnchor(a.id));
            }
            if a.position.z < 0.0 {
                return Err(WorldError::AnchorBelowFloor(a.id));
            }
        }
        Ok(())
    }

    pub fn anchor(&self, id: u32) -> Option<&Anchor> {
        self.anchors.iter().find(|a| a.id == id)
    }

    /// IDs of anchors within `comm_range` of `position`, sorted ascending.
    pub fn anchors_in_range(&self, position: &Vector3<f64>) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .anchors
            .iter()
            .filter(|a| (a.position - position).norm() <= self.comm_range)
            .map(|a| a.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Places anchors along the horizontal footprint of `script`.
    ///
    /// `count` anchors are spread evenly in arclength, pushed `lateral_offset` metres to the
    /// right of the direction of travel, at heights `height + height_pattern[i % len]`.
    pub fn generate_along(
        script: &TeachScript,
        count: usize,
        comm_range: f64,
        lateral_offset: f64,
        height: f64,
        height_pattern: &[f64],
    ) -> Result<Self, WorldError> {
        let path = script.horizontal_path();
        let total = path.last().map(|p| p.0).unwrap_or(0.0);
        if count == 0 || total <= 0.0 {
            return Err(WorldError::InvalidScript("script has no horizontal motion".into()));
        }
        let spacing = total / count as f64;
        let mut anchors = Vec::with_capacity(count);
        for i in 0..count {
            let s = i as f64 * spacing;
            let idx = path.partition_point(|p| p.0 < s).min(path.len() - 1);
            let (_, point, heading) = path[idx];
            let right = Vector3::new(heading.sin(), -heading.cos(), 0.0);
            let dz = if height_pattern.is_empty() { 0.0 } else { height_pattern[i % height_pattern.len()] };
            let pos = Vector3::new(point.x, point.y, 0.0) + lateral_offset * right + Vector3::new(0.0, 0.0, (height + dz).max(0.0));
            anchors.push(Anchor { id: i as u32 + 1, position: pos });
        }
        Environment::new(anchors, comm_range)
    }
}

/// Tag positions relative to the IMU point, resolved in the body frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TagGeometry {
    pub offsets: [Vector3<f64>; 3],
}

impl Default for TagGeometry {
    fn default() -> Self {
        Self {
            offsets: [
                Vector3::new(0.25, 0.0, 0.05),
                Vector3::new(-0.125, 0.2165, 0.05),
                Vector3::new(-0.125, -0.2165, 0.05),
            ],
        }
    }
}

impl TagGeometry {
    pub fn new(offsets: [Vector3<f64>; 3]) -> Result<Self, WorldError> {
        let g = Self { offsets };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let [a, b, c] = self.offsets;
        if (b - a).cross(&(c - a)).norm() < 1e-6 {
            return Err(WorldError::CollinearTags);
        }
        Ok(())
    }

    pub fn offset(&self, tag: usize) -> &Vector3<f64> {
        &self.offsets[tag]
    }
}

/// Inter-tag and tag-to-anchor clock states.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ClockStates {
    /// τ^{p_j p_1} for j = 2, 3 (s).
    pub tag_offset: [f64; 2],
    /// γ^{p_j p_1} for j = 2, 3 (s/s).
    pub tag_skew: [f64; 2],
    /// τ^{p_1 a_i} keyed by anchor id (s).
    pub anchor_offset: BTreeMap<u32, f64>,
    /// Drift rate of each anchor offset (s/s).
    pub anchor_skew: BTreeMap<u32, f64>,
}

impl ClockStates {
    pub fn anchor_offset(&self, id: u32) -> f64 {
        self.anchor_offset.get(&id).copied().unwrap_or(0.0)
    }
}

/// Noise and rate characteristics of the simulated sensors and vehicle.
///
/// White-noise densities are PSDs in unit²·s; random-walk densities are in unit²/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    pub accel_noise_psd: f64,
    pub gyro_noise_psd: f64,
    pub accel_bias_psd: f64,
    pub gyro_bias_psd: f64,
    pub height_std: f64,
    /// Receive-timestamp noise σ_t (s).
    pub timestamp_std: f64,
    pub clock_offset_psd: f64,
    pub clock_skew_psd: f64,
    /// Thrust disturbance in the map frame ((m/s²)²·s).
    pub thrust_noise_psd: f64,
    /// Angular-velocity disturbance in the body frame ((rad/s)²·s).
    pub angular_noise_psd: f64,
    pub imu_rate: f64,
    pub ranging_rate: f64,
    pub height_rate: f64,
    /// Anchor response delay Δt (s).
    pub response_delay: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            accel_noise_psd: 0.004f64.powi(2),
            gyro_noise_psd: 0.0003f64.powi(2),
            accel_bias_psd: 1e-4f64.powi(2),
            gyro_bias_psd: 1e-5f64.powi(2),
            height_std: 0.05,
            timestamp_std: 1e-10,
            clock_offset_psd: 1e-20,
            clock_skew_psd: 1e-18,
            thrust_noise_psd: 0.02f64.powi(2),
            angular_noise_psd: 0.002f64.powi(2),
            imu_rate: 100.0,
            ranging_rate: 10.0,
            height_rate: 20.0,
            response_delay: 500e-6,
        }
    }
}

impl SensorSpec {
    /// The same rates with every noise source switched off.
    pub fn noiseless(&self) -> Self {
        Self {
            accel_noise_psd: 0.0,
            gyro_noise_psd: 0.0,
            accel_bias_psd: 0.0,
            gyro_bias_psd: 0.0,
            height_std: 0.0,
            timestamp_std: 0.0,
            clock_offset_psd: 0.0,
            clock_skew_psd: 0.0,
            thrust_noise_psd: 0.0,
            angular_noise_psd: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let noise = [
            self.accel_noise_psd,
            self.gyro_noise_psd,
            self.accel_bias_psd,
            self.gyro_bias_psd,
            self.height_std,
            self.timestamp_std,
            self.clock_offset_psd,
            self.clock_skew_psd,
            self.thrust_noise_psd,
            self.angular_noise_psd,
            self.response_delay,
        ];
        if noise.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(WorldError::InvalidSensorSpec("noise terms must be finite and nonnegative"));
        }
        let rates = [self.imu_rate, self.ranging_rate, self.height_rate];
        if rates.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(WorldError::InvalidSensorSpec("rates must be positive"));
        }
        Ok(())
    }

    pub fn imu_dt(&self) -> f64 {
        1.0 / self.imu_rate
    }

    /// Number of IMU steps between consecutive ranging slots.
    pub fn ranging_stride(&self) -> usize {
        (self.imu_rate / self.ranging_rate).round().max(1.0) as usize
    }

    pub fn height_stride(&self) -> usize {
        (self.imu_rate / self.height_rate).round().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleTruth {
    pub pose: ExtendedPose,
    pub accel_bias: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub clock: ClockStates,
    pub tags: TagGeometry,
}

impl VehicleTruth {
    pub fn at_rest(pose: ExtendedPose, tags: TagGeometry) -> Self {
        Self {
            pose,
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            clock: ClockStates::default(),
            tags,
        }
    }

    /// Tag position in the map frame.
    pub fn tag_position(&self, tag: usize) -> Vector3<f64> {
        self.pose.position + self.pose.rotation * *self.tags.offset(tag)
    }
}

/// True acceleration (map frame) and angular rate (body frame) held over one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrueMotion {
    pub accel: Vector3<f64>,
    pub angular_rate: Vector3<f64>,
}

/// Discrete kinematics shared by the simulator and the estimators:
/// constant map-frame acceleration and body angular rate over `dt`.
pub fn integrate_kinematics(pose: &ExtendedPose, accel: &Vector3<f64>, angular_rate: &Vector3<f64>, dt: f64) -> ExtendedPose {
    let mut rotation = pose.rotation * exp_so3(&(angular_rate * dt));
    rotation.renormalize();
    ExtendedPose {
        rotation,
        velocity: pose.velocity + accel * dt,
        position: pose.position + pose.velocity * dt + 0.5 * accel * dt * dt,
    }
}

/// Motion produced by a thrust/angular-rate command, without disturbances.
pub fn commanded_motion(pose: &ExtendedPose, command: &ControlInput) -> TrueMotion {
    TrueMotion {
        accel: pose.rotation * Vector3::new(0.0, 0.0, command.thrust) + gravity_vector(),
        angular_rate: command.omega,
    }
}

/// Advances only the bias and clock states by `dt`.
pub fn step_slow_states<R: Rng + ?Sized>(state: &mut VehicleTruth, spec: &SensorSpec, dt: f64, rng: &mut R) {
    state.accel_bias += gaussian3(rng, (spec.accel_bias_psd * dt).sqrt());
    state.gyro_bias += gaussian3(rng, (spec.gyro_bias_psd * dt).sqrt());
    let clock = &mut state.clock;
    for j in 0..2 {
        clock.tag_offset[j] += clock.tag_skew[j] * dt + gaussian(rng, (spec.clock_offset_psd * dt).sqrt());
        clock.tag_skew[j] += gaussian(rng, (spec.clock_skew_psd * dt).sqrt());
    }
    for (id, offset) in clock.anchor_offset.iter_mut() {
        *offset += clock.anchor_skew.get(id).copied().unwrap_or(0.0) * dt;
    }
}

/// Integrates the thrust-vector/angular-velocity model one step with disturbances, and
/// random-walks biases and clocks. Returns the new truth and the motion applied over the step.
pub fn step_truth<R: Rng + ?Sized>(
    state: &VehicleTruth,
    command: &ControlInput,
    dt: f64,
    spec: &SensorSpec,
    rng: &mut R,
) -> (VehicleTruth, TrueMotion) {
    assert!(dt > 0.0, "dt must be positive");
    let mut motion = commanded_motion(&state.pose, command);
    motion.accel += gaussian3(rng, (spec.thrust_noise_psd / dt).sqrt());
    motion.angular_rate += gaussian3(rng, (spec.angular_noise_psd / dt).sqrt());
    let mut next = state.clone();
    next.pose = integrate_kinematics(&state.pose, &motion.accel, &motion.angular_rate, dt);
    step_slow_states(&mut next, spec, dt, rng);
    (next, motion)
}

/// IMU sample such that `u + β + w` equals the true specific force and angular rate.
pub fn sample_imu<R: Rng + ?Sized>(state: &VehicleTruth, motion: &TrueMotion, spec: &SensorSpec, dt: f64, rng: &mut R) -> ImuInput {
    let specific_force = state.pose.rotation.transpose() * (motion.accel - gravity_vector());
    let acc = specific_force - state.accel_bias - gaussian3(rng, (spec.accel_noise_psd / dt).sqrt());
    let gyr = motion.angular_rate - state.gyro_bias - gaussian3(rng, (spec.gyro_noise_psd / dt).sqrt());
    ImuInput { acc, gyr, dt }
}

/// Height of the IMU point plus Gaussian noise.
pub fn sample_height<R: Rng + ?Sized>(state: &VehicleTruth, spec: &SensorSpec, rng: &mut R) -> f64 {
    state.pose.position.z + gaussian(rng, spec.height_std)
}

/// One sample of a scripted teach trajectory: the pose at step k and the command held over
/// `[k, k+1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScriptSample {
    pub t: f64,
    pub pose: ExtendedPose,
    pub command: ControlInput,
}

#[derive(Serialize, Deserialize)]
struct ScriptSampleRecord {
    t: f64,
    position: [f64; 3],
    velocity: [f64; 3],
    rotvec: [f64; 3],
    thrust: f64,
    omega: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct ScriptFile {
    dt: f64,
    samples: Vec<ScriptSampleRecord>,
}

/// Time-indexed true poses and the commands that produced them, sampled at the IMU rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TeachScript {
    pub dt: f64,
    pub samples: Vec<ScriptSample>,
}

impl TeachScript {
    /// Number of propagation steps K (samples are indexed 0..=K).
    pub fn steps(&self) -> usize {
        self.samples.len().saturating_sub(1)
    }

    pub fn validate(&self, closure_threshold: f64) -> Result<(), WorldError> {
        if self.samples.len() < 2 || self.dt <= 0.0 {
            return Err(WorldError::InvalidScript("needs at least two samples and dt > 0".into()));
        }
        for (name, s) in [("start", &self.samples[0]), ("end", self.samples.last().unwrap())] {
            let z_axis = s.pose.rotation * Vector3::z();
            if s.pose.position.z.abs() > 0.05 || z_axis.z < (2f64.to_radians()).cos() {
                return Err(WorldError::InvalidScript(format!("{name} is not level on the floor")));
            }
        }
        let first = self.samples[0].pose.position.xy();
        let last = self.samples.last().unwrap().pose.position.xy();
        if (first - last).norm() > closure_threshold {
            return Err(WorldError::InvalidScript(format!(
                "start/end separation {:.3} m exceeds {:.3} m",
                (first - last).norm(),
                closure_threshold
            )));
        }
        Ok(())
    }

    /// Cumulative horizontal arclength, point and direction of travel at each moving sample.
    fn horizontal_path(&self) -> Vec<(f64, nalgebra::Vector2<f64>, f64)> {
        let mut out = Vec::new();
        let mut s = 0.0;
        let mut prev: Option<nalgebra::Vector2<f64>> = None;
        for sample in &self.samples {
            let p = sample.pose.position.xy();
            let v = sample.pose.velocity.xy();
            if let Some(q) = prev {
                s += (p - q).norm();
            }
            prev = Some(p);
            if v.norm() > 0.05 {
                out.push((s, p, v.y.atan2(v.x)));
            }
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<(), WorldError> {
        let file = ScriptFile {
            dt: self.dt,
            samples: self
                .samples
                .iter()
                .map(|s| ScriptSampleRecord {
                    t: s.t,
                    position: s.pose.position.into(),
                    velocity: s.pose.velocity.into(),
                    rotvec: log_so3(&s.pose.rotation).into(),
                    thrust: s.command.thrust,
                    omega: s.command.omega.into(),
                })
                .collect(),
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, &file)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, WorldError> {
        let file: ScriptFile = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        Ok(Self {
            dt: file.dt,
            samples: file
                .samples
                .into_iter()
                .map(|r| ScriptSample {
                    t: r.t,
                    pose: ExtendedPose::new(exp_so3(&r.rotvec.into()), r.velocity.into(), r.position.into()),
                    command: ControlInput { thrust: r.thrust, omega: r.omega.into() },
                })
                .collect(),
        })
    }

    /// Writes `t, position, velocity, attitude rotation vector` per sample.
    pub fn write_truth_csv(&self, path: &Path) -> Result<(), WorldError> {
        let poses: Vec<(f64, ExtendedPose)> = self.samples.iter().map(|s| (s.t, s.pose)).collect();
        write_pose_csv(path, &poses)
    }
}

/// Writes a pose trajectory as `t,x,y,z,vx,vy,vz,phi_x,phi_y,phi_z`.
pub fn write_pose_csv(path: &Path, poses: &[(f64, ExtendedPose)]) -> Result<(), WorldError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "y", "z", "vx", "vy", "vz", "phi_x", "phi_y", "phi_z"])?;
    for (t, pose) in poses {
        let phi = log_so3(&pose.rotation);
        let row = [
            *t,
            pose.position.x,
            pose.position.y,
            pose.position.z,
            pose.velocity.x,
            pose.velocity.y,
            pose.velocity.z,
            phi.x,
            phi.y,
            phi.z,
        ];
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Parameters of the built-in closed-loop teach trajectory: takeoff, one lap of a rounded
/// rectangle with an altitude profile, landing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundedRectangleScript {
    pub length: f64,
    pub width: f64,
    pub corner_radius: f64,
    pub cruise_altitude: f64,
    pub altitude_amplitude: f64,
    /// Number of altitude oscillations over one lap.
    pub altitude_cycles: f64,
    pub duration: f64,
    pub idle_start: f64,
    pub takeoff_time: f64,
    pub landing_time: f64,
    pub idle_end: f64,
    /// Time to reach cruise speed along the lap (and to stop at its end).
    pub speed_ramp_time: f64,
    pub rate: f64,
}

impl Default for RoundedRectangleScript {
    fn default() -> Self {
        Self {
            length: 60.0,
            width: 30.0,
            corner_radius: 8.0,
            cruise_altitude: 1.5,
            altitude_amplitude: 0.4,
            altitude_cycles: 3.0,
            duration: 200.0,
            idle_start: 0.5,
            takeoff_time: 4.0,
            landing_time: 4.0,
            idle_end: 1.5,
            speed_ramp_time: 6.0,
            rate: 100.0,
        }
    }
}

/// Desired flat outputs at one instant.
#[derive(Clone, Copy, Debug)]
struct FlatReference {
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    accel: Vector3<f64>,
    yaw: f64,
    yaw_rate: f64,
}

impl RoundedRectangleScript {
    fn lap_length(&self) -> f64 {
        2.0 * (self.length + self.width) - 8.0 * self.corner_radius + 2.0 * PI * self.corner_radius
    }

    fn lap_time(&self) -> f64 {
        self.duration - self.idle_start - self.takeoff_time - self.landing_time - self.idle_end
    }

    /// Planar point, unwrapped heading and curvature at arclength `s`.
    fn planar(&self, s: f64) -> (nalgebra::Vector2<f64>, f64, f64) {
        use nalgebra::Vector2;
        let a = 0.5 * self.length;
        let w = self.width;
        let r = self.corner_radius;
        let straight = |start: Vector2<f64>, heading: f64, d: f64| {
            (start + d * Vector2::new(heading.cos(), heading.sin()), heading, 0.0)
        };
        let arc = |center: Vector2<f64>, start_angle: f64, d: f64| {
            let ang = start_angle + d / r;
            (center + r * Vector2::new(ang.cos(), ang.sin()), ang + PI / 2.0, 1.0 / r)
        };
        let quarter = PI * r / 2.0;
        let segs: [f64; 9] = [a - r, quarter, w - 2.0 * r, quarter, 2.0 * a - 2.0 * r, quarter, w - 2.0 * r, quarter, a - r];
        let mut d = s.clamp(0.0, self.lap_length());
        for (i, len) in segs.iter().enumerate() {
            if d <= *len || i == segs.len() - 1 {
                let (p, heading, kappa) = match i {
                    0 => straight(Vector2::new(0.0, 0.0), 0.0, d),
                    1 => arc(Vector2::new(a - r, r), -PI / 2.0, d),
                    2 => straight(Vector2::new(a, r), PI / 2.0, d),
                    3 => arc(Vector2::new(a - r, w - r), 0.0, d),
                    4 => straight(Vector2::new(a - r, w), PI, d),
                    5 => arc(Vector2::new(-a + r, w - r), PI / 2.0, d),
                    6 => straight(Vector2::new(-a, w - r), 1.5 * PI, d),
                    7 => arc(Vector2::new(-a + r, r), PI, d),
                    _ => straight(Vector2::new(-a + r, 0.0), 2.0 * PI, d),
                };
                return (p, heading, kappa);
            }
            d -= len;
        }
        unreachable!()
    }

    /// Arclength along the lap and its first two derivatives at lap time `t`.
    fn lap_progress(&self, t: f64) -> (f64, f64, f64) {
        let total = self.lap_time();
        let ramp = self.speed_ramp_time;
        let v = self.lap_length() / (total - ramp);
        let t = t.clamp(0.0, total);
        // speed = v·smoothstep over the ramps; ∫smoothstep(x)dx = x³ - x⁴/2
        let up = |x: f64| (x * x * x - 0.5 * x.powi(4), 3.0 * x * x - 2.0 * x.powi(3), 6.0 * x - 6.0 * x * x);
        if t < ramp {
            let (i, s, ds) = up(t / ramp);
            (v * ramp * i, v * s, v * ds / ramp)
        } else if t > total - ramp {
            let x = (total - t) / ramp;
            let (i, s, ds) = up(x);
            (self.lap_length() - v * ramp * i, v * s, -v * ds / ramp)
        } else {
            (v * ramp * 0.5 + v * (t - ramp), v, 0.0)
        }
    }

    fn reference(&self, t: f64) -> FlatReference {
        let lap_start = self.idle_start + self.takeoff_time;
        let lap_end = lap_start + self.lap_time();
        let quintic = |x: f64| {
            let x = x.clamp(0.0, 1.0);
            (
                10.0 * x.powi(3) - 15.0 * x.powi(4) + 6.0 * x.powi(5),
                30.0 * x * x - 60.0 * x.powi(3) + 30.0 * x.powi(4),
                60.0 * x - 180.0 * x * x + 120.0 * x.powi(3),
            )
        };
        let h = self.cruise_altitude;
        if t < lap_start {
            let x = (t - self.idle_start) / self.takeoff_time;
            let (p, dp, ddp) = if x <= 0.0 { (0.0, 0.0, 0.0) } else { quintic(x) };
            let tt = self.takeoff_time;
            return FlatReference {
                position: Vector3::new(0.0, 0.0, h * p),
                velocity: Vector3::new(0.0, 0.0, h * dp / tt),
                accel: Vector3::new(0.0, 0.0, h * ddp / (tt * tt)),
                yaw: 0.0,
                yaw_rate: 0.0,
            };
        }
        if t > lap_end {
            let x = (t - lap_end) / self.landing_time;
            let (p, dp, ddp) = if x >= 1.0 { (1.0, 0.0, 0.0) } else { quintic(x) };
            let lt = self.landing_time;
            let end = self.planar(self.lap_length()).0;
            return FlatReference {
                position: Vector3::new(end.x, end.y, h * (1.0 - p)),
                velocity: Vector3::new(0.0, 0.0, -h * dp / lt),
                accel: Vector3::new(0.0, 0.0, -h * ddp / (lt * lt)),
                yaw: 2.0 * PI,
                yaw_rate: 0.0,
            };
        }
        let (s, ds, dds) = self.lap_progress(t - lap_start);
        let (p, heading, kappa) = self.planar(s);
        let tangent = nalgebra::Vector2::new(heading.cos(), heading.sin());
        let normal = nalgebra::Vector2::new(-heading.sin(), heading.cos());
        let vel2 = tangent * ds;
        let acc2 = tangent * dds + normal * kappa * ds * ds;
        let k = 2.0 * PI * self.altitude_cycles / self.lap_length();
        let amp = self.altitude_amplitude;
        let z = h + amp * (k * s).sin();
        let vz = amp * k * (k * s).cos() * ds;
        let az = -amp * k * k * (k * s).sin() * ds * ds + amp * k * (k * s).cos() * dds;
        FlatReference {
            position: Vector3::new(p.x, p.y, z),
            velocity: Vector3::new(vel2.x, vel2.y, vz),
            accel: Vector3::new(acc2.x, acc2.y, az),
            yaw: heading,
            yaw_rate: kappa * ds,
        }
    }

    /// Flies the reference with a truth-feedback pilot on the noise-free vehicle model and
    /// records the resulting poses and commands.
    pub fn generate(&self, limits: &crate::controller::InputLimits) -> TeachScript {
        let dt = 1.0 / self.rate;
        let steps = (self.duration * self.rate).round() as usize;
        let mut pose = ExtendedPose::identity();
        let mut samples = Vec::with_capacity(steps + 1);
        let (kp, kd, k_att) = (4.0, 4.0, 8.0);
        for k in 0..=steps {
            let t = k as f64 * dt;
            let r = self.reference(t);
            let a_cmd = r.accel + kp * (r.position - pose.position) + kd * (r.velocity - pose.velocity);
            let thrust_vec = a_cmd - gravity_vector();
            let thrust = thrust_vec.norm();
            let b3 = thrust_vec / thrust;
            let heading = Vector3::new(r.yaw.cos(), r.yaw.sin(), 0.0);
            let b2 = b3.cross(&heading).normalize();
            let b1 = b2.cross(&b3);
            let desired = Rotation::from_matrix_unchecked(Matrix3::from_columns(&[b1, b2, b3]));
            let att_err = log_so3(&(pose.rotation.transpose() * desired));
            let omega = k_att * att_err + pose.rotation.transpose() * Vector3::new(0.0, 0.0, r.yaw_rate);
            let command = limits.clamp(&ControlInput { thrust, omega });
            let command = if k == steps || t < self.idle_start {
                ControlInput::hover()
            } else {
                command
            };
            samples.push(ScriptSample { t, pose, command });
            let motion = commanded_motion(&pose, &command);
            pose = integrate_kinematics(&pose, &motion.accel, &motion.angular_rate, dt);
        }
        TeachScript { dt, samples }
    }
}

/// Configuration-level description of a teach script.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TeachScriptSpec {
    RoundedRectangle(RoundedRectangleScript),
    File { path: std::path::PathBuf },
}

impl Default for TeachScriptSpec {
    fn default() -> Self {
        TeachScriptSpec::RoundedRectangle(RoundedRectangleScript::default())
    }
}

impl TeachScriptSpec {
    pub fn build(&self, limits: &crate::controller::InputLimits) -> Result<TeachScript, WorldError> {
        match self {
            TeachScriptSpec::RoundedRectangle(p) => Ok(p.generate(limits)),
            TeachScriptSpec::File { path } => TeachScript::load_json(path),
        }
    }
}

/// Hover thrust for reference.
pub const HOVER_THRUST: f64 = GRAVITY;
