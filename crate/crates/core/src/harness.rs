//! Trials and Monte-Carlo campaigns: simulate a teach pass, build the map, run the repeat pass
//! in closed loop and score it.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, TrialConfig};
use crate::controller::{write_command_csv, Command, TeachRecord, TrackingController};
use crate::nav_ekf::{run_teach_pass, FilterModel, NavBelief, NavState, PriorStds, RangingSlot, RepeatFilter, SensorFrame, TeachOptions};
use crate::repeat_init::{solve_initialization, to_ekf_prior};
use crate::se_math::{exp_so3, log_so3, wrap_angle, ExtendedPose, Rotation};
use crate::sequence_tracker::Lookup;
use crate::uwb_protocol::{compute_tof, simulate_transaction};
use crate::world_sim::{
    commanded_motion, sample_height, sample_imu, step_slow_states, step_truth, Environment, SensorSpec, TeachScript,
    TrueMotion, VehicleTruth, WorldError,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("trajectory lengths differ: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("{0}")]
    Invalid(String),
}

/// Script and environment shared by every trial of a campaign.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub script: TeachScript,
    pub environment: Environment,
}

impl Scenario {
    pub fn build(config: &TrialConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let script = config.script.build(&config.controller.limits)?;
        script.validate(config.closure_threshold)?;
        let est = config.estimator_spec();
        if (script.dt - config.sensors.imu_dt()).abs() > 1e-12 || (script.dt - est.imu_dt()).abs() > 1e-12 {
            return Err(HarnessError::Invalid("script rate differs from the IMU rate".into()));
        }
        let environment = config.environment.build(&script)?;
        let scenario = Self { script, environment };
        scenario.check_coverage(config)?;
        Ok(scenario)
    }

    /// Requires at least one anchor in range along the script and exactly one around the start.
    fn check_coverage(&self, config: &TrialConfig) -> Result<(), HarnessError> {
        for s in &self.script.samples {
            if self.environment.anchors_in_range(&s.pose.position).is_empty() {
                return Err(HarnessError::Invalid(format!("no anchor in range at t = {:.2} s", s.t)));
            }
        }
        let start = self.script.samples[0].pose.position;
        let r = config.start_perturbation.radius;
        let first = self.environment.anchors_in_range(&start);
        for i in 0..16 {
            let a = 2.0 * PI * i as f64 / 16.0;
            for scale in [0.0, 1.0] {
                let p = start + scale * r * Vector3::new(a.cos(), a.sin(), 0.0);
                let ids = self.environment.anchors_in_range(&p);
                if ids.len() != 1 || ids != first {
                    return Err(HarnessError::Invalid("the start area must see exactly one anchor".into()));
                }
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    std * rng.sample::<f64, _>(StandardNormal)
}

fn gaussian3(rng: &mut ChaCha8Rng, std: f64) -> Vector3<f64> {
    Vector3::new(gaussian(rng, std), gaussian(rng, std), gaussian(rng, std))
}

/// Vehicle at rest at `pose` with biases and tag clocks drawn from `prior` (or zero).
fn initial_truth(pose: ExtendedPose, config: &TrialConfig, prior: &PriorStds, rng: &mut ChaCha8Rng) -> VehicleTruth {
    let mut truth = VehicleTruth::at_rest(pose, config.tags);
    if config.truth_init.draw_from_prior {
        truth.accel_bias = gaussian3(rng, prior.accel_bias);
        truth.gyro_bias = gaussian3(rng, prior.gyro_bias);
        for j in 0..2 {
            truth.clock.tag_offset[j] = gaussian(rng, prior.clock_offset);
            truth.clock.tag_skew[j] = gaussian(rng, prior.clock_skew);
        }
    }
    truth
}

fn nav_truth(v: &VehicleTruth) -> NavState {
    NavState {
        position: v.pose.position,
        velocity: v.pose.velocity,
        attitude: v.pose.rotation,
        accel_bias: v.accel_bias,
        gyro_bias: v.gyro_bias,
        clock_offset: v.clock.tag_offset,
        clock_skew: v.clock.tag_skew,
    }
}

/// Height and ranging measurements at a given step; ranging cycles round-robin over the
/// anchors in range.
struct MeasurementScheduler<'a> {
    environment: &'a Environment,
    spec: &'a SensorSpec,
    ranging_stride: usize,
    height_stride: usize,
    turn: usize,
}

impl<'a> MeasurementScheduler<'a> {
    fn new(environment: &'a Environment, spec: &'a SensorSpec) -> Self {
        Self { environment, spec, ranging_stride: spec.ranging_stride(), height_stride: spec.height_stride(), turn: 0 }
    }

    fn measure(&mut self, k: usize, truth: &VehicleTruth, rng: &mut ChaCha8Rng) -> SensorFrame {
        let height = (k % self.height_stride == 0).then(|| sample_height(truth, self.spec, rng));
        let ranging = (k % self.ranging_stride == 0).then(|| {
            let in_range = self.environment.anchors_in_range(&truth.pose.position);
            let measurement = (!in_range.is_empty()).then(|| {
                let id = in_range[self.turn % in_range.len()];
                self.turn += 1;
                let anchor = self.environment.anchor(id).expect("in-range anchor exists").position;
                let t_k = k as f64 * self.spec.imu_dt();
                let tx = simulate_transaction(truth, id, &anchor, t_k, k, self.spec.timestamp_std, self.spec.response_delay, rng);
                compute_tof(&tx)
            });
            RangingSlot { in_range, measurement }
        });
        SensorFrame { imu: None, height, ranging }
    }
}

fn filter_model(config: &TrialConfig) -> FilterModel {
    FilterModel::from_spec(config.estimator_spec(), config.tags)
}

/// Simulated teach pass: true states and sensor frames for steps `0..=K`.
pub struct TeachData {
    pub truth: Vec<NavState>,
    pub frames: Vec<SensorFrame>,
    /// Vehicle truth at the end of the pass (carries anchor clocks forward).
    pub final_truth: VehicleTruth,
}

pub fn simulate_teach(scenario: &Scenario, config: &TrialConfig, rng: &mut ChaCha8Rng) -> TeachData {
    let spec = &config.sensors;
    let samples = &scenario.script.samples;
    let dt = scenario.script.dt;
    let mut vehicle = initial_truth(samples[0].pose, config, &config.teach_prior, rng);
    for a in &scenario.environment.anchors {
        let ti = &config.truth_init;
        let offset = if ti.anchor_offset > 0.0 { rng.random_range(-ti.anchor_offset..=ti.anchor_offset) } else { 0.0 };
        vehicle.clock.anchor_offset.insert(a.id, offset);
        vehicle.clock.anchor_skew.insert(a.id, gaussian(rng, ti.anchor_skew_std));
    }
    let mut scheduler = MeasurementScheduler::new(&scenario.environment, spec);
    let mut truth = Vec::with_capacity(samples.len());
    let mut frames = Vec::with_capacity(samples.len());
    for (k, sample) in samples.iter().enumerate() {
        vehicle.pose = sample.pose;
        let mut frame = scheduler.measure(k, &vehicle, rng);
        if k + 1 < samples.len() {
            let motion = commanded_motion(&sample.pose, &sample.command);
            frame.imu = Some(sample_imu(&vehicle, &motion, spec, dt, rng));
        }
        truth.push(nav_truth(&vehicle));
        frames.push(frame);
        step_slow_states(&mut vehicle, spec, dt, rng);
    }
    TeachData { truth, frames, final_truth: vehicle }
}

/// Both RMSEs over steps `1..=K` with `N = K`: repeat-vs-teach true positions and
/// teach estimate-vs-truth.
pub fn compute_rmse(
    true_repeat: &[Vector3<f64>],
    true_teach: &[Vector3<f64>],
    est_teach: &[Vector3<f64>],
) -> Result<(f64, f64), HarnessError> {
    let n = true_teach.len();
    if true_repeat.len() != n || est_teach.len() != n {
        return Err(HarnessError::LengthMismatch(format!(
            "repeat {}, teach {}, estimate {}",
            true_repeat.len(),
            n,
            est_teach.len()
        )));
    }
    if n < 2 {
        return Err(HarnessError::LengthMismatch("need at least two samples".into()));
    }
    let k = (n - 1) as f64;
    let mean_sq = |a: &[Vector3<f64>], b: &[Vector3<f64>]| (1..n).map(|i| (a[i] - b[i]).norm_squared()).sum::<f64>() / k;
    Ok((mean_sq(true_repeat, true_teach).sqrt(), mean_sq(est_teach, true_teach).sqrt()))
}

/// Per-step position error and wrapped true-yaw difference between the passes.
pub fn tracking_error_series(repeat: &[ExtendedPose], teach: &[ExtendedPose]) -> (Vec<f64>, Vec<f64>) {
    repeat
        .iter()
        .zip(teach)
        .map(|(r, t)| ((r.position - t.position).norm(), wrap_angle(r.rotation.yaw() - t.rotation.yaw())))
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub trial: usize,
    pub seed: u64,
    pub tracking_rmse: f64,
    pub estimation_rmse: f64,
    pub max_position_error: f64,
    /// Largest absolute heading error (rad).
    pub max_heading_error: f64,
    pub fallback_fraction: f64,
    pub anchors_mapped: usize,
    pub anchor_init_failures: usize,
    pub repeat_mismatches: usize,
    /// Repeat-start estimate error after the static initialization.
    pub init_position_error: f64,
    pub init_heading_error: f64,
    /// Per-step position tracking error (m), steps `0..=K`; stored in `tracking_error.csv`.
    #[serde(skip)]
    pub position_error: Vec<f64>,
    /// Per-step heading tracking error (rad); stored in `tracking_error.csv`.
    #[serde(skip)]
    pub heading_error: Vec<f64>,
}

/// Everything a trial produces.
pub struct TrialRun {
    pub metrics: TrialMetrics,
    pub teach_truth: Vec<ExtendedPose>,
    pub teach_estimate: Vec<ExtendedPose>,
    pub repeat_truth: Vec<ExtendedPose>,
    pub repeat_estimate: Vec<ExtendedPose>,
    pub commands: Vec<Command>,
    pub record: TeachRecord,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub seed: u64,
    pub stage: String,
    pub reason: String,
}

fn fail(trial: usize, seed: u64, stage: &str, reason: impl ToString) -> TrialFailure {
    TrialFailure { trial, seed, stage: stage.into(), reason: reason.to_string() }
}

/// Uniform 2D position in a disc and uniform heading offset.
fn perturbed_start(base: &ExtendedPose, config: &TrialConfig, rng: &mut ChaCha8Rng) -> ExtendedPose {
    let p = &config.start_perturbation;
    let (radius, angle, heading) = if p.radius > 0.0 || p.max_heading > 0.0 {
        let u: f64 = rng.random();
        let angle = rng.random_range(0.0..2.0 * PI);
        let heading = if p.max_heading > 0.0 { rng.random_range(-p.max_heading..=p.max_heading) } else { 0.0 };
        (p.radius * u.sqrt(), angle, heading)
    } else {
        (0.0, 0.0, 0.0)
    };
    ExtendedPose::new(
        Rotation::from_yaw(base.rotation.yaw() + heading),
        Vector3::zeros(),
        base.position + radius * Vector3::new(angle.cos(), angle.sin(), 0.0),
    )
}

/// Runs the whole pipeline for one trial without touching the filesystem.
pub fn simulate_trial(scenario: &Scenario, config: &TrialConfig, trial: usize, seed: u64) -> Result<TrialRun, TrialFailure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = filter_model(config);
    let dt = scenario.script.dt;

    // teach
    let teach = simulate_teach(scenario, config, &mut rng);
    let start = NavState::from_pose(&scenario.script.samples[0].pose);
    let init = NavBelief::with_stds(start, &config.teach_prior);
    let opts = TeachOptions {
        model: model.clone(),
        window_steps: config.window_steps,
        height_prior: config.height_prior,
        record_covariance: false,
    };
    let outcome = run_teach_pass(&init, &teach.frames, &opts);
    if outcome.map.is_empty() {
        return Err(fail(trial, seed, "teach", "no anchor was initialized"));
    }
    let record = TeachRecord {
        dt,
        poses: outcome.estimates.iter().map(NavState::pose).collect(),
        inputs: scenario.script.samples[..scenario.script.steps()].iter().map(|s| s.command).collect(),
        map: outcome.map.clone(),
    };
    let controller = TrackingController::new(&record, config.controller).map_err(|e| fail(trial, seed, "controller", e))?;

    // repeat: static initialization
    let spec = &config.sensors;
    let start_pose = perturbed_start(&scenario.script.samples[0].pose, config, &mut rng);
    let mut vehicle = initial_truth(start_pose, config, &config.repeat_prior.slow, &mut rng);
    vehicle.clock.anchor_offset = teach.final_truth.clock.anchor_offset.clone();
    vehicle.clock.anchor_skew = teach.final_truth.clock.anchor_skew.clone();
    let mut scheduler = MeasurementScheduler::new(&scenario.environment, spec);
    let rest = TrueMotion { accel: Vector3::zeros(), angular_rate: Vector3::zeros() };
    let mut static_frames = Vec::with_capacity(config.static_steps + 1);
    for k in 0..=config.static_steps {
        let mut frame = scheduler.measure(k, &vehicle, &mut rng);
        if k < config.static_steps {
            frame.imu = Some(sample_imu(&vehicle, &rest, spec, dt, &mut rng));
            step_slow_states(&mut vehicle, spec, dt, &mut rng);
        }
        static_frames.push(frame);
    }
    let first = *record.map.get(1).expect("map is nonempty");
    let estimate = solve_initialization(&static_frames, first.id, &first.position, &config.repeat_prior, &model)
        .map_err(|e| fail(trial, seed, "repeat_init", e))?;
    let init_position_error = (estimate.state.nav_state().position - vehicle.pose.position).norm();
    let init_heading_error = wrap_angle(estimate.state.heading.angle() - vehicle.pose.rotation.yaw());
    let mut filter = RepeatFilter::new(to_ekf_prior(&estimate, &config.flat_floor), model, config.max_skip);
    filter.map_std = config.map_std;
    filter.bind_first(first.id);

    // repeat: closed loop, motion steps continue the static step count
    let steps = scenario.script.steps();
    let offset = config.static_steps;
    let mut repeat_truth = Vec::with_capacity(steps + 1);
    let mut repeat_estimate = Vec::with_capacity(steps + 1);
    let mut commands = Vec::with_capacity(steps);
    let mut mismatches = 0;
    repeat_truth.push(vehicle.pose);
    repeat_estimate.push(filter.belief.mean.pose());
    for k in 0..steps {
        let in_range = !scenario.environment.anchors_in_range(&vehicle.pose.position).is_empty();
        let command = controller.compute_command(k, &record, &filter.belief.mean.pose(), in_range);
        let (next, motion) = step_truth(&vehicle, &command.input, dt, spec, &mut rng);
        let imu = sample_imu(&vehicle, &motion, spec, dt, &mut rng);
        vehicle = next;
        filter.predict(&imu);
        let frame = scheduler.measure(offset + k + 1, &vehicle, &mut rng);
        if let Some(Lookup::Ignored) = filter.correct(&frame, &record.map) {
            mismatches += 1;
        }
        if !filter.belief.mean.position.iter().all(|v| v.is_finite()) {
            return Err(fail(trial, seed, "repeat", format!("estimate diverged at step {}", k + 1)));
        }
        repeat_truth.push(vehicle.pose);
        repeat_estimate.push(filter.belief.mean.pose());
        commands.push(command);
    }

    let teach_truth: Vec<ExtendedPose> = teach.truth.iter().map(NavState::pose).collect();
    let positions = |poses: &[ExtendedPose]| poses.iter().map(|p| p.position).collect::<Vec<_>>();
    let (tracking_rmse, estimation_rmse) =
        compute_rmse(&positions(&repeat_truth), &positions(&teach_truth), &positions(&record.poses))
            .map_err(|e| fail(trial, seed, "metrics", e))?;
    if !(tracking_rmse.is_finite() && estimation_rmse.is_finite()) {
        return Err(fail(trial, seed, "metrics", "non-finite RMSE"));
    }
    let (position_error, heading_error) = tracking_error_series(&repeat_truth, &teach_truth);
    let metrics = TrialMetrics {
        trial,
        seed,
        tracking_rmse,
        estimation_rmse,
        max_position_error: position_error.iter().cloned().fold(0.0, f64::max),
        max_heading_error: heading_error.iter().map(|h| h.abs()).fold(0.0, f64::max),
        fallback_fraction: commands.iter().filter(|c| c.fallback).count() as f64 / steps as f64,
        anchors_mapped: record.map.len(),
        anchor_init_failures: outcome.inits.iter().filter(|r| r.result.is_err()).count(),
        repeat_mismatches: mismatches,
        init_position_error,
        init_heading_error,
        position_error,
        heading_error,
    };
    Ok(TrialRun { metrics, teach_truth, teach_estimate: record.poses.clone(), repeat_truth, repeat_estimate, commands, record, dt })
}

const TRAJ_HEADER: [&str; 19] = [
    "t", "x", "y", "z", "vx", "vy", "vz", "phi_x", "phi_y", "phi_z", "est_x", "est_y", "est_z", "est_vx", "est_vy",
    "est_vz", "est_phi_x", "est_phi_y", "est_phi_z",
];

fn pose_fields(p: &ExtendedPose) -> [f64; 9] {
    let phi = log_so3(&p.rotation);
    [p.position.x, p.position.y, p.position.z, p.velocity.x, p.velocity.y, p.velocity.z, phi.x, phi.y, phi.z]
}

/// Writes true and estimated poses side by side.
pub fn write_paired_trajectory(path: &Path, dt: f64, truth: &[ExtendedPose], estimate: &[ExtendedPose]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAJ_HEADER)?;
    for (k, (t, e)) in truth.iter().zip(estimate).enumerate() {
        let mut row = vec![(k as f64 * dt).to_string()];
        row.extend(pose_fields(t).iter().chain(pose_fields(e).iter()).map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// True and estimated poses read back from a paired trajectory file.
pub fn read_paired_trajectory(path: &Path) -> Result<(Vec<ExtendedPose>, Vec<ExtendedPose>), HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| HarnessError::MissingColumn(name.into()));
    let idx: Vec<usize> = TRAJ_HEADER[1..].iter().map(|n| col(n)).collect::<Result<_, _>>()?;
    let (mut truth, mut estimate) = (Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec?;
        let v: Vec<f64> = idx
            .iter()
            .map(|&i| rec[i].parse::<f64>().map_err(|e| HarnessError::Invalid(e.to_string())))
            .collect::<Result<_, _>>()?;
        let pose = |o: usize| {
            ExtendedPose::new(
                exp_so3(&Vector3::new(v[o + 6], v[o + 7], v[o + 8])),
                Vector3::new(v[o + 3], v[o + 4], v[o + 5]),
                Vector3::new(v[o], v[o + 1], v[o + 2]),
            )
        };
        truth.push(pose(0));
        estimate.push(pose(9));
    }
    Ok((truth, estimate))
}

fn write_error_series(path: &Path, dt: f64, m: &TrialMetrics) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "position_error", "heading_error"])?;
    for (k, (p, h)) in m.position_error.iter().zip(&m.heading_error).enumerate() {
        w.write_record([(k as f64 * dt).to_string(), p.to_string(), h.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the artifacts of one trial into `dir`.
pub fn write_trial(dir: &Path, run: &TrialRun) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    write_paired_trajectory(&dir.join("teach_traj.csv"), run.dt, &run.teach_truth, &run.teach_estimate)?;
    write_paired_trajectory(&dir.join("repeat_traj.csv"), run.dt, &run.repeat_truth, &run.repeat_estimate)?;
    run.record.map.save_json(&dir.join("anchor_map.json"))?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&run.metrics)?)?;
    write_error_series(&dir.join("tracking_error.csv"), run.dt, &run.metrics)?;
    write_command_csv(&dir.join("commands.csv"), run.dt, &run.commands)?;
    Ok(())
}

/// Runs one trial and writes its artifacts; failures are written as `failure.json`.
pub fn run_trial(
    scenario: &Scenario,
    config: &TrialConfig,
    trial: usize,
    seed: u64,
    dir: Option<&Path>,
) -> Result<Result<TrialMetrics, TrialFailure>, HarnessError> {
    let result = simulate_trial(scenario, config, trial, seed);
    if let Some(dir) = dir {
        match &result {
            Ok(run) => write_trial(dir, run)?,
            Err(failure) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("failure.json"), serde_json::to_string_pretty(failure)?)?;
            }
        }
    }
    Ok(result.map(|run| run.metrics))
}

/// Quartiles by linear interpolation, Tukey whiskers at 1.5 IQR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let quantile = |q: f64| {
            let pos = q * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        let (q1, median, q3) = (quantile(0.25), quantile(0.5), quantile(0.75));
        let (lo_fence, hi_fence) = (q1 - 1.5 * (q3 - q1), q3 + 1.5 * (q3 - q1));
        let inside: Vec<f64> = v.iter().copied().filter(|x| (lo_fence..=hi_fence).contains(x)).collect();
        Some(Self {
            count: v.len(),
            min: v[0],
            q1,
            median,
            q3,
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            whisker_low: inside.first().copied().unwrap_or(q1),
            whisker_high: inside.last().copied().unwrap_or(q3),
            outliers: v.iter().copied().filter(|x| !(lo_fence..=hi_fence).contains(x)).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub trials: usize,
    pub completed: usize,
    pub tracking_rmse: Option<BoxStats>,
    pub estimation_rmse: Option<BoxStats>,
    pub failures: Vec<TrialFailure>,
    #[serde(skip)]
    pub metrics: Vec<TrialMetrics>,
}

impl CampaignSummary {
    fn from_results(results: Vec<Result<TrialMetrics, TrialFailure>>) -> Self {
        let trials = results.len();
        let (mut metrics, mut failures) = (Vec::new(), Vec::new());
        for r in results {
            match r {
                Ok(m) => metrics.push(m),
                Err(f) => failures.push(f),
            }
        }
        metrics.sort_by_key(|m| m.trial);
        failures.sort_by_key(|f| f.trial);
        let track: Vec<f64> = metrics.iter().map(|m| m.tracking_rmse).collect();
        let est: Vec<f64> = metrics.iter().map(|m| m.estimation_rmse).collect();
        Self {
            trials,
            completed: metrics.len(),
            tracking_rmse: BoxStats::from_values(&track),
            estimation_rmse: BoxStats::from_values(&est),
            failures,
            metrics,
        }
    }

    /// One row per trial, failures included, sorted by trial index.
    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "trial",
            "seed",
            "status",
            "tracking_rmse",
            "estimation_rmse",
            "max_position_error",
            "max_heading_error",
            "fallback_fraction",
            "anchors_mapped",
            "anchor_init_failures",
            "repeat_mismatches",
            "reason",
        ])?;
        let mut rows: Vec<(usize, Vec<String>)> = self
            .metrics
            .iter()
            .map(|m| {
                (
                    m.trial,
                    vec![
                        m.trial.to_string(),
                        m.seed.to_string(),
                        "ok".into(),
                        m.tracking_rmse.to_string(),
                        m.estimation_rmse.to_string(),
                        m.max_position_error.to_string(),
                        m.max_heading_error.to_string(),
                        m.fallback_fraction.to_string(),
                        m.anchors_mapped.to_string(),
                        m.anchor_init_failures.to_string(),
                        m.repeat_mismatches.to_string(),
                        String::new(),
                    ],
                )
            })
            .collect();
        for f in &self.failures {
            let mut row = vec![f.trial.to_string(), f.seed.to_string(), "failed".into()];
            row.extend(std::iter::repeat_n(String::new(), 8));
            row.push(format!("{}: {}", f.stage, f.reason));
            rows.push((f.trial, row));
        }
        rows.sort_by_key(|r| r.0);
        for (_, row) in rows {
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Campaign options that override the config.
#[derive(Clone, Debug, Default)]
pub struct CampaignOptions {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn trial_dir(out: &Path, trial: usize) -> PathBuf {
    out.join(format!("trial_{trial:04}"))
}

/// Runs independent trials (seed = master seed + index) on up to `jobs` threads.
pub fn run_monte_carlo(config: &TrialConfig, options: &CampaignOptions) -> Result<CampaignSummary, HarnessError> {
    let scenario = Scenario::build(config)?;
    let master = options.seed.unwrap_or(config.seed);
    let trials = options.trials.unwrap_or(config.trials);
    let out = options.out.as_deref();
    if let Some(out) = out {
        std::fs::create_dir_all(out)?;
        let effective = TrialConfig { seed: master, trials, ..config.clone() };
        std::fs::write(out.join("config.json"), effective.to_json())?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let results: Vec<Result<TrialMetrics, TrialFailure>> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|i| {
                let seed = master.wrapping_add(i as u64);
                let dir = out.map(|o| trial_dir(o, i));
                run_trial(&scenario, config, i, seed, dir.as_deref())
            })
            .collect::<Result<Vec<_>, HarnessError>>()
    })?;
    let summary = CampaignSummary::from_results(results);
    if let Some(out) = out {
        summary.write_csv(&out.join("summary.csv"))?;
        std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(summary)
}

/// Metrics recomputed from the trajectory files of one trial directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecomputedMetrics {
    pub tracking_rmse: f64,
    pub estimation_rmse: f64,
    pub max_position_error: f64,
    pub max_heading_error: f64,
    #[serde(skip)]
    pub position_error: Vec<f64>,
    #[serde(skip)]
    pub heading_error: Vec<f64>,
}

pub fn recompute_trial_metrics(dir: &Path) -> Result<RecomputedMetrics, HarnessError> {
    let (teach_truth, teach_est) = read_paired_trajectory(&dir.join("teach_traj.csv"))?;
    let (repeat_truth, _) = read_paired_trajectory(&dir.join("repeat_traj.csv"))?;
    let positions = |poses: &[ExtendedPose]| poses.iter().map(|p| p.position).collect::<Vec<_>>();
    let (tracking_rmse, estimation_rmse) =
        compute_rmse(&positions(&repeat_truth), &positions(&teach_truth), &positions(&teach_est))?;
    let (position_error, heading_error) = tracking_error_series(&repeat_truth, &teach_truth);
    Ok(RecomputedMetrics {
        tracking_rmse,
        estimation_rmse,
        max_position_error: position_error.iter().cloned().fold(0.0, f64::max),
        max_heading_error: heading_error.iter().map(|h| h.abs()).fold(0.0, f64::max),
        position_error,
        heading_error,
    })
}

/// Trial directories under a campaign directory, or `dir` itself if it holds one trial.
pub fn trial_dirs(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if dir.join("teach_traj.csv").exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("teach_traj.csv").exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, offset: Vector3<f64>) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let teach: Vec<Vector3<f64>> = (0..n).map(|i| Vector3::new(i as f64, 0.5 * i as f64, 1.0)).collect();
        let shifted = teach.iter().map(|p| p + offset).collect();
        (teach, shifted)
    }

    #[test]
    fn rmse_of_identical_trajectories_is_zero() {
        let (teach, _) = line(20, Vector3::zeros());
        assert_eq!(compute_rmse(&teach, &teach, &teach).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn rmse_of_constant_offset() {
        let (teach, shifted) = line(20, Vector3::new(0.6, 0.0, 0.8));
        let (track, est) = compute_rmse(&shifted, &teach, &teach).unwrap();
        assert!((track - 1.0).abs() < 1e-12 && est == 0.0);
        let (track, est) = compute_rmse(&teach, &teach, &shifted).unwrap();
        assert!(track == 0.0 && (est - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_skips_the_first_sample() {
        let (teach, mut shifted) = line(5, Vector3::zeros());
        shifted[0].x += 100.0;
        shifted[4].x += 2.0;
        // a single 2 m error over K = 4 steps
        let (track, _) = compute_rmse(&shifted, &teach, &teach).unwrap();
        assert!((track - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rmse_rejects_length_mismatch() {
        let (teach, _) = line(5, Vector3::zeros());
        assert!(matches!(compute_rmse(&teach[..4], &teach, &teach), Err(HarnessError::LengthMismatch(_))));
    }

    #[test]
    fn box_stats_of_known_sample() {
        let mut values: Vec<f64> = (1..=9).map(f64::from).collect();
        values.push(100.0);
        let b = BoxStats::from_values(&values).unwrap();
        assert_eq!((b.min, b.max, b.count), (1.0, 100.0, 10));
        assert!((b.median - 5.5).abs() < 1e-12);
        assert!((b.q1 - 3.25).abs() < 1e-12 && (b.q3 - 7.75).abs() < 1e-12);
        assert_eq!(b.outliers, vec![100.0]);
        assert_eq!((b.whisker_low, b.whisker_high), (1.0, 9.0));
        assert!((b.mean - 14.5).abs() < 1e-12);
        assert!(BoxStats::from_values(&[]).is_none());
    }

    #[test]
    fn heading_error_wraps() {
        let a = ExtendedPose::new(Rotation::from_yaw(PI - 0.05), Vector3::zeros(), Vector3::zeros());
        let b = ExtendedPose::new(Rotation::from_yaw(-PI + 0.05), Vector3::zeros(), Vector3::x());
        let (p, h) = tracking_error_series(&[a], &[b]);
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((h[0] + 0.1).abs() < 1e-9);
    }

    #[test]
    fn paired_trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poses: Vec<ExtendedPose> = (0..4)
            .map(|i| {
                let f = i as f64;
                ExtendedPose::new(exp_so3(&Vector3::new(0.1 * f, -0.2, 0.3 * f)), Vector3::new(f, 1.0, -f), Vector3::new(0.1, f, 2.0))
            })
            .collect();
        let est: Vec<ExtendedPose> = poses.iter().rev().copied().collect();
        let path = dir.path().join("traj.csv");
        write_paired_trajectory(&path, 0.01, &poses, &est).unwrap();
        let (t, e) = read_paired_trajectory(&path).unwrap();
        for (a, b) in t.iter().zip(&poses).chain(e.iter().zip(&est)) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.velocity, b.velocity);
            assert!((a.rotation.matrix() - b.rotation.matrix()).amax() < 1e-14);
        }
    }
}
