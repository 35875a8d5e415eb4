//! Three-tag two-way ranging.
//!
//! Tag 1 runs a standard TWR exchange with an anchor while tags 2 and 3 timestamp the same
//! messages. One exchange yields three anchor-dependent and two anchor-independent ToF
//! measurements, none of which depend on the tag-to-anchor clock offset.
//!
//! Measurement vectors are ordered `[y¹ᵃ, y²ᵃ, y³ᵃ, y²¹, y³¹]`.

use std::path::Path;

use nalgebra::{Matrix3, Matrix5, SMatrix, Vector3, Vector5};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::se_math::{skew, Rotation};
use crate::world_sim::{TagGeometry, VehicleTruth};
use crate::SPEED_OF_LIGHT;

pub type Matrix5x3 = SMatrix<f64, 5, 3>;
pub type Matrix5x2 = SMatrix<f64, 5, 2>;

/// The eight timestamps of one exchange (seconds, each in the recording device's clock).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwrTransaction {
    pub anchor_id: u32,
    pub step: usize,
    /// ρ^{1,T}_{k,1}: tag 1 transmits the request.
    pub tag1_tx: f64,
    /// α^{i,R}_{k,1}: anchor receives the request.
    pub anchor_rx: f64,
    /// α^{i,T}_{k,2}: anchor transmits the response.
    pub anchor_tx: f64,
    /// ρ^{1,R}_{k,2}: tag 1 receives the response.
    pub tag1_rx: f64,
    /// ρ^{j,R}_{k,1}: tags 2 and 3 overhear the request.
    pub tag_rx_request: [f64; 2],
    /// ρ^{j,R}_{k,2}: tags 2 and 3 overhear the response.
    pub tag_rx_response: [f64; 2],
}

/// ToF measurements of one exchange (seconds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurementSet {
    pub anchor_id: u32,
    /// y^{p_1 a_i}
    pub tag1_anchor: f64,
    /// y^{p_j a_i}, j = 2, 3
    pub tag_anchor: [f64; 2],
    /// y^{p_j p_1}, j = 2, 3
    pub tag_tag: [f64; 2],
}

impl RangeMeasurementSet {
    pub fn from_vector(anchor_id: u32, y: &Vector5<f64>) -> Self {
        Self { anchor_id, tag1_anchor: y[0], tag_anchor: [y[1], y[2]], tag_tag: [y[3], y[4]] }
    }

    pub fn as_vector(&self) -> Vector5<f64> {
        Vector5::new(self.tag1_anchor, self.tag_anchor[0], self.tag_anchor[1], self.tag_tag[0], self.tag_tag[1])
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|v| v.is_finite())
    }
}

fn receive_noise<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        std * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Simulates the timestamps of one exchange started at robot time `t_k`.
///
/// Only receive stamps carry noise. `response_delay` is the anchor's fixed turnaround Δt.
pub fn simulate_transaction<R: Rng + ?Sized>(
    truth: &VehicleTruth,
    anchor_id: u32,
    anchor_position: &Vector3<f64>,
    t_k: f64,
    step: usize,
    timestamp_std: f64,
    response_delay: f64,
    rng: &mut R,
) -> TwrTransaction {
    let tof = |tag: usize| (truth.tag_position(tag) - anchor_position).norm() / SPEED_OF_LIGHT;
    let tau_anchor = truth.clock.anchor_offset(anchor_id);
    let tau_tag = truth.clock.tag_offset;
    let tag1_tx = t_k;
    let anchor_rx = tag1_tx + tof(0) - tau_anchor + receive_noise(rng, timestamp_std);
    let anchor_tx = anchor_rx + response_delay;
    let tag1_rx = anchor_tx + tof(0) + tau_anchor + receive_noise(rng, timestamp_std);
    let mut tag_rx_request = [0.0; 2];
    let mut tag_rx_response = [0.0; 2];
    for j in 0..2 {
        let baseline = (truth.tags.offset(j + 1) - truth.tags.offset(0)).norm() / SPEED_OF_LIGHT;
        tag_rx_request[j] = tag1_tx + baseline + tau_tag[j] + receive_noise(rng, timestamp_std);
        tag_rx_response[j] = anchor_tx + tof(j + 1) + tau_tag[j] + tau_anchor + receive_noise(rng, timestamp_std);
    }
    TwrTransaction { anchor_id, step, tag1_tx, anchor_rx, anchor_tx, tag1_rx, tag_rx_request, tag_rx_response }
}

/// Forms the five ToF measurements from the eight timestamps.
pub fn compute_tof(t: &TwrTransaction) -> RangeMeasurementSet {
    let request_leg = t.anchor_rx - t.tag1_tx;
    let tag1_anchor = 0.5 * (request_leg + (t.tag1_rx - t.anchor_tx));
    let mut tag_anchor = [0.0; 2];
    let mut tag_tag = [0.0; 2];
    for j in 0..2 {
        tag_tag[j] = t.tag_rx_request[j] - t.tag1_tx;
        tag_anchor[j] = (t.tag_rx_response[j] - t.anchor_tx) + request_leg - tag1_anchor;
    }
    RangeMeasurementSet { anchor_id: t.anchor_id, tag1_anchor, tag_anchor, tag_tag }
}

/// Noise-free measurement means and their Jacobians.
///
/// Attitude Jacobians are with respect to a right perturbation `C·Exp(δφ)`; clock Jacobians
/// are with respect to `τ^{p_j p_1}` in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RangePrediction {
    pub mean: Vector5<f64>,
    pub d_position: Matrix5x3,
    pub d_attitude: Matrix5x3,
    pub d_clock: Matrix5x2,
    pub d_anchor: Matrix5x3,
}

pub fn predict_ranges(
    position: &Vector3<f64>,
    attitude: &Rotation,
    tag_clock_offsets: &[f64; 2],
    anchor_position: &Vector3<f64>,
    tags: &TagGeometry,
) -> RangePrediction {
    let mut mean = Vector5::zeros();
    let mut d_position = Matrix5x3::zeros();
    let mut d_attitude = Matrix5x3::zeros();
    let mut d_clock = Matrix5x2::zeros();
    let c = attitude.matrix();
    for tag in 0..3 {
        let lever = tags.offset(tag);
        let diff = position - anchor_position + c * lever;
        let dist = diff.norm();
        let unit = if dist > 0.0 { diff / dist } else { Vector3::zeros() };
        mean[tag] = dist / SPEED_OF_LIGHT;
        d_position.row_mut(tag).copy_from(&(unit.transpose() / SPEED_OF_LIGHT));
        let d_phi: Matrix3<f64> = -c * skew(lever);
        d_attitude.row_mut(tag).copy_from(&(unit.transpose() * d_phi / SPEED_OF_LIGHT));
        if tag > 0 {
            mean[tag] += tag_clock_offsets[tag - 1];
            d_clock[(tag, tag - 1)] = 1.0;
        }
    }
    for j in 0..2 {
        mean[3 + j] = (tags.offset(j + 1) - tags.offset(0)).norm() / SPEED_OF_LIGHT + tag_clock_offsets[j];
        d_clock[(3 + j, j)] = 1.0;
    }
    let d_anchor = -d_position;
    RangePrediction { mean, d_position, d_attitude, d_clock, d_anchor }
}

/// Covariance of the five ToF measurements under i.i.d. receive noise of std `timestamp_std`.
///
/// With ν₁, ν₂ on tag 1 and ν_{j,1}, ν_{j,2} on tag j the measurement noises are
/// `½ν₁ + ½ν₂`, `ν_{j,2} + ½ν₁ − ½ν₂` and `ν_{j,1}`.
pub fn range_noise_covariance(timestamp_std: f64) -> Matrix5<f64> {
    let s2 = timestamp_std * timestamp_std;
    let mut r = Matrix5::zeros();
    r[(0, 0)] = 0.5;
    r[(1, 1)] = 1.5;
    r[(2, 2)] = 1.5;
    r[(1, 2)] = 0.5;
    r[(2, 1)] = 0.5;
    r[(3, 3)] = 1.0;
    r[(4, 4)] = 1.0;
    r * s2
}

/// Writes one row per exchange with the eight timestamps.
pub fn write_transactions_csv(path: &Path, transactions: &[TwrTransaction]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "step",
        "anchor_id",
        "tag1_tx",
        "anchor_rx",
        "anchor_tx",
        "tag1_rx",
        "tag2_rx_request",
        "tag3_rx_request",
        "tag2_rx_response",
        "tag3_rx_response",
    ])?;
    for t in transactions {
        let mut row = vec![t.step.to_string(), t.anchor_id.to_string()];
        row.extend(
            [
                t.tag1_tx,
                t.anchor_rx,
                t.anchor_tx,
                t.tag1_rx,
                t.tag_rx_request[0],
                t.tag_rx_request[1],
                t.tag_rx_response[0],
                t.tag_rx_response[1],
            ]
            .iter()
            .map(|v| v.to_string()),
        );
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads transactions written by [`write_transactions_csv`].
pub fn read_transactions_csv(path: &Path) -> Result<Vec<TwrTransaction>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec[i].parse::<f64>().unwrap_or(f64::NAN);
        out.push(TwrTransaction {
            step: rec[0].parse().unwrap_or(0),
            anchor_id: rec[1].parse().unwrap_or(0),
            tag1_tx: f(2),
            anchor_rx: f(3),
            anchor_tx: f(4),
            tag1_rx: f(5),
            tag_rx_request: [f(6), f(7)],
            tag_rx_response: [f(8), f(9)],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se_math::{exp_so3, ExtendedPose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DELAY: f64 = 500e-6;

    fn collocated() -> TagGeometry {
        // Degenerate geometry allowed for protocol tests only.
        TagGeometry { offsets: [Vector3::zeros(); 3] }
    }

    fn truth_at(position: Vector3<f64>, tags: TagGeometry) -> VehicleTruth {
        VehicleTruth::at_rest(ExtendedPose::new(Rotation::identity(), Vector3::zeros(), position), tags)
    }

    #[test]
    fn collocated_tags_receive_after_one_flight_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth = truth_at(Vector3::zeros(), collocated());
        let anchor = Vector3::new(3.0, 0.0, 0.0);
        let t = simulate_transaction(&truth, 1, &anchor, 2.0, 0, 0.0, DELAY, &mut rng);
        let tof = 3.0 / SPEED_OF_LIGHT;
        assert!((t.anchor_rx - (t.tag1_tx + tof)).abs() < 1e-15);
        assert!((t.tag1_rx - (t.anchor_tx + tof)).abs() < 1e-15);
        for j in 0..2 {
            assert!((t.tag_rx_request[j] - t.tag1_tx).abs() < 1e-15);
            assert!((t.tag_rx_response[j] - (t.anchor_tx + tof)).abs() < 1e-15);
        }
        assert_eq!(t.anchor_tx, t.anchor_rx + DELAY);
    }

    #[test]
    fn anchor_offset_shifts_anchor_and_response_stamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut truth = truth_at(Vector3::zeros(), TagGeometry::default());
        let anchor = Vector3::new(7.0, -2.0, 1.0);
        let base = simulate_transaction(&truth, 4, &anchor, 0.0, 0, 0.0, DELAY, &mut rng);
        truth.clock.anchor_offset.insert(4, 1e-3);
        let shifted = simulate_transaction(&truth, 4, &anchor, 0.0, 0, 0.0, DELAY, &mut rng);
        assert!((shifted.anchor_rx - (base.anchor_rx - 1e-3)).abs() < 1e-15);
        assert!((shifted.anchor_tx - (base.anchor_tx - 1e-3)).abs() < 1e-15);
        // Tag 1 receives in its own clock: the anchor's −1 ms and +1 ms cancel.
        assert!((shifted.tag1_rx - base.tag1_rx).abs() < 1e-15);
    }

    #[test]
    fn tag_offset_delays_its_receive_stamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut truth = truth_at(Vector3::new(1.0, 2.0, 0.5), TagGeometry::default());
        let anchor = Vector3::new(-4.0, 6.0, 2.0);
        let base = simulate_transaction(&truth, 2, &anchor, 0.0, 0, 0.0, DELAY, &mut rng);
        truth.clock.tag_offset[0] = 5e-6;
        let shifted = simulate_transaction(&truth, 2, &anchor, 0.0, 0, 0.0, DELAY, &mut rng);
        assert!((shifted.tag_rx_request[0] - base.tag_rx_request[0] - 5e-6).abs() < 1e-15);
        assert!((shifted.tag_rx_response[0] - base.tag_rx_response[0] - 5e-6).abs() < 1e-15);
        assert_eq!(shifted.tag_rx_request[1], base.tag_rx_request[1]);
    }

    #[test]
    fn tof_cancels_anchor_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut truth = truth_at(Vector3::zeros(), collocated());
        let anchor = Vector3::new(0.0, 12.0, 0.0);
        for offset in [-0.5, 0.0, 1e-6, 0.3] {
            truth.clock.anchor_offset.insert(9, offset);
            let y = compute_tof(&simulate_transaction(&truth, 9, &anchor, 0.0, 0, 0.0, DELAY, &mut rng));
            assert!((y.tag1_anchor - 12.0 / SPEED_OF_LIGHT).abs() < 1e-15);
        }
    }

    #[test]
    fn tag_tag_measures_baseline_plus_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tags = TagGeometry::default();
        let mut truth = truth_at(Vector3::zeros(), tags);
        truth.clock.tag_offset[0] = 5e-6;
        let y = compute_tof(&simulate_transaction(&truth, 1, &Vector3::new(5.0, 0.0, 0.0), 0.0, 0, 0.0, DELAY, &mut rng));
        let d12 = (tags.offsets[1] - tags.offsets[0]).norm() / SPEED_OF_LIGHT;
        assert!((y.tag_tag[0] - (d12 + 5e-6)).abs() < 1e-15);
    }

    #[test]
    fn tag_one_range_from_geometry() {
        let tags = TagGeometry {
            offsets: [Vector3::new(0.1, 0.0, 0.0), Vector3::new(0.0, 0.1, 0.0), Vector3::new(0.0, -0.1, 0.0)],
        };
        let p = predict_ranges(&Vector3::zeros(), &Rotation::identity(), &[0.0, 0.0], &Vector3::new(10.0, 0.0, 0.0), &tags);
        assert!((p.mean[0] - 9.9 / SPEED_OF_LIGHT).abs() < 1e-20);
    }

    #[test]
    fn tag_tag_prediction_is_pose_independent() {
        let tags = TagGeometry::default();
        let a = predict_ranges(&Vector3::zeros(), &Rotation::identity(), &[0.0, 0.0], &Vector3::new(10.0, 0.0, 2.0), &tags);
        let b = predict_ranges(&Vector3::new(3.0, -1.0, 1.0), &exp_so3(&Vector3::new(0.3, 0.2, 1.0)), &[0.0, 0.0], &Vector3::new(-2.0, 5.0, 2.0), &tags);
        for j in 0..2 {
            let expected = (tags.offsets[j + 1] - tags.offsets[0]).norm() / SPEED_OF_LIGHT;
            assert_eq!(a.mean[3 + j], expected);
            assert_eq!(b.mean[3 + j], expected);
        }
    }

    #[test]
    fn covariance_entries() {
        let r = range_noise_covariance(1.0);
        assert_eq!(r[(0, 0)], 0.5);
        assert_eq!(r[(1, 1)], 1.5);
        assert_eq!(r[(1, 2)], 0.5);
        assert_eq!(r[(0, 1)], 0.0);
        assert_eq!(r[(3, 3)], 1.0);
        assert_eq!(r[(3, 0)], 0.0);
        assert_eq!(range_noise_covariance(0.0), Matrix5::zeros());
        for sigma in [1e-10, 0.3, 2.0] {
            let r = range_noise_covariance(sigma);
            assert_eq!(r, r.transpose());
            assert!(r.symmetric_eigenvalues().iter().all(|e| *e >= 0.0));
        }
    }

    #[test]
    fn transactions_csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = truth_at(Vector3::new(1.0, 1.0, 1.0), TagGeometry::default());
        let txs: Vec<_> = (0..4)
            .map(|k| simulate_transaction(&truth, 3, &Vector3::new(8.0, 1.0, 2.0), k as f64 * 0.1, k, 1e-10, DELAY, &mut rng))
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tx.csv");
        write_transactions_csv(&path, &txs).unwrap();
        assert_eq!(read_transactions_csv(&path).unwrap(), txs);
    }
}
