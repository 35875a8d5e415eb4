use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::Vector3;
use uwb_tr::config::{EnvironmentSpec, TrialConfig};
use uwb_tr::world_sim::{Anchor, RoundedRectangleScript, TeachScriptSpec};
use uwb_tr::harness::{recompute_trial_metrics, run_monte_carlo, trial_dir, CampaignOptions, CampaignSummary, TrialFailure, TrialMetrics};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn read_error_series(path: &Path) -> (Vec<f64>, Vec<f64>) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["t", "position_error", "heading_error"]);
    let (mut pos, mut head) = (Vec::new(), Vec::new());
    for record in reader.records() {
        let record = record.unwrap();
        pos.push(record[1].parse().unwrap());
        head.push(record[2].parse().unwrap());
    }
    (pos, head)
}

#[test]
fn artifacts_reproduce_reported_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let config = TrialConfig::zero_noise();
    let options = CampaignOptions { seed: Some(3), trials: Some(1), jobs: Some(1), out: Some(tmp.path().to_path_buf()) };
    let summary = run_monte_carlo(&config, &options).unwrap();
    assert_eq!(summary.completed, 1);

    let dir = trial_dir(tmp.path(), 0);
    let reported: TrialMetrics = serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    let recomputed = recompute_trial_metrics(&dir).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    assert!(close(reported.tracking_rmse, recomputed.tracking_rmse));
    assert!(close(reported.estimation_rmse, recomputed.estimation_rmse));
    assert!(close(reported.max_position_error, recomputed.max_position_error));
    assert!(close(reported.max_heading_error, recomputed.max_heading_error));

    let (pos, head) = read_error_series(&dir.join("tracking_error.csv"));
    assert_eq!(pos.len(), recomputed.position_error.len());
    assert!(pos.iter().zip(&recomputed.position_error).all(|(a, b)| close(*a, *b)));
    assert!(head.iter().zip(&recomputed.heading_error).all(|(a, b)| close(*a, *b)));

    // RMSE from the stored series, skipping the start sample
    let n = pos.len() - 1;
    let rmse = (pos[1..].iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    assert!((rmse - reported.tracking_rmse).abs() <= 1e-12 * (1.0 + rmse));

    for name in ["teach_traj.csv", "repeat_traj.csv", "anchor_map.json", "commands.csv"] {
        assert!(dir.join(name).is_file(), "{name}");
    }
    for name in ["config.json", "summary.csv", "summary.json"] {
        assert!(tmp.path().join(name).is_file(), "{name}");
    }
    let stored: TrialConfig = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("config.json")).unwrap()).unwrap();
    // overrides are folded into the stored config
    assert_eq!(stored, TrialConfig { trials: 1, seed: 3, ..config });
}

#[test]
fn failed_trials_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    // short single-anchor flight; a height prior pinned below the floor makes every anchor
    // initialization fail, so the teach pass maps nothing
    let mut config = TrialConfig::zero_noise();
    config.script = TeachScriptSpec::RoundedRectangle(RoundedRectangleScript {
        length: 12.0,
        width: 6.0,
        corner_radius: 2.0,
        duration: 30.0,
        ..RoundedRectangleScript::default()
    });
    config.environment = EnvironmentSpec::Explicit {
        anchors: vec![Anchor { id: 1, position: Vector3::new(0.0, -4.0, 2.0) }],
        comm_range: 40.0,
    };
    config.window_steps = 50;
    config.height_prior.h = -2.0;
    config.height_prior.variance = 1e-8;
    let options = CampaignOptions { seed: Some(1), trials: Some(2), jobs: Some(2), out: Some(tmp.path().to_path_buf()) };
    let summary = run_monte_carlo(&config, &options).unwrap();
    assert_eq!(summary.trials, 2);
    assert_eq!(summary.completed, 0);
    assert_eq!(summary.failures.len(), 2);
    assert!(summary.tracking_rmse.is_none());

    let failure: TrialFailure =
        serde_json::from_str(&std::fs::read_to_string(trial_dir(tmp.path(), 1).join("failure.json")).unwrap()).unwrap();
    assert_eq!(failure.trial, 1);
    assert_eq!(failure.seed, 2);
    assert_eq!(failure.stage, "teach");

    let stored: CampaignSummary = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(stored.failures.len(), 2);
    let csv = std::fs::read_to_string(tmp.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("failed")));
}

#[test]
fn command_line_run_and_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let exe = env!("CARGO_BIN_EXE_uwb-tr");
    let out = tmp.path().join("campaign");
    let run = Command::new(exe)
        .args(["run", "--config"])
        .arg(configs_dir().join("zero_noise.json"))
        .args(["--trials", "1", "--seed", "4", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("trials: 1, completed: 1"), "{stdout}");

    let metrics = Command::new(exe).args(["metrics", "--dir"]).arg(&out).output().unwrap();
    assert!(metrics.status.success());
    let text = String::from_utf8(metrics.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "trial,tracking_rmse,estimation_rmse,max_position_error,max_heading_error");
    assert_eq!(lines.len(), 2);
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields[0], "trial_0000");
    let reported: TrialMetrics =
        serde_json::from_str(&std::fs::read_to_string(out.join("trial_0000/metrics.json")).unwrap()).unwrap();
    assert_eq!(fields[1].parse::<f64>().unwrap(), reported.tracking_rmse);
    assert!(reported.tracking_rmse < 0.01);

    let missing = Command::new(exe).args(["metrics", "--dir"]).arg(tmp.path().join("nowhere")).output().unwrap();
    assert!(!missing.status.success());
}

#[test]
fn invalid_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"static_steps": 0}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_uwb-tr"))
        .args(["run", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(tmp.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("static_steps"));
}
