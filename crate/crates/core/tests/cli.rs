use std::process::{Command, Output};

use qlink_core::eventlog::EventLog;
use qlink_core::harness::{metrics_from_csv, metrics_from_json, ScenarioConfig};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlink-sim")).args(args).output().unwrap()
}

#[test]
fn keyrate_csv_round_trips() {
    let out = sim(&["keyrate", "--distance-km", "5", "50", "--duration-s", "2", "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = metrics_from_csv(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].distance_km, Some(5.0));
    assert_eq!(rows[1].distance_km, Some(50.0));
    assert!(rows[0].bits_generated > rows[1].bits_generated);
    assert_eq!(rows[0].packets_sent, 80);
}

#[test]
fn config_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("scenario.json");
    let cfg = ScenarioConfig {
        seed: 5,
        ..ScenarioConfig::default()
    };
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let log = dir.path().join("log.jsonl");
    let out = sim(&[
        "committee",
        "--n",
        "4",
        "--distance-km",
        "10",
        "--duration-s",
        "24",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "9",
        "--event-log",
        log.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = metrics_from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.seed == 9 && r.committee_n == 4 && r.sustainable == Some(true)));
    let records = EventLog::parse_jsonl(&std::fs::read_to_string(&log).unwrap()).unwrap();
    assert!(records.iter().any(|r| r.kind == "FINALIZED"));
    assert!(records.windows(2).all(|w| (w[0].run, w[0].t_us) <= (w[1].run, w[1].t_us)));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"seed": 1, "duration_s": -4}"#).unwrap();
    assert_eq!(sim(&["bridge", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(sim(&["bridge", "--config", "/nonexistent/cfg.json"]).status.code(), Some(2));
    assert_eq!(sim(&["attack", "--scenario", "teleport"]).status.code(), Some(2));
    assert_eq!(sim(&["committee", "--n", "0"]).status.code(), Some(2));

    let out = sim(&["attack", "--scenario", "key-theft", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("kind,defended,mechanism"));
    assert!(text.contains("KEY_THEFT,true,KEY_EXPORT_FORBIDDEN"));

    // Losing the only hub cannot be routed around, so the defense fails.
    let mut cfg = ScenarioConfig::default();
    cfg.validators[1].role = qlink_core::registry::Role::Consumer;
    cfg.validators[1].certificate = None;
    cfg.links.retain(|l| l.endpoint_a == qlink_core::ValidatorId(0));
    let path = dir.path().join("one_hub.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = sim(&["attack", "--scenario", "QKD_DOS", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
