use super::*;

fn cfg() -> ScenarioConfig {
    ScenarioConfig::default()
}

#[test]
fn keyrate_single_step() {
    let (m, _) = run_keyrate_experiment(&cfg(), 5.0, 0.025, 20.0, EventLog::disabled()).unwrap();
    assert_eq!(m.packets_sent, 1);
    // Generation has not started at the first send.
    assert_eq!(m.missed_packets, 1);
    assert_eq!(m.bits_consumed + m.mac_key_bits, 0);

    let mut early = cfg();
    early.key_start_delay_s = 0.0;
    let (m, _) = run_keyrate_experiment(&early, 5.0, 0.025, 20.0, EventLog::disabled()).unwrap();
    assert_eq!(m.missed_packets, 0);
    assert_eq!(m.bits_consumed + m.mac_key_bits, 756);
}

#[test]
fn keyrate_default_runs() {
    for (d, gen, surplus) in [(5.0, 656e6, 707.0), (10.0, 515e6, 550.0), (50.0, 57.8e6, 62.0)] {
        let (m, _) = run_keyrate_experiment(&cfg(), d, 50.0, 20.0, EventLog::disabled()).unwrap();
        eprintln!("{d} km: {m:?}");
        assert!((m.bits_generated as f64 / gen - 1.0).abs() < 0.10, "{d} km generated {}", m.bits_generated);
        assert!((m.surplus_ratio.unwrap() / surplus - 1.0).abs() < 0.20);
        assert_eq!(m.packets_sent, 2000);
        assert!(m.missed_packets <= 2);
        assert!(m.utilization_pct >= 99.0);
        assert_eq!(m.conservation_violations, 0);
        assert_eq!(m.sustainable, Some(true));
    }
}

#[test]
fn bridge_default() {
    let t = std::time::Instant::now();
    let (run, log) = run_bridge_scenario(&cfg(), EventLog::new()).unwrap();
    eprintln!("{:?} in {:?}", run, t.elapsed());
    let tr = &run.transfer;
    assert!(tr.minted());
    let e2e = tr.end_to_end_s.unwrap();
    assert!((e2e / (73.0 * 60.0) - 1.0).abs() < 0.05, "{e2e}");
    assert!(tr.crypto_overhead_s.unwrap() < 1.0);
    let lat = tr.per_round_latency_s.unwrap();
    assert!((1.0..=3.0).contains(&lat), "{lat}");
    let bytes = tr.proof_bundle_bytes.unwrap();
    assert!((3072..=6144).contains(&bytes), "{bytes}");
    assert!(run.dual_condition);
    assert!(tr.conserved);
    assert!(run.metrics.sealed_messages >= 10_000);
    assert_eq!(run.metrics.overlapping_ranges, 0);
    assert_eq!(run.metrics.conservation_violations, 0);
    assert!(log.is_time_ordered());
}

#[test]
fn committee_runs() {
    let mut log = EventLog::disabled();
    let run = run_committee_experiment(&cfg(), 7, &[5.0], 50.0, &mut log).unwrap();
    eprintln!("{:?}", run.rows[0]);
    assert!(run.all_finalized());
    assert!(run.all_sustainable());
    assert_eq!(run.rows.len(), 6);
    for r in &run.rows {
        assert!(r.surplus_ratio.unwrap() >= 50.0);
    }
}

#[test]
fn attack_suite_default() {
    let mut log = EventLog::new();
    let outcomes = run_attack_suite(&cfg(), &mut log).unwrap();
    for o in &outcomes {
        eprintln!("{} {} {:?} {}", o.kind, o.defended, o.mechanism, o.detail);
    }
    assert_eq!(outcomes.len(), 7);
    assert!(suite_passed(&outcomes));
}

#[test]
fn safety_small() {
    let r = run_safety_trials(4, 50, 1, crate::registry::QuorumMode::WeightSupermajority);
    eprintln!("{r:?}");
    assert!(r.passed());
}
