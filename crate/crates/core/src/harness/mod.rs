//! Experiment drivers, scenario configuration and metrics export.

mod config;
mod metrics;
mod safety;

pub use config::{
    default_links, default_validators, ChainTiming, ConfigError, OutputPaths, ScenarioConfig,
    TransferSpec, ValidatorSpec, DEFAULT_HW_CERT, SCHEMA_VERSION,
};
pub use metrics::{
    csv_header, export_metrics, metrics_from_csv, metrics_from_json, metrics_to_csv,
    metrics_to_json, render_metrics, ExportError, ExportFormat, Metrics,
};
pub use safety::{run_safety_trials, SafetyReport, TrialOutcome};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adversary::{
    collusion_forge, run_attack, AdversaryError, AttackKind, AttackOutcome, AttackScenario,
};
use crate::eventlog::EventLog;
use crate::hash::hash_parts;
use crate::qkd::{reference_fit, QkdLinkConfig};
use crate::registry::Role;
use crate::system::{BridgeSystem, TransferReport};
use crate::time::SimTime;
use crate::types::ValidatorId;

/// System-wide counters as one metrics row.
pub fn system_metrics(sys: &BridgeSystem, experiment: &str) -> Metrics {
    let cfg = &sys.config;
    let links = sys.network.links();
    let traffic = sys.traffic();
    let audit = sys.audit();
    let finalized: Vec<_> = sys.heights.iter().filter(|h| h.finalized_at.is_some()).collect();
    let mut m = Metrics {
        experiment: experiment.into(),
        seed: cfg.seed,
        committee_n: sys.registry.records().count() as u64,
        distance_km: single_distance(cfg),
        link: None,
        duration_s: sys.now().as_secs_f64(),
        traffic_kbps: cfg.traffic_kbps,
        bits_generated: links.iter().map(|l| l.buffer.generated_total).sum(),
        bits_consumed: links.iter().map(|l| l.payload_bits).sum(),
        mac_key_bits: links.iter().map(|l| l.mac_key_bits).sum(),
        packets_sent: traffic.packets_sent,
        missed_packets: traffic.packets_missed + traffic.packets_dropped,
        sealed_messages: sys.network.messages_sealed(),
        overlapping_ranges: sys.network.overlap_count(),
        conservation_checks: audit.checks,
        conservation_violations: audit.violations,
        rounds_attempted: sys.heights.iter().map(|h| h.rounds as u64).sum(),
        rounds_finalized: finalized.len() as u64,
        per_round_latency_s: mean(finalized.iter().map(|h| (h.finalized_at.unwrap() - h.started_at).as_secs_f64())),
        proof_bundle_bytes: finalized.last().map(|h| h.proof_bytes as u64),
        ..Default::default()
    };
    if let [l] = links {
        m.rate_bps = Some(l.rate_bps());
    }
    m.derive_ratios();
    m
}

fn single_distance(cfg: &ScenarioConfig) -> Option<f64> {
    let first = cfg.links.first()?.distance_km;
    cfg.links.iter().all(|l| l.distance_km == first).then_some(first)
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Two validators joined by one link at `distance_km`, one payload stream
/// between them for `duration_s`.
pub fn keyrate_config(base: &ScenarioConfig, distance_km: f64, duration_s: f64, traffic_kbps: f64) -> ScenarioConfig {
    let mut cfg = base.clone();
    cfg.validators = default_validators().into_iter().take(2).collect();
    cfg.validators[1].role = Role::Consumer;
    cfg.validators[1].certificate = None;
    cfg.links = vec![QkdLinkConfig::with_fit(ValidatorId(0), ValidatorId(1), distance_km, &reference_fit())];
    cfg.duration_s = duration_s;
    cfg.traffic_kbps = traffic_kbps;
    cfg.committee_n = 2;
    cfg
}

pub fn run_keyrate_experiment(
    base: &ScenarioConfig,
    distance_km: f64,
    duration_s: f64,
    traffic_kbps: f64,
    log: EventLog,
) -> Result<(Metrics, EventLog), ConfigError> {
    let cfg = keyrate_config(base, distance_km, duration_s, traffic_kbps);
    let mut sys = BridgeSystem::new(&cfg, log)?;
    sys.advance_to(SimTime::from_secs_f64(duration_s));
    let mut m = system_metrics(&sys, "keyrate");
    m.demand_bps = sys.link_loads().first().map(|l| l.demand_bps);
    m.sustainable = sys.link_loads().first().map(|l| l.sustainable);
    sys.finish_log();
    Ok((m, sys.log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeRun {
    pub metrics: Metrics,
    pub transfer: TransferReport,
    /// Every loaded link sustainable and every certificate at quorum weight.
    pub dual_condition: bool,
}

/// Lock on the source chain through to a final mint on the destination.
pub fn run_bridge_scenario(config: &ScenarioConfig, log: EventLog) -> Result<(BridgeRun, EventLog), ConfigError> {
    let mut sys = BridgeSystem::new(config, log)?;
    let transfer = sys.run_transfer();
    let mut metrics = system_metrics(&sys, "bridge");
    metrics.end_to_end_latency_s = transfer.end_to_end_s;
    metrics.per_round_latency_s = transfer.per_round_latency_s;
    metrics.crypto_overhead_s = transfer.crypto_overhead_s;
    metrics.proof_bundle_bytes = transfer.proof_bundle_bytes.map(|b| b as u64);
    let dual_condition = sys.dual_condition();
    sys.finish_log();
    Ok((
        BridgeRun {
            metrics,
            transfer,
            dual_condition,
        },
        sys.log,
    ))
}

/// Star topology: v0 is the certified hub with a link to each of the other
/// `n - 1` validators at `distance_km`.
pub fn committee_config(base: &ScenarioConfig, n: u64, distance_km: f64) -> ScenarioConfig {
    let fit = reference_fit();
    let mut cfg = base.clone();
    cfg.committee_n = n;
    cfg.validators = (0..n)
        .map(|i| ValidatorSpec {
            id: ValidatorId(i),
            role: if i == 0 { Role::QkdHub } else { Role::Consumer },
            weight: 1,
            certificate: (i == 0).then(|| DEFAULT_HW_CERT.to_string()),
        })
        .collect();
    cfg.links = (1..n)
        .map(|i| QkdLinkConfig::with_fit(ValidatorId(0), ValidatorId(i), distance_km, &fit))
        .collect();
    cfg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommitteeRun {
    /// One row per link and distance; a committee without links gets one row.
    pub rows: Vec<Metrics>,
    pub heights_run: u64,
    pub heights_finalized: u64,
    pub threshold: u64,
}

impl CommitteeRun {
    pub fn all_finalized(&self) -> bool {
        self.heights_run > 0 && self.heights_run == self.heights_finalized
    }

    pub fn all_sustainable(&self) -> bool {
        self.rows.iter().all(|r| r.sustainable != Some(false))
    }
}

/// Runs one consensus height per destination-chain slot over the background
/// traffic for `duration_s` at each distance.
pub fn run_committee_experiment(
    base: &ScenarioConfig,
    n: u64,
    distances_km: &[f64],
    duration_s: f64,
    log: &mut EventLog,
) -> Result<CommitteeRun, ConfigError> {
    let mut run = CommitteeRun {
        rows: Vec::new(),
        heights_run: 0,
        heights_finalized: 0,
        threshold: 0,
    };
    for &d in distances_km {
        let cfg = committee_config(base, n, d);
        let mut sys = BridgeSystem::new(&cfg, std::mem::take(log))?;
        run.threshold = sys.registry.threshold().unwrap_or(0);
        let end = SimTime::from_secs_f64(duration_s);
        let slot = SimTime::from_secs_f64(cfg.chains.eth_slot_s);
        let mut start = SimTime::ZERO;
        let mut i = 0u64;
        while start < end {
            sys.advance_to(start);
            let ev = hash_parts("qlink/committee-event", &[&d.to_bits().to_be_bytes(), &i.to_be_bytes()]);
            sys.run_height(vec![ev], BTreeMap::new());
            i += 1;
            start = (start + slot).max(sys.now());
        }
        sys.advance_to(end);
        let summary = system_metrics(&sys, "committee");
        run.heights_run += sys.heights.len() as u64;
        run.heights_finalized += summary.rounds_finalized;
        let loads = sys.link_loads();
        if loads.is_empty() {
            let mut m = summary.clone();
            m.distance_km = Some(d);
            run.rows.push(m);
        }
        for load in loads {
            let l = sys.network.link(load.link).expect("listed link");
            let mut m = summary.clone();
            m.distance_km = Some(d);
            m.link = Some(format!("{}-{}", load.endpoints.0, load.endpoints.1));
            m.rate_bps = Some(load.rate_bps);
            m.demand_bps = Some(load.demand_bps);
            m.sustainable = Some(load.sustainable);
            m.bits_generated = l.buffer.generated_total;
            m.bits_consumed = l.payload_bits;
            m.mac_key_bits = l.mac_key_bits;
            m.sealed_messages = l.messages_sealed;
            m.derive_ratios();
            m.utilization_pct = summary.utilization_pct;
            run.rows.push(m);
        }
        sys.finish_log();
        *log = std::mem::take(&mut sys.log);
    }
    Ok(run)
}

/// Every scenario in `config.attacks`, each against a fresh system. Research
/// mode adds a labeled over-threshold collusion run.
pub fn run_attack_suite(config: &ScenarioConfig, log: &mut EventLog) -> Result<Vec<AttackOutcome>, AdversaryError> {
    let mut out = Vec::new();
    for &kind in &config.attacks {
        let mut sys = BridgeSystem::new(config, std::mem::take(log))?;
        out.push(run_attack(&AttackScenario::new(kind), &mut sys)?);
        sys.finish_log();
        *log = std::mem::take(&mut sys.log);
    }
    if config.research_mode && config.attacks.contains(&AttackKind::MinorityCollusion) {
        let mut sys = BridgeSystem::new(config, std::mem::take(log))?;
        let ids = sys.registry.active_ids();
        let t = sys.registry.threshold().unwrap_or(1) as usize;
        let colluders = ids.into_iter().take(t).collect();
        let fake = crate::chain::CrossChainEvent {
            event_id: crate::chain::CrossChainEvent::compute_id(&sys.src.chain_id, 1, 0, 7_777),
            kind: crate::chain::EventKind::Lock,
            chain_id: sys.src.chain_id.clone(),
            amount: 1_000_000_000,
            sender: "coalition".into(),
            recipient: "coalition".into(),
            block_height: 1,
            tx_index: 0,
            nonce: 7_777,
        };
        out.push(collusion_forge(&mut sys, &colluders, &fake)?);
        sys.finish_log();
        *log = std::mem::take(&mut sys.log);
    }
    Ok(out)
}

/// True when every graded outcome was defended.
pub fn suite_passed(outcomes: &[AttackOutcome]) -> bool {
    outcomes.iter().filter(|o| o.is_graded()).all(|o| o.defended)
}

#[cfg(test)]
mod tests;
