//! The assembled bridge: validators, key plane, consensus, chains and
//! contracts advanced by one simulated clock.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::chain::{
    verify_finalized_event, verify_lock_event, BridgeContract, ContractResult, CrossChainEvent,
    LightClient, SimChain,
};
use crate::consensus::{
    run_round, Behavior, Delivered, FinalityCertificate, HeightInput, HeightOutcome, Participants,
    Transport,
};
use crate::custody::{Enclave, KeyHandle, MockScheme};
use crate::eventlog::EventLog;
use crate::harness::{ConfigError, ScenarioConfig};
use crate::hash::Digest;
pub use crate::qkd::ConservationAudit;
use crate::qkd::{
    sustainability_check, traffic_demand_bps, BitString, LinkId, QkdError, QkdNetwork,
};
use crate::registry::{EvidenceKind, IncidentKind, MisbehaviorEvidence, Registry, ValidatorRecord, Status};
use crate::time::SimTime;
use crate::types::ValidatorId;

/// Heights tried for one batch of events before giving up.
const MAX_HEIGHT_ATTEMPTS: u32 = 3;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub packets_sent: u64,
    /// Packets not sent because a link on the route had too little key.
    pub packets_missed: u64,
    /// Packets not sent because the route was down or missing.
    pub packets_dropped: u64,
    pub pad_bits: u64,
    pub mac_key_bits: u64,
}

/// Constant-rate payload stream on every validator pair.
struct Background {
    channels: Vec<(ValidatorId, ValidatorId)>,
    interval: SimTime,
    packet_bits: u64,
    next_packet: SimTime,
    window: SimTime,
    next_window: SimTime,
    rng: ChaCha8Rng,
    stats: TrafficStats,
    last_window: BTreeMap<LinkId, (u64, u64)>,
    records: Vec<(SimTime, &'static str, Value)>,
    log_enabled: bool,
}

impl Background {
    fn pump(&mut self, net: &mut QkdNetwork, until: SimTime) {
        loop {
            let window_first = self.next_window <= self.next_packet;
            let next = self.next_packet.min(self.next_window);
            if next > until {
                break;
            }
            net.advance_to(next);
            if window_first {
                self.log_window(net, next);
                self.next_window += self.window;
                continue;
            }
            for i in 0..self.channels.len() {
                let (a, b) = self.channels[i];
                let mut bytes = vec![0u8; self.packet_bits.div_ceil(8) as usize];
                self.rng.fill_bytes(&mut bytes);
                let payload = BitString::from_bytes_truncated(&bytes, self.packet_bits);
                self.stats.packets_sent += 1;
                match net.transmit(a, b, &payload) {
                    Ok(d) => {
                        let pad = self.packet_bits * d.hops as u64;
                        self.stats.pad_bits += pad;
                        self.stats.mac_key_bits += d.key_bits - pad;
                    }
                    Err(QkdError::InsufficientKey { .. }) => self.stats.packets_missed += 1,
                    Err(_) => self.stats.packets_dropped += 1,
                }
            }
            self.next_packet += self.interval;
        }
    }

    fn log_window(&mut self, net: &QkdNetwork, at: SimTime) {
        if !self.log_enabled {
            return;
        }
        for l in net.links() {
            let b = &l.buffer;
            let (g0, c0) = self.last_window.insert(l.id, (b.generated_total, b.consumed_total)).unwrap_or((0, 0));
            self.records.push((
                at,
                "KEY_WINDOW",
                json!({
                    "link": l.id.to_string(),
                    "generated": b.generated_total - g0,
                    "consumed": b.consumed_total - c0,
                    "available": b.available_bits,
                    "discarded_total": b.overflow_discarded,
                    "up": l.is_up(),
                }),
            ));
        }
    }
}

/// Consensus transport over the key plane that keeps background traffic and
/// the conservation audit in step with consensus sends.
struct LiveTransport<'a> {
    net: &'a mut QkdNetwork,
    bg: &'a mut Background,
}

impl Transport for LiveTransport<'_> {
    fn send(
        &mut self,
        at: SimTime,
        from: ValidatorId,
        to: ValidatorId,
        payload: &[u8],
    ) -> Result<Delivered, QkdError> {
        self.bg.pump(self.net, at);
        Transport::send(self.net, at, from, to, payload)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightRecord {
    pub height: u64,
    pub started_at: SimTime,
    pub finalized_at: Option<SimTime>,
    pub rounds: u32,
    pub signers: usize,
    pub proof_bytes: usize,
    pub proof_weight: u64,
    pub threshold: u64,
    pub certificate_valid: bool,
    pub messages_sent: u64,
    pub messages_lost: u64,
    pub key_bits: u64,
    pub evidence: usize,
    pub constructible_digests: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub lock_event: CrossChainEvent,
    pub lock_submitted_at: SimTime,
    pub confirmed_at: SimTime,
    pub verified_by: Vec<ValidatorId>,
    pub finalized_at: Option<SimTime>,
    pub mint: Option<ContractResult>,
    pub mint_final_at: Option<SimTime>,
    pub end_to_end_s: Option<f64>,
    pub per_round_latency_s: Option<f64>,
    pub crypto_overhead_s: Option<f64>,
    pub proof_bundle_bytes: Option<usize>,
    pub release: Option<ContractResult>,
    pub conserved: bool,
}

impl TransferReport {
    pub fn minted(&self) -> bool {
        self.mint.as_ref().is_some_and(|m| m.is_ok())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkLoad {
    pub link: LinkId,
    pub endpoints: (ValidatorId, ValidatorId),
    pub distance_km: f64,
    pub rate_bps: f64,
    pub demand_bps: f64,
    pub sustainable: bool,
}

pub struct BridgeSystem {
    pub config: ScenarioConfig,
    pub registry: Registry,
    pub enclave: Enclave,
    pub handles: BTreeMap<ValidatorId, KeyHandle>,
    pub behaviors: BTreeMap<ValidatorId, Behavior>,
    pub network: QkdNetwork,
    pub btc: SimChain,
    pub eth: SimChain,
    pub src: BridgeContract,
    pub dst: BridgeContract,
    pub eth_client: LightClient,
    pub log: EventLog,
    pub heights: Vec<HeightRecord>,
    pub certificates: Vec<FinalityCertificate>,
    now: SimTime,
    next_height: u64,
    next_btc: SimTime,
    next_eth: SimTime,
    bg: Background,
}

impl BridgeSystem {
    pub fn new(config: &ScenarioConfig, log: EventLog) -> Result<Self, ConfigError> {
        config.validate()?;
        let invalid = |e: String| ConfigError::Invalid(e);
        let mut enclave = Enclave::new(Arc::new(MockScheme::new(config.signature.clone())), config.seed);
        let mut registry = Registry::new(config.quorum_mode, config.certificate_allowlist.clone());
        let mut handles = BTreeMap::new();
        for v in &config.validators {
            let (h, public_key) = enclave.keygen(v.id);
            registry
                .register_validator(ValidatorRecord {
                    id: v.id,
                    public_key,
                    weight: v.weight,
                    role: v.role,
                    certificate: v.certificate.clone(),
                    status: Status::Active,
                })
                .map_err(|e| invalid(e.to_string()))?;
            handles.insert(v.id, h);
        }
        registry.assign_default_hubs();
        let gen_start = SimTime::from_secs_f64(config.key_start_delay_s);
        let mut network = QkdNetwork::new(config.seed, config.links.clone(), gen_start)
            .map_err(|e| invalid(e.to_string()))?;
        network.set_relays(registry.relay_order());
        network.rebuild_routes(&registry.active_ids());

        let verifier = enclave.verifier();
        let mut src = BridgeContract::new("btc", "eth", verifier.clone());
        let mut dst = BridgeContract::new("eth", "btc", verifier);
        src.sync_registry(&registry);
        dst.sync_registry(&registry);

        let ids: Vec<ValidatorId> = handles.keys().copied().collect();
        let mut channels = Vec::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                channels.push((a, b));
            }
        }
        let interval = SimTime::from_secs_f64(config.packet_bits as f64 / config.traffic_bps());
        let window = SimTime::from_secs_f64(config.key_window_s);
        let bg = Background {
            channels,
            interval,
            packet_bits: config.packet_bits,
            next_packet: interval,
            window,
            next_window: window,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x7472_6166_6669_63),
            stats: TrafficStats::default(),
            last_window: BTreeMap::new(),
            records: Vec::new(),
            log_enabled: log.is_enabled(),
        };
        let mut sys = BridgeSystem {
            config: config.clone(),
            registry,
            enclave,
            handles,
            behaviors: BTreeMap::new(),
            network,
            btc: SimChain::new("btc", SimTime::from_secs_f64(config.chains.btc_block_interval_s)),
            eth: SimChain::new("eth", SimTime::from_secs_f64(config.chains.eth_slot_s)),
            src,
            dst,
            eth_client: LightClient::new("eth"),
            log,
            heights: Vec::new(),
            certificates: Vec::new(),
            now: SimTime::ZERO,
            next_height: 1,
            next_btc: SimTime::ZERO,
            next_eth: SimTime::ZERO,
            bg,
        };
        sys.log.begin_run();
        sys.next_btc = sys.btc.block_interval;
        sys.next_eth = sys.eth.block_interval;
        let topology: Vec<Value> = sys
            .network
            .links()
            .iter()
            .map(|l| {
                json!({
                    "link": l.id.to_string(),
                    "a": l.config.endpoint_a,
                    "b": l.config.endpoint_b,
                    "distance_km": l.config.distance_km,
                    "rate_bps": l.rate_bps(),
                })
            })
            .collect();
        sys.log.push(
            SimTime::ZERO,
            "SYSTEM_START",
            json!({
                "seed": config.seed,
                "validators": sys.registry.active_ids(),
                "threshold": sys.registry.threshold().ok(),
                "links": topology,
            }),
        );
        Ok(sys)
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn set_behavior(&mut self, id: ValidatorId, b: Behavior) {
        self.behaviors.insert(id, b);
    }

    pub fn traffic(&self) -> &TrafficStats {
        &self.bg.stats
    }

    pub fn audit(&self) -> &ConservationAudit {
        self.network.audit()
    }

    /// Stops the background payload streams, e.g. to study consensus traffic alone.
    pub fn disable_background(&mut self) {
        self.bg.channels.clear();
    }

    fn flush_background_records(&mut self) {
        for (at, kind, data) in self.bg.records.drain(..) {
            self.log.push(at, kind, data);
        }
    }

    /// Advances the clock, producing blocks, background packets and finality
    /// updates on the way.
    pub fn advance_to(&mut self, t: SimTime) {
        if t < self.now {
            return;
        }
        loop {
            let next = self.next_btc.min(self.next_eth);
            if next > t {
                break;
            }
            self.bg.pump(&mut self.network, next);
            if self.next_btc == next {
                let txs = self.btc.pending();
                let h = self.btc.seal_block(next);
                self.log.push(next, "BLOCK", json!({"chain": "btc", "height": h, "txs": txs}));
                self.next_btc += self.btc.block_interval;
            }
            if self.next_eth == next {
                let txs = self.eth.pending();
                let h = self.eth.seal_block(next);
                if txs > 0 {
                    self.log.push(next, "BLOCK", json!({"chain": "eth", "height": h, "txs": txs}));
                }
                self.next_eth += self.eth.block_interval;
                self.update_light_client(next);
            }
        }
        self.bg.pump(&mut self.network, t);
        self.network.advance_to(t);
        self.now = t;
        self.flush_background_records();
    }

    fn update_light_client(&mut self, now: SimTime) {
        let lag = SimTime::from_secs_f64(self.config.chains.eth_finality_lag_s);
        if now < lag {
            return;
        }
        let cutoff = now - lag;
        let target = self
            .eth
            .headers
            .headers()
            .take_while(|h| h.timestamp <= cutoff)
            .last()
            .map_or(0, |h| h.height);
        if target > self.eth_client.finalized_height {
            self.eth_client
                .advance(&self.eth.headers, target)
                .expect("watermark only moves forward");
            self.log.push(now, "ETH_FINALIZED", json!({"height": target}));
        }
    }

    fn participants(&self) -> Participants {
        Participants {
            handles: self.handles.clone(),
            behaviors: self.behaviors.clone(),
        }
    }

    /// Runs one consensus height starting now and applies any resulting
    /// evidence to the registry.
    pub fn run_height(
        &mut self,
        events: Vec<Digest>,
        unverified: BTreeMap<ValidatorId, BTreeSet<Digest>>,
    ) -> HeightOutcome {
        let height = self.next_height;
        self.next_height += 1;
        let input = HeightInput {
            height,
            start: self.now,
            events,
            unverified,
            seed: self.config.seed,
        };
        let parts = self.participants();
        let outcome = {
            let mut tr = LiveTransport {
                net: &mut self.network,
                bg: &mut self.bg,
            };
            run_round(
                &input,
                &parts,
                &self.registry,
                &mut self.enclave,
                &mut tr,
                &self.config.timing,
                &mut self.log,
            )
        };
        self.flush_background_records();
        let threshold = self.registry.threshold().unwrap_or(u64::MAX);
        let verifier = self.enclave.verifier();
        let mut rec = HeightRecord {
            height,
            started_at: input.start,
            finalized_at: None,
            rounds: outcome.rounds,
            signers: 0,
            proof_bytes: 0,
            proof_weight: 0,
            threshold,
            certificate_valid: false,
            messages_sent: outcome.messages_sent,
            messages_lost: outcome.messages_lost,
            key_bits: outcome.key_bits,
            evidence: outcome.evidence.len(),
            constructible_digests: outcome.constructible_digests,
        };
        if let Ok(cert) = &outcome.result {
            rec.finalized_at = Some(cert.finalized_at);
            rec.signers = cert.proof.len();
            rec.proof_bytes = cert.proof.to_bytes().len();
            rec.proof_weight = self.registry.signer_weight(&cert.proof.signers().collect::<Vec<_>>());
            rec.certificate_valid = cert.verify(&self.registry, threshold, &verifier).is_ok();
            self.registry.record_finalized_round(cert.proof.signers());
            self.certificates.push(cert.clone());
        }
        self.heights.push(rec);
        self.apply_outcome(&outcome);
        let end = outcome.ended_at.max(self.now);
        self.advance_to(end);
        outcome
    }

    fn apply_outcome(&mut self, outcome: &HeightOutcome) {
        let verifier = self.enclave.verifier();
        let mut evidence = outcome.evidence.clone();
        let mut providers = BTreeSet::new();
        for f in &outcome.transport_failures {
            if let Some(p) = down_provider(&self.network, f.from, f.to) {
                if providers.insert(p) && self.registry.is_active(p) {
                    let incident = self.registry.record_incident(
                        IncidentKind::KeyDelivery,
                        p,
                        f.at,
                        format!("key delivery failed between {} and {}", f.from, f.to),
                    );
                    evidence.push(MisbehaviorEvidence::from_incident(
                        EvidenceKind::KeyDeliveryFailure,
                        p,
                        incident,
                    ));
                }
            }
        }
        let mut reroute = false;
        for ev in &evidence {
            match self.registry.handle_evidence(ev, &verifier) {
                Ok(out) => {
                    self.log.push(
                        outcome.ended_at,
                        "EVIDENCE",
                        json!({
                            "kind": ev.kind,
                            "accused": ev.accused,
                            "evidence_id": out.evidence_id,
                            "new_status": out.new_status,
                            "changed": out.changed,
                        }),
                    );
                    if !out.reassigned.is_empty() {
                        self.log.push(
                            outcome.ended_at,
                            "HUB_REROUTE",
                            json!({"from": ev.accused, "reassigned": out.reassigned, "ok": out.reroute_ok}),
                        );
                    }
                    reroute |= out.changed;
                }
                Err(e) => self.log.push(
                    outcome.ended_at,
                    "EVIDENCE_REJECTED",
                    json!({"kind": ev.kind, "accused": ev.accused, "error": e.to_string()}),
                ),
            }
        }
        if reroute {
            self.network.set_relays(self.registry.relay_order());
            self.network.rebuild_routes(&self.registry.active_ids());
            self.src.sync_registry(&self.registry);
            self.dst.sync_registry(&self.registry);
        }
    }

    /// Runs heights until `events` are certified or the attempt budget is spent.
    pub fn certify(
        &mut self,
        events: Vec<Digest>,
        unverified: BTreeMap<ValidatorId, BTreeSet<Digest>>,
    ) -> Option<(FinalityCertificate, HeightOutcome)> {
        for _ in 0..MAX_HEIGHT_ATTEMPTS {
            let out = self.run_height(events.clone(), unverified.clone());
            if let Ok(c) = &out.result {
                return Some((c.clone(), out));
            }
        }
        None
    }

    /// Longest route, in hops, between two active validators.
    pub fn max_route_hops(&self) -> usize {
        self.network.routes().map(|(_, r)| r.hops.len()).max().unwrap_or(1)
    }

    /// Crypto time on the critical path of one certified height: three
    /// signatures (proposal, prevote, precommit), sealing of those three
    /// messages on every hop, aggregation and contract-side verification.
    pub fn crypto_overhead(&self, cert: &FinalityCertificate) -> SimTime {
        let t = &self.config.timing;
        let hops = self.max_route_hops() as u64;
        let verify = SimTime::from_secs_f64(
            self.config.chains.contract_verify_per_sig_ms * 1e-3 * cert.proof.len() as f64,
        );
        SimTime(3 * t.sign.0 + 3 * hops * t.seal_per_hop.0) + t.aggregate + verify
    }

    fn contract_verify_time(&self, cert: &FinalityCertificate) -> SimTime {
        SimTime::from_secs_f64(self.config.chains.contract_verify_per_sig_ms * 1e-3 * cert.proof.len() as f64)
    }

    /// Time at which a transaction queued now on the ETH chain is finalized.
    fn eth_finality_time(&self) -> SimTime {
        self.next_eth + SimTime::from_secs_f64(self.config.chains.eth_finality_lag_s)
    }

    /// Lock on the source chain, wait for `k` confirmations, have each
    /// validator verify the event, certify it and mint on the destination.
    pub fn run_transfer(&mut self) -> TransferReport {
        let spec = self.config.transfer.clone();
        let k = self.config.k_confirmations;
        let t0 = self.now;
        let lock = self
            .src
            .submit_lock(&mut self.btc, &spec.sender, spec.amount, &spec.recipient)
            .expect("configured amount is positive");
        self.log.push(
            t0,
            "LOCK",
            json!({"event_id": lock.event_id, "amount": lock.amount, "block_height": lock.block_height}),
        );
        let confirmed_block = lock.block_height + k - 1;
        let confirmed_at = SimTime(self.btc.block_interval.0 * confirmed_block);
        self.advance_to(confirmed_at);
        let proof = self.btc.headers.merkle_proof(lock.block_height, lock.tx_index).ok();

        let mut verified_by = Vec::new();
        let mut unverified = BTreeMap::new();
        for &v in self.handles.keys() {
            let ok = proof.as_ref().is_some_and(|p| verify_lock_event(&lock, p, &self.btc.headers, k));
            self.log.push(
                self.now,
                "EVENT_VERIFIED",
                json!({"validator": v, "event_id": lock.event_id, "ok": ok, "confirmations": self.btc.headers.tip_height() + 1 - lock.block_height}),
            );
            if ok {
                verified_by.push(v);
            } else {
                unverified.insert(v, BTreeSet::from([lock.commitment()]));
            }
        }

        let mut report = TransferReport {
            lock_event: lock.clone(),
            lock_submitted_at: t0,
            confirmed_at,
            verified_by,
            finalized_at: None,
            mint: None,
            mint_final_at: None,
            end_to_end_s: None,
            per_round_latency_s: None,
            crypto_overhead_s: None,
            proof_bundle_bytes: None,
            release: None,
            conserved: false,
        };
        let Some((cert, _)) = self.certify(vec![lock.commitment()], unverified) else {
            self.log.push(self.now, "TRANSFER_FAILED", json!({"event_id": lock.event_id, "stage": "consensus"}));
            report.conserved = self.is_conserved();
            return report;
        };
        report.finalized_at = Some(cert.finalized_at);
        report.per_round_latency_s = Some((cert.finalized_at - self.heights.last().unwrap().started_at).as_secs_f64());
        report.crypto_overhead_s = Some(self.crypto_overhead(&cert).as_secs_f64());
        report.proof_bundle_bytes = Some(cert.proof.to_bytes().len());

        let submit = cert.finalized_at + self.contract_verify_time(&cert);
        self.advance_to(submit);
        let mint = self.dst.contract_mint(&lock, &cert);
        self.log.push(
            self.now,
            "MINT",
            json!({"event_id": lock.event_id, "result": mint.code(), "minted_total": self.dst.minted_total}),
        );
        if mint.is_ok() {
            let mut receipt = b"qlink/mint".to_vec();
            receipt.extend_from_slice(&lock.event_id.0);
            let block = self.eth.submit_tx(receipt);
            let final_at = self.eth_finality_time();
            self.advance_to(final_at);
            while self.eth_client.finalized_height < block {
                let next = self.next_eth;
                self.advance_to(next);
            }
            report.mint_final_at = Some(self.now);
            report.end_to_end_s = Some((self.now - t0).as_secs_f64());
            self.log.push(
                self.now,
                "MINT_FINAL",
                json!({"event_id": lock.event_id, "eth_height": block, "end_to_end_s": (self.now - t0).as_secs_f64()}),
            );
        }
        report.mint = Some(mint);

        if spec.return_trip && report.minted() {
            report.release = Some(self.run_return(&spec.recipient, &spec.sender, spec.amount));
        }
        report.conserved = self.is_conserved();
        report
    }

    /// Burn on the destination, wait for finality, certify and release.
    fn run_return(&mut self, holder: &str, recipient: &str, amount: u64) -> ContractResult {
        let burn = match self.dst.submit_burn(&mut self.eth, holder, amount, recipient) {
            Ok(b) => b,
            Err(r) => return r,
        };
        self.log.push(
            self.now,
            "BURN",
            json!({"event_id": burn.event_id, "amount": amount, "minted_total": self.dst.minted_total}),
        );
        let final_at = self.eth_finality_time();
        self.advance_to(final_at);
        while self.eth_client.finalized_height < burn.block_height {
            let next = self.next_eth;
            self.advance_to(next);
        }
        let proof = self.eth.headers.merkle_proof(burn.block_height, burn.tx_index).ok();
        let mut unverified = BTreeMap::new();
        for &v in self.handles.keys() {
            let ok = proof.as_ref().is_some_and(|p| verify_finalized_event(&burn, p, &self.eth_client));
            if !ok {
                unverified.insert(v, BTreeSet::from([burn.commitment()]));
            }
        }
        let Some((cert, _)) = self.certify(vec![burn.commitment()], unverified) else {
            return ContractResult::RejectEvent {
                reason: "burn was not certified".into(),
            };
        };
        let submit = cert.finalized_at + self.contract_verify_time(&cert);
        self.advance_to(submit);
        let r = self.src.contract_release(&burn, &cert);
        self.log.push(
            self.now,
            "RELEASE",
            json!({"event_id": burn.event_id, "result": r.code(), "locked_total": self.src.locked_total}),
        );
        r
    }

    /// Minted supply never exceeds the escrow.
    pub fn is_conserved(&self) -> bool {
        self.dst.minted_total <= self.src.locked_total
    }

    /// Key demand on each link from the background streams routed over it.
    pub fn link_loads(&self) -> Vec<LinkLoad> {
        let per_stream = traffic_demand_bps(self.config.traffic_bps(), self.config.packet_bits);
        let mut demand: BTreeMap<LinkId, f64> = BTreeMap::new();
        for &(a, b) in &self.bg.channels {
            if let Some(r) = self.network.route(a, b) {
                for h in &r.hops {
                    *demand.entry(*h).or_default() += per_stream;
                }
            }
        }
        self.network
            .links()
            .iter()
            .map(|l| {
                let d = demand.get(&l.id).copied().unwrap_or(0.0);
                LinkLoad {
                    link: l.id,
                    endpoints: l.endpoints(),
                    distance_km: l.config.distance_km,
                    rate_bps: l.rate_bps(),
                    demand_bps: d,
                    sustainable: sustainability_check(l.rate_bps(), d),
                }
            })
            .collect()
    }

    /// Both security conditions: every loaded link generates key faster than
    /// it is consumed, and every certificate carries quorum weight.
    pub fn dual_condition(&self) -> bool {
        self.link_loads().iter().all(|l| l.demand_bps == 0.0 || l.sustainable)
            && self.heights.iter().filter(|h| h.finalized_at.is_some()).all(|h| h.certificate_valid && h.proof_weight >= h.threshold)
    }

    pub fn finish_log(&mut self) -> &EventLog {
        self.flush_background_records();
        self.log.finish();
        &self.log
    }
}

/// The key provider blamed for a lost message: the owner of a downed link on
/// the route, or of a downed link at either end when no route is left.
fn down_provider(net: &QkdNetwork, from: ValidatorId, to: ValidatorId) -> Option<ValidatorId> {
    if let Some(r) = net.route(from, to) {
        if let Some(p) = r.hops.iter().filter_map(|h| net.link(*h)).find_map(|l| l.down_by()) {
            return Some(p);
        }
    }
    net.links()
        .iter()
        .filter(|l| l.connects(from) || l.connects(to))
        .find_map(|l| l.down_by())
}
