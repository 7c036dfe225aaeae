//! Scripted attacks, one per threat class, each run against a live
//! [`BridgeSystem`] and judged by the defense that fired.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::chain::{verify_lock_event, ContractResult, CrossChainEvent, EventKind, MerkleProof, Side};
use crate::consensus::{Behavior, FinalityCertificate, Proposal};
use crate::custody::{
    aggregate_proof, CustodyError, MockScheme, Signature, SigningAuthority,
};
use crate::eventlog::{EventLog, LogRecord};
use crate::harness::{ConfigError, ScenarioConfig};
use crate::hash::{hash_parts, Digest};
use crate::qkd::{KeyBlock, SealedMessage, MAC_KEY_BITS};
use crate::registry::{max_faults, Phase, Role, Status, VoteStatement};
use crate::system::BridgeSystem;
use crate::types::ValidatorId;

mod otp;

pub use otp::{harvest_then_decrypt, monobit_deviation, HarvestReport, MONOBIT_MIN_BITS, MONOBIT_TOLERANCE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AttackKind {
    KeyTheft,
    ProofForgery,
    Replay,
    HarvestNowDecryptLater,
    DoubleSign,
    QkdDos,
    MinorityCollusion,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::KeyTheft,
        AttackKind::ProofForgery,
        AttackKind::Replay,
        AttackKind::HarvestNowDecryptLater,
        AttackKind::DoubleSign,
        AttackKind::QkdDos,
        AttackKind::MinorityCollusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::KeyTheft => "KEY_THEFT",
            AttackKind::ProofForgery => "PROOF_FORGERY",
            AttackKind::Replay => "REPLAY",
            AttackKind::HarvestNowDecryptLater => "HARVEST_NOW_DECRYPT_LATER",
            AttackKind::DoubleSign => "DOUBLE_SIGN",
            AttackKind::QkdDos => "QKD_DOS",
            AttackKind::MinorityCollusion => "MINORITY_COLLUSION",
        }
    }

    /// The defense each attack is expected to run into.
    pub fn expected_mechanism(self) -> Mechanism {
        match self {
            AttackKind::KeyTheft => Mechanism::KeyExportForbidden,
            AttackKind::ProofForgery => Mechanism::RejectInvalidSignature,
            AttackKind::Replay => Mechanism::RejectReplay,
            AttackKind::HarvestNowDecryptLater => Mechanism::OtpPerfectSecrecy,
            AttackKind::DoubleSign => Mechanism::EquivocationSlashed,
            AttackKind::QkdDos => Mechanism::HubReroute,
            AttackKind::MinorityCollusion => Mechanism::RejectThreshold,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| format!("unknown attack kind {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mechanism {
    KeyExportForbidden,
    RejectInvalidSignature,
    RejectReplay,
    OtpPerfectSecrecy,
    EquivocationSlashed,
    HubReroute,
    RejectThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OutcomeFlag {
    /// The scenario exceeds the adversary's stated capabilities.
    ResearchMode,
    /// The attack succeeded as threshold semantics say it must.
    ExpectedBreach,
    /// The topology lacks what the defense relies on.
    TopologyViolation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub kind: AttackKind,
    /// Colluding validators; empty picks `f` of them.
    #[serde(default)]
    pub colluders: Vec<ValidatorId>,
    /// Hub whose links are cut; `None` picks the primary hub.
    #[serde(default)]
    pub target: Option<ValidatorId>,
    /// Grants the attacker signature forgery against any classical scheme.
    #[serde(default)]
    pub quantum_capable: bool,
}

impl AttackScenario {
    pub fn new(kind: AttackKind) -> Self {
        AttackScenario {
            kind,
            colluders: Vec::new(),
            target: None,
            quantum_capable: kind == AttackKind::ProofForgery,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub kind: AttackKind,
    pub defended: bool,
    pub mechanism: Mechanism,
    pub flags: Vec<OutcomeFlag>,
    pub detail: String,
    pub trace: Vec<LogRecord>,
}

impl AttackOutcome {
    /// Counts toward pass/fail: research-mode runs are reported but excluded.
    pub fn is_graded(&self) -> bool {
        !self.flags.contains(&OutcomeFlag::ResearchMode)
    }
}

#[derive(Debug, Error)]
pub enum AdversaryError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

struct Run<'a> {
    sys: &'a mut BridgeSystem,
    kind: AttackKind,
    start: usize,
}

impl<'a> Run<'a> {
    fn begin(sys: &'a mut BridgeSystem, scenario: &AttackScenario) -> Self {
        let start = sys.log.len();
        let now = sys.now();
        sys.log.push(now, "ATTACK_START", json!({"kind": scenario.kind, "scenario": scenario}));
        Run {
            sys,
            kind: scenario.kind,
            start,
        }
    }

    fn finish(self, defended: bool, flags: Vec<OutcomeFlag>, detail: String) -> AttackOutcome {
        let mechanism = self.kind.expected_mechanism();
        let now = self.sys.now();
        self.sys.log.push(
            now,
            "ATTACK_OUTCOME",
            json!({"kind": self.kind, "defended": defended, "mechanism": mechanism, "flags": flags, "detail": detail}),
        );
        AttackOutcome {
            kind: self.kind,
            defended,
            mechanism,
            flags,
            detail,
            trace: self.sys.log.records()[self.start..].to_vec(),
        }
    }
}

/// Runs `scenario` against `sys`. The system should be freshly built from
/// the scenario config; some attacks advance its clock by several minutes.
pub fn run_attack(
    scenario: &AttackScenario,
    sys: &mut BridgeSystem,
) -> Result<AttackOutcome, AdversaryError> {
    match scenario.kind {
        AttackKind::KeyTheft => Ok(key_theft(scenario, sys)),
        AttackKind::ProofForgery => Ok(proof_forgery(scenario, sys)),
        AttackKind::Replay => Ok(replay(scenario, sys)),
        AttackKind::HarvestNowDecryptLater => Ok(harvest(scenario, sys)),
        AttackKind::DoubleSign => Ok(double_sign(scenario, sys)),
        AttackKind::QkdDos => Ok(qkd_dos(scenario, sys)),
        AttackKind::MinorityCollusion => {
            let colluders: BTreeSet<ValidatorId> = if scenario.colluders.is_empty() {
                let f = max_faults(sys.registry.active_count()).unwrap_or(0) as usize;
                sys.registry.active_ids().into_iter().rev().take(f).collect()
            } else {
                scenario.colluders.iter().copied().collect()
            };
            let fake = fabricated_event(sys, 1);
            collusion_forge(sys, &colluders, &fake)
        }
    }
}

/// Builds a fresh system from `config` and runs one scenario against it.
pub fn run_attack_on(
    scenario: &AttackScenario,
    config: &ScenarioConfig,
    log: EventLog,
) -> Result<AttackOutcome, AdversaryError> {
    let mut sys = BridgeSystem::new(config, log)?;
    run_attack(scenario, &mut sys)
}

/// A lock event that never happened on the source chain.
fn fabricated_event(sys: &BridgeSystem, nonce: u64) -> CrossChainEvent {
    let chain_id = sys.src.chain_id.clone();
    let block_height = sys.btc.headers.tip_height() + 1;
    CrossChainEvent {
        event_id: CrossChainEvent::compute_id(&chain_id, block_height, 0, 1_000_000 + nonce),
        kind: EventKind::Lock,
        chain_id,
        amount: 1_000_000_000,
        sender: "attacker".into(),
        recipient: "attacker".into(),
        block_height,
        tx_index: 0,
        nonce: 1_000_000 + nonce,
    }
}

/// Proposal carrying `events`, signed (or not) by nobody in particular.
fn unsigned_proposal(height: u64, leader: ValidatorId, events: Vec<Digest>) -> Proposal {
    let digest = Proposal::compute_digest(height, 0, leader, &events);
    Proposal {
        height,
        round: 0,
        leader,
        events,
        digest,
        signature: Signature {
            signer: leader,
            scheme_id: crate::custody::SchemeId::MockDeterministic,
            message_digest: Digest::ZERO,
            bytes: Vec::new(),
        },
    }
}

fn precommit_statement(p: &Proposal) -> VoteStatement {
    VoteStatement {
        phase: Phase::Precommit,
        height: p.height,
        round: p.round,
        proposal_digest: p.digest,
    }
}

/// Probes every way software can reach a secret key, then tries to sign with
/// the best guesses an intruder on the host could make.
fn key_theft(scenario: &AttackScenario, sys: &mut BridgeSystem) -> AttackOutcome {
    let run = Run::begin(sys, scenario);
    let handles: Vec<_> = run.sys.handles.values().copied().collect();
    let mut leaked = 0;
    for h in &handles {
        let r = run.sys.enclave.export_secret(*h);
        let now = run.sys.now();
        run.sys.log.push(
            now,
            "KEY_EXPORT_PROBE",
            json!({"validator": h.owner, "handle": h.handle_id, "result": format!("{r:?}").split('(').next().unwrap_or_default()}),
        );
        if !matches!(r, Err(CustodyError::KeyExportForbidden)) {
            leaked += 1;
        }
    }

    // Host-side guesses: material the intruder can read outside the enclave.
    let public = MockScheme::new(run.sys.enclave.scheme().clone());
    let verifier = run.sys.enclave.verifier();
    let message = b"qlink/attacker-chosen-message";
    let mut forged = 0;
    let mut guesses = 0;
    for h in &handles {
        let pk = run.sys.enclave.public_key(*h).expect("handle from keygen");
        let candidates: Vec<Vec<u8>> = vec![
            pk.as_bytes().to_vec(),
            h.handle_id.to_be_bytes().to_vec(),
            run.sys.config.seed.to_be_bytes().to_vec(),
            hash_parts("qlink/mock-sk", &[&run.sys.config.seed.to_be_bytes(), &h.owner.to_be_bytes()]).0.to_vec(),
            format!("{:?}", run.sys.enclave).into_bytes(),
        ];
        for c in candidates {
            guesses += 1;
            let sig = Signature {
                signer: h.owner,
                scheme_id: verifier.scheme_id(),
                message_digest: crate::custody::message_digest(message),
                bytes: public.sign_with_candidate(&c, message),
            };
            if verifier.verify(&pk, message, &sig) {
                forged += 1;
            }
        }
    }
    let defended = leaked == 0 && forged == 0;
    let detail = format!(
        "{} export probes refused, {leaked} leaked; {guesses} host-side key guesses, {forged} verified",
        handles.len() - leaked
    );
    run.finish(defended, Vec::new(), detail)
}

/// An outsider fabricates a lock event with a fake inclusion proof and a
/// certificate whose signatures it made itself.
fn proof_forgery(scenario: &AttackScenario, sys: &mut BridgeSystem) -> AttackOutcome {
    let run = Run::begin(sys, scenario);
    let fake = fabricated_event(run.sys, 2);
    let k = run.sys.config.k_confirmations;
    let bogus_proof = MerkleProof {
        leaf_hash: fake.leaf(),
        siblings: vec![(Digest([0xAB; 32]), Side::Right)],
        root: run.sys.btc.headers.tip().merkle_root,
    };
    let spv_rejected = !verify_lock_event(&fake, &bogus_proof, &run.sys.btc.headers, k);
    let now = run.sys.now();
    run.sys.log.push(now, "SPV_CHECK", json!({"event_id": fake.event_id, "ok": !spv_rejected}));

    let scheme = run.sys.enclave.scheme().clone();
    let classical_forgery = scenario.quantum_capable && !scheme.is_post_quantum();
    run.sys.log.push(
        now,
        "QUANTUM_FORGERY_ATTEMPT",
        json!({"enabled": scenario.quantum_capable, "scheme": scheme.scheme_id, "post_quantum": scheme.is_post_quantum(), "forgeable": classical_forgery}),
    );

    let ids = run.sys.registry.active_ids();
    let t = run.sys.registry.threshold().unwrap_or(1) as usize;
    let proposal = unsigned_proposal(run.sys.heights.len() as u64 + 1, ids[0], vec![fake.commitment()]);
    let stmt = precommit_statement(&proposal).sign_bytes();
    let public = MockScheme::new(scheme.clone());
    let sigs: Vec<Signature> = ids
        .iter()
        .take(t.max(1))
        .map(|&v| Signature {
            signer: v,
            scheme_id: run.sys.enclave.verifier().scheme_id(),
            message_digest: crate::custody::message_digest(&stmt),
            bytes: public.sign_with_candidate(&v.to_be_bytes(), &stmt),
        })
        .collect();
    let proof = aggregate_proof(&stmt, sigs).expect("one statement");
    let cert = FinalityCertificate {
        proposal,
        proof,
        finalized_at: now,
    };
    let mint = run.sys.dst.contract_mint(&fake, &cert);
    run.sys.log.push(now, "MINT", json!({"event_id": fake.event_id, "result": mint.code()}));
    let defended = matches!(mint, ContractResult::RejectInvalidSignature { .. }) && !classical_forgery;
    let detail = format!(
        "fake inclusion proof {}; forged {t}-signer certificate: {}",
        if spv_rejected { "rejected by SPV" } else { "ACCEPTED by SPV" },
        mint.code()
    );
    run.finish(defended, Vec::new(), detail)
}

/// Completes an honest transfer, then resubmits its event and certificate.
fn replay(scenario: &AttackScenario, sys: &mut BridgeSystem) -> AttackOutcome {
    let run = Run::begin(sys, scenario);
    let report = run.sys.run_transfer();
    if !report.minted() {
        return run.finish(false, Vec::new(), "honest transfer did not mint".into());
    }
    let cert = run.sys.certificates.last().cloned().expect("minted with a certificate");
    let minted_before = run.sys.dst.minted_total;
    let second = run.sys.dst.contract_mint(&report.lock_event, &cert);
    let now = run.sys.now();
    run.sys.log.push(now, "MINT", json!({"event_id": report.lock_event.event_id, "result": second.code(), "replay": true}));
    let defended = matches!(second, ContractResult::RejectReplay) && run.sys.dst.minted_total == minted_before;
    let detail = format!("replayed mint returned {}", second.code());
    run.finish(defended, Vec::new(), detail)
}

/// Records validator traffic on every link, then tries to learn the plaintext
/// without the pads.
fn harvest(scenario: &AttackScenario, sys: &mut BridgeSystem) -> AttackOutcome {
    let run = Run::begin(sys, scenario);
    run.sys.network.enable_tap(usize::MAX);
    let target_bits = MONOBIT_MIN_BITS;
    let mut tapped_bits = 0;
    while tapped_bits < target_bits {
        run.sys.run_height(vec![hash_parts("qlink/harvest-filler", &[&run.sys.now().0.to_be_bytes()])], BTreeMap::new());
        tapped_bits = run.sys.network.tapped().iter().map(|m| m.ciphertext.len()).sum::<u64>();
        if run.sys.heights.len() > 50 {
            break;
        }
    }
    let recorded: Vec<SealedMessage> = run.sys.network.tapped().to_vec();
    let pads: BTreeMap<usize, (KeyBlock, KeyBlock)> = recorded
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let l = run.sys.network.link(m.link)?;
            let n = m.ciphertext.len();
            let pad = KeyBlock { offset: m.key_offset, length: n, bits: l.stream().bits_at(m.key_offset, n) };
            let mac = KeyBlock {
                offset: m.mac_key_offset(),
                length: MAC_KEY_BITS,
                bits: l.stream().bits_at(m.mac_key_offset(), MAC_KEY_BITS),
            };
            Some((i, (pad, mac)))
        })
        .collect();
    let report = harvest_then_decrypt(&recorded, &pads);
    let now = run.sys.now();
    run.sys.log.push(now, "HARVEST", serde_json::to_value(&report).expect("plain data"));
    let defended = report.defended();
    let detail = format!(
        "{} ciphertexts ({} bits): candidate-pad deviations {:.4}/{:.4}, control decrypted {}/{}",
        report.messages, report.bits, report.deviation_true_candidate, report.deviation_zero_candidate,
        report.control_decrypted, report.messages
    );
    run.finish(defended, Vec::new(), detail)
}

/// One validator equivocates through a height.
fn double_sign(scenario: &AttackScenario, sys: &mut BridgeSystem) -> AttackOutcome {
    let run = Run::begin(sys, scenario);
    let byz = *run.sys.handles.keys().last().expect("non-empty committee");
    run.sys.set_behavior(byz, Behavior::Equivocate);
    let mut slashed = false;
    let mut honest_cert = false;
    let mut conflicts = 0;
    for i in 0..MAX_DOUBLE_SIGN_HEIGHTS {
        let ev = hash_parts("qlink/double-sign-event", &[&(i as u64).to_be_bytes()]);
        let out = run.sys.run_height(vec![ev], BTreeMap::new());
        honest_cert |= out.result.is_ok();
        conflicts += usize::from(out.honest_conflict()) + out.constructible_digests.saturating_sub(1);
        if run.sys.registry.get(byz).is_some_and(|r| r.status == Status::Slashed) {
            slashed = true;
            break;
        }
    }
    let defended = slashed && honest_cert && conflicts == 0;
    let detail = format!(
        "{byz} equivocated: slashed={slashed}, honest certificate={honest_cert}, conflicting certificates={conflicts}"
    );
    run.finish(defended, Vec::new(), detail)
}

/// Heights run while waiting for the equivocator to be caught. Only a leader
/// turn or a vote split makes equivocation visible to honest nodes.
const MAX_DOUBLE_SIGN_HEIGHTS: usize = 8;

/// Cuts every link of the primary hub after one good height and checks that
/// consensus continues over the remaining hub.
fn qkd_dos(scenario: &AttackScenario, sys: &mut BridgeSystem) -> AttackOutcome {
    let run = Run::begin(sys, scenario);
    let hubs = run.sys.registry.active_hubs();
    let target = scenario
        .target
        .or_else(|| run.sys.registry.relay_order().first().copied())
        .or_else(|| hubs.first().copied());
    let Some(target) = target else {
        return run.finish(false, vec![OutcomeFlag::TopologyViolation], "no QKD hub to attack".into());
    };
    let redundant = hubs.iter().any(|&h| h != target);
    let mut flags = Vec::new();
    if !redundant {
        flags.push(OutcomeFlag::TopologyViolation);
    }
    let warmup = run.sys.run_height(vec![hash_parts("qlink/dos-warmup", &[])], BTreeMap::new());
    let cut = run.sys.network.sever_node(target);
    let now = run.sys.now();
    run.sys.log.push(now, "LINK_CUT", json!({"provider": target, "links": cut.iter().map(|l| l.to_string()).collect::<Vec<_>>()}));
    let after = run.sys.certify(vec![hash_parts("qlink/dos-event", &[])], BTreeMap::new());
    let disqualified = run.sys.registry.get(target).is_some_and(|r| r.status == Status::Disqualified);
    let rerouted = run.sys.log.records()[run.start..].iter().any(|r| r.kind == "HUB_REROUTE" && r.data["ok"] == true)
        || run.sys.registry.records().filter(|r| r.role == Role::Consumer).all(|r| run.sys.registry.hub_of(r.id) != Some(target));
    let defended = warmup.result.is_ok() && after.is_some() && disqualified && rerouted;
    let detail = format!(
        "cut {} links of {target}; disqualified={disqualified}, rerouted={rerouted}, consensus after cut={}",
        cut.len(),
        after.is_some()
    );
    run.finish(defended, flags, detail)
}

/// Has `colluders` sign a fabricated event and submits it for minting.
///
/// Coalitions larger than `f` are outside the adversary model; they run only
/// in research mode and are labeled, never graded.
pub fn collusion_forge(
    sys: &mut BridgeSystem,
    colluders: &BTreeSet<ValidatorId>,
    fake: &CrossChainEvent,
) -> Result<AttackOutcome, AdversaryError> {
    let n = sys.registry.active_count();
    let f = max_faults(n).unwrap_or(0);
    let mut flags = Vec::new();
    if colluders.len() as u64 > f {
        if !sys.config.research_mode {
            return Err(AdversaryError::InvalidScenario(format!(
                "{} colluders exceed f={f} for n={n}; enable research mode to run it",
                colluders.len()
            )));
        }
        flags.push(OutcomeFlag::ResearchMode);
    }
    if let Some(v) = colluders.iter().find(|v| !sys.handles.contains_key(v)) {
        return Err(AdversaryError::InvalidScenario(format!("{v} is not a validator")));
    }
    let scenario = AttackScenario {
        colluders: colluders.iter().copied().collect(),
        ..AttackScenario::new(AttackKind::MinorityCollusion)
    };
    let run = Run::begin(sys, &scenario);
    let leader = *colluders.iter().next().unwrap_or(&ValidatorId(0));
    let mut proposal = unsigned_proposal(run.sys.heights.len() as u64 + 1, leader, vec![fake.commitment()]);
    let authority: &dyn SigningAuthority = &run.sys.registry;
    if let Some(h) = run.sys.handles.get(&leader) {
        if let Ok(sig) = run.sys.enclave.sign(*h, &Proposal::sign_bytes_for(&proposal.digest), authority) {
            proposal.signature = sig;
        }
    }
    let stmt = precommit_statement(&proposal).sign_bytes();
    let mut sigs = Vec::new();
    for v in colluders {
        let h = run.sys.handles[v];
        if let Ok(sig) = run.sys.enclave.sign(h, &stmt, &run.sys.registry) {
            sigs.push(sig);
        }
    }
    let now = run.sys.now();
    let signed = sigs.len();
    let result = if sigs.is_empty() {
        ContractResult::RejectThreshold {
            weight: 0,
            threshold: run.sys.dst.threshold,
        }
    } else {
        let cert = FinalityCertificate {
            proposal,
            proof: aggregate_proof(&stmt, sigs).expect("one statement"),
            finalized_at: now,
        };
        run.sys.dst.contract_mint(fake, &cert)
    };
    run.sys.log.push(
        now,
        "MINT",
        json!({"event_id": fake.event_id, "result": result.code(), "colluders": colluders, "signatures": signed}),
    );
    let threshold = run.sys.dst.threshold;
    let breached = result.is_ok();
    let defended = matches!(result, ContractResult::RejectThreshold { .. });
    if breached && flags.contains(&OutcomeFlag::ResearchMode) {
        flags.push(OutcomeFlag::ExpectedBreach);
    }
    let detail = format!(
        "{} of {n} validators colluded (f={f}, T={threshold}): {}",
        colluders.len(),
        result.code()
    );
    Ok(run.finish(defended, flags, detail))
}
