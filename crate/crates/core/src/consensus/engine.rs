use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    cast_vote, finalize_check, select_leader, sign_vote, ConsensusError, FailureReason,
    FinalityCertificate, Message, Phase, Proposal, RoundFailure, Vote, VoteStatement, NIL,
};
use crate::custody::{Enclave, KeyHandle, Verifier};
use crate::des::EventQueue;
use crate::eventlog::EventLog;
use crate::hash::{hash_parts, Digest};
use crate::qkd::{BitString, QkdError, QkdNetwork};
use crate::registry::{MisbehaviorEvidence, Registry};
use crate::time::SimTime;
use crate::types::ValidatorId;

use super::detect_equivocation;

/// What a message transport returned for one send.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivered {
    pub payload: Vec<u8>,
    pub hops: usize,
    pub key_bits: u64,
}

/// Point-to-point carrier for consensus messages. An error means the message
/// is lost.
pub trait Transport {
    fn send(
        &mut self,
        at: SimTime,
        from: ValidatorId,
        to: ValidatorId,
        payload: &[u8],
    ) -> Result<Delivered, QkdError>;
}

/// Lossless single-hop transport that consumes no key.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdealTransport;

impl Transport for IdealTransport {
    fn send(
        &mut self,
        _at: SimTime,
        _from: ValidatorId,
        _to: ValidatorId,
        payload: &[u8],
    ) -> Result<Delivered, QkdError> {
        Ok(Delivered {
            payload: payload.to_vec(),
            hops: 1,
            key_bits: 0,
        })
    }
}

impl Transport for QkdNetwork {
    fn send(
        &mut self,
        at: SimTime,
        from: ValidatorId,
        to: ValidatorId,
        payload: &[u8],
    ) -> Result<Delivered, QkdError> {
        self.advance_to(at);
        let d = self.transmit(from, to, &BitString::from_bytes(payload))?;
        Ok(Delivered {
            payload: d.plaintext.as_bytes().to_vec(),
            hops: d.hops,
            key_bits: d.key_bits,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Timing {
    pub link_delay: SimTime,
    pub sign: SimTime,
    /// Seal and open cost per hop.
    pub seal_per_hop: SimTime,
    pub aggregate: SimTime,
    /// Pause before round 0 of each height.
    pub commit_wait: SimTime,
    pub phase_timeout: SimTime,
    pub max_rounds: u32,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            link_delay: SimTime::from_millis(5),
            sign: SimTime::from_millis(10),
            seal_per_hop: SimTime(20),
            aggregate: SimTime::from_millis(1),
            commit_wait: SimTime::from_secs(1),
            phase_timeout: SimTime::from_secs(1),
            max_rounds: 5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Behavior {
    #[default]
    Honest,
    /// Sends nothing.
    Silent,
    /// As leader, sends different proposals to two halves of the honest set.
    /// Votes for every proposal it sees plus the coalition digest.
    Equivocate,
    /// Votes only for the coalition digest; as leader proposes an event no
    /// honest node has verified.
    ConflictingVote,
}

#[derive(Clone, Debug, Default)]
pub struct Participants {
    pub handles: BTreeMap<ValidatorId, KeyHandle>,
    pub behaviors: BTreeMap<ValidatorId, Behavior>,
}

impl Participants {
    pub fn honest(handles: impl IntoIterator<Item = KeyHandle>) -> Self {
        Participants {
            handles: handles.into_iter().map(|h| (h.owner, h)).collect(),
            behaviors: BTreeMap::new(),
        }
    }

    pub fn with_behavior(mut self, id: ValidatorId, b: Behavior) -> Self {
        self.behaviors.insert(id, b);
        self
    }

    pub fn behavior(&self, id: ValidatorId) -> Behavior {
        self.behaviors.get(&id).copied().unwrap_or_default()
    }
}

#[derive(Clone, Debug)]
pub struct HeightInput {
    pub height: u64,
    pub start: SimTime,
    /// Candidate events in proposal order.
    pub events: Vec<Digest>,
    /// Events a validator could not verify against its own view of the source chain.
    pub unverified: BTreeMap<ValidatorId, BTreeSet<Digest>>,
    pub seed: u64,
}

impl HeightInput {
    pub fn new(height: u64, start: SimTime, events: Vec<Digest>, seed: u64) -> Self {
        HeightInput {
            height,
            start,
            events,
            unverified: BTreeMap::new(),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportFailure {
    pub at: SimTime,
    pub from: ValidatorId,
    pub to: ValidatorId,
    pub error: String,
    pub insufficient_key: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub node: ValidatorId,
    pub round: u32,
    pub digest: Digest,
    pub at: SimTime,
}

#[derive(Clone, Debug)]
pub struct HeightOutcome {
    pub height: u64,
    pub result: Result<FinalityCertificate, RoundFailure>,
    pub started_at: SimTime,
    pub ended_at: SimTime,
    pub rounds: u32,
    pub leaders: Vec<ValidatorId>,
    pub decisions: Vec<Decision>,
    /// Every precommit signed during the height, by any validator.
    pub precommits_emitted: Vec<Vote>,
    /// Distinct votes delivered to honest validators.
    pub observed_votes: Vec<Vote>,
    pub evidence: Vec<MisbehaviorEvidence>,
    /// Number of distinct digests for which a quorum of valid precommits exists.
    pub constructible_digests: usize,
    pub refusals: u64,
    pub messages_sent: u64,
    pub messages_lost: u64,
    pub bytes_sent: u64,
    pub key_bits: u64,
    pub transport_failures: Vec<TransportFailure>,
    pub signatures: u64,
}

impl HeightOutcome {
    pub fn latency(&self) -> Option<SimTime> {
        self.result
            .as_ref()
            .ok()
            .map(|c| c.finalized_at.saturating_sub(self.started_at))
    }

    /// True if two honest validators decided different digests.
    pub fn honest_conflict(&self) -> bool {
        let ds: BTreeSet<_> = self.decisions.iter().map(|d| d.digest).collect();
        ds.len() > 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Step {
    Propose,
    Prevote,
    Precommit,
}

enum Ev {
    Start { node: ValidatorId, round: u32 },
    ByzStart { node: ValidatorId, round: u32 },
    Timeout { node: ValidatorId, round: u32, step: Step },
    Send { from: ValidatorId, to: Vec<ValidatorId>, msg: Message },
    Deliver { to: ValidatorId, bytes: Vec<u8> },
}

#[derive(Default)]
struct Tally {
    signers: BTreeSet<ValidatorId>,
    weight: u64,
    votes: Vec<Vote>,
}

impl Tally {
    fn add(&mut self, v: &Vote, weight: u64) {
        if self.signers.insert(v.signer) {
            self.weight += weight;
            self.votes.push(v.clone());
        }
    }
}

struct Node {
    round: u32,
    step: Step,
    locked: Option<Digest>,
    done: bool,
    verified: BTreeSet<Digest>,
    proposals: BTreeMap<Digest, Proposal>,
    round_proposal: BTreeMap<u32, Digest>,
    prevotes: BTreeMap<(u32, Digest), Tally>,
    precommits: BTreeMap<(u32, Digest), Tally>,
}

struct Engine<'a> {
    input: &'a HeightInput,
    parts: &'a Participants,
    registry: &'a Registry,
    enclave: &'a mut Enclave,
    transport: &'a mut dyn Transport,
    timing: &'a Timing,
    log: &'a mut EventLog,
    verifier: Verifier,
    threshold: u64,
    active: Vec<ValidatorId>,
    committee: Vec<ValidatorId>,
    honest: BTreeMap<ValidatorId, Node>,
    byz_started: BTreeSet<(ValidatorId, u32)>,
    byz_voted: BTreeSet<(ValidatorId, u32, Phase, Digest)>,
    queue: EventQueue<Ev>,
    certificate: Option<FinalityCertificate>,
    decisions: Vec<Decision>,
    max_round: u32,
    leaders: BTreeMap<u32, ValidatorId>,
    precommits_emitted: Vec<Vote>,
    observed: Vec<Vote>,
    observed_keys: BTreeSet<(ValidatorId, VoteStatement)>,
    refusals: u64,
    messages_sent: u64,
    messages_lost: u64,
    bytes_sent: u64,
    key_bits: u64,
    failures: Vec<TransportFailure>,
}

/// Runs one height to decision or round exhaustion.
///
/// Honest validators follow a two-phase lock rule: once a validator has
/// precommitted a digest at this height it never precommits another. A node
/// decides when it holds precommits of quorum weight for one `(round, digest)`
/// and the matching proposal. The returned certificate is the first honest
/// decision, built from the first quorum of precommits that node received.
pub fn run_round(
    input: &HeightInput,
    participants: &Participants,
    registry: &Registry,
    enclave: &mut Enclave,
    transport: &mut dyn Transport,
    timing: &Timing,
    log: &mut EventLog,
) -> HeightOutcome {
    let sigs_before = enclave.signatures_issued();
    let active = registry.active_ids();
    let committee: Vec<ValidatorId> = active
        .iter()
        .copied()
        .filter(|v| participants.handles.contains_key(v))
        .collect();
    let threshold = match registry.threshold() {
        Ok(t) if !committee.is_empty() => t,
        _ => {
            return empty_outcome(input, enclave.signatures_issued() - sigs_before);
        }
    };
    let verifier = enclave.verifier();
    let mut honest = BTreeMap::new();
    for &v in &committee {
        if participants.behavior(v) == Behavior::Honest {
            let skip = input.unverified.get(&v);
            let verified = input
                .events
                .iter()
                .copied()
                .filter(|e| skip.is_none_or(|s| !s.contains(e)))
                .collect();
            honest.insert(
                v,
                Node {
                    round: 0,
                    step: Step::Propose,
                    locked: None,
                    done: false,
                    verified,
                    proposals: BTreeMap::new(),
                    round_proposal: BTreeMap::new(),
                    prevotes: BTreeMap::new(),
                    precommits: BTreeMap::new(),
                },
            );
        }
    }
    let e = Engine {
        input,
        parts: participants,
        registry,
        enclave,
        transport,
        timing,
        log,
        verifier,
        threshold,
        active,
        committee,
        honest,
        byz_started: BTreeSet::new(),
        byz_voted: BTreeSet::new(),
        queue: EventQueue::new(),
        certificate: None,
        decisions: Vec::new(),
        max_round: 0,
        leaders: BTreeMap::new(),
        precommits_emitted: Vec::new(),
        observed: Vec::new(),
        observed_keys: BTreeSet::new(),
        refusals: 0,
        messages_sent: 0,
        messages_lost: 0,
        bytes_sent: 0,
        key_bits: 0,
        failures: Vec::new(),
    };
    e.run(sigs_before)
}

fn empty_outcome(input: &HeightInput, signatures: u64) -> HeightOutcome {
    HeightOutcome {
        height: input.height,
        result: Err(RoundFailure {
            height: input.height,
            rounds_attempted: 0,
            reason: FailureReason::EmptyCommittee,
            diagnosis: "no active validator holds a signing key".into(),
        }),
        started_at: input.start,
        ended_at: input.start,
        rounds: 0,
        leaders: Vec::new(),
        decisions: Vec::new(),
        precommits_emitted: Vec::new(),
        observed_votes: Vec::new(),
        evidence: Vec::new(),
        constructible_digests: 0,
        refusals: 0,
        messages_sent: 0,
        messages_lost: 0,
        bytes_sent: 0,
        key_bits: 0,
        transport_failures: Vec::new(),
        signatures,
    }
}

impl Engine<'_> {
    fn run(mut self, sigs_before: u64) -> HeightOutcome {
        let t0 = self.input.start + self.timing.commit_wait;
        let honest: Vec<_> = self.honest.keys().copied().collect();
        for v in honest {
            self.queue.schedule(t0, Ev::Start { node: v, round: 0 });
        }
        let mut ended_at = t0;
        while let Some((now, ev)) = self.queue.pop() {
            ended_at = now;
            match ev {
                Ev::Start { node, round } => self.start(node, round, now),
                Ev::ByzStart { node, round } => self.byz_start(node, round, now),
                Ev::Timeout { node, round, step } => self.timeout(node, round, step, now),
                Ev::Send { from, to, msg } => self.send(from, &to, &msg, now),
                Ev::Deliver { to, bytes } => self.deliver(to, &bytes, now),
            }
            if self.honest.values().all(|n| n.done) {
                break;
            }
        }
        if let Some(c) = &self.certificate {
            ended_at = c.finalized_at;
        }
        let evidence = detect_equivocation(&self.observed);
        let constructible = self.constructible_digests();
        let rounds = self.max_round + 1;
        let result = match self.certificate.take() {
            Some(c) => Ok(c),
            None => {
                let keyless = self.failures.iter().any(|f| f.insufficient_key);
                let reason = if keyless {
                    FailureReason::InsufficientKey
                } else {
                    FailureReason::LivenessLost
                };
                let diagnosis = format!(
                    "no quorum of {} after {} rounds; {} messages lost",
                    self.threshold, rounds, self.messages_lost
                );
                if self.log.is_enabled() {
                    self.log.push(
                        ended_at,
                        "ROUND_FAILURE",
                        json!({"height": self.input.height, "rounds": rounds, "reason": reason, "diagnosis": diagnosis}),
                    );
                }
                Err(RoundFailure {
                    height: self.input.height,
                    rounds_attempted: rounds,
                    reason,
                    diagnosis,
                })
            }
        };
        HeightOutcome {
            height: self.input.height,
            result,
            started_at: self.input.start,
            ended_at,
            rounds,
            leaders: self.leaders.into_values().collect(),
            decisions: self.decisions,
            precommits_emitted: self.precommits_emitted,
            observed_votes: self.observed,
            evidence,
            constructible_digests: constructible,
            refusals: self.refusals,
            messages_sent: self.messages_sent,
            messages_lost: self.messages_lost,
            bytes_sent: self.bytes_sent,
            key_bits: self.key_bits,
            transport_failures: self.failures,
            signatures: self.enclave.signatures_issued() - sigs_before,
        }
    }

    fn leader(&mut self, round: u32) -> ValidatorId {
        let l = select_leader(self.input.height, round, &self.active, self.input.seed)
            .expect("committee is non-empty");
        self.leaders.insert(round, l);
        l
    }

    fn handle(&self, v: ValidatorId) -> KeyHandle {
        self.parts.handles[&v]
    }

    fn others(&self, v: ValidatorId) -> Vec<ValidatorId> {
        self.committee.iter().copied().filter(|&x| x != v).collect()
    }

    fn weight(&self, v: ValidatorId) -> u64 {
        self.registry.vote_weight(v)
    }

    fn sign_proposal(&mut self, leader: ValidatorId, round: u32, events: Vec<Digest>) -> Option<Proposal> {
        let digest = Proposal::compute_digest(self.input.height, round, leader, &events);
        let signature = self
            .enclave
            .sign(self.handle(leader), &Proposal::sign_bytes_for(&digest), self.registry)
            .ok()?;
        Some(Proposal {
            height: self.input.height,
            round,
            leader,
            events,
            digest,
            signature,
        })
    }

    /// Schedules `vote` for broadcast after the signing delay and keeps a copy
    /// of precommits for the safety audit.
    fn emit_vote(&mut self, from: ValidatorId, vote: Vote, now: SimTime) {
        if vote.phase() == Phase::Precommit {
            self.precommits_emitted.push(vote.clone());
        }
        let mut to = self.others(from);
        to.push(from);
        self.queue.schedule(
            now + self.timing.sign,
            Ev::Send {
                from,
                to,
                msg: Message::Vote(vote),
            },
        );
    }

    fn honest_vote(&mut self, v: ValidatorId, phase: Phase, digest: Digest, now: SimTime) {
        let round = self.honest[&v].round;
        let statement = VoteStatement {
            phase,
            height: self.input.height,
            round,
            proposal_digest: digest,
        };
        let vote = if digest == NIL {
            sign_vote(self.handle(v), statement, self.enclave, self.registry).map_err(ConsensusError::from)
        } else {
            let p = &self.honest[&v].proposals[&digest];
            cast_vote(
                self.handle(v),
                phase,
                p,
                &self.honest[&v].verified,
                self.enclave,
                self.registry,
            )
        };
        match vote {
            Ok(vote) => self.emit_vote(v, vote, now),
            Err(ConsensusError::NoLocalVerification { .. }) => {
                self.refusals += 1;
                if self.log.is_enabled() {
                    self.log.push(
                        now,
                        "VOTE_REFUSED",
                        json!({"node": v, "height": self.input.height, "round": round, "digest": digest}),
                    );
                }
                self.honest_vote(v, phase, NIL, now);
            }
            Err(_) => {}
        }
    }

    fn start(&mut self, v: ValidatorId, round: u32, now: SimTime) {
        let node = self.honest.get_mut(&v).unwrap();
        node.round = round;
        node.step = Step::Propose;
        if round > self.max_round || (round == 0 && self.leaders.is_empty()) {
            self.max_round = self.max_round.max(round);
            let leader = self.leader(round);
            if self.log.is_enabled() {
                self.log.push(
                    now,
                    "ROUND_START",
                    json!({"height": self.input.height, "round": round, "leader": leader}),
                );
            }
        }
        let byz: Vec<_> = self
            .committee
            .iter()
            .copied()
            .filter(|&b| self.parts.behavior(b) != Behavior::Honest)
            .collect();
        for b in byz {
            if !self.byz_started.contains(&(b, round)) {
                self.queue.schedule(now, Ev::ByzStart { node: b, round });
            }
        }
        let leader = self.leader(round);
        if leader == v {
            let node = &self.honest[&v];
            let events: Vec<Digest> = self
                .input
                .events
                .iter()
                .copied()
                .filter(|e| node.verified.contains(e))
                .collect();
            if !events.is_empty() {
                if let Some(p) = self.sign_proposal(v, round, events) {
                    let mut to = self.others(v);
                    to.push(v);
                    self.queue.schedule(
                        now + self.timing.sign,
                        Ev::Send {
                            from: v,
                            to,
                            msg: Message::Proposal(p),
                        },
                    );
                }
            }
        }
        self.queue.schedule(
            now + self.timing.phase_timeout,
            Ev::Timeout {
                node: v,
                round,
                step: Step::Propose,
            },
        );
        self.try_prevote(v, now);
        self.check(v, now);
    }

    fn try_prevote(&mut self, v: ValidatorId, now: SimTime) {
        let node = &self.honest[&v];
        if node.done || node.step != Step::Propose {
            return;
        }
        if let Some(&d) = node.round_proposal.get(&node.round) {
            self.enter_prevote(v, d, now);
        }
    }

    fn enter_prevote(&mut self, v: ValidatorId, digest: Digest, now: SimTime) {
        let node = self.honest.get_mut(&v).unwrap();
        node.step = Step::Prevote;
        let round = node.round;
        self.honest_vote(v, Phase::Prevote, digest, now);
        self.queue.schedule(
            now + self.timing.phase_timeout,
            Ev::Timeout {
                node: v,
                round,
                step: Step::Prevote,
            },
        );
    }

    fn enter_precommit(&mut self, v: ValidatorId, digest: Digest, now: SimTime) {
        let node = self.honest.get_mut(&v).unwrap();
        node.step = Step::Precommit;
        if digest != NIL {
            node.locked = Some(digest);
        }
        let round = node.round;
        self.honest_vote(v, Phase::Precommit, digest, now);
        self.queue.schedule(
            now + self.timing.phase_timeout,
            Ev::Timeout {
                node: v,
                round,
                step: Step::Precommit,
            },
        );
    }

    fn advance(&mut self, v: ValidatorId, now: SimTime) {
        let node = self.honest.get_mut(&v).unwrap();
        if node.round + 1 >= self.timing.max_rounds {
            node.done = true;
        } else {
            let r = node.round + 1;
            self.start(v, r, now);
        }
    }

    fn timeout(&mut self, v: ValidatorId, round: u32, step: Step, now: SimTime) {
        let Some(node) = self.honest.get(&v) else {
            return;
        };
        if node.done || node.round != round || node.step != step {
            return;
        }
        match step {
            Step::Propose => self.enter_prevote(v, NIL, now),
            Step::Prevote => self.enter_precommit(v, NIL, now),
            Step::Precommit => self.advance(v, now),
        }
        self.check(v, now);
    }

    /// Applies the quorum rules after any state change.
    fn check(&mut self, v: ValidatorId, now: SimTime) {
        let t = self.threshold;
        let node = &self.honest[&v];
        if node.done {
            return;
        }
        let decided = node
            .precommits
            .iter()
            .find(|((_, d), tally)| *d != NIL && tally.weight >= t && node.proposals.contains_key(d))
            .map(|(&(r, d), _)| (r, d));
        if let Some((r, d)) = decided {
            self.decide(v, r, d, now);
            return;
        }
        let r = node.round;
        match node.step {
            Step::Prevote => {
                let quorum = node
                    .prevotes
                    .range((r, Digest::ZERO)..=(r, Digest([0xff; 32])))
                    .find(|(_, tally)| tally.weight >= t)
                    .map(|(&(_, d), _)| d);
                match quorum {
                    Some(d) if d != NIL && node.proposals.contains_key(&d) => {
                        let ok = node.locked.is_none_or(|l| l == d);
                        self.enter_precommit(v, if ok { d } else { NIL }, now);
                        self.check(v, now);
                    }
                    Some(d) if d == NIL => {
                        self.enter_precommit(v, NIL, now);
                        self.check(v, now);
                    }
                    _ => {}
                }
            }
            Step::Precommit => {
                if node.precommits.get(&(r, NIL)).is_some_and(|t| t.weight >= self.threshold) {
                    self.advance(v, now);
                }
            }
            Step::Propose => {}
        }
    }

    fn decide(&mut self, v: ValidatorId, round: u32, digest: Digest, now: SimTime) {
        let node = self.honest.get_mut(&v).unwrap();
        node.done = true;
        self.decisions.push(Decision {
            node: v,
            round,
            digest,
            at: now,
        });
        if self.log.is_enabled() {
            self.log.push(
                now,
                "DECIDED",
                json!({"node": v, "height": self.input.height, "round": round, "digest": digest}),
            );
        }
        if self.certificate.is_some() {
            return;
        }
        let node = &self.honest[&v];
        let tally = &node.precommits[&(round, digest)];
        let mut minimal = Vec::new();
        let mut w = 0;
        for vote in &tally.votes {
            if w >= self.threshold {
                break;
            }
            w += self.registry.vote_weight(vote.signer);
            minimal.push(vote.clone());
        }
        let proof = finalize_check(&minimal, self.registry, self.threshold, &self.verifier)
            .expect("tally holds verified precommits of quorum weight");
        let cert = FinalityCertificate {
            proposal: node.proposals[&digest].clone(),
            proof,
            finalized_at: now + self.timing.aggregate,
        };
        if self.log.is_enabled() {
            self.log.push(
                cert.finalized_at,
                "FINALIZED",
                json!({
                    "height": self.input.height,
                    "round": round,
                    "digest": digest,
                    "events": cert.proposal.events.len(),
                    "signers": cert.proof.signers().collect::<Vec<_>>(),
                    "proof_bytes": cert.proof.size_bytes,
                }),
            );
        }
        self.certificate = Some(cert);
    }

    fn send(&mut self, from: ValidatorId, to: &[ValidatorId], msg: &Message, now: SimTime) {
        let bytes = msg.encode();
        let round = match msg {
            Message::Proposal(p) => p.round,
            Message::Vote(v) => v.statement.round,
        };
        for &dest in to {
            if dest == from {
                self.queue.schedule(
                    now,
                    Ev::Deliver {
                        to: dest,
                        bytes: bytes.clone(),
                    },
                );
                continue;
            }
            self.messages_sent += 1;
            self.bytes_sent += bytes.len() as u64;
            match self.transport.send(now, from, dest, &bytes) {
                Ok(d) => {
                    self.key_bits += d.key_bits;
                    if self.log.is_enabled() {
                        self.log.push(
                            now,
                            "MSG",
                            json!({"kind": msg.kind(), "from": from, "to": dest, "round": round, "bytes": bytes.len(), "hops": d.hops, "key_bits": d.key_bits}),
                        );
                    }
                    let at = now + self.timing.link_delay + SimTime(self.timing.seal_per_hop.0 * d.hops as u64);
                    self.queue.schedule(
                        at,
                        Ev::Deliver {
                            to: dest,
                            bytes: d.payload,
                        },
                    );
                }
                Err(err) => {
                    self.messages_lost += 1;
                    if self.log.is_enabled() {
                        self.log.push(
                            now,
                            "MSG_LOST",
                            json!({"kind": msg.kind(), "from": from, "to": dest, "round": round, "error": err.to_string()}),
                        );
                    }
                    self.failures.push(TransportFailure {
                        at: now,
                        from,
                        to: dest,
                        insufficient_key: matches!(err, QkdError::InsufficientKey { .. }),
                        error: err.to_string(),
                    });
                }
            }
        }
    }

    fn deliver(&mut self, to: ValidatorId, bytes: &[u8], now: SimTime) {
        let Ok(msg) = Message::decode(bytes) else {
            return;
        };
        if self.honest.contains_key(&to) {
            match msg {
                Message::Proposal(p) => self.on_proposal(to, p, now),
                Message::Vote(v) => self.on_vote(to, v, now),
            }
        } else if let Message::Proposal(p) = msg {
            if self.parts.behavior(to) == Behavior::Equivocate && p.height == self.input.height {
                self.byz_vote_both(to, p.round, p.digest, now);
            }
        }
    }

    fn proposal_is_valid(&mut self, p: &Proposal) -> bool {
        if p.height != self.input.height
            || p.events.is_empty()
            || p.has_duplicate_events()
            || !p.digest_is_bound()
            || p.signature.signer != p.leader
            || self.leader(p.round) != p.leader
        {
            return false;
        }
        self.registry.get(p.leader).is_some_and(|r| {
            self.verifier
                .verify(&r.public_key, &Proposal::sign_bytes_for(&p.digest), &p.signature)
        })
    }

    fn on_proposal(&mut self, v: ValidatorId, p: Proposal, now: SimTime) {
        if self.honest[&v].done || !self.proposal_is_valid(&p) {
            return;
        }
        let node = self.honest.get_mut(&v).unwrap();
        node.round_proposal.entry(p.round).or_insert(p.digest);
        node.proposals.entry(p.digest).or_insert(p);
        self.try_prevote(v, now);
        self.check(v, now);
    }

    fn on_vote(&mut self, v: ValidatorId, vote: Vote, now: SimTime) {
        if vote.statement.height != self.input.height || !vote.verify(self.registry, &self.verifier) {
            return;
        }
        if self.observed_keys.insert((vote.signer, vote.statement)) {
            self.observed.push(vote.clone());
        }
        if self.honest[&v].done {
            return;
        }
        let w = self.weight(vote.signer);
        let key = (vote.statement.round, vote.statement.proposal_digest);
        let node = self.honest.get_mut(&v).unwrap();
        let tallies = match vote.phase() {
            Phase::Prevote => &mut node.prevotes,
            Phase::Precommit => &mut node.precommits,
        };
        tallies.entry(key).or_default().add(&vote, w);
        self.check(v, now);
    }

    fn fabricated_events(&self, round: u32) -> Vec<Digest> {
        let mut events = self.input.events.clone();
        events.push(hash_parts(
            "qlink/fabricated-event",
            &[&self.input.height.to_be_bytes(), &round.to_be_bytes()],
        ));
        events
    }

    /// Second proposal an equivocating leader shows: drops the last event, or
    /// adds a fabricated one when there is only one.
    fn split_events(&self, round: u32) -> Vec<Digest> {
        if self.input.events.len() >= 2 {
            self.input.events[..self.input.events.len() - 1].to_vec()
        } else {
            self.fabricated_events(round)
        }
    }

    fn coalition_digest(&mut self, round: u32) -> Digest {
        let leader = self.leader(round);
        let events = if self.parts.behavior(leader) == Behavior::Equivocate {
            self.split_events(round)
        } else {
            self.fabricated_events(round)
        };
        Proposal::compute_digest(self.input.height, round, leader, &events)
    }

    fn byz_vote(&mut self, b: ValidatorId, round: u32, phase: Phase, digest: Digest, now: SimTime) {
        if !self.byz_voted.insert((b, round, phase, digest)) {
            return;
        }
        let statement = VoteStatement {
            phase,
            height: self.input.height,
            round,
            proposal_digest: digest,
        };
        if let Ok(vote) = sign_vote(self.handle(b), statement, self.enclave, self.registry) {
            self.emit_vote(b, vote, now);
        }
    }

    fn byz_vote_both(&mut self, b: ValidatorId, round: u32, digest: Digest, now: SimTime) {
        self.byz_vote(b, round, Phase::Prevote, digest, now);
        self.byz_vote(b, round, Phase::Precommit, digest, now);
    }

    fn byz_start(&mut self, b: ValidatorId, round: u32, now: SimTime) {
        if !self.byz_started.insert((b, round)) {
            return;
        }
        let behavior = self.parts.behavior(b);
        if behavior == Behavior::Silent {
            return;
        }
        let leader = self.leader(round);
        if leader == b {
            let honest: Vec<ValidatorId> = self.honest.keys().copied().collect();
            match behavior {
                Behavior::Equivocate => {
                    let mut order = honest;
                    let key = hash_parts(
                        "qlink/equivocation-split",
                        &[
                            &self.input.seed.to_be_bytes(),
                            &self.input.height.to_be_bytes(),
                            &round.to_be_bytes(),
                        ],
                    );
                    order.shuffle(&mut ChaCha8Rng::from_seed(key.0));
                    let half = order.len().div_ceil(2);
                    let a = self.sign_proposal(b, round, self.input.events.clone());
                    let bp = self.sign_proposal(b, round, self.split_events(round));
                    for (p, group) in [(a, order[..half].to_vec()), (bp, order[half..].to_vec())] {
                        if let Some(p) = p {
                            self.byz_vote_both(b, round, p.digest, now);
                            self.queue.schedule(
                                now + self.timing.sign,
                                Ev::Send {
                                    from: b,
                                    to: group,
                                    msg: Message::Proposal(p),
                                },
                            );
                        }
                    }
                }
                _ => {
                    if let Some(p) = self.sign_proposal(b, round, self.fabricated_events(round)) {
                        self.queue.schedule(
                            now + self.timing.sign,
                            Ev::Send {
                                from: b,
                                to: honest,
                                msg: Message::Proposal(p),
                            },
                        );
                    }
                }
            }
        }
        let x = self.coalition_digest(round);
        self.byz_vote_both(b, round, x, now);
    }

    fn constructible_digests(&self) -> usize {
        let mut tallies: BTreeMap<(u32, Digest), Tally> = BTreeMap::new();
        for v in &self.precommits_emitted {
            if v.is_nil() || !v.verify(self.registry, &self.verifier) {
                continue;
            }
            let w = self.weight(v.signer);
            tallies
                .entry((v.statement.round, v.statement.proposal_digest))
                .or_default()
                .add(v, w);
        }
        let digests: BTreeSet<Digest> = tallies
            .iter()
            .filter(|(_, t)| t.weight >= self.threshold)
            .map(|(&(_, d), _)| d)
            .collect();
        digests.len()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::custody::{MockScheme, SignatureScheme};
    use crate::registry::{QuorumMode, Role, Status, ValidatorRecord};

    fn setup(n: u64, mode: QuorumMode) -> (Registry, Enclave, Vec<KeyHandle>) {
        let mut enclave = Enclave::new(Arc::new(MockScheme::new(SignatureScheme::mock())), 5);
        let mut registry = Registry::new(mode, Vec::<String>::new());
        let mut handles = Vec::new();
        for i in 0..n {
            let (h, public_key) = enclave.keygen(ValidatorId(i));
            registry
                .register_validator(ValidatorRecord {
                    id: ValidatorId(i),
                    public_key,
                    weight: 1,
                    role: Role::Consumer,
                    certificate: None,
                    status: Status::Active,
                })
                .unwrap();
            handles.push(h);
        }
        (registry, enclave, handles)
    }

    fn events(k: u8) -> Vec<Digest> {
        (1..=k).map(|i| Digest([i; 32])).collect()
    }

    fn run(
        registry: &Registry,
        enclave: &mut Enclave,
        parts: &Participants,
        input: &HeightInput,
    ) -> HeightOutcome {
        run_round(
            input,
            parts,
            registry,
            enclave,
            &mut IdealTransport,
            &Timing::default(),
            &mut EventLog::disabled(),
        )
    }

    #[test]
    fn fault_free_four_nodes() {
        let (registry, mut enclave, handles) = setup(4, QuorumMode::WeightSupermajority);
        let parts = Participants::honest(handles);
        let input = HeightInput::new(1, SimTime::ZERO, events(2), 9);
        let out = run(&registry, &mut enclave, &parts, &input);
        let cert = out.result.as_ref().unwrap();
        assert_eq!(cert.proof.len(), 3);
        assert!(cert.verify(&registry, 3, &enclave.verifier()).is_ok());
        let lat = out.latency().unwrap().as_secs_f64();
        assert!((1.0..=3.0).contains(&lat), "latency {lat}");
        assert_eq!(out.rounds, 1);
        assert_eq!(out.decisions.len(), 4);
        assert_eq!(out.constructible_digests, 1);
        assert!(out.evidence.is_empty());
        // proposal to 3 peers, then 4 nodes x 2 phases x 3 peers
        assert_eq!(out.messages_sent, 27);
    }

    #[test]
    fn deterministic_replay() {
        let (registry, mut e1, h1) = setup(7, QuorumMode::WeightSupermajority);
        let (_, mut e2, h2) = setup(7, QuorumMode::WeightSupermajority);
        let p1 = Participants::honest(h1).with_behavior(ValidatorId(3), Behavior::Equivocate);
        let p2 = Participants::honest(h2).with_behavior(ValidatorId(3), Behavior::Equivocate);
        let input = HeightInput::new(4, SimTime::from_secs(10), events(3), 1);
        let a = run(&registry, &mut e1, &p1, &input);
        let b = run(&registry, &mut e2, &p2, &input);
        assert_eq!(a.result, b.result);
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(a.ended_at, b.ended_at);
    }

    #[test]
    fn two_silent_of_four_lose_liveness() {
        let (registry, mut enclave, handles) = setup(4, QuorumMode::WeightSupermajority);
        let parts = Participants::honest(handles)
            .with_behavior(ValidatorId(1), Behavior::Silent)
            .with_behavior(ValidatorId(2), Behavior::Silent);
        let input = HeightInput::new(1, SimTime::ZERO, events(1), 3);
        let out = run(&registry, &mut enclave, &parts, &input);
        let fail = out.result.unwrap_err();
        assert_eq!(fail.reason, FailureReason::LivenessLost);
        assert_eq!(fail.rounds_attempted, 5);
        assert!(out.decisions.is_empty());
    }

    #[test]
    fn one_silent_of_four_still_finalizes() {
        let (registry, mut enclave, handles) = setup(4, QuorumMode::WeightSupermajority);
        for h in 0..8 {
            let parts = Participants::honest(handles.clone()).with_behavior(ValidatorId(0), Behavior::Silent);
            let input = HeightInput::new(h, SimTime::ZERO, events(1), 3);
            let out = run(&registry, &mut enclave, &parts, &input);
            assert!(out.result.is_ok(), "height {h}");
        }
    }

    #[test]
    fn byzantine_minority_never_forks() {
        for behavior in [Behavior::Equivocate, Behavior::ConflictingVote] {
            let (registry, mut enclave, handles) = setup(7, QuorumMode::WeightSupermajority);
            for h in 0..14 {
                let parts = Participants::honest(handles.clone())
                    .with_behavior(ValidatorId(h % 7), behavior)
                    .with_behavior(ValidatorId((h + 3) % 7), behavior);
                let input = HeightInput::new(h, SimTime::ZERO, events(3), 77);
                let out = run(&registry, &mut enclave, &parts, &input);
                assert!(out.constructible_digests <= 1, "{behavior:?} height {h}");
                assert!(!out.honest_conflict());
                assert!(out.result.is_ok(), "{behavior:?} height {h}");
            }
        }
    }

    #[test]
    fn equivocating_leader_is_detected() {
        let (registry, mut enclave, handles) = setup(4, QuorumMode::WeightSupermajority);
        let h = (0..100)
            .find(|&h| select_leader(h, 0, &registry.active_ids(), 2).unwrap() == ValidatorId(1))
            .unwrap();
        let parts = Participants::honest(handles).with_behavior(ValidatorId(1), Behavior::Equivocate);
        let input = HeightInput::new(h, SimTime::ZERO, events(2), 2);
        let out = run(&registry, &mut enclave, &parts, &input);
        assert!(out.constructible_digests <= 1);
        assert!(!out.evidence.is_empty());
        assert!(out.evidence.iter().all(|e| e.accused == ValidatorId(1)));
        let mut reg = registry.clone();
        for ev in &out.evidence {
            reg.handle_evidence(ev, &enclave.verifier()).unwrap();
        }
        assert!(!reg.is_active(ValidatorId(1)));
    }

    #[test]
    fn unverified_event_is_refused() {
        let (registry, mut enclave, handles) = setup(4, QuorumMode::WeightSupermajority);
        let mut input = HeightInput::new(1, SimTime::ZERO, events(1), 9);
        for i in 0..4 {
            input.unverified.insert(ValidatorId(i), events(1).into_iter().collect());
        }
        let parts = Participants::honest(handles);
        let out = run(&registry, &mut enclave, &parts, &input);
        assert!(out.result.is_err());
    }

    #[test]
    fn removing_a_signer_breaks_the_certificate() {
        let (registry, mut enclave, handles) = setup(7, QuorumMode::WeightSupermajority);
        let parts = Participants::honest(handles);
        let input = HeightInput::new(2, SimTime::ZERO, events(2), 4);
        let out = run(&registry, &mut enclave, &parts, &input);
        let cert = out.result.unwrap();
        assert_eq!(cert.proof.len(), 5);
        let v = enclave.verifier();
        let msg = cert.statement().sign_bytes();
        for skip in 0..cert.proof.len() {
            let sigs: Vec<_> = cert
                .proof
                .signatures()
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, s)| s.clone())
                .collect();
            let proof = crate::custody::aggregate_proof(&msg, sigs).unwrap();
            let c = FinalityCertificate { proof, ..cert.clone() };
            assert!(c.verify(&registry, 5, &v).is_err());
        }
    }

    /// With equal weights and n = 8 or 9, 2f+1 over the count is 5. Two
    /// equivocators and an honest set split in halves of 3 reach 5 on both
    /// sides. The supermajority threshold (6 or 7) does not.
    #[test]
    fn count_threshold_forks_at_eight_and_nine() {
        for n in [8u64, 9] {
            let mut forked = 0;
            for mode in [QuorumMode::Count2f1, QuorumMode::WeightSupermajority] {
                let (registry, mut enclave, handles) = setup(n, mode);
                let active = registry.active_ids();
                let mut parts = Participants::honest(handles);
                for b in [0u64, 1] {
                    parts = parts.with_behavior(ValidatorId(b), Behavior::Equivocate);
                }
                let h = (0..200)
                    .find(|&h| select_leader(h, 0, &active, 6).unwrap() == ValidatorId(0))
                    .unwrap();
                let input = HeightInput::new(h, SimTime::ZERO, events(3), 6);
                let out = run(&registry, &mut enclave, &parts, &input);
                match mode {
                    QuorumMode::Count2f1 => {
                        if n == 8 {
                            assert_eq!(out.constructible_digests, 2);
                            assert!(out.honest_conflict());
                        }
                        forked += (out.constructible_digests > 1) as u32;
                    }
                    QuorumMode::WeightSupermajority => {
                        assert!(out.constructible_digests <= 1);
                        assert!(!out.honest_conflict());
                    }
                }
            }
            assert_eq!(forked, 1, "n = {n}");
        }
    }

    #[test]
    fn empty_committee() {
        let (registry, mut enclave, _) = setup(4, QuorumMode::WeightSupermajority);
        let input = HeightInput::new(1, SimTime::ZERO, events(1), 9);
        let out = run(&registry, &mut enclave, &Participants::default(), &input);
        assert_eq!(out.result.unwrap_err().reason, FailureReason::EmptyCommittee);
    }
}
