//! Validator registry: identities, weights, QKD roles, quorum thresholds and
//! penalties for provable misbehaviour.

mod evidence;

pub use evidence::{
    EvidenceKind, EvidencePayload, Incident, IncidentKind, MisbehaviorEvidence, Phase,
    SignedStatement, VoteStatement,
};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::custody::{PublicKey, RegistryView, SignerEntry, SigningAuthority, Verifier};
use crate::hash::Digest;
use crate::time::SimTime;
use crate::types::ValidatorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    QkdHub,
    QkdEndpoint,
    Consumer,
}

impl Role {
    pub fn needs_certificate(self) -> bool {
        matches!(self, Role::QkdHub | Role::QkdEndpoint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Active,
    Slashed,
    Disqualified,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QuorumMode {
    /// `T = 2f + 1` over the active head count.
    #[serde(rename = "COUNT_2F1")]
    Count2f1,
    /// Smallest integer `T > 2W/3` over active weight.
    #[serde(rename = "WEIGHT_SUPERMAJORITY")]
    WeightSupermajority,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorRecord {
    pub id: ValidatorId,
    pub public_key: PublicKey,
    pub weight: u64,
    pub role: Role,
    pub certificate: Option<String>,
    pub status: Status,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("{0} has a QKD role but no whitelisted hardware certificate")]
    CertificateRequired(ValidatorId),
    #[error("public key of {0} is already registered")]
    DuplicateKey(ValidatorId),
    #[error("validator id {0} is already registered")]
    DuplicateId(ValidatorId),
    #[error("no active validators")]
    EmptyRegistry,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid evidence: {0}")]
    InvalidEvidence(String),
}

/// `f = floor((n - 1) / 3)`.
pub fn max_faults(n: u64) -> Result<u64, RegistryError> {
    if n < 1 {
        return Err(RegistryError::InvalidParameter("committee size must be >= 1".into()));
    }
    Ok((n - 1) / 3)
}

/// Result of applying one piece of evidence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceOutcome {
    pub evidence_id: Digest,
    pub accused: ValidatorId,
    pub new_status: Status,
    /// False when the same evidence had already been applied.
    pub changed: bool,
    /// Consumers moved off a disqualified key provider, with their new hub.
    pub reassigned: Vec<(ValidatorId, ValidatorId)>,
    /// True unless consumers were left without any active hub.
    pub reroute_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    records: BTreeMap<ValidatorId, ValidatorRecord>,
    mode: QuorumMode,
    certificate_allowlist: BTreeSet<String>,
    hub_of: BTreeMap<ValidatorId, ValidatorId>,
    rewards: BTreeMap<ValidatorId, u64>,
    applied: BTreeSet<Digest>,
    incidents: Vec<Incident>,
}

impl Registry {
    pub fn new(mode: QuorumMode, certificate_allowlist: impl IntoIterator<Item = String>) -> Self {
        Registry {
            records: BTreeMap::new(),
            mode,
            certificate_allowlist: certificate_allowlist.into_iter().collect(),
            hub_of: BTreeMap::new(),
            rewards: BTreeMap::new(),
            applied: BTreeSet::new(),
            incidents: Vec::new(),
        }
    }

    pub fn mode(&self) -> QuorumMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: QuorumMode) {
        self.mode = mode;
    }

    pub fn register_validator(&mut self, record: ValidatorRecord) -> Result<(), RegistryError> {
        if self.records.contains_key(&record.id) {
            return Err(RegistryError::DuplicateId(record.id));
        }
        if self
            .records
            .values()
            .any(|r| r.public_key == record.public_key)
        {
            return Err(RegistryError::DuplicateKey(record.id));
        }
        if record.weight == 0 {
            return Err(RegistryError::InvalidParameter(format!(
                "weight of {} must be > 0",
                record.id
            )));
        }
        if record.role.needs_certificate() {
            match &record.certificate {
                Some(c) if self.certificate_allowlist.contains(c) => {}
                _ => return Err(RegistryError::CertificateRequired(record.id)),
            }
        }
        self.records.insert(record.id, record);
        Ok(())
    }

    pub fn get(&self, id: ValidatorId) -> Option<&ValidatorRecord> {
        self.records.get(&id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ValidatorRecord> {
        self.records.values()
    }

    pub fn is_active(&self, id: ValidatorId) -> bool {
        self.get(id).is_some_and(|r| r.status == Status::Active)
    }

    /// Active ids in ascending order.
    pub fn active_ids(&self) -> Vec<ValidatorId> {
        self.records
            .values()
            .filter(|r| r.status == Status::Active)
            .map(|r| r.id)
            .collect()
    }

    pub fn active_count(&self) -> u64 {
        self.active_ids().len() as u64
    }

    /// `W`: total weight over active records.
    pub fn total_weight(&self) -> u64 {
        self.records
            .values()
            .filter(|r| r.status == Status::Active)
            .map(|r| r.weight)
            .sum()
    }

    /// Contribution of `id` toward the threshold in the current mode.
    pub fn vote_weight(&self, id: ValidatorId) -> u64 {
        match self.get(id) {
            Some(r) if r.status == Status::Active => match self.mode {
                QuorumMode::Count2f1 => 1,
                QuorumMode::WeightSupermajority => r.weight,
            },
            _ => 0,
        }
    }

    pub fn quorum_threshold(&self, mode: QuorumMode) -> Result<u64, RegistryError> {
        let n = self.active_count();
        if n == 0 {
            return Err(RegistryError::EmptyRegistry);
        }
        Ok(match mode {
            QuorumMode::Count2f1 => 2 * max_faults(n)? + 1,
            QuorumMode::WeightSupermajority => 2 * self.total_weight() / 3 + 1,
        })
    }

    /// Threshold in the registry's configured mode.
    pub fn threshold(&self) -> Result<u64, RegistryError> {
        self.quorum_threshold(self.mode)
    }

    /// Weight of the distinct active members of `signers`.
    pub fn signer_weight(&self, signers: &[ValidatorId]) -> u64 {
        let distinct: BTreeSet<_> = signers.iter().copied().collect();
        distinct.into_iter().map(|s| self.vote_weight(s)).sum()
    }

    pub fn quorum_met(&self, signers: &[ValidatorId]) -> bool {
        match self.threshold() {
            Ok(t) => self.signer_weight(signers) >= t,
            Err(_) => false,
        }
    }

    /// True if at least one active, certified QKD hub or endpoint is registered.
    pub fn qkd_hub_present(&self) -> bool {
        self.records.values().any(|r| {
            r.status == Status::Active && r.role.needs_certificate() && r.certificate.is_some()
        })
    }

    /// Active QKD hubs in ascending id order.
    pub fn active_hubs(&self) -> Vec<ValidatorId> {
        self.records
            .values()
            .filter(|r| r.status == Status::Active && r.role == Role::QkdHub)
            .map(|r| r.id)
            .collect()
    }

    /// Assigns every consumer without a live hub to the lowest-id active hub.
    pub fn assign_default_hubs(&mut self) {
        let hubs = self.active_hubs();
        let Some(&primary) = hubs.first() else {
            return;
        };
        let consumers: Vec<_> = self
            .records
            .values()
            .filter(|r| r.role == Role::Consumer)
            .map(|r| r.id)
            .collect();
        for c in consumers {
            let current = self.hub_of.get(&c).copied();
            if current.is_none_or(|h| !hubs.contains(&h)) {
                self.hub_of.insert(c, primary);
            }
        }
    }

    pub fn hub_of(&self, consumer: ValidatorId) -> Option<ValidatorId> {
        self.hub_of.get(&consumer).copied()
    }

    /// Relay order for key routing: hubs currently serving consumers first,
    /// then any other active hub.
    pub fn relay_order(&self) -> Vec<ValidatorId> {
        let hubs = self.active_hubs();
        let mut order: Vec<ValidatorId> = Vec::new();
        for h in self.hub_of.values() {
            if hubs.contains(h) && !order.contains(h) {
                order.push(*h);
            }
        }
        for h in hubs {
            if !order.contains(&h) {
                order.push(h);
            }
        }
        order
    }

    pub fn record_incident(
        &mut self,
        kind: IncidentKind,
        accused: ValidatorId,
        at: SimTime,
        detail: impl Into<String>,
    ) -> u64 {
        let id = self.incidents.len() as u64;
        self.incidents.push(Incident {
            id,
            kind,
            accused,
            at,
            detail: detail.into(),
        });
        id
    }

    pub fn incidents(&self) -> &[Incident] {
        &self.incidents
    }

    fn validate_evidence(
        &self,
        ev: &MisbehaviorEvidence,
        verifier: &Verifier,
    ) -> Result<&ValidatorRecord, RegistryError> {
        let bad = |m: String| Err(RegistryError::InvalidEvidence(m));
        let Some(rec) = self.get(ev.accused) else {
            return bad(format!("{} is not registered", ev.accused));
        };
        match (&ev.kind, &ev.payload) {
            (EvidenceKind::DoubleSign, EvidencePayload::ConflictingVotes { first, second }) => {
                let (a, b) = (&first.statement, &second.statement);
                if !a.same_slot(b) {
                    return bad("votes are not for the same height, round and phase".into());
                }
                if a.proposal_digest == b.proposal_digest {
                    return bad("votes are for the same proposal".into());
                }
                for s in [first, second] {
                    if s.signature.signer != ev.accused {
                        return bad(format!("vote signed by {}", s.signature.signer));
                    }
                    if !verifier.verify(&rec.public_key, &s.statement.sign_bytes(), &s.signature) {
                        return bad("vote signature does not verify".into());
                    }
                }
                Ok(rec)
            }
            (kind, EvidencePayload::Incident { incident_id }) => {
                let Some(inc) = self.incidents.get(*incident_id as usize) else {
                    return bad(format!("no incident {incident_id}"));
                };
                if inc.accused != ev.accused {
                    return bad(format!("incident {incident_id} names {}", inc.accused));
                }
                let expected = match kind {
                    EvidenceKind::InvalidProof => IncidentKind::InvalidProof,
                    EvidenceKind::KeyDeliveryFailure => IncidentKind::KeyDelivery,
                    EvidenceKind::ConnectivityFailure => IncidentKind::Connectivity,
                    EvidenceKind::DoubleSign => {
                        return bad("double-sign evidence needs two signed votes".into())
                    }
                };
                if inc.kind != expected {
                    return bad(format!("incident {incident_id} is {:?}", inc.kind));
                }
                if *kind == EvidenceKind::KeyDeliveryFailure && !rec.role.needs_certificate() {
                    return bad(format!("{} provides no QKD key", ev.accused));
                }
                Ok(rec)
            }
            _ => bad("payload does not match evidence kind".into()),
        }
    }

    /// Validates and applies evidence. Applying the same evidence again leaves
    /// the registry unchanged.
    pub fn handle_evidence(
        &mut self,
        ev: &MisbehaviorEvidence,
        verifier: &Verifier,
    ) -> Result<EvidenceOutcome, RegistryError> {
        let status_before = self.validate_evidence(ev, verifier)?.status;
        let evidence_id = ev.id();
        let mut out = EvidenceOutcome {
            evidence_id,
            accused: ev.accused,
            new_status: status_before,
            changed: false,
            reassigned: Vec::new(),
            reroute_ok: true,
        };
        if !self.applied.insert(evidence_id) {
            return Ok(out);
        }
        let target = match ev.kind {
            EvidenceKind::DoubleSign | EvidenceKind::InvalidProof => Status::Slashed,
            EvidenceKind::KeyDeliveryFailure | EvidenceKind::ConnectivityFailure => {
                Status::Disqualified
            }
        };
        if status_before == Status::Active {
            self.records.get_mut(&ev.accused).expect("validated").status = target;
            out.new_status = target;
            out.changed = true;
        }
        if self.records[&ev.accused].role.needs_certificate() {
            let orphans: Vec<ValidatorId> = self
                .hub_of
                .iter()
                .filter(|(_, &h)| h == ev.accused)
                .map(|(&c, _)| c)
                .collect();
            if !orphans.is_empty() {
                match self.active_hubs().first() {
                    Some(&h) => {
                        for c in orphans {
                            self.hub_of.insert(c, h);
                            out.reassigned.push((c, h));
                        }
                    }
                    None => out.reroute_ok = false,
                }
            }
        }
        Ok(out)
    }

    /// Reward hook: one credit per finalized round for each signer.
    pub fn record_finalized_round(&mut self, signers: impl IntoIterator<Item = ValidatorId>) {
        for s in signers {
            *self.rewards.entry(s).or_default() += 1;
        }
    }

    pub fn rewards(&self, id: ValidatorId) -> u64 {
        self.rewards.get(&id).copied().unwrap_or(0)
    }
}

impl RegistryView for Registry {
    fn signer(&self, id: ValidatorId) -> Option<SignerEntry<'_>> {
        self.get(id).map(|r| SignerEntry {
            public_key: &r.public_key,
            active: r.status == Status::Active,
            weight: match self.mode {
                QuorumMode::Count2f1 => 1,
                QuorumMode::WeightSupermajority => r.weight,
            },
        })
    }
}

impl SigningAuthority for Registry {
    fn may_sign(&self, owner: ValidatorId) -> bool {
        self.is_active(owner)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::custody::{AllowAll, Enclave, KeyHandle, MockScheme, SignatureScheme};

    fn pk(i: u8) -> PublicKey {
        PublicKey(vec![i; 40])
    }

    fn rec(i: u64, role: Role, cert: Option<&str>) -> ValidatorRecord {
        ValidatorRecord {
            id: ValidatorId(i),
            public_key: pk(i as u8),
            weight: 1,
            role,
            certificate: cert.map(String::from),
            status: Status::Active,
        }
    }

    fn equal(n: u64, mode: QuorumMode) -> Registry {
        let mut r = Registry::new(mode, ["hw-0".to_string()]);
        for i in 0..n {
            r.register_validator(rec(i, Role::Consumer, None)).unwrap();
        }
        r
    }

    #[test]
    fn registration_rules() {
        let mut r = Registry::new(QuorumMode::Count2f1, ["hw-0".to_string()]);
        assert!(r.register_validator(rec(0, Role::Consumer, None)).is_ok());
        assert_eq!(
            r.register_validator(rec(1, Role::QkdHub, None)),
            Err(RegistryError::CertificateRequired(ValidatorId(1)))
        );
        assert_eq!(
            r.register_validator(rec(1, Role::QkdHub, Some("unknown"))),
            Err(RegistryError::CertificateRequired(ValidatorId(1)))
        );
        assert!(r.register_validator(rec(1, Role::QkdHub, Some("hw-0"))).is_ok());
        let mut dup = rec(2, Role::Consumer, None);
        dup.public_key = pk(0);
        assert_eq!(
            r.register_validator(dup),
            Err(RegistryError::DuplicateKey(ValidatorId(2)))
        );
    }

    #[test]
    fn thresholds() {
        assert_eq!(equal(4, QuorumMode::Count2f1).threshold(), Ok(3));
        assert_eq!(equal(4, QuorumMode::WeightSupermajority).threshold(), Ok(3));
        assert_eq!(equal(1, QuorumMode::Count2f1).threshold(), Ok(1));
        assert_eq!(equal(1, QuorumMode::WeightSupermajority).threshold(), Ok(1));
        for (n, count, weight) in [(7, 5, 5), (8, 5, 6), (9, 5, 7)] {
            assert_eq!(equal(n, QuorumMode::Count2f1).threshold(), Ok(count));
            assert_eq!(equal(n, QuorumMode::WeightSupermajority).threshold(), Ok(weight));
        }
        assert_eq!(
            equal(0, QuorumMode::Count2f1).threshold(),
            Err(RegistryError::EmptyRegistry)
        );
    }

    #[test]
    fn fault_bound() {
        assert_eq!(max_faults(4), Ok(1));
        assert_eq!(max_faults(7), Ok(2));
        assert_eq!(max_faults(8), Ok(2));
        assert_eq!(max_faults(9), Ok(2));
        assert_eq!(max_faults(1), Ok(0));
        assert!(max_faults(0).is_err());
    }

    #[test]
    fn quorum_examples() {
        let mut r = equal(4, QuorumMode::WeightSupermajority);
        let ids: Vec<_> = (0..3).map(ValidatorId).collect();
        assert!(r.quorum_met(&ids));
        assert!(!r.quorum_met(&[]));
        r.records.get_mut(&ValidatorId(2)).unwrap().status = Status::Slashed;
        // W drops to 3 so T stays 3, and the slashed signer counts zero.
        assert_eq!(r.threshold(), Ok(3));
        assert!(!r.quorum_met(&ids));
        // Head counting recomputes f over the 3 active validators.
        r.set_mode(QuorumMode::Count2f1);
        assert_eq!(r.threshold(), Ok(1));
    }

    fn signed(
        e: &mut Enclave,
        h: KeyHandle,
        height: u64,
        digest: u8,
    ) -> SignedStatement {
        let statement = VoteStatement {
            phase: Phase::Precommit,
            height,
            round: 0,
            proposal_digest: Digest([digest; 32]),
        };
        SignedStatement {
            signature: e.sign(h, &statement.sign_bytes(), &AllowAll).unwrap(),
            statement,
        }
    }

    fn keyed(n: u64) -> (Registry, Enclave, Vec<KeyHandle>) {
        let mut e = Enclave::new(Arc::new(MockScheme::new(SignatureScheme::mock())), 3);
        let mut r = Registry::new(QuorumMode::WeightSupermajority, ["hw".to_string()]);
        let mut hs = Vec::new();
        for i in 0..n {
            let (h, public_key) = e.keygen(ValidatorId(i));
            let role = if i < 2 { Role::QkdHub } else { Role::Consumer };
            r.register_validator(ValidatorRecord {
                id: ValidatorId(i),
                public_key,
                weight: 1,
                role,
                certificate: (i < 2).then(|| "hw".to_string()),
                status: Status::Active,
            })
            .unwrap();
            hs.push(h);
        }
        r.assign_default_hubs();
        (r, e, hs)
    }

    #[test]
    fn double_sign_slashes_once() {
        let (mut r, mut e, hs) = keyed(4);
        let v = e.verifier();
        let ev = MisbehaviorEvidence::double_sign(
            ValidatorId(3),
            signed(&mut e, hs[3], 5, 1),
            signed(&mut e, hs[3], 5, 2),
        );
        let out = r.handle_evidence(&ev, &v).unwrap();
        assert!(out.changed);
        assert_eq!(r.get(ValidatorId(3)).unwrap().status, Status::Slashed);
        assert!(!r.quorum_met(&[ValidatorId(3)]));
        assert_eq!(r.total_weight(), 3);
        let snapshot = r.clone();
        let again = r.handle_evidence(&ev, &v).unwrap();
        assert!(!again.changed);
        assert_eq!(r, snapshot);
        assert!(!r.may_sign(ValidatorId(3)));
    }

    #[test]
    fn forged_double_sign_is_rejected() {
        let (mut r, mut e, hs) = keyed(4);
        let v = e.verifier();
        let first = signed(&mut e, hs[3], 5, 1);
        let mut second = signed(&mut e, hs[3], 5, 2);
        second.signature.bytes[0] ^= 1;
        let ev = MisbehaviorEvidence::double_sign(ValidatorId(3), first.clone(), second);
        assert!(matches!(
            r.handle_evidence(&ev, &v),
            Err(RegistryError::InvalidEvidence(_))
        ));
        let other_height = signed(&mut e, hs[3], 6, 2);
        let ev = MisbehaviorEvidence::double_sign(ValidatorId(3), first, other_height);
        assert!(r.handle_evidence(&ev, &v).is_err());
        assert_eq!(r.get(ValidatorId(3)).unwrap().status, Status::Active);
    }

    #[test]
    fn hub_failure_reassigns_consumers() {
        let (mut r, e, _) = keyed(4);
        let v = e.verifier();
        assert_eq!(r.hub_of(ValidatorId(2)), Some(ValidatorId(0)));
        let inc = r.record_incident(IncidentKind::KeyDelivery, ValidatorId(0), SimTime::ZERO, "cut");
        let ev = MisbehaviorEvidence::from_incident(EvidenceKind::KeyDeliveryFailure, ValidatorId(0), inc);
        let out = r.handle_evidence(&ev, &v).unwrap();
        assert_eq!(out.new_status, Status::Disqualified);
        assert!(out.reroute_ok);
        assert_eq!(
            out.reassigned,
            vec![(ValidatorId(2), ValidatorId(1)), (ValidatorId(3), ValidatorId(1))]
        );
        assert_eq!(r.relay_order(), vec![ValidatorId(1)]);
        assert!(r.qkd_hub_present());

        let inc = r.record_incident(IncidentKind::KeyDelivery, ValidatorId(1), SimTime::ZERO, "cut");
        let ev = MisbehaviorEvidence::from_incident(EvidenceKind::KeyDeliveryFailure, ValidatorId(1), inc);
        let out = r.handle_evidence(&ev, &v).unwrap();
        assert!(!out.reroute_ok);
        assert!(!r.qkd_hub_present());
    }

    #[test]
    fn incident_evidence_must_match() {
        let (mut r, e, _) = keyed(4);
        let v = e.verifier();
        let inc = r.record_incident(IncidentKind::KeyDelivery, ValidatorId(0), SimTime::ZERO, "cut");
        let wrong = MisbehaviorEvidence::from_incident(EvidenceKind::KeyDeliveryFailure, ValidatorId(1), inc);
        assert!(r.handle_evidence(&wrong, &v).is_err());
        let missing = MisbehaviorEvidence::from_incident(EvidenceKind::InvalidProof, ValidatorId(0), 99);
        assert!(r.handle_evidence(&missing, &v).is_err());
        let consumer = r.record_incident(IncidentKind::KeyDelivery, ValidatorId(3), SimTime::ZERO, "x");
        let ev = MisbehaviorEvidence::from_incident(EvidenceKind::KeyDeliveryFailure, ValidatorId(3), consumer);
        assert!(r.handle_evidence(&ev, &v).is_err());
    }

    #[test]
    fn rewards_accumulate() {
        let mut r = equal(3, QuorumMode::Count2f1);
        r.record_finalized_round([ValidatorId(0), ValidatorId(1)]);
        r.record_finalized_round([ValidatorId(0)]);
        assert_eq!(r.rewards(ValidatorId(0)), 2);
        assert_eq!(r.rewards(ValidatorId(2)), 0);
    }

    proptest::proptest! {
        #[test]
        fn supermajority_quorums_intersect(weights in proptest::collection::vec(1u64..10, 1..=6)) {
            let mut r = Registry::new(QuorumMode::WeightSupermajority, Vec::<String>::new());
            for (i, w) in weights.iter().enumerate() {
                let mut x = rec(i as u64, Role::Consumer, None);
                x.weight = *w;
                r.register_validator(x).unwrap();
            }
            let n = weights.len();
            let sets: Vec<Vec<ValidatorId>> = (0u32..1 << n)
                .map(|m| (0..n).filter(|i| m & (1 << i) != 0).map(|i| ValidatorId(i as u64)).collect())
                .filter(|s: &Vec<ValidatorId>| r.quorum_met(s))
                .collect();
            for a in &sets {
                for b in &sets {
                    proptest::prop_assert!(a.iter().any(|x| b.contains(x) && r.vote_weight(*x) > 0));
                }
            }
        }
    }
}
