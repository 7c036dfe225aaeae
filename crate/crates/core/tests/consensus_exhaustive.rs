use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use qlink_core::consensus::{run_round, Behavior, HeightInput, IdealTransport, Participants, Phase, Timing, NIL};
use qlink_core::custody::{verify_aggregate, Enclave, MockScheme, SignatureScheme};
use qlink_core::eventlog::EventLog;
use qlink_core::hash::hash_parts;
use qlink_core::registry::{QuorumMode, Registry, Role, Status, ValidatorRecord};
use qlink_core::{Digest, SimTime, ValidatorId};

const STRATEGIES: [Behavior; 3] = [Behavior::Silent, Behavior::Equivocate, Behavior::ConflictingVote];

struct Committee {
    enclave: Enclave,
    registry: Registry,
    handles: BTreeMap<ValidatorId, qlink_core::custody::KeyHandle>,
}

fn committee(n: u64) -> Committee {
    let mut enclave = Enclave::new(Arc::new(MockScheme::new(SignatureScheme::mock())), 11);
    let mut registry = Registry::new(QuorumMode::WeightSupermajority, Vec::<String>::new());
    let mut handles = BTreeMap::new();
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
        handles.insert(ValidatorId(i), h);
    }
    Committee {
        enclave,
        registry,
        handles,
    }
}

/// Every assignment of at most `f` Byzantine validators, each with every strategy.
fn assignments(n: u64, f: u64) -> Vec<BTreeMap<ValidatorId, Behavior>> {
    let mut out = vec![BTreeMap::new()];
    for i in 0..n {
        let mut next = Vec::new();
        for a in &out {
            next.push(a.clone());
            if (a.len() as u64) < f {
                for s in STRATEGIES {
                    let mut b = a.clone();
                    b.insert(ValidatorId(i), s);
                    next.push(b);
                }
            }
        }
        out = next;
    }
    out
}

/// Non-nil digests backed by a quorum of distinct signers among emitted precommits.
fn certifiable(precommits: &[qlink_core::consensus::Vote], threshold: u64) -> BTreeSet<(u32, Digest)> {
    let mut by: BTreeMap<(u32, Digest), BTreeSet<ValidatorId>> = BTreeMap::new();
    for v in precommits {
        assert_eq!(v.statement.phase, Phase::Precommit);
        if v.statement.proposal_digest == NIL {
            continue;
        }
        by.entry((v.statement.round, v.statement.proposal_digest))
            .or_default()
            .insert(v.signer);
    }
    by.into_iter()
        .filter(|(_, s)| s.len() as u64 >= threshold)
        .map(|(k, _)| k)
        .collect()
}

#[test]
fn assignment_enumeration_counts() {
    // 1 + 4*3 and 1 + 7*3 + C(7,2)*9
    assert_eq!(assignments(4, 1).len(), 13);
    assert_eq!(assignments(7, 2).len(), 211);
}

#[test]
fn every_bounded_byzantine_assignment_is_safe() {
    for (n, f) in [(4u64, 1u64), (7, 2)] {
        let mut c = committee(n);
        let threshold = c.registry.threshold().unwrap();
        let verifier = c.enclave.verifier();
        for (k, byz) in assignments(n, f).into_iter().enumerate() {
            let participants = Participants {
                handles: c.handles.clone(),
                behaviors: byz.clone(),
            };
            let event = hash_parts("exhaustive", &[&(k as u64).to_be_bytes()]);
            let input = HeightInput::new(1, SimTime::ZERO, vec![event], k as u64);
            let out = run_round(
                &input,
                &participants,
                &c.registry,
                &mut c.enclave,
                &mut IdealTransport,
                &Timing::default(),
                &mut EventLog::disabled(),
            );
            let certs = certifiable(&out.precommits_emitted, threshold);
            let digests: BTreeSet<Digest> = certs.iter().map(|c| c.1).collect();
            assert!(digests.len() <= 1, "n={n} {byz:?}: {} certifiable digests", digests.len());
            assert_eq!(out.constructible_digests, digests.len(), "n={n} {byz:?}");
            // Honest validators are a quorum on their own, so the height decides.
            let cert = out.result.unwrap_or_else(|e| panic!("n={n} {byz:?}: {e:?}"));
            let msg = cert.statement().sign_bytes();
            verify_aggregate(&cert.proof, &msg, &c.registry, threshold, &verifier).unwrap();
            assert!(digests.contains(&cert.proposal.digest));
            for ev in &out.evidence {
                assert!(byz.contains_key(&ev.accused), "honest {} accused", ev.accused);
            }
        }
    }
}
