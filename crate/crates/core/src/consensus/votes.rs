use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ConsensusError, Phase, Proposal, Vote, VoteStatement, NIL};
use crate::custody::{
    aggregate_proof, AggregatedProof, CustodyError, Enclave, KeyHandle, RegistryView,
    SigningAuthority, Verifier,
};
use crate::hash::Digest;
use crate::registry::{MisbehaviorEvidence, SignedStatement};
use crate::types::ValidatorId;

/// Signs `statement` with no local checks. Honest code goes through
/// [`cast_vote`]; faulty validators use this directly.
pub fn sign_vote(
    handle: KeyHandle,
    statement: VoteStatement,
    enclave: &mut Enclave,
    authority: &dyn SigningAuthority,
) -> Result<Vote, CustodyError> {
    let signature = enclave.sign(handle, &statement.sign_bytes(), authority)?;
    Ok(Vote {
        statement,
        signer: handle.owner,
        signature,
    })
}

/// Honest vote for `proposal`: refused unless the validator has itself
/// verified every event the proposal carries.
pub fn cast_vote(
    handle: KeyHandle,
    phase: Phase,
    proposal: &Proposal,
    verified_events: &BTreeSet<Digest>,
    enclave: &mut Enclave,
    authority: &dyn SigningAuthority,
) -> Result<Vote, ConsensusError> {
    if let Some(&event) = proposal.events.iter().find(|e| !verified_events.contains(e)) {
        return Err(ConsensusError::NoLocalVerification {
            validator: handle.owner,
            event,
        });
    }
    let statement = VoteStatement {
        phase,
        height: proposal.height,
        round: proposal.round,
        proposal_digest: proposal.digest,
    };
    Ok(sign_vote(handle, statement, enclave, authority)?)
}

/// One DOUBLE_SIGN evidence per `(signer, height, round, phase)` slot in which
/// the signer signed two or more different digests.
pub fn detect_equivocation(votes: &[Vote]) -> Vec<MisbehaviorEvidence> {
    type Slot = (ValidatorId, u64, u32, Phase);
    let mut first: BTreeMap<Slot, &Vote> = BTreeMap::new();
    let mut evidence: BTreeMap<Slot, MisbehaviorEvidence> = BTreeMap::new();
    for v in votes {
        let s = &v.statement;
        let slot = (v.signer, s.height, s.round, s.phase);
        match first.get(&slot) {
            None => {
                first.insert(slot, v);
            }
            Some(prev) if prev.statement.proposal_digest != s.proposal_digest => {
                evidence.entry(slot).or_insert_with(|| {
                    MisbehaviorEvidence::double_sign(
                        v.signer,
                        SignedStatement {
                            statement: prev.statement,
                            signature: prev.signature.clone(),
                        },
                        SignedStatement {
                            statement: v.statement,
                            signature: v.signature.clone(),
                        },
                    )
                });
            }
            Some(_) => {}
        }
    }
    evidence.into_values().collect()
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinalizeReject {
    #[error("vote is not a precommit")]
    NotPrecommit,
    #[error("best digest reached weight {best_weight}, threshold {threshold}")]
    NoQuorum { best_weight: u64, threshold: u64 },
}

/// Builds a proof from precommits if a single statement reaches `threshold`.
/// Invalid, nil and repeated votes do not count.
pub fn finalize_check(
    votes: &[Vote],
    view: &dyn RegistryView,
    threshold: u64,
    verifier: &Verifier,
) -> Result<AggregatedProof, FinalizeReject> {
    if votes.iter().any(|v| v.phase() != Phase::Precommit) {
        return Err(FinalizeReject::NotPrecommit);
    }
    let mut groups: Vec<(VoteStatement, BTreeSet<ValidatorId>, u64, Vec<&Vote>)> = Vec::new();
    for v in votes {
        if v.statement.proposal_digest == NIL || !v.verify(view, verifier) {
            continue;
        }
        let Some(entry) = view.signer(v.signer) else {
            continue;
        };
        if !entry.active {
            continue;
        }
        let weight = entry.weight;
        let idx = match groups.iter().position(|g| g.0 == v.statement) {
            Some(i) => i,
            None => {
                groups.push((v.statement, BTreeSet::new(), 0, Vec::new()));
                groups.len() - 1
            }
        };
        let g = &mut groups[idx];
        if g.1.insert(v.signer) {
            g.2 += weight;
            g.3.push(v);
        }
    }
    let best = groups.iter().max_by_key(|g| g.2);
    match best {
        Some((stmt, _, w, vs)) if *w >= threshold => {
            let sigs = vs.iter().map(|v| v.signature.clone()).collect();
            Ok(aggregate_proof(&stmt.sign_bytes(), sigs).expect("group shares one statement"))
        }
        _ => Err(FinalizeReject::NoQuorum {
            best_weight: best.map_or(0, |g| g.2),
            threshold,
        }),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::custody::{AllowAll, MockScheme, SignatureScheme};
    use crate::registry::{QuorumMode, Registry, Role, Status, ValidatorRecord};

    struct Fixture {
        enclave: Enclave,
        handles: Vec<KeyHandle>,
        registry: Registry,
    }

    fn fixture(n: u64) -> Fixture {
        let mut enclave = Enclave::new(Arc::new(MockScheme::new(SignatureScheme::mock())), 11);
        let mut registry = Registry::new(QuorumMode::WeightSupermajority, Vec::<String>::new());
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
        Fixture {
            enclave,
            handles,
            registry,
        }
    }

    fn stmt(phase: Phase, round: u32, d: u8) -> VoteStatement {
        VoteStatement {
            phase,
            height: 1,
            round,
            proposal_digest: Digest([d; 32]),
        }
    }

    fn vote(f: &mut Fixture, i: usize, s: VoteStatement) -> Vote {
        sign_vote(f.handles[i], s, &mut f.enclave, &AllowAll).unwrap()
    }

    #[test]
    fn finalize_examples() {
        let mut f = fixture(4);
        let v = f.enclave.verifier();
        let s = stmt(Phase::Precommit, 0, 1);
        let votes: Vec<_> = (0..3).map(|i| vote(&mut f, i, s)).collect();
        let proof = finalize_check(&votes, &f.registry, 3, &v).unwrap();
        assert_eq!(proof.len(), 3);

        let repeated = vec![
            votes[0].clone(),
            votes[0].clone(),
            votes[1].clone(),
            votes[1].clone(),
            votes[0].clone(),
        ];
        assert_eq!(
            finalize_check(&repeated, &f.registry, 3, &v),
            Err(FinalizeReject::NoQuorum { best_weight: 2, threshold: 3 })
        );

        let other = stmt(Phase::Precommit, 0, 2);
        let split = vec![
            votes[0].clone(),
            votes[1].clone(),
            vote(&mut f, 2, other),
            vote(&mut f, 3, other),
        ];
        assert!(finalize_check(&split, &f.registry, 3, &v).is_err());

        let pre = vote(&mut f, 3, stmt(Phase::Prevote, 0, 1));
        assert_eq!(
            finalize_check(&[pre], &f.registry, 3, &v),
            Err(FinalizeReject::NotPrecommit)
        );
    }

    #[test]
    fn minimal_certificate_is_tight() {
        let mut f = fixture(7);
        let v = f.enclave.verifier();
        let s = stmt(Phase::Precommit, 0, 9);
        let votes: Vec<_> = (0..5).map(|i| vote(&mut f, i, s)).collect();
        assert!(finalize_check(&votes, &f.registry, 5, &v).is_ok());
        for skip in 0..votes.len() {
            let fewer: Vec<_> = votes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, x)| x.clone())
                .collect();
            assert!(finalize_check(&fewer, &f.registry, 5, &v).is_err());
        }
    }

    #[test]
    fn equivocation_examples() {
        let mut f = fixture(4);
        let clean: Vec<_> = (0..4).map(|i| vote(&mut f, i, stmt(Phase::Prevote, 0, 1))).collect();
        assert!(detect_equivocation(&clean).is_empty());

        let mut one = clean.clone();
        one.push(vote(&mut f, 2, stmt(Phase::Prevote, 0, 2)));
        one.push(vote(&mut f, 2, stmt(Phase::Prevote, 0, 3)));
        let ev = detect_equivocation(&one);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].accused, ValidatorId(2));

        let mut two = clean;
        two.push(vote(&mut f, 1, stmt(Phase::Prevote, 0, 2)));
        two.push(vote(&mut f, 3, stmt(Phase::Precommit, 1, 2)));
        two.push(vote(&mut f, 3, stmt(Phase::Precommit, 1, 4)));
        let ev = detect_equivocation(&two);
        let accused: Vec<_> = ev.iter().map(|e| e.accused).collect();
        assert_eq!(accused, vec![ValidatorId(1), ValidatorId(3)]);

        let v = f.enclave.verifier();
        for e in &ev {
            assert!(f.registry.clone().handle_evidence(e, &v).is_ok());
        }
    }

    #[test]
    fn honest_vote_requires_local_verification() {
        let mut f = fixture(4);
        let events = vec![Digest([1; 32]), Digest([2; 32])];
        let digest = Proposal::compute_digest(1, 0, ValidatorId(0), &events);
        let leader_sig = f
            .enclave
            .sign(f.handles[0], &Proposal::sign_bytes_for(&digest), &AllowAll)
            .unwrap();
        let p = Proposal {
            height: 1,
            round: 0,
            leader: ValidatorId(0),
            events: events.clone(),
            digest,
            signature: leader_sig,
        };
        let partial: BTreeSet<_> = [events[0]].into_iter().collect();
        assert!(matches!(
            cast_vote(f.handles[1], Phase::Prevote, &p, &partial, &mut f.enclave, &f.registry),
            Err(ConsensusError::NoLocalVerification { event, .. }) if event == events[1]
        ));
        let all: BTreeSet<_> = events.iter().copied().collect();
        let vote = cast_vote(f.handles[1], Phase::Prevote, &p, &all, &mut f.enclave, &f.registry)
            .unwrap();
        assert!(vote.verify(&f.registry, &f.enclave.verifier()));

        let mut reg = f.registry.clone();
        let ev = detect_equivocation(&[
            sign_vote(f.handles[1], stmt(Phase::Prevote, 0, 1), &mut f.enclave, &AllowAll).unwrap(),
            sign_vote(f.handles[1], stmt(Phase::Prevote, 0, 2), &mut f.enclave, &AllowAll).unwrap(),
        ]);
        reg.handle_evidence(&ev[0], &f.enclave.verifier()).unwrap();
        assert!(matches!(
            cast_vote(f.handles[1], Phase::Prevote, &p, &all, &mut f.enclave, &reg),
            Err(ConsensusError::Custody(CustodyError::AuthorizationDenied(_)))
        ));
    }
}
