//! Two-phase BFT consensus (PREVOTE / PRECOMMIT) with rotating leaders.
//!
//! A height is run as a small discrete-event simulation in [`run_round`]:
//! every proposal and vote is PQC-signed, encoded, sealed over the QKD key
//! plane and delivered after the configured link delay. Finality is reached
//! when a node collects precommits from a quorum for one proposal digest.

mod engine;
mod leader;
mod votes;
mod wire;

pub use engine::{
    run_round, Behavior, Decision, Delivered, HeightInput, HeightOutcome, IdealTransport,
    Participants, Timing, Transport, TransportFailure,
};
pub use leader::select_leader;
pub use votes::{cast_vote, detect_equivocation, finalize_check, sign_vote, FinalizeReject};
pub use wire::Message;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::custody::{
    verify_aggregate, AggregateReject, AggregatedProof, CustodyError, RegistryView, Signature,
    Verifier,
};
use crate::hash::{hash_parts, Digest};
pub use crate::registry::{Phase, VoteStatement};
use crate::time::SimTime;
use crate::types::ValidatorId;

/// Digest used for a nil vote (no acceptable proposal seen in time).
pub const NIL: Digest = Digest::ZERO;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proposal {
    pub height: u64,
    pub round: u32,
    pub leader: ValidatorId,
    pub events: Vec<Digest>,
    pub digest: Digest,
    pub signature: Signature,
}

impl Proposal {
    pub fn compute_digest(height: u64, round: u32, leader: ValidatorId, events: &[Digest]) -> Digest {
        let mut ev = Vec::with_capacity(events.len() * 32);
        for e in events {
            ev.extend_from_slice(&e.0);
        }
        hash_parts(
            "qlink/proposal",
            &[
                &height.to_be_bytes(),
                &round.to_be_bytes(),
                &leader.to_be_bytes(),
                &ev,
            ],
        )
    }

    /// Bytes the leader signs.
    pub fn sign_bytes_for(digest: &Digest) -> Vec<u8> {
        let mut out = b"qlink/proposal-sig".to_vec();
        out.extend_from_slice(&digest.0);
        out
    }

    pub fn digest_is_bound(&self) -> bool {
        self.digest == Self::compute_digest(self.height, self.round, self.leader, &self.events)
    }

    pub fn has_duplicate_events(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        !self.events.iter().all(|e| seen.insert(*e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    #[serde(flatten)]
    pub statement: VoteStatement,
    pub signer: ValidatorId,
    pub signature: Signature,
}

impl Vote {
    pub fn phase(&self) -> Phase {
        self.statement.phase
    }

    pub fn is_nil(&self) -> bool {
        self.statement.proposal_digest == NIL
    }

    pub fn verify(&self, view: &dyn RegistryView, verifier: &Verifier) -> bool {
        self.signature.signer == self.signer
            && view.signer(self.signer).is_some_and(|e| {
                verifier.verify(e.public_key, &self.statement.sign_bytes(), &self.signature)
            })
    }
}

/// A proposal together with a quorum proof over its precommit statement.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalityCertificate {
    pub proposal: Proposal,
    pub proof: AggregatedProof,
    pub finalized_at: SimTime,
}

impl FinalityCertificate {
    pub fn statement(&self) -> VoteStatement {
        VoteStatement {
            phase: Phase::Precommit,
            height: self.proposal.height,
            round: self.proposal.round,
            proposal_digest: self.proposal.digest,
        }
    }

    pub fn verify(
        &self,
        view: &dyn RegistryView,
        threshold: u64,
        verifier: &Verifier,
    ) -> Result<(), AggregateReject> {
        if !self.proposal.digest_is_bound() {
            return Err(AggregateReject::DigestMismatch);
        }
        verify_aggregate(&self.proof, &self.statement().sign_bytes(), view, threshold, verifier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureReason {
    /// No quorum formed within the round budget.
    LivenessLost,
    /// Messages were lost because a link ran out of key.
    InsufficientKey,
    /// No active validators to run the height.
    EmptyCommittee,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundFailure {
    pub height: u64,
    pub rounds_attempted: u32,
    pub reason: FailureReason,
    pub diagnosis: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConsensusError {
    #[error("no active validators")]
    EmptyRegistry,
    #[error("{validator} has not verified event {event}")]
    NoLocalVerification { validator: ValidatorId, event: Digest },
    #[error("invalid proposal: {0}")]
    InvalidProposal(String),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error(transparent)]
    Custody(#[from] CustodyError),
}
