use serde::{Deserialize, Serialize};

use crate::custody::Signature;
use crate::hash::{hash_parts, Digest};
use crate::time::SimTime;
use crate::types::ValidatorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Prevote,
    Precommit,
}

impl Phase {
    pub fn tag(self) -> u8 {
        match self {
            Phase::Prevote => 1,
            Phase::Precommit => 2,
        }
    }
}

/// What a vote signature commits to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VoteStatement {
    pub phase: Phase,
    pub height: u64,
    pub round: u32,
    pub proposal_digest: Digest,
}

impl VoteStatement {
    /// Canonical bytes that are signed for this statement.
    pub fn sign_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.extend_from_slice(b"qlink/vote");
        out.push(self.phase.tag());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.proposal_digest.0);
        out
    }

    /// True if both statements occupy the same voting slot.
    pub fn same_slot(&self, other: &VoteStatement) -> bool {
        self.phase == other.phase && self.height == other.height && self.round == other.round
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedStatement {
    pub statement: VoteStatement,
    pub signature: Signature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvidenceKind {
    DoubleSign,
    InvalidProof,
    KeyDeliveryFailure,
    ConnectivityFailure,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidencePayload {
    ConflictingVotes {
        first: Box<SignedStatement>,
        second: Box<SignedStatement>,
    },
    Incident {
        incident_id: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisbehaviorEvidence {
    pub kind: EvidenceKind,
    pub accused: ValidatorId,
    pub payload: EvidencePayload,
}

impl MisbehaviorEvidence {
    pub fn double_sign(accused: ValidatorId, first: SignedStatement, second: SignedStatement) -> Self {
        MisbehaviorEvidence {
            kind: EvidenceKind::DoubleSign,
            accused,
            payload: EvidencePayload::ConflictingVotes {
                first: Box::new(first),
                second: Box::new(second),
            },
        }
    }

    pub fn from_incident(kind: EvidenceKind, accused: ValidatorId, incident_id: u64) -> Self {
        MisbehaviorEvidence {
            kind,
            accused,
            payload: EvidencePayload::Incident { incident_id },
        }
    }

    /// Stable identifier. The two votes of a double-sign are order-independent.
    pub fn id(&self) -> Digest {
        let kind = [self.kind as u8];
        match &self.payload {
            EvidencePayload::ConflictingVotes { first, second } => {
                let mut a = first.statement.sign_bytes();
                let mut b = second.statement.sign_bytes();
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                hash_parts("qlink/evidence", &[&kind, &self.accused.to_be_bytes(), &a, &b])
            }
            EvidencePayload::Incident { incident_id } => hash_parts(
                "qlink/evidence",
                &[&kind, &self.accused.to_be_bytes(), &incident_id.to_be_bytes()],
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IncidentKind {
    /// A key provider's links went down and key could not be delivered.
    KeyDelivery,
    /// A validator was unreachable over every key path.
    Connectivity,
    /// A validator put its signature on a proof that failed verification.
    InvalidProof,
}

/// Operational failure observed by the system, referenced by evidence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub id: u64,
    pub kind: IncidentKind,
    pub accused: ValidatorId,
    pub at: SimTime,
    pub detail: String,
}
