use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{message_digest, CustodyError, PublicKey, SchemeId, Signature, Verifier};
use crate::hash::Digest;
use crate::types::ValidatorId;

/// t-of-n multisignature: one signature per distinct signer over one message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatedProof {
    pub message_digest: Digest,
    signatures: Vec<Signature>,
    pub size_bytes: usize,
}

impl AggregatedProof {
    pub fn signatures(&self) -> &[Signature] {
        &self.signatures
    }

    pub fn signers(&self) -> impl Iterator<Item = ValidatorId> + '_ {
        self.signatures.iter().map(|s| s.signer)
    }

    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }

    /// `count (u32 BE)` then per signature in ascending signer order
    /// `signer (u64 BE) || length (u16 BE) || bytes`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size_bytes);
        out.extend_from_slice(&(self.signatures.len() as u32).to_be_bytes());
        for s in &self.signatures {
            out.extend_from_slice(&s.signer.to_be_bytes());
            out.extend_from_slice(&(s.bytes.len() as u16).to_be_bytes());
            out.extend_from_slice(&s.bytes);
        }
        out
    }

    /// Parses the wire form. The digest and scheme are not on the wire and are
    /// supplied by the caller.
    pub fn from_bytes(
        bytes: &[u8],
        message_digest: Digest,
        scheme_id: SchemeId,
    ) -> Result<Self, CustodyError> {
        let bad = |m: &str| CustodyError::Malformed(m.to_string());
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CustodyError> {
            let s = bytes
                .get(*pos..*pos + n)
                .ok_or_else(|| bad("truncated proof"))?;
            *pos += n;
            Ok(s)
        };
        let mut pos = 0;
        let count = u32::from_be_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let mut sigs = Vec::new();
        for _ in 0..count {
            let signer = u64::from_be_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let len = u16::from_be_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            sigs.push(Signature {
                signer: ValidatorId(signer),
                scheme_id,
                message_digest,
                bytes: take(&mut pos, len)?.to_vec(),
            });
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let proof = Self::from_signatures(message_digest, sigs)?;
        if proof.len() != count as usize || proof.to_bytes() != bytes {
            return Err(bad("non-canonical encoding"));
        }
        Ok(proof)
    }

    fn from_signatures(digest: Digest, sigs: Vec<Signature>) -> Result<Self, CustodyError> {
        let mut by_signer: BTreeMap<ValidatorId, Signature> = BTreeMap::new();
        for s in sigs {
            if s.message_digest != digest {
                return Err(CustodyError::DigestMismatch);
            }
            by_signer.entry(s.signer).or_insert(s);
        }
        let signatures: Vec<Signature> = by_signer.into_values().collect();
        let size_bytes = 4 + signatures.iter().map(|s| 10 + s.bytes.len()).sum::<usize>();
        Ok(AggregatedProof {
            message_digest: digest,
            signatures,
            size_bytes,
        })
    }
}

/// Collects signatures over `message` into a proof. A signer appearing twice
/// keeps its first signature.
pub fn aggregate_proof(message: &[u8], sigs: Vec<Signature>) -> Result<AggregatedProof, CustodyError> {
    AggregatedProof::from_signatures(message_digest(message), sigs)
}

/// Registry facts needed to check a signer.
pub struct SignerEntry<'a> {
    pub public_key: &'a PublicKey,
    pub active: bool,
    /// Contribution toward the threshold (1 per signer when counting heads).
    pub weight: u64,
}

pub trait RegistryView {
    fn signer(&self, id: ValidatorId) -> Option<SignerEntry<'_>>;
}

impl RegistryView for BTreeMap<ValidatorId, (PublicKey, bool, u64)> {
    fn signer(&self, id: ValidatorId) -> Option<SignerEntry<'_>> {
        self.get(&id).map(|(pk, active, weight)| SignerEntry {
            public_key: pk,
            active: *active,
            weight: *weight,
        })
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
pub enum AggregateReject {
    #[error("proof is not over this message")]
    DigestMismatch,
    #[error("signer {0} is not registered")]
    UnregisteredSigner(ValidatorId),
    #[error("signer {0} is not active")]
    InactiveSigner(ValidatorId),
    #[error("signature by {0} does not verify")]
    InvalidSignature(ValidatorId),
    #[error("signer weight {weight} below threshold {threshold}")]
    ThresholdNotMet { weight: u64, threshold: u64 },
}

/// Accepts iff every signature verifies, every signer is registered and
/// active, and the signers' combined weight reaches `threshold`.
pub fn verify_aggregate(
    proof: &AggregatedProof,
    message: &[u8],
    view: &dyn RegistryView,
    threshold: u64,
    verifier: &Verifier,
) -> Result<(), AggregateReject> {
    if proof.message_digest != message_digest(message) {
        return Err(AggregateReject::DigestMismatch);
    }
    let mut weight = 0u64;
    for sig in proof.signatures() {
        let entry = view
            .signer(sig.signer)
            .ok_or(AggregateReject::UnregisteredSigner(sig.signer))?;
        if !entry.active {
            return Err(AggregateReject::InactiveSigner(sig.signer));
        }
        if !verifier.verify(entry.public_key, message, sig) {
            return Err(AggregateReject::InvalidSignature(sig.signer));
        }
        weight += entry.weight;
    }
    if weight < threshold {
        return Err(AggregateReject::ThresholdNotMet { weight, threshold });
    }
    Ok(())
}
