//! Post-quantum key custody.
//!
//! Secret keys live in an emulated enclave that signs on request and refuses
//! every export. Signatures from a quorum are collected into an
//! [`AggregatedProof`] (a t-of-n multisignature) and checked against a
//! registry view with [`verify_aggregate`].

mod enclave;
mod proof;
mod scheme;

pub use enclave::{AllowAll, Enclave, KeyHandle, SignRecord, SigningAuthority, Verifier};
pub use proof::{
    aggregate_proof, verify_aggregate, AggregateReject, AggregatedProof, RegistryView, SignerEntry,
};
pub use scheme::{MockScheme, PublicKey, SchemeId, SecretKey, SignatureProvider, SignatureScheme};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::{hash_parts, Digest};
use crate::types::ValidatorId;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer: ValidatorId,
    pub scheme_id: SchemeId,
    /// Digest of the signed message, so proofs can check that all their
    /// signatures cover the same message.
    pub message_digest: Digest,
    #[serde(with = "sig_hex")]
    pub bytes: Vec<u8>,
}

mod sig_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl std::fmt::Debug for Signature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Signature({} over {:?}, {} B)",
            self.signer,
            self.message_digest,
            self.bytes.len()
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CustodyError {
    #[error("no key with handle {0}")]
    NoSuchKey(u64),
    #[error("{0} is not authorised to sign")]
    AuthorizationDenied(ValidatorId),
    #[error("secret key export is forbidden")]
    KeyExportForbidden,
    #[error("signatures are over different messages")]
    DigestMismatch,
    #[error("malformed proof: {0}")]
    Malformed(String),
}

pub fn message_digest(message: &[u8]) -> Digest {
    hash_parts("qlink/message", &[message])
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;

    fn enclave() -> Enclave {
        Enclave::new(Arc::new(MockScheme::new(SignatureScheme::mock())), 7)
    }

    struct Deny(ValidatorId);

    impl SigningAuthority for Deny {
        fn may_sign(&self, owner: ValidatorId) -> bool {
            owner != self.0
        }
    }

    #[test]
    fn keygen_is_fresh_and_reproducible() {
        let mut e = enclave();
        let (h1, pk1) = e.keygen(ValidatorId(1));
        let (h2, pk2) = e.keygen(ValidatorId(1));
        assert_ne!(h1, h2);
        assert_ne!(pk1, pk2);
        let mut again = enclave();
        assert_eq!(again.keygen(ValidatorId(1)).1, pk1);
    }

    #[test]
    fn sign_and_verify() {
        let mut e = enclave();
        let (h, pk) = e.keygen(ValidatorId(1));
        let (_, other) = e.keygen(ValidatorId(2));
        let v = e.verifier();
        let sig = e.sign(h, b"m", &AllowAll).unwrap();
        assert_eq!(sig.bytes.len(), 1300);
        assert!(v.verify(&pk, b"m", &sig));
        assert!(!v.verify(&pk, b"m2", &sig));
        assert!(!v.verify(&other, b"m", &sig));
        let mut truncated = sig.clone();
        truncated.bytes.pop();
        assert!(!v.verify(&pk, b"m", &truncated));
        assert_eq!(e.signing_log().len(), 1);
    }

    #[test]
    fn sign_errors() {
        let mut e = enclave();
        let (h, _) = e.keygen(ValidatorId(1));
        assert_eq!(
            e.sign(h, b"m", &Deny(ValidatorId(1))),
            Err(CustodyError::AuthorizationDenied(ValidatorId(1)))
        );
        let ghost = KeyHandle {
            handle_id: 99,
            owner: ValidatorId(1),
        };
        assert_eq!(e.sign(ghost, b"m", &AllowAll), Err(CustodyError::NoSuchKey(99)));
        assert_eq!(e.export_secret(h), Err(CustodyError::KeyExportForbidden));
    }

    fn committee(n: u64) -> (Enclave, Vec<KeyHandle>, BTreeMap<ValidatorId, (PublicKey, bool, u64)>) {
        let mut e = enclave();
        let mut handles = Vec::new();
        let mut view = BTreeMap::new();
        for i in 0..n {
            let (h, pk) = e.keygen(ValidatorId(i));
            handles.push(h);
            view.insert(ValidatorId(i), (pk, true, 1));
        }
        (e, handles, view)
    }

    #[test]
    fn aggregation_examples() {
        let (mut e, hs, view) = committee(4);
        let v = e.verifier();
        let sigs: Vec<_> = hs[..3]
            .iter()
            .map(|&h| e.sign(h, b"m", &AllowAll).unwrap())
            .collect();
        let proof = aggregate_proof(b"m", sigs.clone()).unwrap();
        assert_eq!(proof.size_bytes, 4 + 3 * (10 + 1300));
        assert_eq!(proof.size_bytes, 3934);
        assert!((3072..=6144).contains(&proof.size_bytes));
        assert_eq!(verify_aggregate(&proof, b"m", &view, 3, &v), Ok(()));

        let mut dup = sigs.clone();
        dup.push(sigs[0].clone());
        assert_eq!(aggregate_proof(b"m", dup).unwrap().len(), 3);

        let empty = aggregate_proof(b"m", vec![]).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(
            verify_aggregate(&empty, b"m", &view, 3, &v),
            Err(AggregateReject::ThresholdNotMet { weight: 0, threshold: 3 })
        ));

        let other = e.sign(hs[3], b"x", &AllowAll).unwrap();
        let mut mixed = sigs.clone();
        mixed.push(other);
        assert_eq!(aggregate_proof(b"m", mixed), Err(CustodyError::DigestMismatch));

        let two = aggregate_proof(b"m", sigs[..2].to_vec()).unwrap();
        assert_eq!(
            verify_aggregate(&two, b"m", &view, 3, &v),
            Err(AggregateReject::ThresholdNotMet { weight: 2, threshold: 3 })
        );

        let mut partial = view.clone();
        partial.remove(&ValidatorId(2));
        assert_eq!(
            verify_aggregate(&proof, b"m", &partial, 3, &v),
            Err(AggregateReject::UnregisteredSigner(ValidatorId(2)))
        );
    }

    #[test]
    fn wire_format_round_trip() {
        let (mut e, hs, _) = committee(3);
        let sigs: Vec<_> = hs
            .iter()
            .rev()
            .map(|&h| e.sign(h, b"m", &AllowAll).unwrap())
            .collect();
        let proof = aggregate_proof(b"m", sigs).unwrap();
        let bytes = proof.to_bytes();
        assert_eq!(bytes.len(), proof.size_bytes);
        assert_eq!(&bytes[..4], &[0, 0, 0, 3]);
        assert_eq!(&bytes[4..12], &0u64.to_be_bytes());
        assert_eq!(&bytes[12..14], &1300u16.to_be_bytes());
        let back = AggregatedProof::from_bytes(
            &bytes,
            proof.message_digest,
            SchemeId::MockDeterministic,
        )
        .unwrap();
        assert_eq!(back, proof);
        assert!(AggregatedProof::from_bytes(
            &bytes[..bytes.len() - 1],
            proof.message_digest,
            SchemeId::MockDeterministic
        )
        .is_err());
    }

    #[test]
    fn random_signatures_never_verify() {
        use rand::{RngCore, SeedableRng};
        let (e, _, view) = committee(4);
        let v = e.verifier();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let digest = message_digest(b"m");
        for i in 0..2000u64 {
            let mut bytes = vec![0u8; 1300];
            rng.fill_bytes(&mut bytes);
            let sig = Signature {
                signer: ValidatorId(i % 4),
                scheme_id: SchemeId::MockDeterministic,
                message_digest: digest,
                bytes,
            };
            assert!(!v.verify(&view[&sig.signer].0, b"m", &sig));
        }
    }
}
