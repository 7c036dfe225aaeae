use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{message_digest, CustodyError, PublicKey, SchemeId, SecretKey, Signature};
use super::{SignatureProvider, SignatureScheme};
use crate::hash::{hash_parts, Digest};
use crate::types::ValidatorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyHandle {
    pub handle_id: u64,
    pub owner: ValidatorId,
}

/// Who may currently use their keys. The registry implements this.
pub trait SigningAuthority {
    fn may_sign(&self, owner: ValidatorId) -> bool;
}

/// Authority that permits every owner; for standalone use of the enclave.
pub struct AllowAll;

impl SigningAuthority for AllowAll {
    fn may_sign(&self, _owner: ValidatorId) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignRecord {
    pub seq: u64,
    pub owner: ValidatorId,
    pub digest: Digest,
}

struct Slot {
    owner: ValidatorId,
    secret: SecretKey,
    public: PublicKey,
}

/// Emulated HSM. Holds every secret key of a simulation; signs on request but
/// has no operation that returns secret bytes.
pub struct Enclave {
    provider: Arc<dyn SignatureProvider>,
    seed: u64,
    next_handle: u64,
    slots: BTreeMap<u64, Slot>,
    log: Vec<SignRecord>,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("scheme", self.provider.scheme())
            .field("keys", &self.slots.len())
            .field("signatures_issued", &self.log.len())
            .finish()
    }
}

impl Enclave {
    pub fn new(provider: Arc<dyn SignatureProvider>, seed: u64) -> Self {
        Enclave {
            provider,
            seed,
            next_handle: 0,
            slots: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn scheme(&self) -> &SignatureScheme {
        self.provider.scheme()
    }

    /// Creates a key pair for `owner`. Key material is derived from the enclave
    /// seed and a per-enclave counter, so the same seed gives the same keys.
    pub fn keygen(&mut self, owner: ValidatorId) -> (KeyHandle, PublicKey) {
        let handle_id = self.next_handle;
        self.next_handle += 1;
        let seed = hash_parts(
            "qlink/enclave-keygen",
            &[
                &self.seed.to_be_bytes(),
                &owner.to_be_bytes(),
                &handle_id.to_be_bytes(),
            ],
        );
        let (secret, public) = self.provider.keygen(seed.0);
        self.slots.insert(
            handle_id,
            Slot {
                owner,
                secret,
                public: public.clone(),
            },
        );
        (KeyHandle { handle_id, owner }, public)
    }

    fn slot(&self, handle: KeyHandle) -> Result<&Slot, CustodyError> {
        self.slots
            .get(&handle.handle_id)
            .filter(|s| s.owner == handle.owner)
            .ok_or(CustodyError::NoSuchKey(handle.handle_id))
    }

    pub fn public_key(&self, handle: KeyHandle) -> Result<PublicKey, CustodyError> {
        Ok(self.slot(handle)?.public.clone())
    }

    /// Signs `message` if `authority` still allows the handle's owner to sign.
    pub fn sign(
        &mut self,
        handle: KeyHandle,
        message: &[u8],
        authority: &dyn SigningAuthority,
    ) -> Result<Signature, CustodyError> {
        let slot = self.slot(handle)?;
        if !authority.may_sign(slot.owner) {
            return Err(CustodyError::AuthorizationDenied(slot.owner));
        }
        let bytes = self.provider.sign(&slot.secret, message);
        let digest = message_digest(message);
        let owner = slot.owner;
        self.log.push(SignRecord {
            seq: self.log.len() as u64,
            owner,
            digest,
        });
        Ok(Signature {
            signer: owner,
            scheme_id: self.provider.scheme().scheme_id,
            message_digest: digest,
            bytes,
        })
    }

    /// Secret keys never leave the enclave; this always refuses.
    pub fn export_secret(&self, handle: KeyHandle) -> Result<Vec<u8>, CustodyError> {
        let _ = handle;
        Err(CustodyError::KeyExportForbidden)
    }

    pub fn handles(&self) -> Vec<KeyHandle> {
        self.slots
            .iter()
            .map(|(&handle_id, s)| KeyHandle {
                handle_id,
                owner: s.owner,
            })
            .collect()
    }

    pub fn signing_log(&self) -> &[SignRecord] {
        &self.log
    }

    pub fn signatures_issued(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn verifier(&self) -> Verifier {
        Verifier {
            provider: Arc::clone(&self.provider),
        }
    }
}

/// Public verification side of the configured scheme.
#[derive(Clone)]
pub struct Verifier {
    provider: Arc<dyn SignatureProvider>,
}

impl fmt::Debug for Verifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Verifier")
            .field("scheme", self.provider.scheme())
            .finish()
    }
}

impl Verifier {
    pub fn scheme(&self) -> &SignatureScheme {
        self.provider.scheme()
    }

    pub fn scheme_id(&self) -> SchemeId {
        self.provider.scheme().scheme_id
    }

    /// True iff `sig` was produced by the key paired with `public_key` over
    /// exactly `message`. Malformed signatures verify as false.
    pub fn verify(&self, public_key: &PublicKey, message: &[u8], sig: &Signature) -> bool {
        sig.scheme_id == self.scheme_id()
            && sig.bytes.len() == self.scheme().signature_size
            && sig.message_digest == message_digest(message)
            && self.provider.verify(public_key, message, &sig.bytes)
    }
}
