use std::collections::BTreeMap;
use std::fmt;
use std::sync::RwLock;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;

use crate::hash::hash_parts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SchemeId {
    MockDeterministic,
    LatticeProvider,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureScheme {
    pub scheme_id: SchemeId,
    pub signature_size: usize,
    pub public_key_size: usize,
}

impl SignatureScheme {
    pub const DEFAULT_SIGNATURE_SIZE: usize = 1300;
    pub const DEFAULT_PUBLIC_KEY_SIZE: usize = 1312;

    pub fn mock() -> Self {
        SignatureScheme {
            scheme_id: SchemeId::MockDeterministic,
            signature_size: Self::DEFAULT_SIGNATURE_SIZE,
            public_key_size: Self::DEFAULT_PUBLIC_KEY_SIZE,
        }
    }

    /// Mock scheme with Falcon-512 sized signatures and keys.
    pub fn falcon_sized() -> Self {
        SignatureScheme {
            scheme_id: SchemeId::MockDeterministic,
            signature_size: 666,
            public_key_size: 897,
        }
    }

    /// Mock scheme with ML-DSA-44 (Dilithium2) sized signatures and keys.
    pub fn dilithium_sized() -> Self {
        SignatureScheme {
            scheme_id: SchemeId::MockDeterministic,
            signature_size: 2420,
            public_key_size: 1312,
        }
    }

    /// Every scheme the crate can instantiate is post-quantum; there is no
    /// classical scheme on the trust path.
    pub fn is_post_quantum(&self) -> bool {
        true
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.signature_size == 0 || self.signature_size > u16::MAX as usize {
            return Err(format!(
                "signature_size must be in 1..=65535, got {}",
                self.signature_size
            ));
        }
        if self.public_key_size < 32 {
            return Err(format!(
                "public_key_size must be >= 32, got {}",
                self.public_key_size
            ));
        }
        Ok(())
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PublicKey(#[serde(with = "hex_vec")] pub Vec<u8>);

mod hex_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn fingerprint(&self) -> String {
        hex::encode(&hash_parts("qlink/pk-fingerprint", &[&self.0]).0[..8])
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}, {} B)", self.fingerprint(), self.0.len())
    }
}

/// Secret signing key. Lives only inside the enclave store: it has no
/// serializer, its `Debug` output is redacted and its bytes are not reachable
/// from outside the custody module.
pub struct SecretKey(Vec<u8>);

impl SecretKey {
    pub(super) fn new(bytes: Vec<u8>) -> Self {
        SecretKey(bytes)
    }

    pub(super) fn expose(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(<sealed>)")
    }
}

impl Drop for SecretKey {
    fn drop(&mut self) {
        self.0.iter_mut().for_each(|b| *b = 0);
    }
}

/// Signing algorithm plugged behind the enclave.
///
/// The enclave is the only caller of `keygen` and `sign`; `verify` is public.
pub trait SignatureProvider: Send + Sync {
    fn scheme(&self) -> &SignatureScheme;
    fn keygen(&self, seed: [u8; 32]) -> (SecretKey, PublicKey);
    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Vec<u8>;
    fn verify(&self, public_key: &PublicKey, message: &[u8], signature: &[u8]) -> bool;
}

/// Deterministic keyed-hash stand-in for a lattice signature scheme.
///
/// Signatures are a ChaCha20 stream keyed by `H(sk, H(m))`, cut to the
/// configured size. Public keys are an expansion of `H(sk)`. Verification is
/// answered by the provider itself, which remembers which secret belongs to
/// which public key; it behaves as an ideal signature functionality: without
/// the secret no public operation yields a verifying signature.
pub struct MockScheme {
    scheme: SignatureScheme,
    registered: RwLock<BTreeMap<PublicKey, [u8; 32]>>,
}

impl MockScheme {
    pub fn new(scheme: SignatureScheme) -> Self {
        MockScheme {
            scheme,
            registered: RwLock::new(BTreeMap::new()),
        }
    }

    fn expand(key: [u8; 32], len: usize) -> Vec<u8> {
        let mut rng = ChaCha20Rng::from_seed(key);
        let mut out = vec![0u8; len];
        rng.fill_bytes(&mut out);
        out
    }

    /// The public signing algorithm applied to arbitrary candidate secret bytes.
    pub fn sign_with_candidate(&self, candidate_secret: &[u8], message: &[u8]) -> Vec<u8> {
        let m = hash_parts("qlink/mock-msg", &[message]);
        let k = hash_parts("qlink/mock-sig", &[candidate_secret, &m.0]);
        Self::expand(k.0, self.scheme.signature_size)
    }

    /// Public key the mock algorithm derives from candidate secret bytes.
    pub fn public_key_for_candidate(&self, candidate_secret: &[u8]) -> PublicKey {
        let k = hash_parts("qlink/mock-pk", &[candidate_secret]);
        PublicKey(Self::expand(k.0, self.scheme.public_key_size))
    }
}

impl SignatureProvider for MockScheme {
    fn scheme(&self) -> &SignatureScheme {
        &self.scheme
    }

    fn keygen(&self, seed: [u8; 32]) -> (SecretKey, PublicKey) {
        let sk = hash_parts("qlink/mock-sk", &[&seed]).0;
        let pk = self.public_key_for_candidate(&sk);
        self.registered
            .write()
            .expect("mock key table poisoned")
            .insert(pk.clone(), sk);
        (SecretKey::new(sk.to_vec()), pk)
    }

    fn sign(&self, secret: &SecretKey, message: &[u8]) -> Vec<u8> {
        self.sign_with_candidate(secret.expose(), message)
    }

    fn verify(&self, public_key: &PublicKey, message: &[u8], signature: &[u8]) -> bool {
        if signature.len() != self.scheme.signature_size {
            return false;
        }
        let table = self.registered.read().expect("mock key table poisoned");
        let Some(sk) = table.get(public_key) else {
            return false;
        };
        self.sign_with_candidate(sk, message)
            .ct_eq(signature)
            .into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_scheme() {
        for scheme in [
            SignatureScheme::mock(),
            SignatureScheme::falcon_sized(),
            SignatureScheme::dilithium_sized(),
        ] {
            let p = MockScheme::new(scheme.clone());
            let (sk, pk) = p.keygen([1; 32]);
            assert_eq!(pk.0.len(), scheme.public_key_size);
            let sig = p.sign(&sk, b"m");
            assert_eq!(sig.len(), scheme.signature_size);
            assert!(p.verify(&pk, b"m", &sig));
            assert!(!p.verify(&pk, b"n", &sig));
            assert!(!p.verify(&pk, b"m", &sig[1..]));
        }
    }

    #[test]
    fn secret_debug_is_redacted() {
        let p = MockScheme::new(SignatureScheme::mock());
        let (sk, _) = p.keygen([2; 32]);
        assert_eq!(format!("{sk:?}"), "SecretKey(<sealed>)");
    }

    #[test]
    fn scheme_validation() {
        assert!(SignatureScheme::mock().validate().is_ok());
        let mut s = SignatureScheme::mock();
        s.signature_size = 0;
        assert!(s.validate().is_err());
    }
}
