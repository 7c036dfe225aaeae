//! One-time polynomial MAC (Wegman-Carter style) keyed by fresh QKD bits.
//!
//! Poly1305 with a key used exactly once is an information-theoretic
//! authenticator: the first 128 key bits are the polynomial evaluation point,
//! the last 128 bits the one-time pad for the tag.

use poly1305::universal_hash::KeyInit;
use poly1305::Poly1305;
use subtle::ConstantTimeEq;

use super::BitString;

pub const MAC_KEY_BITS: u64 = 256;
pub const TAG_BITS: u64 = 128;

fn mac_input(ciphertext: &BitString) -> Vec<u8> {
    let mut data = Vec::with_capacity(8 + ciphertext.as_bytes().len());
    data.extend_from_slice(&ciphertext.len().to_be_bytes());
    data.extend_from_slice(ciphertext.as_bytes());
    data
}

/// Tag over `(bit length || ciphertext)`. `key` must be exactly [`MAC_KEY_BITS`] long.
pub fn compute_tag(key: &BitString, ciphertext: &BitString) -> [u8; 16] {
    assert_eq!(key.len(), MAC_KEY_BITS, "MAC key must be {MAC_KEY_BITS} bits");
    let mac = Poly1305::new(key.as_bytes().into());
    mac.compute_unpadded(&mac_input(ciphertext)).into()
}

pub fn verify_tag(key: &BitString, ciphertext: &BitString, tag: &[u8; 16]) -> bool {
    compute_tag(key, ciphertext).ct_eq(tag).into()
}
