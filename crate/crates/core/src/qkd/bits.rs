use std::fmt;

use serde::{Deserialize, Serialize};

/// A bit string stored MSB-first in bytes. Bits past `len` in the last byte are
/// always zero, so equality on the byte vector is equality on the bits.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitString {
    len: u64,
    #[serde(with = "hex_bytes")]
    bytes: Vec<u8>,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

impl BitString {
    pub fn zeros(len: u64) -> Self {
        BitString {
            len,
            bytes: vec![0u8; len.div_ceil(8) as usize],
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        BitString {
            len: bytes.len() as u64 * 8,
            bytes: bytes.to_vec(),
        }
    }

    /// Takes the first `len` bits of `bytes`; missing bytes are zero.
    pub fn from_bytes_truncated(bytes: &[u8], len: u64) -> Self {
        let n = len.div_ceil(8) as usize;
        let mut out = vec![0u8; n];
        let take = n.min(bytes.len());
        out[..take].copy_from_slice(&bytes[..take]);
        let mut s = BitString { len, bytes: out };
        s.clear_tail();
        s
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: u64) -> bool {
        assert!(i < self.len, "bit index out of range");
        self.bytes[(i / 8) as usize] & (0x80 >> (i % 8)) != 0
    }

    pub fn flip(&mut self, i: u64) {
        assert!(i < self.len, "bit index out of range");
        self.bytes[(i / 8) as usize] ^= 0x80 >> (i % 8);
    }

    pub fn count_ones(&self) -> u64 {
        self.bytes.iter().map(|b| b.count_ones() as u64).sum()
    }

    /// Bitwise XOR. Both operands must have the same length.
    pub fn xor(&self, other: &BitString) -> BitString {
        assert_eq!(self.len, other.len, "xor of unequal bit lengths");
        BitString {
            len: self.len,
            bytes: self
                .bytes
                .iter()
                .zip(&other.bytes)
                .map(|(a, b)| a ^ b)
                .collect(),
        }
    }

    /// Appends `other` after the last bit of `self`.
    pub fn concat(&self, other: &BitString) -> BitString {
        let mut out = BitString::zeros(self.len + other.len);
        out.bytes[..self.bytes.len()].copy_from_slice(&self.bytes);
        let shift = (self.len % 8) as u32;
        let base = (self.len / 8) as usize;
        if shift == 0 {
            out.bytes[base..base + other.bytes.len()].copy_from_slice(&other.bytes);
        } else {
            for (i, b) in other.bytes.iter().enumerate() {
                out.bytes[base + i] |= b >> shift;
                if base + i + 1 < out.bytes.len() {
                    out.bytes[base + i + 1] |= b << (8 - shift);
                }
            }
        }
        out.clear_tail();
        out
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 8;
        if rem != 0 {
            if let Some(last) = self.bytes.last_mut() {
                *last &= 0xFFu8 << (8 - rem);
            }
        }
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown = self.bytes.len().min(8);
        write!(
            f,
            "BitString({} bits, {}{})",
            self.len,
            hex::encode(&self.bytes[..shown]),
            if shown < self.bytes.len() { ".." } else { "" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_clears_tail() {
        let s = BitString::from_bytes_truncated(&[0xFF, 0xFF], 12);
        assert_eq!(s.as_bytes(), &[0xFF, 0xF0]);
        assert_eq!(s.count_ones(), 12);
    }

    #[test]
    fn concat_unaligned() {
        let a = BitString::from_bytes_truncated(&[0b1010_0000], 3);
        let b = BitString::from_bytes_truncated(&[0b1100_0000], 2);
        let c = a.concat(&b);
        assert_eq!(c.len(), 5);
        let bits: Vec<bool> = (0..5).map(|i| c.get(i)).collect();
        assert_eq!(bits, vec![true, false, true, true, true]);
    }

    #[test]
    fn xor_identity_and_flip() {
        let a = BitString::from_bytes(&[0x5A, 0xC3]);
        assert_eq!(a.xor(&BitString::zeros(16)), a);
        let mut b = a.clone();
        b.flip(15);
        assert_eq!(a.xor(&b).count_ones(), 1);
    }
}
