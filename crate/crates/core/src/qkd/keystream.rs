use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::BitString;

/// Offset-addressable shared key stream of one QKD link.
///
/// Both endpoints of a link observe the same bits, so either side can rebuild
/// the pad for any offset. Bits come from ChaCha20 keyed by the scenario seed,
/// with the link id as the stream number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KeyStream {
    seed: u64,
    stream: u64,
}

impl KeyStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        KeyStream { seed, stream }
    }

    /// The `len` bits starting at bit `offset`.
    pub fn bits_at(&self, offset: u64, len: u64) -> BitString {
        if len == 0 {
            return BitString::zeros(0);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        let first_word = offset / 32;
        rng.set_word_pos(first_word as u128);
        let skip = offset % 32;
        let total_bits = skip + len;
        let words = total_bits.div_ceil(32) as usize;
        let mut raw = vec![0u8; words * 4];
        for chunk in raw.chunks_exact_mut(4) {
            chunk.copy_from_slice(&rng.next_u32().to_le_bytes());
        }
        let byte_skip = (skip / 8) as usize;
        let bit_skip = (skip % 8) as u32;
        let out_len = len.div_ceil(8) as usize;
        let mut out = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let hi = raw[byte_skip + i];
            let b = if bit_skip == 0 {
                hi
            } else {
                let lo = raw.get(byte_skip + i + 1).copied().unwrap_or(0);
                (hi << bit_skip) | (lo >> (8 - bit_skip))
            };
            out.push(b);
        }
        BitString::from_bytes_truncated(&out, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_agree_with_one_long_read() {
        let ks = KeyStream::new(7, 3);
        let whole = ks.bits_at(0, 2000);
        for (off, len) in [(0u64, 1u64), (3, 500), (500, 256), (31, 33), (1234, 766)] {
            let part = ks.bits_at(off, len);
            for i in 0..len {
                assert_eq!(part.get(i), whole.get(off + i), "offset {off} bit {i}");
            }
        }
    }

    #[test]
    fn streams_and_seeds_differ() {
        let a = KeyStream::new(1, 0).bits_at(0, 256);
        assert_ne!(a, KeyStream::new(1, 1).bits_at(0, 256));
        assert_ne!(a, KeyStream::new(2, 0).bits_at(0, 256));
        assert_eq!(a, KeyStream::new(1, 0).bits_at(0, 256));
    }
}
