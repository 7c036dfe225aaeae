use serde::{Deserialize, Serialize};

use super::{BitString, KeyStream, QkdError};

/// Bounded store of shared key bits for one link.
///
/// Offsets index the link's key stream. `next_offset` only grows, and every
/// bit that was ever generated is accounted for as consumed, still available,
/// or discarded because the buffer was full.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyBuffer {
    pub capacity: u64,
    pub available_bits: u64,
    pub next_offset: u64,
    pub generated_total: u64,
    pub consumed_total: u64,
    pub overflow_discarded: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyBlock {
    pub offset: u64,
    pub length: u64,
    pub bits: BitString,
}

impl KeyBlock {
    /// Exclusive end offset.
    pub fn end(&self) -> u64 {
        self.offset + self.length
    }
}

impl KeyBuffer {
    pub fn new(capacity: u64) -> Self {
        KeyBuffer {
            capacity,
            available_bits: 0,
            next_offset: 0,
            generated_total: 0,
            consumed_total: 0,
            overflow_discarded: 0,
        }
    }

    /// Adds `floor(rate * dt)` freshly generated bits.
    pub fn tick_generate(&mut self, rate_bps: f64, dt_s: f64) -> u64 {
        if !(dt_s > 0.0) || !(rate_bps > 0.0) {
            return 0;
        }
        let bits = (rate_bps * dt_s).floor() as u64;
        self.credit(bits);
        bits
    }

    /// Adds `bits` generated bits, discarding whatever does not fit.
    pub fn credit(&mut self, bits: u64) {
        self.generated_total += bits;
        let room = self.capacity - self.available_bits;
        let kept = bits.min(room);
        self.available_bits += kept;
        self.overflow_discarded += bits - kept;
    }

    /// Claims the next `n` bits of the stream without materialising them.
    /// Returns the start offset of the claimed range.
    pub fn reserve(&mut self, n: u64) -> Result<u64, QkdError> {
        if n == 0 {
            return Err(QkdError::InvalidParameter("draw of zero bits".into()));
        }
        if n > self.available_bits {
            return Err(QkdError::InsufficientKey {
                requested: n,
                available: self.available_bits,
            });
        }
        let offset = self.next_offset;
        self.available_bits -= n;
        self.next_offset += n;
        self.consumed_total += n;
        Ok(offset)
    }

    pub fn is_conserved(&self) -> bool {
        self.generated_total == self.consumed_total + self.available_bits + self.overflow_discarded
            && self.next_offset == self.consumed_total
            && self.available_bits <= self.capacity
    }
}

/// Draws `n` fresh bits from `buffer`, reading their values from `stream`.
pub fn draw_key(buffer: &mut KeyBuffer, stream: &KeyStream, n: u64) -> Result<KeyBlock, QkdError> {
    let offset = buffer.reserve(n)?;
    Ok(KeyBlock {
        offset,
        length: n,
        bits: stream.bits_at(offset, n),
    })
}
