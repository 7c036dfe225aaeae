use std::fmt;

use serde::{Deserialize, Serialize};

use super::{otp_seal, BitString, KeyBuffer, KeyStream, OffsetLedger, QkdError, QkdLinkConfig};
use super::{SealedMessage, MAC_KEY_BITS};
use crate::time::SimTime;
use crate::types::ValidatorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkId(pub u32);

impl fmt::Display for LinkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

/// One fibre link: rate model, key buffer, shared key stream and the ledger
/// of every offset range the sending side has consumed.
#[derive(Clone, Debug)]
pub struct QkdLink {
    pub id: LinkId,
    pub config: QkdLinkConfig,
    pub buffer: KeyBuffer,
    pub consumed: OffsetLedger,
    stream: KeyStream,
    rate_bps: f64,
    gen_start: SimTime,
    clock: SimTime,
    down_by: Option<ValidatorId>,
    pub messages_sealed: u64,
    pub payload_bits: u64,
    pub mac_key_bits: u64,
}

impl QkdLink {
    /// Generation starts at `gen_start`; the key stream is derived from `seed`
    /// and the link id.
    pub fn new(
        id: LinkId,
        config: QkdLinkConfig,
        seed: u64,
        gen_start: SimTime,
    ) -> Result<Self, QkdError> {
        config.validate()?;
        let rate_bps = config.rate()?;
        Ok(QkdLink {
            id,
            buffer: KeyBuffer::new(config.buffer_capacity),
            consumed: OffsetLedger::new(),
            stream: KeyStream::new(seed, id.0 as u64),
            rate_bps,
            gen_start,
            clock: SimTime::ZERO,
            down_by: None,
            messages_sealed: 0,
            payload_bits: 0,
            mac_key_bits: 0,
            config,
        })
    }

    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }

    pub fn stream(&self) -> &KeyStream {
        &self.stream
    }

    pub fn endpoints(&self) -> (ValidatorId, ValidatorId) {
        (self.config.endpoint_a, self.config.endpoint_b)
    }

    pub fn connects(&self, v: ValidatorId) -> bool {
        self.config.connects(v)
    }

    pub fn other_end(&self, v: ValidatorId) -> Option<ValidatorId> {
        if self.config.endpoint_a == v {
            Some(self.config.endpoint_b)
        } else if self.config.endpoint_b == v {
            Some(self.config.endpoint_a)
        } else {
            None
        }
    }

    pub fn is_up(&self) -> bool {
        self.down_by.is_none()
    }

    pub fn down_by(&self) -> Option<ValidatorId> {
        self.down_by
    }

    fn cumulative_bits(&self, t: SimTime) -> u64 {
        if t <= self.gen_start {
            return 0;
        }
        (self.rate_bps * (t - self.gen_start).as_secs_f64()).floor() as u64
    }

    /// Credits key generated up to `t`. Generation is computed cumulatively from
    /// the start time, so the total does not depend on how often this is called.
    pub fn advance_to(&mut self, t: SimTime) {
        if t <= self.clock {
            return;
        }
        if self.is_up() {
            let due = self.cumulative_bits(t) - self.cumulative_bits(self.clock);
            self.buffer.credit(due);
        }
        self.clock = t;
    }

    /// Stops generation and refuses all further draws. `provider` is the
    /// endpoint blamed for the outage.
    pub fn sever(&mut self, provider: ValidatorId) {
        if self.down_by.is_none() {
            self.down_by = Some(provider);
        }
    }

    pub fn seal(
        &mut self,
        from: ValidatorId,
        to: ValidatorId,
        plaintext: &BitString,
    ) -> Result<SealedMessage, QkdError> {
        if let Some(provider) = self.down_by {
            return Err(QkdError::LinkDown {
                link: self.id,
                provider,
            });
        }
        if !(self.connects(from) && self.other_end(from) == Some(to)) {
            return Err(QkdError::InvalidParameter(format!(
                "{} does not join {from} and {to}",
                self.id
            )));
        }
        let msg = otp_seal(plaintext, &mut self.buffer, &self.stream, self.id, from, to)?;
        self.consumed.insert(msg.key_offset, msg.key_bits());
        self.messages_sealed += 1;
        self.payload_bits += plaintext.len();
        self.mac_key_bits += MAC_KEY_BITS;
        Ok(msg)
    }

    /// Conservation of the buffer plus agreement between buffer and ledger.
    pub fn is_consistent(&self) -> bool {
        self.buffer.is_conserved()
            && self.consumed.overlap_count() == 0
            && self.consumed.total_bits() == self.buffer.consumed_total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link() -> QkdLink {
        let cfg = QkdLinkConfig {
            endpoint_a: ValidatorId(0),
            endpoint_b: ValidatorId(1),
            distance_km: 0.0,
            base_rate_r0: 1_000_000.0,
            attenuation_lambda: 0.0,
            buffer_capacity: 10_000_000,
        };
        QkdLink::new(LinkId(0), cfg, 1, SimTime::from_millis(40)).unwrap()
    }

    #[test]
    fn generation_is_cumulative() {
        let mut a = link();
        let mut b = link();
        a.advance_to(SimTime::from_secs(1));
        for ms in (1..=1000).step_by(7) {
            b.advance_to(SimTime::from_millis(ms));
        }
        b.advance_to(SimTime::from_secs(1));
        assert_eq!(a.buffer.generated_total, 960_000);
        assert_eq!(a.buffer.generated_total, b.buffer.generated_total);
    }

    #[test]
    fn severed_link_refuses() {
        let mut l = link();
        l.advance_to(SimTime::from_secs(1));
        l.sever(ValidatorId(0));
        let g = l.buffer.generated_total;
        l.advance_to(SimTime::from_secs(2));
        assert_eq!(l.buffer.generated_total, g);
        assert_eq!(
            l.seal(ValidatorId(0), ValidatorId(1), &BitString::zeros(8)),
            Err(QkdError::LinkDown {
                link: LinkId(0),
                provider: ValidatorId(0)
            })
        );
    }

    #[test]
    fn seal_records_ledger() {
        let mut l = link();
        l.advance_to(SimTime::from_secs(1));
        for _ in 0..10 {
            l.seal(ValidatorId(1), ValidatorId(0), &BitString::zeros(500))
                .unwrap();
        }
        assert_eq!(l.consumed.total_bits(), 7560);
        assert_eq!(l.consumed.run_count(), 1);
        assert!(l.is_consistent());
        assert!(l
            .seal(ValidatorId(1), ValidatorId(2), &BitString::zeros(8))
            .is_err());
    }
}
