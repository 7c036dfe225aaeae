//! QKD key plane.
//!
//! Fibre links generate shared key bits at `R(d) = R0 * exp(-lambda * d)` into
//! bounded buffers. Every validator message is sealed with a one-time pad drawn
//! from the buffer and authenticated by a one-time polynomial MAC keyed with a
//! further [`MAC_KEY_BITS`] fresh bits. Offsets only move forward, so a key range
//! is never handed out twice.

mod bits;
mod buffer;
mod channel;
mod keystream;
mod ledger;
mod link;
mod mac;
mod network;
mod otp;

pub use bits::BitString;
pub use buffer::{draw_key, KeyBlock, KeyBuffer};
pub use channel::{
    fit_channel_params, key_rate, reference_fit, sustainability_check, traffic_demand_bps,
    ChannelFit, QkdLinkConfig, REFERENCE_RATES,
};
pub use keystream::KeyStream;
pub use ledger::OffsetLedger;
pub use link::{LinkId, QkdLink};
pub use mac::{compute_tag, verify_tag, MAC_KEY_BITS, TAG_BITS};
pub use network::{ConservationAudit, QkdNetwork, Route};
pub use otp::{otp_open, otp_seal, SealedMessage};

use thiserror::Error;

use crate::types::ValidatorId;

/// Bits in one application packet of the validator traffic stream.
pub const PACKET_PAYLOAD_BITS: u64 = 500;

/// Default buffer capacity of a link, in bits.
pub const DEFAULT_BUFFER_BITS: u64 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QkdError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("fit error: {0}")]
    FitError(String),
    #[error("insufficient key: requested {requested} bits, {available} available")]
    InsufficientKey { requested: u64, available: u64 },
    #[error("message authentication failed")]
    AuthenticationFailure,
    #[error("key desynchronised: {0}")]
    KeyDesync(String),
    #[error("link {link} is down (key provider {provider})")]
    LinkDown { link: LinkId, provider: ValidatorId },
    #[error("no key path between {0} and {1}")]
    NoRoute(ValidatorId, ValidatorId),
}
