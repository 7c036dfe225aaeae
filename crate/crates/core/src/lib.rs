//! Deterministic simulator and protocol library for a quantum-safe cross-chain bridge.
//!
//! The crate is organised around the planes of the bridge:
//!
//! - [`qkd`]: distance-attenuated key generation into bounded buffers, one-time-pad
//!   sealing with a Wegman-Carter MAC, and exact key-consumption ledgers.
//! - [`custody`]: post-quantum signing behind an emulated enclave boundary, plus
//!   t-of-n proof aggregation and verification.
//! - [`registry`]: the validator set, quorum thresholds, certification and slashing.
//! - [`consensus`]: a two-phase BFT height machine with rotating leaders, sealed
//!   transport and finality certificates.
//! - [`chain`]: simulated source/destination chains, SPV and light-client checks,
//!   and the lock-and-mint bridge contracts.
//! - [`adversary`]: executable attack scripts for each threat class.
//! - [`harness`]: the discrete-event experiment drivers, metrics and exports.
//!
//! Everything is seeded; two runs with the same configuration produce identical
//! event logs.

pub mod adversary;
pub mod chain;
pub mod consensus;
pub mod custody;
pub mod des;
pub mod eventlog;
pub mod harness;
pub mod hash;
pub mod qkd;
pub mod registry;
pub mod system;
pub mod time;
pub mod types;

pub use hash::Digest;
pub use time::SimTime;
pub use types::ValidatorId;
