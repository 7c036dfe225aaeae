//! Simulated source and destination chains and the bridge contracts.
//!
//! The source chain is checked by SPV (header chain, Merkle inclusion and
//! `k` confirmations); the destination chain by a light-client finality
//! watermark. Contracts mint and release only against a finality certificate
//! whose proposal carries the event.

mod contract;
mod headers;
mod merkle;

pub use contract::{
    verify_finalized_event, verify_lock_event, BridgeContract, ContractResult, CrossChainEvent,
    EventKind, LockEvent, MintResult, ReleaseResult, SimChain,
};
pub use headers::{Block, Header, HeaderChain, LightClient};
pub use merkle::{
    build_proof, empty_root, leaf_hash, merkle_root, node_hash, verify_merkle_proof, MerkleProof, Side,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("finality watermark cannot move from {current} to {proposed}")]
    WatermarkMonotonicity { current: u64, proposed: u64 },
}
