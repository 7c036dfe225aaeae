use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::headers::{HeaderChain, LightClient};
use super::merkle::{leaf_hash, verify_merkle_proof, MerkleProof};
use super::ChainError;
use crate::consensus::FinalityCertificate;
use crate::custody::{AggregateReject, PublicKey, RegistryView, Verifier};
use crate::hash::{hash_parts, Digest};
use crate::registry::Registry;
use crate::time::SimTime;
use crate::types::ValidatorId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Lock,
    Burn,
}

/// A lock on the source chain or a burn on the destination chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossChainEvent {
    pub event_id: Digest,
    pub kind: EventKind,
    pub chain_id: String,
    pub amount: u64,
    pub sender: String,
    pub recipient: String,
    pub block_height: u64,
    pub tx_index: usize,
    pub nonce: u64,
}

pub type LockEvent = CrossChainEvent;

impl CrossChainEvent {
    pub fn compute_id(chain_id: &str, block_height: u64, tx_index: usize, nonce: u64) -> Digest {
        hash_parts(
            "qlink/event",
            &[
                chain_id.as_bytes(),
                &block_height.to_be_bytes(),
                &(tx_index as u64).to_be_bytes(),
                &nonce.to_be_bytes(),
            ],
        )
    }

    pub fn id_is_bound(&self) -> bool {
        self.event_id == Self::compute_id(&self.chain_id, self.block_height, self.tx_index, self.nonce)
    }

    /// Transaction bytes as stored in the block.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = b"qlink/tx".to_vec();
        out.extend_from_slice(&self.event_id.0);
        out.push(match self.kind {
            EventKind::Lock => 1,
            EventKind::Burn => 2,
        });
        out.extend_from_slice(&self.amount.to_be_bytes());
        for s in [&self.chain_id, &self.sender, &self.recipient] {
            out.extend_from_slice(&(s.len() as u32).to_be_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        out.extend_from_slice(&self.block_height.to_be_bytes());
        out.extend_from_slice(&(self.tx_index as u64).to_be_bytes());
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out
    }

    /// Digest validators certify: binds every field, including the amount.
    pub fn commitment(&self) -> Digest {
        hash_parts("qlink/event-commitment", &[&self.encode()])
    }

    pub fn leaf(&self) -> Digest {
        leaf_hash(&self.encode())
    }
}

/// A simulated chain: header chain plus the transactions waiting for the next block.
#[derive(Clone, Debug)]
pub struct SimChain {
    pub headers: HeaderChain,
    pub block_interval: SimTime,
    mempool: Vec<Vec<u8>>,
}

impl SimChain {
    pub fn new(chain_id: impl Into<String>, block_interval: SimTime) -> Self {
        SimChain {
            headers: HeaderChain::new(chain_id),
            block_interval,
            mempool: Vec::new(),
        }
    }

    pub fn chain_id(&self) -> &str {
        &self.headers.chain_id
    }

    pub fn pending(&self) -> usize {
        self.mempool.len()
    }

    /// Produces the next block from the mempool.
    pub fn seal_block(&mut self, timestamp: SimTime) -> u64 {
        let txs = std::mem::take(&mut self.mempool);
        self.headers.append_block(&txs, timestamp).height
    }

    /// Queues a transaction for the next block. Returns its future height.
    pub fn submit_tx(&mut self, tx: Vec<u8>) -> u64 {
        self.mempool.push(tx);
        self.headers.tip_height() + 1
    }
}

/// SPV check: inclusion under the header at the event's height and at least
/// `k` confirmations, counting the event's own block.
pub fn verify_lock_event(event: &CrossChainEvent, proof: &MerkleProof, chain: &HeaderChain, k: u64) -> bool {
    let Some(header) = chain.header(event.block_height) else {
        return false;
    };
    event.id_is_bound()
        && proof.leaf_hash == event.leaf()
        && proof.root == header.merkle_root
        && verify_merkle_proof(proof)
        && chain.tip_height() + 1 >= event.block_height + k
}

/// Light-client check: the event's block is at or below the finality watermark
/// and the proof folds to the finalized root recorded for that height.
pub fn verify_finalized_event(event: &CrossChainEvent, proof: &MerkleProof, lc: &LightClient) -> bool {
    event.block_height <= lc.finalized_height
        && event.id_is_bound()
        && lc.finalized_root(event.block_height) == Some(proof.root)
        && proof.leaf_hash == event.leaf()
        && verify_merkle_proof(proof)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContractResult {
    Minted { amount: u64 },
    Released { amount: u64 },
    RejectReplay,
    RejectNoQkdPath,
    /// The certified proposal does not carry this event, or the event is not
    /// one this contract accepts.
    RejectEvent { reason: String },
    RejectDigest,
    RejectSigner { signer: ValidatorId },
    RejectInvalidSignature { signer: ValidatorId },
    RejectThreshold { weight: u64, threshold: u64 },
    RejectOverBurn { requested: u64, available: u64 },
}

pub type MintResult = ContractResult;
pub type ReleaseResult = ContractResult;

impl ContractResult {
    pub fn is_ok(&self) -> bool {
        matches!(self, ContractResult::Minted { .. } | ContractResult::Released { .. })
    }

    pub fn code(&self) -> &'static str {
        match self {
            ContractResult::Minted { .. } => "MINTED",
            ContractResult::Released { .. } => "RELEASED",
            ContractResult::RejectReplay => "REJECT_REPLAY",
            ContractResult::RejectNoQkdPath => "REJECT_NO_QKD_PATH",
            ContractResult::RejectEvent { .. } => "REJECT_EVENT",
            ContractResult::RejectDigest => "REJECT_DIGEST",
            ContractResult::RejectSigner { .. } => "REJECT_SIGNER",
            ContractResult::RejectInvalidSignature { .. } => "REJECT_INVALID_SIGNATURE",
            ContractResult::RejectThreshold { .. } => "REJECT_THRESHOLD",
            ContractResult::RejectOverBurn { .. } => "REJECT_OVER_BURN",
        }
    }
}

impl From<AggregateReject> for ContractResult {
    fn from(r: AggregateReject) -> Self {
        match r {
            AggregateReject::DigestMismatch => ContractResult::RejectDigest,
            AggregateReject::UnregisteredSigner(s) | AggregateReject::InactiveSigner(s) => {
                ContractResult::RejectSigner { signer: s }
            }
            AggregateReject::InvalidSignature(s) => ContractResult::RejectInvalidSignature { signer: s },
            AggregateReject::ThresholdNotMet { weight, threshold } => {
                ContractResult::RejectThreshold { weight, threshold }
            }
        }
    }
}

/// Lock-and-mint contract. The same type serves as the source side (locks,
/// releases) and the destination side (mints, burns).
#[derive(Clone, Debug, Serialize)]
pub struct BridgeContract {
    pub chain_id: String,
    pub paired_chain: String,
    pub locked_total: u64,
    pub minted_total: u64,
    consumed_event_ids: BTreeSet<Digest>,
    next_nonce: u64,
    #[serde(skip)]
    view: BTreeMap<ValidatorId, (PublicKey, bool, u64)>,
    pub threshold: u64,
    pub qkd_hub_present: bool,
    #[serde(skip)]
    verifier: Verifier,
}

impl BridgeContract {
    pub fn new(chain_id: impl Into<String>, paired_chain: impl Into<String>, verifier: Verifier) -> Self {
        BridgeContract {
            chain_id: chain_id.into(),
            paired_chain: paired_chain.into(),
            locked_total: 0,
            minted_total: 0,
            consumed_event_ids: BTreeSet::new(),
            next_nonce: 0,
            view: BTreeMap::new(),
            threshold: u64::MAX,
            qkd_hub_present: false,
            verifier,
        }
    }

    /// Copies the signer set, threshold and hub flag from the registry.
    pub fn sync_registry(&mut self, registry: &Registry) {
        self.view = registry
            .records()
            .filter_map(|r| {
                let e = registry.signer(r.id)?;
                Some((r.id, (e.public_key.clone(), e.active, e.weight)))
            })
            .collect();
        self.threshold = registry.threshold().unwrap_or(u64::MAX);
        self.qkd_hub_present = registry.qkd_hub_present();
    }

    pub fn consumed_count(&self) -> usize {
        self.consumed_event_ids.len()
    }

    pub fn is_consumed(&self, event_id: &Digest) -> bool {
        self.consumed_event_ids.contains(event_id)
    }

    fn new_event(
        &mut self,
        chain: &mut SimChain,
        kind: EventKind,
        sender: &str,
        amount: u64,
        recipient: &str,
    ) -> CrossChainEvent {
        let nonce = self.next_nonce;
        self.next_nonce += 1;
        let chain_id = chain.chain_id().to_string();
        let (block_height, tx_index) = (chain.headers.tip_height() + 1, chain.pending());
        let ev = CrossChainEvent {
            event_id: CrossChainEvent::compute_id(&chain_id, block_height, tx_index, nonce),
            kind,
            chain_id,
            amount,
            sender: sender.to_string(),
            recipient: recipient.to_string(),
            block_height,
            tx_index,
            nonce,
        };
        chain.submit_tx(ev.encode());
        ev
    }

    /// Escrows `amount` and places a lock event in the chain's next block.
    pub fn submit_lock(
        &mut self,
        chain: &mut SimChain,
        sender: &str,
        amount: u64,
        recipient: &str,
    ) -> Result<CrossChainEvent, ChainError> {
        if amount == 0 {
            return Err(ChainError::InvalidParameter("lock amount must be positive".into()));
        }
        let ev = self.new_event(chain, EventKind::Lock, sender, amount, recipient);
        self.locked_total += amount;
        Ok(ev)
    }

    /// Burns wrapped tokens and places a burn event in the chain's next block.
    pub fn submit_burn(
        &mut self,
        chain: &mut SimChain,
        sender: &str,
        amount: u64,
        recipient: &str,
    ) -> Result<CrossChainEvent, ContractResult> {
        if amount == 0 || amount > self.minted_total {
            return Err(ContractResult::RejectOverBurn {
                requested: amount,
                available: self.minted_total,
            });
        }
        let ev = self.new_event(chain, EventKind::Burn, sender, amount, recipient);
        self.minted_total -= amount;
        Ok(ev)
    }

    fn check(&self, event: &CrossChainEvent, cert: &FinalityCertificate, kind: EventKind) -> Result<(), ContractResult> {
        if self.consumed_event_ids.contains(&event.event_id) {
            return Err(ContractResult::RejectReplay);
        }
        if !self.qkd_hub_present {
            return Err(ContractResult::RejectNoQkdPath);
        }
        let reject = |reason: &str| ContractResult::RejectEvent { reason: reason.into() };
        if event.kind != kind || event.chain_id != self.paired_chain {
            return Err(reject("event kind or chain not accepted here"));
        }
        if !event.id_is_bound() {
            return Err(reject("event id does not match its fields"));
        }
        if !cert.proposal.events.contains(&event.commitment()) {
            return Err(reject("event not in certified proposal"));
        }
        cert.verify(&self.view, self.threshold, &self.verifier)
            .map_err(ContractResult::from)
    }

    /// Mints wrapped tokens for a certified lock event.
    pub fn contract_mint(&mut self, event: &CrossChainEvent, cert: &FinalityCertificate) -> MintResult {
        if let Err(r) = self.check(event, cert, EventKind::Lock) {
            return r;
        }
        self.consumed_event_ids.insert(event.event_id);
        self.minted_total += event.amount;
        ContractResult::Minted { amount: event.amount }
    }

    /// Releases escrowed assets for a certified burn event.
    pub fn contract_release(&mut self, event: &CrossChainEvent, cert: &FinalityCertificate) -> ReleaseResult {
        if let Err(r) = self.check(event, cert, EventKind::Burn) {
            return r;
        }
        if event.amount > self.locked_total {
            return ContractResult::RejectOverBurn {
                requested: event.amount,
                available: self.locked_total,
            };
        }
        self.consumed_event_ids.insert(event.event_id);
        self.locked_total -= event.amount;
        ContractResult::Released { amount: event.amount }
    }
}
