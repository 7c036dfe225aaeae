use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::merkle::{build_proof, leaf_hash, merkle_root, MerkleProof};
use super::ChainError;
use crate::hash::{hash_parts, Digest};
use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    pub height: u64,
    pub prev_hash: Digest,
    pub merkle_root: Digest,
    pub timestamp: SimTime,
}

impl Header {
    pub fn hash(&self) -> Digest {
        hash_parts(
            "qlink/header",
            &[
                &self.height.to_be_bytes(),
                &self.prev_hash.0,
                &self.merkle_root.0,
                &self.timestamp.as_micros().to_be_bytes(),
            ],
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: Header,
    #[serde(skip)]
    pub leaves: Vec<Digest>,
}

/// Append-only block list starting from a genesis block at height 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeaderChain {
    pub chain_id: String,
    blocks: Vec<Block>,
}

impl HeaderChain {
    pub fn new(chain_id: impl Into<String>) -> Self {
        let chain_id = chain_id.into();
        let genesis = Header {
            height: 0,
            prev_hash: hash_parts("qlink/genesis", &[chain_id.as_bytes()]),
            merkle_root: merkle_root(&[]),
            timestamp: SimTime::ZERO,
        };
        HeaderChain {
            chain_id,
            blocks: vec![Block {
                header: genesis,
                leaves: Vec::new(),
            }],
        }
    }

    pub fn tip_height(&self) -> u64 {
        self.blocks.len() as u64 - 1
    }

    pub fn tip(&self) -> &Header {
        &self.blocks.last().unwrap().header
    }

    pub fn header(&self, height: u64) -> Option<&Header> {
        self.blocks.get(height as usize).map(|b| &b.header)
    }

    pub fn headers(&self) -> impl Iterator<Item = &Header> {
        self.blocks.iter().map(|b| &b.header)
    }

    pub fn append_block(&mut self, txs: &[Vec<u8>], timestamp: SimTime) -> &Header {
        let leaves: Vec<Digest> = txs.iter().map(|t| leaf_hash(t)).collect();
        let tip = self.tip();
        let header = Header {
            height: tip.height + 1,
            prev_hash: tip.hash(),
            merkle_root: merkle_root(&leaves),
            timestamp,
        };
        self.blocks.push(Block { header, leaves });
        self.tip()
    }

    pub fn merkle_proof(&self, height: u64, tx_index: usize) -> Result<MerkleProof, ChainError> {
        let b = self
            .blocks
            .get(height as usize)
            .ok_or_else(|| ChainError::InvalidParameter(format!("no block at height {height}")))?;
        build_proof(&b.leaves, tx_index)
    }

    /// Linkage and contiguity of every header.
    pub fn is_valid(&self) -> bool {
        self.blocks.windows(2).all(|w| {
            w[1].header.height == w[0].header.height + 1 && w[1].header.prev_hash == w[0].header.hash()
        })
    }

    /// Copy of this chain truncated to `height`, for building a competing fork.
    pub fn fork_at(&self, height: u64) -> HeaderChain {
        let mut f = self.clone();
        f.blocks.truncate(height as usize + 1);
        f
    }

    /// Longest-chain rule: adopts `other` if it shares genesis, is well formed
    /// and strictly longer. Returns true on switch.
    pub fn adopt_if_longer(&mut self, other: &HeaderChain) -> bool {
        if other.chain_id == self.chain_id
            && other.blocks[0] == self.blocks[0]
            && other.tip_height() > self.tip_height()
            && other.is_valid()
        {
            *self = other.clone();
            true
        } else {
            false
        }
    }
}

/// Finality watermark for an Ethereum-like chain. The watermark never moves
/// backwards.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightClient {
    pub chain_id: String,
    pub finalized_height: u64,
    roots: BTreeMap<u64, Digest>,
}

impl LightClient {
    pub fn new(chain_id: impl Into<String>) -> Self {
        LightClient {
            chain_id: chain_id.into(),
            finalized_height: 0,
            roots: BTreeMap::new(),
        }
    }

    /// Moves the watermark to `height`, recording every header root up to it.
    pub fn advance(&mut self, chain: &HeaderChain, height: u64) -> Result<(), ChainError> {
        if height < self.finalized_height {
            return Err(ChainError::WatermarkMonotonicity {
                current: self.finalized_height,
                proposed: height,
            });
        }
        if height > chain.tip_height() {
            return Err(ChainError::InvalidParameter(format!(
                "finality at {height} beyond tip {}",
                chain.tip_height()
            )));
        }
        for h in self.finalized_height..=height {
            let root = chain.header(h).unwrap().merkle_root;
            if let Some(prev) = self.roots.insert(h, root) {
                if prev != root {
                    self.roots.insert(h, prev);
                    return Err(ChainError::WatermarkMonotonicity {
                        current: self.finalized_height,
                        proposed: height,
                    });
                }
            }
        }
        self.finalized_height = height;
        Ok(())
    }

    pub fn finalized_root(&self, height: u64) -> Option<Digest> {
        self.roots.get(&height).copied()
    }
}
