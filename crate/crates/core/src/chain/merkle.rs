use serde::{Deserialize, Serialize};

use super::ChainError;
use crate::hash::{sha256, Digest};

/// Root of a block with no transactions: SHA-256 of the empty string.
pub fn empty_root() -> Digest {
    sha256(b"")
}

pub fn leaf_hash(tx: &[u8]) -> Digest {
    let mut b = Vec::with_capacity(tx.len() + 1);
    b.push(0x00);
    b.extend_from_slice(tx);
    sha256(&b)
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut b = [0u8; 65];
    b[0] = 0x01;
    b[1..33].copy_from_slice(&left.0);
    b[33..].copy_from_slice(&right.0);
    sha256(&b)
}

/// Folds leaves level by level. An odd node at any level is paired with a
/// copy of itself.
pub fn merkle_root(leaves: &[Digest]) -> Digest {
    if leaves.is_empty() {
        return empty_root();
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    level[0]
}

fn next_level(level: &[Digest]) -> Vec<Digest> {
    level
        .chunks(2)
        .map(|p| node_hash(&p[0], p.get(1).unwrap_or(&p[0])))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Side {
    Left,
    Right,
}

/// Inclusion path from a leaf to a root. Each sibling records which side of
/// the running hash it sits on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub leaf_hash: Digest,
    pub siblings: Vec<(Digest, Side)>,
    pub root: Digest,
}

pub fn build_proof(leaves: &[Digest], index: usize) -> Result<MerkleProof, ChainError> {
    if index >= leaves.len() {
        return Err(ChainError::InvalidParameter(format!(
            "tx index {index} out of range for {} txs",
            leaves.len()
        )));
    }
    let mut siblings = Vec::new();
    let mut level = leaves.to_vec();
    let mut i = index;
    while level.len() > 1 {
        if i.is_multiple_of(2) {
            let s = level.get(i + 1).copied().unwrap_or(level[i]);
            siblings.push((s, Side::Right));
        } else {
            siblings.push((level[i - 1], Side::Left));
        }
        level = next_level(&level);
        i /= 2;
    }
    Ok(MerkleProof {
        leaf_hash: leaves[index],
        siblings,
        root: level[0],
    })
}

pub fn verify_merkle_proof(proof: &MerkleProof) -> bool {
    let folded = proof
        .siblings
        .iter()
        .fold(proof.leaf_hash, |acc, (s, side)| match side {
            Side::Left => node_hash(s, &acc),
            Side::Right => node_hash(&acc, s),
        });
    folded == proof.root
}
