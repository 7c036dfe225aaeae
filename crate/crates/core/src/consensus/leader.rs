use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ConsensusError;
use crate::hash::hash_parts;
use crate::types::ValidatorId;

/// Leader of slot `height + round`.
///
/// Slots are grouped into epochs of `n` slots. Each epoch uses a seeded
/// permutation of the sorted active set, so every validator leads exactly once
/// per epoch.
pub fn select_leader(
    height: u64,
    round: u32,
    active: &[ValidatorId],
    seed: u64,
) -> Result<ValidatorId, ConsensusError> {
    if active.is_empty() {
        return Err(ConsensusError::EmptyRegistry);
    }
    let mut ids = active.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len() as u64;
    let slot = height + round as u64;
    let epoch = slot / n;
    let key = hash_parts("qlink/leader", &[&seed.to_be_bytes(), &epoch.to_be_bytes()]);
    let mut rng = ChaCha8Rng::from_seed(key.0);
    ids.shuffle(&mut rng);
    Ok(ids[(slot % n) as usize])
}
