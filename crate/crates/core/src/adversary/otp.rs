//! Harvest-now-decrypt-later against OTP-sealed traffic.
//!
//! An attacker holding only ciphertexts can pair each one with any candidate
//! plaintext: the implied pad `c XOR m` is a valid key for every candidate,
//! and for a uniform pad it is itself uniform. The frequency test below
//! checks that no candidate's implied pad stands out. The control decrypts
//! the same recordings with the real pads to show the recordings are intact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::qkd::{otp_open, BitString, KeyBlock, SealedMessage};

/// Bits needed before the frequency test is meaningful.
pub const MONOBIT_MIN_BITS: u64 = 100_000;
/// Largest accepted `|ones/len - 0.5|`.
pub const MONOBIT_TOLERANCE: f64 = 0.02;

/// `|ones/len - 0.5|` of `bits`.
pub fn monobit_deviation(bits: &BitString) -> f64 {
    if bits.is_empty() {
        return 0.5;
    }
    (bits.count_ones() as f64 / bits.len() as f64 - 0.5).abs()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestReport {
    pub messages: usize,
    pub bits: u64,
    /// Frequency deviation of the pads implied by the true plaintexts.
    pub deviation_true_candidate: f64,
    /// Frequency deviation of the pads implied by all-zero plaintexts.
    pub deviation_zero_candidate: f64,
    /// Every recorded ciphertext admits a pad for each candidate plaintext.
    pub every_candidate_consistent: bool,
    /// Messages the control (holding the real pads) decrypted and authenticated.
    pub control_decrypted: usize,
}

impl HarvestReport {
    /// Both candidates look equally uniform, enough bits were recorded and the
    /// control recovered every message.
    pub fn defended(&self) -> bool {
        self.bits >= MONOBIT_MIN_BITS
            && self.deviation_true_candidate < MONOBIT_TOLERANCE
            && self.deviation_zero_candidate < MONOBIT_TOLERANCE
            && self.every_candidate_consistent
            && self.control_decrypted == self.messages
    }
}

/// Analyses `recorded` ciphertexts. `control_keys` maps a message index to its
/// real pad and MAC key; they are used only by the control and to obtain the
/// true plaintexts the attacker would be guessing between.
pub fn harvest_then_decrypt(
    recorded: &[SealedMessage],
    control_keys: &BTreeMap<usize, (KeyBlock, KeyBlock)>,
) -> HarvestReport {
    let mut implied_true = BitString::zeros(0);
    let mut implied_zero = BitString::zeros(0);
    let mut consistent = true;
    let mut decrypted = 0;
    for (i, msg) in recorded.iter().enumerate() {
        let c = &msg.ciphertext;
        let zero = BitString::zeros(c.len());
        let pad_zero = c.xor(&zero);
        consistent &= c.xor(&pad_zero) == zero;
        implied_zero = implied_zero.concat(&pad_zero);

        if let Some((pad, mac)) = control_keys.get(&i) {
            if let Ok(m) = otp_open(msg, pad, mac) {
                decrypted += 1;
                let pad_true = c.xor(&m);
                consistent &= c.xor(&pad_true) == m;
                implied_true = implied_true.concat(&pad_true);
            }
        }
    }
    HarvestReport {
        messages: recorded.len(),
        bits: recorded.iter().map(|m| m.ciphertext.len()).sum(),
        deviation_true_candidate: monobit_deviation(&implied_true),
        deviation_zero_candidate: monobit_deviation(&implied_zero),
        every_candidate_consistent: consistent,
        control_decrypted: decrypted,
    }
}
