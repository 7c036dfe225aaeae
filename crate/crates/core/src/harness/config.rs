use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AttackKind;
use crate::consensus::Timing;
use crate::custody::SignatureScheme;
use crate::qkd::{reference_fit, QkdLinkConfig, PACKET_PAYLOAD_BITS};
use crate::registry::{QuorumMode, Role};
use crate::types::ValidatorId;

pub const SCHEMA_VERSION: u32 = 1;

/// Hardware certificate accepted for QKD roles in the default topology.
pub const DEFAULT_HW_CERT: &str = "QKD-HW-CERT-1";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidatorSpec {
    pub id: ValidatorId,
    pub role: Role,
    #[serde(default = "one")]
    pub weight: u64,
    #[serde(default)]
    pub certificate: Option<String>,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainTiming {
    pub btc_block_interval_s: f64,
    pub eth_slot_s: f64,
    pub eth_finality_lag_s: f64,
    /// Contract-side cost of checking one signature of a proof.
    pub contract_verify_per_sig_ms: f64,
}

impl Default for ChainTiming {
    fn default() -> Self {
        ChainTiming {
            btc_block_interval_s: 600.0,
            eth_slot_s: 12.0,
            eth_finality_lag_s: 780.0,
            contract_verify_per_sig_ms: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSpec {
    pub amount: u64,
    pub sender: String,
    pub recipient: String,
    /// Burn the minted tokens and release the escrow after the mint.
    pub return_trip: bool,
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            amount: 100_000,
            sender: "btc:alice".into(),
            recipient: "eth:0xa11ce".into(),
            return_trip: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    pub metrics: Option<PathBuf>,
    pub event_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub duration_s: f64,
    pub validators: Vec<ValidatorSpec>,
    pub links: Vec<QkdLinkConfig>,
    pub certificate_allowlist: Vec<String>,
    pub traffic_kbps: f64,
    pub packet_bits: u64,
    /// Delay before the links start producing key.
    pub key_start_delay_s: f64,
    pub committee_n: u64,
    pub committee_distances_km: Vec<f64>,
    pub quorum_mode: QuorumMode,
    pub signature: SignatureScheme,
    pub timing: Timing,
    pub k_confirmations: u64,
    pub chains: ChainTiming,
    pub transfer: TransferSpec,
    /// Interval of per-link key accounting records in the event log.
    pub key_window_s: f64,
    pub attacks: Vec<AttackKind>,
    /// Allows scenarios beyond the stated adversary bounds; their outcomes
    /// are labelled and excluded from pass/fail.
    pub research_mode: bool,
    pub outputs: OutputPaths,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            duration_s: 50.0,
            validators: default_validators(),
            links: default_links(5.0),
            certificate_allowlist: vec![DEFAULT_HW_CERT.into()],
            traffic_kbps: 20.0,
            packet_bits: PACKET_PAYLOAD_BITS,
            key_start_delay_s: 0.04,
            committee_n: 4,
            committee_distances_km: vec![5.0, 10.0, 50.0],
            quorum_mode: QuorumMode::WeightSupermajority,
            signature: SignatureScheme::mock(),
            timing: Timing::default(),
            k_confirmations: 6,
            chains: ChainTiming::default(),
            transfer: TransferSpec::default(),
            key_window_s: 60.0,
            attacks: AttackKind::ALL.to_vec(),
            research_mode: false,
            outputs: OutputPaths::default(),
        }
    }
}

/// v0 primary hub, v1 redundant hub, v2 and v3 consumers.
pub fn default_validators() -> Vec<ValidatorSpec> {
    (0..4)
        .map(|i| {
            let hub = i < 2;
            ValidatorSpec {
                id: ValidatorId(i),
                role: if hub { Role::QkdHub } else { Role::Consumer },
                weight: 1,
                certificate: hub.then(|| DEFAULT_HW_CERT.to_string()),
            }
        })
        .collect()
}

/// Hub-and-spoke links for [`default_validators`]: both hubs reach everyone,
/// the two consumers share no direct link.
pub fn default_links(distance_km: f64) -> Vec<QkdLinkConfig> {
    let fit = reference_fit();
    [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)]
        .into_iter()
        .map(|(a, b)| QkdLinkConfig::with_fit(ValidatorId(a), ValidatorId(b), distance_km, &fit))
        .collect()
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if !(self.duration_s > 0.0) {
            return bad(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if self.committee_n < 1 {
            return bad("committee_n must be >= 1".into());
        }
        if !(self.traffic_kbps > 0.0) {
            return bad(format!("traffic_kbps must be > 0, got {}", self.traffic_kbps));
        }
        if self.packet_bits == 0 {
            return bad("packet_bits must be > 0".into());
        }
        if !(self.key_start_delay_s >= 0.0) || !(self.key_window_s > 0.0) {
            return bad("key_start_delay_s must be >= 0 and key_window_s > 0".into());
        }
        if self.k_confirmations == 0 {
            return bad("k_confirmations must be >= 1".into());
        }
        let c = &self.chains;
        if !(c.btc_block_interval_s > 0.0 && c.eth_slot_s > 0.0 && c.eth_finality_lag_s >= 0.0) {
            return bad("chain intervals must be positive".into());
        }
        if self.timing.max_rounds == 0 {
            return bad("timing.max_rounds must be >= 1".into());
        }
        if self.validators.is_empty() {
            return bad("at least one validator is required".into());
        }
        self.signature.validate().map_err(ConfigError::Invalid)?;
        for l in &self.links {
            l.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            for end in [l.endpoint_a, l.endpoint_b] {
                if !self.validators.iter().any(|v| v.id == end) {
                    return bad(format!("link endpoint {end} is not a configured validator"));
                }
            }
        }
        Ok(())
    }

    pub fn traffic_bps(&self) -> f64 {
        self.traffic_kbps * 1000.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ScenarioConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = ScenarioConfig::from_json(r#"{"schema_version": 1, "seed": 9}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.links.len(), 5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            ScenarioConfig::from_json(r#"{"schema_version": 1, "sede": 9}"#),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            ScenarioConfig::from_json(r#"{"schema_version": 2}"#),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ScenarioConfig::from_json(r#"{"schema_version": 1, "duration_s": 0}"#),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            ScenarioConfig::from_json(r#"{"schema_version": 1, "traffic_kbps": -1}"#),
            Err(ConfigError::Invalid(_))
        ));
    }
}
