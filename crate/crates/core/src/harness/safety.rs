use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{run_round, Behavior, HeightInput, IdealTransport, Participants, Timing};
use crate::custody::{Enclave, MockScheme, SignatureScheme};
use crate::eventlog::EventLog;
use crate::hash::hash_parts;
use crate::registry::{max_faults, QuorumMode, Registry, Role, Status, ValidatorRecord};
use crate::time::SimTime;
use crate::types::ValidatorId;

const STRATEGIES: [Behavior; 3] = [Behavior::Silent, Behavior::Equivocate, Behavior::ConflictingVote];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: u64,
    pub byzantine: BTreeMap<ValidatorId, Behavior>,
    pub finalized: bool,
    /// Distinct digests with a quorum of valid precommits.
    pub certifiable_digests: usize,
    pub accused: BTreeSet<ValidatorId>,
    pub slashed: BTreeSet<ValidatorId>,
}

impl TrialOutcome {
    pub fn conflicting(&self) -> bool {
        self.certifiable_digests > 1
    }

    pub fn detecting(&self) -> bool {
        !self.accused.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub n: u64,
    pub f: u64,
    pub quorum_mode: Option<QuorumMode>,
    pub trials: u64,
    pub finalized: u64,
    pub conflicting_certificates: u64,
    pub detecting_runs: u64,
    /// Detecting runs in which every accused validator ended up slashed.
    pub detecting_runs_all_slashed: u64,
    /// Honest validators ever accused; must stay zero.
    pub honest_accused: u64,
    pub byzantine_total: u64,
}

impl SafetyReport {
    pub fn passed(&self) -> bool {
        self.conflicting_certificates == 0
            && self.honest_accused == 0
            && self.detecting_runs_all_slashed == self.detecting_runs
    }
}

/// Seeded one-height trials at committee size `n`, each with between one and
/// `f` Byzantine validators drawing their strategy at random.
pub fn run_safety_trials(n: u64, trials: u64, seed: u64, mode: QuorumMode) -> SafetyReport {
    let f = max_faults(n).unwrap_or(0);
    let mut enclave = Enclave::new(Arc::new(MockScheme::new(SignatureScheme::mock())), seed);
    let mut registry = Registry::new(mode, Vec::<String>::new());
    let mut handles = BTreeMap::new();
    for i in 0..n {
        let (h, public_key) = enclave.keygen(ValidatorId(i));
        registry
            .register_validator(ValidatorRecord {
                id: ValidatorId(i),
                public_key,
                weight: 1,
                role: Role::Consumer,
                certificate: None,
                status: Status::Active,
            })
            .expect("fresh ids");
        handles.insert(ValidatorId(i), h);
    }
    let verifier = enclave.verifier();
    let timing = Timing::default();
    let ids: Vec<ValidatorId> = handles.keys().copied().collect();
    let mut report = SafetyReport {
        n,
        f,
        quorum_mode: Some(mode),
        ..Default::default()
    };
    for trial in 0..trials {
        let t = run_trial(trial, seed, f, &ids, &handles, &registry, &mut enclave, &timing);
        let mut reg = registry.clone();
        let mut accused = BTreeSet::new();
        for ev in &t.1 {
            accused.insert(ev.accused);
            let _ = reg.handle_evidence(ev, &verifier);
        }
        let slashed: BTreeSet<_> = accused
            .iter()
            .copied()
            .filter(|v| reg.get(*v).is_some_and(|r| r.status == Status::Slashed))
            .collect();
        let outcome = TrialOutcome {
            slashed,
            accused,
            ..t.0
        };
        report.trials += 1;
        report.byzantine_total += outcome.byzantine.len() as u64;
        report.finalized += u64::from(outcome.finalized);
        report.conflicting_certificates += u64::from(outcome.conflicting());
        report.honest_accused += outcome.accused.iter().filter(|v| !outcome.byzantine.contains_key(v)).count() as u64;
        if outcome.detecting() {
            report.detecting_runs += 1;
            report.detecting_runs_all_slashed += u64::from(outcome.slashed == outcome.accused);
        }
    }
    report
}

#[allow(clippy::too_many_arguments)]
fn run_trial(
    trial: u64,
    seed: u64,
    f: u64,
    ids: &[ValidatorId],
    handles: &BTreeMap<ValidatorId, crate::custody::KeyHandle>,
    registry: &Registry,
    enclave: &mut Enclave,
    timing: &Timing,
) -> (TrialOutcome, Vec<crate::registry::MisbehaviorEvidence>) {
    let key = hash_parts("qlink/safety-trial", &[&seed.to_be_bytes(), &(ids.len() as u64).to_be_bytes(), &trial.to_be_bytes()]);
    let mut rng = ChaCha8Rng::from_seed(key.0);
    let k = if f == 0 { 0 } else { rng.gen_range(1..=f) } as usize;
    let byzantine: BTreeMap<ValidatorId, Behavior> = ids
        .choose_multiple(&mut rng, k)
        .map(|&v| (v, *STRATEGIES.choose(&mut rng).expect("non-empty")))
        .collect();
    let participants = Participants {
        handles: handles.clone(),
        behaviors: byzantine.clone(),
    };
    let event = hash_parts("qlink/safety-event", &[&trial.to_be_bytes()]);
    let input = HeightInput::new(trial + 1, SimTime::ZERO, vec![event], rng.gen());
    let out = run_round(
        &input,
        &participants,
        registry,
        enclave,
        &mut IdealTransport,
        timing,
        &mut EventLog::disabled(),
    );
    let certifiable = out.constructible_digests.max(if out.honest_conflict() { 2 } else { 0 });
    (
        TrialOutcome {
            trial,
            byzantine,
            finalized: out.result.is_ok(),
            certifiable_digests: certifiable,
            accused: BTreeSet::new(),
            slashed: BTreeSet::new(),
        },
        out.evidence,
    )
}
