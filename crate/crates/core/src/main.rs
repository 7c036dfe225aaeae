use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use qlink_core::adversary::{run_attack_on, AdversaryError, AttackKind, AttackOutcome, AttackScenario};
use qlink_core::eventlog::EventLog;
use qlink_core::harness::{
    render_metrics, run_attack_suite, run_bridge_scenario, run_committee_experiment,
    run_keyrate_experiment, suite_passed, ConfigError, ExportFormat, Metrics, ScenarioConfig,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_FAILED: u8 = 3;
/// Packets a run may miss regardless of length; the first send precedes key generation.
const LOSS_FLOOR: u64 = 2;

/// Deterministic simulator for a QKD-secured, PQC-signed cross-chain bridge.
#[derive(Parser, Debug)]
#[command(name = "qlink-sim", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Overrides the scenario seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Metrics output file; stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Writes the JSON-lines event log here.
    #[arg(long, global = true)]
    event_log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Json => ExportFormat::Json,
            Format::Csv => ExportFormat::Csv,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Key generation and packetised consumption on one link.
    Keyrate {
        #[arg(long, required = true, num_args = 1..)]
        distance_km: Vec<f64>,
        #[arg(long, default_value_t = 50.0)]
        duration_s: f64,
        #[arg(long, default_value_t = 20.0)]
        traffic_kbps: f64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Lock, confirm, certify and mint across the two simulated chains.
    Bridge {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Consensus over a star topology of `n` validators.
    Committee {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..=64))]
        n: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the config's committee distances.
        #[arg(long, num_args = 1..)]
        distance_km: Vec<f64>,
        /// Defaults to the config's duration.
        #[arg(long)]
        duration_s: Option<f64>,
    },
    /// Runs one attack scenario, or the whole suite with `all`.
    Attack {
        #[arg(long, default_value = "all")]
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Allows scenarios beyond the adversary model; their outcomes are labeled.
        #[arg(long)]
        research: bool,
    },
}

#[derive(Serialize)]
struct AttackSummary<'a> {
    kind: AttackKind,
    defended: bool,
    mechanism: String,
    flags: String,
    graded: bool,
    detail: &'a str,
}

enum Failure {
    Config(String),
    Failed(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<AdversaryError> for Failure {
    fn from(e: AdversaryError) -> Self {
        match e {
            AdversaryError::Config(c) => c.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = match path {
        Some(p) => ScenarioConfig::load(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn new_log(g: &Global, cfg: &ScenarioConfig) -> EventLog {
    if g.event_log.is_some() || cfg.outputs.event_log.is_some() {
        EventLog::new()
    } else {
        EventLog::disabled()
    }
}

fn write_output(g: &Global, cfg: &ScenarioConfig, text: &str) -> Result<(), Failure> {
    match g.out.as_ref().or(cfg.outputs.metrics.as_ref()) {
        Some(p) => std::fs::write(p, text).map_err(|e| Failure::Config(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_log(g: &Global, cfg: &ScenarioConfig, log: &EventLog) -> Result<(), Failure> {
    if let Some(p) = g.event_log.as_ref().or(cfg.outputs.event_log.as_ref()) {
        log.write_jsonl(p)
            .map_err(|e| Failure::Config(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(())
}

fn emit(g: &Global, cfg: &ScenarioConfig, rows: &[Metrics], log: &EventLog) -> Result<(), Failure> {
    let text = render_metrics(rows, g.format.into()).map_err(|e| Failure::Config(e.to_string()))?;
    write_output(g, cfg, &text)?;
    write_log(g, cfg, log)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = &cli.global;
    match cli.command {
        Command::Keyrate {
            distance_km,
            duration_s,
            traffic_kbps,
            config,
        } => {
            let mut cfg = load_config(config.as_deref(), g.seed)?;
            cfg.duration_s = duration_s;
            cfg.traffic_kbps = traffic_kbps;
            cfg.validate()?;
            let mut log = new_log(g, &cfg);
            let mut rows = Vec::new();
            for d in distance_km {
                let (m, l) = run_keyrate_experiment(&cfg, d, duration_s, traffic_kbps, log)?;
                log = l;
                eprintln!(
                    "keyrate {d} km: generated {} bits, surplus {:.1}x, missed {}/{}",
                    m.bits_generated,
                    m.surplus_ratio.unwrap_or(f64::INFINITY),
                    m.missed_packets,
                    m.packets_sent
                );
                rows.push(m);
            }
            emit(g, &cfg, &rows, &log)?;
            let bad = rows.iter().filter(|m| {
                m.conservation_violations > 0
                    || m.overlapping_ranges > 0
                    || m.missed_packets > (m.packets_sent / 1000).max(LOSS_FLOOR)
            });
            match bad.count() {
                0 => Ok(()),
                k => Err(Failure::Failed(format!("{k} run(s) exceeded the loss bound or broke key accounting"))),
            }
        }
        Command::Bridge { config } => {
            let cfg = load_config(config.as_deref(), g.seed)?;
            let (run, log) = run_bridge_scenario(&cfg, new_log(g, &cfg))?;
            let t = &run.transfer;
            eprintln!(
                "bridge: mint {}, end-to-end {:.1} s, round {:.3} s, crypto overhead {:.3} s, proof {} B",
                t.mint.as_ref().map_or("NOT_SUBMITTED", |m| m.code()),
                t.end_to_end_s.unwrap_or(f64::NAN),
                t.per_round_latency_s.unwrap_or(f64::NAN),
                t.crypto_overhead_s.unwrap_or(f64::NAN),
                t.proof_bundle_bytes.unwrap_or(0)
            );
            emit(g, &cfg, std::slice::from_ref(&run.metrics), &log)?;
            if !t.minted() {
                return Err(Failure::Failed("transfer was not minted".into()));
            }
            if !run.dual_condition || !t.conserved {
                return Err(Failure::Failed("security conditions violated".into()));
            }
            Ok(())
        }
        Command::Committee {
            n,
            config,
            distance_km,
            duration_s,
        } => {
            let cfg = load_config(config.as_deref(), g.seed)?;
            let distances = if distance_km.is_empty() {
                cfg.committee_distances_km.clone()
            } else {
                distance_km
            };
            let duration = duration_s.unwrap_or(cfg.duration_s);
            if !(duration > 0.0) {
                return Err(Failure::Config(format!("duration_s must be > 0, got {duration}")));
            }
            let mut log = new_log(g, &cfg);
            let run = run_committee_experiment(&cfg, n, &distances, duration, &mut log)?;
            eprintln!(
                "committee n={n}: {}/{} heights finalized (T={}), {} of {} links sustainable",
                run.heights_finalized,
                run.heights_run,
                run.threshold,
                run.rows.iter().filter(|r| r.sustainable == Some(true)).count(),
                run.rows.iter().filter(|r| r.sustainable.is_some()).count()
            );
            emit(g, &cfg, &run.rows, &log)?;
            if !run.all_finalized() {
                return Err(Failure::Failed("not every height finalized".into()));
            }
            Ok(())
        }
        Command::Attack {
            scenario,
            config,
            research,
        } => {
            let mut cfg = load_config(config.as_deref(), g.seed)?;
            cfg.research_mode |= research;
            let mut log = new_log(g, &cfg);
            let outcomes: Vec<AttackOutcome> = if scenario.eq_ignore_ascii_case("all") {
                run_attack_suite(&cfg, &mut log)?
            } else {
                let kind: AttackKind = scenario.parse().map_err(Failure::Config)?;
                let out = run_attack_on(&AttackScenario::new(kind), &cfg, log)?;
                log = EventLog::new();
                if g.event_log.is_some() || cfg.outputs.event_log.is_some() {
                    for r in &out.trace {
                        log.push(qlink_core::SimTime(r.t_us), &r.kind, r.data.clone());
                    }
                }
                vec![out]
            };
            let summary: Vec<AttackSummary> = outcomes
                .iter()
                .map(|o| AttackSummary {
                    kind: o.kind,
                    defended: o.defended,
                    mechanism: serde_json::to_value(o.mechanism)
                        .ok()
                        .and_then(|v| v.as_str().map(String::from))
                        .unwrap_or_default(),
                    flags: o
                        .flags
                        .iter()
                        .filter_map(|f| serde_json::to_value(f).ok()?.as_str().map(String::from))
                        .collect::<Vec<_>>()
                        .join("|"),
                    graded: o.is_graded(),
                    detail: &o.detail,
                })
                .collect();
            for s in &summary {
                eprintln!(
                    "{:<26} {:<9} {}",
                    s.kind.name(),
                    if s.defended { "DEFENDED" } else { "BREACHED" },
                    s.detail
                );
            }
            let text = match g.format {
                Format::Json => serde_json::to_string_pretty(&summary).expect("plain data") + "\n",
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(Vec::new());
                    for s in &summary {
                        w.serialize(s).map_err(|e| Failure::Config(e.to_string()))?;
                    }
                    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8")
                }
            };
            write_output(g, &cfg, &text)?;
            write_log(g, &cfg, &log)?;
            if suite_passed(&outcomes) {
                Ok(())
            } else {
                Err(Failure::Failed("at least one graded attack was not defended".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Failed(m)) => {
            eprintln!("failed: {m}");
            ExitCode::from(EXIT_FAILED)
        }
    }
}
