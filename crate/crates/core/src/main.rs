use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graftpay::harness::{self, ReportFormat, ScenarioConfig};
use graftpay::netsim::{self, MBPS};

#[derive(Parser)]
#[command(name = "graftpay", version, about = "Simulate hash-chain payment channels with offline terminals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Output {
    /// Write the report here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and check its invariants.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run with one adversarial toggle, e.g. `replay_token` or `compromise_signer(5)`.
        #[arg(long)]
        attack: Option<String>,
        /// Export the private-ledger event log as JSON lines.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Save each wallet's snapshot (without funds key) into this directory.
        #[arg(long)]
        save_wallets: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
    /// Run every adversarial toggle over several seeds and check harm bounds.
    AttackMatrix {
        scenario: PathBuf,
        /// First seed; seeds run consecutively from here.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[command(flatten)]
        output: Output,
    },
    /// Concurrent token requests a signer link sustains.
    Capacity {
        /// Link bandwidth in Mbps.
        #[arg(long)]
        bandwidth: f64,
        /// Bits per request.
        #[arg(long = "L", default_value_t = 80_000.0)]
        l: f64,
        /// Private block interval in seconds.
        #[arg(long = "Tb", default_value_t = 4.0)]
        tb: f64,
        /// Also report the bandwidth this many requests need.
        #[arg(long)]
        requests: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
    /// Run the built-in three-purchase scenario.
    Demo {
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        output: Output,
    },
}

fn emit(output: &Output, text: &str) -> Result<(), String> {
    match &output.out {
        Some(path) => fs::write(path, text).map_err(|e| format!("{}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_scenario(
    mut cfg: ScenarioConfig,
    seed: Option<u64>,
    attack: Option<&str>,
    events: Option<&Path>,
    save_wallets: Option<&Path>,
    output: &Output,
) -> Result<bool, String> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = attack {
        cfg.attack = Some(harness::AttackToggle::parse(a).map_err(|e| e.to_string())?);
    }
    let artifacts = harness::run_with_artifacts(&cfg).map_err(|e| e.to_string())?;
    if let Some(path) = events {
        fs::write(path, &artifacts.event_log).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    if let Some(dir) = save_wallets {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        for (i, snap) in artifacts.wallets.iter().enumerate() {
            let path = dir.join(format!("wallet-{i}.json"));
            let json = serde_json::to_string_pretty(snap).expect("snapshot serializes");
            fs::write(&path, json).map_err(|e| format!("{}: {e}", path.display()))?;
        }
    }
    let report = artifacts.report;
    emit(output, &harness::report_metrics(&report, output.format))?;
    for f in report.failures() {
        eprintln!("FAILED {f}");
    }
    Ok(report.passed())
}

fn capacity(bandwidth: f64, l: f64, tb: f64, requests: Option<u64>, output: &Output) -> Result<bool, String> {
    if !(bandwidth.is_finite() && bandwidth >= 0.0) || !(l > 0.0 && l.is_finite()) || !(tb > 0.0 && tb.is_finite()) {
        return Err("bandwidth must be non-negative; L and Tb must be positive".into());
    }
    let n = netsim::capacity(bandwidth * MBPS, l, tb);
    let needed = requests.map(|r| netsim::min_bandwidth(r, l, tb) / MBPS);
    let text = match output.format {
        ReportFormat::Text => {
            let mut s = format!("{bandwidth} Mbps with L = {l} bits and Tb = {tb} s sustains {n} concurrent requests\n");
            if let (Some(r), Some(b)) = (requests, needed) {
                s += &format!("{r} requests need {b} Mbps\n");
            }
            s
        }
        _ => {
            let v = serde_json::json!({
                "bandwidth_mbps": bandwidth,
                "request_bits": l,
                "block_interval_s": tb,
                "max_requests": n,
                "requests": requests,
                "required_mbps": needed,
            });
            format!("{v}\n")
        }
    };
    emit(output, &text)?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { scenario, seed, attack, events, save_wallets, output } => ScenarioConfig::load(scenario)
            .map_err(|e| e.to_string())
            .and_then(|cfg| run_scenario(cfg, *seed, attack.as_deref(), events.as_deref(), save_wallets.as_deref(), output)),
        Command::AttackMatrix { scenario, seed, seeds, output } => {
            ScenarioConfig::load(scenario).map_err(|e| e.to_string()).and_then(|cfg| {
                let list: Vec<u64> = (*seed..seed.saturating_add(*seeds)).collect();
                let m = harness::run_attack_matrix(&cfg, &list).map_err(|e| e.to_string())?;
                let text = match output.format {
                    ReportFormat::Text => harness::matrix_text(&m),
                    ReportFormat::Json => serde_json::to_string_pretty(&m).expect("serializes") + "\n",
                    ReportFormat::Jsonl => m.rows.iter().map(|r| serde_json::to_string(r).expect("serializes") + "\n").collect(),
                };
                emit(output, &text)?;
                Ok(m.passed())
            })
        }
        Command::Capacity { bandwidth, l, tb, requests, output } => capacity(*bandwidth, *l, *tb, *requests, output),
        Command::Demo { seed, output } => ScenarioConfig::from_toml(harness::DEMO_SCENARIO)
            .map_err(|e| e.to_string())
            .and_then(|cfg| run_scenario(cfg, *seed, None, None, None, output)),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
