use graftpay::harness::{self, AttackToggle, HarnessError, ReportFormat, ScenarioConfig};

fn demo() -> ScenarioConfig {
    ScenarioConfig::from_toml(harness::DEMO_SCENARIO).unwrap()
}

fn scenario(name: &str) -> ScenarioConfig {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name);
    ScenarioConfig::load(&path).unwrap()
}

#[test]
fn demo_reproduces_worked_totals() {
    let r = harness::run(&demo()).unwrap();
    assert!(r.passed(), "{:?}", r.failures());
    let g = 10u128.pow(13);
    let s = &r.settlements[0];
    assert_eq!(s.tau, 1832 * g);
    assert_eq!(s.paid_out, 1832 * g);
    assert_eq!(s.refunded, 3168 * g);
    assert_eq!(r.purchases.iter().filter(|p| p.vended).count(), 3);
    let gas: u64 = r.fees.public.per_op.values().map(|f| f.gas).sum();
    assert_eq!(gas, 922_915 + 21_040 + 72_263 + 55_212 + 30_001 + 21_000);
}

#[test]
fn runs_are_deterministic_per_seed() {
    let cfg = scenario("market.toml");
    let a = harness::report_metrics(&harness::run(&cfg).unwrap(), ReportFormat::Jsonl);
    let b = harness::report_metrics(&harness::run(&cfg).unwrap(), ReportFormat::Jsonl);
    assert_eq!(a, b);
    let other = ScenarioConfig { seed: cfg.seed + 1, ..cfg };
    let c = harness::report_metrics(&harness::run(&other).unwrap(), ReportFormat::Jsonl);
    assert_ne!(a, c);
}

#[test]
fn concurrent_wallets_all_settle() {
    let r = harness::run(&scenario("market.toml")).unwrap();
    assert!(r.passed(), "{:?}", r.failures());
    assert_eq!(r.purchases.len(), 10);
    assert_eq!(r.settlements.len(), 4);
    for s in &r.settlements {
        assert_eq!(s.paid_out + s.refunded, s.deposit);
        assert_eq!(s.vended_to_client, s.tau);
    }
}

#[test]
fn empty_scenario_reports_header_only() {
    let cfg = ScenarioConfig { wallets: vec![], ..demo() };
    let r = harness::run(&cfg).unwrap();
    assert!(r.passed());
    let jsonl = harness::report_metrics(&r, ReportFormat::Jsonl);
    assert_eq!(jsonl.lines().count(), 1);
    let header: serde_json::Value = serde_json::from_str(jsonl.trim()).unwrap();
    assert_eq!(header["record"], "header");
    assert_eq!(header["passed"], true);
}

#[test]
fn report_formats_parse() {
    let r = harness::run(&demo()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&harness::report_metrics(&r, ReportFormat::Json)).unwrap();
    assert_eq!(json["purchases"].as_array().unwrap().len(), 3);
    // Amounts beyond 2^64 must survive as exact strings or integers.
    assert_eq!(json["settlements"][0]["deposit"].to_string().trim_matches('"'), "50000000000000000");
    for line in harness::report_metrics(&r, ReportFormat::Jsonl).lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["record"].is_string());
    }
    assert!(harness::report_metrics(&r, ReportFormat::Text).starts_with("scenario demo (seed 7): PASS"));
}

#[test]
fn config_errors_are_reported() {
    let bad = [
        ("threshold above signers", ScenarioConfig { threshold: 11, ..demo() }),
        ("deposit off granularity", ScenarioConfig { deposit: 50_000_000_000_000_001, ..demo() }),
        ("attack beyond signer count", ScenarioConfig { attack: Some(AttackToggle::CompromiseSigner(11)), ..demo() }),
    ];
    for (what, cfg) in bad {
        assert!(matches!(harness::run(&cfg), Err(HarnessError::ConfigInvalid(_))), "{what}");
    }
    let mut cfg = demo();
    cfg.wallets[0].purchases.push(9);
    assert!(cfg.validate().is_err());
    assert!(ScenarioConfig::from_toml("name = 3").is_err());
    let unknown = harness::DEMO_SCENARIO.replace("seed = 7", "seed = 7\nsneed = 1");
    assert!(ScenarioConfig::from_toml(&unknown).is_err());
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = scenario("market.toml");
    let again = ScenarioConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn toggles_parse_from_cli_spelling() {
    assert_eq!(AttackToggle::parse("compromise_signer(3)").unwrap(), AttackToggle::CompromiseSigner(3));
    assert_eq!(AttackToggle::parse("replay_token").unwrap(), AttackToggle::ReplayToken);
    for t in AttackToggle::matrix(10, 5) {
        assert_eq!(AttackToggle::parse(&t.name()).unwrap(), t);
    }
    assert!(AttackToggle::parse("steal_everything").is_err());
}

#[test]
fn too_many_compromised_signers_cost_the_client() {
    let cfg = ScenarioConfig { attack: Some(AttackToggle::CompromiseSigner(6)), quorum_deadline: graftpay::time::SimTime::from_secs(10), ..demo() };
    let r = harness::run(&cfg).unwrap();
    assert!(r.purchases.iter().all(|p| !p.vended));
    // The contract recorded every request, so the client paid for goods it
    // never received: beyond the tolerated count, signers cost money too.
    let s = &r.settlements[0];
    assert_eq!(s.paid_out + s.refunded, s.deposit);
    assert!(r.invariants.iter().all(|c| c.passed), "{:?}", r.failures());
    let attack = r.attack.as_ref().unwrap();
    assert!(s.tau > 0);
    assert_eq!(attack.harm, s.tau);
    assert!(!r.passed());
    assert!(r.failures().iter().any(|f| f.contains("liveness")));
    assert!(r.failures().iter().any(|f| f.contains("exceeds bound")));
}

#[test]
fn attack_matrix_two_seeds() {
    let m = harness::run_attack_matrix(&demo(), &[1, 2]).unwrap();
    assert_eq!(m.rows.len(), 10);
    assert!(m.passed(), "{}", harness::matrix_text(&m));
}

#[test]
fn artifacts_carry_events_and_snapshots() {
    let a = harness::run_with_artifacts(&demo()).unwrap();
    let lines: Vec<serde_json::Value> = a.event_log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l.to_string().contains("TokenRequested")).count(), 3);
    assert_eq!(a.wallets.len(), 1);
    assert_eq!(a.wallets[0].tau, 1832 * 10u128.pow(13));
}

#[test]
fn thousand_terminal_keys_do_not_slow_requests() {
    let base = ScenarioConfig { wallets: vec![harness::WalletConfig { purchases: vec![0, 1, 1], deposit: None, link: None }; 2], ..demo() };
    let mean = |cfg: &ScenarioConfig| {
        let r = harness::run(cfg).unwrap();
        assert!(r.passed(), "{:?}", r.failures());
        assert!(r.purchases.iter().all(|p| p.vended));
        r.purchases.iter().map(|p| p.latency_ms).sum::<f64>() / r.purchases.len() as f64
    };
    let baseline = mean(&base);
    let loaded = mean(&ScenarioConfig { extra_opos_keys: 998, ..base });
    assert!((loaded - baseline).abs() <= 0.15 * baseline, "{loaded} vs {baseline}");
}

#[test]
fn client_chain_bytes_per_request_stay_under_50_kb() {
    for name in ["demo.toml", "market.toml"] {
        let r = harness::run(&scenario(name)).unwrap();
        for p in &r.purchases {
            assert!(p.client_chain_bytes > 0 && p.client_chain_bytes <= 50_000, "{name}: {}", p.client_chain_bytes);
        }
    }
}
