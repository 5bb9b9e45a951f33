//! wasm-bindgen entry points for `www/index.html`. Every function returns a
//! JSON string so the page stays framework-free and the same calls can be
//! tested natively.

use graftpay::harness::{self, LinkSpec, ScenarioConfig};
use graftpay::hashchain::{self, ChannelParams};
use graftpay::netsim::{self, MBPS};
use graftpay::Amount;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn amount(s: &str) -> Result<Amount, String> {
    let t = s.trim().replace('_', "");
    t.parse().map_err(|_| format!("{s:?} is not a non-negative integer"))
}

/// Depth vector for `amount` and what revealing it costs.
#[wasm_bindgen]
pub fn encode(theta: u32, xi: u32, granularity: &str, amount_str: &str) -> Result<String, String> {
    let params = ChannelParams::new(theta, xi, amount(granularity)?).map_err(|e| e.to_string())?;
    let phi = amount(amount_str)?;
    let depths = hashchain::encode_amount(phi, &params).map_err(|e| e.to_string())?;
    let back = hashchain::decode_amount(&depths, &params).map_err(|e| e.to_string())?;
    let hashes: u32 = depths.0.iter().sum();
    Ok(json!({
        "depths": depths.0,
        "decoded": back.to_string(),
        "hashes": hashes,
        "max_amount": params.max_amount().to_string(),
    })
    .to_string())
}

/// Hashes a merchant learns going from cumulative `tau` to `tau + delta`.
#[wasm_bindgen]
pub fn payment_step(theta: u32, xi: u32, granularity: &str, tau: &str, delta: &str) -> Result<String, String> {
    let params = ChannelParams::new(theta, xi, amount(granularity)?).map_err(|e| e.to_string())?;
    let tau = amount(tau)?;
    let phi = tau.checked_add(amount(delta)?).ok_or("amount overflow")?;
    let before = hashchain::encode_amount(tau, &params).map_err(|e| e.to_string())?;
    let after = hashchain::encode_amount(phi, &params).map_err(|e| e.to_string())?;
    let revealed: Vec<u32> = before.0.iter().zip(&after.0).map(|(b, a)| a.saturating_sub(*b)).collect();
    Ok(json!({ "before": before.0, "after": after.0, "new_hashes": revealed, "phi": phi.to_string() }).to_string())
}

/// Concurrent requests sustained at each bandwidth from 0 to `max_mbps`.
#[wasm_bindgen]
pub fn capacity_curve(request_bits: f64, block_interval_s: f64, max_mbps: f64, steps: u32) -> Result<String, String> {
    if !(request_bits > 0.0 && block_interval_s > 0.0 && max_mbps > 0.0) || steps == 0 {
        return Err("all inputs must be positive".into());
    }
    let rows: Vec<_> = (0..=steps)
        .map(|i| {
            let mbps = max_mbps * i as f64 / steps as f64;
            json!({ "mbps": mbps, "requests": netsim::capacity(mbps * MBPS, request_bits, block_interval_s) })
        })
        .collect();
    Ok(serde_json::Value::Array(rows).to_string())
}

/// Runs the built-in three-purchase scenario with the client on `link`.
#[wasm_bindgen]
pub fn purchase_latency(link: &str, seed: u32) -> Result<String, String> {
    let mut cfg = ScenarioConfig::from_toml(harness::DEMO_SCENARIO).map_err(|e| e.to_string())?;
    cfg.links.client = LinkSpec::Preset(link.to_string());
    cfg.seed = seed.into();
    let r = harness::run(&cfg).map_err(|e| e.to_string())?;
    let purchases: Vec<_> = r
        .purchases
        .iter()
        .map(|p| json!({ "amount": p.amount.to_string(), "latency_ms": p.latency_ms, "bytes": p.client_chain_bytes, "outcome": p.outcome }))
        .collect();
    Ok(json!({ "link": link, "passed": r.passed(), "purchases": purchases }).to_string())
}
