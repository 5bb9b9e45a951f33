//! Link delay models and the signer-channel bandwidth calculator.

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Down,
    Up,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinkError {
    #[error("latency must be finite and non-negative")]
    BadLatency,
    #[error("bandwidth must be finite and positive")]
    BadBandwidth,
    #[error("unknown link profile {0:?}")]
    UnknownProfile(String),
}

/// A point-to-point link with asymmetric bandwidth. Bandwidths are in bits
/// per second, latency in milliseconds (one way).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetLink {
    pub name: String,
    pub latency_ms: f64,
    pub bandwidth_down: f64,
    pub bandwidth_up: f64,
}

pub const MBPS: f64 = 1_000_000.0;

impl NetLink {
    pub fn new(name: impl Into<String>, latency_ms: f64, down_bps: f64, up_bps: f64) -> Result<Self, LinkError> {
        let link = NetLink { name: name.into(), latency_ms, bandwidth_down: down_bps, bandwidth_up: up_bps };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.latency_ms.is_finite() && self.latency_ms >= 0.0) {
            return Err(LinkError::BadLatency);
        }
        for bw in [self.bandwidth_down, self.bandwidth_up] {
            if !(bw.is_finite() && bw > 0.0) {
                return Err(LinkError::BadBandwidth);
            }
        }
        Ok(())
    }

    pub fn wifi() -> Self {
        NetLink { name: "wifi".into(), latency_ms: 10.5, bandwidth_down: 39.67 * MBPS, bandwidth_up: 18.02 * MBPS }
    }

    pub fn lte() -> Self {
        NetLink { name: "lte".into(), latency_ms: 26.0, bandwidth_down: 13.57 * MBPS, bandwidth_up: 12.99 * MBPS }
    }

    pub fn three_g() -> Self {
        NetLink { name: "3g".into(), latency_ms: 80.5, bandwidth_down: 2.54 * MBPS, bandwidth_up: 0.90 * MBPS }
    }

    /// A link with no delay at all, for direct (same-host) exchanges.
    pub fn local() -> Self {
        NetLink { name: "local".into(), latency_ms: 0.0, bandwidth_down: 1e15, bandwidth_up: 1e15 }
    }

    pub fn preset(name: &str) -> Result<Self, LinkError> {
        match name.to_ascii_lowercase().as_str() {
            "wifi" => Ok(Self::wifi()),
            "lte" | "4g" => Ok(Self::lte()),
            "3g" => Ok(Self::three_g()),
            "local" => Ok(Self::local()),
            _ => Err(LinkError::UnknownProfile(name.to_string())),
        }
    }

    pub fn bandwidth(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Down => self.bandwidth_down,
            Direction::Up => self.bandwidth_up,
        }
    }

    /// `latency + bytes·8 / bandwidth`, in milliseconds.
    pub fn transfer_time_ms(&self, bytes: usize, dir: Direction) -> f64 {
        let bw = self.bandwidth(dir);
        self.latency_ms + bytes as f64 * 8.0 * 1_000.0 / bw
    }

    pub fn transfer_time(&self, bytes: usize, dir: Direction) -> SimTime {
        SimTime::from_millis_f64(self.transfer_time_ms(bytes, dir))
    }
}

/// Per-request overhead on a signer-blockchain channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadModel {
    /// Bits per token request (`L`).
    pub request_bits: f64,
    /// Fixed bytes added to every ledger RPC on top of its payload.
    pub envelope_bytes: usize,
}

impl Default for OverheadModel {
    fn default() -> Self {
        // 10 kB per request: reconciles 100 Mbps with 5,000 concurrent
        // requests at a 4 s block interval. Inferred, not measured.
        OverheadModel { request_bits: 80_000.0, envelope_bytes: 512 }
    }
}

/// `N_R · L / T_b`, in bits per second.
pub fn min_bandwidth(requests: u64, request_bits: f64, block_interval_s: f64) -> f64 {
    assert!(block_interval_s > 0.0, "block interval must be positive");
    requests as f64 * request_bits / block_interval_s
}

/// Largest `N_R` a channel of `bandwidth` bits/s sustains.
pub fn capacity(bandwidth: f64, request_bits: f64, block_interval_s: f64) -> u64 {
    assert!(request_bits > 0.0, "request size must be positive");
    // Nudge before flooring so exact products survive float rounding.
    let n = bandwidth * block_interval_s / request_bits;
    (n * (1.0 + 1e-12)).floor().max(0.0) as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub bandwidth_mbps: f64,
    pub max_requests: u64,
}

pub fn capacity_table(bandwidths_mbps: &[f64], request_bits: f64, block_interval_s: f64) -> Vec<CapacityRow> {
    bandwidths_mbps
        .iter()
        .map(|&b| CapacityRow { bandwidth_mbps: b, max_requests: capacity(b * MBPS, request_bits, block_interval_s) })
        .collect()
}
