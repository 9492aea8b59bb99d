//! Run reports: a deterministic body plus a non-deterministic envelope.

use serde::Serialize;

/// FNV-1a hash of the canonicalized config, hex-encoded.
pub fn config_hash(canonical: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in canonical.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    format!("{h:016x}")
}

/// Deterministic report: identical `(config, seed)` produce byte-identical
/// serializations of this structure. Wall-clock time lives outside it.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub artifact_version: String,
    pub config_hash: String,
    pub task: String,
    pub seed: u64,
    pub warnings: Vec<String>,
    pub body: serde_json::Value,
}

impl RunReport {
    /// Canonical bytes of the report body (the determinism contract).
    pub fn body_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s.into_bytes()
    }
}

/// Envelope with the measured wall clock, written next to the report.
#[derive(Clone, Debug, Serialize)]
pub struct RunEnvelope {
    pub wall_clock_ms: u128,
}
