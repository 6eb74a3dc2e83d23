//! Two-tier machine description: a device pool, a remote pool and the
//! transfer channels between them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bytes per microsecond in one GB/s (GB = 10^9 bytes).
pub const BYTES_PER_US_PER_GBPS: f64 = 1_000.0;

/// Capacity used to stand in for "unbounded" pools.
pub const UNBOUNDED_BYTES: u64 = 1 << 62;

pub fn gbps_to_bytes_per_us(gbps: f64) -> u64 {
    (gbps * BYTES_PER_US_PER_GBPS).round() as u64
}

/// Transfer primitives. Only `R2D` and `D2R` are used by the default
/// pipeline; the rest share the same cost formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    R2D,
    D2R,
    H2R,
    R2H,
    D2D,
}

impl Channel {
    pub fn as_str(self) -> &'static str {
        match self {
            Channel::R2D => "R2D",
            Channel::D2R => "D2R",
            Channel::H2R => "H2R",
            Channel::R2H => "R2H",
            Channel::D2D => "D2D",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineModel {
    pub device_capacity_bytes: u64,
    pub remote_capacity_bytes: u64,
    pub r2d_bandwidth_bytes_per_us: u64,
    pub d2r_bandwidth_bytes_per_us: u64,
    pub transfer_fixed_latency_us: u64,
    /// Device-local copy rate while compacting; also the D2D channel rate.
    pub compaction_bandwidth_bytes_per_us: u64,
    /// Per-transfer control-path cost of the reactive baseline.
    pub reactive_orchestration_overhead_us: u64,
    pub allocator_alignment_bytes: u64,
    /// Host ingress/egress rates; default to the R2D/D2R rates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h2r_bandwidth_bytes_per_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r2h_bandwidth_bytes_per_us: Option<u64>,
}

impl Default for MachineModel {
    fn default() -> Self {
        MachineModel {
            device_capacity_bytes: 64_000_000_000,
            remote_capacity_bytes: 1_000_000_000_000,
            // 33.6 GB/s
            r2d_bandwidth_bytes_per_us: 33_600,
            d2r_bandwidth_bytes_per_us: 33_600,
            transfer_fixed_latency_us: 10,
            compaction_bandwidth_bytes_per_us: 100_000,
            reactive_orchestration_overhead_us: 0,
            allocator_alignment_bytes: 512,
            h2r_bandwidth_bytes_per_us: None,
            r2h_bandwidth_bytes_per_us: None,
        }
    }
}

impl MachineModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("device_capacity_bytes", self.device_capacity_bytes),
            ("remote_capacity_bytes", self.remote_capacity_bytes),
            (
                "r2d_bandwidth_bytes_per_us",
                self.r2d_bandwidth_bytes_per_us,
            ),
            (
                "d2r_bandwidth_bytes_per_us",
                self.d2r_bandwidth_bytes_per_us,
            ),
            (
                "compaction_bandwidth_bytes_per_us",
                self.compaction_bandwidth_bytes_per_us,
            ),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidMachine(format!("{name} must be > 0")));
            }
        }
        if !self.allocator_alignment_bytes.is_power_of_two() {
            return Err(Error::InvalidMachine(
                "allocator_alignment_bytes must be a power of two".into(),
            ));
        }
        Ok(())
    }

    pub fn bandwidth(&self, ch: Channel) -> u64 {
        match ch {
            Channel::R2D => self.r2d_bandwidth_bytes_per_us,
            Channel::D2R => self.d2r_bandwidth_bytes_per_us,
            Channel::H2R => self
                .h2r_bandwidth_bytes_per_us
                .unwrap_or(self.r2d_bandwidth_bytes_per_us),
            Channel::R2H => self
                .r2h_bandwidth_bytes_per_us
                .unwrap_or(self.d2r_bandwidth_bytes_per_us),
            Channel::D2D => self.compaction_bandwidth_bytes_per_us,
        }
    }

    /// Same machine with both remote channels set to `gbps`.
    pub fn with_bandwidth_gbps(&self, gbps: f64) -> Self {
        let bw = gbps_to_bytes_per_us(gbps);
        MachineModel {
            r2d_bandwidth_bytes_per_us: bw,
            d2r_bandwidth_bytes_per_us: bw,
            ..self.clone()
        }
    }

    /// Same machine with unbounded device memory.
    pub fn unbounded(&self) -> Self {
        MachineModel {
            device_capacity_bytes: UNBOUNDED_BYTES,
            remote_capacity_bytes: UNBOUNDED_BYTES,
            ..self.clone()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: MachineModel =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("machine serialization is infallible")
    }
}

/// `bytes / bandwidth`, rounded to the nearest microsecond.
pub fn bytes_over_bandwidth_us(bytes: u64, bytes_per_us: u64) -> u64 {
    debug_assert!(bytes_per_us > 0);
    let b = bytes as u128;
    let bw = bytes_per_us as u128;
    ((2 * b + bw) / (2 * bw)) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gbps_conversion_uses_decimal_gigabytes() {
        assert_eq!(gbps_to_bytes_per_us(33.6), 33_600);
        assert_eq!(gbps_to_bytes_per_us(70.0), 70_000);
    }

    #[test]
    fn rounding_is_to_nearest() {
        assert_eq!(bytes_over_bandwidth_us(1 << 30, 33_600), 31_957);
        assert_eq!(bytes_over_bandwidth_us(15, 10), 2);
        assert_eq!(bytes_over_bandwidth_us(14, 10), 1);
        assert_eq!(bytes_over_bandwidth_us(0, 10), 0);
    }

    #[test]
    fn validation_rejects_bad_models() {
        assert!(MachineModel::default().validate().is_ok());
        let m = MachineModel {
            allocator_alignment_bytes: 384,
            ..MachineModel::default()
        };
        assert!(m.validate().is_err());
        let m = MachineModel {
            r2d_bandwidth_bytes_per_us: 0,
            ..MachineModel::default()
        };
        assert!(m.validate().is_err());
    }
}
