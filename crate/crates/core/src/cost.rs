//! Modeled CPU and link costs, charged in simulated time.
//!
//! Handlers charge their lane for the work they would do on real hardware.
//! The simulator never measures wall-clock time, so results are a pure
//! function of configuration and seed.

use serde::{Deserialize, Serialize};

use crate::time::SimTime;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    /// Fixed cost of accepting one message.
    pub recv_overhead_ns: SimTime,
    /// Fixed cost of emitting one message copy.
    pub send_overhead_ns: SimTime,
    pub hash_ns_per_byte: f64,
    pub codec_ns_per_byte: f64,
    /// Messages larger than this no longer fit the hot working set...
    pub working_set_bytes: usize,
    /// ...and every byte past it costs this much extra to decode.
    pub spill_ns_per_byte: f64,
    pub sign_ns: SimTime,
    pub verify_ns: SimTime,
    pub share_sign_ns: SimTime,
    pub share_combine_ns: SimTime,
    pub aggregate_verify_ns: SimTime,
    /// Egress serialization per byte (1 Gbit/s is 8 ns/byte).
    pub link_ns_per_byte: f64,
    /// Payload bytes per network fragment; loss is applied per fragment.
    pub mtu: usize,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            recv_overhead_ns: 5_000,
            send_overhead_ns: 2_000,
            hash_ns_per_byte: 2.0,
            codec_ns_per_byte: 1.0,
            working_set_bytes: 96 * 1024,
            spill_ns_per_byte: 60.0,
            sign_ns: 20_000,
            verify_ns: 50_000,
            share_sign_ns: 300_000,
            share_combine_ns: 5_000,
            aggregate_verify_ns: 1_000_000,
            link_ns_per_byte: 8.0,
            mtu: 1500,
        }
    }
}

impl CostModel {
    /// No CPU or bandwidth cost at all; only link delays remain.
    pub fn free() -> Self {
        Self {
            recv_overhead_ns: 0,
            send_overhead_ns: 0,
            hash_ns_per_byte: 0.0,
            codec_ns_per_byte: 0.0,
            working_set_bytes: 0,
            spill_ns_per_byte: 0.0,
            sign_ns: 0,
            verify_ns: 0,
            share_sign_ns: 0,
            share_combine_ns: 0,
            aggregate_verify_ns: 0,
            link_ns_per_byte: 0.0,
            mtu: 1500,
        }
    }

    pub fn hash(&self, bytes: usize) -> SimTime {
        (bytes as f64 * self.hash_ns_per_byte) as SimTime
    }

    pub fn codec(&self, bytes: usize) -> SimTime {
        let spilled = bytes.saturating_sub(self.working_set_bytes);
        (bytes as f64 * self.codec_ns_per_byte + spilled as f64 * self.spill_ns_per_byte) as SimTime
    }

    pub fn wire(&self, bytes: usize) -> SimTime {
        (bytes as f64 * self.link_ns_per_byte) as SimTime
    }

    pub fn fragments(&self, bytes: usize) -> u32 {
        bytes.div_ceil(self.mtu.max(1)).max(1) as u32
    }
}
