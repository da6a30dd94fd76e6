//! Packet capture ingestion.
//!
//! Classic pcap files are parsed into [`RawCapturePacket`]s, each frame is
//! stripped of its Ethernet header, IP addresses and transport ports, and the
//! surviving packets are grouped into bidirectional [`TrafficFlow`]s.

mod flows;
mod frame;
mod pcap;
mod store;

pub use flows::{assemble_flows, assemble_flows_with_report, IngestReport, MAX_FLOW_PACKETS, MAX_RAW_FLOW_LEN};
pub use frame::{anonymize, parse_frame, Anonymized, FiveTuple, Parsed, ParsedFrame, SkipReason};
pub use pcap::{parse_pcap, parse_pcap_bytes, write_pcap, ByteOrder};
pub use store::{read_flow_store, read_flow_store_from, write_flow_store, write_flow_store_to};

use serde::{Deserialize, Serialize};

use crate::error::CaptureError;

/// One record of a classic pcap file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCapturePacket {
    pub timestamp_us: u64,
    /// Captured bytes; may be shorter than `orig_len` when the snaplen cut it.
    pub link_bytes: Vec<u8>,
    pub orig_len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "fwd")]
    Forward,
    #[serde(rename = "bwd")]
    Backward,
}

/// An anonymized packet: addresses and ports are gone from `header_bytes`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub header_bytes: Vec<u8>,
    pub payload_bytes: Vec<u8>,
    pub direction: Direction,
    pub timestamp_us: u64,
}

/// Time-ordered packets sharing one bidirectional 5-tuple, with a class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficFlow {
    /// Opaque identifier derived from the canonical 5-tuple.
    pub flow_key: String,
    pub packets: Vec<PacketRecord>,
    pub label: usize,
}

impl TrafficFlow {
    /// Checks the invariants every emitted flow must satisfy.
    pub fn validate(&self) -> Result<(), CaptureError> {
        let bad = |reason: String| CaptureError::SchemaViolation { line: 0, reason };
        if self.packets.is_empty() {
            return Err(bad("flow has no packets".into()));
        }
        if self.packets.len() > MAX_FLOW_PACKETS {
            return Err(bad(format!(
                "flow has {} packets (max {MAX_FLOW_PACKETS})",
                self.packets.len()
            )));
        }
        for (i, p) in self.packets.iter().enumerate() {
            if p.header_bytes.is_empty() || p.payload_bytes.is_empty() {
                return Err(bad(format!("packet {i} has an empty header or payload")));
            }
        }
        if self
            .packets
            .windows(2)
            .any(|w| w[1].timestamp_us < w[0].timestamp_us)
        {
            return Err(bad("packets are not time-ordered".into()));
        }
        Ok(())
    }
}
