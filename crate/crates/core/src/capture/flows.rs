//! Bidirectional flow assembly and the flow-level filters.

use std::collections::{BTreeMap, HashMap};

use sha2::{Digest, Sha256};

use super::frame::{parse_frame, FiveTuple, Parsed, SkipReason};
use super::{Direction, PacketRecord, RawCapturePacket, TrafficFlow};

/// Packets kept per flow.
pub const MAX_FLOW_PACKETS: usize = 15;
/// Raw flows with more packets than this are discarded outright.
pub const MAX_RAW_FLOW_LEN: usize = 10_000;

/// Counters describing what happened to the input during assembly.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub frames: usize,
    pub malformed: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub oversized_flows: usize,
    pub empty_flows: usize,
    pub truncated_flows: usize,
    pub flows: usize,
}

impl IngestReport {
    pub fn merge(&mut self, other: &IngestReport) {
        self.frames += other.frames;
        self.malformed += other.malformed;
        for (k, v) in &other.skipped {
            *self.skipped.entry(*k).or_default() += v;
        }
        self.oversized_flows += other.oversized_flows;
        self.empty_flows += other.empty_flows;
        self.truncated_flows += other.truncated_flows;
        self.flows += other.flows;
    }
}

struct RawFlow {
    tuple: FiveTuple,
    initiator: (std::net::Ipv4Addr, u16),
    // (timestamp, direction, header, payload); payload may be empty
    packets: Vec<(u64, Direction, Vec<u8>, Vec<u8>)>,
}

pub fn assemble_flows(
    packets: &[RawCapturePacket],
    label: usize,
    block_seconds: Option<u64>,
) -> Vec<TrafficFlow> {
    assemble_flows_with_report(packets, label, block_seconds).0
}

/// Groups packets by canonical 5-tuple and applies, in order: the raw length
/// filter, optional time blocking, the empty-payload drop and the 15-packet cap.
pub fn assemble_flows_with_report(
    packets: &[RawCapturePacket],
    label: usize,
    block_seconds: Option<u64>,
) -> (Vec<TrafficFlow>, IngestReport) {
    let mut report = IngestReport {
        frames: packets.len(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..packets.len()).collect();
    order.sort_by_key(|&i| packets[i].timestamp_us);

    let mut index: HashMap<FiveTuple, usize> = HashMap::new();
    let mut raw: Vec<RawFlow> = Vec::new();
    for i in order {
        let pkt = &packets[i];
        let frame = match parse_frame(&pkt.link_bytes) {
            Ok(Parsed::Frame(f)) => f,
            Ok(Parsed::Skip(reason)) => {
                *report.skipped.entry(reason).or_default() += 1;
                continue;
            }
            Err(e) => {
                log::debug!("dropping frame {i}: {e}");
                report.malformed += 1;
                continue;
            }
        };
        let key = frame.tuple.canonical();
        let slot = *index.entry(key).or_insert_with(|| {
            raw.push(RawFlow {
                tuple: key,
                initiator: frame.tuple.src,
                packets: Vec::new(),
            });
            raw.len() - 1
        });
        let flow = &mut raw[slot];
        let dir = if frame.tuple.src == flow.initiator {
            Direction::Forward
        } else {
            Direction::Backward
        };
        flow.packets
            .push((pkt.timestamp_us, dir, frame.header_bytes, frame.payload_bytes));
    }

    let mut out = Vec::new();
    for flow in raw {
        if flow.packets.len() > MAX_RAW_FLOW_LEN {
            report.oversized_flows += 1;
            continue;
        }
        let base_key = opaque_key(&flow.tuple);
        let blocks: Vec<(Option<u64>, Vec<_>)> = match block_seconds {
            None => vec![(None, flow.packets)],
            Some(secs) => split_blocks(flow.packets, secs.max(1) * 1_000_000),
        };
        for (block, pkts) in blocks {
            let mut records: Vec<PacketRecord> = pkts
                .into_iter()
                .filter_map(|(ts, dir, hdr, payload)| {
                    if payload.is_empty() {
                        *report.skipped.entry(SkipReason::EmptyPayload).or_default() += 1;
                        None
                    } else {
                        Some(PacketRecord {
                            header_bytes: hdr,
                            payload_bytes: payload,
                            direction: dir,
                            timestamp_us: ts,
                        })
                    }
                })
                .collect();
            if records.is_empty() {
                report.empty_flows += 1;
                continue;
            }
            if records.len() > MAX_FLOW_PACKETS {
                records.truncate(MAX_FLOW_PACKETS);
                report.truncated_flows += 1;
            }
            let flow_key = match block {
                None => base_key.clone(),
                Some(b) => format!("{base_key}/b{b}"),
            };
            out.push(TrafficFlow {
                flow_key,
                packets: records,
                label,
            });
        }
    }
    report.flows = out.len();
    (out, report)
}

/// Non-overlapping blocks measured from the flow's first packet.
fn split_blocks<T>(packets: Vec<(u64, T, Vec<u8>, Vec<u8>)>, block_us: u64) -> Vec<(Option<u64>, Vec<(u64, T, Vec<u8>, Vec<u8>)>)> {
    let Some(start) = packets.first().map(|p| p.0) else {
        return Vec::new();
    };
    let mut blocks: Vec<(Option<u64>, Vec<_>)> = Vec::new();
    for p in packets {
        let b = (p.0 - start) / block_us;
        match blocks.last_mut() {
            Some((Some(cur), v)) if *cur == b => v.push(p),
            _ => blocks.push((Some(b), vec![p])),
        }
    }
    blocks
}

fn opaque_key(tuple: &FiveTuple) -> String {
    let digest = Sha256::digest(tuple.to_string().as_bytes());
    hex::encode(&digest[..8])
}
