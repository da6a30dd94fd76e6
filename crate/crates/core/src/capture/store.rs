//! JSON-lines flow store: one flow per line, byte strings as lowercase hex.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Direction, PacketRecord, TrafficFlow};
use crate::error::{CaptureError, Error};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowLine {
    label: usize,
    flow_key: String,
    packets: Vec<PacketLine>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PacketLine {
    ts_us: u64,
    dir: Direction,
    header_hex: String,
    payload_hex: String,
}

pub fn write_flow_store(flows: &[TrafficFlow], path: impl AsRef<Path>) -> crate::Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_flow_store_to(flows, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_flow_store_to<W: Write>(flows: &[TrafficFlow], mut w: W) -> std::io::Result<()> {
    for flow in flows {
        let line = FlowLine {
            label: flow.label,
            flow_key: flow.flow_key.clone(),
            packets: flow
                .packets
                .iter()
                .map(|p| PacketLine {
                    ts_us: p.timestamp_us,
                    dir: p.direction,
                    header_hex: hex::encode(&p.header_bytes),
                    payload_hex: hex::encode(&p.payload_bytes),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_flow_store(path: impl AsRef<Path>) -> crate::Result<Vec<TrafficFlow>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_flow_store_from(file)
}

pub fn read_flow_store_from<R: Read>(r: R) -> crate::Result<Vec<TrafficFlow>> {
    let mut flows = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<flow store>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        flows.push(parse_line(&line, lineno)?);
    }
    Ok(flows)
}

fn parse_line(line: &str, lineno: usize) -> Result<TrafficFlow, CaptureError> {
    let violation = |reason: String| CaptureError::SchemaViolation {
        line: lineno,
        reason,
    };
    let raw: FlowLine = serde_json::from_str(line).map_err(|e| violation(e.to_string()))?;
    let mut packets = Vec::with_capacity(raw.packets.len());
    for (j, p) in raw.packets.into_iter().enumerate() {
        let header_bytes = hex::decode(&p.header_hex)
            .map_err(|e| violation(format!("packet {j} header_hex: {e}")))?;
        let payload_bytes = hex::decode(&p.payload_hex)
            .map_err(|e| violation(format!("packet {j} payload_hex: {e}")))?;
        packets.push(PacketRecord {
            header_bytes,
            payload_bytes,
            direction: p.dir,
            timestamp_us: p.ts_us,
        });
    }
    let flow = TrafficFlow {
        flow_key: raw.flow_key,
        packets,
        label: raw.label,
    };
    flow.validate().map_err(|e| match e {
        CaptureError::SchemaViolation { reason, .. } => violation(reason),
        other => other,
    })?;
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn flow_strategy() -> impl Strategy<Value = TrafficFlow> {
        let packet = (
            any::<u32>(),
            any::<bool>(),
            prop::collection::vec(any::<u8>(), 1..40),
            prop::collection::vec(any::<u8>(), 1..80),
        );
        (
            0usize..8,
            "[a-f0-9/]{0,20}",
            prop::collection::vec(packet, 1..=15),
        )
            .prop_map(|(label, flow_key, pkts)| {
                let mut ts = 0u64;
                let packets = pkts
                    .into_iter()
                    .map(|(dt, fwd, h, p)| {
                        ts += u64::from(dt);
                        PacketRecord {
                            header_bytes: h,
                            payload_bytes: p,
                            direction: if fwd { Direction::Forward } else { Direction::Backward },
                            timestamp_us: ts,
                        }
                    })
                    .collect();
                TrafficFlow {
                    flow_key,
                    packets,
                    label,
                }
            })
    }

    proptest! {
        #[test]
        fn round_trip(flows in prop::collection::vec(flow_strategy(), 0..6)) {
            let mut buf = Vec::new();
            write_flow_store_to(&flows, &mut buf).unwrap();
            let back = read_flow_store_from(&buf[..]).unwrap();
            prop_assert_eq!(back, flows);
        }
    }

    #[test]
    fn empty_store_is_empty_file() {
        let mut buf = Vec::new();
        write_flow_store_to(&[], &mut buf).unwrap();
        assert!(buf.is_empty());
        assert!(read_flow_store_from(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn field_order_is_fixed() {
        let flow = TrafficFlow {
            flow_key: "k".into(),
            packets: vec![PacketRecord {
                header_bytes: vec![0xab],
                payload_bytes: vec![0x01, 0x02],
                direction: Direction::Backward,
                timestamp_us: 5,
            }],
            label: 2,
        };
        let mut buf = Vec::new();
        write_flow_store_to(&[flow], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"label\":2,\"flow_key\":\"k\",\"packets\":[{\"ts_us\":5,\"dir\":\"bwd\",\"header_hex\":\"ab\",\"payload_hex\":\"0102\"}]}\n"
        );
    }

    #[test]
    fn invalid_hex_is_a_schema_violation() {
        let line = r#"{"label":0,"flow_key":"k","packets":[{"ts_us":0,"dir":"fwd","header_hex":"00","payload_hex":"zz"}]}"#;
        let err = read_flow_store_from(line.as_bytes()).unwrap_err();
        assert!(matches!(
            err,
            Error::Capture(CaptureError::SchemaViolation { line: 1, .. })
        ));
    }

    #[test]
    fn missing_field_is_a_schema_violation() {
        let line = r#"{"label":0,"packets":[]}"#;
        assert!(matches!(
            read_flow_store_from(line.as_bytes()).unwrap_err(),
            Error::Capture(CaptureError::SchemaViolation { .. })
        ));
    }
}
