//! Classic (libpcap 2.4) capture files.

use std::path::Path;

use super::RawCapturePacket;
use crate::error::{CaptureError, Error};

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }

    fn put_u32(self, out: &mut Vec<u8>, v: u32) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }

    fn put_u16(self, out: &mut Vec<u8>, v: u16) {
        match self {
            ByteOrder::Little => out.extend_from_slice(&v.to_le_bytes()),
            ByteOrder::Big => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
}

pub fn parse_pcap(path: impl AsRef<Path>) -> crate::Result<Vec<RawCapturePacket>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_pcap_bytes(&bytes)?)
}

/// Parses an in-memory classic pcap image. Both byte orders and the
/// nanosecond-resolution magic are accepted; timestamps come out in
/// microseconds.
pub fn parse_pcap_bytes(bytes: &[u8]) -> Result<Vec<RawCapturePacket>, CaptureError> {
    if bytes.len() < 4 {
        return Err(CaptureError::Truncated(format!(
            "{} bytes cannot hold a pcap magic",
            bytes.len()
        )));
    }
    let raw_magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (order, nanos) = match raw_magic {
        MAGIC_MICROS => (ByteOrder::Little, false),
        MAGIC_NANOS => (ByteOrder::Little, true),
        m if m.swap_bytes() == MAGIC_MICROS => (ByteOrder::Big, false),
        m if m.swap_bytes() == MAGIC_NANOS => (ByteOrder::Big, true),
        other => return Err(CaptureError::BadMagic(other)),
    };
    if bytes.len() < GLOBAL_HEADER_LEN {
        return Err(CaptureError::Truncated(format!(
            "global header is {} bytes, expected {GLOBAL_HEADER_LEN}",
            bytes.len()
        )));
    }
    let network = order.u32(&bytes[20..24]);
    if network != LINKTYPE_ETHERNET {
        return Err(CaptureError::UnsupportedLinkType(network));
    }

    let mut packets = Vec::new();
    let mut pos = GLOBAL_HEADER_LEN;
    while pos < bytes.len() {
        let index = packets.len();
        if bytes.len() - pos < RECORD_HEADER_LEN {
            return Err(CaptureError::Truncated(format!(
                "record {index}: header has {} of {RECORD_HEADER_LEN} bytes",
                bytes.len() - pos
            )));
        }
        let hdr = &bytes[pos..pos + RECORD_HEADER_LEN];
        let ts_sec = order.u32(&hdr[0..4]) as u64;
        let ts_frac = order.u32(&hdr[4..8]) as u64;
        let incl_len = order.u32(&hdr[8..12]) as usize;
        let orig_len = order.u32(&hdr[12..16]);
        pos += RECORD_HEADER_LEN;
        if bytes.len() - pos < incl_len {
            return Err(CaptureError::Truncated(format!(
                "record {index}: body has {} of {incl_len} declared bytes",
                bytes.len() - pos
            )));
        }
        let sub_us = if nanos { ts_frac / 1000 } else { ts_frac };
        packets.push(RawCapturePacket {
            timestamp_us: ts_sec * 1_000_000 + sub_us,
            link_bytes: bytes[pos..pos + incl_len].to_vec(),
            orig_len,
        });
        pos += incl_len;
    }
    Ok(packets)
}

/// Serializes packets as a microsecond-resolution Ethernet capture.
pub fn write_pcap(packets: &[RawCapturePacket], order: ByteOrder) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        GLOBAL_HEADER_LEN
            + packets
                .iter()
                .map(|p| RECORD_HEADER_LEN + p.link_bytes.len())
                .sum::<usize>(),
    );
    order.put_u32(&mut out, MAGIC_MICROS);
    order.put_u16(&mut out, 2);
    order.put_u16(&mut out, 4);
    order.put_u32(&mut out, 0); // thiszone
    order.put_u32(&mut out, 0); // sigfigs
    order.put_u32(&mut out, 65_535);
    order.put_u32(&mut out, LINKTYPE_ETHERNET);
    for p in packets {
        order.put_u32(&mut out, (p.timestamp_us / 1_000_000) as u32);
        order.put_u32(&mut out, (p.timestamp_us % 1_000_000) as u32);
        order.put_u32(&mut out, p.link_bytes.len() as u32);
        order.put_u32(&mut out, p.orig_len);
        out.extend_from_slice(&p.link_bytes);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(order: ByteOrder, magic: u32, network: u32) -> Vec<u8> {
        let mut v = Vec::new();
        order.put_u32(&mut v, magic);
        order.put_u16(&mut v, 2);
        order.put_u16(&mut v, 4);
        order.put_u32(&mut v, 0);
        order.put_u32(&mut v, 0);
        order.put_u32(&mut v, 65_535);
        order.put_u32(&mut v, network);
        v
    }

    #[test]
    fn empty_capture_parses_to_no_packets() {
        let bytes = header(ByteOrder::Little, MAGIC_MICROS, 1);
        assert_eq!(bytes.len(), 24);
        assert!(parse_pcap_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn unknown_magic_is_rejected() {
        let mut bytes = header(ByteOrder::Little, MAGIC_MICROS, 1);
        bytes[0] = 0x00;
        assert!(matches!(
            parse_pcap_bytes(&bytes),
            Err(CaptureError::BadMagic(_))
        ));
    }

    #[test]
    fn non_ethernet_link_type_is_rejected() {
        let bytes = header(ByteOrder::Big, MAGIC_MICROS, 101);
        assert_eq!(
            parse_pcap_bytes(&bytes),
            Err(CaptureError::UnsupportedLinkType(101))
        );
    }

    #[test]
    fn nanosecond_magic_scales_timestamps() {
        let mut bytes = header(ByteOrder::Little, MAGIC_NANOS, 1);
        for v in [7u32, 123_456_789, 2, 2] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0xaa, 0xbb]);
        let pkts = parse_pcap_bytes(&bytes).unwrap();
        assert_eq!(pkts[0].timestamp_us, 7_123_456);
        assert_eq!(pkts[0].link_bytes, vec![0xaa, 0xbb]);
    }

    #[test]
    fn short_record_header_is_truncated() {
        let mut bytes = header(ByteOrder::Little, MAGIC_MICROS, 1);
        bytes.extend_from_slice(&[0u8; 10]);
        assert!(matches!(
            parse_pcap_bytes(&bytes),
            Err(CaptureError::Truncated(_))
        ));
    }
}
