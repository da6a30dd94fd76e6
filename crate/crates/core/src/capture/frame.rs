//! Ethernet/IPv4/TCP-UDP decoding and anonymization.

use std::fmt;
use std::net::Ipv4Addr;

use crate::error::CaptureError;

const ETHERNET_HEADER_LEN: usize = 14;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_IPV6: u16 = 0x86dd;
const PROTO_TCP: u8 = 6;
const PROTO_UDP: u8 = 17;
const UDP_HEADER_LEN: usize = 8;

/// Why a frame does not contribute a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SkipReason {
    Ipv6,
    NotIp,
    UnsupportedTransport,
    Fragment,
    EmptyPayload,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SkipReason::Ipv6 => "ipv6",
            SkipReason::NotIp => "non-ip",
            SkipReason::UnsupportedTransport => "non-tcp/udp",
            SkipReason::Fragment => "ip-fragment",
            SkipReason::EmptyPayload => "empty-payload",
        };
        f.write_str(s)
    }
}

/// Bidirectional flow identity: protocol plus the two endpoints in sorted order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FiveTuple {
    pub protocol: u8,
    pub src: (Ipv4Addr, u16),
    pub dst: (Ipv4Addr, u16),
}

impl FiveTuple {
    /// Direction-free form: endpoints sorted so both directions map together.
    pub fn canonical(&self) -> FiveTuple {
        if self.src <= self.dst {
            *self
        } else {
            FiveTuple {
                protocol: self.protocol,
                src: self.dst,
                dst: self.src,
            }
        }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}:{}-{}:{}",
            self.protocol, self.src.0, self.src.1, self.dst.0, self.dst.1
        )
    }
}

/// A decoded IPv4 TCP/UDP frame; `payload_bytes` may still be empty here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFrame {
    pub tuple: FiveTuple,
    pub header_bytes: Vec<u8>,
    pub payload_bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    Frame(ParsedFrame),
    Skip(SkipReason),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Anonymized {
    Packet {
        header_bytes: Vec<u8>,
        payload_bytes: Vec<u8>,
    },
    Skip(SkipReason),
}

fn malformed(msg: impl Into<String>) -> CaptureError {
    CaptureError::MalformedHeader(msg.into())
}

/// Decodes an Ethernet frame and removes the link header, both IPv4
/// addresses and both transport ports.
///
/// The IPv4 total-length field bounds the packet, so Ethernet trailer
/// padding never leaks into the payload.
pub fn parse_frame(frame: &[u8]) -> Result<Parsed, CaptureError> {
    if frame.len() < ETHERNET_HEADER_LEN {
        return Err(malformed(format!(
            "frame of {} bytes is shorter than an Ethernet header",
            frame.len()
        )));
    }
    match u16::from_be_bytes([frame[12], frame[13]]) {
        ETHERTYPE_IPV4 => {}
        ETHERTYPE_IPV6 => return Ok(Parsed::Skip(SkipReason::Ipv6)),
        _ => return Ok(Parsed::Skip(SkipReason::NotIp)),
    }
    let ip = &frame[ETHERNET_HEADER_LEN..];
    if ip.len() < 20 {
        return Err(malformed("IPv4 header shorter than 20 bytes"));
    }
    if ip[0] >> 4 != 4 {
        return Err(malformed(format!("IP version {} in an IPv4 frame", ip[0] >> 4)));
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    if ihl < 20 || total_len < ihl || total_len > ip.len() {
        return Err(malformed(format!(
            "IPv4 ihl={ihl} total_length={total_len} with {} bytes available",
            ip.len()
        )));
    }
    let ip = &ip[..total_len];
    let frag = u16::from_be_bytes([ip[6], ip[7]]);
    let more_fragments = frag & 0x2000 != 0;
    let frag_offset = frag & 0x1fff;
    if more_fragments || frag_offset != 0 {
        return Ok(Parsed::Skip(SkipReason::Fragment));
    }
    let protocol = ip[9];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let transport = &ip[ihl..];
    let thl = match protocol {
        PROTO_TCP => {
            if transport.len() < 20 {
                return Err(malformed("TCP header shorter than 20 bytes"));
            }
            let off = usize::from(transport[12] >> 4) * 4;
            if off < 20 || off > transport.len() {
                return Err(malformed(format!(
                    "TCP data offset {off} with {} bytes available",
                    transport.len()
                )));
            }
            off
        }
        PROTO_UDP => {
            if transport.len() < UDP_HEADER_LEN {
                return Err(malformed("UDP header shorter than 8 bytes"));
            }
            UDP_HEADER_LEN
        }
        _ => return Ok(Parsed::Skip(SkipReason::UnsupportedTransport)),
    };
    let src_port = u16::from_be_bytes([transport[0], transport[1]]);
    let dst_port = u16::from_be_bytes([transport[2], transport[3]]);

    let mut header_bytes = Vec::with_capacity(ihl - 8 + thl - 4);
    header_bytes.extend_from_slice(&ip[..12]);
    header_bytes.extend_from_slice(&ip[20..ihl]);
    header_bytes.extend_from_slice(&transport[4..thl]);
    Ok(Parsed::Frame(ParsedFrame {
        tuple: FiveTuple {
            protocol,
            src: (src_ip, src_port),
            dst: (dst_ip, dst_port),
        },
        header_bytes,
        payload_bytes: transport[thl..].to_vec(),
    }))
}

/// Returns the anonymized header and payload of a frame, or the reason it is
/// skipped. Packets without payload are skipped.
pub fn anonymize(frame: &[u8]) -> Result<Anonymized, CaptureError> {
    Ok(match parse_frame(frame)? {
        Parsed::Skip(r) => Anonymized::Skip(r),
        Parsed::Frame(f) if f.payload_bytes.is_empty() => Anonymized::Skip(SkipReason::EmptyPayload),
        Parsed::Frame(f) => Anonymized::Packet {
            header_bytes: f.header_bytes,
            payload_bytes: f.payload_bytes,
        },
    })
}
