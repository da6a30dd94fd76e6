//! N-bit traffic units.
//!
//! A byte string is read as one MSB-first bit stream and cut into consecutive
//! N-bit chunks. A trailing chunk shorter than N bits is dropped.

use std::collections::BTreeMap;

use crate::capture::PacketRecord;
use crate::error::UnitError;

pub const SUPPORTED_WIDTHS: [u32; 5] = [2, 4, 6, 8, 10];

/// The default pair of views.
pub const DEFAULT_VIEWS: [u32; 2] = [4, 8];

pub fn check_width(bit_width: u32) -> Result<(), UnitError> {
    if SUPPORTED_WIDTHS.contains(&bit_width) {
        Ok(())
    } else {
        Err(UnitError::UnsupportedWidth(bit_width))
    }
}

/// Number of distinct values an N-bit unit can take.
pub fn vocabulary_size(bit_width: u32) -> usize {
    1usize << bit_width
}

/// Header and payload units of one packet at one width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub bit_width: u32,
    pub header_units: Vec<u16>,
    pub payload_units: Vec<u16>,
}

pub fn tokenize(bytes: &[u8], bit_width: u32) -> Result<Vec<u16>, UnitError> {
    check_width(bit_width)?;
    let n = bit_width as usize;
    let mut out = Vec::with_capacity(bytes.len() * 8 / n);
    let mask = (1u32 << n) - 1;
    let mut acc: u32 = 0;
    let mut bits = 0usize;
    for &b in bytes {
        acc = (acc << 8) | u32::from(b);
        bits += 8;
        while bits >= n {
            bits -= n;
            out.push(((acc >> bits) & mask) as u16);
        }
        acc &= (1u32 << bits) - 1;
    }
    Ok(out)
}

pub fn tokenize_packet(
    pkt: &PacketRecord,
    views: &[u32],
) -> Result<BTreeMap<u32, UnitSequence>, UnitError> {
    let mut out = BTreeMap::new();
    for &n in views {
        out.insert(n, tokenize_packet_view(pkt, n)?);
    }
    Ok(out)
}

pub fn tokenize_packet_view(pkt: &PacketRecord, bit_width: u32) -> Result<UnitSequence, UnitError> {
    let header_units = tokenize(&pkt.header_bytes, bit_width)?;
    if header_units.is_empty() {
        return Err(UnitError::DegenerateSegment {
            segment: "header",
            bit_width,
        });
    }
    let payload_units = tokenize(&pkt.payload_bytes, bit_width)?;
    if payload_units.is_empty() {
        return Err(UnitError::DegenerateSegment {
            segment: "payload",
            bit_width,
        });
    }
    Ok(UnitSequence {
        bit_width,
        header_units,
        payload_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::Direction;
    use proptest::prelude::*;

    /// Reference chunker working on an explicit string of '0'/'1' characters.
    fn bitstring_oracle(bytes: &[u8], n: usize) -> Vec<u16> {
        let s: String = bytes.iter().map(|b| format!("{b:08b}")).collect();
        s.as_bytes()
            .chunks_exact(n)
            .map(|c| u16::from_str_radix(std::str::from_utf8(c).unwrap(), 2).unwrap())
            .collect()
    }

    fn packet(h: &[u8], p: &[u8]) -> PacketRecord {
        PacketRecord {
            header_bytes: h.to_vec(),
            payload_bytes: p.to_vec(),
            direction: Direction::Forward,
            timestamp_us: 0,
        }
    }

    #[test]
    fn examples() {
        assert_eq!(tokenize(&[0xAB], 8).unwrap(), vec![0xAB]);
        assert_eq!(tokenize(&[0xAB], 4).unwrap(), vec![0xA, 0xB]);
        assert_eq!(tokenize(&[0xFF, 0xC0], 10).unwrap(), vec![1023]);
        assert_eq!(bitstring_oracle(&[0xFF, 0xC0], 10), vec![1023]);
        assert_eq!(tokenize(&[0b1011_0110], 2).unwrap(), vec![2, 3, 1, 2]);
        assert_eq!(tokenize(&[0xAB], 3), Err(UnitError::UnsupportedWidth(3)));
    }

    #[test]
    fn packet_views() {
        let views = tokenize_packet(&packet(&[0xAB], &[0xCD]), &[4, 8]).unwrap();
        assert_eq!(views[&4].header_units, vec![0xA, 0xB]);
        assert_eq!(views[&4].payload_units, vec![0xC, 0xD]);
        assert_eq!(views[&8].header_units, vec![0xAB]);
        assert_eq!(views[&8].payload_units, vec![0xCD]);
    }

    #[test]
    fn one_byte_payload_is_degenerate_at_ten_bits() {
        assert_eq!(
            tokenize_packet(&packet(&[1, 2], &[3]), &[10]),
            Err(UnitError::DegenerateSegment {
                segment: "payload",
                bit_width: 10
            })
        );
    }

    proptest! {
        #[test]
        fn byte_width_is_identity(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let units = tokenize(&bytes, 8).unwrap();
            prop_assert_eq!(units, bytes.iter().map(|&b| u16::from(b)).collect::<Vec<_>>());
        }

        #[test]
        fn matches_bitstring_oracle(bytes in prop::collection::vec(any::<u8>(), 0..64), wi in 0usize..5) {
            let n = SUPPORTED_WIDTHS[wi];
            let units = tokenize(&bytes, n).unwrap();
            prop_assert_eq!(units.len(), bytes.len() * 8 / n as usize);
            prop_assert!(units.iter().all(|&u| (u as usize) < vocabulary_size(n)));
            prop_assert_eq!(units, bitstring_oracle(&bytes, n as usize));
        }

        #[test]
        fn divisor_widths_are_lossless(bytes in prop::collection::vec(any::<u8>(), 0..64), two in any::<bool>()) {
            let n = if two { 2 } else { 4 };
            let units = tokenize(&bytes, n).unwrap();
            let rebuilt: String = units.iter().map(|u| format!("{:0width$b}", u, width = n as usize)).collect();
            let original: String = bytes.iter().map(|b| format!("{b:08b}")).collect();
            prop_assert_eq!(rebuilt, original);
        }
    }
}
