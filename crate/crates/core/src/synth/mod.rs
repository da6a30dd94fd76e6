//! Labeled synthetic traffic and the ablation harness.
//!
//! Generated packets look like anonymized TCP: a 12-byte IPv4 remainder,
//! a 16-byte TCP remainder and 8 option bytes, followed by a payload. All
//! classes share the header template; a class shows up in two places:
//!
//! * a marker byte pair in the TCP options, and
//! * the n-grams its payload is assembled from.
//!
//! Payload and marker bytes come from an alphabet whose nibbles are all in
//! `{3, 6, 9, C}`, so at 4-bit granularity every class uses the same four
//! units and most of the signal is only visible at 8 bits. Each payload
//! also carries a marker pair of another class as a decoy, which only
//! segment-aware encoders can tell apart from the real one.

mod ablation;

pub use ablation::{ablation_sweep, AblationAxis, AblationRow, AblationTable};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::{Direction, PacketRecord, TrafficFlow, MAX_FLOW_PACKETS};

/// The 16 bytes whose nibbles are all in `{3, 6, 9, C}`.
pub fn shared_alphabet() -> Vec<u8> {
    const NIBBLES: [u8; 4] = [0x3, 0x6, 0x9, 0xC];
    NIBBLES
        .iter()
        .flat_map(|&hi| NIBBLES.iter().map(move |&lo| (hi << 4) | lo))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRecipe {
    /// Marker pair placed in the TCP options.
    pub marker: [u8; 2],
    /// Payloads are concatenations of these.
    pub ngrams: Vec<Vec<u8>>,
    /// Probability that any payload or marker byte is replaced by a random
    /// byte from `noise_alphabet`.
    pub noise_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub flows_per_class: usize,
    /// Inclusive range.
    pub packets_per_flow: (usize, usize),
    /// Inclusive range, in bytes.
    pub payload_len: (usize, usize),
    /// Probability that a payload n-gram is taken from another class.
    pub foreign_ngram_rate: f64,
    /// Insert another class's marker pair into each payload.
    pub payload_decoy: bool,
    pub noise_alphabet: Vec<u8>,
    pub recipes: Vec<ClassRecipe>,
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.recipes.len()
    }

    /// Overlapping classes over [`shared_alphabet`]: random distinct marker
    /// pairs and four random trigrams per class.
    pub fn shared_vocabulary(num_classes: usize, flows_per_class: usize, seed: u64) -> Self {
        let alphabet = shared_alphabet();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut markers: Vec<[u8; 2]> = Vec::new();
        let mut recipes = Vec::new();
        for _ in 0..num_classes {
            let marker = loop {
                let m = [*alphabet.choose(&mut rng).unwrap(), *alphabet.choose(&mut rng).unwrap()];
                if m[0] != m[1] && !markers.iter().any(|o| o.contains(&m[0]) || o.contains(&m[1])) {
                    break m;
                }
            };
            markers.push(marker);
            let ngrams = (0..4)
                .map(|_| (0..3).map(|_| *alphabet.choose(&mut rng).unwrap()).collect())
                .collect();
            recipes.push(ClassRecipe {
                marker,
                ngrams,
                noise_rate: 0.1,
            });
        }
        SynthSpec {
            flows_per_class,
            packets_per_flow: (5, 10),
            payload_len: (16, 32),
            foreign_ngram_rate: 0.2,
            payload_decoy: num_classes > 1,
            noise_alphabet: alphabet,
            recipes,
        }
    }

    /// Noise-free classes with pairwise disjoint byte vocabularies; at most
    /// 16 classes.
    pub fn disjoint_vocabulary(num_classes: usize, flows_per_class: usize, seed: u64) -> Self {
        assert!(num_classes <= 16, "at most 16 disjoint vocabularies");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recipes = (0..num_classes)
            .map(|c| {
                let vocab: Vec<u8> = (0..16).map(|k| (16 * c + k) as u8).collect();
                ClassRecipe {
                    marker: [vocab[0], vocab[1]],
                    ngrams: (0..4)
                        .map(|_| (0..3).map(|_| *vocab.choose(&mut rng).unwrap()).collect())
                        .collect(),
                    noise_rate: 0.0,
                }
            })
            .collect();
        SynthSpec {
            flows_per_class,
            packets_per_flow: (5, 10),
            payload_len: (16, 32),
            foreign_ngram_rate: 0.0,
            payload_decoy: false,
            noise_alphabet: shared_alphabet(),
            recipes,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.recipes.is_empty() {
            return Err("at least one class is required".into());
        }
        let (lo, hi) = self.packets_per_flow;
        if lo == 0 || lo > hi || hi > MAX_FLOW_PACKETS {
            return Err(format!("packets_per_flow must satisfy 1 <= {lo} <= {hi} <= {MAX_FLOW_PACKETS}"));
        }
        let (lo, hi) = self.payload_len;
        if lo == 0 || lo > hi {
            return Err(format!("payload_len must satisfy 1 <= {lo} <= {hi}"));
        }
        if !(0.0..=1.0).contains(&self.foreign_ngram_rate) {
            return Err("foreign_ngram_rate must be in [0, 1]".into());
        }
        if self.noise_alphabet.is_empty() {
            return Err("noise_alphabet is empty".into());
        }
        for (i, r) in self.recipes.iter().enumerate() {
            if !(0.0..1.0).contains(&r.noise_rate) {
                return Err(format!("class {i}: noise_rate must be in [0, 1)"));
            }
            if r.ngrams.is_empty() || r.ngrams.iter().any(Vec::is_empty) {
                return Err(format!("class {i}: needs non-empty n-grams"));
            }
            if self.recipes[..i].contains(r) {
                return Err(format!("class {i} duplicates an earlier recipe"));
            }
        }
        if self.payload_decoy && self.recipes.len() < 2 {
            return Err("payload decoys need at least two classes".into());
        }
        Ok(())
    }
}

fn header(rng: &mut ChaCha8Rng, flow_base: &[u8; 8], seq: u32, payload_len: usize, options: [u8; 8]) -> Vec<u8> {
    let total = (20 + 28 + payload_len) as u16;
    let mut h = Vec::with_capacity(36);
    // IPv4 without addresses
    h.extend_from_slice(&[0x45, 0x00]);
    h.extend_from_slice(&total.to_be_bytes());
    h.extend_from_slice(&flow_base[0..2]);
    h.extend_from_slice(&[0x40, 0x00, 0x40, 0x06]);
    h.extend_from_slice(&[rng.gen(), rng.gen()]);
    // TCP without ports, data offset 7 words
    h.extend_from_slice(&seq.to_be_bytes());
    h.extend_from_slice(&flow_base[2..6]);
    h.extend_from_slice(&[0x70, 0x18]);
    h.extend_from_slice(&flow_base[6..8]);
    h.extend_from_slice(&[rng.gen(), rng.gen(), 0x00, 0x00]);
    h.extend_from_slice(&options);
    h
}

fn noisy(byte: u8, rate: f64, alphabet: &[u8], rng: &mut ChaCha8Rng) -> u8 {
    if rate > 0.0 && rng.gen::<f64>() < rate {
        *alphabet.choose(rng).expect("non-empty alphabet")
    } else {
        byte
    }
}

fn packet(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng, flow_base: &[u8; 8], seq: u32) -> PacketRecord {
    let recipe = &spec.recipes[class];
    let n = spec.recipes.len();
    let (lo, hi) = spec.payload_len;
    let len = rng.gen_range(lo..=hi);
    let other = |rng: &mut ChaCha8Rng| (class + rng.gen_range(1..n.max(2))) % n;
    let mut payload = Vec::with_capacity(len + 4);
    while payload.len() < len {
        let src = if n > 1 && rng.gen::<f64>() < spec.foreign_ngram_rate {
            &spec.recipes[other(rng)]
        } else {
            recipe
        };
        payload.extend_from_slice(src.ngrams.choose(rng).expect("non-empty n-grams"));
    }
    payload.truncate(len);
    if spec.payload_decoy && n > 1 {
        let decoy = spec.recipes[other(rng)].marker;
        let at = rng.gen_range(0..=payload.len().saturating_sub(2));
        payload.splice(at..(at + 2).min(payload.len()), decoy);
    }
    let rate = recipe.noise_rate;
    for b in &mut payload {
        *b = noisy(*b, rate, &spec.noise_alphabet, rng);
    }
    let a = noisy(recipe.marker[0], rate, &spec.noise_alphabet, rng);
    let b = noisy(recipe.marker[1], rate, &spec.noise_alphabet, rng);
    let filler = [
        *spec.noise_alphabet.choose(rng).unwrap(),
        *spec.noise_alphabet.choose(rng).unwrap(),
    ];
    let options = [0x01, 0x01, 0xFE, 0x06, a, b, filler[0], filler[1]];
    PacketRecord {
        header_bytes: header(rng, flow_base, seq, payload.len(), options),
        payload_bytes: payload,
        direction: if rng.gen_bool(0.5) {
            Direction::Forward
        } else {
            Direction::Backward
        },
        timestamp_us: 0,
    }
}

/// `flows_per_class` flows per class, class after class. Each flow draws
/// from its own random stream derived from `(seed, class, index)`, so the
/// output is bit-deterministic.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Vec<TrafficFlow>, String> {
    spec.validate()?;
    let mut flows = Vec::with_capacity(spec.flows_per_class * spec.num_classes());
    for class in 0..spec.num_classes() {
        for i in 0..spec.flows_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((class as u64) << 32) | i as u64);
            let flow_base: [u8; 8] = rng.gen();
            let (lo, hi) = spec.packets_per_flow;
            let count = rng.gen_range(lo..=hi);
            let mut seq: u32 = rng.gen();
            let mut ts: u64 = rng.gen_range(0..1_000_000_000);
            let mut packets = Vec::with_capacity(count);
            for _ in 0..count {
                let mut p = packet(spec, class, &mut rng, &flow_base, seq);
                seq = seq.wrapping_add(p.payload_bytes.len() as u32);
                ts += rng.gen_range(100..50_000);
                p.timestamp_us = ts;
                packets.push(p);
            }
            flows.push(TrafficFlow {
                flow_key: format!("synth-{seed}-c{class}-{i}"),
                packets,
                label: class,
            });
        }
    }
    Ok(flows)
}

#[cfg(test)]
mod tests;
