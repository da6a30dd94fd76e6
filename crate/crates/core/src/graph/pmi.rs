//! Sliding-window co-occurrence statistics and point-wise mutual information.

use std::collections::{BTreeSet, HashMap};

use super::PmiConfig;
use crate::error::GraphError;

/// Window counts for one unit sequence.
///
/// `#W` is `max(len - W + 1, 1)`: a sequence shorter than the window forms a
/// single window. A unit is counted once per window however often it repeats.
#[derive(Debug, Clone, Default)]
pub struct WindowCounts {
    pub num_windows: u64,
    pub unit: HashMap<u16, u64>,
    /// Keyed by `(min, max)`; self-pairs are never recorded.
    pub pair: HashMap<(u16, u16), u64>,
}

impl WindowCounts {
    pub fn new(seq: &[u16], window_size: usize) -> Self {
        let mut counts = WindowCounts::default();
        if seq.is_empty() {
            return counts;
        }
        let w = window_size.min(seq.len());
        let num_windows = seq.len() - w + 1;
        counts.num_windows = num_windows as u64;
        let mut distinct: Vec<u16> = Vec::with_capacity(w);
        for start in 0..num_windows {
            distinct.clear();
            distinct.extend_from_slice(&seq[start..start + w]);
            distinct.sort_unstable();
            distinct.dedup();
            for (i, &a) in distinct.iter().enumerate() {
                *counts.unit.entry(a).or_default() += 1;
                for &b in &distinct[i + 1..] {
                    *counts.pair.entry((a, b)).or_default() += 1;
                }
            }
        }
        counts
    }

    pub fn pair_count(&self, u: u16, v: u16) -> u64 {
        let key = if u <= v { (u, v) } else { (v, u) };
        self.pair.get(&key).copied().unwrap_or(0)
    }

    pub fn unit_count(&self, u: u16) -> u64 {
        self.unit.get(&u).copied().unwrap_or(0)
    }

    /// Natural-log PMI; `-inf` when the pair never shares a window.
    pub fn pmi(&self, u: u16, v: u16) -> f64 {
        let joint = self.pair_count(u, v);
        if joint == 0 || u == v {
            return f64::NEG_INFINITY;
        }
        let w = self.num_windows as f64;
        let p_uv = joint as f64 / w;
        let p_u = self.unit_count(u) as f64 / w;
        let p_v = self.unit_count(v) as f64 / w;
        (p_uv / (p_u * p_v)).ln()
    }

    /// Pairs with strictly positive PMI, decided in exact integer arithmetic:
    /// `#W(u,v) * #W > #W(u) * #W(v)`.
    pub fn positive_pairs(&self) -> BTreeSet<(u16, u16)> {
        self.pair
            .iter()
            .filter(|(&(a, b), &joint)| {
                u128::from(joint) * u128::from(self.num_windows)
                    > u128::from(self.unit_count(a)) * u128::from(self.unit_count(b))
            })
            .map(|(&k, _)| k)
            .collect()
    }
}

pub fn pmi(seq: &[u16], u: u16, v: u16, cfg: &PmiConfig) -> Result<f64, GraphError> {
    if seq.is_empty() {
        return Err(GraphError::EmptySequence);
    }
    cfg.validate()?;
    Ok(WindowCounts::new(seq, cfg.window_size).pmi(u, v))
}

/// Undirected edges `(min, max)` between distinct unit values with PMI > 0.
pub fn build_segment_edges(seq: &[u16], cfg: &PmiConfig) -> BTreeSet<(u16, u16)> {
    WindowCounts::new(seq, cfg.window_size).positive_pairs()
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: u16 = 1;
    const B: u16 = 2;
    const C: u16 = 3;

    fn cfg(w: usize) -> PmiConfig {
        PmiConfig { window_size: w }
    }

    #[test]
    fn alternating_pair_has_zero_pmi() {
        let seq = [A, B, A, B];
        let p = pmi(&seq, A, B, &cfg(2)).unwrap();
        assert!(p.abs() < 1e-15);
        assert!(build_segment_edges(&seq, &cfg(2)).is_empty());
    }

    #[test]
    fn hand_enumerated_windows() {
        // windows: [a,a] [a,b] [b,c]
        let seq = [A, A, B, C];
        let ab = pmi(&seq, A, B, &cfg(2)).unwrap();
        let bc = pmi(&seq, B, C, &cfg(2)).unwrap();
        assert!((ab - (0.75f64).ln()).abs() < 1e-12);
        assert!((bc - (1.5f64).ln()).abs() < 1e-12);
        assert_eq!(pmi(&seq, A, C, &cfg(2)).unwrap(), f64::NEG_INFINITY);
        assert_eq!(
            build_segment_edges(&seq, &cfg(2)),
            BTreeSet::from([(B, C)])
        );
    }

    #[test]
    fn short_sequence_is_one_window() {
        let seq = [A, B];
        assert!(pmi(&seq, A, B, &cfg(5)).unwrap().abs() < 1e-15);
        assert!(build_segment_edges(&seq, &cfg(5)).is_empty());
    }

    #[test]
    fn constant_sequence_has_no_edges() {
        assert!(build_segment_edges(&[7; 12], &cfg(5)).is_empty());
    }

    #[test]
    fn empty_sequence_errors() {
        assert_eq!(pmi(&[], A, B, &cfg(5)), Err(GraphError::EmptySequence));
    }

    #[test]
    fn pmi_is_symmetric() {
        let seq = [1, 4, 2, 2, 9, 4, 1, 3, 9, 9, 2, 1, 4, 4, 3];
        let counts = WindowCounts::new(&seq, 5);
        for u in 1..10 {
            for v in 1..10 {
                let (a, b) = (counts.pmi(u, v), counts.pmi(v, u));
                assert!(a == b || (a - b).abs() <= 1e-12);
            }
        }
    }
}
