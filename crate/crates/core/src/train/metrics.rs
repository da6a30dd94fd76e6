use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Fraction of matching positions; 0 for empty input.
pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> f64 {
    assert_eq!(y_true.len(), y_pred.len());
    if y_true.is_empty() {
        return 0.0;
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    hits as f64 / y_true.len() as f64
}

/// Unweighted mean of per-class F1 over the classes present in `y_true`.
/// Classes that only appear among predictions still count against
/// precision but get no F1 term of their own.
pub fn macro_f1(y_true: &[usize], y_pred: &[usize]) -> f64 {
    assert_eq!(y_true.len(), y_pred.len());
    let classes: BTreeSet<usize> = y_true.iter().copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&t, &p) in y_true.iter().zip(y_pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        sum += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    sum / classes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub flow_accuracy: f64,
    pub flow_macro_f1: f64,
    pub packet_accuracy: f64,
    pub packet_macro_f1: f64,
    pub flows: usize,
    pub packets: usize,
}

impl Metrics {
    pub fn from_predictions(
        flow_true: &[usize],
        flow_pred: &[usize],
        packet_true: &[usize],
        packet_pred: &[usize],
    ) -> Self {
        Metrics {
            flow_accuracy: accuracy(flow_true, flow_pred),
            flow_macro_f1: macro_f1(flow_true, flow_pred),
            packet_accuracy: accuracy(packet_true, packet_pred),
            packet_macro_f1: macro_f1(packet_true, packet_pred),
            flows: flow_true.len(),
            packets: packet_true.len(),
        }
    }
}
