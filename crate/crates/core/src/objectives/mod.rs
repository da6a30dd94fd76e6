//! Training objectives: supervised contrastive loss at packet and flow
//! level, the augmentations feeding it, and cross entropy for both heads.
//!
//! The contrastive loss over rows `z_i` with labels `y_i` is
//!
//! `L = sum_i -1/|M(i)| sum_{m in M(i)} log( exp(z_i.z_m/t) / sum_{k != i} exp(z_i.z_k/t) )`
//!
//! where `M(i)` are the other rows sharing `y_i`. Rows are L2-normalized
//! first; rows without positives contribute nothing. Unaugmented anchors are
//! ordinary rows of the batch.

mod augment;

pub use augment::{augment_feature_flip, augment_random_walk, drop_packets, random_walk_subgraph};

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ObjectiveError;
use crate::graph::HeteroTrafficGraph;
use crate::model::{FlowSteps, GraphBatch, Session};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Probability of jumping back to the start node at each walk step.
    pub restart_prob: f64,
    /// Walk until this fraction of the nodes (rounded up) is visited.
    pub walk_target_fraction: f64,
    /// Step budget, as a multiple of the node count.
    pub max_walk_steps_factor: usize,
    pub flip_prob: f64,
    pub packet_drop_prob: f64,
    pub temperature: f64,
    /// Treat anchor embeddings as constants in the contrastive terms.
    pub stop_anchor_gradient: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            restart_prob: 0.8,
            walk_target_fraction: 0.5,
            max_walk_steps_factor: 4,
            flip_prob: 0.3,
            packet_drop_prob: 0.6,
            temperature: 0.07,
            stop_anchor_gradient: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        for (name, p) in [
            ("restart_prob", self.restart_prob),
            ("walk_target_fraction", self.walk_target_fraction),
            ("flip_prob", self.flip_prob),
            ("packet_drop_prob", self.packet_drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ObjectiveError::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ObjectiveError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Rows of a contrastive batch recorded on a tape.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: Var,
    pub labels: Vec<usize>,
    /// Marks the unaugmented rows; informational, all rows are treated alike.
    pub anchor_mask: Vec<bool>,
}

/// Weight matrix `W` with `L = sum W .* log_softmax`, and the diagonal mask.
fn scl_weights(labels: &[usize]) -> (Tensor, Vec<bool>) {
    let n = labels.len();
    let mut w = Tensor::zeros(n, n);
    let mut mask = vec![true; n * n];
    for i in 0..n {
        mask[i * n + i] = false;
        let positives = (0..n).filter(|&m| m != i && labels[m] == labels[i]).count();
        if positives == 0 {
            continue;
        }
        let v = -1.0 / positives as f64;
        let row = w.row_mut(i);
        for m in 0..n {
            if m != i && labels[m] == labels[i] {
                row[m] = v;
            }
        }
    }
    (w, mask)
}

/// Supervised contrastive loss of `batch` at temperature `tau`.
pub fn scl_loss(tape: &mut Tape, batch: &ContrastiveBatch, tau: f64) -> Result<Var, ObjectiveError> {
    let n = tape.value(batch.z).rows();
    if n < 2 {
        return Err(ObjectiveError::DegenerateBatch(n));
    }
    if batch.labels.len() != n {
        return Err(ObjectiveError::Config(format!(
            "{} labels for {n} rows",
            batch.labels.len()
        )));
    }
    let zn = tape.l2_normalize_rows(batch.z);
    let zt = tape.transpose(zn);
    let sim = tape.matmul(zn, zt)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let (w, mask) = scl_weights(&batch.labels);
    let logp = tape.masked_log_softmax_rows(sim, Rc::new(mask))?;
    Ok(tape.weighted_sum(logp, Rc::new(w))?)
}

/// Stacks augmented rows over anchor rows, duplicating the labels.
fn with_anchors(tape: &mut Tape, augmented: Var, anchors: Var, labels: &[usize], stop: bool) -> Result<ContrastiveBatch, ObjectiveError> {
    let anchors = if stop {
        let v = tape.value(anchors).clone();
        tape.constant(v)
    } else {
        anchors
    };
    let z = tape.concat_rows(&[augmented, anchors])?;
    let n = labels.len();
    Ok(ContrastiveBatch {
        z,
        labels: labels.iter().chain(labels).copied().collect(),
        anchor_mask: (0..2 * n).map(|i| i >= n).collect(),
    })
}

/// One view's packets for the packet-level contrastive term.
pub struct PacketViewInput<'g> {
    pub view: usize,
    pub graphs: Vec<&'g HeteroTrafficGraph>,
    /// Unaugmented packet embeddings, one row per graph.
    pub anchors: Var,
}

/// Packet-level contrastive loss: per view, the contrastive loss of
/// random-walk views plus anchors and of feature-flip views plus anchors.
pub fn packet_contrastive_loss<R: Rng + ?Sized>(
    s: &mut Session,
    inputs: &[PacketViewInput],
    labels: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Var, ObjectiveError> {
    let mut terms = Vec::new();
    for input in inputs {
        let bit_width = s.model.views[input.view].bit_width;
        let walked: Vec<HeteroTrafficGraph> =
            input.graphs.iter().map(|g| augment_random_walk(g, cfg, rng)).collect();
        let flipped: Vec<HeteroTrafficGraph> =
            input.graphs.iter().map(|g| augment_feature_flip(g, cfg, rng)).collect();
        for aug in [walked, flipped] {
            let refs: Vec<&HeteroTrafficGraph> = aug.iter().collect();
            let z = s.encode_packets(input.view, &GraphBatch::new(bit_width, &refs))?;
            let batch = with_anchors(s.tape, z, input.anchors, labels, cfg.stop_anchor_gradient)?;
            terms.push(scl_loss(s.tape, &batch, cfg.temperature)?);
        }
    }
    sum_terms(s.tape, &terms)
}

/// One view's flows for the flow-level contrastive term.
pub struct FlowViewInput<'a> {
    pub view: usize,
    /// Packet embeddings of every packet in the batch, one per row.
    pub packets: Var,
    /// Per flow, its packets as rows of `packets`, in order.
    pub flows: &'a [Vec<u32>],
    /// Unaugmented flow embeddings, one row per flow.
    pub anchors: Var,
}

/// Flow-level contrastive loss: per view, re-encodes every flow with
/// packets dropped (dropped packets are zero inputs) and takes the
/// contrastive loss of those plus the anchors.
pub fn flow_contrastive_loss<R: Rng + ?Sized>(
    s: &mut Session,
    inputs: &[FlowViewInput],
    labels: &[usize],
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Var, ObjectiveError> {
    let mut terms = Vec::new();
    for input in inputs {
        let steps: Vec<Vec<Option<u32>>> = input
            .flows
            .iter()
            .map(|f| {
                let keep = drop_packets(f.len(), cfg.packet_drop_prob, rng);
                f.iter().zip(keep).map(|(&p, k)| k.then_some(p)).collect()
            })
            .collect();
        let z = s.encode_flows(input.view, input.packets, &FlowSteps::new(&steps)?)?;
        let batch = with_anchors(s.tape, z, input.anchors, labels, cfg.stop_anchor_gradient)?;
        terms.push(scl_loss(s.tape, &batch, cfg.temperature)?);
    }
    sum_terms(s.tape, &terms)
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var, ObjectiveError> {
    let mut total = *terms
        .first()
        .ok_or_else(|| ObjectiveError::Config("no views".into()))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(total)
}

/// Mean cross entropy of `logits` against `labels`, with the target
/// smoothed to `(1 - eps) one_hot + eps / C`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], label_smoothing: f64) -> Result<Var, ObjectiveError> {
    let (b, c) = (tape.value(logits).rows(), tape.value(logits).cols());
    if labels.len() != b || b == 0 {
        return Err(ObjectiveError::Config(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(ObjectiveError::Config(format!("label {bad} with {c} classes")));
    }
    let logp = tape.log_softmax_rows(logits);
    let eps = label_smoothing;
    let mut w = Tensor::filled(b, c, -eps / c as f64 / b as f64);
    for (i, &y) in labels.iter().enumerate() {
        w.row_mut(i)[y] -= (1.0 - eps) / b as f64;
    }
    Ok(tape.weighted_sum(logp, Rc::new(w))?)
}

/// `(flow loss, packet loss)`; packets carry their flow's label.
pub fn classification_losses(
    tape: &mut Tape,
    flow_logits: Var,
    packet_logits: Var,
    flow_labels: &[usize],
    packet_labels: &[usize],
    label_smoothing: f64,
) -> Result<(Var, Var), ObjectiveError> {
    Ok((
        cross_entropy(tape, flow_logits, flow_labels, label_smoothing)?,
        cross_entropy(tape, packet_logits, packet_labels, label_smoothing)?,
    ))
}
