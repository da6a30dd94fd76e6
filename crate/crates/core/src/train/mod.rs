//! Multi-task training, evaluation and checkpoints.
//!
//! Every optimizer step minimizes
//!
//! `L = CE_packet + CE_flow + alpha * CL_packet + beta * CL_flow`
//!
//! over a batch of flows, with Adam under a linear-warmup, cosine-decay
//! learning rate. The checkpoint with the best held-out flow macro-F1 is
//! kept alongside the last one.

mod checkpoint;
mod metrics;
mod split;

pub use checkpoint::Checkpoint;
pub use metrics::{accuracy, macro_f1, Metrics};
pub use split::{stratified_split, stratified_split_indices};

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::TrafficFlow;
use crate::error::{Error, TrainError};
use crate::graph::{build_views, FlowGraphs, HeteroTrafficGraph, PmiConfig};
use crate::model::{FlowSteps, GraphBatch, Head, HgnnConfig, Model, Session};
use crate::objectives::{
    classification_losses, flow_contrastive_loss, packet_contrastive_loss, AugmentConfig,
    FlowViewInput, PacketViewInput,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Every knob of a training run. Serialized flat, so a TOML config is a
/// list of `key = value` lines; missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub gradient_accumulation: usize,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_fraction: f64,
    pub label_smoothing: f64,
    pub gnn_dropout: f64,
    pub lstm_dropout: f64,
    /// Weight of the packet-level contrastive term.
    pub alpha: f64,
    /// Weight of the flow-level contrastive term.
    pub beta: f64,
    pub seed: u64,
    pub views: Vec<u32>,
    pub pmi_window: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub heterogeneous: bool,
    pub restart_prob: f64,
    pub walk_target_fraction: f64,
    pub max_walk_steps_factor: usize,
    pub flip_prob: f64,
    pub packet_drop_prob: f64,
    pub temperature: f64,
    pub stop_anchor_gradient: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Flows per forward pass during evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = HgnnConfig::default();
        let a = AugmentConfig::default();
        TrainConfig {
            batch_size: 16,
            gradient_accumulation: 1,
            epochs: 20,
            lr_max: 1e-2,
            lr_min: 1e-4,
            warmup_fraction: 0.1,
            label_smoothing: 0.0,
            gnn_dropout: m.gnn_dropout,
            lstm_dropout: m.lstm_dropout,
            alpha: 1.0,
            beta: 0.5,
            seed: 0,
            views: m.views,
            pmi_window: PmiConfig::default().window_size,
            num_layers: m.num_layers,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            heterogeneous: m.heterogeneous,
            restart_prob: a.restart_prob,
            walk_target_fraction: a.walk_target_fraction,
            max_walk_steps_factor: a.max_walk_steps_factor,
            flip_prob: a.flip_prob,
            packet_drop_prob: a.packet_drop_prob,
            temperature: a.temperature,
            stop_anchor_gradient: a.stop_anchor_gradient,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_toml_str(&text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn model_config(&self) -> HgnnConfig {
        HgnnConfig {
            views: self.views.clone(),
            num_layers: self.num_layers,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            gnn_dropout: self.gnn_dropout,
            lstm_dropout: self.lstm_dropout,
            heterogeneous: self.heterogeneous,
        }
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            restart_prob: self.restart_prob,
            walk_target_fraction: self.walk_target_fraction,
            max_walk_steps_factor: self.max_walk_steps_factor,
            flip_prob: self.flip_prob,
            packet_drop_prob: self.packet_drop_prob,
            temperature: self.temperature,
            stop_anchor_gradient: self.stop_anchor_gradient,
        }
    }

    pub fn pmi_config(&self) -> PmiConfig {
        PmiConfig {
            window_size: self.pmi_window,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.gradient_accumulation == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes and gradient_accumulation must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min && self.lr_max.is_finite()) {
            return bad(format!(
                "need lr_max >= lr_min > 0, got ({}, {})",
                self.lr_max, self.lr_min
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must be in [0, 1), got {}", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must be in [0, 1), got {}", self.label_smoothing));
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&w) {
                return bad(format!("{name} must be in [0, 1], got {w}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        self.model_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.augment_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        self.pmi_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Learning rate at optimizer step `step` of `total_steps`: linear from 0
/// to `lr_max` over the first `round(warmup_fraction * total_steps)` steps,
/// then half-cosine down to `lr_min` at the final step.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = (cfg.warmup_fraction * total_steps as f64).round() as usize;
    if step < warm {
        return cfg.lr_max * step as f64 / warm as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(warm);
    if span == 0 {
        return if step > warm { cfg.lr_min } else { cfg.lr_max };
    }
    let t = ((step - warm) as f64 / span as f64).min(1.0);
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t).cos())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update; `grads[i]` belongs to the i-th parameter of `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].data();
            for (((p, g), m), v) in store.get_mut(id).data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Graphs for every packet and view of `flows`.
pub fn prepare_flows(flows: &[TrafficFlow], views: &[u32], pmi: &PmiConfig) -> crate::Result<Vec<FlowGraphs>> {
    flows
        .iter()
        .map(|f| {
            let packets = f
                .packets
                .iter()
                .map(|p| build_views(p, views, pmi))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(FlowGraphs {
                label: f.label,
                packets,
            })
        })
        .collect()
}

/// Loss terms of one batch, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub packet_cls: f64,
    pub flow_cls: f64,
    pub packet_cl: f64,
    pub flow_cl: f64,
    pub total: f64,
}

impl LossComponents {
    fn add_scaled(&mut self, o: &LossComponents, s: f64) {
        self.packet_cls += s * o.packet_cls;
        self.flow_cls += s * o.flow_cls;
        self.packet_cl += s * o.packet_cl;
        self.flow_cl += s * o.flow_cl;
        self.total += s * o.total;
    }
}

struct Encoded {
    /// Per view: packet embeddings (all packets of the batch) and flow
    /// embeddings.
    packets: Vec<Var>,
    flows: Vec<Var>,
    /// Rows of each flow's packets.
    rows: Vec<Vec<u32>>,
}

fn graphs_of<'g>(batch: &[&'g FlowGraphs], bit_width: u32) -> Result<Vec<&'g HeteroTrafficGraph>, TrainError> {
    batch
        .iter()
        .flat_map(|f| f.packets.iter())
        .map(|p| {
            p.get(&bit_width)
                .ok_or_else(|| TrainError::Data(format!("no graph for view {bit_width}")))
        })
        .collect()
}

fn encode(s: &mut Session, batch: &[&FlowGraphs]) -> crate::Result<Encoded> {
    let mut next = 0u32;
    let rows: Vec<Vec<u32>> = batch
        .iter()
        .map(|f| {
            (0..f.packets.len())
                .map(|_| {
                    next += 1;
                    next - 1
                })
                .collect()
        })
        .collect();
    let steps = FlowSteps::new(&rows.iter().map(|f| f.iter().map(|&r| Some(r)).collect()).collect::<Vec<_>>())?;
    let (mut packets, mut flows) = (Vec::new(), Vec::new());
    for (vi, &bw) in s.model.config.views.clone().iter().enumerate() {
        let graphs = graphs_of(batch, bw)?;
        let p = s.encode_packets(vi, &GraphBatch::new(bw, &graphs))?;
        flows.push(s.encode_flows(vi, p, &steps)?);
        packets.push(p);
    }
    Ok(Encoded { packets, flows, rows })
}

/// Records the full training objective of `batch` on the session's tape.
pub fn batch_loss<R: Rng + ?Sized>(
    s: &mut Session,
    batch: &[&FlowGraphs],
    cfg: &TrainConfig,
    rng: &mut R,
) -> crate::Result<(Var, [Var; 4])> {
    let enc = encode(s, batch)?;
    let flow_labels: Vec<usize> = batch.iter().map(|f| f.label).collect();
    let packet_labels: Vec<usize> = batch
        .iter()
        .flat_map(|f| std::iter::repeat_n(f.label, f.packets.len()))
        .collect();
    let zf = s.classify(Head::Flow, &enc.flows)?;
    let zp = s.classify(Head::Packet, &enc.packets)?;
    let (l_fcls, l_pcls) = classification_losses(s.tape, zf, zp, &flow_labels, &packet_labels, cfg.label_smoothing)?;
    let aug = cfg.augment_config();
    let zero = s.tape.constant(Tensor::scalar(0.0));
    let l_pcl = if cfg.alpha > 0.0 {
        let mut inputs = Vec::new();
        for (vi, &bw) in s.model.config.views.iter().enumerate() {
            inputs.push(PacketViewInput {
                view: vi,
                graphs: graphs_of(batch, bw)?,
                anchors: enc.packets[vi],
            });
        }
        packet_contrastive_loss(s, &inputs, &packet_labels, &aug, rng)?
    } else {
        zero
    };
    let l_fcl = if cfg.beta > 0.0 {
        let inputs: Vec<FlowViewInput> = (0..enc.flows.len())
            .map(|vi| FlowViewInput {
                view: vi,
                packets: enc.packets[vi],
                flows: &enc.rows,
                anchors: enc.flows[vi],
            })
            .collect();
        flow_contrastive_loss(s, &inputs, &flow_labels, &aug, rng)?
    } else {
        zero
    };
    let t = s.tape.add(l_pcls, l_fcls)?;
    let a = s.tape.scale(l_pcl, cfg.alpha);
    let t = s.tape.add(t, a)?;
    let b = s.tape.scale(l_fcl, cfg.beta);
    let total = s.tape.add(t, b)?;
    Ok((total, [l_pcls, l_fcls, l_pcl, l_fcl]))
}

/// Flow and packet predictions (argmax, ties to the lower class).
pub fn predict(model: &Model, flows: &[FlowGraphs], batch_size: usize) -> crate::Result<(Vec<usize>, Vec<usize>)> {
    let argmax = |row: &[f64]| {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let (mut fp, mut pp) = (Vec::new(), Vec::new());
    for chunk in flows.chunks(batch_size.max(1)) {
        let refs: Vec<&FlowGraphs> = chunk.iter().collect();
        let mut tape = Tape::new();
        let vars = model.store.bind_frozen(&mut tape);
        let mut s = Session::new(model, &mut tape, &vars, None);
        let enc = encode(&mut s, &refs)?;
        let zf = s.classify(Head::Flow, &enc.flows)?;
        let zp = s.classify(Head::Packet, &enc.packets)?;
        let (zf, zp) = (tape.value(zf), tape.value(zp));
        fp.extend((0..zf.rows()).map(|r| argmax(zf.row(r))));
        pp.extend((0..zp.rows()).map(|r| argmax(zp.row(r))));
    }
    Ok((fp, pp))
}

/// Flow- and packet-level accuracy and macro-F1 on `flows`.
pub fn evaluate(model: &Model, flows: &[FlowGraphs], batch_size: usize) -> crate::Result<Metrics> {
    let (fp, pp) = predict(model, flows, batch_size)?;
    let ft: Vec<usize> = flows.iter().map(|f| f.label).collect();
    let pt: Vec<usize> = flows
        .iter()
        .flat_map(|f| std::iter::repeat_n(f.label, f.packets.len()))
        .collect();
    Ok(Metrics::from_predictions(&ft, &fp, &pt, &pp))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub train_loss: LossComponents,
    pub heldout: Option<Metrics>,
    pub lr: f64,
    pub optimizer_steps: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("report serializes") + "\n")
            .collect()
    }
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub report: TrainReport,
}

/// Trains a fresh model on `train_set`, selecting the best epoch by flow
/// macro-F1 on `heldout` (the last epoch wins if `heldout` is empty).
/// `on_epoch` sees each epoch's report as soon as it is complete.
pub fn train(
    train_set: &[FlowGraphs],
    heldout: &[FlowGraphs],
    num_classes: usize,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> crate::Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Data("no training flows".into()).into());
    }
    if let Some(f) = train_set.iter().chain(heldout).find(|f| f.label >= num_classes) {
        return Err(TrainError::Data(format!("label {} with {num_classes} classes", f.label)).into());
    }
    let started = Instant::now();
    let mut model = Model::new(cfg.model_config(), num_classes, cfg.seed)?;
    let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.gradient_accumulation);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut step = 0;
    let mut best: Option<((f64, f64), Checkpoint)> = None;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        order.shuffle(&mut rng);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut sums = LossComponents::default();
        let mut lr = 0.0;
        for (bi, group) in batches.chunks(cfg.gradient_accumulation).enumerate() {
            let mut acc: Option<Vec<Tensor>> = None;
            for (mi, idx) in group.iter().enumerate() {
                let batch: Vec<&FlowGraphs> = idx.iter().map(|&i| &train_set[i]).collect();
                let mut step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let mut tape = Tape::new();
                let vars = model.store.bind(&mut tape);
                let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let mut s = Session::new(&model, &mut tape, &vars, Some(dropout_rng));
                let (total, parts) = batch_loss(&mut s, &batch, cfg, &mut step_rng)?;
                let comps = LossComponents {
                    packet_cls: tape.value(parts[0]).item(),
                    flow_cls: tape.value(parts[1]).item(),
                    packet_cl: tape.value(parts[2]).item(),
                    flow_cl: tape.value(parts[3]).item(),
                    total: tape.value(total).item(),
                };
                if !comps.total.is_finite() {
                    let labels: Vec<usize> = batch.iter().map(|f| f.label).collect();
                    let packets: Vec<usize> = batch.iter().map(|f| f.packets.len()).collect();
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        step: bi * cfg.gradient_accumulation + mi,
                        diagnostic: format!(
                            "components {comps:?}; flow indices {idx:?}; labels {labels:?}; packets per flow {packets:?}"
                        ),
                    }
                    .into());
                }
                sums.add_scaled(&comps, 1.0 / batches.len() as f64);
                let mut grads = tape.backward(total)?;
                let g: Vec<Tensor> = vars
                    .iter()
                    .zip(model.store.ids())
                    .map(|(&v, id)| {
                        grads.take(v).unwrap_or_else(|| {
                            let p = model.store.get(id);
                            Tensor::zeros(p.rows(), p.cols())
                        })
                    })
                    .collect();
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = acc.expect("non-empty group");
            if group.len() > 1 {
                let inv = 1.0 / group.len() as f64;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|x| *x *= inv);
                }
            }
            lr = lr_at(step, total_steps, cfg);
            adam.step(&mut model.store, &grads, lr);
            step += 1;
        }
        let heldout_metrics = if heldout.is_empty() {
            None
        } else {
            Some(evaluate(&model, heldout, cfg.eval_batch_size)?)
        };
        let report = EpochReport {
            epoch,
            train_loss: sums,
            heldout: heldout_metrics.clone(),
            lr,
            optimizer_steps: step,
            wall_clock_secs: epoch_start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} heldout {:?}",
            sums.total,
            heldout_metrics.as_ref().map(|m| (m.flow_macro_f1, m.packet_macro_f1))
        );
        on_epoch(&report);
        epochs.push(report);
        // ties on flow F1 go to the better packet F1
        let score = heldout_metrics
            .as_ref()
            .map_or((f64::INFINITY, 0.0), |m| (m.flow_macro_f1, m.packet_macro_f1));
        if best.as_ref().is_none_or(|(b, _)| score > *b || heldout.is_empty()) {
            best = Some((score, Checkpoint::new(&model, cfg, epoch, heldout_metrics)));
        }
    }
    let (_, best) = best.expect("at least one epoch");
    let last_epoch = epochs.last().expect("at least one epoch");
    let last = Checkpoint::new(&model, cfg, last_epoch.epoch, last_epoch.heldout.clone());
    Ok(TrainOutcome {
        report: TrainReport {
            best_epoch: best.epoch,
            epochs,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        best,
        last,
    })
}
