//! Packet and flow encoders with the two classification heads.
//!
//! Each configured view has its own unit embedding table, a stack of
//! heterogeneous graph layers and an LSTM over the packets of a flow. A
//! graph layer updates every node from its own state and, per edge type,
//! the mean of its neighbors' states:
//!
//! `h' = relu( sum_r [h | mean_{N_r} h] W_r + b_r )`
//!
//! The packet embedding is the mean of the final node states. Flow and
//! packet heads are separate two-layer MLPs over the concatenated views.

mod batch;

pub use batch::GraphBatch;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::capture::MAX_FLOW_PACKETS;
use crate::error::ModelError;
use crate::graph::{EdgeType, HeteroTrafficGraph};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::units::{check_width, vocabulary_size, DEFAULT_VIEWS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HgnnConfig {
    pub views: Vec<u32>,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Applied to node states between graph layers.
    pub gnn_dropout: f64,
    /// Applied to the LSTM inputs and to the flow embedding.
    pub lstm_dropout: f64,
    /// `false` ties the three per-type weight groups and aggregates over
    /// the union of all edges, as if the graph had a single edge type.
    pub heterogeneous: bool,
}

impl Default for HgnnConfig {
    fn default() -> Self {
        HgnnConfig {
            views: DEFAULT_VIEWS.to_vec(),
            num_layers: 4,
            embed_dim: 64,
            hidden_dim: 128,
            gnn_dropout: 0.0,
            lstm_dropout: 0.0,
            heterogeneous: true,
        }
    }
}

impl HgnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.views.is_empty() {
            return bad("at least one view is required".into());
        }
        for (i, &v) in self.views.iter().enumerate() {
            check_width(v).map_err(|e| ModelError::Config(e.to_string()))?;
            if self.views[..i].contains(&v) {
                return bad(format!("view {v} listed twice"));
            }
        }
        if self.num_layers == 0 {
            return bad("num_layers must be at least 1".into());
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        for (name, p) in [("gnn_dropout", self.gnn_dropout), ("lstm_dropout", self.lstm_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewParams {
    pub bit_width: u32,
    pub embed: ParamId,
    /// Per layer, per edge type in [`EdgeType::ALL`] order. Weights are
    /// `2 d_in x hidden`: the top half maps the node itself, the bottom half
    /// its neighbor mean.
    pub layers: Vec<[Linear; 3]>,
    /// Gates in order input, forget, cell, output; weight is
    /// `(hidden + hidden) x 4 hidden` over `[x | h]`.
    pub lstm: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Flow,
    Packet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// All learnable parameters plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: HgnnConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    pub views: Vec<ViewParams>,
    pub flow_head: HeadParams,
    pub packet_head: HeadParams,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

fn linear(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    out: usize,
) -> Linear {
    let weight = store.add(format!("{name}.weight"), uniform(rng, fan_in, out, fan_in));
    let bias = store.add(format!("{name}.bias"), uniform(rng, 1, out, fan_in));
    Linear { weight, bias }
}

impl Model {
    /// Randomly initialized model: every linear map and embedding table is
    /// uniform in `±1/sqrt(fan_in)`, the LSTM forget-gate bias gets `+1`.
    pub fn new(config: HgnnConfig, num_classes: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if num_classes < 2 {
            return Err(ModelError::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let mut views = Vec::new();
        for &bw in &config.views {
            let vocab = vocabulary_size(bw);
            let embed = store.add(format!("view{bw}.embed"), uniform(&mut rng, vocab, e, vocab));
            let mut layers = Vec::new();
            for l in 0..config.num_layers {
                let d_in = if l == 0 { e } else { h };
                let mut per_type = Vec::new();
                for ty in EdgeType::ALL {
                    let name = format!("view{bw}.hgnn.layer{}.{}", l + 1, ty.short_name());
                    per_type.push(linear(&mut store, &mut rng, &name, 2 * d_in, h));
                }
                if !config.heterogeneous {
                    for lin in &per_type[1..] {
                        let w = store.get(per_type[0].weight).clone();
                        let b = store.get(per_type[0].bias).clone();
                        *store.get_mut(lin.weight) = w;
                        *store.get_mut(lin.bias) = b;
                    }
                }
                layers.push([per_type[0], per_type[1], per_type[2]]);
            }
            let lstm = linear(&mut store, &mut rng, &format!("view{bw}.lstm"), 2 * h, 4 * h);
            for b in &mut store.get_mut(lstm.bias).data_mut()[h..2 * h] {
                *b += 1.0;
            }
            views.push(ViewParams {
                bit_width: bw,
                embed,
                layers,
                lstm,
            });
        }
        let cat = h * config.views.len();
        let mut head = |name: &str| HeadParams {
            fc1: linear(&mut store, &mut rng, &format!("{name}.fc1"), cat, h),
            fc2: linear(&mut store, &mut rng, &format!("{name}.fc2"), h, num_classes),
        };
        let flow_head = head("flow_head");
        let packet_head = head("packet_head");
        Ok(Model {
            config,
            num_classes,
            store,
            views,
            flow_head,
            packet_head,
        })
    }

    pub fn view_index(&self, bit_width: u32) -> Result<usize, ModelError> {
        self.views
            .iter()
            .position(|v| v.bit_width == bit_width)
            .ok_or(ModelError::UnknownView(bit_width))
    }

    pub fn head(&self, head: Head) -> &HeadParams {
        match head {
            Head::Flow => &self.flow_head,
            Head::Packet => &self.packet_head,
        }
    }

    /// Packet embedding of one graph, without dropout.
    pub fn packet_embedding(&self, graph: &HeteroTrafficGraph) -> Result<Tensor, ModelError> {
        let view = self.view_index(graph.bit_width)?;
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let mut s = Session::new(self, &mut tape, &vars, None);
        let batch = GraphBatch::new(graph.bit_width, &[graph]);
        let p = s.encode_packets(view, &batch)?;
        Ok(tape.value(p).clone())
    }

    /// Flow embedding from per-packet embeddings (`1 x hidden` each) of one
    /// view, without dropout.
    pub fn flow_embedding(&self, bit_width: u32, packets: &[Tensor]) -> Result<Tensor, ModelError> {
        let view = self.view_index(bit_width)?;
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let rows: Vec<Var> = packets.iter().map(|p| tape.constant(p.clone())).collect();
        let mut s = Session::new(self, &mut tape, &vars, None);
        if rows.is_empty() {
            return Err(ModelError::EmptyFlow);
        }
        let stacked = s.tape.concat_rows(&rows)?;
        let steps = FlowSteps::new(&[(0..packets.len() as u32).map(Some).collect()])?;
        let f = s.encode_flows(view, stacked, &steps)?;
        Ok(tape.value(f).clone())
    }

    /// Logits of one head from one embedding per view (in view order).
    pub fn logits(&self, head: Head, per_view: &[Tensor]) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let vars = self.store.bind_frozen(&mut tape);
        let inputs: Vec<Var> = per_view.iter().map(|p| tape.constant(p.clone())).collect();
        let mut s = Session::new(self, &mut tape, &vars, None);
        let z = s.classify(head, &inputs)?;
        Ok(tape.value(z).clone())
    }
}

/// Step schedule for a batch of flows run through the LSTM together.
#[derive(Debug, Clone)]
pub struct FlowSteps {
    /// Per time step, the packet-embedding row fed to each flow; `None`
    /// feeds a zero vector (dropped packet, or the flow already ended).
    pub inputs: Vec<Rc<Vec<Option<u32>>>>,
    /// Per time step, which flows are still running.
    pub active: Vec<Rc<Vec<bool>>>,
    pub num_flows: usize,
}

impl FlowSteps {
    /// `flows[i]` lists flow `i`'s packets as rows of the packet embedding
    /// matrix; `None` marks a dropped packet that is still stepped.
    pub fn new(flows: &[Vec<Option<u32>>]) -> Result<Self, ModelError> {
        let mut max_len = 0;
        for f in flows {
            if f.is_empty() {
                return Err(ModelError::EmptyFlow);
            }
            if f.len() > MAX_FLOW_PACKETS {
                return Err(ModelError::FlowTooLong(f.len()));
            }
            max_len = max_len.max(f.len());
        }
        let mut inputs = Vec::with_capacity(max_len);
        let mut active = Vec::with_capacity(max_len);
        for t in 0..max_len {
            inputs.push(Rc::new(flows.iter().map(|f| f.get(t).copied().flatten()).collect()));
            active.push(Rc::new(flows.iter().map(|f| t < f.len()).collect()));
        }
        Ok(FlowSteps {
            inputs,
            active,
            num_flows: flows.len(),
        })
    }
}

/// Forward computations of a [`Model`] recorded on a tape whose leaves were
/// bound from `model.store` (so `vars[id.index()]` is parameter `id`).
pub struct Session<'a> {
    pub model: &'a Model,
    pub tape: &'a mut Tape,
    pub vars: &'a [Var],
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    /// Dropout is active only when `dropout_rng` is given.
    pub fn new(
        model: &'a Model,
        tape: &'a mut Tape,
        vars: &'a [Var],
        dropout_rng: Option<ChaCha8Rng>,
    ) -> Self {
        Session {
            model,
            tape,
            vars,
            dropout_rng,
        }
    }

    fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var, ModelError> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if p == 0.0 {
            return Ok(x);
        }
        let (r, c) = (self.tape.value(x).rows(), self.tape.value(x).cols());
        let keep = 1.0 / (1.0 - p);
        let mask = (0..r * c)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        Ok(self.tape.mul_const(x, Rc::new(Tensor::new(r, c, mask)?))?)
    }

    fn linear(&mut self, x: Var, lin: Linear) -> Result<Var, ModelError> {
        let z = self.tape.matmul(x, self.var(lin.weight))?;
        Ok(self.tape.add_row(z, self.var(lin.bias))?)
    }

    /// Final node states of every graph in `batch` (`nodes x hidden`).
    pub fn node_states(&mut self, view: usize, batch: &GraphBatch) -> Result<Var, ModelError> {
        let model = self.model;
        let vp = &model.views[view];
        let mut h = self.tape.gather_rows(self.var(vp.embed), batch.lookup.clone())?;
        let n_layers = vp.layers.len();
        for (l, layer) in vp.layers.iter().enumerate() {
            let z = if self.model.config.heterogeneous {
                let ws: Vec<Var> = layer.iter().map(|lin| self.vars[lin.weight.index()]).collect();
                let bs: Vec<Var> = layer.iter().map(|lin| self.vars[lin.bias.index()]).collect();
                self.tape.sage_conv(h, &ws, &bs, &batch.adjacency)?
            } else {
                let w = self.tied(layer.map(|lin| lin.weight))?;
                let b = self.tied(layer.map(|lin| lin.bias))?;
                self.tape.sage_conv(h, &[w], &[b], &[batch.merged.clone()])?
            };
            h = self.tape.relu(z);
            if l + 1 < n_layers {
                h = self.dropout(h, self.model.config.gnn_dropout)?;
            }
        }
        Ok(h)
    }

    /// Mean of three parameter groups; all three receive the same gradient.
    fn tied(&mut self, ids: [ParamId; 3]) -> Result<Var, ModelError> {
        let [a, b, c] = ids.map(|id| self.var(id));
        let s = self.tape.add(a, b)?;
        let s = self.tape.add(s, c)?;
        Ok(self.tape.scale(s, 1.0 / 3.0))
    }

    /// Packet embeddings, one row per graph in `batch`.
    pub fn encode_packets(&mut self, view: usize, batch: &GraphBatch) -> Result<Var, ModelError> {
        let h = self.node_states(view, batch)?;
        Ok(self.tape.segment_mean(h, batch.segment.clone(), batch.num_graphs)?)
    }

    /// Final LSTM hidden state of every flow, one row per flow.
    pub fn encode_flows(&mut self, view: usize, packets: Var, steps: &FlowSteps) -> Result<Var, ModelError> {
        let hd = self.model.config.hidden_dim;
        let lstm = self.model.views[view].lstm;
        let packets = self.dropout(packets, self.model.config.lstm_dropout)?;
        let n = steps.num_flows;
        let mut h = self.tape.constant(Tensor::zeros(n, hd));
        let mut c = self.tape.constant(Tensor::zeros(n, hd));
        for (inputs, active) in steps.inputs.iter().zip(&steps.active) {
            let x = self.tape.gather_rows(packets, inputs.clone())?;
            let xh = self.tape.concat_cols(&[x, h])?;
            let gates = self.linear(xh, lstm)?;
            let i = self.tape.slice_cols(gates, 0, hd)?;
            let f = self.tape.slice_cols(gates, hd, 2 * hd)?;
            let g = self.tape.slice_cols(gates, 2 * hd, 3 * hd)?;
            let o = self.tape.slice_cols(gates, 3 * hd, 4 * hd)?;
            let (i, f, g, o) = (
                self.tape.sigmoid(i),
                self.tape.sigmoid(f),
                self.tape.tanh(g),
                self.tape.sigmoid(o),
            );
            let fc = self.tape.mul(f, c)?;
            let ig = self.tape.mul(i, g)?;
            let c_new = self.tape.add(fc, ig)?;
            let tc = self.tape.tanh(c_new);
            let h_new = self.tape.mul(o, tc)?;
            if active.iter().all(|&a| a) {
                h = h_new;
                c = c_new;
            } else {
                h = self.tape.select_rows(h_new, h, active.clone())?;
                c = self.tape.select_rows(c_new, c, active.clone())?;
            }
        }
        self.dropout(h, self.model.config.lstm_dropout)
    }

    /// Class logits from one embedding matrix per view (same row count).
    pub fn classify(&mut self, head: Head, per_view: &[Var]) -> Result<Var, ModelError> {
        if per_view.len() != self.model.views.len() {
            return Err(ModelError::Config(format!(
                "classifier expects {} views, got {}",
                self.model.views.len(),
                per_view.len()
            )));
        }
        let hp = *self.model.head(head);
        let x = self.tape.concat_cols(per_view)?;
        let z = self.linear(x, hp.fc1)?;
        let z = self.tape.relu(z);
        self.linear(z, hp.fc2)
    }
}

#[cfg(test)]
mod tests;
