use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::*;
use crate::capture::{Direction, PacketRecord};
use crate::graph::{build_views, Node, PmiConfig, Segment};
use crate::tensor::{grad_check, GradCheckOptions};

fn small_config() -> HgnnConfig {
    HgnnConfig {
        views: vec![4, 8],
        num_layers: 2,
        embed_dim: 6,
        hidden_dim: 5,
        ..HgnnConfig::default()
    }
}

fn packet(seed: u64) -> PacketRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = rng.gen_range(4..12);
    let p = rng.gen_range(4..20);
    PacketRecord {
        header_bytes: (0..h).map(|_| rng.gen_range(0..6u8) * 17).collect(),
        payload_bytes: (0..p).map(|_| rng.gen_range(0..8u8) * 33).collect(),
        direction: Direction::Forward,
        timestamp_us: 0,
    }
}

fn graphs(seed: u64) -> BTreeMap<u32, HeteroTrafficGraph> {
    build_views(&packet(seed), &[4, 8], &PmiConfig::default()).unwrap()
}

use std::collections::BTreeMap;

fn two_node_hp_graph() -> HeteroTrafficGraph {
    HeteroTrafficGraph {
        bit_width: 4,
        nodes: vec![
            Node {
                segment: Segment::Header,
                value: 3,
            },
            Node {
                segment: Segment::Payload,
                value: 9,
            },
        ],
        edges: [vec![], vec![], vec![(0, 1)]],
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn config_validation() {
    assert!(HgnnConfig::default().validate().is_ok());
    for bad in [
        HgnnConfig { views: vec![], ..HgnnConfig::default() },
        HgnnConfig { views: vec![3], ..HgnnConfig::default() },
        HgnnConfig { views: vec![4, 4], ..HgnnConfig::default() },
        HgnnConfig { num_layers: 0, ..HgnnConfig::default() },
        HgnnConfig { hidden_dim: 0, ..HgnnConfig::default() },
        HgnnConfig { gnn_dropout: 1.0, ..HgnnConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))), "{bad:?}");
    }
    assert!(Model::new(HgnnConfig::default(), 1, 0).is_err());
}

#[test]
fn parameter_names_and_shapes() {
    let m = Model::new(HgnnConfig::default(), 3, 0).unwrap();
    let shape = |n: &str| m.store.get(m.store.find(n).unwrap()).shape();
    assert_eq!(shape("view4.embed"), [16, 64]);
    assert_eq!(shape("view8.embed"), [256, 64]);
    assert_eq!(shape("view8.hgnn.layer1.hp.weight"), [128, 128]);
    assert_eq!(shape("view8.hgnn.layer4.hh.weight"), [256, 128]);
    assert_eq!(shape("view4.lstm.weight"), [256, 512]);
    assert_eq!(shape("flow_head.fc1.weight"), [256, 128]);
    assert_eq!(shape("packet_head.fc2.bias"), [1, 3]);
    // forget gate bias offset
    let b = m.store.get(m.views[0].lstm.bias);
    assert!(b.data()[128..256].iter().all(|&x| x > 0.9));
    assert!(b.data()[..128].iter().all(|&x| x.abs() < 0.1));
}

#[test]
fn heads_are_unshared() {
    let m = Model::new(small_config(), 3, 0).unwrap();
    let names: Vec<&str> = m.store.ids().map(|id| m.store.name(id)).collect();
    let flow: Vec<&&str> = names.iter().filter(|n| n.starts_with("flow_head.")).collect();
    let pkt: Vec<&&str> = names.iter().filter(|n| n.starts_with("packet_head.")).collect();
    assert_eq!(flow.len(), 4);
    assert_eq!(pkt.len(), 4);
    assert_ne!(m.flow_head, m.packet_head);
}

#[test]
fn logits_have_one_entry_per_class() {
    let m = Model::new(small_config(), 7, 1).unwrap();
    let g = graphs(1);
    let p: Vec<Tensor> = g.values().map(|g| m.packet_embedding(g).unwrap()).collect();
    let z = m.logits(Head::Packet, &p).unwrap();
    assert_eq!(z.shape(), [1, 7]);
    let doubled: Vec<Tensor> = p
        .iter()
        .map(|t| Tensor::new(1, t.cols(), t.data().iter().map(|x| 2.0 * x).collect()).unwrap())
        .collect();
    assert!(max_abs_diff(&z, &m.logits(Head::Packet, &doubled).unwrap()) > 0.0);
    assert!(m.logits(Head::Flow, &p[..1]).is_err());
}

#[test]
fn single_node_graph_uses_only_self_paths() {
    let m = Model::new(small_config(), 2, 4).unwrap();
    let g = HeteroTrafficGraph {
        bit_width: 8,
        nodes: vec![Node {
            segment: Segment::Header,
            value: 200,
        }],
        edges: Default::default(),
    };
    let got = m.packet_embedding(&g).unwrap();
    // reference: h <- relu(h * sum_r W_r[self] + sum_r b_r)
    let vp = &m.views[1];
    let d0 = m.config.embed_dim;
    let mut h: Vec<f64> = m.store.get(vp.embed).row(200).to_vec();
    for (l, layer) in vp.layers.iter().enumerate() {
        let d = if l == 0 { d0 } else { m.config.hidden_dim };
        let mut out = vec![0.0; m.config.hidden_dim];
        for lin in layer {
            let w = m.store.get(lin.weight);
            let b = m.store.get(lin.bias);
            for (j, o) in out.iter_mut().enumerate() {
                *o += b.data()[j];
                for (i, hi) in h.iter().enumerate().take(d) {
                    *o += hi * w.get(i, j);
                }
            }
        }
        h = out.into_iter().map(|x| x.max(0.0)).collect();
    }
    for (a, b) in got.data().iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zeroed_edge_type_weights_match_edgeless_twin() {
    let mut m = Model::new(small_config(), 2, 2).unwrap();
    let g = two_node_hp_graph();
    let twin = g.without_edges(EdgeType::HeaderPayload);
    assert_ne!(
        m.packet_embedding(&g).unwrap(),
        m.packet_embedding(&twin).unwrap()
    );
    for layer in m.views[0].layers.clone() {
        let w = layer[EdgeType::HeaderPayload.index()].weight;
        m.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let d = max_abs_diff(&m.packet_embedding(&g).unwrap(), &m.packet_embedding(&twin).unwrap());
    assert!(d <= 1e-12, "{d}");
}

#[test]
fn readout_is_mean_of_final_node_states() {
    let m = Model::new(small_config(), 2, 3).unwrap();
    let g = &graphs(9)[&8];
    let mut tape = Tape::new();
    let vars = m.store.bind_frozen(&mut tape);
    let mut s = Session::new(&m, &mut tape, &vars, None);
    let batch = GraphBatch::new(8, &[g]);
    let h = s.node_states(1, &batch).unwrap();
    let p = s.encode_packets(1, &batch).unwrap();
    let hv = tape.value(h);
    for c in 0..hv.cols() {
        let mean = (0..hv.rows()).map(|r| hv.get(r, c)).sum::<f64>() / hv.rows() as f64;
        assert!((tape.value(p).get(0, c) - mean).abs() < 1e-12);
    }
}

#[test]
fn batched_encoding_matches_individual() {
    let m = Model::new(small_config(), 2, 5).unwrap();
    let gs: Vec<HeteroTrafficGraph> = (0..4).map(|s| graphs(s)[&4].clone()).collect();
    let refs: Vec<&HeteroTrafficGraph> = gs.iter().collect();
    let mut tape = Tape::new();
    let vars = m.store.bind_frozen(&mut tape);
    let mut s = Session::new(&m, &mut tape, &vars, None);
    let p = s.encode_packets(0, &GraphBatch::new(4, &refs)).unwrap();
    for (i, g) in gs.iter().enumerate() {
        let single = m.packet_embedding(g).unwrap();
        for (a, b) in single.data().iter().zip(tape.value(p).row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn flow_encoder_contracts() {
    let m = Model::new(small_config(), 2, 6).unwrap();
    let h = m.config.hidden_dim;
    let p1 = m.packet_embedding(&graphs(1)[&4]).unwrap();
    let p2 = m.packet_embedding(&graphs(2)[&4]).unwrap();
    assert_eq!(m.flow_embedding(4, &[]), Err(ModelError::EmptyFlow));
    let too_long = vec![p1.clone(); 16];
    assert_eq!(m.flow_embedding(4, &too_long), Err(ModelError::FlowTooLong(16)));
    assert_eq!(m.flow_embedding(16, &[p1.clone()]), Err(ModelError::UnknownView(16)));

    // one step from the zero state
    let f = m.flow_embedding(4, &[p1.clone()]).unwrap();
    let lstm = m.views[0].lstm;
    let (w, b) = (m.store.get(lstm.weight), m.store.get(lstm.bias));
    let gate = |j: usize| -> f64 {
        b.data()[j] + (0..h).map(|i| p1.data()[i] * w.get(i, j)).sum::<f64>()
    };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    for k in 0..h {
        let c = sig(gate(k)) * gate(2 * h + k).tanh();
        let want = sig(gate(3 * h + k)) * c.tanh();
        assert!((f.data()[k] - want).abs() < 1e-12);
    }

    let ab = m.flow_embedding(4, &[p1.clone(), p2.clone()]).unwrap();
    let ba = m.flow_embedding(4, &[p2.clone(), p1.clone()]).unwrap();
    assert!(max_abs_diff(&ab, &ba) > 1e-9);

    let mut zero = m.clone();
    for id in [lstm.weight, lstm.bias] {
        zero.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    let z = zero.flow_embedding(4, &[p1, p2]).unwrap();
    assert!(z.data().iter().all(|&x| x == 0.0));
}

#[test]
fn ragged_flows_batch_like_individual_flows() {
    let m = Model::new(small_config(), 2, 8).unwrap();
    let ps: Vec<Tensor> = (0..5).map(|s| m.packet_embedding(&graphs(s)[&8]).unwrap()).collect();
    let flows = vec![vec![Some(0), Some(1), Some(2)], vec![Some(3)], vec![Some(4), None]];
    let mut tape = Tape::new();
    let vars = m.store.bind_frozen(&mut tape);
    let rows: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
    let mut s = Session::new(&m, &mut tape, &vars, None);
    let stacked = s.tape.concat_rows(&rows).unwrap();
    let f = s.encode_flows(1, stacked, &FlowSteps::new(&flows).unwrap()).unwrap();
    let zero = Tensor::zeros(1, m.config.hidden_dim);
    let singles = [
        m.flow_embedding(8, &ps[0..3]).unwrap(),
        m.flow_embedding(8, &ps[3..4]).unwrap(),
        m.flow_embedding(8, &[ps[4].clone(), zero]).unwrap(),
    ];
    for (i, want) in singles.iter().enumerate() {
        for (a, b) in want.data().iter().zip(tape.value(f).row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

/// Sum of both heads' logits weighted by a fixed probe, over a 2-flow batch.
fn probe_loss(m: &Model, tape: &mut Tape, vars: &[Var], gs: &[Vec<BTreeMap<u32, HeteroTrafficGraph>>]) -> Result<Var, ModelError> {
    let mut s = Session::new(m, tape, vars, None);
    let mut flows_per_view = Vec::new();
    let mut packets_per_view = Vec::new();
    for (vi, &bw) in m.config.views.iter().enumerate() {
        let refs: Vec<&HeteroTrafficGraph> = gs.iter().flatten().map(|p| &p[&bw]).collect();
        let p = s.encode_packets(vi, &GraphBatch::new(bw, &refs))?;
        let mut next = 0u32;
        let flows: Vec<Vec<Option<u32>>> = gs
            .iter()
            .map(|f| f.iter().map(|_| { next += 1; Some(next - 1) }).collect())
            .collect();
        flows_per_view.push(s.encode_flows(vi, p, &FlowSteps::new(&flows)?)?);
        packets_per_view.push(p);
    }
    let zf = s.classify(Head::Flow, &flows_per_view)?;
    let zp = s.classify(Head::Packet, &packets_per_view)?;
    let rf = s.tape.value(zf).rows();
    let rp = s.tape.value(zp).rows();
    let wf = Rc::new(Tensor::new(rf, 2, (0..rf * 2).map(|i| (i as f64 * 0.7).sin()).collect())?);
    let wp = Rc::new(Tensor::new(rp, 2, (0..rp * 2).map(|i| (i as f64 * 1.3).cos()).collect())?);
    let a = s.tape.weighted_sum(zf, wf)?;
    let b = s.tape.weighted_sum(zp, wp)?;
    Ok(s.tape.add(a, b)?)
}

fn micro_batch() -> Vec<Vec<BTreeMap<u32, HeteroTrafficGraph>>> {
    vec![vec![graphs(11), graphs(12)], vec![graphs(13)]]
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = HgnnConfig {
        hidden_dim: 12,
        ..small_config()
    };
    let m = Model::new(cfg, 2, 10).unwrap();
    let mut alive = vec![false; m.store.len()];
    for batch in 0..4u64 {
        let gs = vec![
            vec![graphs(20 + 3 * batch), graphs(21 + 3 * batch)],
            vec![graphs(22 + 3 * batch)],
        ];
        let mut tape = Tape::new();
        let vars = m.store.bind(&mut tape);
        let loss = probe_loss(&m, &mut tape, &vars, &gs).unwrap();
        let grads = tape.backward(loss).unwrap();
        for id in m.store.ids() {
            let g = grads.get(vars[id.index()]).expect("gradient present");
            alive[id.index()] |= g.data().iter().any(|&x| x != 0.0);
        }
    }
    for id in m.store.ids() {
        assert!(alive[id.index()], "{} never receives gradient", m.store.name(id));
    }
}

#[test]
fn model_gradients_match_finite_differences() {
    let mut m = Model::new(small_config(), 2, 12).unwrap();
    let gs = micro_batch();
    let frozen = m.clone();
    let report = grad_check(
        &mut m.store,
        |tape, vars| probe_loss(&frozen, tape, vars, &gs),
        &GradCheckOptions {
            entries_per_param: Some(12),
            ..GradCheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn homogeneous_variant_ties_gradients() {
    let cfg = HgnnConfig {
        heterogeneous: false,
        ..small_config()
    };
    let m = Model::new(cfg, 2, 13).unwrap();
    let gs = micro_batch();
    let mut tape = Tape::new();
    let vars = m.store.bind(&mut tape);
    let loss = probe_loss(&m, &mut tape, &vars, &gs).unwrap();
    let grads = tape.backward(loss).unwrap();
    for vp in &m.views {
        for layer in &vp.layers {
            for pick in [|l: &Linear| l.weight, |l: &Linear| l.bias] {
                let g0 = grads.get(vars[pick(&layer[0]).index()]).unwrap();
                assert_eq!(m.store.get(pick(&layer[0])), m.store.get(pick(&layer[2])));
                for lin in &layer[1..] {
                    assert_eq!(grads.get(vars[pick(lin).index()]).unwrap(), g0);
                }
            }
        }
    }
}

#[test]
fn dropout_only_in_training_sessions() {
    let cfg = HgnnConfig {
        gnn_dropout: 0.5,
        ..small_config()
    };
    let m = Model::new(cfg, 2, 14).unwrap();
    let g = &graphs(3)[&8];
    let batch = GraphBatch::new(8, &[g]);
    let run = |rng: Option<ChaCha8Rng>| {
        let mut tape = Tape::new();
        let vars = m.store.bind_frozen(&mut tape);
        let mut s = Session::new(&m, &mut tape, &vars, rng);
        let p = s.encode_packets(1, &batch).unwrap();
        tape.value(p).clone()
    };
    assert_eq!(run(None), m.packet_embedding(g).unwrap());
    let a = run(Some(ChaCha8Rng::seed_from_u64(1)));
    assert_eq!(a, run(Some(ChaCha8Rng::seed_from_u64(1))));
    assert_ne!(a, run(None));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn node_permutation_leaves_embedding_unchanged(seed in 0u64..1000, view in prop::sample::select(vec![4u32, 8])) {
        let m = Model::new(small_config(), 2, seed).unwrap();
        let g = &graphs(seed)[&view];
        let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = m.packet_embedding(g).unwrap();
        let b = m.packet_embedding(&g.permuted(&perm)).unwrap();
        prop_assert!(max_abs_diff(&a, &b) <= 1e-9);
    }

    #[test]
    fn isolated_edge_type_never_matters(seed in 0u64..1000, ty in 0usize..3) {
        let ty = EdgeType::ALL[ty];
        let mut m = Model::new(small_config(), 2, seed).unwrap();
        for vi in 0..m.views.len() {
            for layer in m.views[vi].layers.clone() {
                let w = layer[ty.index()].weight;
                m.store.get_mut(w).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        for g in graphs(seed).values() {
            let a = m.packet_embedding(g).unwrap();
            let b = m.packet_embedding(&g.without_edges(ty)).unwrap();
            prop_assert!(max_abs_diff(&a, &b) <= 1e-12);
        }
    }
}
