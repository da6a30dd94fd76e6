//! Encrypted-traffic classification over multi-view heterogeneous traffic graphs.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`capture`] reads classic pcap files, strips addresses and ports and
//!    assembles bidirectional flows.
//! 2. [`units`] re-chunks header and payload bytes into N-bit traffic units.
//! 3. [`graph`] turns each unit sequence into a heterogeneous co-occurrence
//!    graph (header-header, payload-payload and header-payload edges) using
//!    point-wise mutual information over sliding windows.
//! 4. [`tensor`] is a small dense reverse-mode autodiff engine.
//! 5. [`model`] holds the per-view graph encoder, the recurrent flow encoder
//!    and the two classification heads.
//! 6. [`objectives`] implements the supervised contrastive loss, the graph and
//!    flow augmentations and the classification losses.
//! 7. [`train`] wires everything into a multi-task training loop with
//!    evaluation and checkpointing.
//! 8. [`synth`] generates labelled synthetic traffic and runs ablation sweeps.

pub mod capture;
pub mod error;
pub mod graph;
pub mod model;
pub mod objectives;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod units;

pub use error::{Error, Result};
