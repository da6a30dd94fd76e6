use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::graph::FlowGraphs;
use crate::train::{train, Metrics, TrainConfig};
use crate::units::SUPPORTED_WIDTHS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AblationAxis {
    /// Each supported unit width on its own.
    Views,
    /// Every unordered pair of supported unit widths.
    Pairs,
    /// Heterogeneous versus tied edge types.
    Hetero,
    /// Packet-level contrastive weight.
    Alpha(Vec<f64>),
    /// Flow-level contrastive weight.
    Beta(Vec<f64>),
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Views => "views",
            AblationAxis::Pairs => "pairs",
            AblationAxis::Hetero => "hetero",
            AblationAxis::Alpha(_) => "alpha",
            AblationAxis::Beta(_) => "beta",
        }
    }

    /// `(label, config)` for every sweep point.
    pub fn points(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationAxis::Views => SUPPORTED_WIDTHS
                .iter()
                .map(|&n| (format!("{n}"), with(&|c| c.views = vec![n])))
                .collect(),
            AblationAxis::Pairs => {
                let mut out = Vec::new();
                for (i, &a) in SUPPORTED_WIDTHS.iter().enumerate() {
                    for &b in &SUPPORTED_WIDTHS[i + 1..] {
                        out.push((format!("{a}+{b}"), with(&|c| c.views = vec![a, b])));
                    }
                }
                out
            }
            AblationAxis::Hetero => [true, false]
                .iter()
                .map(|&h| {
                    let label = if h { "heterogeneous" } else { "homogeneous" };
                    (label.to_string(), with(&|c| c.heterogeneous = h))
                })
                .collect(),
            AblationAxis::Alpha(values) => values
                .iter()
                .map(|&a| (format!("{a}"), with(&|c| c.alpha = a)))
                .collect(),
            AblationAxis::Beta(values) => values
                .iter()
                .map(|&b| (format!("{b}"), with(&|c| c.beta = b)))
                .collect(),
        }
    }

    /// Unit widths the sweep needs graphs for.
    pub fn views_needed(&self, base: &TrainConfig) -> BTreeSet<u32> {
        self.points(base)
            .iter()
            .flat_map(|(_, c)| c.views.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub point: String,
    /// Metrics of the best checkpoint on the held-out flows.
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "axis,point,flow_accuracy,flow_macro_f1,packet_accuracy,packet_macro_f1,best_epoch,wall_clock_secs\n",
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{:.3}",
                r.axis,
                r.point,
                m.flow_accuracy,
                m.flow_macro_f1,
                m.packet_accuracy,
                m.packet_macro_f1,
                r.best_epoch,
                r.wall_clock_secs
            );
        }
        out
    }
}

/// Trains and evaluates one model per sweep point on the same split and
/// seed. `train_set` and `heldout` must carry graphs for every width in
/// [`AblationAxis::views_needed`].
pub fn ablation_sweep(
    base: &TrainConfig,
    axis: &AblationAxis,
    train_set: &[FlowGraphs],
    heldout: &[FlowGraphs],
    num_classes: usize,
    mut on_row: impl FnMut(&AblationRow),
) -> crate::Result<AblationTable> {
    let mut rows = Vec::new();
    for (point, cfg) in axis.points(base) {
        log::info!("ablation {} = {point}", axis.name());
        let out = train(train_set, heldout, num_classes, &cfg, |_| {})?;
        let best = &out.report.epochs[out.report.best_epoch];
        let metrics = best
            .heldout
            .clone()
            .ok_or_else(|| crate::error::TrainError::Data("ablation needs held-out flows".into()))?;
        let row = AblationRow {
            axis: axis.name().to_string(),
            point,
            metrics,
            best_epoch: out.report.best_epoch,
            wall_clock_secs: out.report.wall_clock_secs,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(AblationTable { rows })
}
