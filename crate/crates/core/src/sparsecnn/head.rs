use rayon::prelude::*;

use super::graph::{Activation, LayerSpec, NetworkGraph, Node};
use crate::error::{Error, Result};
use crate::sparsevol::{ActiveSet, SparseField};
use crate::tsdf::TsdfVolume;

/// The single FC layer mapping per-site features to a raw TSDF value.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl DecodeHead {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Self { weights, bias }
    }

    pub fn width(&self) -> usize {
        self.weights.len()
    }

    /// Reads the head from a graph whose output node is a `Linear(C -> 1)`
    /// without activation.
    pub fn from_graph(graph: &NetworkGraph) -> Result<Self> {
        let Node::Layer { layer, .. } = graph.nodes()[graph.output_node()] else {
            return Err(Error::Config("graph output is not a layer".into()));
        };
        let l = &graph.layers()[layer];
        match l.spec {
            LayerSpec::Linear {
                cout: 1,
                activation: Activation::Identity,
                ..
            } => Ok(Self {
                weights: graph.params()[l.weights.clone()].to_vec(),
                bias: graph.params()[l.bias.start],
            }),
            _ => Err(Error::Config("graph output is not a linear decode head".into())),
        }
    }

    /// `w . feat + b` at every site.
    pub fn apply(&self, feature: &SparseField) -> Result<SparseField> {
        if feature.channels() != self.width() {
            return Err(Error::Config(format!(
                "head width {} does not match {} feature channels",
                self.width(),
                feature.channels()
            )));
        }
        let c = self.width();
        let raw = feature
            .values()
            .par_chunks(c)
            .map(|row| self.bias + row.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        SparseField::new(feature.active().clone(), 1, raw, 0.0)
    }
}

/// Adds the stage bias to raw head outputs and clamps into the truncation
/// band. Sites outside the active set read as `+truncation`.
pub fn decode_raw(raw: &SparseField, bias_stage: f64, truncation: f64) -> Result<TsdfVolume> {
    if raw.channels() != 1 {
        return Err(Error::Config("raw TSDF output must have one channel".into()));
    }
    let values = raw.values().iter().map(|v| v + bias_stage).collect();
    TsdfVolume::from_clamped(SparseField::new(raw.active().clone(), 1, values, truncation)?, truncation)
}

pub fn decode_tsdf(feature: &SparseField, head: &DecodeHead, bias_stage: f64, truncation: f64) -> Result<TsdfVolume> {
    decode_raw(&head.apply(feature)?, bias_stage, truncation)
}

fn region_ranks(region: &ActiveSet, set: &ActiveSet, what: &str) -> Result<Vec<usize>> {
    if !region.spec().same_cube(set.spec()) || region.spec().resolution != set.spec().resolution {
        return Err(Error::Config(format!("loss region and {what} live on different grids")));
    }
    region
        .sites()
        .iter()
        .map(|&s| {
            set.rank(s)
                .map(|r| r as usize)
                .ok_or_else(|| Error::Config(format!("loss region is not covered by the {what}")))
        })
        .collect()
}

/// `sum |raw + bias - gt|` over `region`, in region order.
pub fn stage_loss(raw: &SparseField, gt: &TsdfVolume, region: &ActiveSet, bias_stage: f64) -> Result<f64> {
    Ok(stage_loss_grad(raw, gt, region, bias_stage)?.0)
}

/// The loss and its subgradient with respect to every raw value (zero at
/// exact fits and off the region).
pub fn stage_loss_grad(
    raw: &SparseField,
    gt: &TsdfVolume,
    region: &ActiveSet,
    bias_stage: f64,
) -> Result<(f64, Vec<f64>)> {
    if raw.channels() != 1 {
        return Err(Error::Config("raw TSDF output must have one channel".into()));
    }
    let rp = region_ranks(region, raw.active(), "prediction")?;
    let rg = region_ranks(region, gt.active(), "ground truth")?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; raw.len()];
    for (&p, &g) in rp.iter().zip(&rg) {
        let d = raw.values()[p] + bias_stage - gt.values()[g];
        loss += d.abs();
        grad[p] += if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    Ok((loss, grad))
}
