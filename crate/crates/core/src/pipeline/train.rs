use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{coarse_from_features, carve, feature_maps, fine_band, fine_input, make_extractor, PipelineConfig};
use crate::error::{Error, Result};
use crate::featproj::build_feature_volume;
use crate::geometry::TriangleMesh;
use crate::io::Capture;
use crate::sparsecnn::{
    adam_step, backward, coarse_unet, fine_net, forward, stage_loss_grad, AdamState, NetworkGraph, Plan,
    DEFAULT_LEARNING_RATE,
};
use crate::sparsevol::{ActiveSet, SparseField};
use crate::tsdf::{mesh_to_tsdf, TsdfVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Coarse,
    Fine,
}

/// Supervision: a watertight mesh or a precomputed TSDF field.
#[derive(Debug, Clone)]
pub enum GroundTruth {
    Mesh(TriangleMesh),
    Field(SparseField),
}

impl GroundTruth {
    /// Ground-truth TSDF at every site of `active`.
    pub fn on(&self, active: Arc<ActiveSet>, truncation: f64) -> Result<TsdfVolume> {
        match self {
            GroundTruth::Mesh(m) => mesh_to_tsdf(m, active, truncation),
            GroundTruth::Field(f) => {
                let spec = f.active().spec();
                if !spec.same_cube(active.spec()) || spec.resolution != active.spec().resolution {
                    return Err(Error::Config(format!(
                        "ground-truth field is at resolution {}, training needs {}",
                        spec.resolution,
                        active.spec().resolution
                    )));
                }
                let mut missing = 0;
                let values = active
                    .sites()
                    .iter()
                    .map(|&s| match f.active().rank(s) {
                        Some(r) => f.values()[r as usize].clamp(-truncation, truncation),
                        None => {
                            missing += 1;
                            truncation
                        }
                    })
                    .collect();
                if missing > 0 {
                    return Err(Error::Coverage {
                        skipped: missing,
                        total: active.len(),
                    });
                }
                TsdfVolume::new(SparseField::new(active, 1, values, truncation)?, truncation)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: DEFAULT_LEARNING_RATE,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: TrainStage,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub sites: usize,
    /// Loss of an all-zero network.
    pub zero_network_loss: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before every step.
    pub losses: Vec<f64>,
}

fn loss_and_grads(
    net: &NetworkGraph,
    plan: &Plan,
    input: &SparseField,
    gt: &TsdfVolume,
    bias: f64,
) -> Result<(f64, Vec<f64>)> {
    let cache = forward(net, plan, input)?;
    let raw = cache.field(net, plan, net.output_node());
    let (loss, seed) = stage_loss_grad(&raw, gt, plan.input(), bias)?;
    let (grads, _) = backward(net, plan, &cache, vec![(net.output_node(), seed)])?;
    Ok((loss, grads))
}

/// Desk-scale training of one stage with Adam. The fine stage needs the
/// trained coarse network.
pub fn train_stage(
    stage: TrainStage,
    capture: &Capture,
    gt: &GroundTruth,
    cfg: &PipelineConfig,
    coarse: Option<&NetworkGraph>,
    opts: &TrainOptions,
) -> Result<(NetworkGraph, TrainReport)> {
    cfg.validate()?;
    let (mut net, input, bias) = match stage {
        TrainStage::Coarse => {
            let hull = carve(cfg, &capture.cameras, &capture.masks)?;
            let maps = feature_maps(&make_extractor(&cfg.shape_extractor)?, &capture.colors)?;
            let input = build_feature_volume(&hull, &capture.cameras, &maps)?.field;
            (coarse_unet(&cfg.coarse_net), input, cfg.bias_c)
        }
        TrainStage::Fine => {
            let coarse = coarse.ok_or_else(|| Error::Config("fine training needs a coarse checkpoint".into()))?;
            let normals = capture
                .normals
                .as_deref()
                .ok_or_else(|| Error::Config("fine training needs normal maps".into()))?;
            let hull = carve(cfg, &capture.cameras, &capture.masks)?;
            let maps = feature_maps(&make_extractor(&cfg.shape_extractor)?, &capture.colors)?;
            let features = build_feature_volume(&hull, &capture.cameras, &maps)?.field;
            let out = coarse_from_features(cfg, coarse, &features)?;
            let (_, band) = fine_band(cfg, &out.tsdf)?;
            if band.is_empty() {
                return Err(Error::EmptyMesh("coarse TSDF has an empty fine band".into()));
            }
            let nmaps = feature_maps(&make_extractor(&cfg.normal_extractor)?, normals)?;
            let input = fine_input(&band, &out.export, &nmaps, &capture.cameras)?;
            (fine_net(&cfg.fine_net), input, cfg.bias_f)
        }
    };
    let region = input.active().clone();
    let gt = gt.on(region.clone(), cfg.truncation)?;
    net.init_he_uniform(opts.seed);
    let plan = net.plan(region.clone())?;
    let zero_network_loss = gt.values().iter().map(|g| (bias - g).abs()).sum();
    let mut state = AdamState::new(net.param_count());
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (loss, grads) = loss_and_grads(&net, &plan, &input, &gt, bias)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at step {step}")));
        }
        losses.push(loss);
        adam_step(net.params_mut(), &grads, &mut state, opts.lr)?;
        if step % 100 == 0 {
            log::info!("step {step}: loss {loss:.3} ({:.2}% of zero network)", 100.0 * loss / zero_network_loss);
        }
    }
    let (final_loss, _) = loss_and_grads(&net, &plan, &input, &gt, bias)?;
    let report = TrainReport {
        stage,
        steps: opts.steps,
        lr: opts.lr,
        seed: opts.seed,
        sites: region.len(),
        zero_network_loss,
        initial_loss: losses.first().copied().unwrap_or(final_loss),
        final_loss,
        losses,
    };
    Ok((net, report))
}
