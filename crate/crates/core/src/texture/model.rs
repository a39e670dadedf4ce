//! Blend-weight regressor: cross-view attention, a shared sparse CNN giving
//! one logit per view, softmax across views.
//!
//! `VBT1` checkpoint: magic, u32 attention channels, u32 key dim, f32 `wq`,
//! `wk`, `wv`, then the CNN as a `VBW1` blob.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::attention::{attention_backward, attention_forward, AttentionBlock, DEFAULT_KEY_DIM};
use super::{compute_psdf, loss_from_samples, site_samples, BlendWeightVolume, ViewImages};
use crate::error::{Error, Result};
use crate::featproj::{sample_view, ExtractorConfig};
use crate::geometry::{CameraView, ImageBuffer, Vec3};
use crate::pipeline::{feature_maps, make_extractor, TrainOptions};
use crate::sparsecnn::{
    adam_step, backward, checkpoint_bytes, forward, load_checkpoint_bytes, Activation, AdamState, ConvVariant,
    ForwardCache, GraphBuilder, NetworkGraph, Plan,
};
use crate::sparsevol::{ActiveSet, SparseField};

const MAGIC: &[u8; 4] = b"VBT1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureNetConfig {
    /// Texture feature channels per view; the PSDF adds one more.
    pub feature_channels: usize,
    pub key_dim: usize,
    pub channels: usize,
    pub conv_layers: usize,
}

impl Default for TextureNetConfig {
    fn default() -> Self {
        Self {
            feature_channels: 32,
            key_dim: DEFAULT_KEY_DIM,
            channels: 16,
            conv_layers: 2,
        }
    }
}

impl TextureNetConfig {
    /// Channels entering the attention block.
    pub fn view_channels(&self) -> usize {
        self.feature_channels + 1
    }

    /// Per-view CNN: input is the view's own features next to its
    /// attention output.
    fn logit_net(&self) -> NetworkGraph {
        let mut b = GraphBuilder::new(2 * self.view_channels());
        let mut x = b.input();
        for _ in 0..self.conv_layers {
            x = b.conv(x, ConvVariant::Submanifold, self.channels, Activation::Relu);
        }
        let out = b.linear(x, 1, Activation::Identity);
        b.finish(out)
    }
}

#[derive(Debug, Clone)]
pub struct TextureModel {
    pub config: TextureNetConfig,
    pub attention: AttentionBlock,
    pub net: NetworkGraph,
}

/// Per-view network inputs on the texture band: back-projected texture
/// features with the view's PSDF as the last channel.
#[derive(Debug, Clone)]
pub struct TextureInputs {
    pub band: Arc<ActiveSet>,
    pub features: Vec<SparseField>,
}

impl TextureInputs {
    /// From precomputed texture feature maps and depth renders of the mesh.
    pub fn new(
        band: Arc<ActiveSet>,
        cameras: &[CameraView],
        texture_maps: &[ImageBuffer],
        depths: &[ImageBuffer],
    ) -> Result<Self> {
        if texture_maps.len() != cameras.len() {
            return Err(Error::Config(format!(
                "{} cameras but {} texture feature maps",
                cameras.len(),
                texture_maps.len()
            )));
        }
        let psdf = compute_psdf(&band, cameras, depths)?;
        let features = cameras
            .iter()
            .zip(texture_maps)
            .enumerate()
            .map(|(v, (cam, map))| {
                let (f, _) = sample_view(&band, cam, map);
                SparseField::concat(&[&f, &psdf.view(v)])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { band, features })
    }

    /// Runs the texture extractor on the colour images first.
    pub fn from_images(
        band: Arc<ActiveSet>,
        cameras: &[CameraView],
        images: &[ImageBuffer],
        depths: &[ImageBuffer],
        extractor: &ExtractorConfig,
    ) -> Result<Self> {
        let maps = feature_maps(&make_extractor(extractor)?, images)?;
        Self::new(band, cameras, &maps, depths)
    }

    pub fn views(&self) -> usize {
        self.features.len()
    }
}

struct ModelPass {
    caches: Vec<ForwardCache>,
    attn_caches: Vec<super::attention::AttentionCache>,
    weights: BlendWeightVolume,
}

impl TextureModel {
    /// All-zero weights: uniform blending.
    pub fn zeros(config: TextureNetConfig) -> Self {
        Self {
            config,
            attention: AttentionBlock::zeros(config.view_channels(), config.key_dim),
            net: config.logit_net(),
        }
    }

    pub fn init(config: TextureNetConfig, seed: u64) -> Self {
        let mut net = config.logit_net();
        net.init_he_uniform(seed);
        Self {
            config,
            attention: AttentionBlock::init(config.view_channels(), config.key_dim, seed.wrapping_add(1)),
            net,
        }
    }

    pub fn param_count(&self) -> usize {
        self.attention.param_count() + self.net.param_count()
    }

    /// Attention parameters followed by CNN parameters.
    pub fn params(&self) -> Vec<f64> {
        [self.attention.params(), self.net.params().to_vec()].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (a, n) = p.split_at(self.attention.param_count());
        self.attention.set_params(a);
        self.net.params_mut().copy_from_slice(n);
    }

    fn check(&self, inputs: &TextureInputs) -> Result<()> {
        if inputs.features.is_empty() {
            return Err(Error::Config("texture inputs have no views".into()));
        }
        if inputs.features.iter().any(|f| f.channels() != self.config.view_channels()) {
            return Err(Error::Config(format!(
                "texture model expects {} channels per view",
                self.config.view_channels()
            )));
        }
        Ok(())
    }

    fn pass(&self, inputs: &TextureInputs, plan: &Plan) -> Result<ModelPass> {
        self.check(inputs)?;
        let (mixed, attn_caches) = attention_forward(&inputs.features, &self.attention)?;
        let mut caches = Vec::with_capacity(inputs.views());
        let mut logits = Vec::with_capacity(inputs.views());
        for (x, m) in inputs.features.iter().zip(&mixed) {
            let cache = forward(&self.net, plan, &SparseField::concat(&[x, m])?)?;
            logits.push(cache.field(&self.net, plan, self.net.output_node()));
            caches.push(cache);
        }
        Ok(ModelPass {
            caches,
            attn_caches,
            weights: BlendWeightVolume::from_logits(&logits)?,
        })
    }

    /// Blend weights for the inputs' band.
    pub fn weights(&self, inputs: &TextureInputs) -> Result<BlendWeightVolume> {
        let plan = self.net.plan(inputs.band.clone())?;
        Ok(self.pass(inputs, &plan)?.weights)
    }

    /// Colour loss of the regressed weights against `gt` and its gradient
    /// with respect to [`params`](Self::params).
    pub fn loss_and_gradient(&self, inputs: &TextureInputs, views: &ViewImages, gt: &SparseField) -> Result<(f64, Vec<f64>)> {
        if views.len() != inputs.views() {
            return Err(Error::Config("input and image view counts differ".into()));
        }
        if gt.channels() != 3 || gt.active().as_ref() != inputs.band.as_ref() {
            return Err(Error::Config("ground-truth colours must be RGB on the input band".into()));
        }
        let plan = self.net.plan(inputs.band.clone())?;
        self.loss_and_grad(inputs, &plan, &site_samples(&inputs.band, views), gt)
    }

    pub(crate) fn loss_and_grad(
        &self,
        inputs: &TextureInputs,
        plan: &Plan,
        samples: &[Vec<Option<Vec3>>],
        gt: &SparseField,
    ) -> Result<(f64, Vec<f64>)> {
        let pass = self.pass(inputs, plan)?;
        let w = pass.weights.field();
        let (loss, dw) = loss_from_samples(w, samples, gt);
        let nv = inputs.views();
        let n = w.len();
        // softmax backward
        let mut dz = vec![vec![0.0; n]; nv];
        for s in 0..n {
            let row = w.row(s);
            let g = &dw[s * nv..(s + 1) * nv];
            let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
            for v in 0..nv {
                dz[v][s] = row[v] * (g[v] - dot);
            }
        }
        let c = self.config.view_channels();
        let mut dnet = vec![0.0; self.net.param_count()];
        let mut dmixed = Vec::with_capacity(nv);
        for (cache, seed) in pass.caches.iter().zip(dz) {
            let (dp, dx) = backward(&self.net, plan, cache, vec![(self.net.output_node(), seed)])?;
            dnet.iter_mut().zip(dp).for_each(|(a, b)| *a += b);
            let mut dm = Vec::with_capacity(n * c);
            for s in 0..n {
                dm.extend_from_slice(&dx[s * 2 * c + c..(s + 1) * 2 * c]);
            }
            dmixed.push(dm);
        }
        let dattn = attention_backward(&inputs.features, &self.attention, &pass.attn_caches, &dmixed);
        Ok((loss, [dattn, dnet].concat()))
    }
}

/// Per-view weights on `band` from colour images and depth renders of the
/// reconstructed mesh.
pub fn regress_blend_weights(
    band: Arc<ActiveSet>,
    cameras: &[CameraView],
    images: &[ImageBuffer],
    depths: &[ImageBuffer],
    model: &TextureModel,
    extractor: &ExtractorConfig,
) -> Result<BlendWeightVolume> {
    let inputs = TextureInputs::from_images(band, cameras, images, depths, extractor)?;
    model.weights(&inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureTrainReport {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub sites: usize,
    /// Loss of uniform weights.
    pub uniform_loss: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Fits a texture model to ground-truth colours on the inputs' band.
pub fn train_texture(
    inputs: &TextureInputs,
    views: &ViewImages,
    gt: &SparseField,
    config: &TextureNetConfig,
    opts: &TrainOptions,
) -> Result<(TextureModel, TextureTrainReport)> {
    if gt.channels() != 3 || gt.active().as_ref() != inputs.band.as_ref() {
        return Err(Error::Config("ground-truth colours must be RGB on the texture band".into()));
    }
    if views.len() != inputs.views() {
        return Err(Error::Config("image and feature view counts differ".into()));
    }
    let mut model = TextureModel::init(*config, opts.seed);
    let plan = model.net.plan(inputs.band.clone())?;
    let samples = site_samples(&inputs.band, views);
    let uniform = BlendWeightVolume::uniform(inputs.band.clone(), inputs.views());
    let uniform_loss = loss_from_samples(uniform.field(), &samples, gt).0;
    let mut params = model.params();
    let mut state = AdamState::new(params.len());
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let (loss, grads) = model.loss_and_grad(inputs, &plan, &samples, gt)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("texture loss diverged at step {step}")));
        }
        losses.push(loss);
        adam_step(&mut params, &grads, &mut state, opts.lr)?;
        model.set_params(&params);
        if step % 100 == 0 {
            log::info!("texture step {step}: loss {loss:.4} (uniform {uniform_loss:.4})");
        }
    }
    let (final_loss, _) = model.loss_and_grad(inputs, &plan, &samples, gt)?;
    let report = TextureTrainReport {
        steps: opts.steps,
        lr: opts.lr,
        seed: opts.seed,
        sites: inputs.band.len(),
        uniform_loss,
        initial_loss: losses.first().copied().unwrap_or(final_loss),
        final_loss,
        losses,
    };
    Ok((model, report))
}

pub fn texture_checkpoint_bytes(model: &TextureModel) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&(model.attention.channels as u32).to_le_bytes());
    out.extend_from_slice(&(model.attention.key_dim as u32).to_le_bytes());
    for v in model.attention.params() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&checkpoint_bytes(&model.net));
    out
}

/// Loads a `VBT1` blob into a model of architecture `config`.
pub fn load_texture_checkpoint_bytes(config: TextureNetConfig, bytes: &[u8]) -> Result<TextureModel> {
    let bad = |m: &str| Error::Format(format!("texture checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing VBT1 magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (channels, key_dim) = (word(4), word(8));
    if channels != config.view_channels() || key_dim != config.key_dim {
        return Err(Error::Config(format!(
            "checkpoint attention is {channels}x{key_dim}, configuration expects {}x{}",
            config.view_channels(),
            config.key_dim
        )));
    }
    let mut model = TextureModel::zeros(config);
    let n = model.attention.param_count();
    let raw = bytes.get(12..12 + 4 * n).ok_or_else(|| bad("truncated attention weights"))?;
    let p: Vec<f64> = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("texture checkpoint holds non-finite weights".into()));
    }
    model.attention.set_params(&p);
    load_checkpoint_bytes(&mut model.net, &bytes[12 + 4 * n..])?;
    Ok(model)
}

pub fn save_texture_checkpoint(model: &TextureModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, texture_checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_texture_checkpoint(config: TextureNetConfig, path: impl AsRef<Path>) -> Result<TextureModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_texture_checkpoint_bytes(config, &bytes)
}
