use serde::{Deserialize, Serialize};

use super::graph::{Activation, ConvLayerSpec, GraphBuilder, NetworkGraph, NodeId};
use super::rulebook::ConvVariant;

/// Tap name of the pre-head feature field.
pub const FEATURES_TAP: &str = "features";
/// Tap name of the coarse network's export projection.
pub const EXPORT_TAP: &str = "export";

/// Coarse U-Net: three encoder levels (`channels[0..3]`), two transposed
/// upsamplings with skip concatenations, a final block, an FC head and a
/// linear export of the last two decoder outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseNetConfig {
    pub input_channels: usize,
    pub channels: [usize; 3],
    pub export_channels: usize,
    pub affine: bool,
}

impl Default for CoarseNetConfig {
    fn default() -> Self {
        Self {
            input_channels: 128,
            channels: [64, 96, 128],
            export_channels: 32,
            affine: false,
        }
    }
}

/// Fine network: three submanifold blocks, the last two also reading the
/// coarse export, then an FC head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineNetConfig {
    pub feature_channels: usize,
    pub export_channels: usize,
    pub channels: usize,
    pub affine: bool,
}

impl Default for FineNetConfig {
    fn default() -> Self {
        Self {
            feature_channels: 128,
            export_channels: 32,
            channels: 64,
            affine: false,
        }
    }
}

fn block(b: &mut GraphBuilder, input: NodeId, variant: ConvVariant, cout: usize, affine: bool, pair: Option<NodeId>) -> NodeId {
    let spec = ConvLayerSpec {
        variant,
        cin: b.channels(input),
        cout,
        activation: Activation::Relu,
        affine,
    };
    b.conv_spec(input, spec, pair)
}

pub fn coarse_unet(cfg: &CoarseNetConfig) -> NetworkGraph {
    let [c0, c1, c2] = cfg.channels;
    let a = cfg.affine;
    let mut b = GraphBuilder::new(cfg.input_channels);
    let x = b.input();
    let e0 = block(&mut b, x, ConvVariant::Submanifold, c0, a, None);
    let s1 = block(&mut b, e0, ConvVariant::Strided, c1, a, None);
    let e1 = block(&mut b, s1, ConvVariant::Submanifold, c1, a, None);
    let s2 = block(&mut b, e1, ConvVariant::Strided, c2, a, None);
    let e2 = block(&mut b, s2, ConvVariant::Submanifold, c2, a, None);
    let t1 = block(&mut b, e2, ConvVariant::Transposed, c1, a, Some(s2));
    let k1 = b.concat(&[t1, e1]);
    let d1 = block(&mut b, k1, ConvVariant::Submanifold, c1, a, None);
    let t0 = block(&mut b, d1, ConvVariant::Transposed, c0, a, Some(s1));
    let k0 = b.concat(&[t0, e0]);
    let d0 = block(&mut b, k0, ConvVariant::Submanifold, c0, a, None);
    let f = block(&mut b, d0, ConvVariant::Submanifold, c0, a, None);
    let last_two = b.concat(&[d0, f]);
    let export = b.linear(last_two, cfg.export_channels, Activation::Identity);
    let head = b.linear(f, 1, Activation::Identity);
    b.tap(FEATURES_TAP, f);
    b.tap(EXPORT_TAP, export);
    b.finish(head)
}

/// Input channels are `feature_channels` normal features followed by
/// `export_channels` coarse export channels.
pub fn fine_net(cfg: &FineNetConfig) -> NetworkGraph {
    let c = cfg.channels;
    let mut b = GraphBuilder::new(cfg.feature_channels + cfg.export_channels);
    let x = b.input();
    let coarse = b.slice(x, cfg.feature_channels, cfg.export_channels);
    let h1 = block(&mut b, x, ConvVariant::Submanifold, c, cfg.affine, None);
    let k2 = b.concat(&[h1, coarse]);
    let h2 = block(&mut b, k2, ConvVariant::Submanifold, c, cfg.affine, None);
    let k3 = b.concat(&[h2, coarse]);
    let h3 = block(&mut b, k3, ConvVariant::Submanifold, c, cfg.affine, None);
    let head = b.linear(h3, 1, Activation::Identity);
    b.tap(FEATURES_TAP, h3);
    b.finish(head)
}
