//! Submanifold sparse 3D convolutions: rulebooks, layer graphs with skip
//! concatenations, the FC decode head, L1 stage losses, reverse-mode
//! gradients and Adam.

mod arch;
mod checkpoint;
pub mod dense;
mod graph;
mod head;
mod optim;
mod rulebook;


pub use arch::{coarse_unet, fine_net, CoarseNetConfig, FineNetConfig, EXPORT_TAP, FEATURES_TAP};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, load_checkpoint_bytes, save_checkpoint};
pub use graph::{
    backward, conv_forward, forward, Activation, ConvLayerSpec, ForwardCache, GraphBuilder, LayerParams, LayerSpec,
    NetworkGraph, Node, NodeId, Plan,
};
pub use head::{decode_raw, decode_tsdf, stage_loss, stage_loss_grad, DecodeHead};
pub use optim::{adam_step, AdamState, BETA1, BETA2, DEFAULT_LEARNING_RATE, EPSILON};
pub use rulebook::{offset, ConvVariant, Rulebook, CENTER_OFFSET, KERNEL_VOLUME};
