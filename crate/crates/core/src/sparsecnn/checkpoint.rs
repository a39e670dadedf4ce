//! `VBW1` weight container: magic, u32 layer count, then per layer u32 tag
//! (0 submanifold, 1 strided, 2 transposed, 3 linear), u32 `cin`, u32
//! `cout`, u32 flags (bit 0 ReLU, bit 1 affine), the weights as f32
//! `[taps][cin][cout]`, `cout` f32 biases, and for affine layers `cout`
//! scales then `cout` shifts. Little-endian throughout.

use std::path::Path;

use super::graph::{Activation, LayerSpec, NetworkGraph};
use super::rulebook::ConvVariant;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VBW1";

fn tag(spec: &LayerSpec) -> u32 {
    match spec {
        LayerSpec::Conv(c) => match c.variant {
            ConvVariant::Submanifold => 0,
            ConvVariant::Strided => 1,
            ConvVariant::Transposed => 2,
        },
        LayerSpec::Linear { .. } => 3,
    }
}

fn flags(spec: &LayerSpec) -> u32 {
    (spec.activation() == Activation::Relu) as u32 | (spec.affine() as u32) << 1
}

pub fn checkpoint_bytes(graph: &NetworkGraph) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    let u = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
    u(graph.layers().len() as u32, &mut out);
    let p = graph.params();
    for l in graph.layers() {
        u(tag(&l.spec), &mut out);
        u(l.spec.cin() as u32, &mut out);
        u(l.spec.cout() as u32, &mut out);
        u(flags(&l.spec), &mut out);
        let mut ranges = vec![l.weights.clone(), l.bias.clone()];
        if let Some((s, t)) = &l.affine {
            ranges.push(s.clone());
            ranges.push(t.clone());
        }
        for r in ranges {
            for v in &p[r] {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Loads weights into a graph of the same architecture.
pub fn load_checkpoint_bytes(graph: &mut NetworkGraph, bytes: &[u8]) -> Result<()> {
    let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing VBW1 magic".into()));
    }
    let mut pos = 4;
    let next = |pos: &mut usize| -> Result<u32> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated".into()))?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let n = next(&mut pos)? as usize;
    if n != graph.layers().len() {
        return Err(Error::Config(format!(
            "checkpoint has {n} layers, architecture has {}",
            graph.layers().len()
        )));
    }
    let layers = graph.layers().to_vec();
    let mut params = vec![0.0; graph.param_count()];
    for (i, l) in layers.iter().enumerate() {
        let header = [next(&mut pos)?, next(&mut pos)?, next(&mut pos)?, next(&mut pos)?];
        let want = [tag(&l.spec), l.spec.cin() as u32, l.spec.cout() as u32, flags(&l.spec)];
        if header != want {
            return Err(Error::Config(format!(
                "checkpoint layer {i} is {header:?} (tag, cin, cout, flags), architecture expects {want:?}"
            )));
        }
        let mut ranges = vec![l.weights.clone(), l.bias.clone()];
        if let Some((s, t)) = &l.affine {
            ranges.push(s.clone());
            ranges.push(t.clone());
        }
        for r in ranges {
            let raw = bytes
                .get(pos..pos + 4 * r.len())
                .ok_or_else(|| bad(format!("truncated weights in layer {i}")))?;
            pos += 4 * r.len();
            for (dst, c) in params[r].iter_mut().zip(raw.chunks(4)) {
                *dst = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
        }
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("checkpoint holds non-finite weights".into()));
    }
    graph.params_mut().copy_from_slice(&params);
    Ok(())
}

pub fn save_checkpoint(graph: &NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(graph)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(graph: &mut NetworkGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(graph, &bytes)
}
