use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{handcrafted_features, HandcraftedOptions};
use crate::error::{Error, Result};
use crate::geometry::ImageBuffer;

/// One stage of a replayable 2D network.
#[derive(Debug, Clone, PartialEq)]
pub enum Conv2dLayer {
    /// 3x3 convolution with zero padding. `weights` is laid out
    /// `[out][in][ky][kx]`.
    Conv {
        cin: usize,
        cout: usize,
        relu: bool,
        weights: Vec<f32>,
        bias: Vec<f32>,
    },
    /// 2x2 average pooling.
    Downsample,
    /// Nearest-neighbour 2x upsampling.
    Upsample,
}

/// A small 2D network replayed from exported weights. The input image is
/// first resampled to `input_size` squared.
///
/// Blob format (`VBX1`, little-endian): magic, `input_size` u32, layer count
/// u32, then per layer a u32 tag (0 conv, 1 downsample, 2 upsample); conv
/// layers continue with `cin` u32, `cout` u32, `relu` u32 (0/1), `9*cin*cout`
/// f32 weights and `cout` f32 biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dNet {
    pub input_size: u32,
    pub layers: Vec<Conv2dLayer>,
}

const MAGIC: &[u8; 4] = b"VBX1";

impl Conv2dNet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        let u = |v: u32, out: &mut Vec<u8>| out.extend_from_slice(&v.to_le_bytes());
        u(self.input_size, &mut out);
        u(self.layers.len() as u32, &mut out);
        for l in &self.layers {
            match l {
                Conv2dLayer::Conv {
                    cin,
                    cout,
                    relu,
                    weights,
                    bias,
                } => {
                    u(0, &mut out);
                    u(*cin as u32, &mut out);
                    u(*cout as u32, &mut out);
                    u(*relu as u32, &mut out);
                    for v in weights.iter().chain(bias) {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Conv2dLayer::Downsample => u(1, &mut out),
                Conv2dLayer::Upsample => u(2, &mut out),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("extractor blob: {m}"));
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing VBX1 magic"));
        }
        let mut pos = 4;
        let u32_next = |pos: &mut usize| -> Result<u32> {
            let b = bytes.get(*pos..*pos + 4).ok_or_else(|| bad("truncated"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(b.try_into().unwrap()))
        };
        let input_size = u32_next(&mut pos)?;
        let n = u32_next(&mut pos)?;
        let mut layers = Vec::new();
        let mut channels: Option<usize> = None;
        for _ in 0..n {
            match u32_next(&mut pos)? {
                0 => {
                    let cin = u32_next(&mut pos)? as usize;
                    let cout = u32_next(&mut pos)? as usize;
                    let relu = u32_next(&mut pos)? != 0;
                    if cin == 0 || cout == 0 {
                        return Err(bad("zero channel count"));
                    }
                    if channels.is_some_and(|c| c != cin) {
                        return Err(bad("channel counts do not chain"));
                    }
                    channels = Some(cout);
                    let count = 9 * cin * cout + cout;
                    let raw = bytes.get(pos..pos + 4 * count).ok_or_else(|| bad("truncated weights"))?;
                    pos += 4 * count;
                    let vals: Vec<f32> = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    layers.push(Conv2dLayer::Conv {
                        cin,
                        cout,
                        relu,
                        weights: vals[..9 * cin * cout].to_vec(),
                        bias: vals[9 * cin * cout..].to_vec(),
                    });
                }
                1 => layers.push(Conv2dLayer::Downsample),
                2 => layers.push(Conv2dLayer::Upsample),
                t => return Err(bad(&format!("unknown layer tag {t}"))),
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { input_size, layers })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn output_channels(&self) -> Option<usize> {
        self.layers.iter().rev().find_map(|l| match l {
            Conv2dLayer::Conv { cout, .. } => Some(*cout),
            _ => None,
        })
    }

    pub fn forward(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        let mut x = image.resample(self.input_size, self.input_size);
        for layer in &self.layers {
            x = match layer {
                Conv2dLayer::Conv {
                    cin,
                    cout,
                    relu,
                    weights,
                    bias,
                } => {
                    if x.channels() as usize != *cin {
                        return Err(Error::Config(format!(
                            "conv expects {cin} channels, got {}",
                            x.channels()
                        )));
                    }
                    conv3x3(&x, *cin, *cout, *relu, weights, bias)
                }
                Conv2dLayer::Downsample => {
                    let (w, h) = ((x.width() / 2).max(1), (x.height() / 2).max(1));
                    ImageBuffer::from_fn(w, h, x.channels(), |i, j, c| {
                        let g = |dx: u32, dy: u32| x.get((2 * i + dx).min(x.width() - 1), (2 * j + dy).min(x.height() - 1), c);
                        (g(0, 0) + g(1, 0) + g(0, 1) + g(1, 1)) / 4.0
                    })
                }
                Conv2dLayer::Upsample => ImageBuffer::from_fn(x.width() * 2, x.height() * 2, x.channels(), |i, j, c| x.get(i / 2, j / 2, c)),
            };
        }
        Ok(x)
    }
}

fn conv3x3(x: &ImageBuffer, cin: usize, cout: usize, relu: bool, weights: &[f32], bias: &[f32]) -> ImageBuffer {
    let (w, h) = (x.width() as i64, x.height() as i64);
    let mut out = vec![0.0; (w * h) as usize * cout];
    out.par_chunks_mut(cout).enumerate().for_each(|(i, row)| {
        let (px, py) = (i as i64 % w, i as i64 / w);
        for (o, r) in row.iter_mut().enumerate() {
            let mut acc = bias[o] as f64;
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let (sx, sy) = (px + kx - 1, py + ky - 1);
                    if sx < 0 || sy < 0 || sx >= w || sy >= h {
                        continue;
                    }
                    let texel = x.texel(sx as u32, sy as u32);
                    for (c, t) in texel.iter().enumerate().take(cin) {
                        acc += weights[((o * cin + c) * 3 + ky as usize) * 3 + kx as usize] as f64 * t;
                    }
                }
            }
            *r = if relu { acc.max(0.0) } else { acc };
        }
    });
    ImageBuffer::new(w as u32, h as u32, cout as u32, out).expect("shape is consistent")
}

/// Source of per-view 2D feature maps.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureExtractor {
    Handcrafted(HandcraftedOptions),
    Loaded(Conv2dNet),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ExtractorConfig {
    Handcrafted { channels: usize, size: u32 },
    Loaded { weights: String },
}

impl FeatureExtractor {
    pub fn extract(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        match self {
            FeatureExtractor::Handcrafted(o) => handcrafted_features(image, o.channels, o.size),
            FeatureExtractor::Loaded(net) => net.forward(image),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            FeatureExtractor::Handcrafted(o) => o.channels,
            FeatureExtractor::Loaded(net) => net.output_channels().unwrap_or(3),
        }
    }
}
