use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sparsevol::SparseField;

pub const DEFAULT_KEY_DIM: usize = 16;

/// Single-head scaled dot-product attention across the view axis of each
/// site. `wq`, `wk` are `[channels][key_dim]`, `wv` is `[channels][channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub channels: usize,
    pub key_dim: usize,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
}

/// Per-site intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    a: Vec<f64>,
}

const SITE_BLOCK: usize = 1024;

fn matmul(x: &[f64], rows: usize, inner: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for i in 0..inner {
            let xv = x[r * inner + i];
            for c in 0..cols {
                out[r * cols + c] += xv * w[i * cols + c];
            }
        }
    }
    out
}

impl AttentionBlock {
    pub fn zeros(channels: usize, key_dim: usize) -> Self {
        Self {
            channels,
            key_dim,
            wq: vec![0.0; channels * key_dim],
            wk: vec![0.0; channels * key_dim],
            wv: vec![0.0; channels * channels],
        }
    }

    /// Value map set to the identity, query and key maps uniform in
    /// `±sqrt(6 / channels)`.
    pub fn init(channels: usize, key_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = (6.0 / channels as f64).sqrt();
        let mut block = Self::zeros(channels, key_dim);
        for w in block.wq.iter_mut().chain(block.wk.iter_mut()) {
            *w = rng.gen_range(-b..b);
        }
        for c in 0..channels {
            block.wv[c * channels + c] = 1.0;
        }
        block
    }

    pub fn param_count(&self) -> usize {
        self.wq.len() + self.wk.len() + self.wv.len()
    }

    pub fn params(&self) -> Vec<f64> {
        [&self.wq[..], &self.wk, &self.wv].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let (q, rest) = p.split_at(self.wq.len());
        let (k, v) = rest.split_at(self.wk.len());
        self.wq.copy_from_slice(q);
        self.wk.copy_from_slice(k);
        self.wv.copy_from_slice(v);
    }

    /// Attention on one site's `[views][channels]` matrix.
    pub fn attend(&self, x: &[f64], views: usize) -> (Vec<f64>, AttentionCache) {
        let (c, d) = (self.channels, self.key_dim);
        let q = matmul(x, views, c, &self.wq, d);
        let k = matmul(x, views, c, &self.wk, d);
        let v = matmul(x, views, c, &self.wv, c);
        let scale = 1.0 / (d as f64).sqrt();
        let mut a = vec![0.0; views * views];
        for i in 0..views {
            let row = &mut a[i * views..(i + 1) * views];
            for j in 0..views {
                row[j] = scale * (0..d).map(|t| q[i * d + t] * k[j * d + t]).sum::<f64>();
            }
            softmax_in_place(row);
        }
        let y = matmul(&a, views, views, &v, c);
        (y, AttentionCache { q, k, v, a })
    }

    /// Gradients `(d wq, d wk, d wv)` flattened, and `dx`, for one site.
    fn attend_backward(&self, x: &[f64], views: usize, cache: &AttentionCache, dy: &[f64], grads: &mut [f64]) {
        let (c, d) = (self.channels, self.key_dim);
        let AttentionCache { q, k, v, a } = cache;
        let scale = 1.0 / (d as f64).sqrt();
        // dA = dY V^T, dV = A^T dY
        let mut da = vec![0.0; views * views];
        let mut dv = vec![0.0; views * c];
        for i in 0..views {
            for j in 0..views {
                da[i * views + j] = (0..c).map(|t| dy[i * c + t] * v[j * c + t]).sum();
                for t in 0..c {
                    dv[j * c + t] += a[i * views + j] * dy[i * c + t];
                }
            }
        }
        // softmax rows
        let mut ds = vec![0.0; views * views];
        for i in 0..views {
            let dot: f64 = (0..views).map(|j| da[i * views + j] * a[i * views + j]).sum();
            for j in 0..views {
                ds[i * views + j] = a[i * views + j] * (da[i * views + j] - dot) * scale;
            }
        }
        let mut dq = vec![0.0; views * d];
        let mut dk = vec![0.0; views * d];
        for i in 0..views {
            for j in 0..views {
                let s = ds[i * views + j];
                for t in 0..d {
                    dq[i * d + t] += s * k[j * d + t];
                    dk[j * d + t] += s * q[i * d + t];
                }
            }
        }
        let (gq, rest) = grads.split_at_mut(c * d);
        let (gk, gv) = rest.split_at_mut(c * d);
        for r in 0..views {
            for ci in 0..c {
                let xv = x[r * c + ci];
                if xv == 0.0 {
                    continue;
                }
                for t in 0..d {
                    gq[ci * d + t] += xv * dq[r * d + t];
                    gk[ci * d + t] += xv * dk[r * d + t];
                }
                for t in 0..c {
                    gv[ci * c + t] += xv * dv[r * c + t];
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn check_views(views: &[SparseField], channels: usize) -> Result<()> {
    let first = views.first().ok_or_else(|| Error::Config("attention needs at least one view".into()))?;
    for f in views {
        if f.active().as_ref() != first.active().as_ref() {
            return Err(Error::Config("per-view fields live on different active sets".into()));
        }
        if f.channels() != channels {
            return Err(Error::Config(format!(
                "attention expects {channels} channels, a view has {}",
                f.channels()
            )));
        }
    }
    Ok(())
}

/// Gathers site `s` of every view into a `[views][channels]` matrix.
fn site_matrix(views: &[SparseField], s: usize) -> Vec<f64> {
    views.iter().flat_map(|f| f.row(s).iter().copied()).collect()
}

/// Per site, attention over the views; returns one field per view.
pub fn attention_reweight(views: &[SparseField], block: &AttentionBlock) -> Result<Vec<SparseField>> {
    Ok(attention_forward(views, block)?.0)
}

pub(crate) fn attention_forward(
    views: &[SparseField],
    block: &AttentionBlock,
) -> Result<(Vec<SparseField>, Vec<AttentionCache>)> {
    check_views(views, block.channels)?;
    let nv = views.len();
    let c = block.channels;
    let n = views[0].len();
    let per_site: Vec<(Vec<f64>, AttentionCache)> = (0..n)
        .into_par_iter()
        .map(|s| block.attend(&site_matrix(views, s), nv))
        .collect();
    let mut outs: Vec<Vec<f64>> = vec![Vec::with_capacity(n * c); nv];
    let mut caches = Vec::with_capacity(n);
    for (y, cache) in per_site {
        for (v, out) in outs.iter_mut().enumerate() {
            out.extend_from_slice(&y[v * c..(v + 1) * c]);
        }
        caches.push(cache);
    }
    let active = views[0].active().clone();
    let fields = outs
        .into_iter()
        .map(|vals| SparseField::new(active.clone(), c, vals, 0.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((fields, caches))
}

/// Parameter gradients (`wq`, `wk`, `wv` flattened) given per-view output
/// gradients; site sums are reduced in fixed block order.
pub(crate) fn attention_backward(
    views: &[SparseField],
    block: &AttentionBlock,
    caches: &[AttentionCache],
    dy: &[Vec<f64>],
) -> Vec<f64> {
    let nv = views.len();
    let c = block.channels;
    let n = views[0].len();
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(SITE_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut g = vec![0.0; block.param_count()];
            for s in b * SITE_BLOCK..((b + 1) * SITE_BLOCK).min(n) {
                let d: Vec<f64> = dy.iter().flat_map(|f| f[s * c..(s + 1) * c].iter().copied()).collect();
                if d.iter().all(|&v| v == 0.0) {
                    continue;
                }
                block.attend_backward(&site_matrix(views, s), nv, &caches[s], &d, &mut g);
            }
            g
        })
        .collect();
    let mut g = vec![0.0; block.param_count()];
    for p in partials {
        g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    g
}
