use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use super::rulebook::{ConvVariant, Rulebook, KERNEL_VOLUME};
use crate::error::{Error, Result};
use crate::sparsevol::{ActiveSet, SparseField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// A 3x3x3 sparse convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub variant: ConvVariant,
    pub cin: usize,
    pub cout: usize,
    pub activation: Activation,
    /// Per-channel `scale * x + shift` before the activation.
    pub affine: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    /// Per-site fully connected map (a 1x1x1 convolution).
    Linear {
        cin: usize,
        cout: usize,
        activation: Activation,
    },
}

impl LayerSpec {
    pub fn cin(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.cin,
            LayerSpec::Linear { cin, .. } => *cin,
        }
    }

    pub fn cout(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.cout,
            LayerSpec::Linear { cout, .. } => *cout,
        }
    }

    pub fn taps(&self) -> usize {
        match self {
            LayerSpec::Conv(_) => KERNEL_VOLUME,
            LayerSpec::Linear { .. } => 1,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            LayerSpec::Conv(c) => c.activation,
            LayerSpec::Linear { activation, .. } => *activation,
        }
    }

    pub fn affine(&self) -> bool {
        matches!(self, LayerSpec::Conv(c) if c.affine)
    }

    pub fn weight_count(&self) -> usize {
        self.taps() * self.cin() * self.cout()
    }
}

/// Parameter ranges of one layer inside the flat parameter vector. Weights
/// are laid out `[tap][cin][cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub spec: LayerSpec,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
    pub affine: Option<(Range<usize>, Range<usize>)>,
}

pub type NodeId = usize;

/// Outputs per partial weight-gradient buffer.
const GRAD_BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Input,
    Layer {
        input: NodeId,
        layer: usize,
        /// Strided node whose rulebook a transposed layer inverts.
        pair: Option<NodeId>,
    },
    Concat(Vec<NodeId>),
    Slice {
        input: NodeId,
        start: usize,
        len: usize,
    },
}

/// A layered sparse CNN with skip concatenations. Nodes are stored in
/// topological order; node 0 is the input. Parameters live in one flat
/// vector whose generation counter invalidates stale forward caches.
#[derive(Debug, Clone)]
pub struct NetworkGraph {
    input_channels: usize,
    nodes: Vec<Node>,
    channels: Vec<usize>,
    layers: Vec<LayerParams>,
    params: Vec<f64>,
    generation: u64,
    output: NodeId,
    taps: Vec<(String, NodeId)>,
}

/// Incremental constructor for [`NetworkGraph`].
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    graph: NetworkGraph,
}

impl GraphBuilder {
    pub fn new(input_channels: usize) -> Self {
        Self {
            graph: NetworkGraph {
                input_channels,
                nodes: vec![Node::Input],
                channels: vec![input_channels],
                layers: Vec::new(),
                params: Vec::new(),
                generation: 0,
                output: 0,
                taps: Vec::new(),
            },
        }
    }

    pub fn input(&self) -> NodeId {
        0
    }

    pub fn channels(&self, node: NodeId) -> usize {
        self.graph.channels[node]
    }

    fn push_layer(&mut self, input: NodeId, spec: LayerSpec, pair: Option<NodeId>) -> NodeId {
        let g = &mut self.graph;
        let mut at = g.params.len();
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let weights = take(spec.weight_count());
        let bias = take(spec.cout());
        let affine = spec.affine().then(|| (take(spec.cout()), take(spec.cout())));
        g.params.resize(at, 0.0);
        if let Some((scale, _)) = &affine {
            g.params[scale.clone()].iter_mut().for_each(|v| *v = 1.0);
        }
        g.layers.push(LayerParams {
            spec,
            weights,
            bias,
            affine,
        });
        g.nodes.push(Node::Layer {
            input,
            layer: g.layers.len() - 1,
            pair,
        });
        g.channels.push(spec.cout());
        g.nodes.len() - 1
    }

    pub fn conv(&mut self, input: NodeId, variant: ConvVariant, cout: usize, activation: Activation) -> NodeId {
        assert!(variant != ConvVariant::Transposed, "use transposed()");
        let spec = ConvLayerSpec {
            variant,
            cin: self.channels(input),
            cout,
            activation,
            affine: false,
        };
        self.push_layer(input, LayerSpec::Conv(spec), None)
    }

    /// Upsamples `input` back onto the input set of the strided node `pair`.
    pub fn transposed(&mut self, input: NodeId, pair: NodeId, cout: usize, activation: Activation) -> NodeId {
        let spec = ConvLayerSpec {
            variant: ConvVariant::Transposed,
            cin: self.channels(input),
            cout,
            activation,
            affine: false,
        };
        self.push_layer(input, LayerSpec::Conv(spec), Some(pair))
    }

    pub fn conv_spec(&mut self, input: NodeId, spec: ConvLayerSpec, pair: Option<NodeId>) -> NodeId {
        assert_eq!(spec.cin, self.channels(input));
        self.push_layer(input, LayerSpec::Conv(spec), pair)
    }

    pub fn linear(&mut self, input: NodeId, cout: usize, activation: Activation) -> NodeId {
        let spec = LayerSpec::Linear {
            cin: self.channels(input),
            cout,
            activation,
        };
        self.push_layer(input, spec, None)
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> NodeId {
        let c = inputs.iter().map(|&i| self.channels(i)).sum();
        self.graph.nodes.push(Node::Concat(inputs.to_vec()));
        self.graph.channels.push(c);
        self.graph.nodes.len() - 1
    }

    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.channels(input));
        self.graph.nodes.push(Node::Slice { input, start, len });
        self.graph.channels.push(len);
        self.graph.nodes.len() - 1
    }

    /// Names a node so callers can read its output after a forward pass.
    pub fn tap(&mut self, name: &str, node: NodeId) {
        self.graph.taps.push((name.to_string(), node));
    }

    pub fn finish(mut self, output: NodeId) -> NetworkGraph {
        self.graph.output = output;
        self.graph
    }
}

impl NetworkGraph {
    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node_channels(&self, node: NodeId) -> usize {
        self.channels[node]
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn output_node(&self) -> NodeId {
        self.output
    }

    pub fn output_channels(&self) -> usize {
        self.channels[self.output]
    }

    pub fn tap(&self, name: &str) -> Option<NodeId> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; bumps the generation so older caches go stale.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Uniform He initialisation (`U(-b, b)`, `b = sqrt(6 / fan_in)`) of all
    /// weights; biases zero, affine scale one and shift zero.
    pub fn init_he_uniform(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = self.layers.clone();
        let params = self.params_mut();
        params.iter_mut().for_each(|p| *p = 0.0);
        for l in &layers {
            let fan_in = (l.spec.taps() * l.spec.cin()) as f64;
            let b = (6.0 / fan_in).sqrt();
            for w in &mut params[l.weights.clone()] {
                *w = rng.gen_range(-b..b);
            }
            if let Some((scale, _)) = &l.affine {
                params[scale.clone()].iter_mut().for_each(|v| *v = 1.0);
            }
        }
    }

    /// Builds every rulebook the graph needs for inputs on `input`.
    pub fn plan(&self, input: Arc<ActiveSet>) -> Result<Plan> {
        let mut actives: Vec<Arc<ActiveSet>> = Vec::with_capacity(self.nodes.len());
        let mut rulebooks: Vec<Option<Arc<Rulebook>>> = vec![None; self.nodes.len()];
        let mut subm: FxHashMap<*const ActiveSet, Arc<Rulebook>> = FxHashMap::default();
        for (n, node) in self.nodes.iter().enumerate() {
            let active = match node {
                Node::Input => input.clone(),
                Node::Layer { input, layer, pair } => {
                    let src = actives[*input].clone();
                    match self.layers[*layer].spec {
                        LayerSpec::Linear { .. } => src,
                        LayerSpec::Conv(c) => {
                            let rb = match c.variant {
                                ConvVariant::Submanifold => subm
                                    .entry(Arc::as_ptr(&src))
                                    .or_insert_with(|| Arc::new(Rulebook::submanifold(src.clone()).expect("non-empty")))
                                    .clone(),
                                ConvVariant::Strided => Arc::new(Rulebook::strided(src.clone())?),
                                ConvVariant::Transposed => {
                                    let pair = pair.ok_or_else(|| {
                                        Error::Config("transposed layer without a cached target set".into())
                                    })?;
                                    let down = rulebooks[pair].as_ref().ok_or_else(|| {
                                        Error::Config("transposed layer pairs with a non-strided node".into())
                                    })?;
                                    if !Arc::ptr_eq(down.output(), &src) {
                                        return Err(Error::Config(
                                            "transposed layer input is not at its paired strided level".into(),
                                        ));
                                    }
                                    Arc::new(Rulebook::transposed(down)?)
                                }
                            };
                            let out = rb.output().clone();
                            rulebooks[n] = Some(rb);
                            out
                        }
                    }
                }
                Node::Concat(inputs) => {
                    let first = actives[inputs[0]].clone();
                    if inputs.iter().any(|&i| !Arc::ptr_eq(&actives[i], &first)) {
                        return Err(Error::Config("skip concatenation across different levels".into()));
                    }
                    first
                }
                Node::Slice { input, .. } => actives[*input].clone(),
            };
            actives.push(active);
        }
        if input.is_empty() {
            return Err(Error::Config("network input has no active sites".into()));
        }
        Ok(Plan { actives, rulebooks })
    }
}

/// Rulebooks and per-node active sets for one input active set.
#[derive(Debug, Clone)]
pub struct Plan {
    actives: Vec<Arc<ActiveSet>>,
    rulebooks: Vec<Option<Arc<Rulebook>>>,
}

impl Plan {
    pub fn input(&self) -> &Arc<ActiveSet> {
        &self.actives[0]
    }

    pub fn active(&self, node: NodeId) -> &Arc<ActiveSet> {
        &self.actives[node]
    }

    pub fn rulebook(&self, node: NodeId) -> Option<&Arc<Rulebook>> {
        self.rulebooks[node].as_ref()
    }
}

/// Activations of one forward pass, valid for one parameter generation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    outputs: Vec<Vec<f64>>,
    /// Pre-affine convolution sums of affine layers.
    raw: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn node_values(&self, node: NodeId) -> &[f64] {
        &self.outputs[node]
    }
}

/// `dst += a * src`; `C > 0` fixes the length at compile time.
#[inline(always)]
fn axpy<const C: usize>(dst: &mut [f64], a: f64, src: &[f64]) {
    if C > 0 {
        let d: &mut [f64; C] = dst.try_into().unwrap();
        let s: &[f64; C] = src.try_into().unwrap();
        for c in 0..C {
            d[c] += a * s[c];
        }
    } else {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    }
}

/// Calls `$f::<C>` with `C = $n` for common channel counts, else `C = 0`.
macro_rules! dispatch {
    ($n:expr, $f:ident ( $($arg:expr),* )) => {
        match $n {
            1 => $f::<1>($($arg),*),
            2 => $f::<2>($($arg),*),
            4 => $f::<4>($($arg),*),
            6 => $f::<6>($($arg),*),
            8 => $f::<8>($($arg),*),
            12 => $f::<12>($($arg),*),
            16 => $f::<16>($($arg),*),
            24 => $f::<24>($($arg),*),
            32 => $f::<32>($($arg),*),
            _ => $f::<0>($($arg),*),
        }
    };
}

fn gather_impl<const C: usize>(
    rb: Option<&Rulebook>,
    n_out: usize,
    input: &[f64],
    cin: usize,
    cout: usize,
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; n_out * cout];
    out.par_chunks_mut(cout).enumerate().for_each(|(o, row)| {
        row.copy_from_slice(b);
        let mut accumulate = |k: usize, i: usize| {
            let x = &input[i * cin..(i + 1) * cin];
            let wk = &w[k * cin * cout..(k + 1) * cin * cout];
            for (ci, &xv) in x.iter().enumerate() {
                if xv != 0.0 {
                    axpy::<C>(row, xv, &wk[ci * cout..(ci + 1) * cout]);
                }
            }
        };
        match rb {
            Some(rb) => {
                for &(k, i) in rb.taps_of_output(o) {
                    accumulate(k as usize, i as usize);
                }
            }
            None => accumulate(0, o),
        }
    });
    out
}

/// `out[o] = b + sum_k W_k^T in[gather(k, o)]` in increasing tap order.
pub(crate) fn gather_forward(
    rb: Option<&Rulebook>,
    n_out: usize,
    input: &[f64],
    cin: usize,
    cout: usize,
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    dispatch!(cout, gather_impl(rb, n_out, input, cin, cout, w, b))
}

/// Weight gradient over fixed-size output blocks, reduced in block order.
fn weight_grad_impl<const C: usize>(
    rb: Option<&Rulebook>,
    taps: usize,
    x: &[f64],
    gz: &[f64],
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let n_out = gz.len() / cout;
    let wsize = taps * cin * cout;
    let partials: Vec<Vec<f64>> = (0..n_out.div_ceil(GRAD_BLOCK))
        .into_par_iter()
        .map(|blk| {
            let mut acc = vec![0.0; wsize];
            for o in blk * GRAD_BLOCK..((blk + 1) * GRAD_BLOCK).min(n_out) {
                let go = &gz[o * cout..(o + 1) * cout];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let mut madd = |k: usize, i: usize| {
                    let xi = &x[i * cin..(i + 1) * cin];
                    let ak = &mut acc[k * cin * cout..(k + 1) * cin * cout];
                    for (ci, &xv) in xi.iter().enumerate() {
                        if xv != 0.0 {
                            axpy::<C>(&mut ak[ci * cout..(ci + 1) * cout], xv, go);
                        }
                    }
                };
                match rb {
                    Some(rb) => {
                        for &(k, i) in rb.taps_of_output(o) {
                            madd(k as usize, i as usize);
                        }
                    }
                    None => madd(0, o),
                }
            }
            acc
        })
        .collect();
    let mut dw = vec![0.0; wsize];
    for part in partials {
        dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    dw
}

/// `dx[i] = sum over taps reading i of W_k dz[o]`; `wt` is `[taps][cout][cin]`.
fn input_grad_impl<const C: usize>(
    rb: Option<&Rulebook>,
    n_in: usize,
    wt: &[f64],
    gz: &[f64],
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let mut gx = vec![0.0; n_in * cin];
    gx.par_chunks_mut(cin).enumerate().for_each(|(i, row)| {
        let mut scatter = |k: usize, o: usize| {
            let go = &gz[o * cout..(o + 1) * cout];
            let wk = &wt[k * cin * cout..(k + 1) * cin * cout];
            for (co, &gv) in go.iter().enumerate() {
                if gv != 0.0 {
                    axpy::<C>(row, gv, &wk[co * cin..(co + 1) * cin]);
                }
            }
        };
        match rb {
            Some(rb) => {
                for &(k, o) in rb.taps_of_input(i) {
                    scatter(k as usize, o as usize);
                }
            }
            None => scatter(0, i),
        }
    });
    gx
}

/// One layer: gather, optional affine, activation. Returns the output and,
/// for affine layers, the pre-affine sums.
fn layer_forward(
    spec: &LayerSpec,
    rb: Option<&Rulebook>,
    n_out: usize,
    input: &[f64],
    w: &[f64],
    b: &[f64],
    affine: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let cout = spec.cout();
    let mut z = gather_forward(rb, n_out, input, spec.cin(), cout, w, b);
    let mut raw = None;
    if let Some((s, t)) = affine {
        let mut y = z.clone();
        for row in y.chunks_mut(cout) {
            for c in 0..cout {
                row[c] = row[c] * s[c] + t[c];
            }
        }
        raw = Some(std::mem::replace(&mut z, y));
    }
    if spec.activation() == Activation::Relu {
        z.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    (z, raw)
}

/// Applies one convolution to `field`. `weights` is `[27][cin][cout]`.
pub fn conv_forward(
    field: &SparseField,
    spec: &ConvLayerSpec,
    weights: &[f64],
    bias: &[f64],
    affine: Option<(&[f64], &[f64])>,
    rulebook: &Rulebook,
) -> Result<SparseField> {
    if spec.variant != rulebook.variant() {
        return Err(Error::Config("layer variant does not match the rulebook".into()));
    }
    if field.channels() != spec.cin {
        return Err(Error::Config(format!(
            "layer expects {} channels, field has {}",
            spec.cin,
            field.channels()
        )));
    }
    if field.active().as_ref() != rulebook.input().as_ref() {
        return Err(Error::Config("rulebook input set does not match the field".into()));
    }
    let layer = LayerSpec::Conv(*spec);
    if weights.len() != layer.weight_count()
        || bias.len() != spec.cout
        || affine.is_some_and(|(s, t)| s.len() != spec.cout || t.len() != spec.cout)
    {
        return Err(Error::Config("weight shapes do not match the layer".into()));
    }
    let out = rulebook.output();
    let (y, _) = layer_forward(&layer, Some(rulebook), out.len(), field.values(), weights, bias, affine);
    SparseField::new(out.clone(), spec.cout, y, 0.0)
}

/// Runs every node; returns the cache of all node outputs.
pub fn forward(graph: &NetworkGraph, plan: &Plan, input: &SparseField) -> Result<ForwardCache> {
    if input.channels() != graph.input_channels {
        return Err(Error::Config(format!(
            "network expects {} input channels, got {}",
            graph.input_channels,
            input.channels()
        )));
    }
    if !Arc::ptr_eq(input.active(), plan.input()) && input.active().as_ref() != plan.input().as_ref() {
        return Err(Error::Config("input field does not match the plan's active set".into()));
    }
    let p = &graph.params;
    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(graph.nodes.len());
    let mut raw = vec![None; graph.nodes.len()];
    for (n, node) in graph.nodes.iter().enumerate() {
        let n_sites = plan.actives[n].len();
        let values = match node {
            Node::Input => input.values().to_vec(),
            Node::Layer { input, layer, .. } => {
                let l = &graph.layers[*layer];
                let affine = l.affine.as_ref().map(|(s, t)| (&p[s.clone()], &p[t.clone()]));
                let (y, z) = layer_forward(
                    &l.spec,
                    plan.rulebooks[n].as_deref(),
                    n_sites,
                    &outputs[*input],
                    &p[l.weights.clone()],
                    &p[l.bias.clone()],
                    affine,
                );
                raw[n] = z;
                y
            }
            Node::Concat(inputs) => {
                let total = graph.channels[n];
                let mut out = vec![0.0; n_sites * total];
                let mut at = 0;
                for &i in inputs {
                    let c = graph.channels[i];
                    for (dst, src) in out.chunks_mut(total).zip(outputs[i].chunks(c)) {
                        dst[at..at + c].copy_from_slice(src);
                    }
                    at += c;
                }
                out
            }
            Node::Slice { input, start, len } => {
                let c = graph.channels[*input];
                outputs[*input]
                    .chunks(c)
                    .flat_map(|row| row[*start..*start + *len].iter().copied())
                    .collect()
            }
        };
        outputs.push(values);
    }
    Ok(ForwardCache {
        generation: graph.generation,
        outputs,
        raw,
    })
}

impl ForwardCache {
    /// Output of `node` as a field (fill 0).
    pub fn field(&self, graph: &NetworkGraph, plan: &Plan, node: NodeId) -> SparseField {
        SparseField::new(plan.actives[node].clone(), graph.channels[node], self.outputs[node].clone(), 0.0)
            .expect("cache shapes are consistent")
    }
}

/// Reverse-mode pass. `seeds` gives d(loss)/d(output) for chosen nodes;
/// returns the gradient with respect to every parameter and the input.
pub fn backward(
    graph: &NetworkGraph,
    plan: &Plan,
    cache: &ForwardCache,
    seeds: Vec<(NodeId, Vec<f64>)>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if cache.generation != graph.generation {
        return Err(Error::State(format!(
            "forward cache is from parameter generation {} but the graph is at {}",
            cache.generation, graph.generation
        )));
    }
    let p = &graph.params;
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; graph.nodes.len()];
    let add = |grads: &mut Vec<Option<Vec<f64>>>, node: NodeId, g: Vec<f64>| match &mut grads[node] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    };
    for (node, g) in seeds {
        if g.len() != cache.outputs[node].len() {
            return Err(Error::Config("gradient seed has the wrong shape".into()));
        }
        add(&mut grads, node, g);
    }
    let mut dparams = vec![0.0; p.len()];
    for n in (1..graph.nodes.len()).rev() {
        let Some(g) = grads[n].take() else { continue };
        match &graph.nodes[n] {
            Node::Input => unreachable!(),
            Node::Layer { input, layer, .. } => {
                let l = &graph.layers[*layer];
                let (cin, cout) = (l.spec.cin(), l.spec.cout());
                let y = &cache.outputs[n];
                let mut gz = g;
                if l.spec.activation() == Activation::Relu {
                    gz.iter_mut().zip(y).for_each(|(gv, &yv)| {
                        if yv <= 0.0 {
                            *gv = 0.0
                        }
                    });
                }
                if let Some((scale, shift)) = &l.affine {
                    let z = cache.raw[n].as_ref().expect("affine layers cache raw sums");
                    let s = &p[scale.clone()];
                    for (row_g, row_z) in gz.chunks(cout).zip(z.chunks(cout)) {
                        for c in 0..cout {
                            dparams[scale.start + c] += row_g[c] * row_z[c];
                            dparams[shift.start + c] += row_g[c];
                        }
                    }
                    for row in gz.chunks_mut(cout) {
                        for c in 0..cout {
                            row[c] *= s[c];
                        }
                    }
                }
                for row in gz.chunks(cout) {
                    for c in 0..cout {
                        dparams[l.bias.start + c] += row[c];
                    }
                }
                let x = &cache.outputs[*input];
                let w = &p[l.weights.clone()];
                let rb = plan.rulebooks[n].as_deref();
                let taps = l.spec.taps();
                let dw = dispatch!(cout, weight_grad_impl(rb, taps, x, &gz, cin, cout));
                dparams[l.weights.clone()].iter_mut().zip(dw).for_each(|(a, b)| *a += b);
                let mut wt = vec![0.0; taps * cin * cout];
                for k in 0..taps {
                    for ci in 0..cin {
                        for co in 0..cout {
                            wt[(k * cout + co) * cin + ci] = w[(k * cin + ci) * cout + co];
                        }
                    }
                }
                let n_in = plan.actives[*input].len();
                let gx = dispatch!(cin, input_grad_impl(rb, n_in, &wt, &gz, cin, cout));
                add(&mut grads, *input, gx);
            }
            Node::Concat(inputs) => {
                let total = graph.channels[n];
                let mut at = 0;
                for &i in inputs {
                    let c = graph.channels[i];
                    let part: Vec<f64> = g.chunks(total).flat_map(|row| row[at..at + c].iter().copied()).collect();
                    add(&mut grads, i, part);
                    at += c;
                }
            }
            Node::Slice { input, start, len } => {
                let c = graph.channels[*input];
                let mut full = vec![0.0; cache.outputs[*input].len()];
                for (dst, src) in full.chunks_mut(c).zip(g.chunks(*len)) {
                    dst[*start..*start + *len].copy_from_slice(src);
                }
                add(&mut grads, *input, full);
            }
        }
    }
    let dinput = grads[0].take().unwrap_or_else(|| vec![0.0; cache.outputs[0].len()]);
    Ok((dparams, dinput))
}
