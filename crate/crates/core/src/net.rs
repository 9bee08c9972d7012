//! The enhancement network: a U-shaped encoder–decoder over HWC feature
//! maps. Downsampling is a pointwise channel reduction followed by a
//! space-to-channel unshuffle; upsampling mirrors it with a shuffle.
//! Each level stacks transformer blocks consisting of channel-wise
//! multi-head attention (pre-norm) and a gated depthwise feedforward
//! with channel reordering (pre-norm), both with residual connections.
//! Skip connections concatenate encoder features into the decoder and
//! are fused by a pointwise projection. The head predicts a residual
//! added to the input, clamped to [0,1].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, UieError};
use crate::graph::{GraphBuilder, NodeId, Program};
use crate::image::Image;
use crate::kernels::ConvSpec;
use crate::params::ParameterStore;
use crate::rng::stream_rng;
use crate::tensor::Tensor;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Number of resolution levels (>= 2); level i runs at 1/2^i scale.
    pub levels: usize,
    /// Channels at full resolution; level i uses base_channels * 2^i.
    pub base_channels: usize,
    /// Transformer blocks per level (encoder and decoder alike).
    pub blocks_per_level: Vec<usize>,
    /// Attention heads per level; must divide that level's channels.
    pub heads_per_level: Vec<usize>,
    /// Feedforward expansion factor (gamma > 1).
    pub crgfn_expansion: f64,
    /// Space-to-channel factor of the resampling ops (fixed at 2).
    pub shuffle_factor: usize,
    /// Groups of the feedforward channel reordering.
    pub reorder_groups: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            blocks_per_level: vec![2, 2, 2, 2],
            heads_per_level: vec![1, 2, 4, 8],
            crgfn_expansion: 2.0,
            shuffle_factor: 2,
            reorder_groups: 4,
        }
    }
}

impl NetworkConfig {
    /// A deliberately tiny variant for fast tests.
    pub fn tiny() -> Self {
        Self {
            levels: 2,
            base_channels: 8,
            blocks_per_level: vec![1, 1],
            heads_per_level: vec![1, 2],
            crgfn_expansion: 2.0,
            shuffle_factor: 2,
            reorder_groups: 4,
        }
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Total spatial reduction; inputs must divide by this.
    pub fn alignment(&self) -> usize {
        self.shuffle_factor.pow((self.levels - 1) as u32)
    }

    /// Expanded feedforward width at `level`, validated to be an even
    /// integer divisible by the reorder groups.
    pub fn expanded_channels(&self, level: usize) -> Result<usize> {
        let c = self.channels_at(level) as f64;
        let e = self.crgfn_expansion * c;
        if e.fract() != 0.0 {
            return Err(UieError::Config(format!(
                "expansion {} x {c} channels is not an integer",
                self.crgfn_expansion
            )));
        }
        let e = e as usize;
        if e % 2 != 0 {
            return Err(UieError::Config(format!(
                "expanded width {e} must be even to split into halves"
            )));
        }
        if e % self.reorder_groups != 0 {
            return Err(UieError::Config(format!(
                "expanded width {e} must divide by {} reorder groups",
                self.reorder_groups
            )));
        }
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(UieError::Config(format!(
                "need at least 2 levels, got {}",
                self.levels
            )));
        }
        if self.shuffle_factor != 2 {
            return Err(UieError::Config(format!(
                "shuffle factor is fixed at 2, got {}",
                self.shuffle_factor
            )));
        }
        if self.base_channels == 0 {
            return Err(UieError::Config("base_channels must be positive".into()));
        }
        if self.blocks_per_level.len() != self.levels
            || self.heads_per_level.len() != self.levels
        {
            return Err(UieError::Config(format!(
                "blocks/heads lists must have {} entries",
                self.levels
            )));
        }
        if !(self.crgfn_expansion.is_finite() && self.crgfn_expansion > 1.0) {
            return Err(UieError::Config(format!(
                "expansion must be > 1, got {}",
                self.crgfn_expansion
            )));
        }
        if self.reorder_groups == 0 {
            return Err(UieError::Config("reorder_groups must be positive".into()));
        }
        for l in 0..self.levels {
            let c = self.channels_at(l);
            let h = self.heads_per_level[l];
            if h == 0 || c % h != 0 {
                return Err(UieError::Config(format!(
                    "level {l}: {h} heads must divide {c} channels"
                )));
            }
            if self.blocks_per_level[l] == 0 {
                return Err(UieError::Config(format!("level {l}: needs >= 1 block")));
            }
            self.expanded_channels(l)?;
            // downsampling halves channels before unshuffle quadruples
            if l + 1 < self.levels && c % 2 != 0 {
                return Err(UieError::Config(format!(
                    "level {l}: channels {c} must be even to downsample"
                )));
            }
        }
        Ok(())
    }
}

/// A single-level activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
    level: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor, level: usize) -> Result<Self> {
        if values.shape().len() != 3 {
            return Err(UieError::Shape(format!(
                "feature map must be (h, w, c), got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(UieError::Range("feature map contains non-finite values".into()));
        }
        Ok(Self { values, level })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }
}

/// Space-to-channel downsampling of a feature map (pure permutation).
pub fn pixel_unshuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    let (h, w, _) = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(UieError::Alignment(format!(
            "cannot unshuffle {h}x{w} by factor {r}"
        )));
    }
    FeatureMap::new(crate::kernels::pixel_unshuffle_t(&x.values, r), x.level + 1)
}

/// Channel-to-space upsampling; exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    let (_, _, c) = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(UieError::Alignment(format!(
            "cannot shuffle {c} channels by factor {r}"
        )));
    }
    FeatureMap::new(
        crate::kernels::pixel_shuffle_t(&x.values, r),
        x.level.saturating_sub(1),
    )
}

/// Abstracts where parameters come from when building the graph:
/// trainable runtime feeds or frozen baked constants.
trait ParamSource {
    fn node(&mut self, gb: &mut GraphBuilder, name: &str, shape: &[usize]) -> NodeId;
}

/// Creates one feed per parameter and records the name → node map.
#[derive(Default)]
struct FeedSource {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamSource for FeedSource {
    fn node(&mut self, gb: &mut GraphBuilder, name: &str, shape: &[usize]) -> NodeId {
        let id = gb.feed(shape);
        let prev = self.nodes.insert(name.to_string(), id);
        assert!(prev.is_none(), "parameter {name} requested twice");
        id
    }
}

/// Bakes parameter values from a store as constants.
struct ConstSource<'a> {
    params: &'a ParameterStore,
}

impl ParamSource for ConstSource<'_> {
    fn node(&mut self, gb: &mut GraphBuilder, name: &str, shape: &[usize]) -> NodeId {
        let t = self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        assert_eq!(t.shape(), shape, "parameter {name} has the wrong shape");
        gb.constant(t.clone())
    }
}

struct NetBuilder<'a> {
    gb: GraphBuilder,
    src: &'a mut dyn ParamSource,
    cfg: &'a NetworkConfig,
    probes: Vec<NodeId>,
}

impl<'a> NetBuilder<'a> {
    fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.src.node(&mut self.gb, name, shape)
    }

    fn conv(
        &mut self,
        x: NodeId,
        name: &str,
        ksize: usize,
        cin: usize,
        cout: usize,
        groups: usize,
        stride: usize,
        bias: bool,
    ) -> NodeId {
        let pad = ksize / 2;
        let w = self.param(&format!("{name}.w"), &[ksize, ksize, cin / groups, cout]);
        let b = bias.then(|| self.param(&format!("{name}.b"), &[cout]));
        self.gb
            .conv2d(x, w, b, ConvSpec { stride, pad, groups })
    }

    fn layer_norm(&mut self, x: NodeId, name: &str, c: usize) -> NodeId {
        let gamma = self.param(&format!("{name}.gamma"), &[c]);
        let beta = self.param(&format!("{name}.beta"), &[c]);
        self.gb.layer_norm(x, gamma, beta, 1e-6)
    }

    /// Channel-wise multi-head attention: per head, (c_h, hw) query/key
    /// rows are L2-normalized, scored against each other (a c_h x c_h
    /// matrix), softmaxed, and applied to the value rows.
    fn attention(&mut self, x: NodeId, prefix: &str, c: usize, heads: usize) -> NodeId {
        let (h, w) = {
            let s = self.gb.shape(x);
            (s[0], s[1])
        };
        let hw = h * w;
        let ch = c / heads;
        let qkv = self.conv(x, &format!("{prefix}.qkv"), 1, c, 3 * c, 1, 1, true);
        let qkv = self.conv(qkv, &format!("{prefix}.dw"), 3, 3 * c, 3 * c, 3 * c, 1, true);
        let q = self.gb.slice_last(qkv, 0, c);
        let k = self.gb.slice_last(qkv, c, 2 * c);
        let v = self.gb.slice_last(qkv, 2 * c, 3 * c);
        let temp = self.param(&format!("{prefix}.temp"), &[heads]);

        let as_rows = |gb: &mut GraphBuilder, t: NodeId, lo: usize, hi: usize| {
            let sl = gb.slice_last(t, lo, hi);
            let flat = gb.reshape(sl, &[hw, hi - lo]);
            gb.transpose(flat) // (c_h, hw)
        };

        let mut head_outputs = Vec::with_capacity(heads);
        for i in 0..heads {
            let (lo, hi) = (i * ch, (i + 1) * ch);
            let qh = as_rows(&mut self.gb, q, lo, hi);
            let kh = as_rows(&mut self.gb, k, lo, hi);
            let vh = as_rows(&mut self.gb, v, lo, hi);
            let qn = self.gb.normalize_rows(qh, 1e-12);
            let kn = self.gb.normalize_rows(kh, 1e-12);
            let kt = self.gb.transpose(kn);
            let scores = self.gb.matmul(qn, kt);
            let ti = self.gb.slice_last(temp, i, i + 1);
            let scaled = self.gb.scalar_mul(scores, ti);
            let attn = self.gb.softmax_rows(scaled);
            self.probes.push(attn);
            let oh = self.gb.matmul(attn, vh); // (c_h, hw)
            head_outputs.push(self.gb.transpose(oh)); // (hw, c_h)
        }
        let cat = self.gb.concat_last(&head_outputs); // (hw, c)
        let spatial = self.gb.reshape(cat, &[h, w, c]);
        self.conv(spatial, &format!("{prefix}.proj"), 1, c, c, 1, 1, true)
    }

    /// Gated feedforward: pointwise expand, channel reorder, split into
    /// halves, depthwise 3x3 each, multiply one half by the smooth gate
    /// of the other, project back. No residual here — callers add it.
    fn crgfn_core(&mut self, x: NodeId, prefix: &str, c: usize, e: usize) -> NodeId {
        let scoped = |name: &str| {
            if prefix.is_empty() {
                name.to_string()
            } else {
                format!("{prefix}.{name}")
            }
        };
        let expanded = self.conv(x, &scoped("expand"), 1, c, e, 1, 1, true);
        let shuffled = self.gb.channel_reorder(expanded, self.cfg.reorder_groups);
        let h1 = self.gb.slice_last(shuffled, 0, e / 2);
        let h2 = self.gb.slice_last(shuffled, e / 2, e);
        let d1 = self.conv(h1, &scoped("dw1"), 3, e / 2, e / 2, e / 2, 1, true);
        let d2 = self.conv(h2, &scoped("dw2"), 3, e / 2, e / 2, e / 2, 1, true);
        let gated = self.gb.silu_gate(d1, d2);
        self.conv(gated, &scoped("proj"), 1, e / 2, c, 1, 1, true)
    }

    fn transformer_block(&mut self, x: NodeId, prefix: &str, level: usize) -> NodeId {
        let c = self.cfg.channels_at(level);
        let e = self.cfg.expanded_channels(level).expect("validated config");
        let heads = self.cfg.heads_per_level[level];
        let n1 = self.layer_norm(x, &format!("{prefix}.ln1"), c);
        let a = self.attention(n1, &format!("{prefix}.attn"), c, heads);
        let x = self.gb.add(x, a);
        let n2 = self.layer_norm(x, &format!("{prefix}.ln2"), c);
        let f = self.crgfn_core(n2, &format!("{prefix}.ffn"), c, e);
        self.gb.add(x, f)
    }

    fn level_blocks(&mut self, mut x: NodeId, stage: &str, level: usize) -> NodeId {
        for b in 0..self.cfg.blocks_per_level[level] {
            x = self.transformer_block(x, &format!("{stage}{level}.blk{b}"), level);
        }
        x
    }
}

/// A compiled network for one input size.
pub struct BuiltNetwork {
    pub program: Program,
    pub input: NodeId,
    pub output: NodeId,
    /// Parameter name → feed node.
    pub param_nodes: BTreeMap<String, NodeId>,
    /// Attention softmax outputs, for normalization checks.
    pub attention_probes: Vec<NodeId>,
}

impl BuiltNetwork {
    /// Bind a parameter store to this network's feeds.
    pub fn feeds(&self, params: &ParameterStore) -> Result<BTreeMap<NodeId, Tensor>> {
        let mut m = BTreeMap::new();
        for (name, &node) in &self.param_nodes {
            let t = params.get(name).ok_or_else(|| {
                UieError::Config(format!("parameter store is missing {name}"))
            })?;
            if t.shape() != self.program.shape(node) {
                return Err(UieError::Config(format!(
                    "parameter {name}: stored shape {:?} vs expected {:?}",
                    t.shape(),
                    self.program.shape(node)
                )));
            }
            m.insert(node, t.clone());
        }
        Ok(m)
    }
}

/// A network graph that has not been finished yet; training code
/// appends loss nodes to `gb` before compiling.
pub(crate) struct OpenNetwork {
    pub gb: GraphBuilder,
    pub input: NodeId,
    pub output: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
    pub probes: Vec<NodeId>,
}

/// Build the network with parameters as runtime feeds, leaving the
/// graph open for extension.
pub(crate) fn open_network(config: &NetworkConfig, h: usize, w: usize) -> Result<OpenNetwork> {
    config.validate()?;
    check_alignment(config, h, w)?;
    let mut src = FeedSource::default();
    let (gb, input, output, probes) = build_with_source(config, h, w, &mut src);
    Ok(OpenNetwork { gb, input, output, param_nodes: src.nodes, probes })
}

fn check_alignment(config: &NetworkConfig, h: usize, w: usize) -> Result<()> {
    let align = config.alignment();
    if h % align != 0 || w % align != 0 {
        return Err(UieError::Alignment(format!(
            "input {h}x{w} must divide by the network alignment {align}"
        )));
    }
    Ok(())
}

/// Compile the network graph for an h × w input with parameters as
/// runtime feeds (the training configuration).
pub fn build_network(config: &NetworkConfig, h: usize, w: usize) -> Result<BuiltNetwork> {
    let open = open_network(config, h, w)?;
    Ok(BuiltNetwork {
        program: open.gb.finish(),
        input: open.input,
        output: open.output,
        param_nodes: open.param_nodes,
        attention_probes: open.probes,
    })
}

fn build_with_source(
    config: &NetworkConfig,
    h: usize,
    w: usize,
    src: &mut dyn ParamSource,
) -> (GraphBuilder, NodeId, NodeId, Vec<NodeId>) {
    let mut nb = NetBuilder {
        gb: GraphBuilder::new(),
        src,
        cfg: config,
        probes: Vec::new(),
    };
    let r = config.shuffle_factor;
    let input = nb.gb.feed(&[h, w, 3]);

    let c0 = config.channels_at(0);
    let mut x = nb.conv(input, "embed", 3, 3, c0, 1, 1, true);

    // encoder: blocks, then channel-halving conv + unshuffle
    let mut skips = Vec::new();
    for l in 0..config.levels - 1 {
        x = nb.level_blocks(x, "enc", l);
        skips.push(x);
        let c = config.channels_at(l);
        let reduced = nb.conv(x, &format!("down{l}"), 1, c, c / 2, 1, 1, false);
        x = nb.gb.pixel_unshuffle(reduced, r);
    }
    x = nb.level_blocks(x, "enc", config.levels - 1);

    // decoder: channel-doubling conv + shuffle, skip concat, fuse, blocks
    for l in (1..config.levels).rev() {
        let c = config.channels_at(l);
        let widened = nb.conv(x, &format!("up{l}"), 1, c, 2 * c, 1, 1, false);
        let up = nb.gb.pixel_shuffle(widened, r);
        let skip = skips[l - 1];
        let cat = nb.gb.concat_last(&[up, skip]);
        let cl = config.channels_at(l - 1);
        x = nb.conv(cat, &format!("skip{}", l - 1), 1, 2 * cl, cl, 1, 1, false);
        x = nb.level_blocks(x, "dec", l - 1);
    }

    x = nb.transformer_block(x, "refine.blk0", 0);

    let residual = nb.conv(x, "head", 3, c0, 3, 1, 1, true);
    let summed = nb.gb.add(input, residual);
    let output = nb.gb.clamp01(summed);

    (nb.gb, input, output, nb.probes)
}

/// Initialize a parameter store for `config`, deterministically from
/// `seed`. Every entry is trainable.
pub fn init_network(config: &NetworkConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let a = config.alignment();
    let built = build_network(config, a, a)?;
    let mut params = ParameterStore::new();
    for (name, &node) in &built.param_nodes {
        let shape = built.program.shape(node).to_vec();
        let value = init_value(name, &shape, seed);
        params.insert(name, value);
    }
    Ok(params)
}

fn init_value(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if name.ends_with(".beta") || name.ends_with(".b") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".gamma") || name.ends_with(".temp") {
        return Tensor::full(shape, 1.0);
    }
    // conv weight (kh, kw, cin/g, cout): uniform with fan-in scaling;
    // the stream is keyed by name so init order is irrelevant
    debug_assert_eq!(shape.len(), 4, "unexpected parameter {name}: {shape:?}");
    let fan_in = shape[0] * shape[1] * shape[2];
    let bound = (1.0 / fan_in as f64).sqrt();
    let mut rng = stream_rng(seed, name, 0);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).unwrap()
}

/// Run the network on an image eagerly (builds the graph, bakes the
/// parameters as constants, frees intermediates as it goes).
pub fn forward_enhance(
    img: &Image,
    params: &ParameterStore,
    config: &NetworkConfig,
) -> Result<Image> {
    config.validate()?;
    let align = config.alignment();
    if img.height() % align != 0 || img.width() % align != 0 {
        return Err(UieError::Alignment(format!(
            "image {}x{} must divide by the network alignment {align}",
            img.height(),
            img.width()
        )));
    }
    // verify the store before building: panics inside the builder are
    // programmer errors, missing params are caller errors
    let built = build_network(config, img.height(), img.width())?;
    built.feeds(params)?; // shape/presence check
    let mut src = ConstSource { params };
    let (gb, input, output, _) =
        build_with_source(config, img.height(), img.width(), &mut src);
    let program = gb.finish();
    let mut feeds = BTreeMap::new();
    feeds.insert(input, img.to_tensor());
    let exec = program.forward_inference(&feeds, &[output]);
    Image::from_tensor(exec.value(output))
}

/// Eager feedforward block (expansion, reorder, split, depthwise pair,
/// gate, projection) plus the residual connection. Parameter names:
/// `expand.w/b`, `dw1.w/b`, `dw2.w/b`, `proj.w/b`.
pub fn crgfn_forward(
    x: &FeatureMap,
    params: &ParameterStore,
    groups: usize,
) -> Result<FeatureMap> {
    let (_, _, c) = x.shape();
    let expand_w = params
        .get("expand.w")
        .ok_or_else(|| UieError::Shape("missing expand.w".into()))?;
    if expand_w.shape().len() != 4 || expand_w.shape()[2] != c {
        return Err(UieError::Shape(format!(
            "expand.w shape {:?} does not accept {c} input channels",
            expand_w.shape()
        )));
    }
    let e = expand_w.shape()[3];
    if e % 2 != 0 || groups == 0 || e % groups != 0 {
        return Err(UieError::Shape(format!(
            "expanded width {e} incompatible with {groups} groups"
        )));
    }
    for (name, shape) in [
        ("expand.b", vec![e]),
        ("dw1.w", vec![3, 3, 1, e / 2]),
        ("dw1.b", vec![e / 2]),
        ("dw2.w", vec![3, 3, 1, e / 2]),
        ("dw2.b", vec![e / 2]),
        ("proj.w", vec![1, 1, e / 2, c]),
        ("proj.b", vec![c]),
    ] {
        match params.get(name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(UieError::Shape(format!(
                    "{name}: expected shape {shape:?}, got {:?}",
                    t.shape()
                )))
            }
            None => return Err(UieError::Shape(format!("missing {name}"))),
        }
    }

    let cfg = NetworkConfig { reorder_groups: groups, ..NetworkConfig::default() };
    let mut src = ConstSource { params };
    let mut nb = NetBuilder {
        gb: GraphBuilder::new(),
        src: &mut src,
        cfg: &cfg,
        probes: Vec::new(),
    };
    let (h, w, _) = x.shape();
    let inp = nb.gb.feed(&[h, w, c]);
    let core = nb.crgfn_core(inp, "", c, e);
    let out = nb.gb.add(inp, core);
    let program = nb.gb.finish();
    let mut feeds = BTreeMap::new();
    feeds.insert(inp, x.values().clone());
    let exec = program.forward_inference(&feeds, &[out]);
    FeatureMap::new(exec.value(out).clone(), x.level())
}
