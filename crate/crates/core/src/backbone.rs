//! Miniature pre-norm ViT-style encoder used as the frozen backbone.
//!
//! The graph-level builders (`mha_graph`, `ffn_graph`, [`forward_graph`]) are
//! the single implementation; the tensor-in/tensor-out functions wrap them in
//! a throwaway [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

pub fn activate(g: &mut Graph, x: NodeId, act: Activation) -> Result<NodeId> {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Relu => g.relu(x),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    /// Input tokens per sample (excluding the class token).
    pub tokens: usize,
    pub input_width: usize,
    pub classes: usize,
    #[serde(default)]
    pub class_token: bool,
    #[serde(default)]
    pub activation: Activation,
}

impl BackboneConfig {
    /// Desk-scale default: L=4, d=64, h=4, d_ff=256, T=16, C=10.
    pub fn desk() -> Self {
        BackboneConfig {
            layers: 4,
            width: 64,
            heads: 4,
            ffn_width: 256,
            tokens: 16,
            input_width: 64,
            classes: 10,
            class_token: false,
            activation: Activation::Gelu,
        }
    }

    /// ViT-B/16 extents (196 patches of 16·16·3 values plus a class token).
    /// Only used for parameter counting.
    pub fn vitb16(classes: usize) -> Self {
        BackboneConfig {
            layers: 12,
            width: 768,
            heads: 12,
            ffn_width: 3072,
            tokens: 196,
            input_width: 768,
            classes,
            class_token: true,
            activation: Activation::Gelu,
        }
    }

    /// Tiny extents for gradient checks.
    pub fn tiny() -> Self {
        BackboneConfig {
            layers: 2,
            width: 8,
            heads: 2,
            ffn_width: 16,
            tokens: 3,
            input_width: 5,
            classes: 3,
            class_token: false,
            activation: Activation::Gelu,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "vitb16" => Some(Self::vitb16(100)),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("layers", self.layers),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_width", self.ffn_width),
            ("tokens", self.tokens),
            ("input_width", self.input_width),
            ("classes", self.classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(
                    format!("backbone.{name}"),
                    "must be positive",
                ));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "backbone.heads",
                format!(
                    "width {} is not divisible by {} heads",
                    self.width, self.heads
                ),
            ));
        }
        if self.ffn_width < self.width {
            return Err(Error::config(
                "backbone.ffn_width",
                format!("{} is smaller than width {}", self.ffn_width, self.width),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Sequence length seen by the blocks.
    pub fn seq_len(&self) -> usize {
        self.tokens + usize::from(self.class_token)
    }

    /// Every backbone parameter as (name, shape), in construction order.
    pub fn param_plan(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.width, self.ffn_width);
        let mut plan = vec![
            ("embed.weight".to_string(), vec![self.input_width, d]),
            ("embed.bias".to_string(), vec![d]),
            ("pos_embed".to_string(), vec![self.seq_len(), d]),
        ];
        if self.class_token {
            plan.push(("cls_token".into(), vec![1, d]));
        }
        for l in 0..self.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            plan.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.w_q"), vec![d, d]),
                (p("attn.w_k"), vec![d, d]),
                (p("attn.w_v"), vec![d, d]),
                (p("attn.w_o"), vec![d, d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("ffn.w1"), vec![d, f]),
                (p("ffn.b1"), vec![f]),
                (p("ffn.w2"), vec![f, d]),
                (p("ffn.b2"), vec![d]),
            ]);
        }
        plan.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.classes]),
            ("head.bias".to_string(), vec![self.classes]),
        ]);
        plan
    }
}

pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head.")
}

// ---------------------------------------------------------------------------
// Plain weight bundles for the functional API
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttentionProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub heads: usize,
}

impl AttentionProjections {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor, heads: usize) -> Result<Self> {
        let d = w_q.shape().first().copied().unwrap_or(0);
        for (name, w) in [("w_q", &w_q), ("w_k", &w_k), ("w_v", &w_v), ("w_o", &w_o)] {
            if w.shape() != [d, d] {
                return Err(Error::dim(
                    "attention",
                    format!("{name} has shape {:?}, expected [{d}, {d}]", w.shape()),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        Ok(AttentionProjections {
            w_q,
            w_k,
            w_v,
            w_o,
            heads,
        })
    }

    pub fn random(width: usize, heads: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let std = 1.0 / (width as f64).sqrt();
        let mut w = || Tensor::randn(&[width, width], std, rng);
        let (q, k, v, o) = (w(), w(), w(), w());
        Self::new(q, k, v, o, heads)
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn bind(&self, g: &mut Graph) -> AttnNodes {
        AttnNodes {
            w_q: g.constant(self.w_q.clone()),
            w_k: g.constant(self.w_k.clone()),
            w_v: g.constant(self.w_v.clone()),
            w_o: g.constant(self.w_o.clone()),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfnWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl FfnWeights {
    pub fn random(
        width: usize,
        hidden: usize,
        activation: Activation,
        rng: &mut impl rand::Rng,
    ) -> Self {
        FfnWeights {
            w1: Tensor::randn(&[width, hidden], 1.0 / (width as f64).sqrt(), rng),
            b1: Tensor::randn(&[hidden], 0.1, rng),
            w2: Tensor::randn(&[hidden, width], 1.0 / (hidden as f64).sqrt(), rng),
            b2: Tensor::randn(&[width], 0.1, rng),
            activation,
        }
    }

    pub fn bind(&self, g: &mut Graph) -> FfnNodes {
        FfnNodes {
            w1: g.constant(self.w1.clone()),
            b1: g.constant(self.b1.clone()),
            w2: g.constant(self.w2.clone()),
            b2: g.constant(self.b2.clone()),
            activation: self.activation,
        }
    }
}

/// Weights of one pre-norm block.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub attn: AttentionProjections,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ffn: FfnWeights,
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct AttnNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub activation: Activation,
}

/// Intermediate values of one attention call, reused by parallel tuners.
#[derive(Clone, Copy, Debug)]
pub struct MhaCache {
    /// Per-head projections, `[B, h, T, d_h]`.
    pub q: NodeId,
    pub k: NodeId,
    pub v: NodeId,
    /// Per-head attention outputs before merging, `[B, h, T, d_h]`.
    pub heads_out: NodeId,
    /// Attention weights `[B, h, T, T]`.
    pub weights: NodeId,
    /// Logit scale `1/sqrt(d_h)`.
    pub scale: f64,
}

fn expect_rank3(g: &Graph, x: NodeId, width: usize, op: &'static str) -> Result<(usize, usize)> {
    match *g.shape(x) {
        [b, t, d] if d == width => Ok((b, t)),
        ref s => Err(Error::dim(
            op,
            format!("input {s:?} does not end in width {width}"),
        )),
    }
}

/// `[B, T, d]` → `[B, h, T, d/h]`.
pub fn split_heads(g: &mut Graph, x: NodeId, heads: usize) -> Result<NodeId> {
    let [b, t, d] = *g.shape(x) else {
        return Err(Error::dim(
            "split_heads",
            format!("expected rank 3, got {:?}", g.shape(x)),
        ));
    };
    let r = g.reshape(x, &[b, t, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, T, d_h]` → `[B, T, h·d_h]`.
pub fn merge_heads(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let [b, h, t, dh] = *g.shape(x) else {
        return Err(Error::dim(
            "merge_heads",
            format!("expected rank 4, got {:?}", g.shape(x)),
        ));
    };
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, t, h * dh])
}

/// Scaled dot-product attention `softmax(q kᵀ · scale) v`; returns (output, weights).
pub fn attend(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    scale: f64,
) -> Result<(NodeId, NodeId)> {
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale)?;
    let last = g.shape(logits).len() - 1;
    let w = g.softmax(logits, last)?;
    let out = g.matmul(w, v)?;
    Ok((out, w))
}

/// Per-head `[B, h, T, d_h]` projections of `x [B, T, d]` through `w [d, d]`.
pub fn project_heads(g: &mut Graph, x: NodeId, w: NodeId, heads: usize) -> Result<NodeId> {
    let p = g.matmul(x, w)?;
    split_heads(g, p, heads)
}

pub fn mha_graph(g: &mut Graph, x: NodeId, w: &AttnNodes) -> Result<(NodeId, MhaCache)> {
    let d = g.shape(w.w_q)[0];
    expect_rank3(g, x, d, "multi_head_attention")?;
    let scale = 1.0 / ((d / w.heads) as f64).sqrt();
    let q = project_heads(g, x, w.w_q, w.heads)?;
    let k = project_heads(g, x, w.w_k, w.heads)?;
    let v = project_heads(g, x, w.w_v, w.heads)?;
    let (heads_out, weights) = attend(g, q, k, v, scale)?;
    let merged = merge_heads(g, heads_out)?;
    let out = g.matmul(merged, w.w_o)?;
    Ok((
        out,
        MhaCache {
            q,
            k,
            v,
            heads_out,
            weights,
            scale,
        },
    ))
}

pub fn ffn_graph(g: &mut Graph, x: NodeId, w: &FfnNodes) -> Result<NodeId> {
    let d = g.shape(w.w1)[0];
    if g.shape(x).last() != Some(&d) {
        return Err(Error::dim(
            "feed_forward",
            format!("input {:?} does not end in width {d}", g.shape(x)),
        ));
    }
    let h = g.matmul(x, w.w1)?;
    let h = g.add(h, w.b1)?;
    let h = activate(g, h, w.activation)?;
    let o = g.matmul(h, w.w2)?;
    g.add(o, w.b2)
}

/// Adds a leading batch axis to rank-2 inputs; returns whether it did.
fn batched(x: &Tensor) -> Result<(Tensor, bool)> {
    match x.ndim() {
        2 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.reshape(&s)?, true))
        }
        3 => Ok((x.clone(), false)),
        _ => Err(Error::dim(
            "backbone",
            format!("expected [T, d] or [B, T, d], got {:?}", x.shape()),
        )),
    }
}

fn unbatched(t: &Tensor, squeeze: bool) -> Result<Tensor> {
    if squeeze {
        t.reshape(&t.shape()[1..])
    } else {
        Ok(t.clone())
    }
}

/// Multi-head self-attention of `x` (`[T, d]` or `[B, T, d]`).
pub fn multi_head_attention(x: &Tensor, proj: &AttentionProjections) -> Result<Tensor> {
    let (xb, squeeze) = batched(x)?;
    let mut g = Graph::new();
    let w = proj.bind(&mut g);
    let xn = g.constant(xb);
    let (out, _) = mha_graph(&mut g, xn, &w)?;
    unbatched(g.value(out), squeeze)
}

/// Attention weights `[h, T, T]` (or `[B, h, T, T]`) for inspection.
pub fn attention_weights(x: &Tensor, proj: &AttentionProjections) -> Result<Tensor> {
    let (xb, squeeze) = batched(x)?;
    let mut g = Graph::new();
    let w = proj.bind(&mut g);
    let xn = g.constant(xb);
    let (_, cache) = mha_graph(&mut g, xn, &w)?;
    unbatched(g.value(cache.weights), squeeze)
}

/// `φ(x W₁ + b₁) W₂ + b₂`.
pub fn feed_forward(x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = w.bind(&mut g);
    let xn = g.constant(x.clone());
    let out = ffn_graph(&mut g, xn, &nodes)?;
    Ok(g.value(out).clone())
}

/// `u = x + MHA(LN₁ x)`, `y = u + FFN(LN₂ u)`.
pub fn transformer_block(x: &Tensor, block: &BlockWeights) -> Result<Tensor> {
    let (xb, squeeze) = batched(x)?;
    let mut g = Graph::new();
    let xn = g.constant(xb);
    let ln1g = g.constant(block.ln1_gamma.clone());
    let ln1b = g.constant(block.ln1_beta.clone());
    let ln2g = g.constant(block.ln2_gamma.clone());
    let ln2b = g.constant(block.ln2_beta.clone());
    let attn = block.attn.bind(&mut g);
    let ffn = block.ffn.bind(&mut g);
    let a = g.layer_norm(xn, ln1g, ln1b)?;
    let (m, _) = mha_graph(&mut g, a, &attn)?;
    let u = g.add(xn, m)?;
    let b = g.layer_norm(u, ln2g, ln2b)?;
    let f = ffn_graph(&mut g, b, &ffn)?;
    let y = g.add(u, f)?;
    unbatched(g.value(y), squeeze)
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct BackboneLayout {
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub pos: ParamId,
    pub cls: Option<ParamId>,
    pub blocks: Vec<BlockLayout>,
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl BackboneLayout {
    /// Resolves every backbone name in `store`, checking shapes.
    pub fn resolve(config: &BackboneConfig, store: &ParamStore) -> Result<Self> {
        for (name, shape) in config.param_plan() {
            let var = store
                .by_name(&name)
                .ok_or_else(|| Error::Format(format!("missing backbone tensor `{name}`")))?;
            if var.value.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, config expects {shape:?}",
                    var.value.shape()
                )));
            }
        }
        let id = |n: &str| store.id(n).expect("checked above");
        let blocks = (0..config.layers)
            .map(|l| {
                let b = |s: &str| id(&format!("blocks.{l}.{s}"));
                BlockLayout {
                    ln1_gamma: b("ln1.gamma"),
                    ln1_beta: b("ln1.beta"),
                    w_q: b("attn.w_q"),
                    w_k: b("attn.w_k"),
                    w_v: b("attn.w_v"),
                    w_o: b("attn.w_o"),
                    ln2_gamma: b("ln2.gamma"),
                    ln2_beta: b("ln2.beta"),
                    w1: b("ffn.w1"),
                    b1: b("ffn.b1"),
                    w2: b("ffn.w2"),
                    b2: b("ffn.b2"),
                }
            })
            .collect();
        Ok(BackboneLayout {
            embed_w: id("embed.weight"),
            embed_b: id("embed.bias"),
            pos: id("pos_embed"),
            cls: config.class_token.then(|| id("cls_token")),
            blocks,
            norm_gamma: id("norm.gamma"),
            norm_beta: id("norm.beta"),
            head_w: id("head.weight"),
            head_b: id("head.bias"),
        })
    }
}

/// Hooks through which parallel tuners add deltas at each operation site.
pub trait SiteTuning {
    fn mha_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        input: NodeId,
        cache: &MhaCache,
        attn: &AttnNodes,
    ) -> Result<Option<NodeId>>;

    fn ffn_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        input: NodeId,
    ) -> Result<Option<NodeId>>;

    fn block_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        input: NodeId,
    ) -> Result<Option<NodeId>>;
}

/// The plain frozen backbone: no deltas anywhere.
pub struct NoTuning;

impl SiteTuning for NoTuning {
    fn mha_delta(
        &self,
        _: &mut Graph,
        _: &ParamStore,
        _: usize,
        _: NodeId,
        _: &MhaCache,
        _: &AttnNodes,
    ) -> Result<Option<NodeId>> {
        Ok(None)
    }

    fn ffn_delta(
        &self,
        _: &mut Graph,
        _: &ParamStore,
        _: usize,
        _: NodeId,
    ) -> Result<Option<NodeId>> {
        Ok(None)
    }

    fn block_delta(
        &self,
        _: &mut Graph,
        _: &ParamStore,
        _: usize,
        _: NodeId,
    ) -> Result<Option<NodeId>> {
        Ok(None)
    }
}

/// Observation points inside one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceSite {
    MhaIn,
    MhaOut,
    FfnIn,
    FfnOut,
    BlockOut,
}

impl TraceSite {
    pub const ALL: [TraceSite; 5] = [
        TraceSite::MhaIn,
        TraceSite::MhaOut,
        TraceSite::FfnIn,
        TraceSite::FfnOut,
        TraceSite::BlockOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TraceSite::MhaIn => "mha_in",
            TraceSite::MhaOut => "mha_out",
            TraceSite::FfnIn => "ffn_in",
            TraceSite::FfnOut => "ffn_out",
            TraceSite::BlockOut => "block_out",
        }
    }
}

/// Node ids of every [`TraceSite`] per layer, in `TraceSite::ALL` order.
#[derive(Clone, Debug, Default)]
pub struct SiteTrace {
    pub layers: Vec<[NodeId; 5]>,
}

pub struct Encoded {
    /// Pooled, normalised features `[B, d]`.
    pub features: NodeId,
    pub trace: SiteTrace,
}

/// Embedding, blocks (with tuner hooks), final LN and pooling.
pub fn encode_graph(
    g: &mut Graph,
    config: &BackboneConfig,
    layout: &BackboneLayout,
    store: &ParamStore,
    x: NodeId,
    tuning: &dyn SiteTuning,
) -> Result<Encoded> {
    let (b, t) = expect_rank3(g, x, config.input_width, "forward")?;
    if t != config.tokens {
        return Err(Error::dim(
            "forward",
            format!("got {t} tokens, backbone expects {}", config.tokens),
        ));
    }
    let ew = g.param(store, layout.embed_w);
    let eb = g.param(store, layout.embed_b);
    let mut h = g.matmul(x, ew)?;
    h = g.add(h, eb)?;
    if let Some(cls) = layout.cls {
        let c = g.param(store, cls);
        let c = g.expand(c, &[b])?;
        h = g.concat(&[c, h], 1)?;
    }
    let pos = g.param(store, layout.pos);
    h = g.add(h, pos)?;

    let mut trace = SiteTrace::default();
    for (l, blk) in layout.blocks.iter().enumerate() {
        let x_in = h;
        let ln1g = g.param(store, blk.ln1_gamma);
        let ln1b = g.param(store, blk.ln1_beta);
        let a = g.layer_norm(x_in, ln1g, ln1b)?;
        let attn = AttnNodes {
            w_q: g.param(store, blk.w_q),
            w_k: g.param(store, blk.w_k),
            w_v: g.param(store, blk.w_v),
            w_o: g.param(store, blk.w_o),
            heads: config.heads,
        };
        let (mut m, cache) = mha_graph(g, a, &attn)?;
        if let Some(delta) = tuning.mha_delta(g, store, l, a, &cache, &attn)? {
            m = g.add(m, delta)?;
        }
        let u = g.add(x_in, m)?;

        let ln2g = g.param(store, blk.ln2_gamma);
        let ln2b = g.param(store, blk.ln2_beta);
        let bn = g.layer_norm(u, ln2g, ln2b)?;
        let ffn = FfnNodes {
            w1: g.param(store, blk.w1),
            b1: g.param(store, blk.b1),
            w2: g.param(store, blk.w2),
            b2: g.param(store, blk.b2),
            activation: config.activation,
        };
        let mut f = ffn_graph(g, bn, &ffn)?;
        if let Some(delta) = tuning.ffn_delta(g, store, l, bn)? {
            f = g.add(f, delta)?;
        }
        let mut y = g.add(u, f)?;
        if let Some(delta) = tuning.block_delta(g, store, l, x_in)? {
            y = g.add(y, delta)?;
        }
        trace.layers.push([a, m, bn, f, y]);
        h = y;
    }

    let ng = g.param(store, layout.norm_gamma);
    let nb = g.param(store, layout.norm_beta);
    let hn = g.layer_norm(h, ng, nb)?;
    let features = if config.class_token {
        let c = g.slice(hn, 1, 0, 1)?;
        g.reshape(c, &[b, config.width])?
    } else {
        g.mean(hn, 1)?
    };
    Ok(Encoded { features, trace })
}

pub fn head_graph(
    g: &mut Graph,
    layout: &BackboneLayout,
    store: &ParamStore,
    features: NodeId,
) -> Result<NodeId> {
    let hw = g.param(store, layout.head_w);
    let hb = g.param(store, layout.head_b);
    let logits = g.matmul(features, hw)?;
    g.add(logits, hb)
}

/// Full classifier forward; returns logits `[B, C]`.
pub fn forward_graph(
    g: &mut Graph,
    config: &BackboneConfig,
    layout: &BackboneLayout,
    store: &ParamStore,
    x: NodeId,
    tuning: &dyn SiteTuning,
) -> Result<(NodeId, SiteTrace)> {
    let enc = encode_graph(g, config, layout, store, x, tuning)?;
    let logits = head_graph(g, layout, store, enc.features)?;
    Ok((logits, enc.trace))
}

/// Frozen-able transformer classifier with named parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
    pub layout: BackboneLayout,
}

impl Backbone {
    /// Random initialisation; every parameter starts trainable.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in config.param_plan() {
            let value = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".beta")
                || name.ends_with("bias")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
            {
                Tensor::zeros(&shape)
            } else if name == "pos_embed" || name == "cls_token" {
                Tensor::randn(&shape, 0.02, &mut rng)
            } else {
                Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            };
            params.add(name, value, true)?;
        }
        let layout = BackboneLayout::resolve(&config, &params)?;
        Ok(Backbone {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a backbone from stored tensors (e.g. a checkpoint).
    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = BackboneLayout::resolve(&config, &params)?;
        Ok(Backbone {
            config,
            params,
            layout,
        })
    }

    /// Marks every parameter except the classifier head as frozen.
    pub fn freeze(&mut self) {
        for (_, v) in self.params.iter_mut() {
            v.trainable = is_head_param(&v.name);
        }
    }

    pub fn unfreeze(&mut self) {
        self.params.set_all_trainable(true);
    }

    /// Replaces the classifier head with zeros (new downstream label space).
    pub fn reset_head(&mut self) {
        for id in [self.layout.head_w, self.layout.head_b] {
            self.params.get_mut(id).value.fill(0.0);
        }
    }

    pub fn block_weights(&self, layer: usize) -> Result<BlockWeights> {
        let blk = self
            .layout
            .blocks
            .get(layer)
            .ok_or_else(|| Error::Contract(format!("no block {layer}")))?;
        let v = |id: ParamId| self.params.get(id).value.clone();
        Ok(BlockWeights {
            ln1_gamma: v(blk.ln1_gamma),
            ln1_beta: v(blk.ln1_beta),
            attn: AttentionProjections::new(
                v(blk.w_q),
                v(blk.w_k),
                v(blk.w_v),
                v(blk.w_o),
                self.config.heads,
            )?,
            ln2_gamma: v(blk.ln2_gamma),
            ln2_beta: v(blk.ln2_beta),
            ffn: FfnWeights {
                w1: v(blk.w1),
                b1: v(blk.b1),
                w2: v(blk.w2),
                b2: v(blk.b2),
                activation: self.config.activation,
            },
        })
    }

    /// Logits `[B, C]` for a batch `[B, T, d_in]`.
    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (logits, _) = forward_graph(
            &mut g,
            &self.config,
            &self.layout,
            &self.params,
            xn,
            &NoTuning,
        )?;
        Ok(g.value(logits).clone())
    }

    /// Logits `[C]` for one sample `[T, d_in]`.
    pub fn forward_classify(&self, tokens: &Tensor) -> Result<Tensor> {
        let (xb, _) = batched(tokens)?;
        let logits = self.forward_batch(&xb)?;
        logits.reshape(&[self.config.classes])
    }
}

/// Freezes everything but the classifier head.
pub fn freeze_backbone(backbone: &mut Backbone) {
    backbone.freeze();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::desk().validate().is_ok());
        let mut bad = BackboneConfig::desk();
        bad.heads = 5;
        assert!(bad.validate().is_err());
        bad = BackboneConfig::desk();
        bad.ffn_width = 32;
        assert!(bad.validate().is_err());
        bad = BackboneConfig::desk();
        bad.layers = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = AttentionProjections::random(8, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let out = multi_head_attention(&x, &proj).unwrap();
        let expect =
            crate::tensor::matmul(&crate::tensor::matmul(&x, &proj.w_v).unwrap(), &proj.w_o)
                .unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn zero_query_key_gives_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut proj = AttentionProjections::random(8, 2, &mut rng).unwrap();
        proj.w_q.fill(0.0);
        proj.w_k.fill(0.0);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let w = attention_weights(&x, &proj).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let v = crate::tensor::matmul(&x, &proj.w_v).unwrap();
        let mut mean = Tensor::zeros(&[1, 8]);
        for t in 0..4 {
            for c in 0..8 {
                mean.data_mut()[c] += v.get(&[t, c]) / 4.0;
            }
        }
        let pooled = crate::tensor::matmul(&mean, &proj.w_o).unwrap();
        let out = multi_head_attention(&x, &proj).unwrap();
        for t in 0..4 {
            for c in 0..8 {
                assert!((out.get(&[t, c]) - pooled.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffn_zero_and_identity() {
        let x = Tensor::new(&[2, 3], vec![0.5, 1.0, 2.0, 0.0, 3.0, 0.25]).unwrap();
        let zero = FfnWeights {
            w1: Tensor::zeros(&[3, 3]),
            b1: Tensor::zeros(&[3]),
            w2: Tensor::zeros(&[3, 3]),
            b2: Tensor::zeros(&[3]),
            activation: Activation::Gelu,
        };
        assert!(feed_forward(&x, &zero)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let ident = FfnWeights {
            w1: Tensor::eye(3),
            b1: Tensor::zeros(&[3]),
            w2: Tensor::eye(3),
            b2: Tensor::zeros(&[3]),
            activation: Activation::Relu,
        };
        assert_eq!(feed_forward(&x, &ident).unwrap(), x);
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proj = AttentionProjections::random(8, 2, &mut rng).unwrap();
        let x = Tensor::zeros(&[3, 6]);
        assert!(matches!(
            multi_head_attention(&x, &proj),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn freeze_leaves_only_head() {
        let mut bb = Backbone::new(BackboneConfig::desk(), 0).unwrap();
        bb.freeze();
        let c = &bb.config;
        assert_eq!(bb.params.count_trainable(), c.width * c.classes + c.classes);
        assert!(bb
            .params
            .trainable_names()
            .iter()
            .all(|n| n.starts_with("head.")));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut bb = Backbone::new(BackboneConfig::tiny(), 4).unwrap();
        bb.reset_head();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let logits = bb.forward_classify(&x).unwrap();
        assert_eq!(logits.shape(), &[3]);
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_token_variant_runs() {
        let mut cfg = BackboneConfig::tiny();
        cfg.class_token = true;
        let bb = Backbone::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 5], 1.0, &mut rng);
        assert_eq!(bb.forward_batch(&x).unwrap().shape(), &[2, 3]);
    }
}
