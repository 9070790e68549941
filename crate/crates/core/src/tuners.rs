//! Prefix, prompt and adapter tuners in original and parallel form, the
//! softmax-mass gates that relate the two, and the scaling strategies.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::backbone::{
    activate, attend, merge_heads, mha_graph, project_heads, Activation, AttentionProjections,
    AttnNodes, MhaCache,
};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// How the λ/β gates are evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateMode {
    #[default]
    Exact,
    /// λ = 0: the tuner branch is dropped.
    ForceZero,
    /// Each exponential group uses its own max. Wrong on purpose.
    Broken,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTuner {
    kv: Option<(Tensor, Tensor)>,
}

impl PrefixTuner {
    /// `k_pre`, `v_pre`: `[h, m, d_h]`.
    pub fn new(k_pre: Tensor, v_pre: Tensor) -> Result<Self> {
        if k_pre.ndim() != 3 || k_pre.shape() != v_pre.shape() {
            return Err(Error::dim(
                "prefix",
                format!(
                    "K_pre {:?} and V_pre {:?} must both be [h, m, d_h]",
                    k_pre.shape(),
                    v_pre.shape()
                ),
            ));
        }
        Ok(PrefixTuner {
            kv: Some((k_pre, v_pre)),
        })
    }

    pub fn empty() -> Self {
        PrefixTuner { kv: None }
    }

    pub fn random(
        heads: usize,
        len: usize,
        head_dim: usize,
        std: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        if len == 0 {
            return Self::empty();
        }
        let k = Tensor::randn(&[heads, len, head_dim], std, rng);
        let v = Tensor::randn(&[heads, len, head_dim], std, rng);
        PrefixTuner { kv: Some((k, v)) }
    }

    pub fn len(&self) -> usize {
        self.kv.as_ref().map_or(0, |(k, _)| k.shape()[1])
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_none()
    }

    pub fn k_pre(&self) -> Option<&Tensor> {
        self.kv.as_ref().map(|(k, _)| k)
    }

    pub fn v_pre(&self) -> Option<&Tensor> {
        self.kv.as_ref().map(|(_, v)| v)
    }

    fn check(&self, proj: &AttentionProjections) -> Result<()> {
        if let Some((k, _)) = &self.kv {
            let want = [proj.heads, k.shape()[1], proj.head_dim()];
            if k.shape() != want {
                return Err(Error::dim(
                    "prefix",
                    format!(
                        "K_pre has shape {:?}, attention expects {want:?}",
                        k.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTuner {
    x_pro: Option<Tensor>,
}

impl PromptTuner {
    /// `x_pro`: `[n, d]`.
    pub fn new(x_pro: Tensor) -> Result<Self> {
        if x_pro.ndim() != 2 {
            return Err(Error::dim(
                "prompt",
                format!("x_pro must be [n, d], got {:?}", x_pro.shape()),
            ));
        }
        Ok(PromptTuner { x_pro: Some(x_pro) })
    }

    pub fn empty() -> Self {
        PromptTuner { x_pro: None }
    }

    pub fn random(len: usize, width: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        if len == 0 {
            return Self::empty();
        }
        PromptTuner {
            x_pro: Some(Tensor::randn(&[len, width], std, rng)),
        }
    }

    pub fn len(&self) -> usize {
        self.x_pro.as_ref().map_or(0, |x| x.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.x_pro.is_none()
    }

    pub fn x_pro(&self) -> Option<&Tensor> {
        self.x_pro.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterTuner {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub b_down: Option<Tensor>,
    pub b_up: Option<Tensor>,
    pub activation: Activation,
}

impl AdapterTuner {
    pub fn new(w_down: Tensor, w_up: Tensor, activation: Activation) -> Result<Self> {
        let t = AdapterTuner {
            w_down,
            w_up,
            b_down: None,
            b_up: None,
            activation,
        };
        t.check()?;
        Ok(t)
    }

    /// Uniform(±1/√d) down-projection, zero up-projection.
    pub fn init(width: usize, bottleneck: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        Self::new(
            Tensor::uniform(&[width, bottleneck], bound, rng),
            Tensor::zeros(&[bottleneck, width]),
            Activation::Gelu,
        )
    }

    pub fn width(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.shape()[1]
    }

    fn check(&self) -> Result<()> {
        let [d, r] = *self.w_down.shape() else {
            return Err(Error::dim(
                "adapter",
                format!("W_down must be [d, r], got {:?}", self.w_down.shape()),
            ));
        };
        if self.w_up.shape() != [r, d] {
            return Err(Error::dim(
                "adapter",
                format!(
                    "W_up has shape {:?}, expected [{r}, {d}]",
                    self.w_up.shape()
                ),
            ));
        }
        if self.b_down.as_ref().is_some_and(|b| b.shape() != [r])
            || self.b_up.as_ref().is_some_and(|b| b.shape() != [d])
        {
            return Err(Error::dim("adapter", "bias shapes must be [r] and [d]"));
        }
        Ok(())
    }
}

/// Per-query gates: `lambda` is `[h, T_q]`; `beta` (prompt branch) is `[h, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateVector {
    pub lambda: Tensor,
    pub beta: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    Direct,
    Scalar,
    #[default]
    ChannelWise,
    InputDependent,
}

impl ScalingKind {
    pub const ALL: [ScalingKind; 4] = [
        ScalingKind::Direct,
        ScalingKind::Scalar,
        ScalingKind::ChannelWise,
        ScalingKind::InputDependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScalingKind::Direct => "direct",
            ScalingKind::Scalar => "scalar",
            ScalingKind::ChannelWise => "channel_wise",
            ScalingKind::InputDependent => "input_dependent",
        }
    }

    /// Hidden width of the input-dependent gate MLP.
    pub fn gate_hidden(width: usize) -> usize {
        (width / 4).max(1)
    }
}

/// Scaling with concrete parameter values.
#[derive(Clone, Debug, PartialEq)]
pub enum ScalingStrategy {
    Direct,
    Scalar(f64),
    ChannelWise(Tensor),
    /// `sigmoid(relu(x W₁ + b₁) W₂ + b₂)`; W₁ `[d, d/4]`, W₂ `[d/4, d]`.
    InputDependent {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
}

impl ScalingStrategy {
    pub fn kind(&self) -> ScalingKind {
        match self {
            ScalingStrategy::Direct => ScalingKind::Direct,
            ScalingStrategy::Scalar(_) => ScalingKind::Scalar,
            ScalingStrategy::ChannelWise(_) => ScalingKind::ChannelWise,
            ScalingStrategy::InputDependent { .. } => ScalingKind::InputDependent,
        }
    }
}

// ---------------------------------------------------------------------------
// Graph builders
// ---------------------------------------------------------------------------

/// Scaled logits `q kᵀ · scale`.
pub fn scores(g: &mut Graph, q: NodeId, k: NodeId, scale: f64) -> Result<NodeId> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    g.scale(s, scale)
}

/// λ = mass(extra) / (mass(orig) + mass(extra)) per row; `None` for ForceZero.
pub fn gate_graph(
    g: &mut Graph,
    orig: NodeId,
    extra: NodeId,
    mode: GateMode,
) -> Result<Option<NodeId>> {
    match mode {
        GateMode::Exact => g.gate(orig, extra).map(Some),
        GateMode::Broken => g.gate_unshared(orig, extra).map(Some),
        GateMode::ForceZero => Ok(None),
    }
}

/// `λ ⊙ (a_extra − a)`, i.e. the change from `a` to `(1−λ)a + λ a_extra`.
pub fn gated_delta(g: &mut Graph, lambda: NodeId, a: NodeId, a_extra: NodeId) -> Result<NodeId> {
    let diff = g.sub(a_extra, a)?;
    g.mul(lambda, diff)
}

/// `(1−λ) a + λ a_extra`.
pub fn gated_mix(g: &mut Graph, lambda: NodeId, a: NodeId, a_extra: NodeId) -> Result<NodeId> {
    let keep = g.affine(lambda, -1.0, 1.0)?;
    let l = g.mul(keep, a)?;
    let r = g.mul(lambda, a_extra)?;
    g.add(l, r)
}

/// Per-head `[h, n, d_h]` projection of an unbatched sequence `[n, d]`.
pub fn project_heads_unbatched(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    heads: usize,
) -> Result<NodeId> {
    let p = g.matmul(x, w)?;
    let [n, d] = *g.shape(p) else {
        return Err(Error::dim(
            "project",
            format!("expected [n, d], got {:?}", g.shape(p)),
        ));
    };
    let r = g.reshape(p, &[n, heads, d / heads])?;
    g.permute(r, &[1, 0, 2])
}

/// Per-head change `λ ⊙ (Attn(Q,K_pre,V_pre) − Attn(Q,K,V))`, `[B, h, T, d_h]`.
/// `k_pre`, `v_pre` are `[h, m, d_h]` (broadcast over the batch).
pub fn prefix_delta_heads(
    g: &mut Graph,
    cache: &MhaCache,
    k_pre: NodeId,
    v_pre: NodeId,
    mode: GateMode,
) -> Result<Option<NodeId>> {
    let orig = scores(g, cache.q, cache.k, cache.scale)?;
    let extra = scores(g, cache.q, k_pre, cache.scale)?;
    let Some(lambda) = gate_graph(g, orig, extra, mode)? else {
        return Ok(None);
    };
    let (a_pre, _) = attend(g, cache.q, k_pre, v_pre, cache.scale)?;
    gated_delta(g, lambda, cache.heads_out, a_pre).map(Some)
}

/// Per-head change on the token rows from attending to prompt keys/values
/// (`[h, n, d_h]`, already projected).
pub fn prompt_delta_heads(
    g: &mut Graph,
    cache: &MhaCache,
    k_pro: NodeId,
    v_pro: NodeId,
    mode: GateMode,
) -> Result<Option<NodeId>> {
    prefix_delta_heads(g, cache, k_pro, v_pro, mode)
}

/// Parallel prefix attention on a batch `[B, T, d]`.
pub fn prefix_parallel_graph(
    g: &mut Graph,
    x: NodeId,
    attn: &AttnNodes,
    kv: Option<(NodeId, NodeId)>,
    mode: GateMode,
) -> Result<NodeId> {
    let (out, cache) = mha_graph(g, x, attn)?;
    let Some((k_pre, v_pre)) = kv else {
        return Ok(out);
    };
    let orig = scores(g, cache.q, cache.k, cache.scale)?;
    let extra = scores(g, cache.q, k_pre, cache.scale)?;
    let Some(lambda) = gate_graph(g, orig, extra, mode)? else {
        return Ok(out);
    };
    let (a_pre, _) = attend(g, cache.q, k_pre, v_pre, cache.scale)?;
    let mixed = gated_mix(g, lambda, cache.heads_out, a_pre)?;
    let merged = merge_heads(g, mixed)?;
    g.matmul(merged, attn.w_o)
}

/// Original prefix attention: prefix rows concatenated ahead of the keys and values.
pub fn prefix_original_graph(
    g: &mut Graph,
    x: NodeId,
    attn: &AttnNodes,
    kv: Option<(NodeId, NodeId)>,
) -> Result<NodeId> {
    let Some((k_pre, v_pre)) = kv else {
        return mha_graph(g, x, attn).map(|(o, _)| o);
    };
    let b = g.shape(x)[0];
    let d = g.shape(attn.w_q)[0];
    let scale = 1.0 / ((d / attn.heads) as f64).sqrt();
    let q = project_heads(g, x, attn.w_q, attn.heads)?;
    let k = project_heads(g, x, attn.w_k, attn.heads)?;
    let v = project_heads(g, x, attn.w_v, attn.heads)?;
    let kp = g.expand(k_pre, &[b])?;
    let vp = g.expand(v_pre, &[b])?;
    let k_all = g.concat(&[kp, k], 2)?;
    let v_all = g.concat(&[vp, v], 2)?;
    let (heads, _) = attend(g, q, k_all, v_all, scale)?;
    let merged = merge_heads(g, heads)?;
    g.matmul(merged, attn.w_o)
}

/// Original prompt attention over `[x; x_pro]`; `x_pro` is `[n, d]`.
pub fn prompt_original_graph(
    g: &mut Graph,
    x: NodeId,
    attn: &AttnNodes,
    x_pro: Option<NodeId>,
    discard: bool,
) -> Result<NodeId> {
    let Some(p) = x_pro else {
        return mha_graph(g, x, attn).map(|(o, _)| o);
    };
    let [b, t, _] = *g.shape(x) else {
        return Err(Error::dim(
            "prompt",
            format!("expected [B, T, d], got {:?}", g.shape(x)),
        ));
    };
    let pb = g.expand(p, &[b])?;
    let joint = g.concat(&[x, pb], 1)?;
    let (out, _) = mha_graph(g, joint, attn)?;
    if discard {
        g.slice(out, 1, 0, t)
    } else {
        Ok(out)
    }
}

/// Parallel prompt attention. Token rows mix with gate λ, prompt rows with β.
pub fn prompt_parallel_graph(
    g: &mut Graph,
    x: NodeId,
    attn: &AttnNodes,
    x_pro: Option<NodeId>,
    discard: bool,
    mode: GateMode,
) -> Result<NodeId> {
    let (out, cache) = mha_graph(g, x, attn)?;
    let Some(p) = x_pro else {
        return Ok(out);
    };
    let q_pro = project_heads_unbatched(g, p, attn.w_q, attn.heads)?;
    let k_pro = project_heads_unbatched(g, p, attn.w_k, attn.heads)?;
    let v_pro = project_heads_unbatched(g, p, attn.w_v, attn.heads)?;
    let s = cache.scale;

    let orig = scores(g, cache.q, cache.k, s)?;
    let extra = scores(g, cache.q, k_pro, s)?;
    let tokens = match gate_graph(g, orig, extra, mode)? {
        Some(lambda) => {
            let (a_pro, _) = attend(g, cache.q, k_pro, v_pro, s)?;
            gated_mix(g, lambda, cache.heads_out, a_pro)?
        }
        None => cache.heads_out,
    };
    let heads = if discard {
        tokens
    } else {
        let b = g.shape(x)[0];
        let qp = g.expand(q_pro, &[b])?;
        let kp = g.expand(k_pro, &[b])?;
        let vp = g.expand(v_pro, &[b])?;
        let (self_pro, _) = attend(g, qp, kp, vp, s)?;
        let own = scores(g, qp, kp, s)?;
        let cross = scores(g, qp, cache.k, s)?;
        let prompts = match gate_graph(g, own, cross, mode)? {
            Some(beta) => {
                let (a_tok, _) = attend(g, qp, cache.k, cache.v, s)?;
                gated_mix(g, beta, self_pro, a_tok)?
            }
            None => self_pro,
        };
        g.concat(&[tokens, prompts], 2)?
    };
    let merged = merge_heads(g, heads)?;
    g.matmul(merged, attn.w_o)
}

/// Nodes of an adapter bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct AdapterNodes {
    pub w_down: NodeId,
    pub w_up: NodeId,
    pub b_down: Option<NodeId>,
    pub b_up: Option<NodeId>,
    pub activation: Activation,
}

/// `φ(x W_down + b_down) W_up + b_up`.
pub fn adapter_graph(g: &mut Graph, x: NodeId, a: &AdapterNodes) -> Result<NodeId> {
    let mut h = g.matmul(x, a.w_down)?;
    if let Some(b) = a.b_down {
        h = g.add(h, b)?;
    }
    h = activate(g, h, a.activation)?;
    let mut o = g.matmul(h, a.w_up)?;
    if let Some(b) = a.b_up {
        o = g.add(o, b)?;
    }
    Ok(o)
}

/// Bound parameters of a scaling strategy.
#[derive(Clone, Copy, Debug)]
pub enum ScalingNodes {
    Direct,
    Scalar(NodeId),
    ChannelWise(NodeId),
    InputDependent {
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    },
}

/// Scales `delta` by the strategy; input-dependent gates read `x`.
pub fn scaling_graph(g: &mut Graph, delta: NodeId, s: &ScalingNodes, x: NodeId) -> Result<NodeId> {
    match *s {
        ScalingNodes::Direct => Ok(delta),
        ScalingNodes::Scalar(v) | ScalingNodes::ChannelWise(v) => g.mul(delta, v),
        ScalingNodes::InputDependent { w1, b1, w2, b2 } => {
            let h = g.matmul(x, w1)?;
            let h = g.add(h, b1)?;
            let h = g.relu(h)?;
            let o = g.matmul(h, w2)?;
            let o = g.add(o, b2)?;
            let gate = g.sigmoid(o)?;
            g.mul(gate, delta)
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor-level API
// ---------------------------------------------------------------------------

fn batched(x: &Tensor, op: &'static str) -> Result<(Tensor, bool)> {
    match x.ndim() {
        2 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.reshape(&s)?, true))
        }
        3 => Ok((x.clone(), false)),
        _ => Err(Error::dim(
            op,
            format!("expected [T, d] or [B, T, d], got {:?}", x.shape()),
        )),
    }
}

fn finish(g: &Graph, out: NodeId, squeeze: bool) -> Result<Tensor> {
    let v = g.value(out);
    if squeeze {
        v.reshape(&v.shape()[1..])
    } else {
        Ok(v.clone())
    }
}

fn bind_prefix(g: &mut Graph, t: &PrefixTuner) -> Option<(NodeId, NodeId)> {
    t.kv.as_ref()
        .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
}

pub fn prefix_original(
    x: &Tensor,
    proj: &AttentionProjections,
    tuner: &PrefixTuner,
) -> Result<Tensor> {
    tuner.check(proj)?;
    let (xb, squeeze) = batched(x, "prefix_original")?;
    let mut g = Graph::new();
    let attn = proj.bind(&mut g);
    let kv = bind_prefix(&mut g, tuner);
    let xn = g.constant(xb);
    let out = prefix_original_graph(&mut g, xn, &attn, kv)?;
    finish(&g, out, squeeze)
}

pub fn prefix_parallel(
    x: &Tensor,
    proj: &AttentionProjections,
    tuner: &PrefixTuner,
    mode: GateMode,
) -> Result<Tensor> {
    tuner.check(proj)?;
    let (xb, squeeze) = batched(x, "prefix_parallel")?;
    let mut g = Graph::new();
    let attn = proj.bind(&mut g);
    let kv = bind_prefix(&mut g, tuner);
    let xn = g.constant(xb);
    let out = prefix_parallel_graph(&mut g, xn, &attn, kv, mode)?;
    finish(&g, out, squeeze)
}

fn check_prompt(tuner: &PromptTuner, proj: &AttentionProjections) -> Result<()> {
    if let Some(p) = tuner.x_pro() {
        if p.shape()[1] != proj.width() {
            return Err(Error::dim(
                "prompt",
                format!(
                    "x_pro has shape {:?}, attention width is {}",
                    p.shape(),
                    proj.width()
                ),
            ));
        }
    }
    Ok(())
}

pub fn prompt_original(
    x: &Tensor,
    proj: &AttentionProjections,
    tuner: &PromptTuner,
    discard_prompts: bool,
) -> Result<Tensor> {
    check_prompt(tuner, proj)?;
    let (xb, squeeze) = batched(x, "prompt_original")?;
    let mut g = Graph::new();
    let attn = proj.bind(&mut g);
    let p = tuner.x_pro().map(|p| g.constant(p.clone()));
    let xn = g.constant(xb);
    let out = prompt_original_graph(&mut g, xn, &attn, p, discard_prompts)?;
    finish(&g, out, squeeze)
}

pub fn prompt_parallel(
    x: &Tensor,
    proj: &AttentionProjections,
    tuner: &PromptTuner,
    discard_prompts: bool,
    mode: GateMode,
) -> Result<Tensor> {
    check_prompt(tuner, proj)?;
    let (xb, squeeze) = batched(x, "prompt_parallel")?;
    let mut g = Graph::new();
    let attn = proj.bind(&mut g);
    let p = tuner.x_pro().map(|p| g.constant(p.clone()));
    let xn = g.constant(xb);
    let out = prompt_parallel_graph(&mut g, xn, &attn, p, discard_prompts, mode)?;
    finish(&g, out, squeeze)
}

fn bind_adapter(g: &mut Graph, t: &AdapterTuner) -> AdapterNodes {
    AdapterNodes {
        w_down: g.constant(t.w_down.clone()),
        w_up: g.constant(t.w_up.clone()),
        b_down: t.b_down.as_ref().map(|b| g.constant(b.clone())),
        b_up: t.b_up.as_ref().map(|b| g.constant(b.clone())),
        activation: t.activation,
    }
}

fn adapter_width_check(x: &Tensor, t: &AdapterTuner, op: &'static str) -> Result<()> {
    t.check()?;
    if x.shape().last() != Some(&t.width()) {
        return Err(Error::dim(
            op,
            format!("input {:?} does not end in width {}", x.shape(), t.width()),
        ));
    }
    Ok(())
}

/// Delta only: `φ(x W_down) W_up`.
pub fn adapter_parallel(x: &Tensor, tuner: &AdapterTuner) -> Result<Tensor> {
    adapter_width_check(x, tuner, "adapter_parallel")?;
    let mut g = Graph::new();
    let a = bind_adapter(&mut g, tuner);
    let xn = g.constant(x.clone());
    let out = adapter_graph(&mut g, xn, &a)?;
    Ok(g.value(out).clone())
}

/// `ffn_out + φ(ffn_out W_down) W_up`.
pub fn adapter_sequential(ffn_out: &Tensor, tuner: &AdapterTuner) -> Result<Tensor> {
    adapter_width_check(ffn_out, tuner, "adapter_sequential")?;
    let mut g = Graph::new();
    let a = bind_adapter(&mut g, tuner);
    let xn = g.constant(ffn_out.clone());
    let delta = adapter_graph(&mut g, xn, &a)?;
    let out = g.add(xn, delta)?;
    Ok(g.value(out).clone())
}

pub fn apply_scaling(delta: &Tensor, strategy: &ScalingStrategy, x: &Tensor) -> Result<Tensor> {
    delta.expect_same_shape(x, "apply_scaling")?;
    let mut g = Graph::new();
    let d = g.constant(delta.clone());
    let xn = g.constant(x.clone());
    let nodes = match strategy {
        ScalingStrategy::Direct => ScalingNodes::Direct,
        ScalingStrategy::Scalar(s) => {
            ScalingNodes::Scalar(g.constant(Tensor::new(&[1], vec![*s])?))
        }
        ScalingStrategy::ChannelWise(s) => {
            if s.shape() != [*delta.shape().last().unwrap()] {
                return Err(Error::dim(
                    "apply_scaling",
                    format!(
                        "scale {:?} does not match delta {:?}",
                        s.shape(),
                        delta.shape()
                    ),
                ));
            }
            ScalingNodes::ChannelWise(g.constant(s.clone()))
        }
        ScalingStrategy::InputDependent { w1, b1, w2, b2 } => ScalingNodes::InputDependent {
            w1: g.constant(w1.clone()),
            b1: g.constant(b1.clone()),
            w2: g.constant(w2.clone()),
            b2: g.constant(b2.clone()),
        },
    };
    let out = scaling_graph(&mut g, d, &nodes, xn)?;
    Ok(g.value(out).clone())
}

/// Per-head projections `[h, T, d_h]` of an unbatched sequence.
pub fn heads_of(x: &Tensor, w: &Tensor, heads: usize) -> Result<Tensor> {
    let p = tensor::matmul(x, w)?;
    let [t, d] = *p.shape() else {
        return Err(Error::dim(
            "heads_of",
            format!("expected [T, d], got {:?}", p.shape()),
        ));
    };
    tensor::permute(&p.reshape(&[t, heads, d / heads])?, &[1, 0, 2])
}

/// λ per head and query: `[h, T_q]`. `q`, `k` are `[h, T, d_h]`, `k_pre` is
/// `[h, m, d_h]` (or `None` for m = 0). Logits are scaled by `1/√d_h`.
pub fn compute_lambda_gate(q: &Tensor, k: &Tensor, k_pre: Option<&Tensor>) -> Result<GateVector> {
    let [h, tq, dh] = *q.shape() else {
        return Err(Error::dim(
            "lambda_gate",
            format!("Q must be [h, T, d_h], got {:?}", q.shape()),
        ));
    };
    let Some(kp) = k_pre else {
        return Ok(GateVector {
            lambda: Tensor::zeros(&[h, tq]),
            beta: None,
        });
    };
    let scale = 1.0 / (dh as f64).sqrt();
    let orig = tensor::matmul(q, &tensor::permute(k, &[0, 2, 1])?)?.scale(scale);
    let extra = tensor::matmul(q, &tensor::permute(kp, &[0, 2, 1])?)?.scale(scale);
    let (lambda, _, _) = tensor::gate_rows(&orig, &extra, true)?;
    Ok(GateVector {
        lambda: lambda.reshape(&[h, tq])?,
        beta: None,
    })
}

/// λ for token queries and β for prompt queries of a prompt tuner.
pub fn compute_prompt_gates(
    x: &Tensor,
    proj: &AttentionProjections,
    tuner: &PromptTuner,
) -> Result<GateVector> {
    check_prompt(tuner, proj)?;
    let h = proj.heads;
    let q = heads_of(x, &proj.w_q, h)?;
    let k = heads_of(x, &proj.w_k, h)?;
    let Some(p) = tuner.x_pro() else {
        return compute_lambda_gate(&q, &k, None);
    };
    let q_pro = heads_of(p, &proj.w_q, h)?;
    let k_pro = heads_of(p, &proj.w_k, h)?;
    let mut gates = compute_lambda_gate(&q, &k, Some(&k_pro))?;
    // β = mass on token keys relative to all keys, for prompt queries.
    let beta = compute_lambda_gate(&q_pro, &k_pro, Some(&k))?.lambda;
    gates.beta = Some(beta);
    Ok(gates)
}

/// Rebuilds the joint softmax rows over `[K; K_extra]` from the two separate
/// softmaxes and λ: `[(1−λ)·softmax(orig), λ·softmax(extra)]`, shape `[h, T_q, n+m]`.
pub fn gated_softmax_rows(q: &Tensor, k: &Tensor, k_extra: &Tensor) -> Result<Tensor> {
    let dh = q.shape()[2];
    let scale = 1.0 / (dh as f64).sqrt();
    let orig = tensor::matmul(q, &tensor::permute(k, &[0, 2, 1])?)?.scale(scale);
    let extra = tensor::matmul(q, &tensor::permute(k_extra, &[0, 2, 1])?)?.scale(scale);
    let (lambda, _, _) = tensor::gate_rows(&orig, &extra, true)?;
    let so = tensor::softmax(&orig, 2)?;
    let se = tensor::softmax(&extra, 2)?;
    let keep = lambda.map(|l| 1.0 - l);
    tensor::concat(&[&so.mul(&keep)?, &se.mul(&lambda)?], 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Per-head loop over explicit key/value rows; no graph, no batching.
    fn naive_attention_rows(
        q: &[Vec<f64>],
        k: &[Vec<f64>],
        v: &[Vec<f64>],
        scale: f64,
    ) -> Vec<Vec<f64>> {
        q.iter()
            .map(|qi| {
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                    .collect();
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut out = vec![0.0; v[0].len()];
                for (w, vj) in e.iter().zip(v) {
                    for (o, x) in out.iter_mut().zip(vj) {
                        *o += w / z * x;
                    }
                }
                out
            })
            .collect()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let c = *t.shape().last().unwrap();
        t.data().chunks(c).map(<[f64]>::to_vec).collect()
    }

    fn head_rows(t: &Tensor, head: usize) -> Vec<Vec<f64>> {
        let [_, n, dh] = *t.shape() else {
            unreachable!()
        };
        rows(
            &Tensor::new(
                &[n, dh],
                t.data()[head * n * dh..(head + 1) * n * dh].to_vec(),
            )
            .unwrap(),
        )
    }

    /// Prefix attention by concatenating prefix rows per head, then W_o.
    fn prefix_oracle(x: &Tensor, p: &AttentionProjections, t: &PrefixTuner) -> Tensor {
        let h = p.heads;
        let dh = p.head_dim();
        let (q, k, v) = (
            heads_of(x, &p.w_q, h).unwrap(),
            heads_of(x, &p.w_k, h).unwrap(),
            heads_of(x, &p.w_v, h).unwrap(),
        );
        let tn = x.shape()[0];
        let mut merged = vec![vec![0.0; p.width()]; tn];
        for head in 0..h {
            let mut ks = head_rows(t.k_pre().unwrap(), head);
            ks.extend(head_rows(&k, head));
            let mut vs = head_rows(t.v_pre().unwrap(), head);
            vs.extend(head_rows(&v, head));
            let o = naive_attention_rows(&head_rows(&q, head), &ks, &vs, 1.0 / (dh as f64).sqrt());
            for (i, r) in o.iter().enumerate() {
                merged[i][head * dh..(head + 1) * dh].copy_from_slice(r);
            }
        }
        let m = Tensor::from_rows(&merged).unwrap();
        tensor::matmul(&m, &p.w_o).unwrap()
    }

    #[test]
    fn prefix_original_matches_concat_oracle() {
        let mut r = rng(11);
        let p = AttentionProjections::random(8, 2, &mut r).unwrap();
        let t = PrefixTuner::random(2, 3, 4, 0.5, &mut r);
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let got = prefix_original(&x, &p, &t).unwrap();
        assert!(got.max_abs_diff(&prefix_oracle(&x, &p, &t)).unwrap() < 1e-12);
    }

    #[test]
    fn prefix_parallel_equals_original() {
        let mut r = rng(12);
        let p = AttentionProjections::random(16, 4, &mut r).unwrap();
        let t = PrefixTuner::random(4, 10, 4, 0.5, &mut r);
        let x = Tensor::randn(&[7, 16], 1.0, &mut r);
        let a = prefix_original(&x, &p, &t).unwrap();
        let b = prefix_parallel(&x, &p, &t, GateMode::Exact).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        let broken = prefix_parallel(&x, &p, &t, GateMode::Broken).unwrap();
        assert!(a.max_abs_diff(&broken).unwrap() > 1e-6);
    }

    #[test]
    fn empty_prefix_and_forced_gate_are_plain_mha() {
        let mut r = rng(13);
        let p = AttentionProjections::random(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let plain = crate::backbone::multi_head_attention(&x, &p).unwrap();
        let e = PrefixTuner::empty();
        assert_eq!(prefix_original(&x, &p, &e).unwrap(), plain);
        assert_eq!(prefix_parallel(&x, &p, &e, GateMode::Exact).unwrap(), plain);
        let t = PrefixTuner::random(2, 3, 4, 1.0, &mut r);
        assert_eq!(
            prefix_parallel(&x, &p, &t, GateMode::ForceZero).unwrap(),
            plain
        );
    }

    #[test]
    fn vanishing_prefix_mass() {
        let mut r = rng(14);
        let mut p = AttentionProjections::random(8, 2, &mut r).unwrap();
        // Constant positive queries so every prefix logit is hugely negative.
        p.w_q = Tensor::full(&[8, 8], 0.1);
        let x = Tensor::full(&[3, 8], 1.0);
        let t = PrefixTuner::new(
            Tensor::full(&[2, 2, 4], -1e6),
            Tensor::randn(&[2, 2, 4], 1.0, &mut r),
        )
        .unwrap();
        let plain = crate::backbone::multi_head_attention(&x, &p).unwrap();
        assert!(
            prefix_original(&x, &p, &t)
                .unwrap()
                .max_abs_diff(&plain)
                .unwrap()
                < 1e-9
        );
    }

    #[test]
    fn lambda_symmetric_case() {
        let q = Tensor::zeros(&[1, 2, 4]);
        let k = Tensor::ones(&[1, 3, 4]);
        let kp = Tensor::ones(&[1, 1, 4]);
        let g = compute_lambda_gate(&q, &k, Some(&kp)).unwrap();
        assert!(g.lambda.data().iter().all(|&l| (l - 0.25).abs() < 1e-15));
        let z = compute_lambda_gate(&q, &k, None).unwrap();
        assert!(z.lambda.data().iter().all(|&l| l == 0.0));
    }

    #[test]
    fn lambda_is_prefix_mass_of_joint_softmax() {
        let mut r = rng(15);
        let q = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let k = Tensor::randn(&[2, 5, 4], 1.0, &mut r);
        let kp = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let g = compute_lambda_gate(&q, &k, Some(&kp)).unwrap();
        for head in 0..2 {
            for (i, qi) in head_rows(&q, head).iter().enumerate() {
                let mut keys = head_rows(&k, head);
                keys.extend(head_rows(&kp, head));
                let logits: Vec<f64> = keys
                    .iter()
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                    .collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                let tail: f64 = logits[5..].iter().map(|l| l.exp()).sum::<f64>() / z;
                let l = g.lambda.get(&[head, i]);
                assert!((l - tail).abs() < 1e-12);
                assert!(l > 0.0 && l < 1.0);
            }
        }
    }

    #[test]
    fn gated_rows_rebuild_joint_softmax() {
        let mut r = rng(16);
        let q = Tensor::randn(&[2, 4, 4], 2.0, &mut r);
        let k = Tensor::randn(&[2, 4, 4], 2.0, &mut r);
        let kp = Tensor::randn(&[2, 6, 4], 2.0, &mut r);
        let rebuilt = gated_softmax_rows(&q, &k, &kp).unwrap();
        let joint_k = tensor::concat(&[&k, &kp], 1).unwrap();
        let logits = tensor::matmul(&q, &tensor::permute(&joint_k, &[0, 2, 1]).unwrap())
            .unwrap()
            .scale(0.5);
        let joint = tensor::softmax(&logits, 2).unwrap();
        assert!(rebuilt.max_abs_diff(&joint).unwrap() < 1e-12);
    }

    #[test]
    fn prompt_parallel_equals_original_both_modes() {
        let mut r = rng(17);
        let p = AttentionProjections::random(16, 2, &mut r).unwrap();
        let t = PromptTuner::random(4, 16, 0.5, &mut r);
        let x = Tensor::randn(&[6, 16], 1.0, &mut r);
        for discard in [true, false] {
            let a = prompt_original(&x, &p, &t, discard).unwrap();
            let b = prompt_parallel(&x, &p, &t, discard, GateMode::Exact).unwrap();
            assert_eq!(a.shape(), b.shape());
            assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
        }
        let full = prompt_original(&x, &p, &t, false).unwrap();
        let cut = prompt_original(&x, &p, &t, true).unwrap();
        assert_eq!(tensor::slice_axis(&full, 0, 0, 6).unwrap(), cut);
    }

    #[test]
    fn prompt_duplicate_token_matches_concat() {
        let mut r = rng(18);
        let p = AttentionProjections::random(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut r);
        let dup = tensor::slice_axis(&x, 0, 1, 1).unwrap();
        let t = PromptTuner::new(dup).unwrap();
        let joint = tensor::concat(&[&x, &tensor::slice_axis(&x, 0, 1, 1).unwrap()], 0).unwrap();
        let oracle = crate::backbone::multi_head_attention(&joint, &p).unwrap();
        let got = prompt_parallel(&x, &p, &t, false, GateMode::Exact).unwrap();
        assert!(got.max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn prompt_gates_symmetric() {
        // x == x_pro (same token set): both gates are n/(n+n) = 1/2.
        let mut r = rng(19);
        let p = AttentionProjections::random(8, 2, &mut r).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut r);
        let t = PromptTuner::new(x.clone()).unwrap();
        let g = compute_prompt_gates(&x, &p, &t).unwrap();
        assert!(g.lambda.data().iter().all(|&l| (l - 0.5).abs() < 1e-12));
        assert!(g
            .beta
            .unwrap()
            .data()
            .iter()
            .all(|&b| (b - 0.5).abs() < 1e-12));
    }

    #[test]
    fn adapter_identities() {
        let mut r = rng(20);
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let zero_up = AdapterTuner::init(8, 3, &mut r).unwrap();
        assert_eq!(adapter_sequential(&x, &zero_up).unwrap(), x);
        assert!(adapter_parallel(&x, &zero_up)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let zero_down = AdapterTuner::new(
            Tensor::zeros(&[8, 3]),
            Tensor::randn(&[3, 8], 1.0, &mut r),
            Activation::Gelu,
        )
        .unwrap();
        assert_eq!(adapter_sequential(&x, &zero_down).unwrap(), x);
    }

    #[test]
    fn adapter_matches_reference() {
        let mut r = rng(21);
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let a = AdapterTuner::new(
            Tensor::randn(&[8, 3], 1.0, &mut r),
            Tensor::randn(&[3, 8], 1.0, &mut r),
            Activation::Gelu,
        )
        .unwrap();
        let h = tensor::gelu(&tensor::matmul(&x, &a.w_down).unwrap());
        let expect = tensor::matmul(&h, &a.w_up).unwrap();
        assert!(
            adapter_parallel(&x, &a)
                .unwrap()
                .max_abs_diff(&expect)
                .unwrap()
                < 1e-12
        );
        assert_eq!(
            adapter_sequential(&x, &a).unwrap(),
            x.add(&adapter_parallel(&x, &a).unwrap()).unwrap()
        );
    }

    #[test]
    fn scaling_variants() {
        let mut r = rng(22);
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let d = Tensor::randn(&[3, 4], 1.0, &mut r);
        let direct = apply_scaling(&d, &ScalingStrategy::Direct, &x).unwrap();
        assert_eq!(direct, d);
        assert_eq!(
            apply_scaling(&d, &ScalingStrategy::ChannelWise(Tensor::ones(&[4])), &x).unwrap(),
            direct
        );
        assert!(apply_scaling(&d, &ScalingStrategy::Scalar(0.0), &x)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            apply_scaling(
                &d,
                &ScalingStrategy::ChannelWise(Tensor::full(&[4], 2.0)),
                &x
            )
            .unwrap(),
            d.scale(2.0)
        );
        let gate = ScalingStrategy::InputDependent {
            w1: Tensor::randn(&[4, 1], 0.02, &mut r),
            b1: Tensor::zeros(&[1]),
            w2: Tensor::zeros(&[1, 4]),
            b2: Tensor::zeros(&[4]),
        };
        assert!(
            apply_scaling(&d, &gate, &x)
                .unwrap()
                .max_abs_diff(&d.scale(0.5))
                .unwrap()
                < 1e-15
        );
    }
}
