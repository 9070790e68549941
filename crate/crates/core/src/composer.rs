//! Attaches parallel tuners to the MHA, FFN and block sites of a frozen
//! backbone: `x' = OP(x) + s · U(x)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, ParamId, ParamStore};
use crate::backbone::{
    self, attend, is_head_param, merge_heads, Activation, AttnNodes, Backbone, BackboneConfig,
    MhaCache, SiteTrace, SiteTuning,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tuners::{
    adapter_graph, prefix_delta_heads, project_heads_unbatched, scaling_graph, AdapterNodes,
    GateMode, ScalingKind, ScalingNodes,
};

/// Init std of prefix and prompt parameters.
pub const TOKEN_INIT_STD: f64 = 0.02;
pub const DEFAULT_DIM: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpSite {
    Mha,
    Ffn,
    Block,
}

impl OpSite {
    pub const ALL: [OpSite; 3] = [OpSite::Mha, OpSite::Ffn, OpSite::Block];

    pub fn name(self) -> &'static str {
        match self {
            OpSite::Mha => "mha",
            OpSite::Ffn => "ffn",
            OpSite::Block => "block",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerKind {
    #[serde(alias = "p_adapter")]
    Adapter,
    #[serde(alias = "p_prefix")]
    Prefix,
    #[serde(alias = "p_prompt")]
    Prompt,
}

impl TunerKind {
    pub const ALL: [TunerKind; 3] = [TunerKind::Adapter, TunerKind::Prefix, TunerKind::Prompt];

    pub fn name(self) -> &'static str {
        match self {
            TunerKind::Adapter => "adapter",
            TunerKind::Prefix => "prefix",
            TunerKind::Prompt => "prompt",
        }
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TunerSpec {
    pub site: OpSite,
    pub kind: TunerKind,
    /// Bottleneck r, prefix length m or prompt count n.
    pub dim: usize,
    #[serde(default)]
    pub scaling: ScalingKind,
    /// Adapter biases.
    #[serde(default, skip_serializing_if = "is_false")]
    pub bias: bool,
}

impl TunerSpec {
    pub fn new(site: OpSite, kind: TunerKind, dim: usize, scaling: ScalingKind) -> Self {
        TunerSpec {
            site,
            kind,
            dim,
            scaling,
            bias: false,
        }
    }
}

/// Which blocks receive tuners.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayerRangeRepr", into = "LayerRangeRepr")]
pub enum LayerRange {
    #[default]
    All,
    First(usize),
    List(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerRangeRepr {
    Word(String),
    First { first: usize },
    List(Vec<usize>),
}

impl TryFrom<LayerRangeRepr> for LayerRange {
    type Error = String;

    fn try_from(r: LayerRangeRepr) -> std::result::Result<Self, String> {
        match r {
            LayerRangeRepr::Word(w) if w == "all" => Ok(LayerRange::All),
            LayerRangeRepr::Word(w) => Err(format!(
                "expected \"all\", {{\"first\": k}} or a list of indices, got \"{w}\""
            )),
            LayerRangeRepr::First { first } => Ok(LayerRange::First(first)),
            LayerRangeRepr::List(v) => Ok(LayerRange::List(v)),
        }
    }
}

impl From<LayerRange> for LayerRangeRepr {
    fn from(r: LayerRange) -> Self {
        match r {
            LayerRange::All => LayerRangeRepr::Word("all".into()),
            LayerRange::First(k) => LayerRangeRepr::First { first: k },
            LayerRange::List(v) => LayerRangeRepr::List(v),
        }
    }
}

impl LayerRange {
    pub fn layers(&self, total: usize) -> Vec<usize> {
        match self {
            LayerRange::All => (0..total).collect(),
            LayerRange::First(k) => (0..(*k).min(total)).collect(),
            LayerRange::List(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UTuningConfig {
    #[serde(default)]
    pub layer_range: LayerRange,
    #[serde(default)]
    pub specs: Vec<TunerSpec>,
}

impl UTuningConfig {
    /// No tuners: linear probing.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn single(site: OpSite, kind: TunerKind) -> Self {
        UTuningConfig {
            layer_range: LayerRange::All,
            specs: vec![TunerSpec::new(
                site,
                kind,
                DEFAULT_DIM,
                ScalingKind::ChannelWise,
            )],
        }
    }

    pub fn dual(mha: TunerKind, ffn: TunerKind, scaling: ScalingKind) -> Self {
        UTuningConfig {
            layer_range: LayerRange::All,
            specs: vec![
                TunerSpec::new(OpSite::Mha, mha, DEFAULT_DIM, scaling),
                TunerSpec::new(OpSite::Ffn, ffn, DEFAULT_DIM, scaling),
            ],
        }
    }

    /// Dual adapter on MHA and FFN, channel-wise scaling, every layer.
    pub fn default_dual() -> Self {
        Self::dual(
            TunerKind::Adapter,
            TunerKind::Adapter,
            ScalingKind::ChannelWise,
        )
    }

    /// Deep prompts: `n` prompt tokens at every MHA, no scaling parameters.
    pub fn vpt_deep(n: usize) -> Self {
        UTuningConfig {
            layer_range: LayerRange::All,
            specs: vec![TunerSpec::new(
                OpSite::Mha,
                TunerKind::Prompt,
                n,
                ScalingKind::Direct,
            )],
        }
    }

    /// Same config with every spec's `dim` replaced.
    pub fn with_dim(mut self, dim: usize) -> Self {
        for s in &mut self.specs {
            s.dim = dim;
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self, backbone: &BackboneConfig) -> Result<()> {
        let l = backbone.layers;
        match &self.layer_range {
            LayerRange::All => {}
            LayerRange::First(k) => {
                if *k == 0 || *k > l {
                    return Err(Error::config(
                        "layer_range.first",
                        format!("{k} is outside 1..={l}"),
                    ));
                }
            }
            LayerRange::List(v) => {
                if v.is_empty() {
                    return Err(Error::config("layer_range", "empty layer list"));
                }
                for (i, &idx) in v.iter().enumerate() {
                    if idx >= l {
                        return Err(Error::config(
                            format!("layer_range[{i}]"),
                            format!("layer {idx} >= {l} layers"),
                        ));
                    }
                    if v[..i].contains(&idx) {
                        return Err(Error::config(
                            format!("layer_range[{i}]"),
                            format!("layer {idx} repeated"),
                        ));
                    }
                }
            }
        }
        for (i, s) in self.specs.iter().enumerate() {
            let path = format!("specs[{i}]");
            if self.specs[..i].iter().any(|o| o.site == s.site) {
                return Err(Error::config(
                    format!("{path}.site"),
                    format!("second tuner on site {} ({s:?})", s.site.name()),
                ));
            }
            if s.dim == 0 {
                return Err(Error::config(
                    format!("{path}.dim"),
                    format!("must be >= 1 ({s:?})"),
                ));
            }
            if s.kind == TunerKind::Adapter && s.dim >= backbone.width {
                return Err(Error::config(
                    format!("{path}.dim"),
                    format!(
                        "adapter bottleneck {} must be below width {} ({s:?})",
                        s.dim, backbone.width
                    ),
                ));
            }
            if s.bias && s.kind != TunerKind::Adapter {
                return Err(Error::config(
                    format!("{path}.bias"),
                    format!("only adapters take biases ({s:?})"),
                ));
            }
        }
        Ok(())
    }
}

/// Initial value rule for a planned parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Uniform(f64),
    Zeros,
    Ones,
}

impl Init {
    fn build(self, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::Uniform(b) => Tensor::uniform(shape, b, rng),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl PlannedParam {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn tuner_prefix(layer: usize, spec: &TunerSpec) -> String {
    format!("tuner.{layer}.{}.{}", spec.site.name(), spec.kind.name())
}

/// Every tuner parameter a config would create, in creation order.
pub fn tuner_plan(backbone: &BackboneConfig, config: &UTuningConfig) -> Result<Vec<PlannedParam>> {
    config.validate(backbone)?;
    let d = backbone.width;
    let bound = 1.0 / (d as f64).sqrt();
    let mut plan = Vec::new();
    for layer in config.layer_range.layers(backbone.layers) {
        for spec in &config.specs {
            let pre = tuner_prefix(layer, spec);
            let mut push = |n: &str, shape: Vec<usize>, init: Init| {
                plan.push(PlannedParam {
                    name: format!("{pre}.{n}"),
                    shape,
                    init,
                })
            };
            let n = spec.dim;
            match spec.kind {
                TunerKind::Adapter => {
                    push("w_down", vec![d, n], Init::Uniform(bound));
                    push("w_up", vec![n, d], Init::Zeros);
                    if spec.bias {
                        push("b_down", vec![n], Init::Zeros);
                        push("b_up", vec![d], Init::Zeros);
                    }
                }
                TunerKind::Prefix if spec.site == OpSite::Mha => {
                    let shape = vec![backbone.heads, n, backbone.head_dim()];
                    push("k_pre", shape.clone(), Init::Normal(TOKEN_INIT_STD));
                    push("v_pre", shape, Init::Normal(TOKEN_INIT_STD));
                }
                // Standalone attention starts with an empty value path.
                TunerKind::Prefix => {
                    push("k_pre", vec![1, n, d], Init::Normal(TOKEN_INIT_STD));
                    push("v_pre", vec![1, n, d], Init::Zeros);
                }
                TunerKind::Prompt => push("x_pro", vec![n, d], Init::Normal(TOKEN_INIT_STD)),
            }
            if spec.kind != TunerKind::Adapter && spec.site != OpSite::Mha {
                push("w_q", vec![d, d], Init::Uniform(bound));
                push("w_k", vec![d, d], Init::Uniform(bound));
                push("w_v", vec![d, d], Init::Zeros);
            }
            match spec.scaling {
                ScalingKind::Direct => {}
                ScalingKind::Scalar => push("scale", vec![1], Init::Ones),
                ScalingKind::ChannelWise => push("scale", vec![d], Init::Ones),
                ScalingKind::InputDependent => {
                    let hdim = ScalingKind::gate_hidden(d);
                    push("gate_w1", vec![d, hdim], Init::Normal(TOKEN_INIT_STD));
                    push("gate_b1", vec![hdim], Init::Zeros);
                    push("gate_w2", vec![hdim, d], Init::Zeros);
                    push("gate_b2", vec![d], Init::Zeros);
                }
            }
        }
    }
    Ok(plan)
}

/// Parameter totals computed from shapes alone.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub head: usize,
    pub tuners: usize,
    pub frozen: usize,
    /// Per named group (`head`, `tuner.<site>.<kind>`, `backbone`).
    pub groups: BTreeMap<String, usize>,
}

impl ParamCount {
    pub fn trainable(&self) -> usize {
        self.head + self.tuners
    }

    pub fn total(&self) -> usize {
        self.trainable() + self.frozen
    }
}

/// Counts without allocating anything (works for the ViT-B/16 preset).
pub fn count_params(backbone: &BackboneConfig, config: &UTuningConfig) -> Result<ParamCount> {
    let mut c = ParamCount::default();
    for (name, shape) in backbone.param_plan() {
        let n: usize = shape.iter().product();
        if is_head_param(&name) {
            c.head += n;
            *c.groups.entry("head".into()).or_default() += n;
        } else {
            c.frozen += n;
            *c.groups.entry("backbone".into()).or_default() += n;
        }
    }
    for p in tuner_plan(backbone, config)? {
        c.tuners += p.numel();
        let mut parts = p.name.split('.');
        let (_, _, site, kind) = (parts.next(), parts.next(), parts.next(), parts.next());
        let group = format!("tuner.{}.{}", site.unwrap_or("?"), kind.unwrap_or("?"));
        *c.groups.entry(group).or_default() += p.numel();
    }
    Ok(c)
}

struct Attachment {
    spec: TunerSpec,
    ids: BTreeMap<String, ParamId>,
}

impl Attachment {
    fn id(&self, key: &str) -> ParamId {
        self.ids[key]
    }

    fn opt(&self, key: &str) -> Option<ParamId> {
        self.ids.get(key).copied()
    }
}

/// Frozen backbone plus tuners; the parameter store holds both.
pub struct ComposedModel {
    pub backbone: Backbone,
    pub config: UTuningConfig,
    attachments: Vec<Attachment>,
    sites: Vec<[Option<usize>; 3]>,
    /// Debug hook: every tuner delta is dropped.
    pub zero_deltas: bool,
    pub gate_mode: GateMode,
}

impl fmt::Debug for ComposedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ComposedModel")
            .field("config", &self.config)
            .field("trainable", &self.params().count_trainable())
            .finish()
    }
}

/// Freezes a copy of `backbone` and attaches tuners per `config`.
pub fn compose(backbone: &Backbone, config: &UTuningConfig, seed: u64) -> Result<ComposedModel> {
    let plan = tuner_plan(&backbone.config, config)?;
    let mut bb = backbone.clone();
    bb.freeze();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_prefix: BTreeMap<String, BTreeMap<String, ParamId>> = BTreeMap::new();
    for p in &plan {
        let id = bb
            .params
            .add(p.name.clone(), p.init.build(&p.shape, &mut rng), true)?;
        let (prefix, key) = p.name.rsplit_once('.').expect("planned names are dotted");
        by_prefix
            .entry(prefix.to_string())
            .or_default()
            .insert(key.to_string(), id);
    }
    let mut attachments = Vec::new();
    let mut sites = vec![[None; 3]; bb.config.layers];
    for layer in config.layer_range.layers(bb.config.layers) {
        for spec in &config.specs {
            let ids = by_prefix
                .remove(&tuner_prefix(layer, spec))
                .unwrap_or_default();
            sites[layer][spec.site.index()] = Some(attachments.len());
            attachments.push(Attachment {
                spec: spec.clone(),
                ids,
            });
        }
    }
    Ok(ComposedModel {
        backbone: bb,
        config: config.clone(),
        attachments,
        sites,
        zero_deltas: false,
        gate_mode: GateMode::Exact,
    })
}

impl ComposedModel {
    pub fn params(&self) -> &ParamStore {
        &self.backbone.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.backbone.params
    }

    pub fn count_trainable_params(&self) -> usize {
        self.params().count_trainable()
    }

    pub fn tuner_names(&self) -> Vec<String> {
        self.params()
            .iter()
            .filter(|(_, v)| v.name.starts_with("tuner."))
            .map(|(_, v)| v.name.clone())
            .collect()
    }

    fn attachment(&self, layer: usize, site: OpSite) -> Option<&Attachment> {
        if self.zero_deltas {
            return None;
        }
        self.sites.get(layer)?[site.index()].map(|i| &self.attachments[i])
    }

    /// Logits `[B, C]` plus the per-site trace.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, SiteTrace)> {
        let b = &self.backbone;
        backbone::forward_graph(g, &b.config, &b.layout, &b.params, x, self)
    }

    /// Pooled features `[B, d]` before the head.
    pub fn features_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let b = &self.backbone;
        Ok(backbone::encode_graph(g, &b.config, &b.layout, &b.params, x, self)?.features)
    }

    pub fn forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (logits, _) = self.forward_graph(&mut g, xn)?;
        Ok(g.value(logits).clone())
    }

    /// Forward through the same weights with every tuner removed.
    pub fn frozen_forward_batch(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.forward_batch(x)
    }

    fn scaling_nodes(&self, g: &mut Graph, store: &ParamStore, a: &Attachment) -> ScalingNodes {
        match a.spec.scaling {
            ScalingKind::Direct => ScalingNodes::Direct,
            ScalingKind::Scalar => ScalingNodes::Scalar(g.param(store, a.id("scale"))),
            ScalingKind::ChannelWise => ScalingNodes::ChannelWise(g.param(store, a.id("scale"))),
            ScalingKind::InputDependent => ScalingNodes::InputDependent {
                w1: g.param(store, a.id("gate_w1")),
                b1: g.param(store, a.id("gate_b1")),
                w2: g.param(store, a.id("gate_w2")),
                b2: g.param(store, a.id("gate_b2")),
            },
        }
    }

    fn adapter_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        a: &Attachment,
        input: NodeId,
    ) -> Result<NodeId> {
        let nodes = AdapterNodes {
            w_down: g.param(store, a.id("w_down")),
            w_up: g.param(store, a.id("w_up")),
            b_down: a.opt("b_down").map(|id| g.param(store, id)),
            b_up: a.opt("b_up").map(|id| g.param(store, id)),
            activation: Activation::Gelu,
        };
        adapter_graph(g, input, &nodes)
    }

    /// Prefix/prompt at a site without native attention: single-head
    /// attention through the tuner's own projections.
    fn standalone_attention_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        a: &Attachment,
        input: NodeId,
    ) -> Result<Option<NodeId>> {
        let (wq, wk, wv) = (
            g.param(store, a.id("w_q")),
            g.param(store, a.id("w_k")),
            g.param(store, a.id("w_v")),
        );
        let d = g.shape(wq)[0];
        let scale = 1.0 / (d as f64).sqrt();
        let q = g.matmul(input, wq)?;
        let k = g.matmul(input, wk)?;
        let v = g.matmul(input, wv)?;
        let (heads_out, weights) = attend(g, q, k, v, scale)?;
        let cache = MhaCache {
            q,
            k,
            v,
            heads_out,
            weights,
            scale,
        };
        let (ke, ve) = match a.spec.kind {
            TunerKind::Prefix => (g.param(store, a.id("k_pre")), g.param(store, a.id("v_pre"))),
            TunerKind::Prompt => {
                let p = g.param(store, a.id("x_pro"));
                (g.matmul(p, wk)?, g.matmul(p, wv)?)
            }
            TunerKind::Adapter => unreachable!("adapters take the direct path"),
        };
        prefix_delta_heads(g, &cache, ke, ve, self.gate_mode)
    }

    fn site_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        site: OpSite,
        input: NodeId,
        mha: Option<(&MhaCache, &AttnNodes)>,
    ) -> Result<Option<NodeId>> {
        let Some(a) = self.attachment(layer, site) else {
            return Ok(None);
        };
        let raw = match (a.spec.kind, mha) {
            (TunerKind::Adapter, _) => Some(self.adapter_delta(g, store, a, input)?),
            (kind, Some((cache, attn))) => {
                let (ke, ve) = if kind == TunerKind::Prefix {
                    (g.param(store, a.id("k_pre")), g.param(store, a.id("v_pre")))
                } else {
                    let p = g.param(store, a.id("x_pro"));
                    (
                        project_heads_unbatched(g, p, attn.w_k, attn.heads)?,
                        project_heads_unbatched(g, p, attn.w_v, attn.heads)?,
                    )
                };
                match prefix_delta_heads(g, cache, ke, ve, self.gate_mode)? {
                    Some(h) => {
                        let merged = merge_heads(g, h)?;
                        Some(g.matmul(merged, attn.w_o)?)
                    }
                    None => None,
                }
            }
            (_, None) => self.standalone_attention_delta(g, store, a, input)?,
        };
        let Some(delta) = raw else {
            return Ok(None);
        };
        let s = self.scaling_nodes(g, store, a);
        scaling_graph(g, delta, &s, input).map(Some)
    }
}

impl SiteTuning for ComposedModel {
    fn mha_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        input: NodeId,
        cache: &MhaCache,
        attn: &AttnNodes,
    ) -> Result<Option<NodeId>> {
        self.site_delta(g, store, layer, OpSite::Mha, input, Some((cache, attn)))
    }

    fn ffn_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        input: NodeId,
    ) -> Result<Option<NodeId>> {
        self.site_delta(g, store, layer, OpSite::Ffn, input, None)
    }

    fn block_delta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        input: NodeId,
    ) -> Result<Option<NodeId>> {
        self.site_delta(g, store, layer, OpSite::Block, input, None)
    }
}

/// A named ablation configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GridEntry {
    pub name: String,
    pub group: &'static str,
    pub config: UTuningConfig,
}

/// 9 single, 9 dual, 3 tri and 4 scaling configurations.
pub fn enumerate_ablation_grid() -> Vec<GridEntry> {
    let mut grid = Vec::new();
    for site in OpSite::ALL {
        for kind in TunerKind::ALL {
            grid.push(GridEntry {
                name: format!("single-{}-{}", site.name(), kind.name()),
                group: "single",
                config: UTuningConfig::single(site, kind),
            });
        }
    }
    for mha in TunerKind::ALL {
        for ffn in TunerKind::ALL {
            grid.push(GridEntry {
                name: format!("dual-{}-{}", mha.name(), ffn.name()),
                group: "dual",
                config: UTuningConfig::dual(mha, ffn, ScalingKind::ChannelWise),
            });
        }
    }
    for block in TunerKind::ALL {
        let mut config = UTuningConfig::default_dual();
        config.specs.push(TunerSpec::new(
            OpSite::Block,
            block,
            DEFAULT_DIM,
            ScalingKind::ChannelWise,
        ));
        grid.push(GridEntry {
            name: format!("tri-adapter-adapter-{}", block.name()),
            group: "tri",
            config,
        });
    }
    for scaling in ScalingKind::ALL {
        grid.push(GridEntry {
            name: format!("scaling-{}", scaling.name()),
            group: "scaling",
            config: UTuningConfig::dual(TunerKind::Adapter, TunerKind::Adapter, scaling),
        });
    }
    grid
}

/// Per-dataset (MHA kind, FFN kind) pairs for the fine-grained benchmarks.
pub const FGVC_PRESETS: [(&str, TunerKind, TunerKind); 5] = [
    ("cub", TunerKind::Prompt, TunerKind::Adapter),
    ("nabirds", TunerKind::Adapter, TunerKind::Prefix),
    ("oxford-flowers", TunerKind::Adapter, TunerKind::Prompt),
    ("stanford-cars", TunerKind::Adapter, TunerKind::Adapter),
    ("stanford-dogs", TunerKind::Prefix, TunerKind::Adapter),
];

/// Named configurations: grid names, FGVC presets and a few shorthands.
pub fn preset(name: &str) -> Option<UTuningConfig> {
    match name {
        "default" | "dual-adapter" => return Some(UTuningConfig::default_dual()),
        "linear-probe" | "none" => return Some(UTuningConfig::empty()),
        "vpt-deep" => return Some(UTuningConfig::vpt_deep(DEFAULT_DIM)),
        _ => {}
    }
    if let Some((_, mha, ffn)) = FGVC_PRESETS.iter().find(|(n, _, _)| *n == name) {
        return Some(UTuningConfig::dual(*mha, *ffn, ScalingKind::ChannelWise));
    }
    enumerate_ablation_grid()
        .into_iter()
        .find(|e| e.name == name)
        .map(|e| e.config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_25_unique_names() {
        let grid = enumerate_ablation_grid();
        assert_eq!(grid.len(), 25);
        let mut names: Vec<_> = grid.iter().map(|e| e.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 25);
        let cfg = BackboneConfig::desk();
        for e in &grid {
            e.config.validate(&cfg).unwrap();
        }
    }

    #[test]
    fn json_round_trip_and_paths() {
        let c = UTuningConfig::default_dual();
        assert_eq!(UTuningConfig::from_json(&c.to_json()).unwrap(), c);
        let parsed = UTuningConfig::from_json(r#"{"layer_range": {"first": 1}, "specs": [{"site": "mha", "kind": "prompt", "dim": 4}]}"#).unwrap();
        assert_eq!(parsed.layer_range, LayerRange::First(1));
        assert_eq!(parsed.specs[0].scaling, ScalingKind::ChannelWise);
        let err = UTuningConfig::from_json(
            r#"{"specs": [{"site": "mha", "kind": "adapter", "dim": 4, "colour": 1}]}"#,
        )
        .unwrap_err();
        match err {
            Error::Config { path, .. } => assert!(path.starts_with("specs[0]"), "{path}"),
            e => panic!("{e}"),
        }
        let err = UTuningConfig::from_json(r#"{"layer_range": "most"}"#).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn validation_names_offending_spec() {
        let cfg = BackboneConfig::desk();
        let mut c = UTuningConfig::default_dual();
        c.specs[1].site = OpSite::Mha;
        let e = c.validate(&cfg).unwrap_err().to_string();
        assert!(e.contains("specs[1]"), "{e}");
        let c = UTuningConfig::single(OpSite::Ffn, TunerKind::Adapter).with_dim(64);
        assert!(c.validate(&cfg).is_err());
        let c = UTuningConfig {
            layer_range: LayerRange::List(vec![1, 4]),
            specs: vec![],
        };
        assert!(c.validate(&cfg).is_err());
    }

    #[test]
    fn single_adapter_count() {
        let mut cfg = BackboneConfig::desk();
        cfg.layers = 1;
        let c = count_params(
            &cfg,
            &UTuningConfig::single(OpSite::Mha, TunerKind::Adapter),
        )
        .unwrap();
        assert_eq!(c.tuners, 2 * 64 * 10 + 64);
    }

    #[test]
    fn vitb16_counts() {
        let cfg = BackboneConfig::vitb16(100);
        let probe = count_params(&cfg, &UTuningConfig::empty()).unwrap();
        assert_eq!(probe.trainable(), 76_900);
        let vpt = count_params(&cfg, &UTuningConfig::vpt_deep(10)).unwrap();
        assert_eq!(vpt.trainable(), 169_060);
    }

    #[test]
    fn presets_resolve() {
        for (name, _, _) in FGVC_PRESETS {
            assert!(preset(name).is_some());
        }
        assert_eq!(
            preset("dual-adapter-adapter"),
            Some(UTuningConfig::default_dual())
        );
        assert!(preset("nope").is_none());
    }
}
