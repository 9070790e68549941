//! Verification suites: equivalence, gates, gradients, parameter counts,
//! zero-init identity and per-site statistics.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::autograd::{Graph, ParamStore};
use crate::backbone::{
    self, feed_forward, Activation, AttentionProjections, Backbone, BackboneConfig, FfnWeights,
    NoTuning, SiteTrace, TraceSite,
};
use crate::composer::{
    compose, count_params, enumerate_ablation_grid, ComposedModel, OpSite, TunerKind, UTuningConfig,
};
use crate::error::{Error, Result};
use crate::gradcheck::{
    finite_difference_gradient, relative_error, worst_coordinate, DEFAULT_STEP,
};
use crate::tensor::{self, Precision, Tensor};
use crate::train::{derive_seed, train_step, AdamW, AdamWConfig};
use crate::tuners::{
    adapter_parallel, adapter_sequential, compute_lambda_gate, gated_softmax_rows, heads_of,
    prefix_original, prefix_parallel, prompt_original, prompt_parallel, AdapterTuner, GateMode,
    PrefixTuner, PromptTuner,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct CaseRecord {
    pub name: String,
    pub metric: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl CaseRecord {
    /// A "below tolerance" check; NaN fails.
    pub fn below(name: impl Into<String>, metric: &str, value: f64, tolerance: f64) -> Self {
        CaseRecord {
            name: name.into(),
            metric: metric.into(),
            value,
            tolerance,
            passed: value < tolerance,
            detail: Value::Null,
        }
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Summary {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
}

/// Machine-readable outcome of one command.
#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub command: Vec<String>,
    pub version: String,
    pub passed: bool,
    pub summary: Summary,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub cases: Vec<CaseRecord>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub extra: Value,
}

impl Report {
    pub fn new(command: Vec<String>) -> Self {
        Report {
            command,
            version: VERSION.into(),
            passed: false,
            summary: Summary::default(),
            wall_time_s: 0.0,
            error: None,
            cases: Vec::new(),
            extra: Value::Null,
        }
    }

    pub fn push(&mut self, case: CaseRecord) {
        self.cases.push(case);
    }

    /// Fills the summary and wall time; passes iff every case passed and no error was recorded.
    pub fn finish(mut self, started: Instant) -> Self {
        let passed = self.cases.iter().filter(|c| c.passed).count();
        self.summary = Summary {
            total: self.cases.len(),
            passed,
            failed: self.cases.len() - passed,
        };
        self.passed = self.summary.failed == 0 && self.error.is_none();
        self.wall_time_s = started.elapsed().as_secs_f64();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

fn dump(t: &Tensor) -> Value {
    json!({ "shape": t.shape(), "data": t.data() })
}

// ---------------------------------------------------------------------------
// Equivalence and gates
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerType {
    Prefix,
    Prompt,
    Adapter,
}

impl TunerType {
    pub const ALL: [TunerType; 3] = [TunerType::Prefix, TunerType::Prompt, TunerType::Adapter];

    pub fn name(self) -> &'static str {
        match self {
            TunerType::Prefix => "prefix",
            TunerType::Prompt => "prompt",
            TunerType::Adapter => "adapter",
        }
    }
}

impl fmt::Display for TunerType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for TunerType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TunerType::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| {
                Error::config(
                    "types",
                    format!("unknown tuner type `{s}` (prefix, prompt, adapter)"),
                )
            })
    }
}

/// Comma-separated list, e.g. `prefix,adapter`.
pub fn parse_types(list: &str) -> Result<Vec<TunerType>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let t: TunerType = part.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(Error::config("types", "no tuner types given"));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceOptions {
    pub types: Vec<TunerType>,
    /// Cases per type.
    pub cases: usize,
    pub seed: u64,
    pub break_gate: bool,
    pub tolerance: f64,
    pub adapter_tolerance: f64,
    pub gate_tolerance: f64,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        EquivalenceOptions {
            types: TunerType::ALL.to_vec(),
            cases: 100,
            seed: 0,
            break_gate: false,
            tolerance: 1e-9,
            adapter_tolerance: 1e-12,
            gate_tolerance: 1e-12,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GateCheck {
    pub lambda_min: f64,
    pub lambda_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
    pub reconstruction_err: f64,
    pub in_open_interval: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalenceCase {
    pub kind: TunerType,
    pub index: usize,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    /// Prefix length m, prompt count n or adapter bottleneck r.
    pub extra: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discard_prompts: Option<bool>,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateCheck>,
    /// Every input of a failing case, for replay.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Value>,
}

#[derive(Clone, Debug)]
pub struct EquivalenceOutcome {
    pub options: EquivalenceOptions,
    pub cases: Vec<EquivalenceCase>,
}

impl EquivalenceOutcome {
    pub fn equivalence_passed(&self) -> bool {
        !self.cases.is_empty() && self.cases.iter().all(|c| c.passed)
    }

    pub fn gates_passed(&self) -> bool {
        self.cases
            .iter()
            .filter_map(|c| c.gate.as_ref())
            .all(|g| g.passed)
    }

    pub fn max_diff(&self, kind: TunerType) -> f64 {
        self.cases
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.max_abs_diff)
            .fold(0.0, f64::max)
    }

    pub fn max_gate_error(&self) -> f64 {
        self.cases
            .iter()
            .filter_map(|c| c.gate.as_ref())
            .map(|g| g.reconstruction_err)
            .fold(0.0, f64::max)
    }

    pub fn report(&self, command: Vec<String>, started: Instant) -> Report {
        let mut r = Report::new(command);
        for c in &self.cases {
            let mut rec = CaseRecord::below(
                format!("{}-{:03}", c.kind, c.index),
                "max_abs_diff",
                c.max_abs_diff,
                c.tolerance,
            );
            rec.passed = c.passed && c.gate.as_ref().is_none_or(|g| g.passed);
            r.push(rec.with_detail(serde_json::to_value(c).expect("case serializes")));
        }
        let per_type: BTreeMap<&str, Value> = self
            .options
            .types
            .iter()
            .map(|&t| {
                let n = self.cases.iter().filter(|c| c.kind == t).count();
                (
                    t.name(),
                    json!({ "cases": n, "max_abs_diff": self.max_diff(t) }),
                )
            })
            .collect();
        r.extra = json!({
            "seed": self.options.seed,
            "break_gate": self.options.break_gate,
            "per_type": per_type,
            "equivalence_passed": self.equivalence_passed(),
            "gates_passed": self.gates_passed(),
            "max_gate_reconstruction_err": self.max_gate_error(),
        });
        r.finish(started)
    }
}

const WIDTHS: [usize; 3] = [8, 16, 64];
const HEADS: [usize; 3] = [1, 2, 4];
const EXTRAS: [usize; 3] = [1, 4, 10];

/// Cycles through all 27 (d, h, m) combinations so every one is covered.
fn case_shape(i: usize) -> (usize, usize, usize) {
    (WIDTHS[i % 3], HEADS[(i / 3) % 3], EXTRAS[(i / 9) % 3])
}

/// Full softmax over `[K; K_extra]` computed directly.
fn concat_softmax(q: &Tensor, k: &Tensor, k_extra: &Tensor) -> Result<Tensor> {
    let keys = tensor::concat(&[k, k_extra], 1)?;
    let scale = 1.0 / (q.shape()[2] as f64).sqrt();
    let logits = tensor::matmul(q, &tensor::permute(&keys, &[0, 2, 1])?)?.scale(scale);
    tensor::softmax(&logits, 2)
}

fn min_max(t: &Tensor) -> (f64, f64) {
    t.data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// λ range and the rebuilt-row error for queries `q` over `[k; k_extra]`.
fn gate_stats(q: &Tensor, k: &Tensor, k_extra: &Tensor) -> Result<(f64, f64, f64)> {
    let lambda = compute_lambda_gate(q, k, Some(k_extra))?.lambda;
    let (lo, hi) = min_max(&lambda);
    let err = gated_softmax_rows(q, k, k_extra)?.max_abs_diff(&concat_softmax(q, k, k_extra)?)?;
    Ok((lo, hi, err))
}

fn open_unit(lo: f64, hi: f64) -> bool {
    lo > 0.0 && hi < 1.0
}

fn proj_inputs(proj: &AttentionProjections, x: &Tensor) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("x".into(), dump(x));
    m.insert("w_q".into(), dump(&proj.w_q));
    m.insert("w_k".into(), dump(&proj.w_k));
    m.insert("w_v".into(), dump(&proj.w_v));
    m.insert("w_o".into(), dump(&proj.w_o));
    m
}

fn gate_mode(opts: &EquivalenceOptions) -> GateMode {
    if opts.break_gate {
        GateMode::Broken
    } else {
        GateMode::Exact
    }
}

fn prefix_case(
    i: usize,
    rng: &mut ChaCha8Rng,
    opts: &EquivalenceOptions,
) -> Result<EquivalenceCase> {
    let (d, h, m) = case_shape(i);
    let t = rng.random_range(1..=8);
    let proj = AttentionProjections::random(d, h, rng)?;
    let x = Tensor::randn(&[t, d], 1.0, rng);
    let tuner = PrefixTuner::random(h, m, d / h, 1.0, rng);
    let original = prefix_original(&x, &proj, &tuner)?;
    let parallel = prefix_parallel(&x, &proj, &tuner, gate_mode(opts))?;
    let diff = original.max_abs_diff(&parallel)?;
    let q = heads_of(&x, &proj.w_q, h)?;
    let k = heads_of(&x, &proj.w_k, h)?;
    let k_pre = tuner.k_pre().expect("m ≥ 1");
    let (lo, hi, err) = gate_stats(&q, &k, k_pre)?;
    let gate = GateCheck {
        lambda_min: lo,
        lambda_max: hi,
        beta_min: None,
        beta_max: None,
        reconstruction_err: err,
        in_open_interval: open_unit(lo, hi),
        passed: open_unit(lo, hi) && err < opts.gate_tolerance,
    };
    let passed = diff < opts.tolerance;
    let inputs = (!passed || !gate.passed).then(|| {
        let mut m = proj_inputs(&proj, &x);
        m.insert("k_pre".into(), dump(k_pre));
        m.insert("v_pre".into(), dump(tuner.v_pre().expect("m ≥ 1")));
        Value::Object(m)
    });
    Ok(EquivalenceCase {
        kind: TunerType::Prefix,
        index: i,
        tokens: t,
        width: d,
        heads: h,
        extra: m,
        discard_prompts: None,
        max_abs_diff: diff,
        tolerance: opts.tolerance,
        passed,
        gate: Some(gate),
        inputs,
    })
}

fn prompt_case(
    i: usize,
    rng: &mut ChaCha8Rng,
    opts: &EquivalenceOptions,
) -> Result<EquivalenceCase> {
    let (d, h, n) = case_shape(i);
    let t = rng.random_range(1..=8);
    let discard = i.is_multiple_of(2);
    let proj = AttentionProjections::random(d, h, rng)?;
    let x = Tensor::randn(&[t, d], 1.0, rng);
    let x_pro = Tensor::randn(&[n, d], 1.0, rng);
    let tuner = PromptTuner::new(x_pro.clone())?;
    let original = prompt_original(&x, &proj, &tuner, discard)?;
    let parallel = prompt_parallel(&x, &proj, &tuner, discard, gate_mode(opts))?;
    let diff = original.max_abs_diff(&parallel)?;
    let q = heads_of(&x, &proj.w_q, h)?;
    let k = heads_of(&x, &proj.w_k, h)?;
    let k_pro = heads_of(&x_pro, &proj.w_k, h)?;
    let (lo, hi, mut err) = gate_stats(&q, &k, &k_pro)?;
    let mut open = open_unit(lo, hi);
    let (mut beta_min, mut beta_max) = (None, None);
    if !discard {
        let q_pro = heads_of(&x_pro, &proj.w_q, h)?;
        let (blo, bhi, berr) = gate_stats(&q_pro, &k_pro, &k)?;
        beta_min = Some(blo);
        beta_max = Some(bhi);
        open &= open_unit(blo, bhi);
        err = err.max(berr);
    }
    let gate = GateCheck {
        lambda_min: lo,
        lambda_max: hi,
        beta_min,
        beta_max,
        reconstruction_err: err,
        in_open_interval: open,
        passed: open && err < opts.gate_tolerance,
    };
    let passed = diff < opts.tolerance;
    let inputs = (!passed || !gate.passed).then(|| {
        let mut m = proj_inputs(&proj, &x);
        m.insert("x_pro".into(), dump(&x_pro));
        Value::Object(m)
    });
    Ok(EquivalenceCase {
        kind: TunerType::Prompt,
        index: i,
        tokens: t,
        width: d,
        heads: h,
        extra: n,
        discard_prompts: Some(discard),
        max_abs_diff: diff,
        tolerance: opts.tolerance,
        passed,
        gate: Some(gate),
        inputs,
    })
}

fn adapter_case(
    i: usize,
    rng: &mut ChaCha8Rng,
    opts: &EquivalenceOptions,
) -> Result<EquivalenceCase> {
    let (d, _, _) = case_shape(i);
    let t = rng.random_range(1..=8);
    let r = rng.random_range(1..=d / 2);
    let ffn = FfnWeights::random(d, 2 * d, Activation::Gelu, rng);
    let x = Tensor::randn(&[t, d], 1.0, rng);
    let w_down = Tensor::randn(&[d, r], 1.0 / (d as f64).sqrt(), rng);
    let w_up = Tensor::randn(&[r, d], 1.0 / (r as f64).sqrt(), rng);
    let tuner = AdapterTuner::new(w_down.clone(), w_up.clone(), Activation::Gelu)?;
    let ffn_out = feed_forward(&x, &ffn)?;
    let sequential = adapter_sequential(&ffn_out, &tuner)?;
    let parallel = ffn_out.add(&adapter_parallel(&ffn_out, &tuner)?)?;
    let reference = ffn_out.add(&tensor::matmul(
        &tensor::gelu(&tensor::matmul(&ffn_out, &w_down)?),
        &w_up,
    )?)?;
    let diff = sequential
        .max_abs_diff(&parallel)?
        .max(sequential.max_abs_diff(&reference)?);
    let passed = diff < opts.adapter_tolerance;
    let inputs = (!passed).then(|| {
        json!({
            "x": dump(&x), "w1": dump(&ffn.w1), "b1": dump(&ffn.b1), "w2": dump(&ffn.w2), "b2": dump(&ffn.b2),
            "w_down": dump(&w_down), "w_up": dump(&w_up),
        })
    });
    Ok(EquivalenceCase {
        kind: TunerType::Adapter,
        index: i,
        tokens: t,
        width: d,
        heads: 1,
        extra: r,
        discard_prompts: None,
        max_abs_diff: diff,
        tolerance: opts.adapter_tolerance,
        passed,
        gate: None,
        inputs,
    })
}

/// Original-vs-parallel forms on randomized instances, plus the gate rebuild per case.
pub fn run_equivalence(opts: &EquivalenceOptions) -> Result<EquivalenceOutcome> {
    let mut cases = Vec::with_capacity(opts.types.len() * opts.cases);
    for &kind in &opts.types {
        for i in 0..opts.cases {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, kind as u64, i as u64]));
            cases.push(match kind {
                TunerType::Prefix => prefix_case(i, &mut rng, opts)?,
                TunerType::Prompt => prompt_case(i, &mut rng, opts)?,
                TunerType::Adapter => adapter_case(i, &mut rng, opts)?,
            });
        }
    }
    Ok(EquivalenceOutcome {
        options: opts.clone(),
        cases,
    })
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// Small backbone used for finite differences.
pub fn gradcheck_backbone() -> BackboneConfig {
    BackboneConfig {
        layers: 2,
        width: 16,
        heads: 2,
        ffn_width: 32,
        tokens: 4,
        input_width: 6,
        classes: 3,
        class_token: true,
        activation: Activation::Gelu,
    }
}

/// The nine single-site configs, the default dual config and a head-only baseline.
pub fn gradcheck_suite() -> Vec<(String, UTuningConfig)> {
    let mut out: Vec<(String, UTuningConfig)> = enumerate_ablation_grid()
        .into_iter()
        .filter(|e| e.group == "single")
        .map(|e| (e.name, e.config))
        .collect();
    out.push(("default-dual".into(), UTuningConfig::default_dual()));
    out.push(("head-only".into(), UTuningConfig::empty()));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub tolerance: f64,
    pub step: f64,
    pub batch: usize,
    /// Std of the noise added to every trainable tensor before checking.
    pub perturb: f64,
    pub adam_steps: usize,
    pub lr: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            backbone: gradcheck_backbone(),
            seed: 0,
            tolerance: 1e-4,
            step: DEFAULT_STEP,
            batch: 3,
            perturb: 0.3,
            adam_steps: 10,
            lr: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub config: String,
    pub trainable: usize,
    pub tensors: Vec<TensorCheck>,
    pub frozen_checked: usize,
    pub frozen_modified: Vec<String>,
    pub trainable_moved: bool,
    pub passed: bool,
}

fn batch_loss(model: &ComposedModel, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let (logits, _) = model.forward_graph(&mut g, xn)?;
    let loss = g.cross_entropy(logits, y)?;
    g.value(loss).item()
}

fn snapshot(store: &ParamStore, trainable: bool) -> Vec<(String, Vec<u64>)> {
    store
        .iter()
        .filter(|(_, v)| v.trainable == trainable)
        .map(|(_, v)| {
            (
                v.name.clone(),
                v.value.data().iter().map(|x| x.to_bits()).collect(),
            )
        })
        .collect()
}

/// Analytic vs central-difference gradients for every trainable tensor, then
/// a short AdamW run checking that frozen tensors stay bit-identical.
pub fn grad_check(
    name: &str,
    config: &UTuningConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckResult> {
    let bb = Backbone::new(opts.backbone.clone(), derive_seed(&[opts.seed, 1]))?;
    let mut model = compose(&bb, config, derive_seed(&[opts.seed, 2]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, 3]));
    for (_, v) in model.params_mut().iter_mut() {
        if v.trainable {
            v.value = v
                .value
                .add(&Tensor::randn(v.value.shape(), opts.perturb, &mut rng))?;
        }
    }
    let cfg = &opts.backbone;
    let x = Tensor::randn(&[opts.batch, cfg.tokens, cfg.input_width], 1.0, &mut rng);
    let y: Vec<usize> = (0..opts.batch).map(|i| i % cfg.classes).collect();

    model.params_mut().zero_grad();
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let (logits, _) = model.forward_graph(&mut g, xn)?;
    let loss = g.cross_entropy(logits, &y)?;
    g.backward(loss, model.params_mut())?;
    let ids = model.params().trainable_ids();
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| model.params().get(id).grad.clone())
        .collect();

    let cell = RefCell::new(model);
    let mut tensors = Vec::with_capacity(ids.len());
    for (&id, a) in ids.iter().zip(&analytic) {
        let at = cell.borrow().params().get(id).value.clone();
        let numeric = finite_difference_gradient(
            |p| {
                cell.borrow_mut().params_mut().get_mut(id).value = p.clone();
                batch_loss(&cell.borrow(), &x, &y)
            },
            &at,
            opts.step,
        )?;
        cell.borrow_mut().params_mut().get_mut(id).value = at.clone();
        let rel = relative_error(a, &numeric)?;
        let (worst_index, av, nv) = worst_coordinate(a, &numeric);
        tensors.push(TensorCheck {
            name: cell.borrow().params().get(id).name.clone(),
            numel: at.numel(),
            rel_err: rel,
            worst_index,
            analytic: av,
            numeric: nv,
            passed: rel < opts.tolerance,
        });
    }

    let mut model = cell.into_inner();
    let frozen_before = snapshot(model.params(), false);
    let trainable_before = snapshot(model.params(), true);
    let mut opt = AdamW::new(model.params(), AdamWConfig::default());
    for _ in 0..opts.adam_steps {
        train_step(&mut model, &mut opt, x.clone(), &y, opts.lr, Precision::F64)?;
    }
    let frozen_modified: Vec<String> = frozen_before
        .iter()
        .zip(snapshot(model.params(), false))
        .filter(|(a, b)| **a != *b)
        .map(|(a, _)| a.0.clone())
        .collect();
    let trainable_moved = trainable_before != snapshot(model.params(), true);
    let passed = tensors.iter().all(|t| t.passed) && frozen_modified.is_empty() && trainable_moved;
    Ok(GradCheckResult {
        config: name.into(),
        trainable: model.count_trainable_params(),
        tensors,
        frozen_checked: frozen_before.len(),
        frozen_modified,
        trainable_moved,
        passed,
    })
}

impl GradCheckResult {
    pub fn records(&self) -> Vec<CaseRecord> {
        let mut out: Vec<CaseRecord> = self
            .tensors
            .iter()
            .map(|t| {
                let mut r = CaseRecord::below(
                    format!("{}/{}", self.config, t.name),
                    "rel_err",
                    t.rel_err,
                    0.0,
                );
                r.tolerance = f64::NAN;
                r.passed = t.passed;
                r.with_detail(json!({
                    "numel": t.numel,
                    "worst_index": t.worst_index,
                    "analytic": t.analytic,
                    "numeric": t.numeric,
                }))
            })
            .collect();
        out.push(CaseRecord {
            name: format!("{}/frozen", self.config),
            metric: "frozen_tensors_modified".into(),
            value: self.frozen_modified.len() as f64,
            tolerance: 1.0,
            passed: self.frozen_modified.is_empty() && self.trainable_moved,
            detail: json!({
                "frozen_checked": self.frozen_checked,
                "modified": self.frozen_modified,
                "trainable_moved": self.trainable_moved,
            }),
        });
        out
    }
}

// ---------------------------------------------------------------------------
// Parameter counts
// ---------------------------------------------------------------------------

/// Rounded trainable counts, in millions, quoted for the ViT-B/16 preset with 100 classes.
pub const REFERENCE_MILLIONS: [(&str, f64); 2] = [("linear-probe", 0.07), ("vpt-deep", 0.17)];
pub const REFERENCE_TOLERANCE_M: f64 = 0.01;

#[derive(Clone, Debug, Serialize)]
pub struct CountRow {
    pub backbone: String,
    pub config: String,
    pub head: usize,
    pub tuners: usize,
    pub trainable: usize,
    pub frozen: usize,
    pub total: usize,
    pub trainable_m: f64,
    pub groups: BTreeMap<String, usize>,
}

pub fn count_row(
    backbone_name: &str,
    backbone: &BackboneConfig,
    config_name: &str,
    config: &UTuningConfig,
) -> Result<CountRow> {
    config.validate(backbone)?;
    let c = count_params(backbone, config)?;
    Ok(CountRow {
        backbone: backbone_name.into(),
        config: config_name.into(),
        head: c.head,
        tuners: c.tuners,
        trainable: c.trainable(),
        frozen: c.frozen,
        total: c.total(),
        trainable_m: c.trainable() as f64 / 1e6,
        groups: c.groups,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub layers: usize,
    pub prompts: usize,
    pub width: usize,
    pub formula: usize,
    pub enumerated: usize,
    pub counted: usize,
    pub passed: bool,
}

/// Deep prompts: `L·n·d` against the tensors actually allocated by `compose`.
pub fn vpt_deep_sweep() -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for layers in [1, 2, 3] {
        for prompts in [1, 5, 10] {
            for width in [8, 16, 32] {
                let cfg = BackboneConfig {
                    layers,
                    width,
                    heads: 2,
                    ffn_width: 2 * width,
                    tokens: 3,
                    input_width: 4,
                    classes: 2,
                    class_token: true,
                    activation: Activation::Gelu,
                };
                let config = UTuningConfig::vpt_deep(prompts);
                let model = compose(&Backbone::new(cfg.clone(), 0)?, &config, 0)?;
                let enumerated: usize = model
                    .params()
                    .iter()
                    .filter(|(_, v)| v.trainable && v.name.starts_with("tuner."))
                    .map(|(_, v)| v.value.numel())
                    .sum();
                let counted = count_params(&cfg, &config)?.tuners;
                let formula = layers * prompts * width;
                out.push(SweepPoint {
                    layers,
                    prompts,
                    width,
                    formula,
                    enumerated,
                    counted,
                    passed: formula == enumerated && formula == counted,
                });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Site statistics and zero-init identity
// ---------------------------------------------------------------------------

pub const STAT_NAMES: [&str; 6] = [
    "mean",
    "variance",
    "channel_mean_min",
    "channel_mean_max",
    "channel_var_min",
    "channel_var_max",
];

/// Population statistics of one traced activation `[.., d]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteStats {
    pub layer: usize,
    pub site: &'static str,
    pub mean: f64,
    pub variance: f64,
    pub channel_mean_min: f64,
    pub channel_mean_max: f64,
    pub channel_var_min: f64,
    pub channel_var_max: f64,
}

impl SiteStats {
    pub fn from_tensor(layer: usize, site: &'static str, t: &Tensor) -> Self {
        let d = *t.shape().last().unwrap_or(&1);
        let rows = t.numel() / d.max(1);
        let data = t.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let variance = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let mut cm = vec![0.0; d];
        for row in data.chunks_exact(d) {
            for (m, v) in cm.iter_mut().zip(row) {
                *m += v;
            }
        }
        cm.iter_mut().for_each(|m| *m /= rows as f64);
        let mut cv = vec![0.0; d];
        for row in data.chunks_exact(d) {
            for ((s, v), m) in cv.iter_mut().zip(row).zip(&cm) {
                *s += (v - m) * (v - m);
            }
        }
        cv.iter_mut().for_each(|s| *s /= rows as f64);
        let fold = |xs: &[f64]| {
            xs.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                })
        };
        let (channel_mean_min, channel_mean_max) = fold(&cm);
        let (channel_var_min, channel_var_max) = fold(&cv);
        SiteStats {
            layer,
            site,
            mean,
            variance,
            channel_mean_min,
            channel_mean_max,
            channel_var_min,
            channel_var_max,
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.mean,
            self.variance,
            self.channel_mean_min,
            self.channel_mean_max,
            self.channel_var_min,
            self.channel_var_max,
        ]
    }
}

fn trace_stats(g: &Graph, trace: &SiteTrace) -> Vec<SiteStats> {
    let mut out = Vec::with_capacity(trace.layers.len() * 5);
    for (l, nodes) in trace.layers.iter().enumerate() {
        for (site, &node) in TraceSite::ALL.iter().zip(nodes) {
            out.push(SiteStats::from_tensor(l, site.name(), g.value(node)));
        }
    }
    out
}

/// Statistics of every traced site of `model` on the batch `x`.
pub fn model_stats(model: &ComposedModel, x: &Tensor) -> Result<Vec<SiteStats>> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let (_, trace) = model.forward_graph(&mut g, xn)?;
    Ok(trace_stats(&g, &trace))
}

/// Same statistics with no tuners attached.
pub fn backbone_stats(bb: &Backbone, x: &Tensor) -> Result<Vec<SiteStats>> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let (_, trace) =
        backbone::forward_graph(&mut g, &bb.config, &bb.layout, &bb.params, xn, &NoTuning)?;
    Ok(trace_stats(&g, &trace))
}

pub const STATS_HEADER: &str = "layer,site,statistic,value";

/// Long format: one row per (layer, site, statistic).
pub fn stats_csv(stats: &[SiteStats]) -> String {
    let mut s = format!("{STATS_HEADER}\n");
    for st in stats {
        for (name, v) in STAT_NAMES.iter().zip(st.values()) {
            s.push_str(&format!("{},{},{},{:e}\n", st.layer, st.site, name, v));
        }
    }
    s
}

/// Largest absolute difference across all statistics.
pub fn max_stats_diff(a: &[SiteStats], b: &[SiteStats]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            x.values()
                .into_iter()
                .zip(y.values())
                .map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

/// Largest variance change at a site output (`mha_out`, `ffn_out`, `block_out`).
pub fn max_output_variance_diff(a: &[SiteStats], b: &[SiteStats]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, _)| x.site.ends_with("_out"))
        .map(|(x, y)| (x.variance - y.variance).abs())
        .fold(0.0, f64::max)
}

/// True when every tuner of `config` starts with an exactly zero delta.
/// Adapters start at `W_up = 0`; prefix/prompt tuners at FFN and block sites
/// start with a zero value projection. MHA prefix/prompt tuners do not.
pub fn identity_at_init(config: &UTuningConfig) -> bool {
    config
        .specs
        .iter()
        .all(|s| s.kind == TunerKind::Adapter || s.site != OpSite::Mha)
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityCheck {
    pub config: String,
    /// `natural` for configs that start at identity, `zero_deltas` otherwise.
    pub mode: &'static str,
    pub batches: usize,
    pub max_output_diff: f64,
    pub max_stats_diff: f64,
    pub passed: bool,
}

/// Composed model vs frozen backbone on random batches, outputs and site statistics.
pub fn zero_init_identity(
    backbone: &Backbone,
    name: &str,
    config: &UTuningConfig,
    seed: u64,
    batches: usize,
    tolerance: f64,
) -> Result<IdentityCheck> {
    let mut model = compose(backbone, config, seed)?;
    let natural = identity_at_init(config);
    model.zero_deltas = !natural;
    let cfg = &backbone.config;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1D]));
    let (mut out_diff, mut stat_diff) = (0.0_f64, 0.0_f64);
    for _ in 0..batches {
        let x = Tensor::randn(&[4, cfg.tokens, cfg.input_width], 1.0, &mut rng);
        out_diff = out_diff.max(
            model
                .forward_batch(&x)?
                .max_abs_diff(&backbone.forward_batch(&x)?)?,
        );
        stat_diff = stat_diff.max(max_stats_diff(
            &model_stats(&model, &x)?,
            &backbone_stats(backbone, &x)?,
        ));
    }
    Ok(IdentityCheck {
        config: name.into(),
        mode: if natural { "natural" } else { "zero_deltas" },
        batches,
        max_output_diff: out_diff,
        max_stats_diff: stat_diff,
        passed: out_diff < tolerance && stat_diff < tolerance,
    })
}
