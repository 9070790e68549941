//! Synthetic transfer task, AdamW with warmup + cosine schedule, and the
//! training loops for pretraining, linear probing and tuner fine-tuning.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, GraphOptions, NodeId, ParamId, ParamStore};
use crate::backbone::{self, Backbone, BackboneConfig, NoTuning};
use crate::composer::{compose, ComposedModel, UTuningConfig};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a list of seed parts into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    PretrainTrain,
    PretrainTest,
    DownstreamTrain,
    DownstreamTest,
}

impl Split {
    fn code(self) -> u64 {
        self as u64 + 1
    }

    pub fn is_downstream(self) -> bool {
        matches!(self, Split::DownstreamTrain | Split::DownstreamTest)
    }
}

/// Distribution change between the pretraining and downstream data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    /// Rotation angle (degrees) in one random 2-plane of input space.
    pub angle_deg: f64,
    /// Fraction of classes whose prototypes are drawn afresh.
    pub redraw_fraction: f64,
    /// Std of a constant offset added to every downstream token.
    pub bias: f64,
    /// Assign downstream labels through a random permutation.
    pub permute_labels: bool,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            angle_deg: 30.0,
            redraw_fraction: 0.5,
            bias: 0.0,
            permute_labels: true,
        }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec {
            angle_deg: 0.0,
            redraw_fraction: 0.0,
            bias: 0.0,
            permute_labels: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub tokens: usize,
    pub input_width: usize,
    /// Std of the per-element Gaussian noise around each prototype.
    pub noise: f64,
    #[serde(default)]
    pub shift: ShiftSpec,
}

impl TaskConfig {
    pub fn for_backbone(cfg: &BackboneConfig) -> Self {
        TaskConfig {
            classes: cfg.classes,
            tokens: cfg.tokens,
            input_width: cfg.input_width,
            noise: DEFAULT_NOISE,
            shift: ShiftSpec::default(),
        }
    }
}

pub const DEFAULT_NOISE: f64 = 2.0;

/// Class prototypes for both distributions, fixed by a seed.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub seed: u64,
    pub config: TaskConfig,
    pretrain: Vec<Tensor>,
    downstream: Vec<Tensor>,
    label_map: Vec<usize>,
}

fn rotate_rows(t: &mut Tensor, u: &[f64], v: &[f64], angle: f64) {
    let (c, s) = (angle.cos(), angle.sin());
    let d = u.len();
    for row in t.data_mut().chunks_mut(d) {
        let a: f64 = row.iter().zip(u).map(|(x, y)| x * y).sum();
        let b: f64 = row.iter().zip(v).map(|(x, y)| x * y).sum();
        let (da, db) = (a * c - b * s - a, a * s + b * c - b);
        for ((r, ui), vi) in row.iter_mut().zip(u).zip(v) {
            *r += da * ui + db * vi;
        }
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

impl SyntheticTask {
    pub fn new(config: TaskConfig, seed: u64) -> Result<Self> {
        let (c, t, d) = (config.classes, config.tokens, config.input_width);
        if c == 0 || t == 0 || d < 2 {
            return Err(Error::config(
                "task",
                "classes, tokens must be positive and input_width >= 2",
            ));
        }
        if !(0.0..=1.0).contains(&config.shift.redraw_fraction) || config.noise < 0.0 {
            return Err(Error::config(
                "task",
                "redraw_fraction must lie in [0, 1] and noise be >= 0",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0xC1A55]));
        let pretrain: Vec<Tensor> = (0..c)
            .map(|_| Tensor::randn(&[t, d], 1.0, &mut rng))
            .collect();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5_1F7_u64]));
        let mut u: Vec<f64> = Tensor::randn(&[d], 1.0, &mut rng).into_data();
        unit(&mut u);
        let mut v: Vec<f64> = Tensor::randn(&[d], 1.0, &mut rng).into_data();
        let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(x, y)| *x -= dot * y);
        unit(&mut v);
        let offset = Tensor::randn(&[d], config.shift.bias, &mut rng);
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(&mut rng);
        let redraw = (config.shift.redraw_fraction * c as f64).round() as usize;
        let mut downstream = pretrain.clone();
        for &k in &order[..redraw] {
            downstream[k] = Tensor::randn(&[t, d], 1.0, &mut rng);
        }
        let angle = config.shift.angle_deg.to_radians();
        for p in &mut downstream {
            rotate_rows(p, &u, &v, angle);
            for row in p.data_mut().chunks_mut(d) {
                row.iter_mut().zip(offset.data()).for_each(|(x, o)| *x += o);
            }
        }
        let mut label_map: Vec<usize> = (0..c).collect();
        if config.shift.permute_labels {
            label_map.shuffle(&mut rng);
        }
        Ok(SyntheticTask {
            seed,
            config,
            pretrain,
            downstream,
            label_map,
        })
    }

    pub fn prototype(&self, split: Split, class: usize) -> &Tensor {
        if split.is_downstream() {
            &self.downstream[class]
        } else {
            &self.pretrain[class]
        }
    }

    /// One sample; its class is `index mod C`.
    pub fn sample(&self, split: Split, index: usize) -> (Tensor, usize) {
        let c = index % self.config.classes;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, split.code(), index as u64]));
        let proto = self.prototype(split, c);
        let noise = Tensor::randn(proto.shape(), self.config.noise, &mut rng);
        let x = if self.config.noise == 0.0 {
            proto.clone()
        } else {
            proto.add(&noise).expect("same shape")
        };
        let label = if split.is_downstream() {
            self.label_map[c]
        } else {
            c
        };
        (x, label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, T, d_in]` (or `[N, d]` for cached features).
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn row_len(&self) -> usize {
        self.inputs.numel() / self.len()
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let row = self.row_len();
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&shape, data).expect("row-sized"), labels)
    }
}

pub fn generate_dataset(task: &SyntheticTask, split: Split, size: usize) -> Result<Dataset> {
    if size == 0 {
        return Err(Error::Contract("dataset size must be >= 1".into()));
    }
    let (t, d) = (task.config.tokens, task.config.input_width);
    let mut data = Vec::with_capacity(size * t * d);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let (x, y) = task.sample(split, i);
        data.extend_from_slice(x.data());
        labels.push(y);
    }
    Ok(Dataset {
        inputs: Tensor::new(&[size, t, d], data)?,
        labels,
    })
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moments exist only for parameters that were trainable when the state was created.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let ids = store.trainable_ids();
        let m = ids
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).value.shape()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).value.shape()))
            .collect();
        AdamW {
            config,
            ids,
            m,
            v,
            step: 0,
        }
    }

    pub fn tracked(&self) -> &[ParamId] {
        &self.ids
    }

    /// Decoupled decay `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam update.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * c.weight_decay;
        for (k, &id) in self.ids.iter().enumerate() {
            let var = store.get_mut(id);
            if !var.trainable {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = var.grad.data();
            let w = var.value.data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] = w[i] * decay - lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            base_lr: 0.005,
            warmup_epochs: 10,
            epochs: 50,
        }
    }
}

/// Linear warmup from 0, then cosine decay to 0 at the final step; 0 past the end.
pub fn lr_at_step(s: &Schedule, step: usize, steps_per_epoch: usize) -> f64 {
    let total = s.epochs * steps_per_epoch;
    if step >= total {
        return 0.0;
    }
    let warm = s.warmup_epochs.min(s.epochs) * steps_per_epoch;
    if step < warm {
        return s.base_lr * step as f64 / warm as f64;
    }
    let span = (total - warm - 1).max(1) as f64;
    let p = (step - warm) as f64 / span;
    0.5 * s.base_lr * (1.0 + (PI * p).cos())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Anything that maps an input batch to logits with parameters from its store.
pub trait Classifier {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl Classifier for Backbone {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        backbone::forward_graph(g, &self.config, &self.layout, &self.params, x, &NoTuning)
            .map(|(l, _)| l)
    }

    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl Classifier for ComposedModel {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        self.forward_graph(g, x).map(|(l, _)| l)
    }

    fn store(&self) -> &ParamStore {
        self.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.params_mut()
    }
}

/// Head-only classifier over precomputed features `[N, d]`.
struct FeatureHead<'a> {
    backbone: &'a mut Backbone,
}

impl Classifier for FeatureHead<'_> {
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        backbone::head_graph(g, &self.backbone.layout, &self.backbone.params, x)
    }

    fn store(&self) -> &ParamStore {
        &self.backbone.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.backbone.params
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub eval_batch: usize,
    pub precision: Precision,
    pub optimizer: AdamWConfig,
    /// Seed of the minibatch order.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 32,
            eval_batch: 250,
            precision: Precision::F64,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<EpochRow>,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,test_acc";

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:e},{},{},{}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc
            );
        }
        s
    }

    pub fn last(&self) -> &EpochRow {
        self.rows.last().expect("history has the epoch-0 row")
    }

    pub fn first(&self) -> &EpochRow {
        &self.rows[0]
    }
}

/// (mean loss, accuracy) over a dataset without recording gradients.
pub fn evaluate(model: &dyn Classifier, data: &Dataset, opts: &TrainOptions) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(opts.eval_batch.max(1)) {
        let (x, y) = data.batch(chunk);
        let mut g = Graph::with_options(GraphOptions::training(opts.precision));
        let xn = g.constant(x);
        let logits = model.logits(&mut g, xn)?;
        correct += count_correct(g.value(logits), &y);
        let l = g.cross_entropy(logits, &y)?;
        loss += g.value(l).item()? * chunk.len() as f64;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            best == y
        })
        .count()
}

fn frozen_snapshot(store: &ParamStore) -> Vec<(ParamId, Tensor)> {
    store
        .iter()
        .filter(|(_, v)| !v.trainable)
        .map(|(id, v)| (id, v.value.clone()))
        .collect()
}

fn check_frozen(store: &ParamStore, snap: &[(ParamId, Tensor)]) -> Result<()> {
    for (id, before) in snap {
        let now = &store.get(*id).value;
        let same = now
            .data()
            .iter()
            .zip(before.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(Error::FrozenModified(store.get(*id).name.clone()));
        }
    }
    Ok(())
}

/// One optimisation step on a minibatch; returns (loss, correct).
pub fn train_step(
    model: &mut dyn Classifier,
    opt: &mut AdamW,
    x: Tensor,
    y: &[usize],
    lr: f64,
    precision: Precision,
) -> Result<(f64, usize)> {
    model.store_mut().zero_grad();
    let mut g = Graph::with_options(GraphOptions::training(precision));
    let xn = g.constant(x);
    let logits = model.logits(&mut g, xn)?;
    let correct = count_correct(g.value(logits), y);
    let loss = g.cross_entropy(logits, y)?;
    let value = g.value(loss).item()?;
    g.backward(loss, model.store_mut())?;
    opt.step(model.store_mut(), lr);
    Ok((value, correct))
}

/// Minibatch AdamW over `train`, evaluating on `test` after every epoch.
/// Frozen parameters are checked bit-for-bit at the end.
pub fn fit(
    model: &mut dyn Classifier,
    train: &Dataset,
    test: &Dataset,
    schedule: &Schedule,
    opts: &TrainOptions,
) -> Result<History> {
    let snap = frozen_snapshot(model.store());
    let mut opt = AdamW::new(model.store(), opts.optimizer);
    let bs = opts.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(bs);
    let mut history = History::default();
    let (l0, a0) = evaluate(model, train, opts)?;
    let (_, t0) = evaluate(model, test, opts)?;
    history.rows.push(EpochRow {
        epoch: 0,
        lr: 0.0,
        train_loss: l0,
        train_acc: a0,
        test_acc: t0,
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=schedule.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[opts.seed, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        let mut lr = 0.0;
        for chunk in order.chunks(bs) {
            let (x, y) = train.batch(chunk);
            lr = lr_at_step(schedule, step, steps_per_epoch);
            let (l, c) = train_step(model, &mut opt, x, &y, lr, opts.precision)?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("loss {l} at step {step}"),
                });
            }
            loss_sum += l * chunk.len() as f64;
            correct += c;
            step += 1;
        }
        let (_, test_acc) = evaluate(model, test, opts)?;
        history.rows.push(EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
        });
    }
    check_frozen(model.store(), &snap)?;
    Ok(history)
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSizes {
    pub train: usize,
    pub test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        DataSizes {
            train: 2000,
            test: 1000,
        }
    }
}

pub fn pretrain_schedule(epochs: usize) -> Schedule {
    Schedule {
        base_lr: 0.001,
        warmup_epochs: (epochs / 10).max(1),
        epochs,
    }
}

/// Trains every backbone parameter on the pretraining split.
pub fn pretrain_backbone(
    task: &SyntheticTask,
    backbone: &mut Backbone,
    schedule: &Schedule,
    sizes: &DataSizes,
    opts: &TrainOptions,
) -> Result<History> {
    backbone.unfreeze();
    let train = generate_dataset(task, Split::PretrainTrain, sizes.train)?;
    let test = generate_dataset(task, Split::PretrainTest, sizes.test)?;
    fit(backbone, &train, &test, schedule, opts)
}

/// Fine-tunes the head and tuners of `model` on the downstream split.
pub fn finetune_petl(
    model: &mut ComposedModel,
    task: &SyntheticTask,
    schedule: &Schedule,
    sizes: &DataSizes,
    opts: &TrainOptions,
) -> Result<History> {
    let train = generate_dataset(task, Split::DownstreamTrain, sizes.train)?;
    let test = generate_dataset(task, Split::DownstreamTest, sizes.test)?;
    fit(model, &train, &test, schedule, opts)
}

/// Pooled frozen features `[N, d]` of a dataset.
pub fn extract_features(
    backbone: &Backbone,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<Dataset> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut feats = Vec::with_capacity(data.len() * backbone.config.width);
    for chunk in idx.chunks(opts.eval_batch.max(1)) {
        let (x, _) = data.batch(chunk);
        let mut g = Graph::with_options(GraphOptions::training(opts.precision));
        let xn = g.constant(x);
        let enc = backbone::encode_graph(
            &mut g,
            &backbone.config,
            &backbone.layout,
            &backbone.params,
            xn,
            &NoTuning,
        )?;
        feats.extend_from_slice(g.value(enc.features).data());
    }
    Ok(Dataset {
        inputs: Tensor::new(&[data.len(), backbone.config.width], feats)?,
        labels: data.labels.clone(),
    })
}

/// Trains only the classifier head of a frozen copy of `backbone`, on cached
/// features. Returns the trained model (as an empty composition) and metrics.
pub fn linear_probe(
    backbone: &Backbone,
    task: &SyntheticTask,
    schedule: &Schedule,
    sizes: &DataSizes,
    opts: &TrainOptions,
) -> Result<(ComposedModel, History)> {
    let mut model = compose(backbone, &UTuningConfig::empty(), 0)?;
    let train = generate_dataset(task, Split::DownstreamTrain, sizes.train)?;
    let test = generate_dataset(task, Split::DownstreamTest, sizes.test)?;
    let ftrain = extract_features(&model.backbone, &train, opts)?;
    let ftest = extract_features(&model.backbone, &test, opts)?;
    let snap = frozen_snapshot(model.params());
    let history = {
        let mut head = FeatureHead {
            backbone: &mut model.backbone,
        };
        fit(&mut head, &ftrain, &ftest, schedule, opts)?
    };
    check_frozen(model.params(), &snap)?;
    Ok((model, history))
}
