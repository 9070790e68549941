//! End-to-end runs: pretrain → probe vs dual adapter, and the ablation grid.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{Backbone, BackboneConfig};
use crate::composer::{
    compose, count_params, enumerate_ablation_grid, ComposedModel, TunerKind, UTuningConfig,
};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::train::{
    derive_seed, finetune_petl, linear_probe, pretrain_backbone, pretrain_schedule, DataSizes,
    History, Schedule, SyntheticTask, TaskConfig, TrainOptions, DEFAULT_NOISE,
};
use crate::tuners::ScalingKind;

/// Fine-tuning schedule with the warmup taking a fifth of the epochs.
pub fn finetune_schedule(epochs: usize, base_lr: f64) -> Schedule {
    Schedule {
        base_lr,
        warmup_epochs: epochs / 5,
        epochs,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSettings {
    pub backbone: BackboneConfig,
    pub noise: f64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub base_lr: f64,
    pub sizes: DataSizes,
}

impl Default for TransferSettings {
    fn default() -> Self {
        TransferSettings {
            backbone: BackboneConfig::desk(),
            noise: DEFAULT_NOISE,
            pretrain_epochs: 5,
            finetune_epochs: 6,
            base_lr: 0.005,
            sizes: DataSizes::default(),
        }
    }
}

impl TransferSettings {
    pub fn task(&self, seed: u64) -> Result<SyntheticTask> {
        let mut tc = TaskConfig::for_backbone(&self.backbone);
        tc.noise = self.noise;
        SyntheticTask::new(tc, seed)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TransferOutcome {
    pub seed: u64,
    pub pretrain_train_acc: f64,
    pub pretrain_test_acc: f64,
    pub probe_acc: f64,
    pub dual_acc: f64,
    pub seconds: f64,
    pub probe: History,
    pub dual: History,
}

impl TransferOutcome {
    /// Dual minus probe test accuracy, in points.
    pub fn gap_points(&self) -> f64 {
        100.0 * (self.dual_acc - self.probe_acc)
    }
}

/// Pretrains a fresh backbone and returns it with a zeroed head.
pub fn pretrained_backbone(
    task: &SyntheticTask,
    settings: &TransferSettings,
    seed: u64,
    opts: &TrainOptions,
) -> Result<(Backbone, History)> {
    let mut bb = Backbone::new(settings.backbone.clone(), seed)?;
    let h = pretrain_backbone(
        task,
        &mut bb,
        &pretrain_schedule(settings.pretrain_epochs),
        &settings.sizes,
        opts,
    )?;
    bb.reset_head();
    Ok((bb, h))
}

/// Linear probe and default dual adapter on the same pretrained backbone.
pub fn run_transfer(seed: u64, settings: &TransferSettings) -> Result<TransferOutcome> {
    let started = Instant::now();
    let opts = TrainOptions {
        seed,
        ..Default::default()
    };
    let task = settings.task(seed)?;
    let (bb, pre) = pretrained_backbone(&task, settings, seed, &opts)?;
    let sched = finetune_schedule(settings.finetune_epochs, settings.base_lr);
    let (_, probe) = linear_probe(&bb, &task, &sched, &settings.sizes, &opts)?;
    let mut model = compose(&bb, &UTuningConfig::default_dual(), seed)?;
    let dual = finetune_petl(&mut model, &task, &sched, &settings.sizes, &opts)?;
    Ok(TransferOutcome {
        seed,
        pretrain_train_acc: pre.last().train_acc,
        pretrain_test_acc: pre.last().test_acc,
        probe_acc: probe.last().test_acc,
        dual_acc: dual.last().test_acc,
        seconds: started.elapsed().as_secs_f64(),
        probe,
        dual,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub name: String,
    pub group: String,
    pub params: usize,
    pub counted_params: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub final_test_acc: f64,
    pub loss_reduced: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    pub history: History,
}

pub const GRID_SUMMARY_HEADER: &str =
    "config,group,params,first_loss,last_loss,final_test_acc,error";

pub fn grid_summary_csv(rows: &[GridRow]) -> String {
    let mut s = format!("{GRID_SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name,
            r.group,
            r.params,
            r.first_loss,
            r.last_loss,
            r.final_test_acc,
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    s
}

/// Fine-tunes every grid config from `backbone`; a failing config is recorded and the grid continues.
pub fn run_grid(
    backbone: &Backbone,
    task: &SyntheticTask,
    schedule: &Schedule,
    sizes: &DataSizes,
    opts: &TrainOptions,
    mut on_row: impl FnMut(&GridRow),
) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for entry in enumerate_ablation_grid() {
        let counted = count_params(&backbone.config, &entry.config)
            .map(|c| c.trainable())
            .unwrap_or(0);
        let mut row = GridRow {
            name: entry.name.clone(),
            group: entry.group.into(),
            params: 0,
            counted_params: counted,
            first_loss: f64::NAN,
            last_loss: f64::NAN,
            final_test_acc: f64::NAN,
            loss_reduced: false,
            error: None,
            history: History::default(),
        };
        let run = compose(backbone, &entry.config, opts.seed).and_then(|mut m| {
            row.params = m.count_trainable_params();
            finetune_petl(&mut m, task, schedule, sizes, opts)
        });
        match run {
            Ok(h) => {
                row.first_loss = h.first().train_loss;
                row.last_loss = h.last().train_loss;
                row.final_test_acc = h.last().test_acc;
                row.loss_reduced = row.last_loss < row.first_loss;
                row.history = h;
            }
            Err(e) => row.error = Some(e.to_string()),
        }
        on_row(&row);
        rows.push(row);
    }
    rows
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingIdentity {
    pub bit_exact: bool,
    pub max_abs_diff: f64,
    /// Largest tuner contribution, to show the check is not vacuous.
    pub max_delta: f64,
}

/// Direct vs channel-wise scaling with `s = 1` on identical, nonzero tuner weights.
/// Compares pooled features.
pub fn scaling_identity(backbone: &Backbone, seed: u64) -> Result<ScalingIdentity> {
    let direct_cfg =
        UTuningConfig::dual(TunerKind::Adapter, TunerKind::Adapter, ScalingKind::Direct);
    let channel_cfg = UTuningConfig::dual(
        TunerKind::Adapter,
        TunerKind::Adapter,
        ScalingKind::ChannelWise,
    );
    let mut direct = compose(backbone, &direct_cfg, seed)?;
    let mut channel = compose(backbone, &channel_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5CA1E]));
    for (_, v) in direct.params_mut().iter_mut() {
        if v.name.starts_with("tuner.") {
            v.value = Tensor::randn(v.value.shape(), 0.5, &mut rng);
        }
    }
    for (_, v) in channel.params_mut().iter_mut() {
        if let Some(src) = direct.params().by_name(&v.name) {
            v.value = src.value.clone();
        }
    }
    let cfg = &backbone.config;
    let x = Tensor::randn(&[4, cfg.tokens, cfg.input_width], 1.0, &mut rng);
    let a = features(&direct, &x)?;
    let b = features(&channel, &x)?;
    direct.zero_deltas = true;
    let frozen = features(&direct, &x)?;
    Ok(ScalingIdentity {
        bit_exact: a
            .data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()),
        max_abs_diff: a.max_abs_diff(&b)?,
        max_delta: a.max_abs_diff(&frozen)?,
    })
}

/// Pooled features, so the comparison does not depend on the head.
fn features(model: &ComposedModel, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let f = model.features_graph(&mut g, xn)?;
    Ok(g.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_identity_is_bit_exact_and_nontrivial() {
        let bb = Backbone::new(BackboneConfig::tiny(), 1).unwrap();
        let mut cfg = bb.config.clone();
        cfg.width = 16;
        cfg.ffn_width = 32;
        let mut bb = Backbone::new(cfg, 1).unwrap();
        bb.reset_head();
        let r = scaling_identity(&bb, 4).unwrap();
        assert!(r.bit_exact);
        assert!(r.max_delta > 1e-6);
    }

    #[test]
    fn schedule_warmup_is_a_fifth() {
        assert_eq!(finetune_schedule(50, 0.005).warmup_epochs, 10);
        assert_eq!(finetune_schedule(2, 0.005).warmup_epochs, 0);
    }
}
