//! Composed models over a frozen backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use utuning::autograd::{Graph, ParamStore};
use utuning::backbone::{Backbone, BackboneConfig};
use utuning::composer::{compose, count_params, enumerate_ablation_grid, UTuningConfig};
use utuning::experiment::finetune_schedule;
use utuning::tensor::Tensor;
use utuning::train::{
    fit, generate_dataset, AdamW, AdamWConfig, Classifier, Split, SyntheticTask, TaskConfig,
    TrainOptions,
};
use utuning::verify::{gradcheck_backbone, identity_at_init, zero_init_identity};

fn small_backbone(seed: u64) -> Backbone {
    Backbone::new(gradcheck_backbone(), seed).unwrap()
}

#[test]
fn every_grid_config_starts_at_the_backbone() {
    let bb = small_backbone(1);
    for entry in enumerate_ablation_grid() {
        let r = zero_init_identity(&bb, &entry.name, &entry.config, 7, 3, 1e-12).unwrap();
        assert!(
            r.passed,
            "{}: output diff {:e}, stats diff {:e}",
            entry.name, r.max_output_diff, r.max_stats_diff
        );
        assert_eq!(
            r.mode == "natural",
            identity_at_init(&entry.config),
            "{}",
            entry.name
        );
    }
}

#[test]
fn composed_counts_match_shape_counts() {
    let bb = small_backbone(2);
    let mut configs: Vec<UTuningConfig> = enumerate_ablation_grid()
        .into_iter()
        .map(|e| e.config)
        .collect();
    configs.push(UTuningConfig::vpt_deep(3));
    configs.push(UTuningConfig::empty());
    for cfg in configs {
        let model = compose(&bb, &cfg, 0).unwrap();
        let counted = count_params(&bb.config, &cfg).unwrap();
        assert_eq!(
            model.count_trainable_params(),
            counted.trainable(),
            "{}",
            cfg.to_json()
        );
        assert_eq!(model.params().count_frozen(), counted.frozen);
    }
}

#[test]
fn split_batches_accumulate_to_the_full_batch_gradient() {
    let bb = small_backbone(3);
    let make_model = || {
        let mut model = compose(&bb, &UTuningConfig::default_dual(), 4).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        for (_, v) in model.params_mut().iter_mut() {
            if v.trainable {
                v.value = Tensor::randn(v.value.shape(), 0.2, &mut r);
            }
        }
        model
    };
    let mut model = make_model();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let c = bb.config.clone();
    let x = Tensor::randn(&[4, c.tokens, c.input_width], 1.0, &mut r);
    let y = [0, 2, 1, 1];

    let grads = |model: &mut dyn Classifier, parts: &[(usize, usize)]| -> Vec<Tensor> {
        model.store_mut().zero_grad();
        for &(start, len) in parts {
            let mut g = Graph::new();
            let xb = utuning::tensor::slice_axis(&x, 0, start, len).unwrap();
            let xn = g.constant(xb);
            let logits = model.logits(&mut g, xn).unwrap();
            let ce = g.cross_entropy(logits, &y[start..start + len]).unwrap();
            let loss = g.scale(ce, len as f64 / 4.0).unwrap();
            g.backward(loss, model.store_mut()).unwrap();
        }
        let store: &ParamStore = model.store();
        store
            .iter()
            .filter(|(_, v)| v.trainable)
            .map(|(_, v)| v.grad.clone())
            .collect()
    };
    let full = grads(&mut model, &[(0, 4)]);
    let split = grads(&mut model, &[(0, 1), (1, 3)]);
    for (a, b) in full.iter().zip(&split) {
        assert!(a.max_abs_diff(b).unwrap() < 1e-12);
    }
    assert!(full.iter().any(|g| g.norm() > 0.0));

    // One optimizer step from each gradient lands on the same weights.
    let step = |parts: &[(usize, usize)]| -> Vec<Tensor> {
        let mut m = make_model();
        let mut opt = AdamW::new(m.store(), AdamWConfig::default());
        grads(&mut m, parts);
        opt.step(m.store_mut(), 1e-2);
        m.store().iter().map(|(_, v)| v.value.clone()).collect()
    };
    let a = step(&[(0, 4)]);
    let b = step(&[(0, 2), (2, 2)]);
    for (x, y) in a.iter().zip(&b) {
        assert!(x.max_abs_diff(y).unwrap() < 1e-10);
    }
}

#[test]
fn training_leaves_the_backbone_untouched() {
    let cfg = BackboneConfig {
        layers: 2,
        width: 16,
        heads: 2,
        ffn_width: 32,
        tokens: 4,
        input_width: 8,
        classes: 3,
        class_token: false,
        activation: Default::default(),
    };
    let bb = Backbone::new(cfg.clone(), 6).unwrap();
    let task = SyntheticTask::new(TaskConfig::for_backbone(&cfg), 6).unwrap();
    let train = generate_dataset(&task, Split::DownstreamTrain, 48).unwrap();
    let test = generate_dataset(&task, Split::DownstreamTest, 24).unwrap();
    let mut model = compose(&bb, &UTuningConfig::default_dual(), 6).unwrap();
    let opts = TrainOptions {
        batch_size: 16,
        ..Default::default()
    };
    let h = fit(
        &mut model,
        &train,
        &test,
        &finetune_schedule(3, 0.01),
        &opts,
    )
    .unwrap();
    assert!(h.last().train_loss < h.first().train_loss);
    for (_, v) in model.params().iter().filter(|(_, v)| !v.trainable) {
        let original = bb
            .params
            .by_name(&v.name)
            .expect("frozen tensors come from the backbone");
        assert!(v
            .value
            .data()
            .iter()
            .zip(original.value.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn fixed_seeds_give_identical_metrics() {
    let cfg = gradcheck_backbone();
    let task = SyntheticTask::new(TaskConfig::for_backbone(&cfg), 8).unwrap();
    let train = generate_dataset(&task, Split::DownstreamTrain, 40).unwrap();
    let test = generate_dataset(&task, Split::DownstreamTest, 20).unwrap();
    let run = || {
        let bb = Backbone::new(cfg.clone(), 8).unwrap();
        let mut model = compose(&bb, &UTuningConfig::default_dual(), 8).unwrap();
        let opts = TrainOptions {
            batch_size: 8,
            seed: 8,
            ..Default::default()
        };
        fit(
            &mut model,
            &train,
            &test,
            &finetune_schedule(2, 0.01),
            &opts,
        )
        .unwrap()
        .to_csv()
    };
    assert_eq!(run(), run());
}
