//! Property tests for numeric and structural invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use utuning::backbone::{AttentionProjections, BackboneConfig};
use utuning::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
use utuning::tensor::{concat, layer_norm, matmul, softmax, split, Precision, Tensor};
use utuning::train::{derive_seed, lr_at_step, Schedule};
use utuning::tuners::{
    adapter_parallel, adapter_sequential, compute_lambda_gate, gated_softmax_rows, heads_of,
    prefix_original, prefix_parallel, prompt_original, prompt_parallel, AdapterTuner, GateMode,
    PrefixTuner, PromptTuner,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a.get(&[i, p]) * b.get(&[p, j])).sum();
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..7, k in 1usize..9, n in 1usize..7, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Tensor::randn(&[m, k], 1.0, &mut r);
        let b = Tensor::randn(&[k, n], 1.0, &mut r);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive_matmul(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, scale in 0.1f64..200.0, seed in any::<u64>()) {
        let x = Tensor::randn(&[rows, cols], scale, &mut rng(seed));
        let s = softmax(&x, 1).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(cols in 1usize..9, shift in -500.0f64..500.0, seed in any::<u64>()) {
        let x = Tensor::randn(&[2, cols], 1.0, &mut rng(seed));
        let a = softmax(&x, 1).unwrap();
        let b = softmax(&x.map(|v| v + shift), 1).unwrap();
        prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..5, d in 2usize..17, seed in any::<u64>()) {
        let x = Tensor::randn(&[rows, d], 3.0, &mut rng(seed)).map(|v| v + 7.0);
        let y = layer_norm(&x, &Tensor::ones(&[d]), &Tensor::zeros(&[d]), 1e-12).unwrap();
        for row in y.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn concat_then_split_round_trips(a in 1usize..4, b in 1usize..4, axis in 0usize..3, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut sa = vec![2, 3, 4];
        let mut sb = sa.clone();
        sa[axis] = a;
        sb[axis] = b;
        let x = Tensor::randn(&sa, 1.0, &mut r);
        let y = Tensor::randn(&sb, 1.0, &mut r);
        let parts = split(&concat(&[&x, &y], axis).unwrap(), axis, &[a, b]).unwrap();
        prop_assert_eq!(&parts[0], &x);
        prop_assert_eq!(&parts[1], &y);
    }

    #[test]
    fn lambda_is_a_probability_and_rebuilds_rows(
        h in 1usize..4, t in 1usize..7, m in 1usize..8, dh in 1usize..6, scale in 0.1f64..4.0, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let q = Tensor::randn(&[h, t, dh], scale, &mut r);
        let k = Tensor::randn(&[h, t, dh], scale, &mut r);
        let kp = Tensor::randn(&[h, m, dh], scale, &mut r);
        let gate = compute_lambda_gate(&q, &k, Some(&kp)).unwrap();
        let joint_k = concat(&[&k, &kp], 1).unwrap();
        let logits = matmul(&q, &utuning::tensor::permute(&joint_k, &[0, 2, 1]).unwrap())
            .unwrap()
            .scale(1.0 / (dh as f64).sqrt());
        prop_assert!(gate.lambda.data().iter().all(|l| (0.0..=1.0).contains(l)));
        // With bounded logits 1 - λ stays above f64 resolution, so the interval is open.
        if logits.data().iter().all(|v| v.abs() <= 15.0) {
            prop_assert!(gate.lambda.data().iter().all(|&l| l > 0.0 && l < 1.0));
        }
        let rows = gated_softmax_rows(&q, &k, &kp).unwrap();
        let joint = softmax(&logits, 2).unwrap();
        prop_assert!(rows.max_abs_diff(&joint).unwrap() < 1e-12);
    }

    #[test]
    fn prompt_lambda_matches_prefix_of_prompt_keys(t in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (d, h) = (8, 2);
        let proj = AttentionProjections::random(d, h, &mut r).unwrap();
        let x = Tensor::randn(&[t, d], 1.0, &mut r);
        let p = Tensor::randn(&[n, d], 1.0, &mut r);
        let gates = utuning::tuners::compute_prompt_gates(&x, &proj, &PromptTuner::new(p.clone()).unwrap()).unwrap();
        let q = heads_of(&x, &proj.w_q, h).unwrap();
        let k = heads_of(&x, &proj.w_k, h).unwrap();
        let kp = heads_of(&p, &proj.w_k, h).unwrap();
        let direct = compute_lambda_gate(&q, &k, Some(&kp)).unwrap();
        prop_assert_eq!(gates.lambda, direct.lambda);
        let beta = gates.beta.unwrap();
        prop_assert!(beta.data().iter().all(|&b| (0.0..=1.0).contains(&b)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parallel_forms_equal_originals(
        b in 1usize..3, t in 1usize..6, m in 1usize..6, heads in prop::sample::select(vec![1usize, 2, 4]),
        seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let d = 16;
        let proj = AttentionProjections::random(d, heads, &mut r).unwrap();
        let x = Tensor::randn(&[b, t, d], 1.0, &mut r);
        let prefix = PrefixTuner::random(heads, m, d / heads, 1.0, &mut r);
        let a = prefix_original(&x, &proj, &prefix).unwrap();
        let p = prefix_parallel(&x, &proj, &prefix, GateMode::Exact).unwrap();
        prop_assert!(a.max_abs_diff(&p).unwrap() < 1e-9);

        let prompt = PromptTuner::random(m, d, 1.0, &mut r);
        for discard in [true, false] {
            let a = prompt_original(&x, &proj, &prompt, discard).unwrap();
            let p = prompt_parallel(&x, &proj, &prompt, discard, GateMode::Exact).unwrap();
            prop_assert!(a.max_abs_diff(&p).unwrap() < 1e-9);
        }

        let mut adapter = AdapterTuner::init(d, 4, &mut r).unwrap();
        adapter.w_up = Tensor::randn(&[4, d], 0.5, &mut r);
        let seq = adapter_sequential(&x, &adapter).unwrap();
        let par = x.add(&adapter_parallel(&x, &adapter).unwrap()).unwrap();
        prop_assert_eq!(seq, par);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 0..5), seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let tensors: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("t{i}"), Tensor::randn(s, 1e3, &mut r)))
            .collect();
        let ckpt = Checkpoint { meta: CheckpointMeta::new(BackboneConfig::tiny()), tensors };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt, Precision::F64).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back.tensors, ckpt.tensors);
    }

    #[test]
    fn schedule_stays_within_base_rate(epochs in 1usize..60, spe in 1usize..20, base in 1e-5f64..1.0) {
        let s = Schedule { base_lr: base, warmup_epochs: epochs / 5, epochs };
        for step in 0..epochs * spe {
            let lr = lr_at_step(&s, step, spe);
            prop_assert!(lr >= 0.0 && lr <= base * (1.0 + 1e-12));
        }
    }

    #[test]
    fn derived_seeds_are_deterministic_and_order_sensitive(a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive_seed(&[a, b]), derive_seed(&[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(&[a, b]), derive_seed(&[b, a]));
        }
    }
}
