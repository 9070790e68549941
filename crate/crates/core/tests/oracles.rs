//! Closed-form values computed by hand, independent of the library's own formulas.

use utuning::backbone::BackboneConfig;
use utuning::composer::{count_params, OpSite, TunerKind, UTuningConfig};
use utuning::tensor::{gelu_scalar, softmax, Tensor};
use utuning::tuners::compute_lambda_gate;

#[test]
fn vitb16_reference_counts() {
    let bb = BackboneConfig::vitb16(100);
    // 768 × 100 head weights plus 100 biases.
    assert_eq!(
        count_params(&bb, &UTuningConfig::empty())
            .unwrap()
            .trainable(),
        76_900
    );
    // Plus 12 layers × 10 prompts × 768 channels.
    assert_eq!(
        count_params(&bb, &UTuningConfig::vpt_deep(10))
            .unwrap()
            .trainable(),
        169_060
    );
}

#[test]
fn single_site_counts_on_the_desk_backbone() {
    let bb = BackboneConfig::desk();
    let (l, d, r, c) = (4, 64, 10, 10);
    let head = d * c + c;
    let per_layer = |kind: TunerKind, site: OpSite| -> usize {
        let core = match (kind, site) {
            (TunerKind::Adapter, _) => 2 * d * r,
            (TunerKind::Prefix, OpSite::Mha) => 2 * r * d,
            (TunerKind::Prompt, OpSite::Mha) => r * d,
            // Own query, key and value projections at sites without attention.
            (TunerKind::Prefix, _) => 2 * r * d + 3 * d * d,
            (TunerKind::Prompt, _) => r * d + 3 * d * d,
        };
        core + d
    };
    for site in [OpSite::Mha, OpSite::Ffn, OpSite::Block] {
        for kind in [TunerKind::Prefix, TunerKind::Prompt, TunerKind::Adapter] {
            let n = count_params(&bb, &UTuningConfig::single(site, kind)).unwrap();
            assert_eq!(
                n.trainable(),
                head + l * per_layer(kind, site),
                "{site:?} {kind:?}"
            );
        }
    }
}

#[test]
fn softmax_of_log_weights() {
    let x = Tensor::new(&[1, 3], vec![0.0, 2f64.ln(), 3f64.ln()]).unwrap();
    let s = softmax(&x, 1).unwrap();
    for (got, want) in s.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn gelu_at_one() {
    // 0.5 · (1 + tanh(√(2/π) · 1.044715))
    assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-15);
    assert_eq!(gelu_scalar(0.0), 0.0);
}

#[test]
fn lambda_with_uninformative_queries_is_the_key_share() {
    // Zero queries give equal logits, so λ = m / (n + m).
    for (n, m) in [(1, 1), (3, 1), (2, 5), (7, 4)] {
        let q = Tensor::zeros(&[2, 3, 4]);
        let k = Tensor::full(&[2, n, 4], 0.7);
        let kp = Tensor::full(&[2, m, 4], -1.3);
        let lambda = compute_lambda_gate(&q, &k, Some(&kp)).unwrap().lambda;
        let want = m as f64 / (n + m) as f64;
        assert!(
            lambda.data().iter().all(|l| (l - want).abs() < 1e-15),
            "n={n} m={m}"
        );
    }
}

#[test]
fn lambda_for_one_original_and_one_extra_key() {
    // λ = e^b / (e^a + e^b) with a = q·k/√d, b = q·k'/√d.
    let q = Tensor::new(&[1, 1, 4], vec![1.0, 0.0, 2.0, 0.0]).unwrap();
    let k = Tensor::new(&[1, 1, 4], vec![0.5, 0.0, 0.5, 0.0]).unwrap();
    let kp = Tensor::new(&[1, 1, 4], vec![0.0, 0.0, 1.0, 3.0]).unwrap();
    let (a, b): (f64, f64) = (1.5 / 2.0, 2.0 / 2.0);
    let want = b.exp() / (a.exp() + b.exp());
    let got = compute_lambda_gate(&q, &k, Some(&kp))
        .unwrap()
        .lambda
        .data()[0];
    assert!((got - want).abs() < 1e-15);
}
