//! Every differentiable op against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use utuning::autograd::{Graph, NodeId, ParamStore};
use utuning::error::Result;
use utuning::gradcheck::{finite_difference_gradient, relative_error, DEFAULT_STEP};
use utuning::tensor::Tensor;

const TOL: f64 = 1e-6;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn scalarize(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    if g.shape(out).is_empty() {
        return Ok(out);
    }
    let w = g.constant(randn(g.shape(out), 99));
    let p = g.mul(out, w)?;
    g.sum(p)
}

fn check<F>(name: &str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &nodes).unwrap();
    let loss = scalarize(&mut g, out).unwrap();
    let grads = g.backward(loss, &mut ParamStore::new()).unwrap();
    for (i, &node) in nodes.iter().enumerate() {
        let analytic = grads
            .get(node)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let numeric = finite_difference_gradient(
            |t| {
                let mut g = Graph::new();
                let nodes: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| g.constant(if j == i { t.clone() } else { x.clone() }))
                    .collect();
                let out = build(&mut g, &nodes)?;
                let loss = scalarize(&mut g, out)?;
                g.value(loss).item()
            },
            &inputs[i],
            DEFAULT_STEP,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric).unwrap();
        assert!(err < TOL, "{name}: input {i} relative error {err:e}");
    }
}

#[test]
fn matmul_batched_and_broadcast() {
    check(
        "matmul",
        &[randn(&[2, 3, 4], 1), randn(&[2, 4, 5], 2)],
        |g, n| g.matmul(n[0], n[1]),
    );
    check(
        "matmul-bcast",
        &[randn(&[2, 3, 4], 3), randn(&[4, 2], 4)],
        |g, n| g.matmul(n[0], n[1]),
    );
}

#[test]
fn elementwise_with_broadcasting() {
    let a = randn(&[2, 3, 4], 5);
    let b = randn(&[4], 6);
    check("add", &[a.clone(), b.clone()], |g, n| g.add(n[0], n[1]));
    check("sub", &[a.clone(), b.clone()], |g, n| g.sub(n[0], n[1]));
    check("mul", &[a.clone(), randn(&[3, 1], 7)], |g, n| {
        g.mul(n[0], n[1])
    });
    check("affine", &[a], |g, n| g.affine(n[0], -1.7, 0.3));
}

#[test]
fn activations() {
    let x = randn(&[3, 5], 8);
    check("gelu", std::slice::from_ref(&x), |g, n| g.gelu(n[0]));
    check("sigmoid", std::slice::from_ref(&x), |g, n| g.sigmoid(n[0]));
    // Keep away from the kink.
    let shifted = x.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    check("relu", &[shifted], |g, n| g.relu(n[0]));
}

#[test]
fn normalizations() {
    let x = randn(&[2, 3, 6], 9);
    check("softmax-last", std::slice::from_ref(&x), |g, n| {
        g.softmax(n[0], 2)
    });
    check("softmax-mid", std::slice::from_ref(&x), |g, n| {
        g.softmax(n[0], 1)
    });
    check(
        "layer_norm",
        &[x, randn(&[6], 10), randn(&[6], 11)],
        |g, n| g.layer_norm(n[0], n[1], n[2]),
    );
}

#[test]
fn shape_ops() {
    let x = randn(&[2, 3, 4], 12);
    check("concat", &[x.clone(), randn(&[2, 2, 4], 13)], |g, n| {
        g.concat(&[n[0], n[1]], 1)
    });
    check("slice", std::slice::from_ref(&x), |g, n| {
        g.slice(n[0], 2, 1, 2)
    });
    check("reshape", std::slice::from_ref(&x), |g, n| {
        g.reshape(n[0], &[6, 4])
    });
    check("permute", std::slice::from_ref(&x), |g, n| {
        g.permute(n[0], &[2, 0, 1])
    });
    check("transpose", std::slice::from_ref(&x), |g, n| {
        g.transpose(n[0])
    });
    check("expand", &[randn(&[3, 4], 14)], |g, n| {
        g.expand(n[0], &[2, 2])
    });
    check("mean", std::slice::from_ref(&x), |g, n| g.mean(n[0], 1));
    check("sum", &[x], |g, n| g.sum(n[0]));
}

#[test]
fn cross_entropy() {
    check("cross_entropy", &[randn(&[4, 3], 15)], |g, n| {
        g.cross_entropy(n[0], &[0, 2, 1, 2])
    });
}

#[test]
fn gate_of_two_score_groups() {
    check(
        "gate",
        &[randn(&[2, 3, 5], 16), randn(&[2, 3, 4], 17)],
        |g, n| g.gate(n[0], n[1]),
    );
    // Large logits exercise the shared max.
    let big = randn(&[2, 3, 5], 18).scale(30.0);
    check(
        "gate-large",
        &[big, randn(&[2, 3, 4], 19).scale(30.0)],
        |g, n| g.gate(n[0], n[1]),
    );
}

#[test]
fn shared_input_accumulates_both_paths() {
    check("x*x+x", &[randn(&[3, 3], 20)], |g, n| {
        let sq = g.mul(n[0], n[0])?;
        let m = g.matmul(n[0], n[0])?;
        g.add(sq, m)
    });
}

#[test]
fn harness_rejects_a_wrong_backward() {
    let r = std::panic::catch_unwind(|| {
        check(
            "gate_unshared",
            &[randn(&[2, 3, 5], 21), randn(&[2, 3, 4], 22).scale(3.0)],
            |g, n| g.gate_unshared(n[0], n[1]),
        )
    });
    assert!(r.is_err());
}
