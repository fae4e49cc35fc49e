//! Finite-difference checks for every differentiable op.

use mtnmt::tensor::{grad_check, GradCheckConfig, Graph, Tensor, Var};
use mtnmt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum so that gradients are not trivially uniform.
fn weighted(g: &Graph, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(&g.shape(y), seed));
    Ok(g.sum(g.mul(y, w)?))
}

fn check(f: impl Fn(&Graph, &[Var]) -> Result<Var>, inputs: &[Tensor], tol: f64) {
    let report = grad_check(f, inputs, GradCheckConfig::with_tolerance(tol)).unwrap();
    assert!(report.passed(), "max rel error {} ({:?})", report.max_rel_error(), report.worst());
}

#[test]
fn matmul() {
    check(|g, v| Ok(g.sum(g.matmul(v[0], v[1])?)), &[random(&[3, 4], 1), random(&[4, 2], 2)], 1e-6);
}

#[test]
fn matmul_with_leading_axes() {
    check(|g, v| weighted(g, g.matmul(v[0], v[1])?, 9), &[random(&[2, 3, 4], 1), random(&[4, 5], 2)], 1e-6);
}

#[test]
fn batch_matmul_both_layouts() {
    check(
        |g, v| weighted(g, g.batch_matmul(v[0], v[1])?, 3),
        &[random(&[2, 3, 4], 1), random(&[2, 4, 5], 2)],
        1e-6,
    );
    check(
        |g, v| weighted(g, g.batch_matmul_bt(v[0], v[1])?, 3),
        &[random(&[2, 2, 3, 4], 1), random(&[2, 2, 5, 4], 2)],
        1e-6,
    );
}

#[test]
fn softmax_last_and_inner_axis() {
    check(|g, v| weighted(g, g.softmax(v[0], 0)?, 4), &[random(&[5], 1)], 1e-6);
    check(|g, v| weighted(g, g.softmax(v[0], 1)?, 4), &[random(&[2, 3, 4], 1)], 1e-6);
}

#[test]
fn masked_softmax() {
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    check(move |g, v| weighted(g, g.masked_softmax(v[0], &mask)?, 5), &[random(&[4, 3], 1)], 1e-6);
}

#[test]
fn layer_norm() {
    check(
        |g, v| weighted(g, g.layer_norm(v[0], v[1], v[2], 1e-5)?, 6),
        &[random(&[2, 4], 1), random(&[4], 2), random(&[4], 3)],
        1e-6,
    );
}

#[test]
fn cross_entropy() {
    let targets = [0, 4, 2, 9, 1, 3];
    check(
        move |g, v| g.cross_entropy(v[0], &targets, 9),
        &[random(&[2, 3, 5], 1)],
        1e-6,
    );
}

#[test]
fn cross_entropy_of_softmax_chain() {
    // log of a softmax fed back through cross entropy
    check(
        |g, v| {
            let p = g.softmax(v[0], 1)?;
            let logp = g.map(p, f64::ln, |x| 1.0 / x);
            g.cross_entropy(logp, &[1, 2, 0], 99)
        },
        &[random(&[3, 4], 8)],
        1e-6,
    );
}

#[test]
fn elementwise_and_scale() {
    check(|g, v| weighted(g, g.add(v[0], v[1])?, 1), &[random(&[3, 2], 1), random(&[3, 2], 2)], 1e-6);
    check(|g, v| weighted(g, g.sub(v[0], v[1])?, 1), &[random(&[3, 2], 1), random(&[3, 2], 2)], 1e-6);
    check(|g, v| weighted(g, g.mul(v[0], v[1])?, 1), &[random(&[3, 2], 1), random(&[3, 2], 2)], 1e-6);
    check(|g, v| weighted(g, g.scale(v[0], -2.5), 1), &[random(&[3, 2], 1)], 1e-6);
    check(|g, v| weighted(g, g.add_bias(v[0], v[1])?, 1), &[random(&[3, 2], 1), random(&[2], 2)], 1e-6);
    check(|g, v| Ok(g.mean(g.mul(v[0], v[0])?)), &[random(&[3, 2], 1)], 1e-6);
}

#[test]
fn embedding_scatter_add() {
    // repeated ids exercise accumulation
    let ids = [1u32, 3, 1, 0];
    check(move |g, v| weighted(g, g.embedding(v[0], &ids, &[2, 2])?, 2), &[random(&[4, 3], 1)], 1e-6);
}

#[test]
fn activations() {
    check(|g, v| weighted(g, g.gelu(v[0]), 3), &[random(&[10], 1)], 1e-6);
    // keep away from the kink at 0
    let x = Tensor::from_fn(&[8], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.4 - i as f64 * 0.1 });
    check(|g, v| weighted(g, g.relu(v[0]), 3), &[x], 1e-6);
}

#[test]
fn shape_ops() {
    check(|g, v| weighted(g, g.reshape(v[0], &[3, 2])?, 1), &[random(&[2, 3], 1)], 1e-6);
    check(|g, v| weighted(g, g.transpose(v[0])?, 1), &[random(&[2, 3], 1)], 1e-6);
    check(|g, v| weighted(g, g.permute(v[0], &[2, 0, 1])?, 1), &[random(&[2, 3, 4], 1)], 1e-6);
    check(
        |g, v| weighted(g, g.concat(&[v[0], v[1], v[0]], 1)?, 1),
        &[random(&[2, 3], 1), random(&[2, 1], 2)],
        1e-6,
    );
}

#[test]
fn dropout_mask_is_linear() {
    check(
        |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            weighted(g, g.dropout(v[0], 0.3, &mut rng)?, 1)
        },
        &[random(&[12], 1)],
        1e-6,
    );
}
