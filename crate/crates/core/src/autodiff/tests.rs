use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

const TOL: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Checks d/dx_i of `Σ w ⊙ op(xs)` for every input `i` against central differences.
fn check_op<F>(shapes: &[&[usize]], seed: u64, op: F)
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone(), false).unwrap()).collect();
        let y = op(&mut g, &ids).unwrap();
        g.shape(y).to_vec()
    };
    let weights = random(&out_shape, &mut rng);
    let objective = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = xs.iter().map(|t| g.input(t.clone(), false).unwrap()).collect();
        let y = op(&mut g, &ids)?;
        Ok(g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
    let y = op(&mut g, &ids).unwrap();
    let w = g.input(weights.clone(), false).unwrap();
    let prod = g.hadamard(y, w).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let numeric = numeric_gradient(x, 1e-6, |xi| {
            let mut xs = inputs.clone();
            xs[i] = xi.clone();
            objective(&xs)
        })
        .unwrap();
        let analytic = grads.get_or_zeros(ids[i], x.shape());
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < TOL, "input {i}: relative error {err}\n{analytic:?}\n{numeric:?}");
    }
}

#[test]
fn vjp_matmul() {
    check_op(&[&[3, 4], &[4, 5]], 1, |g, x| g.matmul(x[0], x[1]));
}

#[test]
fn vjp_add_and_broadcast() {
    check_op(&[&[3, 4], &[3, 4]], 2, |g, x| g.add(x[0], x[1]));
    check_op(&[&[3, 4], &[4]], 3, |g, x| g.add(x[0], x[1]));
}

#[test]
fn vjp_hadamard_and_broadcast() {
    check_op(&[&[2, 5], &[2, 5]], 4, |g, x| g.hadamard(x[0], x[1]));
    check_op(&[&[3, 5], &[1, 5]], 5, |g, x| g.hadamard(x[0], x[1]));
}

#[test]
fn vjp_pointwise() {
    check_op(&[&[4, 3]], 6, |g, x| g.tanh(x[0]));
    check_op(&[&[4, 3]], 7, |g, x| g.gelu(x[0]));
    check_op(&[&[4, 3]], 8, |g, x| g.relu(x[0]));
    check_op(&[&[4, 3]], 9, |g, x| g.abs(x[0]));
    check_op(&[&[4, 3]], 10, |g, x| g.scale(x[0], -0.7));
    check_op(&[&[4, 3]], 11, |g, x| g.add_scalar(x[0], 0.3));
}

#[test]
fn vjp_softmax_both_axes() {
    check_op(&[&[3, 5]], 12, |g, x| g.softmax(x[0], 1));
    check_op(&[&[3, 5]], 13, |g, x| g.softmax(x[0], 0));
    check_op(&[&[2, 3, 4]], 14, |g, x| g.softmax(x[0], 1));
}

#[test]
fn vjp_layer_norm() {
    check_op(&[&[3, 6]], 15, |g, x| g.layer_norm(x[0], 1, 1e-5));
    check_op(&[&[4, 3]], 16, |g, x| g.layer_norm(x[0], 0, 1e-5));
}

#[test]
fn vjp_dropout_with_fixed_mask() {
    check_op(&[&[4, 6]], 17, |g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        g.dropout(x[0], 0.5, &mut rng)
    });
}

#[test]
fn vjp_pooling_and_reductions() {
    check_op(&[&[5, 3]], 18, |g, x| g.mean_pool(x[0], 0));
    check_op(&[&[5, 3]], 19, |g, x| g.mean_pool(x[0], 1));
    check_op(&[&[5, 3]], 20, |g, x| g.sum(x[0]));
}

#[test]
fn vjp_embedding_lookup() {
    check_op(&[&[6, 4]], 21, |g, x| g.embedding(x[0], &[1, 3, 1, 5]));
}

#[test]
fn vjp_shape_ops() {
    check_op(&[&[2, 6]], 22, |g, x| g.reshape(x[0], &[4, 3]));
    check_op(&[&[2, 6]], 23, |g, x| g.flatten(x[0]));
    check_op(&[&[2, 3], &[1, 3]], 24, |g, x| g.concat(&[x[0], x[1]], 0));
    check_op(&[&[2, 3], &[2, 2]], 25, |g, x| g.concat(&[x[0], x[1]], 1));
    check_op(&[&[4, 6]], 26, |g, x| g.slice(x[0], 1, 2, 3));
    check_op(&[&[4, 6]], 27, |g, x| g.slice(x[0], 0, 1, 2));
}

#[test]
fn vjp_attention() {
    check_op(&[&[5, 8], &[5, 8], &[5, 8]], 28, |g, x| g.attention(x[0], x[1], x[2], 2));
    check_op(&[&[1, 6], &[4, 6], &[4, 6]], 29, |g, x| g.attention(x[0], x[1], x[2], 3));
}

#[test]
fn vjp_cross_entropy() {
    check_op(&[&[1, 2]], 30, |g, x| g.cross_entropy(x[0], 1));
    check_op(&[&[3]], 31, |g, x| g.cross_entropy(x[0], 0));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(&[4]), false).unwrap();
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mut g = Graph::<f64>::new();
        let t = random(&[3, 7], &mut rng).map(|v| v * 10.0);
        let x = g.input(t, false).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let row = g.value(y).row_slice(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1, 8], 3.5), false).unwrap();
    let y = g.layer_norm(x, 1, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn pointwise_fixed_points() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![0.0, -1.0]), false).unwrap();
    let ge = g.gelu(x).unwrap();
    let re = g.relu(x).unwrap();
    assert_eq!(g.value(ge).data()[0], 0.0);
    assert_eq!(g.value(re).data()[1], 0.0);
}

#[test]
fn dropout_rate_zero_is_identity() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
}

#[test]
fn backprop_of_sum_of_squares() {
    let w = Tensor::<f64>::vector(vec![1.0, 2.0]);
    let unused = Tensor::<f64>::vector(vec![5.0, 6.0, 7.0]);
    let mut g = Graph::new();
    let wn = g.param("w", &w);
    let _ = g.param("unused", &unused);
    let sq = g.hadamard(wn, wn).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap().into_params();
    assert_eq!(grads["w"].data(), &[2.0, 4.0]);
    assert_eq!(grads["unused"].data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]), true).unwrap();
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::zeros(&[2, 3]), false).unwrap();
    let b = g.input(Tensor::zeros(&[2, 3]), false).unwrap();
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn non_finite_values_are_faults() {
    let mut g = Graph::<f64>::new();
    assert!(g.input(Tensor::vector(vec![f64::NAN]), false).is_err());
    let x = g.input(Tensor::vector(vec![1e300]), false).unwrap();
    assert!(g.hadamard(x, x).is_err());
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let params = ParamMap::from([
        ("w1".to_string(), random(&[5, 8], &mut rng)),
        ("b1".to_string(), random(&[8], &mut rng)),
        ("w2".to_string(), random(&[8, 2], &mut rng)),
        ("b2".to_string(), random(&[2], &mut rng)),
    ]);
    let x = random(&[3, 5], &mut rng);
    let build = |p: &ParamMap<f64>| -> Result<(f64, ParamMap<f64>)> {
        let mut g = Graph::new();
        let xi = g.input(x.clone(), false)?;
        let (w1, b1) = (g.param("w1", &p["w1"]), g.param("b1", &p["b1"]));
        let (w2, b2) = (g.param("w2", &p["w2"]), g.param("b2", &p["b2"]));
        let h = g.matmul(xi, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h)?;
        let z = g.matmul(h, w2)?;
        let z = g.add(z, b2)?;
        let pooled = g.mean_pool(z, 0)?;
        let loss = g.cross_entropy(pooled, 1)?;
        let value = g.value(loss).data()[0];
        Ok((value, g.backward(loss)?.into_params()))
    };
    let (_, analytic) = build(&params).unwrap();
    let report = grad_check(&params, &analytic, 1e-5, |p, _| Ok(build(p)?.0)).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn eval_mode_dropout_is_identity_by_construction() {
    // eval mode skips the op entirely; the same node flows through
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::vector(vec![0.4, -0.2]), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = g.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());
}
