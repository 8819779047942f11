//! Finite-difference checks of every differentiable operation on randomized
//! small shapes, plus algebraic properties of the tensor library.

use dept_core::{finite_diff_check, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-5;
const H: f64 = 1e-6;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn param(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::param(rand_vec(rng, shape.iter().product()), shape).unwrap()
}

fn constant(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::new(rand_vec(rng, shape.iter().product()), shape).unwrap()
}

/// Random linear functional so every output coordinate contributes.
fn project(y: &Tensor<f64>, w: &Tensor<f64>) -> dept_core::Result<Tensor<f64>> {
    Ok(y.mul(w)?.sum())
}

fn check(
    name: &str,
    seed: u64,
    x: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> dept_core::Result<Tensor<f64>>,
) {
    let report = finite_diff_check(f, x, H, TOL).unwrap();
    assert!(report.passed, "{name} seed {seed}: {report:?}");
}

#[test]
fn matmul_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q, t) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let a = param(&mut rng, &[2, p, q]);
        let b = param(&mut rng, &[q, t]);
        let bt = param(&mut rng, &[t, q]);
        let w = constant(&mut rng, &[2, p, t]);
        check("matmul/a", seed, &a, |a| project(&a.matmul(&b)?, &w));
        check("matmul/b", seed, &b, |b| project(&a.matmul(b)?, &w));
        check("matmul_t/a", seed, &a, |a| project(&a.matmul_t(&bt)?, &w));
        check("matmul_t/b", seed, &bt, |bt| project(&a.matmul_t(bt)?, &w));
    }
}

#[test]
fn elementwise_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = param(&mut rng, &[3, 4]);
        let y = param(&mut rng, &[4]);
        let z = constant(&mut rng, &[3, 4]);
        let w = constant(&mut rng, &[3, 4]);
        check("add/x", seed, &x, |x| project(&x.add(&y)?, &w));
        check("add/bias", seed, &y, |y| project(&x.add(y)?, &w));
        check("mul", seed, &x, |x| project(&x.mul(&z)?, &w));
        check("square", seed, &x, |x| project(&x.mul(x)?, &w));
        check("scale", seed, &x, |x| project(&x.scale(-2.5), &w));
        check("gelu", seed, &x, |x| project(&x.gelu(), &w));
        check("reshape", seed, &x, |x| project(&x.reshape(&[2, 6])?.reshape(&[3, 4])?, &w));
        check("mean", seed, &x, |x| Ok(x.mul(&w)?.mean()));
    }
}

#[test]
fn softmax_and_layer_norm_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = param(&mut rng, &[3, 5]);
        let gamma = param(&mut rng, &[5]);
        let beta = param(&mut rng, &[5]);
        let w = constant(&mut rng, &[3, 5]);
        check("softmax", seed, &x, |x| project(&x.softmax(), &w));
        check("layer_norm/x", seed, &x, |x| project(&x.layer_norm(&gamma, &beta, 1e-5)?, &w));
        check("layer_norm/gamma", seed, &gamma, |g| project(&x.layer_norm(g, &beta, 1e-5)?, &w));
        check("layer_norm/beta", seed, &beta, |b| project(&x.layer_norm(&gamma, b, 1e-5)?, &w));
    }
}

#[test]
fn row_movement_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let table = param(&mut rng, &[5, 3]);
        let ids: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let w = constant(&mut rng, &[4, 3]);
        check("embedding_lookup", seed, &table, |t| project(&Tensor::embedding_lookup(t, &ids)?, &w));

        let prompt = param(&mut rng, &[2, 3]);
        let x = param(&mut rng, &[2, 4, 3]);
        let wp = constant(&mut rng, &[2, 6, 3]);
        check("prepend/prompt", seed, &prompt, |p| project(&Tensor::prepend_rows(p, &x)?, &wp));
        check("prepend/x", seed, &x, |x| project(&Tensor::prepend_rows(&prompt, x)?, &wp));

        let ws = constant(&mut rng, &[2, 3]);
        check("slice_rows", seed, &table, |t| project(&t.slice_rows(2, 2)?, &ws));
    }
}

#[test]
fn attention_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (batch, n, heads, dh) = (2, rng.random_range(1..5), rng.random_range(1..3), 2);
        let shape = [batch, n, heads * dh];
        let q = param(&mut rng, &shape);
        let k = param(&mut rng, &shape);
        let v = param(&mut rng, &shape);
        let w = constant(&mut rng, &shape);
        // Mask the last key of the second sequence when it is not the only one.
        let mut mask = vec![true; batch * n];
        if n > 1 {
            mask[2 * n - 1] = false;
        }
        let mask = Some(&mask[..]);
        check("attention/q", seed, &q, |q| project(&Tensor::attention(q, &k, &v, heads, mask)?, &w));
        check("attention/k", seed, &k, |k| project(&Tensor::attention(&q, k, &v, heads, mask)?, &w));
        check("attention/v", seed, &v, |v| project(&Tensor::attention(&q, &k, v, heads, mask)?, &w));
        check("attention/self", seed, &q, |q| project(&Tensor::attention(q, q, q, heads, None)?, &w));
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let logits = param(&mut rng, &[4, 6]);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let mask = [true, false, true, true];
        check("cross_entropy", seed, &logits, |l| Tensor::cross_entropy(l, &targets, &mask));
    }
}

#[test]
fn backward_twice_doubles_every_leaf_grad() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = param(&mut rng, &[3, 3]);
    let b = param(&mut rng, &[3, 3]);
    let loss = a.matmul(&b).unwrap().softmax().mul(&a).unwrap().sum();
    loss.backward().unwrap();
    let (ga, gb) = (a.grad().unwrap(), b.grad().unwrap());
    loss.backward().unwrap();
    for (once, twice) in ga.iter().zip(a.grad().unwrap()) {
        assert_eq!(2.0 * once, twice);
    }
    for (once, twice) in gb.iter().zip(b.grad().unwrap()) {
        assert_eq!(2.0 * once, twice);
    }
}

fn int_matrix(values: &[i32], rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::new(values.iter().map(|&v| v as f32).collect(), &[rows, cols]).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let p = Tensor::<f32>::from_f64(&values, &[3, 4]).unwrap().softmax().to_vec();
        for row in p.chunks(4) {
            let s: f32 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn integer_matmul_is_associative(
        a in prop::collection::vec(-20i32..20, 6),
        b in prop::collection::vec(-20i32..20, 12),
        c in prop::collection::vec(-20i32..20, 8),
    ) {
        // Every partial sum stays far below 2^24, so f32 arithmetic is exact.
        let a = int_matrix(&a, 2, 3);
        let b = int_matrix(&b, 3, 4);
        let c = int_matrix(&c, 4, 2);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap().to_vec();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap().to_vec();
        prop_assert_eq!(left, right);
    }
}
