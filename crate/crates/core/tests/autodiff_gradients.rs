//! Finite-difference checks of every tape primitive on random small shapes.

use pstl::autodiff::{grad_check, NormMode, Tape, Tensor, Var};
use pstl::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random entries with magnitude in `[lo, 1]` and random sign.
fn away_from_zero(shape: &[usize], lo: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng);
    for x in &mut t.data {
        let m = lo + (1.0 - lo) * x.abs();
        *x = if rng.random::<bool>() { m } else { -m };
    }
    t
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng);
    t.data.iter_mut().for_each(|x| *x = 0.5 + x.abs());
    t
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Contracts `y` against a fixed random weight so every output entry gets a
/// distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w)?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

fn check(inputs: Vec<(&str, Tensor)>, seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let inputs: Vec<(String, Tensor)> = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let report = grad_check(
        |tape, v| {
            let y = f(tape, v)?;
            weighted_sum(tape, y, seed)
        },
        &inputs,
        EPS,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn elementwise_binary(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng, 2);
        let a = random(&shape, &mut rng);
        let b = away_from_zero(&shape, 0.3, &mut rng);
        check(vec![("a", a.clone()), ("b", b.clone())], seed, |t, v| t.add(v[0], v[1]));
        check(vec![("a", a.clone()), ("b", b.clone())], seed, |t, v| t.sub(v[0], v[1]));
        check(vec![("a", a.clone()), ("b", b.clone())], seed, |t, v| t.mul(v[0], v[1]));
        check(vec![("a", a), ("b", b)], seed, |t, v| t.div(v[0], v[1]));
    }

    #[test]
    fn elementwise_unary(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng, 3);
        let s = rng.random_range(-2.0..2.0);
        let x = away_from_zero(&shape, 0.05, &mut rng);
        check(vec![("x", x.clone())], seed, move |t, v| t.scale(v[0], s));
        check(vec![("x", x.clone())], seed, move |t, v| t.add_scalar(v[0], s));
        check(vec![("x", x)], seed, |t, v| t.relu(v[0]));
        check(vec![("x", positive(&shape, &mut rng))], seed, |t, v| t.sqrt(v[0]));
    }

    #[test]
    fn reductions_and_layout(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng, 4);
        let x = random(&shape, &mut rng);
        let axes: Vec<usize> = (0..4).filter(|_| rng.random::<bool>()).collect();
        check(vec![("x", x.clone())], seed, move |t, v| t.mean_pool(v[0], &axes));
        let flat = vec![shape.iter().product::<usize>()];
        check(vec![("x", x.clone())], seed, move |t, v| t.reshape(v[0], &flat));
        check(vec![("x", x.clone())], seed, |t, v| t.sum(v[0]));
        let axis = rng.random_range(0..4);
        let idx: Vec<usize> = (0..rng.random_range(1..=5)).map(|_| rng.random_range(0..shape[axis])).collect();
        check(vec![("x", x)], seed, move |t, v| t.gather(v[0], axis, &idx));
        let m = random(&dims(&mut rng, 2), &mut rng);
        check(vec![("m", m)], seed, |t, v| t.transpose(v[0]));
    }

    #[test]
    fn products(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims(&mut rng, 4);
        let a = random(&[d[0], d[1]], &mut rng);
        let b = random(&[d[1], d[2]], &mut rng);
        check(vec![("a", a), ("b", b)], seed, |t, v| t.matmul(v[0], v[1]));
        let a = random(&[d[3], d[0], d[1]], &mut rng);
        let b = random(&[d[3], d[1], d[2]], &mut rng);
        check(vec![("a", a), ("b", b)], seed, |t, v| t.batched_matmul(v[0], v[1]));
    }

    #[test]
    fn broadcasting(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng, 3);
        let axis = rng.random_range(0..3);
        let x = random(&shape, &mut rng);
        let b = random(&[shape[axis]], &mut rng);
        check(vec![("x", x), ("b", b)], seed, move |t, v| t.bias_add(v[0], v[1], axis));
        let rows = rng.random_range(1..=4);
        let r = random(&[shape[0]], &mut rng);
        check(vec![("r", r)], seed, move |t, v| t.broadcast_rows(v[0], rows));
    }

    #[test]
    fn temporal_convolution(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (frames, joints) = (rng.random_range(1..=6), rng.random_range(1..=3));
        let kernel = [1, 3, 5][rng.random_range(0..3)];
        let x = random(&[b, cin, frames, joints], &mut rng);
        let w = random(&[cout, cin, kernel], &mut rng);
        let bias = random(&[cout], &mut rng);
        check(vec![("x", x), ("w", w), ("bias", bias)], seed, |t, v| {
            t.temporal_conv1d(v[0], v[1], Some(v[2]))
        });
    }

    #[test]
    fn batch_normalization(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=4);
        let c = rng.random_range(1..=3);
        let inner = rng.random_range(1..=3);
        let x = random(&[n, c, inner], &mut rng);
        let gamma = away_from_zero(&[c], 0.5, &mut rng);
        let beta = random(&[c], &mut rng);
        check(vec![("x", x.clone()), ("gamma", gamma.clone()), ("beta", beta.clone())], seed, |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Train)?.0)
        });
        let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-0.5..0.5)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        check(vec![("x", x), ("gamma", gamma), ("beta", beta)], seed, move |t, v| {
            Ok(t.batch_norm(v[0], v[1], v[2], NormMode::Eval { mean: &mean, var: &var })?.0)
        });
    }

    #[test]
    fn cross_entropy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = (rng.random_range(1..=5), rng.random_range(2..=5));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let z = random(&[n, k], &mut rng);
        check(vec![("z", z)], seed, move |t, v| t.softmax_cross_entropy(v[0], &labels));
    }
}

#[test]
fn random_composite_expression() {
    // relu(A·X + b) ⊙ sqrt(Y² + 1), pooled
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let a = random(&[3, 4], &mut rng);
    let x = random(&[4, 5], &mut rng);
    let b = random(&[5], &mut rng);
    let y = random(&[3, 5], &mut rng);
    check(vec![("a", a), ("x", x), ("b", b), ("y", y)], 77, |t, v| {
        let ax = t.matmul(v[0], v[1])?;
        let h = t.bias_add(ax, v[2], 1)?;
        let r = t.relu(h)?;
        let y2 = t.mul(v[3], v[3])?;
        let y2 = t.add_scalar(y2, 1.0)?;
        let s = t.sqrt(y2)?;
        let p = t.mul(r, s)?;
        t.mean_pool(p, &[0])
    });
}
