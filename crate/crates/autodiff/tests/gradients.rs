//! Finite-difference checks (h = 1e-5) for every differentiable op.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scl_autodiff::{GradCheck, Graph, Reduction, Result, Tensor, Var, NORM_EPS};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Weighted sum with fixed pseudo-random weights so every output entry matters.
fn probe(g: &mut Graph, y: Var) -> Result<Var> {
    let n = g.value(y).numel();
    let w = Tensor::new(
        g.shape(y).to_vec(),
        (0..n)
            .map(|i| ((i * 7919 % 17) as f64 - 8.0) / 9.0)
            .collect(),
    )?;
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    g.sum_all(p)
}

fn check<F>(inputs: &[Tensor], tol: f64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let report = GradCheck::default().run(inputs, f).unwrap();
    assert!(
        report.max_rel_err <= tol,
        "max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn matmul_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 3]);
    let b = random(&mut rng, &[3, 3]);
    check(&[a, b], 1e-6, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        g.sum_all(y)
    });
}

#[test]
fn l2_normalize_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let x = random(&mut rng, &[3, 4]);
        check(&[x], 1e-6, |g, v| {
            let y = g.l2_normalize(v[0], NORM_EPS)?;
            probe(g, y)
        });
    }
}

#[test]
fn conv2d_gradient_1x2x5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[1, 2, 5, 5]);
    let w = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    check(&[x, w, b], 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
        probe(g, y)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[2, 2, 5, 5]);
    let w = random(&mut rng, &[2, 2, 3, 3]);
    let b = random(&mut rng, &[2]);
    check(&[x, w, b], 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 0)?;
        probe(g, y)
    });
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[2, 3]).map(|v| v.abs() + 0.5);
    check(&[a.clone(), b.clone()], 1e-4, |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let q = g.div(m, v[1])?;
        let q = g.scale(q, 1.7);
        let q = g.add_scalar(q, 0.3);
        probe(g, q)
    });
    check(std::slice::from_ref(&a), 1e-4, |g, v| {
        let e = g.exp(v[0]);
        let l = g.log(e)?;
        let r = g.relu(l);
        probe(g, r)
    });
    let bias = random(&mut rng, &[3]);
    check(&[a, bias], 1e-4, |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        probe(g, y)
    });
}

#[test]
fn softmax_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[2, 3, 4]);
    check(std::slice::from_ref(&x), 1e-4, |g, v| {
        let y = g.softmax_rows(v[0])?;
        probe(g, y)
    });
    for kind in [
        Reduction::Sum,
        Reduction::Mean,
        Reduction::Max,
        Reduction::LogSumExp,
    ] {
        for axis in 0..3 {
            check(std::slice::from_ref(&x), 1e-4, |g, v| {
                let y = g.reduce(v[0], kind, axis)?;
                probe(g, y)
            });
        }
    }
}

#[test]
fn pooling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[2, 2, 5, 5]);
    check(std::slice::from_ref(&x), 1e-4, |g, v| {
        let y = g.max_pool2d(v[0], 2, 2)?;
        probe(g, y)
    });
    check(std::slice::from_ref(&x), 1e-4, |g, v| {
        let y = g.avg_pool2d(v[0], 2, 2)?;
        probe(g, y)
    });
    check(&[x], 1e-4, |g, v| {
        let y = g.adaptive_avg_pool2d(v[0], 3, 2)?;
        probe(g, y)
    });
}

#[test]
fn layout_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[2, 3, 4]);
    check(std::slice::from_ref(&x), 1e-4, |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let r = g.reshape(p, &[4, 6])?;
        let t = g.transpose(r)?;
        let s = g.select(t, &[5, 0, 0, 3])?;
        let q = g.gather(s, &[1, 0, 3, 2])?;
        probe(g, q)
    });
    let a = random(&mut rng, &[3, 2, 4]);
    let b = random(&mut rng, &[3, 4, 2]);
    check(&[a, b], 1e-4, |g, v| {
        let y = g.bmm(v[0], v[1])?;
        probe(g, y)
    });
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[2, 1, 6, 6]);
        let w = random(&mut rng, &[3, 1, 3, 3]);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let wv = g.param(w);
        let bv = g.param(Tensor::zeros(&[3]));
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        let y = g.relu(y);
        let y = g.max_pool2d(y, 2, 2).unwrap();
        let y = g.reshape(y, &[2, 27]).unwrap();
        let y = g.softmax_rows(y).unwrap();
        let l = g.reduce(y, Reduction::LogSumExp, 1).unwrap();
        let l = g.sum_all(l).unwrap();
        let grads = g.backward(l).unwrap();
        (
            grads.get(wv).unwrap().clone(),
            grads.get(bv).unwrap().clone(),
        )
    };
    let (w1, b1) = run();
    let (w2, b2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&w1), bits(&w2));
    assert_eq!(bits(&b1), bits(&b2));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..7, scale in 0.1f64..500.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]).map(|v| v * scale);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax_rows(xv).unwrap();
        for r in 0..rows {
            let row = g.value(y).row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn gradient_has_input_shape(rows in 1usize..4, cols in 1usize..4) {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[rows, cols], 0.5));
        let y = g.l2_normalize(x, NORM_EPS).unwrap();
        let s = g.sum_all(y).unwrap();
        let grads = g.backward(s).unwrap();
        prop_assert_eq!(grads.get(x).unwrap().shape(), &[rows, cols][..]);
    }
}
