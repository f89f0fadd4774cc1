use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::check_gradients;
use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut g = Graph::new();
    let m = t(&[3, 3], &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0, 0.0, 7.0, 2.0]);
    let i3 = g.constant(Tensor::eye(3)).unwrap();
    let mv = g.constant(m.clone()).unwrap();
    let out = g.matmul(i3, mv).unwrap();
    assert!(g.value(out).bit_eq(&m));

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0])).unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 3])).unwrap();
    let y = g.softmax(x).unwrap();
    for &p in g.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn square_sum_gradient_is_two_x() {
    let mut g = Graph::new();
    let x = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let loss = g.reduce_sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    let y = g.param(t(&[2], &[5.0, 6.0])).unwrap();
    let loss = g.reduce_sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    // An unreached leaf has no accumulated gradient, which reads as zero.
    assert!(grads.get(y).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn backward_rejects_non_scalar_and_reuse() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    let s = g.reduce_sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GraphSpent)));
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3])).unwrap();
    let b = g.constant(Tensor::zeros([2, 3])).unwrap();
    assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
    let c = g.constant(Tensor::zeros([3, 2])).unwrap();
    assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { .. })));
    assert!(g.slice(a, Axis::Rows, 1, 2).is_err());
}

#[test]
fn non_finite_inputs_are_rejected() {
    let mut g = Graph::new();
    let mut bad = Tensor::zeros([2]);
    bad.data_mut()[1] = f64::INFINITY;
    assert!(matches!(g.param(bad), Err(Error::NonFinite { .. })));
    let big = g.constant(Tensor::full([1], 1e300)).unwrap();
    assert!(matches!(g.mul(big, big), Err(Error::NonFinite { .. })));
}

#[test]
fn scatter_rows_examples() {
    let base = t(&[4, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    let mut g = Graph::new();
    let b = g.constant(base.clone()).unwrap();

    let none = g.constant(Tensor::zeros([0, 2])).unwrap();
    let same = g.scatter_rows(b, none, &[]).unwrap();
    assert!(g.value(same).bit_eq(&base));

    let all = t(&[4, 2], &[9.0; 8]);
    let allv = g.constant(all.clone()).unwrap();
    let replaced = g.scatter_rows(b, allv, &[0, 1, 2, 3]).unwrap();
    assert!(g.value(replaced).bit_eq(&all));

    let upd = g.constant(t(&[2, 2], &[-1.0, -2.0, -3.0, -4.0])).unwrap();
    let out = g.scatter_rows(b, upd, &[1, 3]).unwrap();
    let v = g.value(out);
    assert_eq!(v.row(0), base.row(0));
    assert_eq!(v.row(2), base.row(2));
    assert_eq!(v.row(1), &[-1.0, -2.0]);
    assert_eq!(v.row(3), &[-3.0, -4.0]);

    let two = g.constant(Tensor::zeros([2, 2])).unwrap();
    assert!(matches!(
        g.scatter_rows(b, two, &[1, 1]),
        Err(Error::InvalidIndices(_))
    ));
    assert!(matches!(
        g.scatter_rows(b, two, &[1, 4]),
        Err(Error::InvalidIndices(_))
    ));
}

#[test]
fn scatter_rows_routes_gradients() {
    let mut g = Graph::new();
    let base = g.param(Tensor::full([3, 2], 1.0)).unwrap();
    let upd = g.param(Tensor::full([1, 2], 1.0)).unwrap();
    let out = g.scatter_rows(base, upd, &[1]).unwrap();
    let w = g.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
    let prod = g.mul(out, w).unwrap();
    let loss = g.reduce_sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(base).unwrap().data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    assert_eq!(grads.get(upd).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn([6, 8], 1.0, &mut rng);
    let w = Tensor::randn([8, 8], 1.0, &mut rng);
    let run = || {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let wv = g.constant(w.clone()).unwrap();
        let h = g.matmul_t(xv, wv, false, true).unwrap();
        let h = g.layernorm(h).unwrap();
        let h = g.gelu(h).unwrap();
        let p = g.softmax(h).unwrap();
        g.value(p).clone()
    };
    assert!(run().bit_eq(&run()));
}

#[test]
fn gradients_are_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn([4, 5], 1.0, &mut rng);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let xv = g.param(x.clone()).unwrap();
        let sm = g.softmax(xv).unwrap();
        let l1 = g.reduce_sum(sm).unwrap();
        let sq = g.mul(xv, xv).unwrap();
        let l2 = g.reduce_mean(sq).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(loss).unwrap().get(xv).unwrap().clone()
    };
    let (a, b, s) = (grad_of(0), grad_of(1), grad_of(2));
    let summed = a.zip_map(&b, |p, q| p + q).unwrap();
    assert!(summed.max_abs_diff(&s).unwrap() < 1e-14);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let inputs = vec![
            Tensor::randn([4, 6], 1.0, &mut rng),
            Tensor::randn([6, 8], 0.5, &mut rng),
            Tensor::randn([8], 0.1, &mut rng),
            Tensor::randn([8, 8], 0.4, &mut rng),
            Tensor::randn([8, 3], 0.4, &mut rng),
        ];
        let check = check_gradients(&inputs, 1e-5, None, &mut rng, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, v[3])?;
            let h = g.gelu(h)?;
            let o = g.matmul(h, v[4])?;
            let sq = g.mul(o, o)?;
            g.reduce_mean(sq)
        })
        .unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }
}

mod per_op {
    use super::*;

    fn assert_ok(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> crate::Result<Var>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let check = check_gradients(&inputs, 1e-5, None, &mut rng, f).unwrap();
        assert!(check.max_rel_error < 1e-5, "{check:?}");
    }

    /// Contracts an arbitrary output with fixed weights so every element matters.
    fn weighted(g: &mut Graph, v: Var) -> crate::Result<Var> {
        let shape = g.value(v).shape().to_vec();
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let wv = g.constant(Tensor::new(shape, w)?)?;
        let p = g.mul(v, wv)?;
        g.reduce_sum(p)
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn add_with_and_without_broadcast() {
        assert_ok(vec![rnd(&[3, 4], 1), rnd(&[3, 4], 2)], |g, v| {
            let o = g.add(v[0], v[1])?;
            weighted(g, o)
        });
        assert_ok(vec![rnd(&[3, 4], 1), rnd(&[4], 2)], |g, v| {
            let o = g.add(v[0], v[1])?;
            weighted(g, o)
        });
    }

    #[test]
    fn matmul_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rnd(&[4, 3], 3) } else { rnd(&[3, 4], 3) };
            let b = if tb { rnd(&[5, 4], 4) } else { rnd(&[4, 5], 4) };
            assert_ok(vec![a, b], move |g, v| {
                let o = g.matmul_t(v[0], v[1], ta, tb)?;
                weighted(g, o)
            });
        }
    }

    #[test]
    fn softmax_layernorm_gelu() {
        assert_ok(vec![rnd(&[3, 5], 5)], |g, v| {
            let o = g.softmax(v[0])?;
            weighted(g, o)
        });
        assert_ok(vec![rnd(&[3, 5], 6)], |g, v| {
            let o = g.layernorm(v[0])?;
            weighted(g, o)
        });
        assert_ok(vec![rnd(&[3, 5], 7)], |g, v| {
            let o = g.gelu(v[0])?;
            weighted(g, o)
        });
    }

    #[test]
    fn embed_concat_slice_scatter_scale() {
        assert_ok(vec![rnd(&[5, 3], 8)], |g, v| {
            let o = g.embed(v[0], &[4, 0, 4, 2])?;
            weighted(g, o)
        });
        assert_ok(vec![rnd(&[2, 3], 9), rnd(&[4, 3], 10)], |g, v| {
            let o = g.concat(&[v[0], v[1]], Axis::Rows)?;
            weighted(g, o)
        });
        assert_ok(vec![rnd(&[3, 2], 9), rnd(&[3, 4], 10)], |g, v| {
            let o = g.concat(&[v[0], v[1]], Axis::Cols)?;
            weighted(g, o)
        });
        assert_ok(vec![rnd(&[5, 4], 11)], |g, v| {
            let a = g.slice(v[0], Axis::Rows, 1, 3)?;
            let b = g.slice(a, Axis::Cols, 2, 2)?;
            weighted(g, b)
        });
        assert_ok(vec![rnd(&[5, 4], 12), rnd(&[2, 4], 13)], |g, v| {
            let o = g.scatter_rows(v[0], v[1], &[3, 0])?;
            weighted(g, o)
        });
        assert_ok(vec![rnd(&[2, 2], 14)], |g, v| {
            let o = g.scale(v[0], -2.5)?;
            weighted(g, o)
        });
    }

    #[test]
    fn reductions() {
        assert_ok(vec![rnd(&[3, 3], 15)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.reduce_sum(sq)
        });
        assert_ok(vec![rnd(&[3, 3], 16)], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.reduce_mean(sq)
        });
    }
}
