use gaitfuse_core::tensor::gradcheck::{
    finite_diff_check, finite_diff_check_many, GradCheckReport,
};
use gaitfuse_core::tensor::{BnLayout, Tape, Tensor, Var};
use gaitfuse_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
// Normalization layers have coordinates whose gradient nearly cancels. At
// h = 1e-3 the stencil's truncation error is then a visible fraction of the
// value, so the tighter per-layer bound is checked with a smaller step.
const H_NORM: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so relu kinks stay outside the stencil.
fn random_off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Weighted sum with fixed random weights, so every output coordinate gets
/// its own upstream gradient.
fn probe(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = random(t.value(y).shape(), &mut rng);
    t.weighted_sum(y, &w)
}

fn assert_ok(r: &GradCheckReport, tol: f64, what: &str) {
    assert!(r.checked > 0, "{what}: nothing checked {r:?}");
    assert!(r.max_rel_error < tol, "{what}: {r:?}");
}

fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(3..7),
        rng.random_range(2..5),
    )
}

#[test]
fn matmul_examples() {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = t.constant(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap());
    let y = t.matmul(a, b).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 7.0]);

    let eye = t.constant(Tensor::from_fn(
        [3, 3],
        |i| if i % 4 == 0 { 1.0 } else { 0.0 },
    ));
    let v = t.constant(Tensor::new([3, 1], vec![0.5, -2.0, 7.0]).unwrap());
    let y = t.matmul(eye, v).unwrap();
    assert_eq!(t.value(y).data(), &[0.5, -2.0, 7.0]);

    let bad = t.constant(Tensor::zeros([3, 2]));
    assert!(t.matmul(a, bad).is_err());
}

#[test]
fn matmul_gradient_below_1e6() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [random(&[4, 5], &mut rng), random(&[5, 3], &mut rng)];
        let r = finite_diff_check_many(
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, seed)
            },
            &inputs,
            &[None, None],
            H,
        )
        .unwrap();
        assert_ok(&r, 1e-6, "matmul");
    }
}

#[test]
fn linear_gradient() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = [
            random(&[3, 4], &mut rng),
            random(&[2, 4], &mut rng),
            random(&[2], &mut rng),
        ];
        let r = finite_diff_check_many(
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                probe(t, y, seed)
            },
            &inputs,
            &[None, None, None],
            H,
        )
        .unwrap();
        assert_ok(&r, PRIMITIVE_TOL, "linear");
    }
}

#[test]
fn pointwise_linear_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::ones([1, 2, 3, 4]));
    let w = t.constant(Tensor::new([1, 2], vec![1.0, 1.0]).unwrap());
    let b = t.constant(Tensor::zeros([1]));
    let y = t.pointwise_linear(x, w, b).unwrap();
    assert!(t.value(y).data().iter().all(|&e| e == 2.0));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = random(&[2, 3, 4, 5], &mut rng);
    let x = t.constant(xs.clone());
    let eye = t.constant(Tensor::from_fn(
        [3, 3],
        |i| if i % 4 == 0 { 1.0 } else { 0.0 },
    ));
    let zero = t.constant(Tensor::zeros([3]));
    let y = t.pointwise_linear(x, eye, zero).unwrap();
    assert_eq!(t.value(y), &xs);
}

#[test]
fn pointwise_linear_gradient_below_1e6() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, tt, v) = rand_dims(&mut rng);
        let co = rng.random_range(1..4);
        let inputs = [
            random(&[n, c, tt, v], &mut rng),
            random(&[co, c], &mut rng),
            random(&[co], &mut rng),
        ];
        let r = finite_diff_check_many(
            |t, vars| {
                let y = t.pointwise_linear(vars[0], vars[1], vars[2])?;
                probe(t, y, seed)
            },
            &inputs,
            &[None, None, None],
            H,
        )
        .unwrap();
        assert_ok(&r, 1e-6, "pointwise_linear");
    }
}

#[test]
fn temporal_conv_examples() {
    let mut t = Tape::<f64>::new();
    // k = 1 identity
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = random(&[1, 1, 6, 2], &mut rng);
    let x = t.constant(xs.clone());
    let w = t.constant(Tensor::ones([1, 1, 1]));
    let b = t.constant(Tensor::zeros([1]));
    let y = t.temporal_conv(x, w, b, 1, 0).unwrap();
    assert_eq!(t.value(y), &xs);

    // impulse [0, 1, 0, 0, 0] with a box kernel of width 3 and padding 1
    let x = t.constant(Tensor::new([1, 1, 5, 1], vec![0.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
    let w = t.constant(Tensor::ones([1, 1, 3]));
    let y = t.temporal_conv(x, w, b, 1, 1).unwrap();
    assert_eq!(t.value(y).data(), &[1.0, 1.0, 1.0, 0.0, 0.0]);

    // output length floor((124 + 8 - 9) / 2) + 1 = 62
    let x = t.constant(Tensor::zeros([1, 1, 124, 1]));
    let w = t.constant(Tensor::zeros([1, 1, 9]));
    let y = t.temporal_conv(x, w, b, 2, 4).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 62, 1]);

    // even kernels and empty outputs are rejected
    let w_even = t.constant(Tensor::zeros([1, 1, 2]));
    assert!(t.temporal_conv(x, w_even, b, 1, 0).is_err());
    let short = t.constant(Tensor::zeros([1, 1, 3, 1]));
    let w9 = t.constant(Tensor::zeros([1, 1, 9]));
    assert!(t.temporal_conv(short, w9, b, 1, 0).is_err());
}

#[test]
fn temporal_conv_gradient() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, _, v) = rand_dims(&mut rng);
        let tt = rng.random_range(5..11);
        let co = rng.random_range(1..4);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let pad = k / 2;
        let inputs = [
            random(&[n, c, tt, v], &mut rng),
            random(&[co, c, k], &mut rng),
            random(&[co], &mut rng),
        ];
        let r = finite_diff_check_many(
            |t, vars| {
                let y = t.temporal_conv(vars[0], vars[1], vars[2], stride, pad)?;
                probe(t, y, seed)
            },
            &inputs,
            &[None, None, None],
            H,
        )
        .unwrap();
        assert_ok(&r, PRIMITIVE_TOL, "temporal_conv");
    }
}

#[test]
fn graph_mul_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::new([1, 1, 1, 2], vec![2.0, 4.0]).unwrap());
    let a = t.constant(Tensor::full([2, 2], 0.5));
    let y = t.graph_mul(x, a).unwrap();
    assert_eq!(t.value(y).data(), &[3.0, 3.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xs = random(&[2, 3, 4, 5], &mut rng);
    let x = t.constant(xs.clone());
    let eye = t.constant(Tensor::from_fn(
        [5, 5],
        |i| if i % 6 == 0 { 1.0 } else { 0.0 },
    ));
    let y = t.graph_mul(x, eye).unwrap();
    assert_eq!(t.value(y), &xs);
    assert!(t.graph_mul(x, a).is_err());
}

#[test]
fn graph_mul_gradient_below_1e6() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, tt, v) = rand_dims(&mut rng);
        let inputs = [random(&[n, c, tt, v], &mut rng), random(&[v, v], &mut rng)];
        let r = finite_diff_check_many(
            |t, vars| {
                let y = t.graph_mul(vars[0], vars[1])?;
                probe(t, y, seed)
            },
            &inputs,
            &[None, None],
            H,
        )
        .unwrap();
        assert_ok(&r, 1e-6, "graph_mul");
    }
}

#[test]
fn batch_norm_examples() {
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = random(&[2, 3, 4, 2], &mut rng);
    let x = t.constant(xs.clone());
    let g = t.constant(Tensor::ones([3]));
    let b = t.constant(Tensor::zeros([3]));
    let (y, stats) = t
        .batch_norm(
            x,
            g,
            b,
            &[0.0; 3],
            &[1.0; 3],
            BnLayout::Channel,
            false,
            1e-5,
        )
        .unwrap();
    assert!(stats.is_none());
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, e) in t.value(y).data().iter().zip(xs.data()) {
        assert!((a - e * scale).abs() < 1e-12);
    }

    // constant input in train mode collapses to beta
    let x = t.constant(Tensor::full([4, 2, 3, 2], 7.5));
    let beta = t.constant(Tensor::new([2], vec![0.25, -1.0]).unwrap());
    // three gammas for two channels
    assert!(t
        .batch_norm(
            x,
            g,
            beta,
            &[0.0; 2],
            &[1.0; 2],
            BnLayout::Channel,
            true,
            1e-5
        )
        .is_err());
    let g2 = t.constant(Tensor::ones([2]));
    let (y, stats) = t
        .batch_norm(
            x,
            g2,
            beta,
            &[0.0; 2],
            &[1.0; 2],
            BnLayout::Channel,
            true,
            1e-5,
        )
        .unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![7.5, 7.5]);
    for (i, &e) in t.value(y).data().iter().enumerate() {
        let ch = (i / 6) % 2;
        assert_eq!(e, [0.25, -1.0][ch]);
    }
}

#[test]
fn batch_norm_gradient_train_and_eval() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, c, tt, v) = rand_dims(&mut rng);
        let n = 4;
        for (layout, groups) in [(BnLayout::Channel, c), (BnLayout::ChannelNode, c * v)] {
            let inputs = [
                random(&[n, c, tt, v], &mut rng),
                Tensor::from_fn([groups], |_| rng.random_range(0.5..1.5)),
                random(&[groups], &mut rng),
            ];
            let rm: Vec<f64> = (0..groups).map(|_| rng.random_range(-0.5..0.5)).collect();
            let rv: Vec<f64> = (0..groups).map(|_| rng.random_range(0.5..2.0)).collect();
            for (train, (h, tol)) in [true, false]
                .into_iter()
                .flat_map(|tr| [(tr, (H, PRIMITIVE_TOL)), (tr, (H_NORM, 1e-5))])
            {
                let r = finite_diff_check_many(
                    |t, vars| {
                        let (y, _) =
                            t.batch_norm(vars[0], vars[1], vars[2], &rm, &rv, layout, train, 1e-5)?;
                        probe(t, y, seed)
                    },
                    &inputs,
                    &[None, None, None],
                    h,
                )
                .unwrap();
                assert_ok(&r, tol, "batch_norm");
            }
        }
    }
}

#[test]
fn batch_norm_rejects_bad_parameters() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros([2, 3, 4, 5]));
    let g = t.constant(Tensor::ones([2]));
    let b = t.constant(Tensor::zeros([2]));
    assert!(t
        .batch_norm(x, g, b, &[0.0; 2], &[1.0; 2], BnLayout::Channel, true, 1e-5)
        .is_err());
}

#[test]
fn layer_norm_examples_and_gradient() {
    let mut t = Tape::<f64>::new();
    let row = vec![-1.0, 1.0, -1.0, 1.0];
    let x = t.constant(Tensor::new([1, 4], row.clone()).unwrap());
    let g = t.constant(Tensor::ones([4]));
    let b = t.constant(Tensor::zeros([4]));
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    for (a, e) in t.value(y).data().iter().zip(&row) {
        assert!((a - e).abs() < 1e-5);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs = random(&[3, 6], &mut rng);
    let x1 = t.constant(xs.clone());
    let x2 = t.constant(xs.map(|e| e * 3.7));
    let y1 = t.layer_norm(x1, g, b, 1e-5);
    assert!(y1.is_err(), "gain length mismatch must be rejected");
    let g6 = t.constant(Tensor::ones([6]));
    let b6 = t.constant(Tensor::zeros([6]));
    let y1 = t.layer_norm(x1, g6, b6, 1e-5).unwrap();
    let y2 = t.layer_norm(x2, g6, b6, 1e-5).unwrap();
    for (a, e) in t.value(y1).data().iter().zip(t.value(y2).data()) {
        assert!((a - e).abs() < 1e-4);
    }

    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(3..8);
        let inputs = [
            random(&[3, d], &mut rng),
            Tensor::from_fn([d], |_| rng.random_range(0.5..1.5)),
            random(&[d], &mut rng),
        ];
        for (h, tol) in [(H, PRIMITIVE_TOL), (H_NORM, 1e-5)] {
            let r = finite_diff_check_many(
                |t, vars| {
                    let y = t.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                    probe(t, y, seed)
                },
                &inputs,
                &[None, None, None],
                h,
            )
            .unwrap();
            assert_ok(&r, tol, "layer_norm");
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut t = Tape::<f64>::new();
    let z = t.constant(Tensor::zeros([1]));
    let s = t.sigmoid(z);
    assert_eq!(t.value(s).item(), 0.5);

    let c = t.constant(Tensor::full([2, 3, 4, 5], 1.25));
    let p = t.global_avg_pool(c).unwrap();
    assert_eq!(t.value(p).shape(), &[2, 3]);
    assert!(t.value(p).data().iter().all(|&e| (e - 1.25).abs() < 1e-15));

    let x = t.constant(Tensor::new([1, 3], vec![1.0, -2.0, 3.0]).unwrap());
    let keep = [true, false, true];
    let d = t.dropout(x, &keep, 0.0).unwrap();
    assert_eq!(t.value(d).data(), &[1.0, 0.0, 3.0]);
    let all = t.dropout(x, &[true; 3], 0.0).unwrap();
    assert_eq!(t.value(all).data(), t.value(x).data());
    let half = t.dropout(x, &keep, 0.5).unwrap();
    assert_eq!(t.value(half).data(), &[2.0, 0.0, 6.0]);
    assert!(t.dropout(x, &keep, 1.0).is_err());

    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[1.0, 0.0, 3.0]);
    let y = t.constant(Tensor::zeros([3, 1]));
    assert!(t.add(x, y).is_err());
}

#[test]
fn elementwise_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, tt, v) = rand_dims(&mut rng);
        let x = random_off_zero(&[n, c, tt, v], &mut rng);
        let other = random(&[n, c, tt, v], &mut rng);
        let keep: Vec<bool> = (0..x.numel()).map(|_| rng.random_bool(0.7)).collect();
        for name in [
            "relu",
            "sigmoid",
            "dropout",
            "add",
            "global_avg_pool",
            "scale",
        ] {
            let f = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
                let y = match name {
                    "relu" => t.relu(x),
                    "sigmoid" => t.sigmoid(x),
                    "dropout" => t.dropout(x, &keep, 0.3)?,
                    "add" => {
                        let o = t.leaf(other.clone(), true);
                        t.add(x, o)?
                    }
                    "global_avg_pool" => t.global_avg_pool(x)?,
                    _ => t.scale(x, -1.7),
                };
                probe(t, y, seed)
            };
            let r = finite_diff_check(f, &x, H).unwrap();
            assert_ok(&r, PRIMITIVE_TOL, name);
            assert_eq!(r.skipped_kinks, 0, "{name}");
        }
    }
}

#[test]
fn row_ops_gradients() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..4);
        let d = rng.random_range(2..6);
        let inputs = [
            random(&[n, d], &mut rng),
            random(&[n, d], &mut rng),
            random(&[n, 1], &mut rng),
        ];
        let r = finite_diff_check_many(
            |t, v| {
                let dot = t.row_dot(v[0], v[1])?;
                let scaled = t.scale_rows(v[0], v[2])?;
                let gated = t.scale_rows(v[1], dot)?;
                let cat = t.concat(scaled, gated)?;
                probe(t, cat, seed)
            },
            &inputs,
            &[None, None, None],
            H,
        )
        .unwrap();
        assert_ok(&r, PRIMITIVE_TOL, "row ops");
    }
}

#[test]
fn softmax_cross_entropy_examples() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::full([2, 4], 0.3));
    let l = t.softmax_cross_entropy(x, &[0, 3]).unwrap();
    assert!((t.value(l).item() - 4f64.ln()).abs() < 1e-12);

    let x = t.constant(Tensor::new([1, 4], vec![0.0, 1e6, 0.0, 0.0]).unwrap());
    let l = t.softmax_cross_entropy(x, &[1]).unwrap();
    assert!(t.value(l).item().abs() < 1e-12);
    assert!(t.value(l).is_finite());
    assert!(t.softmax_cross_entropy(x, &[4]).is_err());
}

#[test]
fn softmax_cross_entropy_gradient_below_1e6() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let x = random(&[n, 4], &mut rng).map(|e| 3.0 * e);
        let r = finite_diff_check(|t, x| t.softmax_cross_entropy(x, &labels), &x, H).unwrap();
        assert_ok(&r, 1e-6, "softmax_cross_entropy");
    }
}

#[test]
fn backward_contracts() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let unused = t.leaf(Tensor::ones([3]), true);
    let frozen = t.leaf(Tensor::ones([2, 2]), false);
    let y = t.add(x, frozen).unwrap();
    let s = t.sum(y);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    assert!(
        g.get(unused).is_none(),
        "unreached parameter has no accumulated gradient"
    );
    assert!(
        g.get(frozen).is_none(),
        "frozen parameter gets no gradient entry"
    );
    assert!(t.backward(y).is_err(), "non-scalar loss");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_fn([2, 3, 8, 4], |_| {
            rng.random_range(-1.0..1.0)
        }));
        let w = t.constant(Tensor::from_fn([5, 3, 3], |_| rng.random_range(-1.0..1.0)));
        let b = t.constant(Tensor::zeros([5]));
        let y = t.temporal_conv(x, w, b, 1, 1).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}
