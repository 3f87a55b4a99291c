//! Property tests for the tensor engine and its autodiff tape.

use densecxr::densenet::{Model, ModelConfig};
use densecxr::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::new(shape.clone(), v).unwrap())
}

fn nchw(max: usize) -> impl Strategy<Value = Vec<usize>> {
    (1..=max, 1..=max, 1..=max, 1..=max).prop_map(|(n, c, h, w)| vec![n, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(200) })]

    #[test]
    fn sigmoid_stays_inside_open_unit_interval(x in tensor(vec![64], -40.0, 40.0)) {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.sigmoid(v).unwrap();
        for &p in g.value(y).unwrap().data() {
            prop_assert!(p > 0.0 && p < 1.0, "sigmoid gave {p}");
        }
    }

    #[test]
    fn relu_is_elementwise_max_with_zero(x in tensor(vec![3, 17], -5.0, 5.0)) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.relu(v).unwrap();
        for (&out, &inp) in g.value(y).unwrap().data().iter().zip(x.data()) {
            prop_assert_eq!(out, inp.max(0.0));
        }
    }

    #[test]
    fn concat_keeps_both_operands_bitwise(
        (a, b) in (nchw(4), 1usize..=4).prop_flat_map(|(s, c2)| {
            let mut s2 = s.clone();
            s2[1] = c2;
            (tensor(s, -1e6, 1e6), tensor(s2, -1e6, 1e6))
        })
    ) {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.concat(&[va, vb]).unwrap();
        let y = g.value(out).unwrap();
        let (n, c1, h, w) = a.dims4().unwrap();
        let c2 = b.shape()[1];
        prop_assert_eq!(y.shape(), &[n, c1 + c2, h, w][..]);
        let plane = h * w;
        for i in 0..n {
            let row = &y.data()[i * (c1 + c2) * plane..(i + 1) * (c1 + c2) * plane];
            let (left, right) = row.split_at(c1 * plane);
            for (p, q) in left.iter().zip(&a.data()[i * c1 * plane..(i + 1) * c1 * plane]) {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
            for (p, q) in right.iter().zip(&b.data()[i * c2 * plane..(i + 1) * c2 * plane]) {
                prop_assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    /// A value read by two consumers collects the sum of both gradients.
    #[test]
    fn shared_input_gradients_add_up(x in tensor(vec![2, 5], -2.0, 2.0), k in -3.0f64..3.0) {
        let single = |use_first: bool, use_second: bool| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let a = g.sigmoid(v).unwrap();
            let a = g.sum(a).unwrap();
            let sq = g.mul(v, v).unwrap();
            let b = g.scale(sq, k).unwrap();
            let b = g.sum(b).unwrap();
            let loss = match (use_first, use_second) {
                (true, true) => g.add(a, b).unwrap(),
                (true, false) => a,
                _ => b,
            };
            g.backward(loss).unwrap().get(v).unwrap().clone()
        };
        let both = single(true, true);
        let (ga, gb) = (single(true, false), single(false, true));
        for ((s, p), q) in both.data().iter().zip(ga.data()).zip(gb.data()) {
            prop_assert!((s - (p + q)).abs() <= 1e-12 * (1.0 + s.abs()), "{s} vs {p} + {q}");
        }
    }
}

#[test]
fn dropout_preserves_expected_value() {
    let x = Tensor::from_fn(&[8], |i| 0.5 + i as f64);
    let mut sums = vec![0.0; 8];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 10_000;
    for _ in 0..draws {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.dropout(v, 0.3, &mut rng).unwrap();
        for (s, &d) in sums.iter_mut().zip(g.value(y).unwrap().data()) {
            *s += d;
        }
    }
    for (s, &want) in sums.iter().zip(x.data()) {
        let mean = s / draws as f64;
        assert!((mean - want).abs() <= 0.02 * want, "mean {mean} vs input {want}");
    }
}

#[test]
fn dropout_is_identity_in_evaluation_mode() {
    let config = |rate| ModelConfig {
        input_channels: 1,
        input_size: (8, 8),
        initial_channels: 4,
        growth_rate: 4,
        block_layout: vec![1, 1],
        num_classes: 3,
        dropout_rate: rate,
        use_batch_norm: true,
    };
    let heavy = Model::<f64>::build(config(0.9), 5).unwrap();
    let none = Model::<f64>::build(config(0.0), 5).unwrap();
    assert_eq!(heavy.params(), none.params());
    let batch = Tensor::from_fn(&[3, 1, 8, 8], |i| (i as f64 * 0.37).sin());
    let (p, q) = (heavy.predict(&batch).unwrap(), none.predict(&batch).unwrap());
    assert!(p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}
