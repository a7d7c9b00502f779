use lmser::tensor::matmul;
use lmser::{ConvLayer, DenseLayer, Layer, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn zero_biases(layer: &mut Layer) {
    for (name, p) in layer.params_mut() {
        if name.starts_with("b_") {
            *p = Tensor::zeros(p.shape().to_vec());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn dense_up_and_down_are_adjoint(n_in in 1usize..20, n_out in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = DenseLayer::glorot(n_in, n_out, true, &mut rng);
        let x = Tensor::uniform(vec![n_in], -1.0, 1.0, &mut rng);
        let z = Tensor::uniform(vec![n_out], -1.0, 1.0, &mut rng);
        let lhs = layer.up(&x).unwrap().dot(&z).unwrap();
        let rhs = x.dot(&layer.down(&z).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()));
    }

    #[test]
    fn conv_up_and_down_are_adjoint(
        c_in in 1usize..4, c_out in 1usize..4, h in 3usize..10, w in 3usize..10,
        k in 1usize..4, stride in 1usize..3, padding in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * padding && k <= w + 2 * padding);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = Layer::Conv(ConvLayer::glorot(c_in, c_out, k, stride, padding, true, &mut rng));
        zero_biases(&mut layer);
        let Layer::Conv(conv) = &layer else { unreachable!() };
        let x = Tensor::uniform(vec![1, c_in, h, w], -1.0, 1.0, &mut rng);
        let y = conv.up(&x).unwrap();
        let z = Tensor::uniform(y.shape().to_vec(), -1.0, 1.0, &mut rng);
        let back = conv.down(&z, (h, w)).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        let lhs = y.dot(&z).unwrap();
        let rhs = x.dot(&back).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-4 * (1.0 + lhs.abs()));
    }

    #[test]
    fn untying_adds_one_weight_buffer_and_keeps_outputs(n_in in 1usize..12, n_out in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tied = Layer::Dense(DenseLayer::glorot(n_in, n_out, true, &mut rng));
        let mut untied = tied.clone();
        untied.untie();
        prop_assert_eq!(untied.param_count(), tied.param_count() + n_in * n_out);
        let z = Tensor::uniform(vec![3, n_out], -1.0, 1.0, &mut rng);
        let (Layer::Dense(a), Layer::Dense(b)) = (&tied, &untied) else { unreachable!() };
        prop_assert_eq!(a.down(&z).unwrap(), b.down(&z).unwrap());
    }
}

#[test]
fn dense_up_matches_matmul_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut layer = DenseLayer::glorot(7, 5, true, &mut rng);
    layer.b_up = Tensor::uniform(vec![5], -1.0, 1.0, &mut rng);
    let x = Tensor::uniform(vec![4, 7], -1.0, 1.0, &mut rng);
    let expected = matmul(&x, &layer.w.transpose().unwrap()).unwrap();
    let got = layer.up(&x).unwrap();
    for r in 0..4 {
        for c in 0..5 {
            let e = expected.data()[r * 5 + c] + layer.b_up.data()[c];
            assert!((got.data()[r * 5 + c] - e).abs() < 1e-6);
        }
    }
}

#[test]
fn conv_round_trip_restores_spatial_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for size in 3..12 {
        for k in 1..4 {
            for stride in 1..3 {
                for padding in 0..2 {
                    if k > size + 2 * padding {
                        continue;
                    }
                    let layer = ConvLayer::glorot(2, 3, k, stride, padding, true, &mut rng);
                    let x = Tensor::uniform(vec![1, 2, size, size + 1], 0.0, 1.0, &mut rng);
                    let y = layer.up(&x).unwrap();
                    let back = layer.down(&y, (size, size + 1)).unwrap();
                    assert_eq!(back.shape(), x.shape(), "size {size} k {k} s {stride} p {padding}");
                }
            }
        }
    }
}

#[test]
fn tied_round_trip_gradient_equals_untied_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for layer in [
        Layer::Dense(DenseLayer::glorot(6, 4, true, &mut rng)),
        Layer::Conv(ConvLayer::glorot(2, 3, 3, 2, 1, true, &mut rng)),
    ] {
        let x = match &layer {
            Layer::Dense(_) => Tensor::uniform(vec![3, 6], 0.0, 1.0, &mut rng),
            Layer::Conv(_) => Tensor::uniform(vec![3, 2, 7, 7], 0.0, 1.0, &mut rng),
        };
        let round_trip_grads = |l: &Layer| {
            let mut tape = Tape::new();
            let vars = l.bind(&mut tape, "l");
            let xv = tape.leaf(x.clone());
            let y = l.up_on(&mut tape, &vars, xv).unwrap();
            let a = tape.sigmoid(y);
            let back = l.down_on(&mut tape, &vars, a, x.shape()).unwrap();
            let loss = tape.mse(back, xv).unwrap();
            tape.backward(loss).unwrap().params()
        };
        let tied = round_trip_grads(&layer);
        let mut untied = layer.clone();
        untied.untie();
        let split = round_trip_grads(&untied);
        let w_down = &split["l.w_down"];
        let w_down = match &layer {
            // the dense downward buffer is stored transposed
            Layer::Dense(_) => w_down.transpose().unwrap(),
            Layer::Conv(_) => w_down.clone(),
        };
        let summed = split["l.w"].add(&w_down).unwrap();
        let err = tied["l.w"].max_abs_diff(&summed).unwrap() / summed.max_abs();
        assert!(err <= 1e-6, "relative {err}");
        let b = &tied["l.b_up"];
        assert!(b.max_abs_diff(&split["l.b_up"]).unwrap() <= 1e-6 * (1.0 + b.max_abs()));
    }
}
