use lmser::network::{Activation, LayerSpecs, Lmser, LmserConfig, Variant};
use lmser::{Layer, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major `[rows × cols]` matrix as nested vectors of f64.
type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `a · bᵀ + bias` over rows of `a`.
fn affine_t(a: &Mat, b: &Mat, bias: &[f64]) -> Mat {
    a.iter()
        .map(|row| {
            b.iter()
                .zip(bias)
                .map(|(brow, bi)| row.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>() + bi)
                .collect()
        })
        .collect()
}

/// `a · b + bias` over rows of `a`.
fn affine(a: &Mat, b: &Mat, bias: &[f64]) -> Mat {
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|c| row.iter().zip(b).map(|(x, brow)| x * brow[c]).sum::<f64>() + bias[c])
                .collect()
        })
        .collect()
}

fn map(m: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    m.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dense(layer: &Layer) -> &lmser::DenseLayer {
    match layer {
        Layer::Dense(d) => d,
        Layer::Conv(_) => panic!("dense layer expected"),
    }
}

fn randomize_biases(net: &mut Lmser, seed: u64) {
    let mut r = rng(seed);
    for (name, p) in net.params_mut() {
        if name.contains(".b_") {
            *p = Tensor::uniform(p.shape().to_vec(), -0.3, 0.3, &mut r);
        }
    }
}

fn assert_close(got: &Tensor, want: &Mat, tol: f64) {
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    assert_eq!(got.len(), flat.len());
    for (g, w) in got.data().iter().zip(&flat) {
        assert!((*g as f64 - w).abs() <= tol, "{g} vs {w}");
    }
}

#[test]
fn untied_unshared_without_reflection_is_a_plain_autoencoder() {
    for sizes in [vec![8, 6, 3], vec![12, 9, 5, 2]] {
        let mut cfg = Variant::Ae.config(LayerSpecs::Dense { sizes: sizes.clone() });
        cfg.reflections = 0;
        let mut net = Lmser::new(cfg, &mut rng(1)).unwrap();
        randomize_biases(&mut net, 2);
        let x = Tensor::uniform(vec![5, sizes[0]], 0.0, 1.0, &mut rng(3));

        // encoder: h ← relu(h Wᵀ + b_up) with a linear code; decoder with
        // the separate downward weights, relu between, sigmoid output
        let layers = net.layers();
        let mut h = mat(&x);
        for (i, l) in layers.iter().enumerate() {
            let d = dense(l);
            h = affine_t(&h, &mat(&d.w), &vecf(&d.b_up));
            if i + 1 < layers.len() {
                h = map(&h, relu);
            }
        }
        let code = h.clone();
        for (i, l) in layers.iter().enumerate().rev() {
            let d = dense(l);
            h = affine_t(&h, &mat(d.w_down.as_ref().unwrap()), &vecf(&d.b_down));
            h = map(&h, if i == 0 { sigmoid } else { relu });
        }

        let s = net.forward(&x, 0).unwrap();
        assert_close(&s.reconstruction, &h, 1e-6);
        assert_close(&s.top_code, &code, 1e-6);
    }
}

#[test]
fn one_reflection_matches_hand_unrolled_algebra() {
    for act in [Activation::Relu, Activation::Sigmoid] {
        let mut cfg = LmserConfig::new(LayerSpecs::Dense { sizes: vec![5, 4, 3] });
        cfg.hidden_activation = act;
        cfg.reflections = 1;
        let mut net = Lmser::new(cfg, &mut rng(4)).unwrap();
        randomize_biases(&mut net, 5);
        let x = Tensor::uniform(vec![3, 5], 0.0, 1.0, &mut rng(6));
        let s = |v: f64| match act {
            Activation::Relu => relu(v),
            Activation::Sigmoid => sigmoid(v),
        };
        let (l1, l2) = (dense(&net.layers()[0]), dense(&net.layers()[1]));
        let (w1, w2) = (mat(&l1.w), mat(&l2.w));
        let xm = mat(&x);

        // bottom-up
        let y1 = affine_t(&xm, &w1, &vecf(&l1.b_up));
        let z1 = map(&y1, s);
        let z2 = affine_t(&z1, &w2, &vecf(&l2.b_up));
        // top-down: u1 = z2 W2 + b_down
        let u1 = affine(&z2, &w2, &vecf(&l2.b_down));
        // bottom-up again
        let y1 = affine_t(&xm, &w1, &vecf(&l1.b_up));
        let z1 = map(&add(&y1, &u1), s);
        let z2 = affine_t(&z1, &w2, &vecf(&l2.b_up));
        // final top-down
        let u1 = affine(&z2, &w2, &vecf(&l2.b_down));
        let z1 = map(&add(&y1, &u1), s);
        let recon = map(&affine(&z1, &w1, &vecf(&l1.b_down)), sigmoid);

        let st = net.forward(&x, 1).unwrap();
        assert_close(&st.reconstruction, &recon, 1e-5);
        assert_close(&st.top_code, &z2, 1e-5);
        assert_close(&st.z[0], &z1, 1e-5);
        assert_close(st.u[0].as_ref().unwrap(), &u1, 1e-5);
    }
}

#[test]
fn decoding_the_code_replays_the_unshared_reconstruction() {
    for variant in [Variant::Ae, Variant::LmserUnN] {
        let mut cfg = variant.config(LayerSpecs::Dense { sizes: vec![10, 7, 4] });
        cfg.reflections = 0;
        let mut net = Lmser::new(cfg, &mut rng(7)).unwrap();
        randomize_biases(&mut net, 8);
        let x = Tensor::uniform(vec![6, 10], 0.0, 1.0, &mut rng(9));
        let s = net.forward(&x, 0).unwrap();
        let decoded = net.decode(&s.top_code).unwrap();
        let err = decoded.max_abs_diff(&s.reconstruction).unwrap();
        assert!(err <= 1e-6, "{variant:?}: {err}");
    }
}

#[test]
fn zero_code_and_zero_parameters_decode_to_one_half() {
    let mut net = Lmser::new(LmserConfig::new(LayerSpecs::mnist_conv(vec![4, 8])), &mut rng(10)).unwrap();
    for (_, p) in net.params_mut() {
        *p = Tensor::zeros(p.shape().to_vec());
    }
    let img = net.decode(&Tensor::zeros(vec![2, net.top_width()])).unwrap();
    assert_eq!(img.shape(), &[2, 1, 28, 28]);
    assert!(img.data().iter().all(|&v| v == 0.5));
}

#[test]
fn decode_sweep_is_deterministic() {
    let net = Lmser::new(LmserConfig::new(LayerSpecs::Dense { sizes: vec![16, 8, 4] }), &mut rng(11)).unwrap();
    let codes = Tensor::from_fn(vec![10, 4], |i| if i % 4 == 1 { (i / 4) as f32 * 0.3 - 1.5 } else { 0.2 });
    assert_eq!(net.decode(&codes).unwrap(), net.decode(&codes).unwrap());
}

#[test]
fn style_noise_has_requested_spread() {
    let mut cfg = LmserConfig::new(LayerSpecs::Dense { sizes: vec![6, 5, 12] });
    cfg.supervised = true;
    cfg.n_classes = 10;
    cfg.style_units = 2;
    let net = Lmser::new(cfg, &mut rng(12)).unwrap();
    let sigma = 0.1f32;
    let samples = 50_000;
    let code = Tensor::zeros(vec![samples, 12]);
    let noisy = net.inject_style_noise(&code, sigma, &mut rng(13)).unwrap();
    let style: Vec<f64> = noisy
        .data()
        .chunks(12)
        .flat_map(|r| r[10..12].iter().map(|&v| v as f64))
        .collect();
    assert_eq!(style.len(), 100_000);
    let mean = style.iter().sum::<f64>() / style.len() as f64;
    let var = style.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / style.len() as f64;
    let std = var.sqrt();
    assert!((std - sigma as f64).abs() <= 0.02 * sigma as f64, "std {std}");
    assert!(noisy.data().chunks(12).all(|r| r[..10].iter().all(|&v| v == 0.0)));
}

#[test]
fn reconstruction_keeps_input_shape() {
    let grid = [
        LmserConfig::new(LayerSpecs::Dense { sizes: vec![784, 64, 32, 16, 10] }),
        LmserConfig::new(LayerSpecs::mnist_conv(vec![16, 32, 64, 64])),
    ];
    for base in grid {
        for variant in Variant::ALL {
            let mut cfg = variant.config(base.layers.clone());
            cfg.reflections = cfg.reflections.min(1);
            let net = Lmser::new(cfg, &mut rng(14)).unwrap();
            for shape in [vec![1, 28, 28], vec![3, 1, 28, 28]] {
                let x = Tensor::uniform(shape.clone(), 0.0, 1.0, &mut rng(15));
                let s = net.forward(&x, 1).unwrap();
                assert_eq!(s.reconstruction.shape(), &shape[..], "{variant:?}");
                assert!(s.reconstruction.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }
}

#[test]
fn unshared_streams_make_reflections_redundant() {
    let cfg = Variant::LmserUnN.config(LayerSpecs::Dense { sizes: vec![9, 6, 4] });
    let net = Lmser::new(cfg, &mut rng(16)).unwrap();
    let x = Tensor::uniform(vec![2, 9], 0.0, 1.0, &mut rng(17));
    let r0 = net.forward(&x, 0).unwrap().reconstruction;
    for k in 1..4 {
        assert_eq!(net.forward(&x, k).unwrap().reconstruction, r0);
    }
}
