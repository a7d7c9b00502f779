use lmser::attack::{fgsm, input_gradient, AttackLoss};
use lmser::network::{LayerSpecs, Lmser, Variant};
use lmser::training::{Objective, Reduction};
use lmser::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn joint() -> Objective {
    Objective { recon_weight: 1.0, reduction: Reduction::Sum, lambda_cls: 1.0 }
}

fn net(variant: Variant) -> Lmser {
    let mut cfg = variant.config(LayerSpecs::Dense { sizes: vec![16, 8, 4] });
    cfg.n_classes = 4;
    Lmser::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn perturbation_respects_budget_and_range() {
    let net = net(Variant::LmserSup);
    let x = Tensor::uniform(vec![6, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let labels = [0, 1, 2, 3, 0, 1];
    for loss in [AttackLoss::Cls, AttackLoss::Joint] {
        let same = fgsm(&net, &x, &labels, 0.0, loss, &joint()).unwrap();
        assert_eq!(same, x);
        for eps in [0.05f32, 0.3, 2.0] {
            let adv = fgsm(&net, &x, &labels, eps, loss, &joint()).unwrap();
            assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(adv.max_abs_diff(&x).unwrap() <= eps + 1e-6);
        }
    }
}

#[test]
fn step_follows_gradient_sign() {
    let net = net(Variant::LmserSup);
    let x = Tensor::full(vec![2, 16], 0.5);
    let labels = [1, 2];
    let g = input_gradient(&net, &x, &labels, AttackLoss::Cls, &joint()).unwrap();
    let adv = fgsm(&net, &x, &labels, 0.1, AttackLoss::Cls, &joint()).unwrap();
    for ((a, gi), xi) in adv.data().iter().zip(g.data()).zip(x.data()) {
        let expected = xi + 0.1 * if *gi > 0.0 { 1.0 } else if *gi < 0.0 { -1.0 } else { 0.0 };
        assert!((a - expected).abs() < 1e-7);
    }
}

#[test]
fn unsupervised_nets_cannot_be_attacked() {
    let net = net(Variant::LmserUn);
    let x = Tensor::zeros(vec![1, 16]);
    assert!(matches!(
        fgsm(&net, &x, &[0], 0.1, AttackLoss::Cls, &joint()),
        Err(Error::Capability(_))
    ));
}
