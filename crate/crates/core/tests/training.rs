use hfn_core::autograd::Gradients;
use hfn_core::click_sim::{simulate_clicks, ClickBudget};
use hfn_core::data::synthetic_samples;
use hfn_core::network::{ModelParameters, ParamEntry, ParamGroup, ParamKind};
use hfn_core::tensor::Tensor;
use hfn_core::training::{augment, clip_grad_norm, lr_schedule, sgd_step, train, LearningRates, TrainConfig, Velocity};
use hfn_core::NetworkConfig;
use proptest::prelude::*;

fn scalar_params(theta: f64) -> ModelParameters<f64> {
    ModelParameters::from_entries(
        vec![ParamEntry {
            name: "w".into(),
            group: ParamGroup::Encoder,
            kind: ParamKind::Weight,
            tensor: Tensor::full([1, 1, 1, 1], theta),
        }],
        0,
    )
}

fn grad(g: f64) -> Gradients<f64> {
    Gradients { grads: vec![Some(Tensor::full([1, 1, 1, 1], g))] }
}

const LR: LearningRates = LearningRates { encoder: 0.1, decoder: 0.0 };

#[test]
fn sgd_single_step_hand_values() {
    let mut p = scalar_params(1.0);
    let mut v = Velocity::zeros(&p);
    sgd_step(&mut p, &grad(1.0), &mut v, LR, 0.9, 0.0).unwrap();
    let theta = p.entries()[0].tensor.data()[0];
    let vel = v.buffers[0].as_ref().unwrap().data()[0];
    assert!((vel + 0.1).abs() < 1e-15);
    assert!((theta - 0.9).abs() < 1e-15);
}

#[test]
fn sgd_two_steps_closed_form() {
    let mut p = scalar_params(1.0);
    let mut v = Velocity::zeros(&p);
    for _ in 0..2 {
        sgd_step(&mut p, &grad(1.0), &mut v, LR, 0.9, 0.0).unwrap();
    }
    let vel = v.buffers[0].as_ref().unwrap().data()[0];
    assert!((vel - (-0.1 * 1.0 * 1.9)).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_rejected_without_mutation() {
    let mut p = scalar_params(1.0);
    let mut v = Velocity::zeros(&p);
    let before = p.clone();
    assert!(sgd_step(&mut p, &grad(f64::NAN), &mut v, LR, 0.9, 0.0).is_err());
    assert_eq!(p, before);
}

#[test]
fn clipping_rescales_to_the_global_norm() {
    let mut g = Gradients {
        grads: vec![Some(Tensor::<f64>::from_vec([1, 1, 1, 2], vec![3.0, 0.0])), None, Some(Tensor::full([1, 1, 1, 1], 4.0))],
    };
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g.grads[0].as_ref().unwrap().data(), &[3.0, 0.0]);
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g.grads[0].as_ref().unwrap().data()[0] - 0.6).abs() < 1e-15);
    assert!((g.grads[2].as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
    let mut bad = grad(f64::INFINITY);
    assert!(clip_grad_norm(&mut bad, 1.0).is_infinite());
    assert!(bad.grads[0].as_ref().unwrap().data()[0].is_infinite());
}

#[test]
fn schedule_reference_points() {
    let cfg = TrainConfig::default();
    let at = |e| {
        let r = lr_schedule(e, &cfg);
        (r.encoder, r.decoder)
    };
    assert_eq!(at(0), (0.0005, 0.005));
    assert_eq!(at(49), (0.0005, 0.005));
    assert_eq!(at(50), (0.00025, 0.0025));
    assert_eq!(at(149), (0.000125, 0.00125));
}

#[test]
fn augmentation_keeps_clicks_on_their_side() {
    let samples = synthetic_samples(5, 96, 21);
    for s in &samples {
        let clicks = simulate_clicks(&s.mask, ClickBudget::new(3).unwrap(), 4).unwrap();
        for seed in 0..100 {
            let (img, mask, mapped) = augment(&s.image, &s.mask, &clicks, seed);
            assert_eq!((img.height() as usize, img.width() as usize), mask.dims());
            assert!(!mapped.foreground.is_empty() && !mapped.background.is_empty());
            assert!(mapped.foreground.iter().all(|c| mask.get(c.0, c.1)), "seed {seed}");
            assert!(mapped.background.iter().all(|c| !mask.get(c.0, c.1)), "seed {seed}");
            mapped.validate(mask.height(), mask.width()).unwrap();
        }
    }
}

#[test]
fn overfits_a_single_sample() {
    let data = synthetic_samples(1, 64, 5);
    let cfg = TrainConfig { epochs: 30, batch_size: 1, ..TrainConfig::desk_scale() };
    let (params, history) = train(&data, &NetworkConfig::tiny(), &cfg).unwrap();
    let first = history.epochs.first().unwrap().loss;
    let last = history.epochs.last().unwrap().loss;
    assert!(last < first, "loss {first} -> {last}");
    assert!(params.all_finite());
}

#[test]
fn training_replays_bit_for_bit() {
    let data = synthetic_samples(6, 64, 2);
    let cfg = TrainConfig { epochs: 2, seed: 9, ..TrainConfig::desk_scale() };
    let (a, ha) = train(&data, &NetworkConfig::tiny(), &cfg).unwrap();
    let (b, hb) = train(&data, &NetworkConfig::tiny(), &cfg).unwrap();
    assert_eq!(ha, hb);
    for (x, y) in a.entries().iter().zip(b.entries()) {
        assert!(x.tensor.data().iter().zip(y.tensor.data()).all(|(p, q)| p.to_bits() == q.to_bits()), "{}", x.name);
    }
    let (c, _) = train(&data, &NetworkConfig::tiny(), &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn empty_train_split_is_error() {
    let mut data = synthetic_samples(2, 64, 0);
    for s in &mut data {
        s.split = hfn_core::data::Split::Test;
    }
    assert!(train(&data, &NetworkConfig::tiny(), &TrainConfig::desk_scale()).is_err());
}

proptest! {
    #[test]
    fn zero_rate_and_velocity_is_identity(theta in -10.0f64..10.0, g in -10.0f64..10.0, m in 0.0f64..1.0) {
        let mut p = scalar_params(theta);
        let mut v = Velocity::zeros(&p);
        let zero = LearningRates { encoder: 0.0, decoder: 0.0 };
        sgd_step(&mut p, &grad(g), &mut v, zero, m, 0.0).unwrap();
        prop_assert_eq!(p.entries()[0].tensor.data()[0], theta);
    }

    #[test]
    fn schedule_never_increases(period in 1usize..80, e in 0usize..500) {
        let cfg = TrainConfig { lr_halving_period_epochs: period, ..TrainConfig::default() };
        let (a, b) = (lr_schedule(e, &cfg), lr_schedule(e + 1, &cfg));
        prop_assert!(b.encoder <= a.encoder && b.decoder <= a.decoder);
    }
}
