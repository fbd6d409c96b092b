mod common;

use common::{rng, uniform32};
use licw_core::attacks::AttackConfig;
use licw_core::diffcore::Tensor;
use licw_core::models::{CompressionModel, Family};
use licw_core::optim::{
    adversarial_finetune, online_loss, online_update, random_crops, train_rd, AdamState, AdversarialConfig,
    DirectionSampler, LrSchedule, TrainConfig,
};

fn scalar(v: f32) -> Tensor {
    Tensor::new(vec![1], vec![v]).unwrap()
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut s = AdamState::new();
    let p = [scalar(1.5)];
    for _ in 0..5 {
        let out = s.update(&p, &[scalar(0.0)], 0.1).unwrap();
        assert_eq!(out[0].data(), p[0].data());
    }
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    // with bias correction the first update is lr * g / (|g| + eps)
    for g in [3.0f32, -0.02, 250.0] {
        let mut s = AdamState::new();
        let out = s.update(&[scalar(0.0)], &[scalar(g)], 0.01).unwrap();
        let expect = -0.01 * g.signum();
        assert!((out[0].data()[0] - expect).abs() < 1e-6, "{g}: {}", out[0].data()[0]);
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut s = AdamState::new();
    let mut p = scalar(0.0);
    for _ in 0..200 {
        let v = p.data()[0];
        p = s.update(&[p.clone()], &[scalar(2.0 * (v - 3.0))], 0.1).unwrap().remove(0);
    }
    assert!((p.data()[0] - 3.0).abs() < 1e-2, "{}", p.data()[0]);
    assert_eq!(s.step_count(), 200);
}

#[test]
fn schedules_drop_where_configured() {
    let s = LrSchedule::last_tenth(1e-3, 1e-4, 2000);
    assert_eq!(s.at(0), 1e-3);
    assert_eq!(s.at(1799), 1e-3);
    assert_eq!(s.at(1800), 1e-4);
    assert_eq!(LrSchedule::constant(0.5).at(10_000), 0.5);
}

fn dataset() -> Vec<Tensor> {
    let mut r = rng(1);
    (0..3)
        .map(|_| {
            let noise = uniform32(&mut r, &[1, 3, 32, 32], -0.1, 0.1);
            Tensor::from_fn(vec![1, 3, 32, 32], |i| {
                let (y, x) = ((i / 32) % 32, i % 32);
                (0.5 + 0.3 * ((x as f32 * 0.4).sin() * (y as f32 * 0.25).cos()) + noise.data()[i]).clamp(0.0, 1.0)
            })
        })
        .collect()
}

#[test]
fn crops_have_the_requested_shape_and_come_from_the_data() {
    let data = dataset();
    let c = random_crops(&data, 4, 16, &mut rng(2)).unwrap();
    assert_eq!(c.shape(), &[4, 3, 16, 16]);
    assert!(c.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(random_crops(&data, 1, 64, &mut rng(2)).is_err());
}

fn small_config(steps: usize) -> TrainConfig {
    TrainConfig { steps, crop: 16, batch: 2, lr: LrSchedule::constant(1e-3), seed: 3, ..TrainConfig::new(0.01) }
}

#[test]
fn zero_steps_leave_parameters_untouched() {
    let mut m = CompressionModel::new(Family::HyperS, 0.01, 1).unwrap();
    let before = m.clone();
    let trace = train_rd(&mut m, &dataset(), &small_config(0)).unwrap();
    assert!(trace.rows.is_empty());
    for (k, v) in m.params() {
        assert!(v.bit_eq(&before.params()[k]), "{k}");
    }
}

#[test]
fn short_training_reduces_the_loss_and_is_reproducible() {
    let data = dataset();
    let cfg = small_config(60);
    let mut a = CompressionModel::new(Family::Factorized, 0.01, 2).unwrap();
    let trace = train_rd(&mut a, &data, &cfg).unwrap();
    assert_eq!(trace.rows.len(), 60);
    let first = trace.window_mean(0, 10).unwrap();
    let last = trace.window_mean(50, 10).unwrap();
    assert!(last < first, "{first} -> {last}");
    assert!(trace.to_csv().starts_with("step,rate,distortion,total\n"));

    let mut b = CompressionModel::new(Family::Factorized, 0.01, 2).unwrap();
    train_rd(&mut b, &data, &cfg).unwrap();
    for (k, v) in a.params() {
        assert!(v.bit_eq(&b.params()[k]), "{k}");
    }
}

#[test]
fn online_update_never_returns_a_worse_image() {
    let m = CompressionModel::new(Family::HyperS, 0.01, 4).unwrap();
    let x = uniform32(&mut rng(5), &[1, 3, 16, 16], 0.0, 1.0);
    let res = online_update(&m, &x, 0.01, 8, 1e-2).unwrap();
    assert_eq!(res.loss_trace.len(), 9);
    let direct = online_loss(&m, &x, 0.01).unwrap();
    assert!((res.initial_loss - direct).abs() <= 1e-5 * direct, "{} vs {direct}", res.initial_loss);
    assert!(res.best_loss <= res.initial_loss);
    assert!(res.best_trace.windows(2).all(|w| w[1] <= w[0]));
    assert!(res.x_u.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!((online_loss(&m, &res.x_u, 0.01).unwrap() - res.best_loss).abs() <= 1e-5 * res.best_loss);

    let none = online_update(&m, &x, 0.01, 0, 1e-2).unwrap();
    assert!(none.x_u.bit_eq(&x));
}

#[test]
fn direction_sampler_respects_its_modes() {
    let s = DirectionSampler::default();
    let mut r = rng(6);
    let (mut rate_only, mut dist_only, mut joint) = (0, 0, 0);
    for _ in 0..2000 {
        match s.sample(&mut r) {
            (1.0, 0.0) => rate_only += 1,
            (0.0, 1.0) => dist_only += 1,
            (1.0, gd) => {
                assert!((2e-4..=0.2).contains(&gd));
                joint += 1
            }
            other => panic!("unexpected direction {other:?}"),
        }
    }
    assert!((300..500).contains(&rate_only), "{rate_only}");
    assert!((300..500).contains(&dist_only), "{dist_only}");
    assert!(joint > 1000);
    let fixed = DirectionSampler::Fixed { gamma_r: 0.0, gamma_d: 1.0 };
    assert_eq!(fixed.sample(&mut r), (0.0, 1.0));
}

#[test]
fn adversarial_finetune_is_deterministic() {
    let data = dataset();
    let m = CompressionModel::new(Family::Factorized, 0.01, 7).unwrap();
    let mut attack = AttackConfig::new(1.0, 0.0);
    attack.surface_steps = 2;
    let cfg = AdversarialConfig { iters: 2, batch: 1, crop: 16, attack, ..AdversarialConfig::default() };
    let (a, ta) = adversarial_finetune(&m, &data, &cfg).unwrap();
    let (b, tb) = adversarial_finetune(&m, &data, &cfg).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(ta.rows.len(), 2);
    for (k, v) in a.params() {
        assert!(v.bit_eq(&b.params()[k]), "{k}");
        assert_eq!(v.shape(), m.params()[k].shape());
    }
    assert!(a.params().iter().any(|(k, v)| !v.bit_eq(&m.params()[k])));
}
