mod common;

use awp_core::attacks::{fgsm, pgd, project_ball, AttackLoss, ThreatModel, ThreatNorm};
use awp_core::losses::at_loss;
use awp_core::rng::Rng;
use awp_core::trainer::{Schedule, TrainConfig, Trainer};
use awp_core::Tensor;
use common::{bits_equal, images, logistic, tiny_cnn, uniform};
use proptest::prelude::*;

fn linf_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

fn l2_row_dist(a: &Tensor, b: &Tensor, i: usize) -> f64 {
    a.row(i).iter().zip(b.row(i)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[test]
fn pgd_two_step_logistic_trace() {
    // 0.5 -> 0.43 -> clamp(0.36) = 0.40
    let net = logistic(2.0);
    let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let tm = ThreatModel {
        random_start: false,
        ..ThreatModel::linf(0.1, 0.07, 2)
    };
    let one = pgd(&net, &x, &[1], &ThreatModel { steps: 1, ..tm }, AttackLoss::CrossEntropy, 0).unwrap();
    assert!((one.data()[0] - 0.43).abs() < 1e-12);
    let two = pgd(&net, &x, &[1], &tm, AttackLoss::CrossEntropy, 0).unwrap();
    assert!((two.data()[0] - 0.40).abs() < 1e-12);
}

#[test]
fn attacks_get_stronger_on_a_trained_net() {
    let data = images(256, 1);
    let test = images(64, 2);
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        schedule: Schedule::Constant { lr: 0.05 },
        threat: ThreatModel::linf(0.0, 0.01, 1),
        eval_attack: ThreatModel::linf(0.0, 0.01, 1),
        eval_every: 4,
        ..TrainConfig::default()
    };
    let net = Trainer::new(cfg).unwrap().fit(tiny_cnn(1), &data, &test, None).unwrap().last;
    let x = test.inputs.clone();
    let y = test.labels().unwrap();
    let tm = ThreatModel::linf(0.05, 0.0125, 10);
    let clean = at_loss(&net, &x, y).unwrap();
    let f = at_loss(&net, &fgsm(&net, &x, y, &tm, AttackLoss::CrossEntropy).unwrap(), y).unwrap();
    let p = at_loss(&net, &pgd(&net, &x, y, &tm, AttackLoss::CrossEntropy, 3).unwrap(), y).unwrap();
    assert!(f >= clean - 1e-9, "fgsm {f} < clean {clean}");
    assert!(p >= f, "pgd {p} < fgsm {f}");
}

#[test]
fn same_seed_same_adversarial_batch() {
    let data = images(16, 4);
    let net = tiny_cnn(2);
    let y = data.labels().unwrap();
    let tm = ThreatModel::linf(0.05, 0.01, 5);
    let a = pgd(&net, &data.inputs, y, &tm, AttackLoss::CrossEntropy, 9).unwrap();
    let b = pgd(&net, &data.inputs, y, &tm, AttackLoss::CrossEntropy, 9).unwrap();
    let c = pgd(&net, &data.inputs, y, &tm, AttackLoss::CrossEntropy, 10).unwrap();
    assert!(bits_equal(&a, &b));
    assert!(!bits_equal(&a, &c));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pgd_outputs_are_feasible(
        seed in 0u64..1000,
        eps in 0.0f64..0.5,
        steps in 1usize..6,
        l2 in any::<bool>(),
        trades in any::<bool>(),
    ) {
        let data = images(8, seed);
        let net = tiny_cnn(seed);
        let y = data.labels().unwrap();
        let tm = ThreatModel {
            norm: if l2 { ThreatNorm::L2 } else { ThreatNorm::Linf },
            ..ThreatModel::linf(eps, eps / 3.0 + 1e-3, steps)
        };
        let loss = if trades { AttackLoss::TradesKl } else { AttackLoss::CrossEntropy };
        let adv = pgd(&net, &data.inputs, y, &tm, loss, seed).unwrap();
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
        if l2 {
            for i in 0..adv.rows() {
                prop_assert!(l2_row_dist(&adv, &data.inputs, i) <= eps * (1.0 + 1e-12));
            }
        } else {
            prop_assert!(linf_dist(&adv, &data.inputs) <= eps * (1.0 + 1e-12));
        }
    }

    #[test]
    fn ball_projection_is_idempotent(seed in 0u64..1000, eps in 0.0f64..1.0, l2 in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let x = uniform(&[4, 6], 0.0, 1.0, &mut rng);
        let z = uniform(&[4, 6], -1.0, 2.0, &mut rng);
        let tm = ThreatModel {
            norm: if l2 { ThreatNorm::L2 } else { ThreatNorm::Linf },
            ..ThreatModel::linf(eps, 0.1, 1)
        };
        let once = project_ball(&z, &x, &tm).unwrap();
        let twice = project_ball(&once, &x, &tm).unwrap();
        prop_assert!(bits_equal(&once, &twice));
    }
}
