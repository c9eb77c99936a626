//! Acceptance suite. Prints one `criterion N: PASS|FAIL` line per criterion
//! and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use awp_core::attacks::{fgsm, pgd, AttackLoss, ThreatModel};
use awp_core::awp::{compute_awp, AwpConfig, PerturbationState};
use awp_core::config::ExperimentConfig;
use awp_core::data::{batches, encode_idx, parse_idx_images, parse_idx_labels, Dataset};
use awp_core::landscape::{
    awp_perturbation, flatness, grid, matched_gamma, pac_bayes_flatness, perturb_compare, perturbed_loss,
    profile_1d, repeatability, sample_direction,
};
use awp_core::losses::{robust_objective, LossBatch, LossSpec, ObjectiveBatch, RobustLoss};
use awp_core::network::{LayerSpec, Network, NormKind};
use awp_core::rng::{derive_seed, Rng};
use awp_core::tape::{finite_difference_check, Tape};
use awp_core::trainer::{
    evaluate, read_checkpoint, save_checkpoint, train_step, CheckpointRecord, EpochMetrics, EvalResult,
    Perturbation, RunMetrics, Schedule, StepBatch, TrainConfig, TrainState, Trainer, METRICS_HEADER,
};
use awp_core::{Result, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, elapsed: Duration, r: Result<Verdict>, failures: &mut usize) {
    let secs = elapsed.as_secs_f64();
    let (pass, detail) = match r {
        Ok(v) => (v.pass, v.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if !pass {
        *failures += 1;
    }
    println!(
        "criterion {n}: {} ({detail}; {secs:.1}s)",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

fn within_time(start: Instant, limit: Duration) -> (bool, String) {
    let e = start.elapsed();
    (e < limit, format!("{:.1}s (limit {}s)", e.as_secs_f64(), limit.as_secs()))
}

// ---------------------------------------------------------------- 1

fn fd_nets() -> Vec<(&'static str, Network)> {
    let conv = Network::build(
        &[
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 2,
                pad: 1,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 2,
                kernel: 2,
                pad: 0,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 32,
                outputs: 3,
                bias: true,
            },
        ],
        &[1, 4, 4],
        3,
        11,
    )
    .unwrap();
    let mlp = Network::build(
        &[
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 16,
                outputs: 12,
                bias: false,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 12,
                outputs: 3,
                bias: true,
            },
        ],
        &[1, 4, 4],
        3,
        12,
    )
    .unwrap();
    vec![("conv", conv), ("mlp", mlp)]
}

fn with_nonzero_biases(net: &Network, rng: &mut Rng) -> Network {
    let params = net
        .params()
        .into_iter()
        .map(|p| {
            if p.shape().len() == 1 {
                uniform(p.shape(), -0.2, 0.2, rng)
            } else {
                p
            }
        })
        .collect();
    let mut out = net.clone();
    out.set_params(params).unwrap();
    out
}

fn criterion_1() -> Result<Verdict> {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let losses = [
        ("at_ce", RobustLoss::AtCe),
        ("trades", RobustLoss::Trades { beta: 6.0 }),
        ("mart", RobustLoss::Mart { lambda: 5.0 }),
    ];
    let mut worst = 0.0f64;
    let mut checks = 0;
    let mut largest = 0;
    for (_, net) in fd_nets() {
        let net = with_nonzero_biases(&net, &mut rng);
        largest = largest.max(net.params().iter().map(Tensor::len).sum::<usize>());
        let x = uniform(&[5, 1, 4, 4], 0.0, 1.0, &mut rng);
        let xa = x.zip_map(&uniform(x.shape(), -0.05, 0.05, &mut rng), "add", |a, b| (a + b).clamp(0.0, 1.0))?;
        let y = [0, 1, 2, 1, 0];
        let n_params = net.params().len();
        let weight_index = net.param_weight_index();
        for &(_, loss) in &losses {
            let batch = LossBatch {
                natural: &x,
                adversarial: &xa,
                labels: &y,
            };
            // Gradient with respect to each parameter tensor, weights and biases.
            for i in 0..n_params {
                let at = net.params()[i].clone();
                let (layer, is_bias) = match weight_index[i] {
                    Some(l) => (l, false),
                    None => (weight_index[..i].iter().rev().find_map(|w| *w).unwrap(), true),
                };
                let err = finite_difference_check(
                    |tape: &mut Tape, p| {
                        let mut vars = net.register(tape, false);
                        if is_bias {
                            vars[layer].bias = Some(p);
                        } else {
                            vars[layer].weight = p;
                        }
                        robust_objective(tape, &net, &vars, loss, batch)
                    },
                    &at,
                    1e-5,
                )?;
                worst = worst.max(err);
                checks += 1;
            }
            // Gradient with respect to the adversarial input.
            let err = finite_difference_check(
                |tape: &mut Tape, p| {
                    let vars = net.register(tape, false);
                    let xa_v = p;
                    let xn = tape.constant(x.clone());
                    let adv = net.forward(tape, xa_v, &vars)?;
                    let nat = net.forward(tape, xn, &vars)?;
                    match loss {
                        RobustLoss::AtCe => awp_core::losses::cross_entropy(tape, adv, &y),
                        RobustLoss::Trades { beta } => {
                            awp_core::losses::trades_from_logits(tape, nat, adv, &y, beta)
                        }
                        RobustLoss::Mart { lambda } => {
                            awp_core::losses::mart_from_logits(tape, nat, adv, &y, lambda)
                        }
                    }
                },
                &xa,
                1e-5,
            )?;
            worst = worst.max(err);
            checks += 1;
        }
    }
    let (fast, t) = within_time(start, Duration::from_secs(30));
    Ok(verdict(
        worst < 1e-5 && fast && largest <= 1000,
        format!("{checks} checks, max relative error {worst:.2e}, largest net {largest} params, {t}"),
    ))
}

// ---------------------------------------------------------------- 2

fn small_cnn(seed: u64) -> Network {
    Network::build(
        &[
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                pad: 0,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 4 * 6 * 6,
                outputs: 10,
                bias: true,
            },
        ],
        &[1, 8, 8],
        10,
        seed,
    )
    .unwrap()
}

fn criterion_2(train: &Dataset) -> Result<Verdict> {
    let start = Instant::now();
    let labels = train.labels()?;

    // FGSM against one-step PGD.
    let net = small_cnn(3);
    let idx: Vec<usize> = (0..64).collect();
    let x = train.inputs.select_rows(&idx);
    let y = &labels[..64];
    let mut fgsm_ok = true;
    for eps in [0.0, 0.01, 0.05, 0.3] {
        for loss in [AttackLoss::CrossEntropy, AttackLoss::TradesKl] {
            let a = fgsm(&net, &x, y, &ThreatModel::linf(eps, eps, 1), loss)?;
            let tm = ThreatModel {
                random_start: false,
                ..ThreatModel::linf(eps, eps.max(1e-300), 1)
            };
            let b = if eps == 0.0 { x.clone() } else { pgd(&net, &x, y, &tm, loss, 0)? };
            fgsm_ok &= a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        }
    }

    // AWP with gamma = 0 against plain AT, step by step.
    let sub = train.select(&(0..256).collect::<Vec<_>>());
    let sub_labels = sub.labels()?;
    let base = TrainConfig {
        epochs: 3,
        batch_size: 32,
        schedule: Schedule::Piecewise {
            initial: 0.05,
            milestones: vec![2],
            factor: 0.1,
        },
        threat: ThreatModel::linf(0.05, 0.0125, 10),
        eval_attack: ThreatModel::linf(0.05, 0.0125, 20),
        seed: 5,
        ..TrainConfig::default()
    };
    let awp = TrainConfig {
        perturbation: Perturbation::Awp(AwpConfig::new(0.0)),
        ..base.clone()
    };
    let (mut net_a, mut net_b) = (small_cnn(4), small_cnn(4));
    let (mut sa, mut sb) = (TrainState::new(&net_a, &base), TrainState::new(&net_b, &awp));
    let mut steps = 0;
    let mut traj_ok = true;
    for epoch in 1..=base.epochs {
        let lr = base.schedule.lr_at(epoch, base.epochs);
        for idx in batches(sub.len(), base.batch_size, base.seed, epoch as u64)? {
            let x = sub.inputs.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| sub_labels[i]).collect();
            let batch = StepBatch {
                inputs: &x,
                labels: &y,
                unlabeled: None,
            };
            let ma = train_step(&mut net_a, &mut sa, batch, &base, lr)?;
            let mb = train_step(&mut net_b, &mut sb, batch, &awp, lr)?;
            traj_ok &= ma.loss.to_bits() == mb.loss.to_bits();
            traj_ok &= net_a
                .params()
                .iter()
                .zip(net_b.params().iter())
                .all(|(p, q)| p.data().iter().zip(q.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            steps += 1;
        }
    }
    traj_ok &= sa.momentum == sb.momentum;

    // Same through the full training loop, metrics included.
    let test = train.select(&(256..384).collect::<Vec<_>>());
    let fa = Trainer::new(base)?.fit(small_cnn(6), &sub, &test, None)?;
    let fb = Trainer::new(awp)?.fit(small_cnn(6), &sub, &test, None)?;
    let fit_ok = fa.last == fb.last && fa.metrics.to_csv() == fb.metrics.to_csv();

    let (fast, t) = within_time(start, Duration::from_secs(60));
    Ok(verdict(
        fgsm_ok && traj_ok && fit_ok && fast,
        format!("fgsm==pgd1 {fgsm_ok}, {steps} steps bitwise {traj_ok}, fit identical {fit_ok}, {t}"),
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Result<Verdict> {
    let mut rng = Rng::new(3);
    let draws = 2000;
    let (mut feasible, mut idempotent, mut degenerate) = (0, 0, 0);
    let mut zero_layers = 0;
    for i in 0..draws {
        let layers = 1 + rng.below(3);
        let norm = if i % 2 == 0 { NormKind::Frobenius } else { NormKind::L1 };
        let gamma = match i % 5 {
            0 => 0.0,
            1 => 10f64.powf(rng.uniform_range(-6.0, 1.0)),
            _ => rng.uniform_range(0.0, 0.5),
        };
        let mut ws = Vec::new();
        let mut vs = Vec::new();
        for _ in 0..layers {
            let shape = [1 + rng.below(5), 1 + rng.below(4)];
            let w_scale = 10f64.powf(rng.uniform_range(-3.0, 2.0));
            let w = if rng.below(8) == 0 {
                zero_layers += 1;
                Tensor::zeros(&shape)
            } else {
                uniform(&shape, -w_scale, w_scale, &mut rng)
            };
            let v_scale = 10f64.powf(rng.uniform_range(-4.0, 2.0));
            vs.push(uniform(&shape, -v_scale, v_scale, &mut rng));
            ws.push(w);
        }
        let wr: Vec<&Tensor> = ws.iter().collect();
        let mut state = PerturbationState {
            v: vs,
            config: AwpConfig {
                norm,
                ..AwpConfig::new(gamma)
            },
        };
        state.project(&wr)?;
        let once = state.v.clone();
        state.project(&wr)?;
        if state
            .v
            .iter()
            .zip(&once)
                .all(|(a, b)| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
        {
            idempotent += 1;
        }
        if once
            .iter()
            .zip(&ws)
            .all(|(v, w)| norm.of(v) <= gamma * norm.of(w) * (1.0 + 1e-12))
        {
            feasible += 1;
        }
        if once
            .iter()
            .zip(&ws)
            .all(|(v, w)| (norm.of(w) > 0.0 && gamma > 0.0) || v.data().iter().all(|&x| x == 0.0))
        {
            degenerate += 1;
        }
    }
    let pass = feasible == draws && idempotent == draws && degenerate == draws && zero_layers > 0;
    Ok(verdict(
        pass,
        format!(
            "{draws} draws: feasible {feasible}, idempotent {idempotent}, zero-ball handled {degenerate} ({zero_layers} zero-weight layers)"
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn bias_free_nets() -> Vec<Network> {
    let cnn = Network::build(
        &[
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                pad: 1,
                bias: false,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 4,
                out_channels: 4,
                kernel: 3,
                pad: 0,
                bias: false,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 4 * 6 * 6,
                outputs: 5,
                bias: false,
            },
        ],
        &[1, 8, 8],
        5,
        21,
    )
    .unwrap();
    let mlp = Network::build(
        &[
            LayerSpec::Dense {
                inputs: 10,
                outputs: 16,
                bias: false,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 16,
                outputs: 16,
                bias: false,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 16,
                outputs: 3,
                bias: false,
            },
        ],
        &[10],
        3,
        22,
    )
    .unwrap();
    vec![cnn, mlp]
}

fn criterion_4() -> Result<Verdict> {
    let mut rng = Rng::new(4);
    let mut worst_out = 0.0f64;
    let mut worst_filter = 0.0f64;
    for net in bias_free_nets() {
        let mut shape = vec![100];
        shape.extend_from_slice(net.input_shape());
        let x = uniform(&shape, 0.0, 1.0, &mut rng);
        let base = net.logits(&x)?;
        for l in 0..net.num_param_layers() - 1 {
            for c in [0.1, 1.0, 10.0] {
                let out = net.rescale_pair(l, c)?.logits(&x)?;
                worst_out = base
                    .data()
                    .iter()
                    .zip(out.data())
                    .fold(worst_out, |m, (a, b)| m.max((a - b).abs()));
            }
        }
        for seed in 0..5 {
            let d = sample_direction(&net, seed)?;
            for (dl, w) in d.d.iter().zip(net.weights()) {
                for j in 0..w.rows() {
                    let dn = NormKind::Frobenius.of_slice(dl.row(j));
                    let wn = NormKind::Frobenius.of_slice(w.row(j));
                    worst_filter = worst_filter.max((dn - wn).abs());
                }
            }
        }
    }
    Ok(verdict(
        worst_out <= 1e-9 && worst_filter <= 1e-12,
        format!("max output change {worst_out:.2e}, max filter norm mismatch {worst_filter:.2e}"),
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Result<Verdict> {
    // One parameter w = 2, loss +-(w+v)^2 / 2, gamma = 0.5, eta = gamma, one step.
    let w = Tensor::from_vec(vec![2.0]);
    let mut results = Vec::new();
    for sign in [1.0, -1.0] {
        let mut state = PerturbationState::zeros(
            &[&w],
            AwpConfig {
                step_size: Some(0.5),
                ..AwpConfig::new(0.5)
            },
        );
        state.ascend(&[&w], |v| {
            let z = w.data()[0] + v[0].data()[0];
            Ok((sign * 0.5 * z * z, vec![Tensor::from_vec(vec![sign * z])]))
        })?;
        results.push(state.v[0].data()[0]);
    }
    let scalar_ok = results == [1.0, -1.0];

    // The same rule through the network path: two-class logistic model with
    // logits [0, 2x] at x = 0.5, y = 1. The CE gradient is
    // sigmoid(-1) * 0.5 * [1, -1], so v = gamma * ||w|| * [1, -1] / sqrt(2).
    let mut net = Network::build(
        &[LayerSpec::Dense {
            inputs: 1,
            outputs: 2,
            bias: false,
        }],
        &[1],
        2,
        0,
    )?;
    *net.weights_mut()[0] = Tensor::new(vec![2, 1], vec![0.0, 2.0])?;
    let x = Tensor::new(vec![1, 1], vec![0.5])?;
    let cfg = AwpConfig::new(0.5);
    let state = PerturbationState::for_network(&net, cfg);
    let batch = ObjectiveBatch {
        labeled: LossBatch {
            natural: &x,
            adversarial: &x,
            labels: &[1],
        },
        unlabeled: None,
    };
    let out = compute_awp(&net, &LossSpec::default(), batch, &state)?;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let v = out.v[0].data();
    let net_dev = (v[0] - h).abs().max((v[1] + h).abs());
    Ok(verdict(
        scalar_ok && net_dev < 1e-15,
        format!(
            "scalar v = {} and {}, logistic v = [{:.17}, {:.17}] (deviation {net_dev:.1e})",
            results[0], results[1], v[0], v[1]
        ),
    ))
}

// ---------------------------------------------------------------- shared model

struct Run {
    gap: f64,
    test_rob: f64,
    flat: f64,
    net: Network,
}

fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let epochs = cfg.get("epochs").to_string();
    cfg.set("eval_every", &epochs).unwrap();
    cfg
}

fn train_run(seed: u64, awp: bool) -> Result<Run> {
    let mut cfg = base_config();
    cfg.set("seed", &seed.to_string())?;
    cfg.set("awp", if awp { "on" } else { "off" })?;
    let (train, test) = cfg.datasets()?;
    let net = cfg.network(train.example_shape(), train.classes)?;
    let tc = cfg.train_config()?;
    let out = Trainer::new(tc.clone())?.fit(net, &train, &test, None)?;
    let last = out.metrics.last().expect("final epoch evaluated");
    let data = train.subset(cfg.usize("landscape_subset"), derive_seed(seed, 0x5B));
    let alphas = grid(cfg.f64("alpha_min"), cfg.f64("alpha_max"), cfg.usize("alpha_steps"))?;
    let d = sample_direction(&out.last, cfg.u64("direction_seed"))?;
    let p = profile_1d(&out.last, &data, &d, &alphas, &tc.eval_attack, seed)?;
    Ok(Run {
        gap: last.gap,
        test_rob: last.test_rob,
        flat: flatness(&p)?.max_rise,
        net: out.last,
    })
}

// ---------------------------------------------------------------- 6

fn criterion_6(net: &Network, train: &Dataset) -> Result<Verdict> {
    let start = Instant::now();
    let cfg = base_config();
    let attack = cfg.eval_attack();
    let gamma = 5e-3;
    let mut wins = 0;
    let mut margins = Vec::new();
    for s in 0..20u64 {
        let data = train.subset(256, derive_seed(600, s));
        let rows = perturb_compare(net, &data, &[gamma], AwpConfig::new(gamma), 20, &attack, s)?;
        let awp = rows.iter().find(|r| r.strategy == "awp").unwrap().loss;
        let rwp = rows.iter().find(|r| r.strategy == "rwp").unwrap().loss;
        wins += (awp > rwp) as usize;
        margins.push(awp - rwp);
    }
    let (fast, t) = within_time(start, Duration::from_secs(300));
    Ok(verdict(
        wins >= 18 && fast,
        format!(
            "AWP above median RWP in {wins}/20 seeds, median excess {:.4}, {t}",
            median(&margins)
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7(at: &[Run], awp: &[Run], elapsed: Duration) -> Verdict {
    let col = |rs: &[Run], f: fn(&Run) -> f64| median(&rs.iter().map(f).collect::<Vec<_>>());
    let (gap_at, gap_awp) = (col(at, |r| r.gap), col(awp, |r| r.gap));
    let (flat_at, flat_awp) = (col(at, |r| r.flat), col(awp, |r| r.flat));
    let (rob_at, rob_awp) = (col(at, |r| r.test_rob), col(awp, |r| r.test_rob));
    let fast = elapsed < Duration::from_secs(900);
    verdict(
        gap_awp < gap_at && flat_awp < flat_at && rob_awp >= rob_at - 1.0 && fast,
        format!(
            "median gap AT {gap_at:.2} vs AWP {gap_awp:.2}; median flatness AT {flat_at:.3} vs AWP {flat_awp:.3}; \
             median test robustness AT {rob_at:.2} vs AWP {rob_awp:.2}; training and landscapes {:.0}s < 900s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8(net: &Network, train: &Dataset) -> Result<Verdict> {
    let cfg = base_config();
    let attack = cfg.eval_attack();
    let data = train.subset(500, 8);
    let alphas = grid(-1.0, 1.0, 21)?;
    let seed = 80;
    let mut profiles = Vec::new();
    for k in 0..10 {
        let d = sample_direction(net, 800 + k)?;
        profiles.push(profile_1d(net, &data, &d, &alphas, &attack, seed)?);
    }
    let i0 = alphas.iter().position(|&a| a == 0.0).unwrap();
    let direct = evaluate(net, &data, &attack, seed)?.adv_loss;
    let centre_dev = profiles
        .iter()
        .map(|p| (p.losses[i0] - direct).abs())
        .fold(0.0f64, f64::max);
    let band = repeatability(&profiles)?;
    Ok(verdict(
        centre_dev <= 1e-9 && band < 0.3,
        format!("|g(0) - evaluate| = {centre_dev:.1e}, 10-direction normalized deviation {band:.3} (limit 0.3)"),
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9(net: &Network, train: &Dataset) -> Result<Verdict> {
    let cfg = base_config();
    let attack = cfg.eval_attack();
    let data = train.subset(500, 9);
    let seed = 90;
    let n_max = net.weights().iter().map(|w| w.len()).max().unwrap() as f64;
    let alpha_var = 5e-3 / n_max.sqrt();
    let gamma = matched_gamma(net, alpha_var);
    let est = pac_bayes_flatness(net, &data, alpha_var, 30, seed, &attack)?;
    let v = awp_perturbation(net, &data, AwpConfig::new(gamma), &attack, derive_seed(seed, 0x9A))?;
    let awp_rise = perturbed_loss(net, Some(&v), &data, &attack, derive_seed(seed, 0))? - est.base;
    let upper = est.mean_rise + 3.0 * est.std_error;
    Ok(verdict(
        upper <= awp_rise,
        format!(
            "alpha {alpha_var:.2e}, matched gamma {gamma:.2e}: expected rise {:.2e} + 3 x {:.2e} = {upper:.2e} <= AWP rise {awp_rise:.2e}",
            est.mean_rise, est.std_error
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10(net: &Network) -> Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| awp_core::Error::Invalid(e.to_string()))?;
    let path = dir.path().join("model.ckpt");
    let rec = CheckpointRecord::from_network(net, 30, [1, 2, 3, u64::MAX], vec![("seed".into(), "0".into())]);
    save_checkpoint(&path, &rec)?;
    let back = read_checkpoint(&path)?;
    let restored = back.apply_to(net)?;
    let ckpt_ok = back == rec
        && restored
            .params()
            .iter()
            .zip(net.params().iter())
            .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let (images, labels) = encode_idx(&[0, 128, 255, 7, 9, 1, 2, 3], 2, 2, 2, &[3, 1]);
    let p = std::path::Path::new("mem.idx");
    let valid = parse_idx_images(&images, p).is_ok() && parse_idx_labels(&labels, p).is_ok();
    let mut bad_magic = images.clone();
    bad_magic[2] = 0x09;
    let mut bad_label_magic = labels.clone();
    bad_label_magic[3] = 0x03;
    let idx_ok = valid
        && parse_idx_images(&bad_magic, p).is_err()
        && parse_idx_labels(&bad_label_magic, p).is_err()
        && (0..images.len()).all(|n| parse_idx_images(&images[..n], p).is_err())
        && (0..labels.len()).all(|n| parse_idx_labels(&labels[..n], p).is_err());

    let e = EvalResult {
        robust: 40.5,
        natural: 80.25,
        adv_loss: 1.125,
    };
    let metrics = RunMetrics {
        epochs: vec![EpochMetrics::new(1, 0.05, e, e), EpochMetrics::new(2, 0.005, e, EvalResult { robust: 41.0, ..e })],
        best_epoch: Some(2),
    };
    let csv = metrics.to_csv();
    let csv_ok = METRICS_HEADER == "epoch,lr,train_rob,test_rob,nat_acc,gap,adv_loss"
        && csv.lines().next() == Some(METRICS_HEADER)
        && RunMetrics::from_csv(&csv)?.epochs == metrics.epochs;
    Ok(verdict(
        ckpt_ok && idx_ok && csv_ok,
        format!("checkpoint bitwise {ckpt_ok}, idx rejects corruption {idx_ok}, metrics schema {csv_ok}"),
    ))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let (train, _) = base_config().datasets().expect("default synthetic data");

    let t = Instant::now();
    let r = criterion_1();
    report(1, t.elapsed(), r, &mut failures);
    let t = Instant::now();
    let r = criterion_2(&train);
    report(2, t.elapsed(), r, &mut failures);
    let t = Instant::now();
    let r = criterion_3();
    report(3, t.elapsed(), r, &mut failures);
    let t = Instant::now();
    let r = criterion_4();
    report(4, t.elapsed(), r, &mut failures);
    let t = Instant::now();
    let r = criterion_5();
    report(5, t.elapsed(), r, &mut failures);

    // Five seeds each of AT and AWP; the first AT model doubles as the
    // pretrained model for criteria 6, 8, 9 and 10.
    let t7 = Instant::now();
    let runs: Result<(Vec<Run>, Vec<Run>)> = (|| {
        let mut at = Vec::new();
        let mut awp = Vec::new();
        for seed in 0..5 {
            at.push(train_run(seed, false)?);
            awp.push(train_run(seed, true)?);
        }
        Ok((at, awp))
    })();
    let elapsed7 = t7.elapsed();
    let (at, awp) = match runs {
        Ok(r) => r,
        Err(e) => {
            for n in 6..=10 {
                report(n, elapsed7, Err(awp_core::Error::Invalid(format!("training failed: {e}"))), &mut failures);
            }
            return ExitCode::FAILURE;
        }
    };
    let pretrained = &at[0].net;

    let t = Instant::now();
    let r = criterion_6(pretrained, &train);
    report(6, t.elapsed(), r, &mut failures);
    report(7, elapsed7, Ok(criterion_7(&at, &awp, elapsed7)), &mut failures);
    let t = Instant::now();
    let r = criterion_8(pretrained, &train);
    report(8, t.elapsed(), r, &mut failures);
    let t = Instant::now();
    let r = criterion_9(pretrained, &train);
    report(9, t.elapsed(), r, &mut failures);
    let t = Instant::now();
    let r = criterion_10(pretrained);
    report(10, t.elapsed(), r, &mut failures);

    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
