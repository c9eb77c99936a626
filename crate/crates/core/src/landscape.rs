//! Weight loss landscapes around a trained model.
//!
//! Every grid point rebuilds the perturbed model and regenerates adversarial
//! examples against it with the same attack seed that [`evaluate`] would use,
//! so the centre of a profile is exactly the evaluated adversarial loss.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::attacks::{pgd, AttackLoss, ThreatModel};
use crate::awp::{compute_awp, random_weight_perturbation, AwpConfig, PerturbationState};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LossBatch, LossSpec, ObjectiveBatch};
use crate::network::{Network, NormKind};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;
use crate::trainer::evaluate;

/// Layer-aligned direction(s) in weight space.
#[derive(Debug, Clone, PartialEq)]
pub struct Direction {
    pub d: Vec<Tensor>,
    pub seed: u64,
    pub normalized: bool,
}

/// Gaussian direction, filter-normalized so each leading-axis slice of `d`
/// has the Frobenius norm of the matching slice of `w`. Filters whose
/// weights are all zero get a zero direction.
pub fn sample_direction(net: &Network, seed: u64) -> Result<Direction> {
    let weights = net.weights();
    if weights.is_empty() {
        return Err(Error::Invalid("network has no parameterized layers".into()));
    }
    let d = weights
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let mut rng = Rng::new(derive_seed(seed, l as u64));
            let data = (0..w.len()).map(|_| rng.gaussian()).collect();
            let mut d = Tensor::new(w.shape().to_vec(), data).expect("shape matches");
            filter_normalize(&mut d, w);
            d
        })
        .collect();
    Ok(Direction {
        d,
        seed,
        normalized: true,
    })
}

/// `d_j <- d_j / ||d_j|| * ||w_j||` for every leading-axis slice `j`.
pub fn filter_normalize(d: &mut Tensor, w: &Tensor) {
    for j in 0..w.rows() {
        let wn = NormKind::Frobenius.of_slice(w.row(j));
        let row = d.row_mut(j);
        let dn = NormKind::Frobenius.of_slice(row);
        let s = if wn > 0.0 && dn > 0.0 { wn / dn } else { 0.0 };
        row.iter_mut().for_each(|x| *x *= s);
    }
}

/// `steps` evenly spaced points on `[lo, hi]`, with 0 inserted if missing.
pub fn grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) || steps < 2 {
        return Err(Error::Invalid(format!(
            "grid needs lo < hi and at least 2 steps, got [{lo}, {hi}] x {steps}"
        )));
    }
    let h = (hi - lo) / (steps - 1) as f64;
    let mut g: Vec<f64> = (0..steps)
        .map(|i| {
            let a = if i + 1 == steps { hi } else { lo + i as f64 * h };
            if a.abs() < 1e-12 * h.max(1.0) {
                0.0
            } else {
                a
            }
        })
        .collect();
    if !g.contains(&0.0) {
        g.push(0.0);
        g.sort_by(f64::total_cmp);
    }
    Ok(g)
}

fn check_grid(g: &[f64], what: &str) -> Result<()> {
    if g.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Invalid(format!("{what} grid must be strictly increasing")));
    }
    if !g.contains(&0.0) {
        return Err(Error::Invalid(format!("{what} grid must contain 0")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile1d {
    pub alphas: Vec<f64>,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile2d {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `rel[i][j] = |g(alphas[i], betas[j]) - g(0, 0)|`.
    pub rel: Vec<Vec<f64>>,
    pub center: f64,
}

fn loss_at(net: &Network, dirs: &[(&[Tensor], f64)], data: &Dataset, attack: &ThreatModel, seed: u64) -> Result<f64> {
    let mut p = net.clone();
    for &(d, s) in dirs {
        if s != 0.0 {
            p = p.perturbed(d, s)?;
        }
    }
    let tag = || {
        dirs.iter()
            .map(|(_, s)| s.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    };
    let loss = evaluate(&p, data, attack, seed)
        .map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("landscape at ({}): {context}", tag())),
            other => other,
        })?
        .adv_loss;
    if !loss.is_finite() {
        return Err(Error::non_finite(format!("landscape at ({}): loss", tag())));
    }
    Ok(loss)
}

/// Mean adversarial cross-entropy of `f_{w + alpha d}` for each `alpha`.
pub fn profile_1d(
    net: &Network,
    data: &Dataset,
    dir: &Direction,
    alphas: &[f64],
    attack: &ThreatModel,
    seed: u64,
) -> Result<Profile1d> {
    check_grid(alphas, "alpha")?;
    let losses = alphas
        .par_iter()
        .map(|&a| loss_at(net, &[(&dir.d, a)], data, attack, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(Profile1d {
        alphas: alphas.to_vec(),
        losses,
    })
}

/// Relative landscape `|g(alpha, beta) - g(0, 0)|` over the full grid.
pub fn profile_2d(
    net: &Network,
    data: &Dataset,
    d: &Direction,
    e: &Direction,
    alphas: &[f64],
    betas: &[f64],
    attack: &ThreatModel,
    seed: u64,
) -> Result<Profile2d> {
    check_grid(alphas, "alpha")?;
    check_grid(betas, "beta")?;
    let points: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect();
    let losses = points
        .par_iter()
        .map(|&(a, b)| loss_at(net, &[(&d.d, a), (&e.d, b)], data, attack, seed))
        .collect::<Result<Vec<_>>>()?;
    let ia = alphas.iter().position(|&a| a == 0.0).expect("checked");
    let ib = betas.iter().position(|&b| b == 0.0).expect("checked");
    let center = losses[ia * betas.len() + ib];
    let rel = losses
        .chunks(betas.len())
        .map(|row| row.iter().map(|g| (g - center).abs()).collect())
        .collect();
    Ok(Profile2d {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        rel,
        center,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flatness {
    /// `max_alpha g(alpha) - g(0)`.
    pub max_rise: f64,
    /// Mean of `g(alpha) - g(0)` over the grid.
    pub mean_rise: f64,
}

pub fn flatness(p: &Profile1d) -> Result<Flatness> {
    let i0 = p
        .alphas
        .iter()
        .position(|&a| a == 0.0)
        .ok_or_else(|| Error::Invalid("profile has no alpha = 0".into()))?;
    let g0 = p.losses[i0];
    let rises: Vec<f64> = p.losses.iter().map(|g| g - g0).collect();
    Ok(Flatness {
        max_rise: rises.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_rise: rises.iter().sum::<f64>() / rises.len() as f64,
    })
}

/// Min-max normalization of a loss curve onto `[0, 1]`; a flat curve maps to zeros.
pub fn normalize_profile(losses: &[f64]) -> Vec<f64> {
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r = hi - lo;
    losses
        .iter()
        .map(|g| if r > 0.0 { (g - lo) / r } else { 0.0 })
        .collect()
}

/// Largest pointwise gap between any two normalized profiles on a shared grid.
pub fn repeatability(profiles: &[Profile1d]) -> Result<f64> {
    let Some(first) = profiles.first() else {
        return Ok(0.0);
    };
    if profiles.iter().any(|p| p.alphas != first.alphas) {
        return Err(Error::Invalid("profiles must share one grid".into()));
    }
    let norm: Vec<Vec<f64>> = profiles.iter().map(|p| normalize_profile(&p.losses)).collect();
    let mut worst = 0.0f64;
    for i in 0..norm.len() {
        for j in i + 1..norm.len() {
            for (a, b) in norm[i].iter().zip(&norm[j]) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacBayesEstimate {
    /// Adversarial loss at `w`.
    pub base: f64,
    /// Monte-Carlo mean of `rho(w + u) - rho(w)`.
    pub mean_rise: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Element-wise Gaussian perturbation with `sigma_l = alpha_var * ||w_l||`.
pub fn gaussian_perturbation(net: &Network, alpha_var: f64, seed: u64) -> Vec<Tensor> {
    net.weights()
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let sigma = alpha_var * w.frobenius_norm();
            let mut rng = Rng::new(derive_seed(seed, l as u64));
            let data = (0..w.len()).map(|_| sigma * rng.gaussian()).collect();
            Tensor::new(w.shape().to_vec(), data).expect("shape matches")
        })
        .collect()
}

/// Expected rise of the adversarial loss under Gaussian weight noise.
pub fn pac_bayes_flatness(
    net: &Network,
    data: &Dataset,
    alpha_var: f64,
    samples: usize,
    seed: u64,
    attack: &ThreatModel,
) -> Result<PacBayesEstimate> {
    if samples == 0 {
        return Err(Error::Invalid("pac-bayes estimate needs at least one sample".into()));
    }
    if !(alpha_var >= 0.0 && alpha_var.is_finite()) {
        return Err(Error::Invalid(format!("alpha must be >= 0, got {alpha_var}")));
    }
    let attack_seed = derive_seed(seed, 0);
    let base = evaluate(net, data, attack, attack_seed)?.adv_loss;
    let rises = (0..samples)
        .into_par_iter()
        .map(|i| {
            let u = gaussian_perturbation(net, alpha_var, derive_seed(seed, 1 + i as u64));
            Ok(evaluate(&net.perturbed(&u, 1.0)?, data, attack, attack_seed)?.adv_loss - base)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = samples as f64;
    let mean = rises.iter().sum::<f64>() / n;
    let std_error = if samples > 1 {
        let var = rises.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(PacBayesEstimate {
        base,
        mean_rise: mean,
        std_error,
        samples,
    })
}

/// Relative size of an AWP ball that holds a typical draw of
/// [`gaussian_perturbation`]: `||u_l|| ~ alpha_var * ||w_l|| * sqrt(n_l)`.
pub fn matched_gamma(net: &Network, alpha_var: f64) -> f64 {
    let n = net.weights().iter().map(|w| w.len()).max().unwrap_or(1);
    alpha_var * (n as f64).sqrt()
}

/// Worst-case weight perturbation for the adversarial loss on `data`: `A`
/// rounds of crafting `x'` against `w + v` and ascending `v`.
pub fn awp_perturbation(
    net: &Network,
    data: &Dataset,
    config: AwpConfig,
    attack: &ThreatModel,
    seed: u64,
) -> Result<Vec<Tensor>> {
    config.validate()?;
    let labels = data.labels()?;
    let spec = LossSpec::default();
    let mut state = PerturbationState::for_network(net, config);
    for a in 0..config.alternations {
        let target = net.perturbed(&state.v, 1.0)?;
        let adv = if attack.epsilon == 0.0 {
            data.inputs.clone()
        } else {
            pgd(&target, &data.inputs, labels, attack, AttackLoss::CrossEntropy, derive_seed(seed, a as u64))?
        };
        let batch = ObjectiveBatch {
            labeled: LossBatch {
                natural: &data.inputs,
                adversarial: &adv,
                labels,
            },
            unlabeled: None,
        };
        state = compute_awp(net, &spec, batch, &state)?;
    }
    Ok(state.v)
}

/// Adversarial loss of `w + v` (`v = None` means the unperturbed model).
pub fn perturbed_loss(
    net: &Network,
    v: Option<&[Tensor]>,
    data: &Dataset,
    attack: &ThreatModel,
    seed: u64,
) -> Result<f64> {
    let p = match v {
        Some(v) => net.perturbed(v, 1.0)?,
        None => net.clone(),
    };
    Ok(evaluate(&p, data, attack, seed)?.adv_loss)
}

/// One row of a perturbation comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub strategy: &'static str,
    pub gamma: f64,
    pub loss: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Adversarial loss at `w + v` for AWP and RWP (median over `rwp_draws`) at
/// each `gamma`. Both strategies evaluate with the same attack seed.
pub fn perturb_compare(
    net: &Network,
    data: &Dataset,
    gammas: &[f64],
    awp: AwpConfig,
    rwp_draws: usize,
    attack: &ThreatModel,
    seed: u64,
) -> Result<Vec<CompareRow>> {
    if rwp_draws == 0 {
        return Err(Error::Invalid("rwp needs at least one draw".into()));
    }
    let eval_seed = derive_seed(seed, 0);
    let mut rows = Vec::new();
    for (gi, &gamma) in gammas.iter().enumerate() {
        let cfg = AwpConfig { gamma, ..awp };
        let v = awp_perturbation(net, data, cfg, attack, derive_seed(seed, 1))?;
        rows.push(CompareRow {
            strategy: "awp",
            gamma,
            loss: perturbed_loss(net, Some(&v), data, attack, eval_seed)?,
        });
        let draws = (0..rwp_draws)
            .into_par_iter()
            .map(|k| {
                let v = random_weight_perturbation(net, gamma, awp.norm, crate::rng::derive_path(seed, &[2, gi as u64, k as u64]))?;
                perturbed_loss(net, Some(&v), data, attack, eval_seed)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(CompareRow {
            strategy: "rwp",
            gamma,
            loss: median(draws),
        });
    }
    Ok(rows)
}

pub fn profile_1d_csv(p: &Profile1d) -> String {
    let mut out = String::from("alpha,loss\n");
    for (a, g) in p.alphas.iter().zip(&p.losses) {
        let _ = writeln!(out, "{a},{g}");
    }
    out
}

pub fn profile_2d_csv(p: &Profile2d) -> String {
    let mut out = String::from("alpha,beta,rel_loss\n");
    for (a, row) in p.alphas.iter().zip(&p.rel) {
        for (b, r) in p.betas.iter().zip(row) {
            let _ = writeln!(out, "{a},{b},{r}");
        }
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("strategy,gamma,loss\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.strategy, r.gamma, r.loss);
    }
    out
}
