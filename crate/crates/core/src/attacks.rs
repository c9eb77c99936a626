//! Input-space adversaries.
//!
//! Random starts are drawn per example from a stream derived from
//! `(seed, example index)`, so an attack on a batch gives the same result as
//! the same attack on any split of that batch. Every step is followed by the
//! ε-ball projection and a clamp to the `[0, 1]` input domain.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{check_labels, cross_entropy_per_example, kl_per_example};
use crate::network::Network;
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Relative slack accepted by the L2 feasibility test; keeps projection
/// idempotent under rounding.
const L2_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThreatNorm {
    Linf,
    L2,
}

impl FromStr for ThreatNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(ThreatNorm::Linf),
            "l2" => Ok(ThreatNorm::L2),
            other => Err(Error::Invalid(format!("unknown threat norm {other:?}"))),
        }
    }
}

impl fmt::Display for ThreatNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ThreatNorm::Linf => "linf",
            ThreatNorm::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreatModel {
    pub norm: ThreatNorm,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
}

impl ThreatModel {
    pub fn linf(epsilon: f64, step_size: f64, steps: usize) -> Self {
        ThreatModel {
            norm: ThreatNorm::Linf,
            epsilon,
            step_size,
            steps,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Invalid(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Invalid(format!("attack step size must be > 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("attack needs at least one step".into()));
        }
        Ok(())
    }
}

/// What the attack ascends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackLoss {
    /// Cross-entropy against the true labels.
    CrossEntropy,
    /// KL(f(x) || f(x')) with the natural prediction held fixed.
    TradesKl,
}

/// Per-example gradient of the attack objective with respect to `x_adv`,
/// plus the summed objective value.
pub fn input_gradient(
    net: &Network,
    natural: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    loss: AttackLoss,
) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, false);
    let xa = tape.leaf(x_adv.clone(), true);
    let adv = net.forward(&mut tape, xa, &vars)?;
    let per = match loss {
        AttackLoss::CrossEntropy => cross_entropy_per_example(&mut tape, adv, labels)?,
        AttackLoss::TradesKl => {
            let xn = tape.constant(natural.clone());
            let nat = net.forward(&mut tape, xn, &vars)?;
            let fixed = tape.constant(tape.value(nat).clone());
            kl_per_example(&mut tape, fixed, adv)?
        }
    };
    let total = tape.sum(per)?;
    let value = tape.value(total).data()[0];
    let mut grads = tape.backward(total)?;
    let g = grads.take(xa).unwrap_or_else(|| Tensor::zeros(x_adv.shape()));
    g.check_finite("attack gradient")?;
    Ok((g, value))
}

/// Project `x_adv` onto the ε-ball around `x`.
pub fn project_ball(x_adv: &Tensor, x: &Tensor, tm: &ThreatModel) -> Result<Tensor> {
    if x_adv.shape() != x.shape() {
        return Err(Error::shape("project_ball", x_adv.shape(), x.shape()));
    }
    let eps = tm.epsilon;
    let mut out = x_adv.clone();
    match tm.norm {
        ThreatNorm::Linf => {
            for (o, &c) in out.data_mut().iter_mut().zip(x.data()) {
                *o = o.max(c - eps).min(c + eps);
            }
        }
        ThreatNorm::L2 => {
            for i in 0..x.rows() {
                let centre = x.row(i);
                let row = out.row_mut(i);
                let norm = row
                    .iter()
                    .zip(centre)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if norm > eps * (1.0 + L2_SLACK) {
                    let s = if norm > 0.0 { eps / norm } else { 0.0 };
                    for (a, &b) in row.iter_mut().zip(centre) {
                        *a = b + (*a - b) * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn clamp_unit(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step of size `step` from `x_adv` followed by projection and clamp.
fn ascent_step(x_adv: &Tensor, x: &Tensor, grad: &Tensor, step: f64, tm: &ThreatModel) -> Result<Tensor> {
    let mut next = x_adv.clone();
    match tm.norm {
        ThreatNorm::Linf => {
            for (a, &g) in next.data_mut().iter_mut().zip(grad.data()) {
                *a += step * sign(g);
            }
        }
        ThreatNorm::L2 => {
            for i in 0..next.rows() {
                let g = grad.row(i);
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for (a, &gv) in next.row_mut(i).iter_mut().zip(g) {
                        *a += step * gv / norm;
                    }
                }
            }
        }
    }
    let mut out = project_ball(&next, x, tm)?;
    clamp_unit(&mut out);
    Ok(out)
}

/// Fast gradient sign method: one signed step of size ε.
pub fn fgsm(net: &Network, x: &Tensor, labels: &[usize], tm: &ThreatModel, loss: AttackLoss) -> Result<Tensor> {
    if tm.norm != ThreatNorm::Linf {
        return Err(Error::Invalid("fgsm is defined for the linf threat model only".into()));
    }
    if !(tm.epsilon >= 0.0 && tm.epsilon.is_finite()) {
        return Err(Error::Invalid(format!("epsilon must be >= 0, got {}", tm.epsilon)));
    }
    check_labels(labels, net.classes())?;
    let (g, _) = input_gradient(net, x, x, labels, loss)?;
    ascent_step(x, x, &g, tm.epsilon, tm)
}

/// Uniform random start `clamp(x + ε·δ)`, `δ ~ U(-1, 1)` per coordinate.
pub fn random_start(x: &Tensor, epsilon: f64, seed: u64) -> Tensor {
    let mut out = x.clone();
    for i in 0..x.rows() {
        let mut rng = Rng::new(derive_seed(seed, i as u64));
        for v in out.row_mut(i) {
            *v += epsilon * rng.uniform_range(-1.0, 1.0);
        }
    }
    clamp_unit(&mut out);
    out
}

/// Projected gradient ascent within the threat model.
pub fn pgd(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
    tm: &ThreatModel,
    loss: AttackLoss,
    seed: u64,
) -> Result<Tensor> {
    tm.validate()?;
    check_labels(labels, net.classes())?;
    let mut x_adv = if tm.random_start && tm.epsilon > 0.0 {
        random_start(x, tm.epsilon, seed)
    } else {
        x.clone()
    };
    for k in 0..tm.steps {
        let (g, value) = input_gradient(net, x, &x_adv, labels, loss).map_err(|e| match e {
            Error::NonFinite { context } => Error::non_finite(format!("pgd step {}: {context}", k + 1)),
            other => other,
        })?;
        if !value.is_finite() {
            return Err(Error::non_finite(format!("pgd step {}: loss", k + 1)));
        }
        x_adv = ascent_step(&x_adv, x, &g, tm.step_size, tm)?;
    }
    Ok(x_adv)
}
