//! Training objectives.
//!
//! The per-example building blocks take logit nodes so that they compose on
//! a single tape with the network forward pass. KL terms are computed from
//! log-softmax outputs directly, so `KL(p || p)` is exactly zero; the only
//! explicit logarithm of a probability (MART's `log(1 - max_{k!=y} p_k)`)
//! goes through [`Tape::log_floor`].

use std::fmt;

use crate::error::{Error, Result};
use crate::network::{LayerVars, Network};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// The supervised adversarial loss families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustLoss {
    /// Cross-entropy on adversarial examples.
    AtCe,
    /// Natural CE plus `beta` times KL(f(x) || f(x')).
    Trades { beta: f64 },
    /// Boosted CE on f(x') plus `lambda`-weighted, confidence-scaled KL.
    Mart { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Robust(RobustLoss),
    /// Labeled loss plus `lambda` times the same loss on pseudo-labeled data.
    Ssl { lambda: f64, inner: RobustLoss },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum WeightPenalty {
    #[default]
    None,
    L1(f64),
    L2(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    pub penalty: WeightPenalty,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::Robust(RobustLoss::AtCe),
            penalty: WeightPenalty::None,
        }
    }
}

impl RobustLoss {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            RobustLoss::AtCe => 0.0,
            RobustLoss::Trades { beta } => beta,
            RobustLoss::Mart { lambda } => lambda,
        };
        if v >= 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("loss weight must be >= 0, got {v}")))
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            LossKind::Robust(r) => r.validate()?,
            LossKind::Ssl { lambda, inner } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::Invalid(format!("ssl lambda must be >= 0, got {lambda}")));
                }
                inner.validate()?;
            }
        }
        match self.penalty {
            WeightPenalty::L1(l) | WeightPenalty::L2(l) if !(l >= 0.0 && l.is_finite()) => {
                Err(Error::Invalid(format!("weight penalty must be >= 0, got {l}")))
            }
            _ => Ok(()),
        }
    }

    /// The loss applied to each (labeled or pseudo-labeled) batch.
    pub fn inner(&self) -> RobustLoss {
        match self.kind {
            LossKind::Robust(r) => r,
            LossKind::Ssl { inner, .. } => inner,
        }
    }
}

impl fmt::Display for RobustLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RobustLoss::AtCe => f.write_str("at"),
            RobustLoss::Trades { beta } => write!(f, "trades(beta={beta})"),
            RobustLoss::Mart { lambda } => write!(f, "mart(lambda={lambda})"),
        }
    }
}

/// Per-example cross-entropy `[N]` from logits `[N, C]`.
pub fn cross_entropy_per_example(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, y)?;
    tape.scale(picked, -1.0)
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(tape: &mut Tape, logits: Var, y: &[usize]) -> Result<Var> {
    let per = cross_entropy_per_example(tape, logits, y)?;
    tape.mean(per)
}

/// Per-example `KL(softmax(p) || softmax(q))` as `[N]`.
pub fn kl_per_example(tape: &mut Tape, p_logits: Var, q_logits: Var) -> Result<Var> {
    let lp = tape.log_softmax(p_logits)?;
    let lq = tape.log_softmax(q_logits)?;
    let p = tape.exp(lp)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    tape.sum_rows(terms)
}

/// Mean over the batch of `CE(f(x), y) + beta * KL(f(x) || f(x'))`.
pub fn trades_from_logits(tape: &mut Tape, natural: Var, adversarial: Var, y: &[usize], beta: f64) -> Result<Var> {
    let ce = cross_entropy_per_example(tape, natural, y)?;
    let kl = kl_per_example(tape, natural, adversarial)?;
    let kl = tape.scale(kl, beta)?;
    let total = tape.add(ce, kl)?;
    tape.mean(total)
}

/// Per-example `-log p_y - log(1 - max_{k != y} p_k)` evaluated on the
/// adversarial output.
pub fn mart_bce_per_example(tape: &mut Tape, adversarial: Var, y: &[usize]) -> Result<Var> {
    let ls = tape.log_softmax(adversarial)?;
    let log_py = tape.pick(ls, y)?;
    let probs = tape.exp(ls)?;
    let runner_up = tape.max_except(probs, y)?;
    let neg = tape.scale(runner_up, -1.0)?;
    let complement = tape.add_scalar(neg, 1.0)?;
    let log_c = tape.log_floor(complement)?;
    let s = tape.add(log_py, log_c)?;
    tape.scale(s, -1.0)
}

/// Mean over the batch of `BCE(f(x'), y) + lambda * KL(f(x) || f(x')) * (1 - f(x)_y)`.
pub fn mart_from_logits(tape: &mut Tape, natural: Var, adversarial: Var, y: &[usize], lambda: f64) -> Result<Var> {
    let bce = mart_bce_per_example(tape, adversarial, y)?;
    let kl = kl_per_example(tape, natural, adversarial)?;
    let ls_nat = tape.log_softmax(natural)?;
    let p_nat = tape.exp(ls_nat)?;
    let p_true = tape.pick(p_nat, y)?;
    let neg = tape.scale(p_true, -1.0)?;
    let weight = tape.add_scalar(neg, 1.0)?;
    let weighted = tape.mul(kl, weight)?;
    let weighted = tape.scale(weighted, lambda)?;
    let total = tape.add(bce, weighted)?;
    tape.mean(total)
}

/// `labeled + lambda * unlabeled`.
pub fn ssl_loss(labeled: f64, unlabeled: f64, lambda: f64) -> f64 {
    labeled + lambda * unlabeled
}

/// Penalty node over the perturbable weights: `lambda * sum |w|` or
/// `lambda * 0.5 * sum w^2`. Returns `None` when there is nothing to add.
pub fn weight_penalty(tape: &mut Tape, vars: &[LayerVars], penalty: WeightPenalty) -> Result<Option<Var>> {
    let (lambda, l1) = match penalty {
        WeightPenalty::None => return Ok(None),
        WeightPenalty::L1(l) => (l, true),
        WeightPenalty::L2(l) => (l * 0.5, false),
    };
    let mut acc: Option<Var> = None;
    for lv in vars {
        let term = if l1 {
            tape.abs(lv.weight)?
        } else {
            tape.mul(lv.weight, lv.weight)?
        };
        let s = tape.sum(term)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    match acc {
        Some(a) => Ok(Some(tape.scale(a, lambda)?)),
        None => Ok(None),
    }
}

/// Untaped weight penalty value.
pub fn weight_penalty_value(net: &Network, penalty: WeightPenalty) -> f64 {
    match penalty {
        WeightPenalty::None => 0.0,
        WeightPenalty::L1(l) => l * net.weights().iter().map(|w| w.l1_norm()).sum::<f64>(),
        WeightPenalty::L2(l) => 0.5 * l * net.weights().iter().map(|w| w.dot(w)).sum::<f64>(),
    }
}

/// Inputs for one evaluation of a robust loss.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub natural: &'a Tensor,
    pub adversarial: &'a Tensor,
    pub labels: &'a [usize],
}

/// Records `loss` for `batch` on `tape` using network parameters `vars`.
pub fn robust_objective(
    tape: &mut Tape,
    net: &Network,
    vars: &[LayerVars],
    loss: RobustLoss,
    batch: LossBatch<'_>,
) -> Result<Var> {
    check_labels(batch.labels, net.classes())?;
    let xa = tape.constant(batch.adversarial.clone());
    let adv = net.forward(tape, xa, vars)?;
    match loss {
        RobustLoss::AtCe => cross_entropy(tape, adv, batch.labels),
        RobustLoss::Trades { beta } => {
            let xn = tape.constant(batch.natural.clone());
            let nat = net.forward(tape, xn, vars)?;
            trades_from_logits(tape, nat, adv, batch.labels, beta)
        }
        RobustLoss::Mart { lambda } => {
            let xn = tape.constant(batch.natural.clone());
            let nat = net.forward(tape, xn, vars)?;
            mart_from_logits(tape, nat, adv, batch.labels, lambda)
        }
    }
}

/// A training batch: labeled part plus, for SSL, a pseudo-labeled part.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveBatch<'a> {
    pub labeled: LossBatch<'a>,
    pub unlabeled: Option<LossBatch<'a>>,
}

/// The full scalar objective minimized by the trainer and maximized by the
/// weight adversary: inner loss on the labeled batch, plus `lambda` times
/// the inner loss on the pseudo-labeled batch (SSL), plus the weight penalty.
pub fn objective(
    tape: &mut Tape,
    net: &Network,
    vars: &[LayerVars],
    spec: &LossSpec,
    batch: ObjectiveBatch<'_>,
) -> Result<Var> {
    let inner = spec.inner();
    let mut total = robust_objective(tape, net, vars, inner, batch.labeled)?;
    if let (LossKind::Ssl { lambda, .. }, Some(unlabeled)) = (spec.kind, batch.unlabeled) {
        let u = robust_objective(tape, net, vars, inner, unlabeled)?;
        let u = tape.scale(u, lambda)?;
        total = tape.add(total, u)?;
    }
    if let Some(p) = weight_penalty(tape, vars, spec.penalty)? {
        total = tape.add(total, p)?;
    }
    Ok(total)
}

/// Mean adversarial cross-entropy `at_loss(net, x', y)`.
pub fn at_loss(net: &Network, adversarial: &Tensor, labels: &[usize]) -> Result<f64> {
    check_labels(labels, net.classes())?;
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, false);
    let x = tape.constant(adversarial.clone());
    let logits = net.forward(&mut tape, x, &vars)?;
    let l = cross_entropy(&mut tape, logits, labels)?;
    Ok(tape.value(l).data()[0])
}

pub fn trades_loss(net: &Network, natural: &Tensor, adversarial: &Tensor, labels: &[usize], beta: f64) -> Result<f64> {
    eval_robust(net, RobustLoss::Trades { beta }, natural, adversarial, labels)
}

pub fn mart_loss(net: &Network, natural: &Tensor, adversarial: &Tensor, labels: &[usize], lambda: f64) -> Result<f64> {
    eval_robust(net, RobustLoss::Mart { lambda }, natural, adversarial, labels)
}

fn eval_robust(net: &Network, loss: RobustLoss, natural: &Tensor, adversarial: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, false);
    let v = robust_objective(
        &mut tape,
        net,
        &vars,
        loss,
        LossBatch {
            natural,
            adversarial,
            labels,
        },
    )?;
    Ok(tape.value(v).data()[0])
}

pub(crate) fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(Error::Label { label, classes }),
        None => Ok(()),
    }
}
