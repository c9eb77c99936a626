//! The outer minimization: SGD with momentum over perturbed weights, robustness
//! evaluation, best-epoch tracking, checkpoints.

mod checkpoint;
mod schedule;

use std::fmt::Write as _;

use rayon::prelude::*;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, CheckpointRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use schedule::Schedule;

use crate::attacks::{pgd, AttackLoss, ThreatModel};
use crate::awp::{compute_awp, random_weight_perturbation, AwpConfig, PerturbationState};
use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy_per_example, objective, LossBatch, LossKind, LossSpec, ObjectiveBatch, RobustLoss};
use crate::network::{Network, NormKind};
use crate::rng::{derive_path, derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Examples per evaluation chunk. Each chunk gets its own attack seed, so
/// results do not depend on how chunks are scheduled.
pub const EVAL_CHUNK: usize = 64;

const TRAIN_STREAM: u64 = 0x7EA1;
const EVAL_STREAM: u64 = 0xE7A1;
const SPLIT_STREAM: u64 = 0x5917;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    None,
    Awp(AwpConfig),
    /// Random perturbation of relative size `gamma`, redrawn every step.
    Rwp { gamma: f64, norm: NormKind },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslConfig {
    /// Share of the training set that keeps its labels.
    pub labeled_fraction: f64,
    /// Epochs of clean training for the pseudo-labelling model.
    pub natural_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Training attack.
    pub threat: ThreatModel,
    pub eval_attack: ThreatModel,
    pub loss: LossSpec,
    pub perturbation: Perturbation,
    pub seed: u64,
    /// Evaluate on at most this many train/test examples per epoch.
    pub eval_subset: Option<usize>,
    /// Evaluate every `eval_every` epochs; the final epoch is always evaluated.
    pub eval_every: usize,
    pub ssl: Option<SslConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Piecewise {
                initial: 0.1,
                milestones: vec![15, 23],
                factor: 0.1,
            },
            threat: ThreatModel::linf(8.0 / 255.0, 2.0 / 255.0, 10),
            eval_attack: ThreatModel::linf(8.0 / 255.0, 2.0 / 255.0, 20),
            loss: LossSpec::default(),
            perturbation: Perturbation::None,
            seed: 0,
            eval_subset: None,
            eval_every: 1,
            ssl: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Invalid("eval_every must be >= 1".into()));
        }
        for (name, v) in [("momentum", self.momentum), ("weight decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        self.schedule.validate(self.epochs)?;
        self.threat.validate()?;
        self.eval_attack.validate()?;
        self.loss.validate()?;
        match self.perturbation {
            Perturbation::Awp(c) => c.validate()?,
            Perturbation::Rwp { gamma, .. } if !(gamma >= 0.0 && gamma.is_finite()) => {
                return Err(Error::Invalid(format!("gamma must be >= 0, got {gamma}")));
            }
            _ => {}
        }
        match (self.loss.kind, self.ssl) {
            (LossKind::Ssl { .. }, None) => Err(Error::Invalid("ssl loss needs an ssl section".into())),
            (_, Some(s)) if !(s.labeled_fraction > 0.0 && s.labeled_fraction <= 1.0) => Err(Error::Invalid(format!(
                "labeled fraction must be in (0, 1], got {}",
                s.labeled_fraction
            ))),
            _ => Ok(()),
        }
    }

    /// What the training attack ascends for the configured loss.
    pub fn attack_loss(&self) -> AttackLoss {
        match self.loss.inner() {
            RobustLoss::Trades { .. } => AttackLoss::TradesKl,
            RobustLoss::AtCe | RobustLoss::Mart { .. } => AttackLoss::CrossEntropy,
        }
    }
}

/// Mutable optimizer state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// One buffer per trainable tensor, in `named_params` order.
    pub momentum: Vec<Tensor>,
    /// Weight perturbation, when AWP is on.
    pub awp: Option<PerturbationState>,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        TrainState {
            momentum: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            awp: match cfg.perturbation {
                Perturbation::Awp(c) => Some(PerturbationState::for_network(net, c)),
                _ => None,
            },
            rng: Rng::new(derive_seed(cfg.seed, TRAIN_STREAM)),
        }
    }
}

/// One minibatch. `unlabeled` carries pseudo-labels for SSL.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
    pub unlabeled: Option<(&'a Tensor, &'a [usize])>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// Objective at `w + v` on the final adversarial batch.
    pub loss: f64,
    pub examples: usize,
}

fn attack(net: &Network, x: &Tensor, y: &[usize], tm: &ThreatModel, loss: AttackLoss, seed: u64) -> Result<Tensor> {
    if tm.epsilon == 0.0 {
        Ok(x.clone())
    } else {
        pgd(net, x, y, tm, loss, seed)
    }
}

fn objective_batch<'a>(batch: &StepBatch<'a>, xl: &'a Tensor, xu: Option<&'a Tensor>) -> ObjectiveBatch<'a> {
    ObjectiveBatch {
        labeled: LossBatch {
            natural: batch.inputs,
            adversarial: xl,
            labels: batch.labels,
        },
        unlabeled: match (batch.unlabeled, xu) {
            (Some((x, y)), Some(xa)) => Some(LossBatch {
                natural: x,
                adversarial: xa,
                labels: y,
            }),
            _ => None,
        },
    }
}

/// One weight update: craft `x'` and `v` (alternating `A` times for AWP),
/// take the gradient at `w + v`, then commit `w <- (w + v) - lr * buf - v`.
pub fn train_step(
    net: &mut Network,
    state: &mut TrainState,
    batch: StepBatch<'_>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepMetrics> {
    if batch.labels.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let attack_seed = state.rng.next_u64();
    let attack_loss = cfg.attack_loss();

    let craft = |target: &Network, a: u64| -> Result<(Tensor, Option<Tensor>)> {
        let xl = attack(target, batch.inputs, batch.labels, &cfg.threat, attack_loss, derive_seed(attack_seed, 2 * a))?;
        let xu = match batch.unlabeled {
            Some((x, y)) => Some(attack(target, x, y, &cfg.threat, attack_loss, derive_seed(attack_seed, 2 * a + 1))?),
            None => None,
        };
        Ok((xl, xu))
    };
    // v, and the adversarial batch crafted against w + v.
    let (v, adv): (Option<Vec<Tensor>>, (Tensor, Option<Tensor>)) = match cfg.perturbation {
        Perturbation::None => (None, craft(net, 0)?),
        Perturbation::Rwp { gamma, norm } => {
            let v = random_weight_perturbation(net, gamma, norm, derive_seed(attack_seed, u64::MAX))?;
            let adv = craft(&net.perturbed(&v, 1.0)?, 0)?;
            (Some(v), adv)
        }
        Perturbation::Awp(awp_cfg) => {
            let mut pstate = state
                .awp
                .take()
                .unwrap_or_else(|| PerturbationState::for_network(net, awp_cfg));
            if awp_cfg.carry_v {
                pstate.project(&net.weights())?;
            } else {
                pstate.reset();
            }
            let mut adv = None;
            for a in 0..awp_cfg.alternations {
                let target = net.perturbed(&pstate.v, 1.0)?;
                let (xl, xu) = craft(&target, a as u64)?;
                pstate = compute_awp(net, &cfg.loss, objective_batch(&batch, &xl, xu.as_ref()), &pstate)?;
                adv = Some((xl, xu));
            }
            let v = pstate.v.clone();
            state.awp = Some(pstate);
            (Some(v), adv.expect("at least one alternation"))
        }
    };

    let center = match &v {
        Some(v) => net.perturbed(v, 1.0)?,
        None => net.clone(),
    };
    let mut tape = Tape::new();
    let vars = center.register(&mut tape, true);
    let root = objective(&mut tape, &center, &vars, &cfg.loss, objective_batch(&batch, &adv.0, adv.1.as_ref()))?;
    let loss = tape.value(root).data()[0];
    if !loss.is_finite() {
        return Err(Error::non_finite("training loss"));
    }
    let mut grads = tape.backward(root)?;
    let param_vars: Vec<_> = vars
        .iter()
        .flat_map(|lv| std::iter::once(lv.weight).chain(lv.bias))
        .collect();

    let weight_index = net.param_weight_index();
    let centers = center.params();
    let mut slots = net.params_mut();
    for (i, slot) in slots.iter_mut().enumerate() {
        let p = &centers[i];
        let mut g = grads
            .take(param_vars[i])
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        if cfg.weight_decay != 0.0 {
            g.axpy(cfg.weight_decay, p)?;
        }
        let buf = &mut state.momentum[i];
        for (b, gi) in buf.data_mut().iter_mut().zip(g.data()) {
            *b = cfg.momentum * *b + gi;
        }
        let mut next = p.clone();
        next.axpy(-lr, buf)?;
        if let (Some(v), Some(l)) = (&v, weight_index[i]) {
            next = next.sub(&v[l])?;
        }
        next.check_finite("updated weights")?;
        **slot = next;
    }
    Ok(StepMetrics {
        loss,
        examples: batch.labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Percent correct on both the clean and the attacked input.
    pub robust: f64,
    /// Percent correct on clean inputs.
    pub natural: f64,
    /// Mean cross-entropy on the attacked inputs.
    pub adv_loss: f64,
}

struct ChunkEval {
    natural: usize,
    robust: usize,
    loss_sum: f64,
}

fn eval_chunk(net: &Network, x: &Tensor, y: &[usize], attack_tm: &ThreatModel, seed: u64) -> Result<ChunkEval> {
    let adv = attack(net, x, y, attack_tm, AttackLoss::CrossEntropy, seed)?;
    let clean = net.logits(x)?;
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, false);
    let xa = tape.constant(adv);
    let logits = net.forward(&mut tape, xa, &vars)?;
    let per = cross_entropy_per_example(&mut tape, logits, y)?;
    let adv_logits = tape.value(logits);
    let mut out = ChunkEval {
        natural: 0,
        robust: 0,
        loss_sum: tape.value(per).data().iter().sum(),
    };
    for (i, &label) in y.iter().enumerate() {
        let nat_ok = clean.argmax_row(i) == label;
        out.natural += nat_ok as usize;
        out.robust += (nat_ok && adv_logits.argmax_row(i) == label) as usize;
    }
    Ok(out)
}

/// Robust and natural accuracy of `net` on `ds` under `attack_tm`. Chunk `k`
/// is attacked with seed `derive_seed(seed, k)`; chunks may run in parallel
/// and are reduced in order.
pub fn evaluate(net: &Network, ds: &Dataset, attack_tm: &ThreatModel, seed: u64) -> Result<EvalResult> {
    let labels = ds.labels()?;
    if ds.is_empty() {
        return Err(Error::Invalid("cannot evaluate on an empty dataset".into()));
    }
    let starts: Vec<usize> = (0..ds.len()).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Result<ChunkEval>> = starts
        .par_iter()
        .enumerate()
        .map(|(k, &s)| {
            let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(ds.len())).collect();
            let x = ds.inputs.select_rows(&idx);
            eval_chunk(net, &x, &labels[s..s + idx.len()], attack_tm, derive_seed(seed, k as u64))
        })
        .collect();
    let (mut natural, mut robust, mut loss_sum) = (0usize, 0usize, 0.0);
    for p in parts {
        let p = p?;
        natural += p.natural;
        robust += p.robust;
        loss_sum += p.loss_sum;
    }
    let n = ds.len() as f64;
    Ok(EvalResult {
        robust: 100.0 * robust as f64 / n,
        natural: 100.0 * natural as f64 / n,
        adv_loss: loss_sum / n,
    })
}

/// Argmax class per example; ties go to the lowest index.
pub fn pseudo_label(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let logits = net.logits(inputs)?;
    Ok((0..logits.rows()).map(|i| logits.argmax_row(i)).collect())
}

/// Highest test robustness seen so far; ties keep the earlier epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BestTracker {
    best: Option<(usize, f64)>,
}

impl BestTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true when `epoch` becomes the new best.
    pub fn observe(&mut self, epoch: usize, test_robustness: f64) -> bool {
        match self.best {
            Some((_, r)) if test_robustness <= r => false,
            _ => {
                self.best = Some((epoch, test_robustness));
                true
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_robustness(&self) -> Option<f64> {
        self.best.map(|(_, r)| r)
    }
}

/// Best epoch (1-based) of a robustness series.
pub fn best_epoch(test_robustness: &[f64]) -> Option<usize> {
    let mut t = BestTracker::new();
    for (i, &r) in test_robustness.iter().enumerate() {
        t.observe(i + 1, r);
    }
    t.best_epoch()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_rob: f64,
    pub test_rob: f64,
    pub nat_acc: f64,
    /// `train_rob - test_rob`.
    pub gap: f64,
    pub adv_loss: f64,
}

impl EpochMetrics {
    pub fn new(epoch: usize, lr: f64, train: EvalResult, test: EvalResult) -> Self {
        EpochMetrics {
            epoch,
            lr,
            train_rob: train.robust,
            test_rob: test.robust,
            nat_acc: test.natural,
            gap: train.robust - test.robust,
            adv_loss: test.adv_loss,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,lr,train_rob,test_rob,nat_acc,gap,adv_loss";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
}

impl RunMetrics {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                m.epoch, m.lr, m.train_rob, m.test_rob, m.nat_acc, m.gap, m.adv_loss
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RunMetrics> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != METRICS_HEADER {
            return Err(Error::Invalid(format!("unexpected metrics header {header:?}")));
        }
        let mut epochs = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let num = |i: usize| -> Result<f64> {
                f.get(i)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Invalid(format!("metrics row {}: bad field {}", n + 2, i + 1)))
            };
            if f.len() != 7 {
                return Err(Error::Invalid(format!("metrics row {}: expected 7 fields", n + 2)));
            }
            epochs.push(EpochMetrics {
                epoch: num(0)? as usize,
                lr: num(1)?,
                train_rob: num(2)?,
                test_rob: num(3)?,
                nat_acc: num(4)?,
                gap: num(5)?,
                adv_loss: num(6)?,
            });
        }
        let mut t = BestTracker::new();
        for m in &epochs {
            t.observe(m.epoch, m.test_rob);
        }
        Ok(RunMetrics {
            epochs,
            best_epoch: t.best_epoch(),
        })
    }
}

/// Result of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Network,
    pub best: Network,
    pub metrics: RunMetrics,
    pub rng_state: [u64; 4],
}

/// Labeled and pseudo-labeled training data for SSL runs.
#[derive(Debug, Clone)]
pub struct SslData {
    pub labeled: Dataset,
    /// Inputs with labels from the natural model.
    pub pseudo: Option<Dataset>,
}

/// Split `train`, fit a clean model on the labeled part and pseudo-label
/// the rest.
pub fn prepare_ssl(template: &Network, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<SslData> {
    let ssl = cfg
        .ssl
        .ok_or_else(|| Error::Invalid("ssl configuration missing".into()))?;
    let (labeled, unlabeled) = train.split_labeled(ssl.labeled_fraction, derive_seed(cfg.seed, SPLIT_STREAM))?;
    if unlabeled.labels.is_none() && unlabeled.inputs.shape().len() < 2 {
        return Ok(SslData { labeled, pseudo: None });
    }
    let natural_cfg = TrainConfig {
        epochs: ssl.natural_epochs.max(1),
        threat: ThreatModel { epsilon: 0.0, ..cfg.threat },
        eval_attack: ThreatModel { epsilon: 0.0, ..cfg.eval_attack },
        loss: LossSpec::default(),
        perturbation: Perturbation::None,
        schedule: Schedule::Constant {
            lr: cfg.schedule.lr_at(1, cfg.epochs).max(1e-3),
        },
        ssl: None,
        eval_every: ssl.natural_epochs.max(1),
        ..cfg.clone()
    };
    let natural = Trainer::new(natural_cfg)?.fit(template.clone(), &labeled, test, None)?.last;
    let labels = pseudo_label(&natural, &unlabeled.inputs)?;
    let pseudo = Dataset::new(unlabeled.inputs, Some(labels), unlabeled.classes, format!("{}/pseudo", train.tag))?;
    Ok(SslData {
        labeled,
        pseudo: Some(pseudo),
    })
}

pub struct Trainer {
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg })
    }

    fn eval_sets(&self, train: &Dataset, test: &Dataset) -> (Dataset, Dataset) {
        match self.cfg.eval_subset {
            Some(n) => (
                train.subset(n, derive_path(self.cfg.seed, &[EVAL_STREAM, 0])),
                test.subset(n, derive_path(self.cfg.seed, &[EVAL_STREAM, 1])),
            ),
            None => (train.clone(), test.clone()),
        }
    }

    /// Train `net` for `cfg.epochs` epochs. With an SSL loss, `pseudo` holds
    /// the pseudo-labeled pool that is batched alongside `train`.
    pub fn fit(&self, mut net: Network, train: &Dataset, test: &Dataset, pseudo: Option<&Dataset>) -> Result<TrainOutcome> {
        let cfg = &self.cfg;
        let labels = train.labels()?;
        let mut state = TrainState::new(&net, cfg);
        let (train_eval, test_eval) = self.eval_sets(train, test);
        let pseudo = match cfg.loss.kind {
            LossKind::Ssl { .. } => pseudo,
            LossKind::Robust(_) => None,
        };
        let mut metrics = RunMetrics::default();
        let mut tracker = BestTracker::new();
        let mut best = net.clone();

        for epoch in 1..=cfg.epochs {
            let lr = cfg.schedule.lr_at(epoch, cfg.epochs);
            let order = batches(train.len(), cfg.batch_size, cfg.seed, epoch as u64)?;
            let u_order = match pseudo {
                Some(p) => batches(p.len(), cfg.batch_size, derive_seed(cfg.seed, 1), epoch as u64)?,
                None => Vec::new(),
            };
            for (step, idx) in order.iter().enumerate() {
                let x = train.inputs.select_rows(idx);
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let u = match pseudo {
                    Some(p) if !u_order.is_empty() => {
                        let uidx = &u_order[step % u_order.len()];
                        let pl = p.labels()?;
                        Some((p.inputs.select_rows(uidx), uidx.iter().map(|&i| pl[i]).collect::<Vec<_>>()))
                    }
                    _ => None,
                };
                let batch = StepBatch {
                    inputs: &x,
                    labels: &y,
                    unlabeled: u.as_ref().map(|(x, y)| (x, y.as_slice())),
                };
                train_step(&mut net, &mut state, batch, cfg, lr).map_err(|e| match e {
                    Error::NonFinite { context } => {
                        Error::non_finite(format!("epoch {epoch}, step {}: {context}", step + 1))
                    }
                    other => other,
                })?;
            }

            if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
                let seed = derive_path(cfg.seed, &[EVAL_STREAM, 2, epoch as u64]);
                let tr = evaluate(&net, &train_eval, &cfg.eval_attack, seed)?;
                let te = evaluate(&net, &test_eval, &cfg.eval_attack, derive_seed(seed, 1))?;
                let m = EpochMetrics::new(epoch, lr, tr, te);
                if tracker.observe(epoch, m.test_rob) {
                    best = net.clone();
                }
                metrics.epochs.push(m);
            }
        }
        metrics.best_epoch = tracker.best_epoch();
        Ok(TrainOutcome {
            last: net,
            best,
            metrics,
            rng_state: state.rng.state(),
        })
    }
}
