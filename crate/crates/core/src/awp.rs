//! Adversarial weight perturbation.
//!
//! The perturbation `v` holds one tensor per perturbable weight and is kept
//! inside the layer-wise relative ball `||v_l|| <= gamma * ||w_l||`. Each
//! ascent step moves every layer along its own normalized gradient, scaled by
//! that layer's weight norm, then projects back onto the ball.

use crate::error::{Error, Result};
use crate::losses::{objective, LossSpec, ObjectiveBatch};
use crate::network::{Network, NormKind};
use crate::rng::{derive_seed, Rng};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Relative tolerance of the feasibility check in [`PerturbationState::project`].
pub const PROJECTION_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AwpConfig {
    /// Relative size bound.
    pub gamma: f64,
    /// Ascent step size; `None` means `gamma / (alternations * steps)`.
    pub step_size: Option<f64>,
    /// Ascent steps per alternation (K2).
    pub steps: usize,
    /// Input/weight alternations per weight update (A).
    pub alternations: usize,
    pub norm: NormKind,
    /// Keep `v` across minibatches instead of restarting from zero.
    pub carry_v: bool,
}

impl AwpConfig {
    pub fn new(gamma: f64) -> Self {
        AwpConfig {
            gamma,
            step_size: None,
            steps: 1,
            alternations: 1,
            norm: NormKind::Frobenius,
            carry_v: false,
        }
    }

    pub fn eta(&self) -> f64 {
        self.step_size
            .unwrap_or(self.gamma / (self.alternations * self.steps) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.steps == 0 || self.alternations == 0 {
            return Err(Error::Invalid("awp steps and alternations must be >= 1".into()));
        }
        match self.step_size {
            Some(s) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Invalid(format!("awp step size must be > 0, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationState {
    /// One tensor per perturbable weight, shape-congruent with it.
    pub v: Vec<Tensor>,
    pub config: AwpConfig,
}

impl PerturbationState {
    pub fn zeros(weights: &[&Tensor], config: AwpConfig) -> Self {
        PerturbationState {
            v: weights.iter().map(|w| Tensor::zeros(w.shape())).collect(),
            config,
        }
    }

    pub fn for_network(net: &Network, config: AwpConfig) -> Self {
        Self::zeros(&net.weights(), config)
    }

    pub fn reset(&mut self) {
        for t in &mut self.v {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn check_congruent(&self, weights: &[&Tensor]) -> Result<()> {
        if self.v.len() != weights.len() {
            return Err(Error::Invalid(format!(
                "perturbation has {} layers, weights have {}",
                self.v.len(),
                weights.len()
            )));
        }
        for (v, w) in self.v.iter().zip(weights) {
            if v.shape() != w.shape() {
                return Err(Error::shape("perturbation", v.shape(), w.shape()));
            }
        }
        Ok(())
    }

    /// Layer-wise projection onto `||v_l|| <= gamma * ||w_l||`. A layer whose
    /// weight norm is zero has its perturbation zeroed. Layers within a
    /// relative `1e-12` of the bound are left alone, which makes the
    /// projection exactly idempotent.
    pub fn project(&mut self, weights: &[&Tensor]) -> Result<()> {
        self.check_congruent(weights)?;
        let (gamma, norm) = (self.config.gamma, self.config.norm);
        for (v, w) in self.v.iter_mut().zip(weights) {
            let vn = norm.of(v);
            let bound = gamma * norm.of(w);
            if vn > bound * (1.0 + PROJECTION_SLACK) {
                if bound > 0.0 {
                    let s = bound / vn;
                    v.data_mut().iter_mut().for_each(|x| *x *= s);
                } else {
                    v.data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Ok(())
    }

    /// `K2` ascent steps driven by `grad_at`, which maps the current `v` to
    /// the objective value and its gradient with respect to each perturbed weight.
    pub fn ascend<F>(&mut self, weights: &[&Tensor], mut grad_at: F) -> Result<()>
    where
        F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
    {
        self.config.validate()?;
        self.check_congruent(weights)?;
        let eta = self.config.eta();
        let norm = self.config.norm;
        for step in 0..self.config.steps {
            let (value, grads) = grad_at(&self.v)?;
            if !value.is_finite() {
                return Err(Error::non_finite(format!("awp step {}: loss", step + 1)));
            }
            for ((v, g), w) in self.v.iter_mut().zip(&grads).zip(weights) {
                let gn = norm.of(g);
                if gn == 0.0 {
                    continue;
                }
                v.axpy(eta * norm.of(w) / gn, g)?;
            }
            self.project(weights)?;
        }
        Ok(())
    }
}

/// `project_gamma(v, net)`.
pub fn project_gamma(state: &PerturbationState, net: &Network) -> Result<PerturbationState> {
    let mut out = state.clone();
    out.project(&net.weights())?;
    Ok(out)
}

/// Gradient of the objective with respect to every perturbable weight of `net`.
pub fn weight_gradient(net: &Network, spec: &LossSpec, batch: ObjectiveBatch<'_>) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = net.register(&mut tape, true);
    let root = objective(&mut tape, net, &vars, spec, batch)?;
    let value = tape.value(root).data()[0];
    let mut grads = tape.backward(root)?;
    let g = vars
        .iter()
        .map(|lv| grads.take(lv.weight).unwrap_or_else(|| Tensor::zeros(tape.shape(lv.weight))))
        .collect();
    Ok((value, g))
}

/// Runs the weight adversary on `net` for a batch whose adversarial inputs
/// were crafted against `w + v` (current `v` in `state`).
pub fn compute_awp(
    net: &Network,
    spec: &LossSpec,
    batch: ObjectiveBatch<'_>,
    state: &PerturbationState,
) -> Result<PerturbationState> {
    let mut out = state.clone();
    let weights = net.weights();
    out.ascend(&weights, |v| {
        let perturbed = net.perturbed(v, 1.0)?;
        weight_gradient(&perturbed, spec, batch)
    })?;
    Ok(out)
}

/// Random perturbation with `||v_l|| = gamma * ||w_l||` exactly per layer.
pub fn random_weight_perturbation(net: &Network, gamma: f64, norm: NormKind, seed: u64) -> Result<Vec<Tensor>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Invalid(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(net
        .weights()
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let mut rng = Rng::new(derive_seed(seed, l as u64));
            let data = (0..w.len()).map(|_| rng.gaussian()).collect();
            let mut d = Tensor::new(w.shape().to_vec(), data).expect("shape matches");
            let dn = norm.of(&d);
            let target = gamma * norm.of(w);
            let s = if dn > 0.0 { target / dn } else { 0.0 };
            d.data_mut().iter_mut().for_each(|x| *x *= s);
            d
        })
        .collect())
}

/// Runs `f` against the network with weights `w + v`; the caller's network
/// is never modified.
pub fn with_perturbed_weights<R>(net: &Network, v: &[Tensor], f: impl FnOnce(&Network) -> R) -> Result<R> {
    let perturbed = net.perturbed(v, 1.0)?;
    Ok(f(&perturbed))
}
