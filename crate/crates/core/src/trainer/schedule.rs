use std::fmt;

use crate::error::{Error, Result};

/// Learning-rate schedule over epochs `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// `initial * factor^k` where `k` counts milestones `<= t`.
    Piecewise {
        initial: f64,
        milestones: Vec<usize>,
        factor: f64,
    },
    /// `initial / 2 * (cos(pi t / T) + 1)`.
    Cosine { initial: f64 },
    /// Linear from 0 up to `peak_lr` at `peak_epoch`, then linear down to 0 at `T`.
    Cyclic { peak_epoch: usize, peak_lr: f64 },
    Constant { lr: f64 },
}

impl Schedule {
    pub fn validate(&self, total: usize) -> Result<()> {
        match self {
            Schedule::Piecewise {
                initial,
                milestones,
                factor,
            } => {
                if !(*initial >= 0.0 && *factor >= 0.0) {
                    return Err(Error::Invalid("piecewise schedule rates must be >= 0".into()));
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Invalid(format!("milestones must be strictly increasing: {milestones:?}")));
                }
                if milestones.iter().any(|&m| m == 0 || m > total) {
                    return Err(Error::Invalid(format!("milestones must lie in [1, {total}]: {milestones:?}")));
                }
            }
            Schedule::Cosine { initial } | Schedule::Constant { lr: initial } => {
                if !(*initial >= 0.0) {
                    return Err(Error::Invalid("learning rate must be >= 0".into()));
                }
            }
            Schedule::Cyclic { peak_epoch, peak_lr } => {
                if !(*peak_lr >= 0.0) || *peak_epoch == 0 || *peak_epoch > total {
                    return Err(Error::Invalid(format!(
                        "cyclic peak must be a nonnegative rate at an epoch in [1, {total}]"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rate for epoch `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        match self {
            Schedule::Piecewise {
                initial,
                milestones,
                factor,
            } => {
                let passed = milestones.iter().filter(|&&m| t >= m).count();
                initial * factor.powi(passed as i32)
            }
            Schedule::Cosine { initial } => {
                0.5 * initial * ((std::f64::consts::PI * t as f64 / total as f64).cos() + 1.0)
            }
            Schedule::Cyclic { peak_epoch, peak_lr } => {
                let (t, p, n) = (t as f64, *peak_epoch as f64, total as f64);
                if t <= p {
                    peak_lr * t / p
                } else if n > p {
                    (peak_lr * (n - t) / (n - p)).max(0.0)
                } else {
                    0.0
                }
            }
            Schedule::Constant { lr } => *lr,
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Piecewise { .. } => f.write_str("piecewise"),
            Schedule::Cosine { .. } => f.write_str("cosine"),
            Schedule::Cyclic { .. } => f.write_str("cyclic"),
            Schedule::Constant { .. } => f.write_str("constant"),
        }
    }
}
