//! Flat `key = value` experiment files.
//!
//! Blank lines and `#` comments are ignored. Every key has a default, so an
//! empty file is a valid config; unknown or repeated keys are errors that
//! carry the offending line number.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attacks::{ThreatModel, ThreatNorm};
use crate::awp::AwpConfig;
use crate::data::{load_csv, load_idx, synth_blobs, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec, RobustLoss, WeightPenalty};
use crate::network::{Network, NormKind, Preset};
use crate::rng::derive_seed;
use crate::trainer::{Perturbation, Schedule, SslConfig, TrainConfig};

#[derive(Debug, Clone, Copy)]
enum Kind {
    Count,
    Positive,
    Seed,
    Rate,
    Real,
    Switch,
    Choice(&'static [&'static str]),
    Reals,
    Milestones,
    Text,
}

struct KeyDef {
    name: &'static str,
    default: &'static str,
    kind: Kind,
    doc: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, doc: &'static str) -> KeyDef {
    KeyDef {
        name,
        default,
        kind,
        doc,
    }
}

const KEYS: &[KeyDef] = &[
    // data
    key("dataset", "synth", Kind::Choice(&["synth", "idx", "csv"]), "data source"),
    key("train_images", "", Kind::Text, "idx: training image file"),
    key("train_labels", "", Kind::Text, "idx: training label file"),
    key("test_images", "", Kind::Text, "idx: test image file"),
    key("test_labels", "", Kind::Text, "idx: test label file"),
    key("train_csv", "", Kind::Text, "csv: training file, label in the last column"),
    key("test_csv", "", Kind::Text, "csv: test file"),
    key("n_train", "1000", Kind::Positive, "training examples (synth) or cap (idx/csv)"),
    key("n_test", "1000", Kind::Positive, "test examples (synth) or cap (idx/csv)"),
    key("classes", "10", Kind::Positive, "class count"),
    key("side", "8", Kind::Positive, "synth: image side length"),
    key("channels", "1", Kind::Positive, "synth: image channels"),
    key("margin", "2", Kind::Rate, "synth: signal-to-noise ratio"),
    key("noise", "1", Kind::Rate, "synth: noise scale"),
    key("jitter", "0", Kind::Rate, "synth: per-example blob jitter in pixels"),
    key("data_seed", "7", Kind::Seed, "synth: generator seed"),
    // model
    key("arch", "cnn-small", Kind::Choice(&["cnn-small", "mlp-small"]), "network preset"),
    key("pad", "0", Kind::Count, "cnn-small: convolution padding"),
    // training
    key("mode", "at", Kind::Choice(&["at", "awp", "trades", "mart", "ssl"]), "training loss; awp is at with awp=on"),
    key("awp", "off", Kind::Switch, "adversarial weight perturbation"),
    key("rwp", "off", Kind::Switch, "random weight perturbation"),
    key("epochs", "30", Kind::Positive, "training epochs"),
    key("batch_size", "32", Kind::Positive, "minibatch size"),
    key("lr", "0.05", Kind::Rate, "initial learning rate"),
    key("schedule", "piecewise", Kind::Choice(&["piecewise", "cosine", "cyclic", "constant"]), "learning-rate schedule"),
    key("milestones", "auto", Kind::Milestones, "piecewise: epochs where lr drops; auto = T/2, 3T/4"),
    key("lr_factor", "0.1", Kind::Rate, "piecewise: drop factor"),
    key("peak_epoch", "0", Kind::Count, "cyclic: peak epoch; 0 = 2T/5"),
    key("peak_lr", "0", Kind::Rate, "cyclic: peak rate; 0 = 2 * lr"),
    key("momentum", "0.9", Kind::Rate, "SGD momentum"),
    key("weight_decay", "5e-4", Kind::Rate, "L2 weight decay"),
    key("beta", "6", Kind::Rate, "trades: KL weight"),
    key("mart_lambda", "5", Kind::Rate, "mart: KL weight"),
    key("ssl_lambda", "1", Kind::Rate, "ssl: weight of the pseudo-labeled loss"),
    key("ssl_inner", "at", Kind::Choice(&["at", "trades", "mart"]), "ssl: loss applied to both parts"),
    key("labeled_fraction", "0.1", Kind::Rate, "ssl: share of training data keeping labels"),
    key("natural_epochs", "10", Kind::Positive, "ssl: epochs for the pseudo-labelling model"),
    key("penalty", "none", Kind::Choice(&["none", "l1", "l2"]), "extra weight penalty"),
    key("penalty_lambda", "0", Kind::Rate, "weight penalty strength"),
    key("seed", "0", Kind::Seed, "run seed"),
    key("eval_subset", "0", Kind::Count, "evaluate on at most this many examples; 0 = all"),
    key("eval_every", "1", Kind::Positive, "evaluate every k epochs"),
    // attacks
    key("threat", "linf", Kind::Choice(&["linf", "l2"]), "threat model norm"),
    key("epsilon", "0.05", Kind::Rate, "attack radius"),
    key("step_size", "0", Kind::Rate, "training attack step; 0 = epsilon / 4"),
    key("attack_steps", "10", Kind::Positive, "training attack steps"),
    key("eval_steps", "20", Kind::Positive, "evaluation attack steps"),
    key("eval_step_size", "0", Kind::Rate, "evaluation attack step; 0 = epsilon / 4"),
    key("random_start", "on", Kind::Switch, "uniform random start"),
    // weight perturbation
    key("gamma", "5e-3", Kind::Rate, "relative perturbation size"),
    key("awp_steps", "1", Kind::Positive, "ascent steps per alternation"),
    key("awp_alternations", "1", Kind::Positive, "input/weight alternations per update"),
    key("awp_step_size", "0", Kind::Rate, "ascent step; 0 = gamma / (alternations * steps)"),
    key("awp_norm", "frobenius", Kind::Choice(&["frobenius", "l1"]), "norm for the size bound"),
    key("carry_v", "off", Kind::Switch, "keep the perturbation across minibatches"),
    // analysis
    key("checkpoint", "", Kind::Text, "checkpoint for landscape, perturb-compare and histogram"),
    key("landscape_dims", "1", Kind::Choice(&["1", "2"]), "1-D profile or 2-D surface"),
    key("alpha_min", "-1", Kind::Real, "grid start"),
    key("alpha_max", "1", Kind::Real, "grid end"),
    key("alpha_steps", "21", Kind::Positive, "grid points"),
    key("beta_min", "-1", Kind::Real, "2-D grid start"),
    key("beta_max", "1", Kind::Real, "2-D grid end"),
    key("beta_steps", "11", Kind::Positive, "2-D grid points"),
    key("landscape_split", "train", Kind::Choice(&["train", "test"]), "data the landscape is measured on"),
    key("landscape_subset", "1000", Kind::Positive, "examples used for landscapes and comparisons"),
    key("direction_seed", "1", Kind::Seed, "first direction seed"),
    key("gammas", "0,1e-3,5e-3,1e-2", Kind::Reals, "perturb-compare: gamma list"),
    key("rwp_draws", "10", Kind::Positive, "perturb-compare: random draws per gamma"),
    key("layer", "fc1", Kind::Text, "histogram: layer name or index"),
    key("bins", "50", Kind::Positive, "histogram: bin count"),
    key("svg", "on", Kind::Switch, "also write SVG plots"),
];

fn def(name: &str) -> &'static KeyDef {
    KEYS.iter().find(|k| k.name == name).expect("known key")
}

fn check(kind: Kind, v: &str) -> std::result::Result<(), String> {
    let float = |v: &str| v.parse::<f64>().map_err(|_| format!("expected a number, got {v:?}"));
    match kind {
        Kind::Count => v.parse::<usize>().map(drop).map_err(|_| format!("expected a count, got {v:?}")),
        Kind::Positive => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("expected a positive integer, got {v:?}")),
        },
        Kind::Seed => v.parse::<u64>().map(drop).map_err(|_| format!("expected an unsigned seed, got {v:?}")),
        Kind::Rate => match float(v)? {
            x if x >= 0.0 && x.is_finite() => Ok(()),
            _ => Err(format!("expected a finite value >= 0, got {v:?}")),
        },
        Kind::Real => match float(v)? {
            x if x.is_finite() => Ok(()),
            _ => Err(format!("expected a finite number, got {v:?}")),
        },
        Kind::Switch => match v {
            "on" | "off" | "true" | "false" => Ok(()),
            _ => Err(format!("expected on or off, got {v:?}")),
        },
        Kind::Choice(opts) => {
            if opts.contains(&v) {
                Ok(())
            } else {
                Err(format!("expected one of {}, got {v:?}", opts.join("|")))
            }
        }
        Kind::Reals => {
            for p in v.split(',') {
                match float(p.trim())? {
                    x if x >= 0.0 && x.is_finite() => {}
                    _ => return Err(format!("list values must be finite and >= 0, got {p:?}")),
                }
            }
            Ok(())
        }
        Kind::Milestones => {
            if v == "auto" || v.is_empty() {
                return Ok(());
            }
            for p in v.split(',') {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("expected auto or a comma-separated epoch list, got {v:?}"))?;
            }
            Ok(())
        }
        Kind::Text => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    values: HashMap<&'static str, String>,
    /// Line each explicitly set key came from.
    lines: HashMap<&'static str, usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            values: KEYS.iter().map(|k| (k.name, k.default.to_string())).collect(),
            lines: HashMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            cfg.set_at(k.trim(), v.trim(), line)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set_at(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let d = KEYS.iter().find(|d| d.name == key).ok_or_else(|| Error::Config {
            line,
            message: format!("unknown key {key:?}"),
        })?;
        if let Some(prev) = self.lines.get(d.name) {
            return Err(Error::Config {
                line,
                message: format!("key {key:?} already set on line {prev}"),
            });
        }
        check(d.kind, value).map_err(|message| Error::Config {
            line,
            message: format!("{key}: {message}"),
        })?;
        self.values.insert(d.name, value.to_string());
        self.lines.insert(d.name, line);
        Ok(())
    }

    /// Override a key outside any file (e.g. from a command-line flag).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        self.lines.retain(|k, _| *k != key);
        self.set_at(key, value, 0)
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[def(key).name]
    }

    fn err(&self, key: &str, message: impl Into<String>) -> Error {
        Error::Config {
            line: self.lines.get(key).copied().unwrap_or(0),
            message: format!("{key}: {}", message.into()),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn switch(&self, key: &str) -> bool {
        matches!(self.get(key), "on" | "true")
    }

    pub fn reals(&self, key: &str) -> Vec<f64> {
        self.get(key)
            .split(',')
            .map(|p| p.trim().parse().expect("validated on set"))
            .collect()
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        match self.get(key) {
            "" => Err(self.err(key, "path not set")),
            p => Ok(PathBuf::from(p)),
        }
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, self.values[k.name]);
        }
        out
    }

    /// Key, default and description for each documented key.
    pub fn documentation() -> Vec<(&'static str, &'static str, &'static str)> {
        KEYS.iter().map(|k| (k.name, k.default, k.doc)).collect()
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.name.to_string(), self.values[k.name].clone()))
            .collect()
    }

    pub fn threat(&self, steps_key: &str, step_key: &str) -> ThreatModel {
        let epsilon = self.f64("epsilon");
        let step = match self.f64(step_key) {
            s if s > 0.0 => s,
            _ if epsilon > 0.0 => epsilon / 4.0,
            _ => 1.0,
        };
        ThreatModel {
            norm: match self.get("threat") {
                "l2" => ThreatNorm::L2,
                _ => ThreatNorm::Linf,
            },
            epsilon,
            step_size: step,
            steps: self.usize(steps_key),
            random_start: self.switch("random_start"),
        }
    }

    pub fn eval_attack(&self) -> ThreatModel {
        self.threat("eval_steps", "eval_step_size")
    }

    pub fn awp_config(&self) -> AwpConfig {
        AwpConfig {
            gamma: self.f64("gamma"),
            step_size: Some(self.f64("awp_step_size")).filter(|&s| s > 0.0),
            steps: self.usize("awp_steps"),
            alternations: self.usize("awp_alternations"),
            norm: self.norm(),
            carry_v: self.switch("carry_v"),
        }
    }

    pub fn norm(&self) -> NormKind {
        match self.get("awp_norm") {
            "l1" => NormKind::L1,
            _ => NormKind::Frobenius,
        }
    }

    fn robust(&self, name: &str) -> RobustLoss {
        match name {
            "trades" => RobustLoss::Trades { beta: self.f64("beta") },
            "mart" => RobustLoss::Mart {
                lambda: self.f64("mart_lambda"),
            },
            _ => RobustLoss::AtCe,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let epochs = self.usize("epochs");
        let lr = self.f64("lr");
        let s = match self.get("schedule") {
            "cosine" => Schedule::Cosine { initial: lr },
            "constant" => Schedule::Constant { lr },
            "cyclic" => Schedule::Cyclic {
                peak_epoch: match self.usize("peak_epoch") {
                    0 => (2 * epochs / 5).max(1),
                    p => p,
                },
                peak_lr: match self.f64("peak_lr") {
                    p if p > 0.0 => p,
                    _ => 2.0 * lr,
                },
            },
            _ => {
                let milestones = match self.get("milestones") {
                    "auto" | "" => {
                        let mut m = vec![(epochs / 2).max(1), (3 * epochs / 4).max(1)];
                        m.dedup();
                        m
                    }
                    v => v.split(',').map(|p| p.trim().parse().expect("validated on set")).collect(),
                };
                Schedule::Piecewise {
                    initial: lr,
                    milestones,
                    factor: self.f64("lr_factor"),
                }
            }
        };
        let key = if matches!(s, Schedule::Piecewise { .. }) {
            "milestones"
        } else {
            "schedule"
        };
        s.validate(epochs).map_err(|e| self.err(key, e.to_string()))?;
        Ok(s)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mode = self.get("mode");
        let kind = match mode {
            "ssl" => LossKind::Ssl {
                lambda: self.f64("ssl_lambda"),
                inner: self.robust(self.get("ssl_inner")),
            },
            m => LossKind::Robust(self.robust(m)),
        };
        let lambda = self.f64("penalty_lambda");
        let penalty = match self.get("penalty") {
            "l1" => WeightPenalty::L1(lambda),
            "l2" => WeightPenalty::L2(lambda),
            _ => WeightPenalty::None,
        };
        let awp_on = self.switch("awp") || mode == "awp";
        let perturbation = match (awp_on, self.switch("rwp")) {
            (true, true) => return Err(self.err("rwp", "awp and rwp cannot both be on")),
            (true, false) => Perturbation::Awp(self.awp_config()),
            (false, true) => Perturbation::Rwp {
                gamma: self.f64("gamma"),
                norm: self.norm(),
            },
            (false, false) => Perturbation::None,
        };
        let lf = self.f64("labeled_fraction");
        if mode == "ssl" && !(lf > 0.0 && lf <= 1.0) {
            return Err(self.err("labeled_fraction", "must be in (0, 1]"));
        }
        let cfg = TrainConfig {
            epochs: self.usize("epochs"),
            batch_size: self.usize("batch_size"),
            momentum: self.f64("momentum"),
            weight_decay: self.f64("weight_decay"),
            schedule: self.schedule()?,
            threat: self.threat("attack_steps", "step_size"),
            eval_attack: self.eval_attack(),
            loss: LossSpec { kind, penalty },
            perturbation,
            seed: self.u64("seed"),
            eval_subset: Some(self.usize("eval_subset")).filter(|&n| n > 0),
            eval_every: self.usize("eval_every"),
            ssl: (mode == "ssl").then(|| SslConfig {
                labeled_fraction: lf,
                natural_epochs: self.usize("natural_epochs"),
            }),
        };
        cfg.validate().map_err(|e| self.err("mode", e.to_string()))?;
        Ok(cfg)
    }

    /// `(train, test)` as configured.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (n_train, n_test) = (self.usize("n_train"), self.usize("n_test"));
        let cap = |ds: Dataset, n: usize| {
            if ds.len() > n {
                ds.select(&(0..n).collect::<Vec<_>>())
            } else {
                ds
            }
        };
        let classes = self.usize("classes");
        match self.get("dataset") {
            "idx" => {
                let train = load_idx(&self.path("train_images")?, &self.path("train_labels")?)?;
                let test = load_idx(&self.path("test_images")?, &self.path("test_labels")?)?;
                Ok((cap(train, n_train), cap(test, n_test)))
            }
            "csv" => {
                let train = load_csv(&self.path("train_csv")?, Some(classes))?;
                let test = load_csv(&self.path("test_csv")?, Some(classes))?;
                Ok((cap(train, n_train), cap(test, n_test)))
            }
            _ => {
                let side = self.usize("side");
                let spec = SynthSpec {
                    n: n_train + n_test,
                    classes,
                    shape: vec![self.usize("channels"), side, side],
                    margin: self.f64("margin"),
                    noise: self.f64("noise"),
                    jitter: self.f64("jitter"),
                    seed: self.u64("data_seed"),
                };
                let all = synth_blobs(&spec).map_err(|e| self.err("dataset", e.to_string()))?;
                let train = all.select(&(0..n_train).collect::<Vec<_>>());
                let test = all.select(&(n_train..n_train + n_test).collect::<Vec<_>>());
                Ok((
                    Dataset {
                        tag: "synth/train".into(),
                        ..train
                    },
                    Dataset {
                        tag: "synth/test".into(),
                        ..test
                    },
                ))
            }
        }
    }

    pub fn preset(&self) -> Preset {
        self.get("arch").parse().expect("validated on set")
    }

    /// Freshly initialized network for data of `example_shape`.
    pub fn network(&self, example_shape: &[usize], classes: usize) -> Result<Network> {
        let shape = match (self.preset(), example_shape.len()) {
            (Preset::CnnSmall, 2) => vec![1, example_shape[0], example_shape[1]],
            _ => example_shape.to_vec(),
        };
        Network::from_preset(
            self.preset(),
            &shape,
            classes,
            self.usize("pad"),
            derive_seed(self.u64("seed"), 1),
        )
        .map_err(|e| self.err("arch", e.to_string()))
    }
}
