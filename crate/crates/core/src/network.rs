//! Small feed-forward classifiers.
//!
//! A [`Network`] is an ordered list of layers applied to a batch laid out as
//! `[N, ...input_shape]`. Dense weights are stored `[out, in]` and conv
//! kernels `[out_ch, in_ch, k, k]`, so in both cases a *filter* is one slice
//! along the leading axis. Only these multiplicative weights are
//! "perturbable"; biases are left out of filter normalization and of weight
//! perturbation.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pad: usize,
        bias: bool,
    },
    Relu,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, outputs, .. } => write!(f, "dense({inputs},{outputs})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                pad,
                ..
            } => write!(f, "conv2d({in_channels},{out_channels},{kernel},pad {pad})"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

/// Named desk-scale architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// flatten, dense 64, relu, dense C
    MlpSmall,
    /// conv 8@3x3, relu, conv 16@3x3, relu, flatten, dense C
    CnnSmall,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(Preset::MlpSmall),
            "cnn-small" => Ok(Preset::CnnSmall),
            other => Err(Error::Invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::MlpSmall => "mlp-small",
            Preset::CnnSmall => "cnn-small",
        })
    }
}

impl Preset {
    /// Layer list for `input_shape` (per example) and `classes`. `pad` applies
    /// to both conv layers of `cnn-small`.
    pub fn layers(self, input_shape: &[usize], classes: usize, pad: usize) -> Result<Vec<LayerSpec>> {
        let flat: usize = input_shape.iter().product();
        match self {
            Preset::MlpSmall => Ok(vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: flat,
                    outputs: 64,
                    bias: true,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 64,
                    outputs: classes,
                    bias: true,
                },
            ]),
            Preset::CnnSmall => {
                let [c, h, w] = input_shape else {
                    return Err(Error::Spec(format!(
                        "cnn-small needs a [C,H,W] input, got {input_shape:?}"
                    )));
                };
                if h + 4 * pad < 5 || w + 4 * pad < 5 {
                    return Err(Error::Spec(format!("input {h}x{w} too small for cnn-small")));
                }
                let spatial = (h + 4 * pad - 4) * (w + 4 * pad - 4);
                Ok(vec![
                    LayerSpec::Conv2d {
                        in_channels: *c,
                        out_channels: 8,
                        kernel: 3,
                        pad,
                        bias: true,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        in_channels: 8,
                        out_channels: 16,
                        kernel: 3,
                        pad,
                        bias: true,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Flatten,
                    LayerSpec::Dense {
                        inputs: 16 * spatial,
                        outputs: classes,
                        bias: true,
                    },
                ])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { weight: Tensor, bias: Option<Tensor> },
    Conv2d { weight: Tensor, bias: Option<Tensor>, pad: usize },
    Relu,
    Flatten,
}

impl Layer {
    fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    fn weight_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Dense { weight, .. } | Layer::Conv2d { weight, .. } => Some(weight),
            _ => None,
        }
    }

    fn bias(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_ref(),
            _ => None,
        }
    }

    fn bias_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => bias.as_mut(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Layer,
    Filter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    L1,
    Frobenius,
}

impl NormKind {
    pub fn of(self, t: &Tensor) -> f64 {
        match self {
            NormKind::L1 => t.l1_norm(),
            NormKind::Frobenius => t.frobenius_norm(),
        }
    }

    pub fn of_slice(self, s: &[f64]) -> f64 {
        match self {
            NormKind::L1 => s.iter().map(|v| v.abs()).sum(),
            NormKind::Frobenius => s.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(NormKind::L1),
            "frobenius" | "l2" => Ok(NormKind::Frobenius),
            other => Err(Error::Invalid(format!("unknown norm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `bins + 1` uniformly spaced edges over `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    classes: usize,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

/// Tape handles for one parameterized layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

fn shape_error(prev: Option<&LayerSpec>, cur: &LayerSpec, shape: &[usize]) -> Error {
    match prev {
        Some(p) => Error::Spec(format!("{p} followed by {cur}: incompatible (activation shape {shape:?})")),
        None => Error::Spec(format!("input shape {shape:?} incompatible with first layer {cur}")),
    }
}

impl Network {
    /// Checks `specs` against `input_shape` and `classes`, then initializes
    /// weights He-uniform from `seed` with zero biases.
    pub fn build(specs: &[LayerSpec], input_shape: &[usize], classes: usize, seed: u64) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) || classes == 0 {
            return Err(Error::Spec(format!(
                "invalid input shape {input_shape:?} / class count {classes}"
            )));
        }
        let mut rng = Rng::new(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut prev: Option<&LayerSpec> = None;
        for spec in specs {
            match *spec {
                LayerSpec::Dense { inputs, outputs, bias } => {
                    if inputs == 0 || outputs == 0 || shape != [inputs] {
                        return Err(shape_error(prev, spec, &shape));
                    }
                    let weight = he_uniform(&mut rng, &[outputs, inputs], inputs);
                    let bias = bias.then(|| Tensor::zeros(&[outputs]));
                    layers.push(Layer::Dense { weight, bias });
                    shape = vec![outputs];
                }
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    pad,
                    bias,
                } => {
                    let ok = in_channels > 0
                        && out_channels > 0
                        && kernel > 0
                        && shape.len() == 3
                        && shape[0] == in_channels
                        && shape[1] + 2 * pad >= kernel
                        && shape[2] + 2 * pad >= kernel;
                    if !ok {
                        return Err(shape_error(prev, spec, &shape));
                    }
                    let fan_in = in_channels * kernel * kernel;
                    let weight = he_uniform(&mut rng, &[out_channels, in_channels, kernel, kernel], fan_in);
                    let bias = bias.then(|| Tensor::zeros(&[out_channels]));
                    layers.push(Layer::Conv2d { weight, bias, pad });
                    shape = vec![
                        out_channels,
                        shape[1] + 2 * pad - kernel + 1,
                        shape[2] + 2 * pad - kernel + 1,
                    ];
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::Flatten => {
                    layers.push(Layer::Flatten);
                    shape = vec![shape.iter().product()];
                }
            }
            prev = Some(spec);
        }
        if shape != [classes] {
            return Err(Error::Spec(format!(
                "network output shape {shape:?} does not match {classes} classes"
            )));
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            classes,
            specs: specs.to_vec(),
            layers,
        })
    }

    pub fn from_preset(preset: Preset, input_shape: &[usize], classes: usize, pad: usize, seed: u64) -> Result<Self> {
        Network::build(&preset.layers(input_shape, classes, pad)?, input_shape, classes, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn param_layer_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weight().is_some())
            .map(|(i, _)| i)
    }

    /// Number of parameterized (dense/conv) layers.
    pub fn num_param_layers(&self) -> usize {
        self.param_layer_indices().count()
    }

    /// Names of parameterized layers: `conv1, conv2, ..., fc1, ...`.
    pub fn layer_names(&self) -> Vec<String> {
        let (mut conv, mut fc) = (0, 0);
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv2d { .. } => {
                    conv += 1;
                    Some(format!("conv{conv}"))
                }
                Layer::Dense { .. } => {
                    fc += 1;
                    Some(format!("fc{fc}"))
                }
                _ => None,
            })
            .collect()
    }

    /// Resolve a layer name (`conv1`) or 0-based index (`0`) to a parameterized-layer index.
    pub fn resolve_layer(&self, name: &str) -> Result<usize> {
        let names = self.layer_names();
        if let Some(i) = names.iter().position(|n| n == name) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i < names.len() => Ok(i),
            _ => Err(Error::Invalid(format!(
                "no layer named {name:?}; available: {}",
                names.join(", ")
            ))),
        }
    }

    /// The perturbable weights, one tensor per parameterized layer.
    pub fn weights(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(Layer::weight).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().filter_map(Layer::weight_mut).collect()
    }

    pub fn weight(&self, l: usize) -> Result<&Tensor> {
        self.weights()
            .get(l)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("layer index {l} out of range")))
    }

    /// Every trainable tensor with its name, weight before bias, layer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let names = self.layer_names();
        let mut out = Vec::new();
        for (name, layer) in names.iter().zip(self.layers.iter().filter(|l| l.weight().is_some())) {
            out.push((format!("{name}.weight"), layer.weight().expect("param layer")));
            if let Some(b) = layer.bias() {
                out.push((format!("{name}.bias"), b));
            }
        }
        out
    }

    /// Same order as [`Network::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    out.push(weight);
                    if let Some(b) = bias {
                        out.push(b);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Clones every trainable tensor in [`Network::named_params`] order.
    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    /// Replace all trainable tensors; shapes must match exactly.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != params.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(Error::shape("set_params", slot.shape(), p.shape()));
            }
            **slot = p;
        }
        Ok(())
    }

    /// For each parameter in [`Network::named_params`] order, the index of
    /// its layer among perturbable weights if it is a weight, `None` for biases.
    pub fn param_weight_index(&self) -> Vec<Option<usize>> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().filter(|l| l.weight().is_some()).enumerate() {
            out.push(Some(l));
            if layer.bias().is_some() {
                out.push(None);
            }
        }
        out
    }

    /// Copy of the network with `scale * delta[l]` added to each perturbable weight.
    pub fn perturbed(&self, delta: &[Tensor], scale: f64) -> Result<Network> {
        let mut net = self.clone();
        {
            let mut ws = net.weights_mut();
            if ws.len() != delta.len() {
                return Err(Error::Invalid(format!(
                    "perturbation has {} layers, network has {}",
                    delta.len(),
                    ws.len()
                )));
            }
            for (w, d) in ws.iter_mut().zip(delta) {
                if scale == 1.0 {
                    **w = w.add(d)?;
                } else {
                    w.axpy(scale, d)?;
                }
            }
        }
        Ok(net)
    }

    /// Put every trainable tensor on `tape`.
    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> Vec<LayerVars> {
        self.layers
            .iter()
            .filter(|l| l.weight().is_some())
            .map(|l| LayerVars {
                weight: tape.leaf(l.weight().expect("param layer").clone(), requires_grad),
                bias: l.bias().map(|b| tape.leaf(b.clone(), requires_grad)),
            })
            .collect()
    }

    /// Logits `[N, classes]` for input node `x` using parameter nodes `vars`
    /// (from [`Network::register`]).
    pub fn forward(&self, tape: &mut Tape, x: Var, vars: &[LayerVars]) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != self.input_shape.len() + 1 || xs[1..] != self.input_shape[..] {
            return Err(Error::shape("network input", xs, &self.input_shape));
        }
        let mut h = x;
        let mut p = vars.iter();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { .. } => {
                    let lv = p.next().ok_or_else(|| Error::Invalid("missing layer vars".into()))?;
                    let wt = tape.transpose(lv.weight)?;
                    let z = tape.matmul(h, wt)?;
                    match lv.bias {
                        Some(b) => tape.add_bias(z, b)?,
                        None => z,
                    }
                }
                Layer::Conv2d { pad, .. } => {
                    let lv = p.next().ok_or_else(|| Error::Invalid("missing layer vars".into()))?;
                    let z = tape.conv2d(h, lv.weight, *pad)?;
                    match lv.bias {
                        Some(b) => tape.add_bias(z, b)?,
                        None => z,
                    }
                }
                Layer::Relu => tape.relu(h)?,
                Layer::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Untaped convenience: logits for a batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, &vars)?;
        Ok(tape.value(out).clone())
    }

    /// Row-wise softmax probabilities for a batch.
    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, &vars)?;
        let ls = tape.log_softmax(out)?;
        Ok(tape.value(ls).map(f64::exp))
    }

    /// Per-layer or per-filter norms of the perturbable weights; the outer
    /// vector is indexed by layer, the inner has one entry (layer
    /// granularity) or one per filter.
    pub fn layer_norms(&self, granularity: Granularity, norm: NormKind) -> Vec<Vec<f64>> {
        self.weights()
            .into_iter()
            .map(|w| match granularity {
                Granularity::Layer => vec![norm.of(w)],
                Granularity::Filter => (0..w.rows()).map(|j| norm.of_slice(w.row(j))).collect(),
            })
            .collect()
    }

    /// Multiply layer `l` (weight and bias) by `c` and divide the next
    /// parameterized layer's weight by `c`. Only valid when the two are
    /// separated by ReLU/flatten, which makes the network function unchanged.
    pub fn rescale_pair(&self, l: usize, c: f64) -> Result<Network> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Invalid(format!("rescale factor must be positive and finite, got {c}")));
        }
        let idx: Vec<usize> = self.param_layer_indices().collect();
        let (Some(&a), Some(&b)) = (idx.get(l), idx.get(l + 1)) else {
            return Err(Error::Invalid(format!("layer {l} has no following parameterized layer")));
        };
        if !self.layers[a + 1..b]
            .iter()
            .all(|x| matches!(x, Layer::Relu | Layer::Flatten))
        {
            return Err(Error::Invalid(format!(
                "layers {l} and {} are not separated only by relu/flatten",
                l + 1
            )));
        }
        let mut net = self.clone();
        let first = &mut net.layers[a];
        let w = first.weight_mut().expect("param layer");
        *w = w.scale(c);
        if let Some(bias) = first.bias_mut() {
            *bias = bias.scale(c);
        }
        let second = net.layers[b].weight_mut().expect("param layer");
        *second = second.scale(1.0 / c);
        Ok(net)
    }

    /// Histogram of the weight values of layer `l` over `bins` uniform bins
    /// spanning `[min, max]`.
    pub fn weight_histogram(&self, l: usize, bins: usize) -> Result<Histogram> {
        if bins == 0 {
            return Err(Error::Invalid("histogram needs at least one bin".into()));
        }
        let w = self.weight(l)?;
        let (lo, hi) = w
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0; bins];
        for &v in w.data() {
            let i = if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            };
            counts[i] += 1;
        }
        Ok(Histogram { edges, counts })
    }
}

fn he_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(i: usize, o: usize, bias: bool) -> LayerSpec {
        LayerSpec::Dense {
            inputs: i,
            outputs: o,
            bias,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::build(&[dense(2, 2, true)], &[2], 2, 9).unwrap();
        let b = Network::build(&[dense(2, 2, true)], &[2], 2, 9).unwrap();
        assert_eq!(a, b);
        let c = Network::build(&[dense(2, 2, true)], &[2], 2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mismatched_pair_is_named() {
        let err = Network::build(&[dense(2, 3, true), dense(4, 2, true)], &[2], 2, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dense(2,3) followed by dense(4,2)"), "{msg}");
    }

    #[test]
    fn padded_conv_keeps_spatial() {
        let specs = [
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 4,
                kernel: 3,
                pad: 1,
                bias: true,
            },
            LayerSpec::Flatten,
            dense(4 * 8 * 8, 3, true),
        ];
        let net = Network::build(&specs, &[1, 8, 8], 3, 1).unwrap();
        let mut tape = Tape::new();
        let vars = net.register(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 8, 8]));
        let conv = tape.conv2d(x, vars[0].weight, 1).unwrap();
        assert_eq!(tape.shape(conv), &[1, 4, 8, 8]);
        assert_eq!(net.logits(&Tensor::zeros(&[2, 1, 8, 8])).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn presets_build() {
        Network::from_preset(Preset::CnnSmall, &[1, 8, 8], 4, 0, 1).unwrap();
        Network::from_preset(Preset::CnnSmall, &[1, 8, 8], 4, 1, 1).unwrap();
        Network::from_preset(Preset::MlpSmall, &[1, 8, 8], 4, 0, 1).unwrap();
        Network::from_preset(Preset::MlpSmall, &[5], 2, 0, 1).unwrap();
        assert!(Network::from_preset(Preset::CnnSmall, &[5], 2, 0, 1).is_err());
    }

    #[test]
    fn biases_start_at_zero_and_weights_within_he_bound() {
        let net = Network::build(&[dense(6, 4, true)], &[6], 4, 3).unwrap();
        let bound = (6.0f64 / 6.0).sqrt();
        assert!(net.weights()[0].data().iter().all(|v| v.abs() <= bound));
        assert!(net.named_params()[1].1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norms_examples() {
        let mut net = Network::build(&[dense(2, 2, false)], &[2], 2, 0).unwrap();
        *net.weights_mut()[0] = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(net.layer_norms(Granularity::Layer, NormKind::Frobenius), vec![vec![5.0]]);
        assert_eq!(net.layer_norms(Granularity::Filter, NormKind::Frobenius), vec![vec![5.0, 0.0]]);
        *net.weights_mut()[0] = Tensor::zeros(&[2, 2]);
        assert_eq!(net.layer_norms(Granularity::Layer, NormKind::L1), vec![vec![0.0]]);
    }

    #[test]
    fn filter_norms_aggregate_to_layer_norm() {
        let net = Network::from_preset(Preset::CnnSmall, &[1, 8, 8], 3, 0, 5).unwrap();
        let layer = net.layer_norms(Granularity::Layer, NormKind::Frobenius);
        let filter = net.layer_norms(Granularity::Filter, NormKind::Frobenius);
        for (l, f) in layer.iter().zip(&filter) {
            let agg = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((agg - l[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn rescale_pair_rules() {
        let specs = [dense(3, 5, false), LayerSpec::Relu, dense(5, 2, false)];
        let net = Network::build(&specs, &[3], 2, 4).unwrap();
        assert_eq!(net.rescale_pair(0, 1.0).unwrap(), net);
        assert!(net.rescale_pair(0, 0.0).is_err());
        assert!(net.rescale_pair(0, -2.0).is_err());
        assert!(net.rescale_pair(1, 2.0).is_err());
    }

    #[test]
    fn rescale_pair_needs_relu_only_between() {
        let specs = [dense(3, 3, false), dense(3, 2, false)];
        let net = Network::build(&specs, &[3], 2, 4).unwrap();
        assert!(net.rescale_pair(0, 2.0).is_ok());
        let specs = [
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 2,
                kernel: 2,
                pad: 0,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            dense(2 * 3 * 3, 2, true),
        ];
        let net = Network::build(&specs, &[1, 4, 4], 2, 4).unwrap();
        let x = Tensor::full(&[1, 1, 4, 4], 0.3);
        let a = net.logits(&x).unwrap();
        let b = net.rescale_pair(0, 7.0).unwrap().logits(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_examples() {
        let mut net = Network::build(&[dense(2, 2, false)], &[2], 2, 0).unwrap();
        *net.weights_mut()[0] = Tensor::full(&[2, 2], 0.25);
        let h = net.weight_histogram(0, 4).unwrap();
        assert_eq!(h.counts, vec![4, 0, 0, 0]);

        *net.weights_mut()[0] = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let h = net.weight_histogram(0, 2).unwrap();
        assert_eq!(h.counts, vec![1, 1]);
        assert_eq!(h.edges, vec![-1.0, 0.0, 1.0]);
        assert!(net.weight_histogram(0, 0).is_err());
    }

    #[test]
    fn layer_names_resolve() {
        let net = Network::from_preset(Preset::CnnSmall, &[1, 8, 8], 3, 0, 5).unwrap();
        assert_eq!(net.layer_names(), vec!["conv1", "conv2", "fc1"]);
        assert_eq!(net.resolve_layer("conv2").unwrap(), 1);
        assert_eq!(net.resolve_layer("2").unwrap(), 2);
        assert!(net.resolve_layer("fc9").is_err());
    }
}
