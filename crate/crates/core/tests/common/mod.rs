#![allow(dead_code)]

use awp_core::data::{synth_blobs, Dataset, SynthSpec};
use awp_core::network::{LayerSpec, Network};
use awp_core::rng::Rng;
use awp_core::Tensor;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

pub fn bits_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
}

/// 8x8 single-channel synthetic images.
pub fn images(n: usize, seed: u64) -> Dataset {
    synth_blobs(&SynthSpec::images(n, 4, 8, 2.0, seed)).unwrap()
}

/// conv 4@3x3, relu, flatten, dense 4 on 8x8 inputs.
pub fn tiny_cnn(seed: u64) -> Network {
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
                outputs: 4,
                bias: true,
            },
        ],
        &[1, 8, 8],
        4,
        seed,
    )
    .unwrap()
}

/// Two-class softmax with logits `[0, w x]`.
pub fn logistic(w: f64) -> Network {
    let mut net = Network::build(
        &[LayerSpec::Dense {
            inputs: 1,
            outputs: 2,
            bias: false,
        }],
        &[1],
        2,
        0,
    )
    .unwrap();
    *net.weights_mut()[0] = Tensor::new(vec![2, 1], vec![0.0, w]).unwrap();
    net
}
