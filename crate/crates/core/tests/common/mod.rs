//! Shared helpers: random inputs, perturbed networks, and a naive
//! forward pass written independently of the library's lowering.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teleport_core::network::{
    ActivationDescriptor, ActivationKind, BatchNorm, BatchNormMode, Conv2d, Dense, Layer, Network,
};
use teleport_core::trainer::{initialize, InitScheme};
use teleport_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_input(sample_shape: &[usize], batch: usize, spread: f64, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let mut shape = vec![batch];
    shape.extend_from_slice(sample_shape);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-spread..spread)).collect()).unwrap()
}

/// Kaiming weights, non-zero biases and non-trivial batch-norm state.
pub fn perturbed(net: &Network, seed: u64) -> Network {
    let base = initialize(net, InitScheme::Kaiming, seed);
    let mut r = rng(seed ^ 0x5eed);
    let layers = base
        .layers()
        .iter()
        .cloned()
        .map(|layer| match layer {
            Layer::Dense(mut d) => {
                if let Some(b) = d.bias.as_mut() {
                    b.iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
                }
                Layer::Dense(d)
            }
            Layer::Conv2d(mut c) => {
                if let Some(b) = c.bias.as_mut() {
                    b.iter_mut().for_each(|v| *v = r.gen_range(-0.2..0.2));
                }
                Layer::Conv2d(c)
            }
            Layer::BatchNorm(mut bn) => {
                for c in 0..bn.features() {
                    bn.gamma[c] = r.gen_range(0.5..1.5);
                    bn.beta[c] = r.gen_range(-0.3..0.3);
                    bn.running_mean[c] = r.gen_range(-0.5..0.5);
                    bn.running_var[c] = r.gen_range(0.5..2.0);
                }
                Layer::BatchNorm(bn)
            }
            other => other,
        })
        .collect();
    Network::new(base.input_shape().to_vec(), layers).unwrap()
}

pub fn with_mode(net: &Network, mode: BatchNormMode) -> Network {
    let mut n = net.clone();
    n.set_batchnorm_mode(mode);
    n
}

/// Small network exercising channel concatenation.
pub fn concat_net(activation: ActivationKind) -> Network {
    let layers = vec![
        Layer::Conv2d(Conv2d::same(2, 3, 3, true)),
        Layer::Activation(ActivationDescriptor::new(activation, 3)),
        Layer::Conv2d(Conv2d::same(3, 2, 1, true)),
        Layer::Activation(ActivationDescriptor::new(activation, 2)),
        Layer::Concat { sources: vec![4, 2] },
        Layer::BatchNorm(BatchNorm::new(5)),
        Layer::Activation(ActivationDescriptor::new(activation, 5)),
        Layer::Flatten,
        Layer::Dense(Dense::zeros(5 * 4 * 4, 3, true)),
    ];
    Network::new(vec![2, 4, 4], layers).unwrap()
}

pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn scalar_activation(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        ActivationKind::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                0.01 * x
            }
        }
        ActivationKind::Tanh => x.tanh(),
        ActivationKind::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp() - 1.0
            }
        }
        ActivationKind::Linear => x,
    }
}

/// Per-sample node values, each stored channel-major.
type Nodes = Vec<Vec<Vec<f64>>>;

/// Direct-loop forward pass. Returns `[batch][output]`.
pub fn oracle_forward(net: &Network, x: &Tensor) -> Vec<Vec<f64>> {
    let batch = x.shape()[0];
    let per = x.len() / batch;
    let mut nodes: Nodes = vec![(0..batch).map(|b| x.data()[b * per..(b + 1) * per].to_vec()).collect()];
    let shapes = net.node_shapes();
    for (k, layer) in net.layers().iter().enumerate() {
        let input = &nodes[k];
        let in_shape = &shapes[k];
        let out_shape = &shapes[k + 1];
        let inner_in: usize = in_shape[1..].iter().product();
        let out: Vec<Vec<f64>> = match layer {
            Layer::Dense(d) => input.iter().map(|v| dense(d, v)).collect(),
            Layer::Conv2d(c) => input
                .iter()
                .map(|v| conv(c, v, in_shape, out_shape))
                .collect(),
            Layer::BatchNorm(bn) => batchnorm(bn, input, inner_in),
            Layer::Activation(a) => input
                .iter()
                .map(|v| {
                    v.iter()
                        .enumerate()
                        .map(|(j, z)| {
                            let t = a.scales[j / inner_in];
                            t * scalar_activation(a.kind, z / t)
                        })
                        .collect()
                })
                .collect(),
            Layer::Flatten => input.clone(),
            Layer::ResidualAdd { source } => input
                .iter()
                .zip(&nodes[*source])
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + q).collect())
                .collect(),
            Layer::Concat { sources } => (0..batch)
                .map(|b| sources.iter().flat_map(|&s| nodes[s][b].iter().copied()).collect())
                .collect(),
        };
        nodes.push(out);
    }
    nodes.pop().unwrap()
}

fn dense(d: &Dense, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = (d.weight.shape()[0], d.weight.shape()[1]);
    (0..rows)
        .map(|i| {
            let mut s = d.bias.as_ref().map_or(0.0, |b| b[i]);
            for j in 0..cols {
                s += d.weight.data()[i * cols + j] * v[j];
            }
            s
        })
        .collect()
}

fn conv(c: &Conv2d, v: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let k = c.kernel.shape();
    let (o_c, i_c, kh, kw) = (k[0], k[1], k[2], k[3]);
    let (h, w) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = vec![0.0; o_c * oh * ow];
    for o in 0..o_c {
        for y in 0..oh {
            for xo in 0..ow {
                let mut s = c.bias.as_ref().map_or(0.0, |b| b[o]);
                for i in 0..i_c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let yy = (y * c.stride + dy) as isize - c.padding as isize;
                            let xx = (xo * c.stride + dx) as isize - c.padding as isize;
                            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                                continue;
                            }
                            s += c.kernel.data()[((o * i_c + i) * kh + dy) * kw + dx]
                                * v[(i * h + yy as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = s;
            }
        }
    }
    out
}

fn batchnorm(bn: &BatchNorm, input: &[Vec<f64>], inner: usize) -> Vec<Vec<f64>> {
    let channels = bn.features();
    let (mean, var): (Vec<f64>, Vec<f64>) = match bn.mode {
        BatchNormMode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
        BatchNormMode::Train => (0..channels)
            .map(|c| {
                let vals: Vec<f64> = input
                    .iter()
                    .flat_map(|v| v[c * inner..(c + 1) * inner].iter().copied())
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
                (m, var)
            })
            .unzip(),
    };
    input
        .iter()
        .map(|v| {
            v.iter()
                .enumerate()
                .map(|(j, x)| {
                    let c = j / inner;
                    bn.gamma[c] * (x - mean[c]) / (var[c] + bn.eps).sqrt() + bn.beta[c]
                })
                .collect()
        })
        .collect()
}
