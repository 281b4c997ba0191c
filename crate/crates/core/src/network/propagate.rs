//! Forward pass `z = W a`, `a = g(z)` and the matching reverse pass
//! `dW = (da ⊙ g'(z)) aᵀ`, `da_prev = Wᵀ (da ⊙ g'(z))`, with residual
//! branches summing their incoming gradients and concat splitting them.

use super::batchnorm::{self, BatchNormState};
use super::conv::{self, ConvGeometry};
use super::loss::{loss_with_gradient, LossKind, Target};
use super::{BatchNormMode, Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Strided, Tensor};

#[derive(Debug, Clone)]
enum LayerAux {
    None,
    Conv { cols: Vec<f64> },
    BatchNorm(BatchNormState),
}

/// Every node value of one forward pass: `nodes()[0]` is the input batch,
/// `nodes()[k + 1]` the output of layer `k`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    nodes: Vec<Tensor>,
    aux: Vec<LayerAux>,
}

impl ForwardCache {
    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> Option<&Tensor> {
        self.nodes.get(index)
    }

    pub fn input(&self) -> &Tensor {
        &self.nodes[0]
    }

    pub fn output(&self) -> &Tensor {
        self.nodes.last().expect("cache holds the input node")
    }

    pub fn into_output(mut self) -> Tensor {
        self.nodes.pop().expect("cache holds the input node")
    }

    pub fn batch_size(&self) -> usize {
        self.nodes[0].shape()[0]
    }

    /// Batch mean, biased variance and reduction count of a train-mode
    /// batch-norm layer.
    pub fn batch_statistics(&self, layer: usize) -> Option<(&[f64], &[f64], usize)> {
        match self.aux.get(layer) {
            Some(LayerAux::BatchNorm(s)) if s.mode == BatchNormMode::Train => {
                Some((&s.mean, &s.var, s.count))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerGradient {
    None,
    Dense { weight: Tensor, bias: Option<Vec<f64>> },
    Conv2d { kernel: Tensor, bias: Option<Vec<f64>> },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64> },
}

impl LayerGradient {
    /// Views in the same order as the network's parameter vector.
    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            LayerGradient::None => Vec::new(),
            LayerGradient::Dense { weight, bias } => std::iter::once(weight.data())
                .chain(bias.as_deref())
                .collect(),
            LayerGradient::Conv2d { kernel, bias } => std::iter::once(kernel.data())
                .chain(bias.as_deref())
                .collect(),
            LayerGradient::BatchNorm { gamma, beta } => vec![gamma, beta],
        }
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            LayerGradient::None => Vec::new(),
            LayerGradient::Dense { weight, bias } | LayerGradient::Conv2d { kernel: weight, bias } => {
                let mut v = vec![weight.data_mut()];
                if let Some(b) = bias.as_mut() {
                    v.push(b.as_mut_slice());
                }
                v
            }
            LayerGradient::BatchNorm { gamma, beta } => vec![gamma.as_mut_slice(), beta.as_mut_slice()],
        }
    }
}

/// Output of the reverse pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    /// Loss value when the pass started from a loss function.
    pub loss: Option<f64>,
    /// One entry per layer, aligned with `Network::layers()`.
    pub layers: Vec<LayerGradient>,
    /// Gradient with respect to every node value, aligned with the cache.
    pub nodes: Vec<Tensor>,
}

impl GradientSet {
    /// Flattened in the order of `Network::parameters()`.
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.slices().into_iter().flatten().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.slices())
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().flat_map(|l| l.slices()).map(|s| s.len()).sum()
    }

    /// Overwrite from a flat vector laid out like [`GradientSet::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let n = self.parameter_count();
        if values.len() != n {
            return Err(Error::shape("GradientSet::set_flat", &[n], &[values.len()]));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for s in layer.slices_mut() {
                s.copy_from_slice(&values[offset..offset + s.len()]);
                offset += s.len();
            }
        }
        Ok(())
    }
}

fn batched_shape(batch: usize, node: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(node.len() + 1);
    s.push(batch);
    s.extend_from_slice(node);
    s
}

pub fn forward(net: &Network, x: &Tensor) -> Result<ForwardCache> {
    forward_until(net, x, net.layers().len())
}

/// Forward pass that stops once node `last_node` has been produced.
fn forward_until(net: &Network, x: &Tensor, last_node: usize) -> Result<ForwardCache> {
    let shape = x.shape();
    if shape.len() != net.input_shape().len() + 1 || &shape[1..] != net.input_shape() {
        return Err(Error::shape("forward input", shape, net.input_shape()));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("forward input"));
    }
    let batch = shape[0];
    let mut nodes = Vec::with_capacity(last_node + 1);
    nodes.push(x.clone());
    let mut aux = Vec::with_capacity(last_node);
    for (k, layer) in net.layers().iter().enumerate().take(last_node) {
        let input = &nodes[k];
        let in_shape = &net.node_shapes()[k];
        let out_shape = batched_shape(batch, &net.node_shapes()[k + 1]);
        let (value, extra) = match layer {
            Layer::Dense(d) => {
                let (n_in, n_out) = (d.inputs(), d.outputs());
                let mut z = gemm(
                    batch,
                    n_in,
                    n_out,
                    Strided::row_major(input.data(), n_in),
                    Strided::transposed(d.weight.data(), n_in),
                );
                if let Some(bias) = &d.bias {
                    for row in z.chunks_mut(n_out) {
                        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
                    }
                }
                (Tensor::new(out_shape, z)?, LayerAux::None)
            }
            Layer::Conv2d(c) => {
                let g = ConvGeometry::new(c, batch, in_shape[1], in_shape[2]);
                let (out, cols) = conv::forward(c, input.data(), &g);
                (Tensor::new(out_shape, out)?, LayerAux::Conv { cols })
            }
            Layer::BatchNorm(bn) => {
                let inner: usize = in_shape[1..].iter().product();
                let (out, state) = batchnorm::forward(bn, input.data(), batch, inner);
                (Tensor::new(out_shape, out)?, LayerAux::BatchNorm(state))
            }
            Layer::Activation(a) => (a.eval(input)?, LayerAux::None),
            Layer::Flatten => (input.clone().reshape(out_shape)?, LayerAux::None),
            Layer::ResidualAdd { source } => (input.add(&nodes[*source])?, LayerAux::None),
            Layer::Concat { sources } => {
                let mut out = Vec::with_capacity(out_shape.iter().product());
                for b in 0..batch {
                    for &s in sources {
                        let per: usize = net.node_shapes()[s].iter().product();
                        out.extend_from_slice(&nodes[s].data()[b * per..(b + 1) * per]);
                    }
                }
                (Tensor::new(out_shape, out)?, LayerAux::None)
            }
        };
        nodes.push(value);
        aux.push(extra);
    }
    Ok(ForwardCache { nodes, aux })
}

/// Returns node `node_index` of a forward pass on `x` (index 0 is `x`).
pub fn extract_feature_maps(net: &Network, x: &Tensor, node_index: usize) -> Result<Tensor> {
    if node_index >= net.node_count() {
        return Err(Error::InvalidArgument(format!(
            "feature-map index {node_index} out of range (network has {} nodes)",
            net.node_count()
        )));
    }
    let mut cache = forward_until(net, x, node_index)?;
    Ok(cache.nodes.swap_remove(node_index))
}

pub fn backward(net: &Network, cache: &ForwardCache, target: &Target, kind: LossKind) -> Result<GradientSet> {
    check_cache(net, cache)?;
    let (value, d_out) = loss_with_gradient(cache.output(), target, kind)?;
    let mut grads = backward_from_output(net, cache, d_out)?;
    grads.loss = Some(value);
    Ok(grads)
}

fn check_cache(net: &Network, cache: &ForwardCache) -> Result<()> {
    if cache.nodes.len() != net.node_count() || cache.aux.len() != net.layers().len() {
        return Err(Error::Architecture(format!(
            "cache has {} nodes, network has {}",
            cache.nodes.len(),
            net.node_count()
        )));
    }
    let batch = cache.batch_size();
    for (i, (t, s)) in cache.nodes.iter().zip(net.node_shapes()).enumerate() {
        if t.shape() != batched_shape(batch, s).as_slice() {
            return Err(Error::Architecture(format!(
                "cache node {i} has shape {:?}, network expects {:?}",
                t.shape(),
                batched_shape(batch, s)
            )));
        }
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Tensor>, value: Tensor) -> Result<()> {
    match slot {
        Some(existing) => *existing = existing.add(&value)?,
        None => *slot = Some(value),
    }
    Ok(())
}

/// Reverse pass seeded with an arbitrary gradient on the network output.
pub fn backward_from_output(net: &Network, cache: &ForwardCache, d_out: Tensor) -> Result<GradientSet> {
    check_cache(net, cache)?;
    if d_out.shape() != cache.output().shape() {
        return Err(Error::shape("backward seed", d_out.shape(), cache.output().shape()));
    }
    let batch = cache.batch_size();
    let n_layers = net.layers().len();
    let mut node_grads: Vec<Option<Tensor>> = vec![None; n_layers + 1];
    node_grads[n_layers] = Some(d_out);
    let mut layer_grads = vec![LayerGradient::None; n_layers];

    for k in (0..n_layers).rev() {
        let layer = &net.layers()[k];
        let input = &cache.nodes[k];
        let d = node_grads[k + 1]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(cache.nodes[k + 1].shape()));
        let in_shape = &net.node_shapes()[k];
        match layer {
            Layer::Dense(dense) => {
                let (n_in, n_out) = (dense.inputs(), dense.outputs());
                let dw = gemm(
                    n_out,
                    batch,
                    n_in,
                    Strided::transposed(d.data(), n_out),
                    Strided::row_major(input.data(), n_in),
                );
                let db = dense.bias.as_ref().map(|_| {
                    let mut s = vec![0.0; n_out];
                    for row in d.data().chunks(n_out) {
                        s.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    s
                });
                let dx = gemm(
                    batch,
                    n_out,
                    n_in,
                    Strided::row_major(d.data(), n_out),
                    Strided::row_major(dense.weight.data(), n_in),
                );
                layer_grads[k] = LayerGradient::Dense {
                    weight: Tensor::new(vec![n_out, n_in], dw)?,
                    bias: db,
                };
                accumulate(&mut node_grads[k], Tensor::new(input.shape().to_vec(), dx)?)?;
            }
            Layer::Conv2d(c) => {
                let cols = match &cache.aux[k] {
                    LayerAux::Conv { cols } => cols,
                    _ => return Err(Error::Architecture(format!("cache lacks conv data for layer {k}"))),
                };
                let g = ConvGeometry::new(c, batch, in_shape[1], in_shape[2]);
                let cg = conv::backward(c, cols, d.data(), &g);
                layer_grads[k] = LayerGradient::Conv2d {
                    kernel: Tensor::new(c.kernel.shape().to_vec(), cg.kernel)?,
                    bias: c.bias.as_ref().map(|_| cg.bias),
                };
                accumulate(&mut node_grads[k], Tensor::new(input.shape().to_vec(), cg.input)?)?;
            }
            Layer::BatchNorm(bn) => {
                let state = match &cache.aux[k] {
                    LayerAux::BatchNorm(s) => s,
                    _ => return Err(Error::Architecture(format!("cache lacks batch-norm data for layer {k}"))),
                };
                if state.mode != bn.mode {
                    return Err(Error::Architecture(format!(
                        "batch-norm layer {k} changed mode between forward and backward"
                    )));
                }
                let inner: usize = in_shape[1..].iter().product();
                let bg = batchnorm::backward(bn, state, d.data(), batch, inner);
                layer_grads[k] = LayerGradient::BatchNorm {
                    gamma: bg.gamma,
                    beta: bg.beta,
                };
                accumulate(&mut node_grads[k], Tensor::new(input.shape().to_vec(), bg.input)?)?;
            }
            Layer::Activation(a) => {
                let dz = d.hadamard(&a.derivative(input)?)?;
                accumulate(&mut node_grads[k], dz)?;
            }
            Layer::Flatten => {
                accumulate(&mut node_grads[k], d.reshape(input.shape().to_vec())?)?;
            }
            Layer::ResidualAdd { source } => {
                accumulate(&mut node_grads[*source], d.clone())?;
                accumulate(&mut node_grads[k], d)?;
            }
            Layer::Concat { sources } => {
                let total: usize = net.node_shapes()[k + 1].iter().product();
                let mut offset = 0;
                for &s in sources {
                    let per: usize = net.node_shapes()[s].iter().product();
                    let mut part = Vec::with_capacity(per * batch);
                    for b in 0..batch {
                        part.extend_from_slice(&d.data()[b * total + offset..b * total + offset + per]);
                    }
                    offset += per;
                    accumulate(&mut node_grads[s], Tensor::new(cache.nodes[s].shape().to_vec(), part)?)?;
                }
            }
        }
    }

    let nodes = node_grads
        .into_iter()
        .zip(&cache.nodes)
        .map(|(g, n)| g.unwrap_or_else(|| Tensor::zeros(n.shape())))
        .collect();
    Ok(GradientSet {
        loss: None,
        layers: layer_grads,
        nodes,
    })
}
