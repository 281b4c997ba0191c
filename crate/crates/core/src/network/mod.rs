//! Layered feedforward networks: dense, convolution, batch-norm, scaled
//! activations, flatten, identity residual adds and channel concatenation.
//!
//! Node `0` of a network is its input, node `k + 1` is the output of layer
//! `k`. Residual and concat layers refer to earlier nodes by that index.

pub mod activation;
mod batchnorm;
mod conv;
pub mod loss;
mod presets;
mod propagate;

pub use activation::{ActivationDescriptor, ActivationKind};
pub use loss::{accuracy, loss, loss_with_gradient, LossKind, Target};
pub use presets::Preset;
pub use propagate::{
    backward, backward_from_output, extract_feature_maps, forward, ForwardCache, GradientSet,
    LayerGradient,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;
/// Running-statistics update rate used by the trainer.
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Option<Vec<f64>>) -> Self {
        Dense { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize, with_bias: bool) -> Self {
        Dense {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: with_bias.then(|| vec![0.0; outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out_channels x in_channels x kh x kw`
    pub kernel: Tensor,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Stride-1 convolution with "same" zero padding for odd kernels.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, with_bias: bool) -> Self {
        Conv2d {
            kernel: Tensor::zeros(&[out_channels, in_channels, kernel, kernel]),
            bias: with_bias.then(|| vec![0.0; out_channels]),
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub(crate) fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = (self.kernel.shape()[2], self.kernel.shape()[3]);
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.stride == 0 || hp < kh || wp < kw {
            return None;
        }
        Some(((hp - kh) / self.stride + 1, (wp - kw) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub mode: BatchNormMode,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            eps: BATCHNORM_EPS,
            mode: BatchNormMode::Train,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    BatchNorm(BatchNorm),
    Activation(ActivationDescriptor),
    Flatten,
    /// Adds node `source` to the layer's input (identity skip, weight 1).
    ResidualAdd { source: usize },
    /// Concatenates the listed nodes along the channel axis.
    Concat { sources: Vec<usize> },
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Activation(_) => "activation",
            Layer::Flatten => "flatten",
            Layer::ResidualAdd { .. } => "residual-add",
            Layer::Concat { .. } => "concat",
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.len() + d.bias.as_ref().map_or(0, Vec::len),
            Layer::Conv2d(c) => c.kernel.len() + c.bias.as_ref().map_or(0, Vec::len),
            Layer::BatchNorm(b) => 2 * b.features(),
            _ => 0,
        }
    }

    /// Mutable views over the trainable parameters in canonical order.
    pub(crate) fn parameter_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Dense(d) => {
                let mut v = vec![d.weight.data_mut()];
                if let Some(b) = d.bias.as_mut() {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::Conv2d(c) => {
                let mut v = vec![c.kernel.data_mut()];
                if let Some(b) = c.bias.as_mut() {
                    v.push(b.as_mut_slice());
                }
                v
            }
            Layer::BatchNorm(b) => vec![b.gamma.as_mut_slice(), b.beta.as_mut_slice()],
            _ => Vec::new(),
        }
    }

    pub(crate) fn parameter_slices(&self) -> Vec<&[f64]> {
        match self {
            Layer::Dense(d) => std::iter::once(d.weight.data())
                .chain(d.bias.as_deref())
                .collect(),
            Layer::Conv2d(c) => std::iter::once(c.kernel.data())
                .chain(c.bias.as_deref())
                .collect(),
            Layer::BatchNorm(b) => vec![b.gamma.as_slice(), b.beta.as_slice()],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    node_shapes: Vec<Vec<usize>>,
}

impl Network {
    /// Build and validate a network. `input_shape` excludes the batch axis:
    /// `[features]` or `[channels, height, width]`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let node_shapes = infer_node_shapes(&input_shape, &layers)?;
        Ok(Network {
            input_shape,
            layers,
            node_shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.node_shapes.last().expect("at least the input node")
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&Layer> {
        self.layers.get(index)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Per-sample shape of every node, `layers().len() + 1` entries.
    pub fn node_shapes(&self) -> &[Vec<usize>] {
        &self.node_shapes
    }

    /// Neurons (dense) or channels (conv) carried by node `index`.
    pub fn node_channels(&self, index: usize) -> usize {
        self.node_shapes[index][0]
    }

    pub fn node_count(&self) -> usize {
        self.node_shapes.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    /// All trainable parameters flattened layer by layer
    /// (weight/kernel, bias, gamma, beta).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            for s in layer.parameter_slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        let n = self.parameter_count();
        if values.len() != n {
            return Err(Error::shape("set_parameters", &[n], &[values.len()]));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for s in layer.parameter_slices_mut() {
                s.copy_from_slice(&values[offset..offset + s.len()]);
                offset += s.len();
            }
        }
        Ok(())
    }

    pub fn set_batchnorm_mode(&mut self, mode: BatchNormMode) {
        for layer in &mut self.layers {
            if let Layer::BatchNorm(bn) = layer {
                bn.mode = mode;
            }
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn activations(&self) -> impl Iterator<Item = &ActivationDescriptor> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Activation(a) => Some(a),
            _ => None,
        })
    }

    /// True when every activation is positively homogeneous and all its
    /// scales are positive, i.e. every scaled activation equals its base.
    pub fn activations_equal_base(&self) -> bool {
        self.activations()
            .all(|a| a.kind.is_positive_homogeneous() && a.scales.iter().all(|s| *s > 0.0))
    }

    /// Reset activation scales to one. Only allowed when that leaves the
    /// network function unchanged (see [`Network::activations_equal_base`]).
    pub fn normalize_activation_scales(&mut self) -> Result<()> {
        if !self.activations_equal_base() {
            return Err(Error::InvalidArgument(
                "activation scales can only be reset for positively homogeneous activations with positive scales"
                    .into(),
            ));
        }
        for layer in &mut self.layers {
            if let Layer::Activation(a) = layer {
                a.scales.iter_mut().for_each(|s| *s = 1.0);
            }
        }
        Ok(())
    }

    /// Fold the batch statistics recorded in a train-mode cache into the
    /// running mean/variance (unbiased variance, PyTorch-style update).
    pub fn update_running_stats(&mut self, cache: &ForwardCache, momentum: f64) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            if let (Layer::BatchNorm(bn), Some((mean, var, count))) = (layer, cache.batch_statistics(k)) {
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for c in 0..bn.features() {
                    bn.running_mean[c] = (1.0 - momentum) * bn.running_mean[c] + momentum * mean[c];
                    bn.running_var[c] = (1.0 - momentum) * bn.running_var[c] + momentum * var[c] * unbias;
                }
            }
        }
    }

    /// Same layer kinds, shapes and topology (parameters may differ).
    pub fn same_architecture(&self, other: &Network) -> bool {
        self.input_shape == other.input_shape
            && self.node_shapes == other.node_shapes
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| match (a, b) {
                (Layer::Dense(x), Layer::Dense(y)) => x.bias.is_some() == y.bias.is_some(),
                (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                    x.bias.is_some() == y.bias.is_some() && x.stride == y.stride && x.padding == y.padding
                }
                (Layer::BatchNorm(_), Layer::BatchNorm(_)) => true,
                (Layer::Activation(x), Layer::Activation(y)) => x.kind == y.kind,
                (Layer::Flatten, Layer::Flatten) => true,
                (Layer::ResidualAdd { source: s }, Layer::ResidualAdd { source: t }) => s == t,
                (Layer::Concat { sources: s }, Layer::Concat { sources: t }) => s == t,
                _ => false,
            })
    }
}

fn infer_node_shapes(input_shape: &[usize], layers: &[Layer]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Architecture(format!("invalid input shape {input_shape:?}")));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (k, layer) in layers.iter().enumerate() {
        let input = &shapes[k];
        let bad = |msg: String| Error::Architecture(format!("layer {k} ({}): {msg}", layer.kind_name()));
        let out = match layer {
            Layer::Dense(d) => {
                if d.weight.rank() != 2 {
                    return Err(bad("weight must be rank 2".into()));
                }
                if input.len() != 1 || input[0] != d.inputs() {
                    return Err(bad(format!("expects [{}] input, got {input:?}", d.inputs())));
                }
                if d.bias.as_ref().is_some_and(|b| b.len() != d.outputs()) {
                    return Err(bad("bias length differs from output count".into()));
                }
                vec![d.outputs()]
            }
            Layer::Conv2d(c) => {
                if c.kernel.rank() != 4 {
                    return Err(bad("kernel must be rank 4".into()));
                }
                if input.len() != 3 || input[0] != c.in_channels() {
                    return Err(bad(format!(
                        "expects [{}, H, W] input, got {input:?}",
                        c.in_channels()
                    )));
                }
                if c.bias.as_ref().is_some_and(|b| b.len() != c.out_channels()) {
                    return Err(bad("bias length differs from output channels".into()));
                }
                let (ho, wo) = c
                    .output_hw(input[1], input[2])
                    .ok_or_else(|| bad("kernel larger than padded input or zero stride".into()))?;
                vec![c.out_channels(), ho, wo]
            }
            Layer::BatchNorm(bn) => {
                let n = bn.features();
                if input[0] != n
                    || bn.beta.len() != n
                    || bn.running_mean.len() != n
                    || bn.running_var.len() != n
                {
                    return Err(bad(format!("parameter lengths must equal channel count {}", input[0])));
                }
                if bn.running_var.iter().any(|v| !(*v > 0.0)) {
                    return Err(bad("running variance must be strictly positive".into()));
                }
                if !(bn.eps > 0.0) {
                    return Err(bad("epsilon must be positive".into()));
                }
                input.clone()
            }
            Layer::Activation(a) => {
                if a.scales.len() != input[0] {
                    return Err(bad(format!(
                        "{} scales for {} channels",
                        a.scales.len(),
                        input[0]
                    )));
                }
                if a.scales.iter().any(|s| *s == 0.0 || !s.is_finite()) {
                    return Err(bad("activation scales must be finite and non-zero".into()));
                }
                input.clone()
            }
            Layer::Flatten => vec![input.iter().product()],
            Layer::ResidualAdd { source } => {
                if *source >= k {
                    return Err(bad(format!("skip source node {source} must precede node {k}")));
                }
                if shapes[*source] != *input {
                    return Err(bad(format!(
                        "skip source shape {:?} differs from input shape {input:?}",
                        shapes[*source]
                    )));
                }
                input.clone()
            }
            Layer::Concat { sources } => {
                if sources.is_empty() {
                    return Err(bad("needs at least one source".into()));
                }
                let first = sources[0];
                if sources.iter().any(|&s| s > k) {
                    return Err(bad("concat sources must precede the layer".into()));
                }
                let tail = shapes[first][1..].to_vec();
                let mut channels = 0;
                for &s in sources {
                    if shapes[s][1..] != tail[..] {
                        return Err(bad("concat sources disagree on trailing dimensions".into()));
                    }
                    channels += shapes[s][0];
                }
                let mut out = vec![channels];
                out.extend(tail);
                out
            }
        };
        shapes.push(out);
    }
    Ok(shapes)
}
