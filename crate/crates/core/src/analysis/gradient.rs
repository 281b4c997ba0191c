use crate::cob::{check_cob, ChangeOfBasis};
use crate::error::{Error, Result};
use crate::network::{backward, forward, Layer, LayerGradient, LossKind, Network, Target};
use crate::teleport::teleport;
use crate::tensor::Tensor;

fn check_alignment(net: &Network, grads: &crate::network::GradientSet, cob: &ChangeOfBasis) -> Result<()> {
    if grads.layers.len() != net.layers().len() {
        return Err(Error::shape(
            "teleported gradient",
            &[net.layers().len()],
            &[grads.layers.len()],
        ));
    }
    check_cob(net, cob)
}

/// Gradient of the teleported network computed from the original one:
/// `dV = dW * t_in / t_out` per weight, bias and batch-norm gradients
/// divided by `t_out`, node gradients divided by the node's CoB.
pub fn analytic_teleported_gradient(
    net: &Network,
    grads: &crate::network::GradientSet,
    cob: &ChangeOfBasis,
) -> Result<crate::network::GradientSet> {
    check_alignment(net, grads, cob)?;
    let mut out = grads.clone();
    for (k, (layer, g)) in net.layers().iter().zip(out.layers.iter_mut()).enumerate() {
        let (t_in, t_out) = (cob.node(k), cob.node(k + 1));
        let inv_out: Vec<f64> = t_out.iter().map(|t| 1.0 / t).collect();
        let scale_bias = |b: &mut Option<Vec<f64>>| {
            if let Some(b) = b {
                b.iter_mut().zip(t_out).for_each(|(b, t)| *b /= t);
            }
        };
        match (layer, g) {
            (Layer::Dense(_), LayerGradient::Dense { weight, bias }) => {
                *weight = weight.bullet_scale(Some(&inv_out), Some(t_in))?;
                scale_bias(bias);
            }
            (Layer::Conv2d(_), LayerGradient::Conv2d { kernel, bias }) => {
                let shape = kernel.shape().to_vec();
                let taps = shape[2] * shape[3];
                let mut data = kernel.data().to_vec();
                for (o, t_o) in t_out.iter().enumerate() {
                    for (i, t_i) in t_in.iter().enumerate() {
                        let r = t_i / t_o;
                        let s = (o * shape[1] + i) * taps;
                        data[s..s + taps].iter_mut().for_each(|v| *v *= r);
                    }
                }
                *kernel = Tensor::new(shape, data)?;
                scale_bias(bias);
            }
            (Layer::BatchNorm(_), LayerGradient::BatchNorm { gamma, beta }) => {
                gamma.iter_mut().zip(t_out).for_each(|(g, t)| *g /= t);
                beta.iter_mut().zip(t_out).for_each(|(b, t)| *b /= t);
            }
            (_, LayerGradient::None) if layer.parameter_count() == 0 => {}
            (layer, _) => {
                return Err(Error::Architecture(format!(
                    "gradient for layer {k} does not match a {} layer",
                    layer.kind_name()
                )))
            }
        }
    }
    if out.nodes.len() == net.node_count() {
        for (i, node) in out.nodes.iter_mut().enumerate() {
            let tau = cob.node(i);
            let channels = tau.len();
            let inner: usize = net.node_shapes()[i][1..].iter().product();
            let mut data = node.data().to_vec();
            for (j, v) in data.iter_mut().enumerate() {
                *v /= tau[(j / inner) % channels];
            }
            *node = Tensor::new(node.shape().to_vec(), data)?;
        }
    }
    Ok(out)
}

/// `sqrt(sum (dW_ij * t_j / t_i)^2)` over every parameter gradient, without
/// materializing the rescaled gradient.
pub fn gradient_magnitude_teleported(
    net: &Network,
    grads: &crate::network::GradientSet,
    cob: &ChangeOfBasis,
) -> Result<f64> {
    check_alignment(net, grads, cob)?;
    let mut sum = 0.0;
    for (k, g) in grads.layers.iter().enumerate() {
        let (t_in, t_out) = (cob.node(k), cob.node(k + 1));
        let bias_sum = |b: &Option<Vec<f64>>| {
            b.as_ref()
                .map_or(0.0, |b| b.iter().zip(t_out).map(|(b, t)| (b / t).powi(2)).sum::<f64>())
        };
        match g {
            LayerGradient::None => {}
            LayerGradient::Dense { weight, bias } => {
                let cols = weight.shape()[1];
                for (idx, w) in weight.data().iter().enumerate() {
                    let (i, j) = (idx / cols, idx % cols);
                    sum += (w * t_in[j] / t_out[i]).powi(2);
                }
                sum += bias_sum(bias);
            }
            LayerGradient::Conv2d { kernel, bias } => {
                let s = kernel.shape();
                let taps = s[2] * s[3];
                for (idx, w) in kernel.data().iter().enumerate() {
                    let (o, i) = (idx / (s[1] * taps), (idx / taps) % s[1]);
                    sum += (w * t_in[i] / t_out[o]).powi(2);
                }
                sum += bias_sum(bias);
            }
            LayerGradient::BatchNorm { gamma, beta } => {
                for (c, t) in t_out.iter().enumerate() {
                    sum += (gamma[c] / t).powi(2) + (beta[c] / t).powi(2);
                }
            }
        }
    }
    Ok(sum.sqrt())
}

/// `E[t_a^2 / t_b^2]` for independent `t_a, t_b ~ U[1 - s, 1 + s]`.
pub fn expected_squared_ratio(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma < 1.0) {
        return Err(Error::InvalidArgument(format!("CoB range must lie in (0, 1), got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok((s2 + 3.0) / (3.0 * (1.0 - s2)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `| ||dW||/||W|| - ||dV||/||V|| |` with both gradients back-propagated on
/// the same batch.
pub fn normalized_gradient_gap(
    net: &Network,
    cob: &ChangeOfBasis,
    x: &Tensor,
    target: &Target,
    kind: LossKind,
) -> Result<f64> {
    let (v, _) = teleport(net, cob)?;
    let dw = backward(net, &forward(net, x)?, target, kind)?;
    let dv = backward(&v, &forward(&v, x)?, target, kind)?;
    Ok((dw.norm() / norm(&net.parameters()) - dv.norm() / norm(&v.parameters())).abs())
}
