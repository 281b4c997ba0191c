use super::{BatchNorm, BatchNormMode};

/// Per-channel statistics saved by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchNormState {
    pub mode: BatchNormMode,
    pub mean: Vec<f64>,
    /// Biased variance in train mode, running variance in eval mode.
    pub var: Vec<f64>,
    pub x_hat: Vec<f64>,
    /// Values reduced per channel (`batch * spatial`).
    pub count: usize,
}

/// `data` is laid out as `[batch, channels, inner]`.
pub(crate) fn forward(
    bn: &BatchNorm,
    data: &[f64],
    batch: usize,
    inner: usize,
) -> (Vec<f64>, BatchNormState) {
    let channels = bn.features();
    let count = batch * inner;
    let (mean, var) = match bn.mode {
        BatchNormMode::Train => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for b in 0..batch {
                    s += data[(b * channels + c) * inner..][..inner].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut v = 0.0;
                for b in 0..batch {
                    for x in &data[(b * channels + c) * inner..][..inner] {
                        v += (x - m) * (x - m);
                    }
                }
                mean[c] = m;
                var[c] = v / count as f64;
            }
            (mean, var)
        }
        BatchNormMode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let mut x_hat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        for c in 0..channels {
            let inv = 1.0 / (var[c] + bn.eps).sqrt();
            let start = (b * channels + c) * inner;
            for i in start..start + inner {
                x_hat[i] = (data[i] - mean[c]) * inv;
                out[i] = bn.gamma[c] * x_hat[i] + bn.beta[c];
            }
        }
    }
    let state = BatchNormState {
        mode: bn.mode,
        mean,
        var,
        x_hat,
        count,
    };
    (out, state)
}

pub(crate) struct BatchNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub input: Vec<f64>,
}

/// Train mode differentiates through the batch mean and variance.
pub(crate) fn backward(
    bn: &BatchNorm,
    state: &BatchNormState,
    d_out: &[f64],
    batch: usize,
    inner: usize,
) -> BatchNormGrads {
    let channels = bn.features();
    let mut d_gamma = vec![0.0; channels];
    let mut d_beta = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let start = (b * channels + c) * inner;
            for i in start..start + inner {
                d_gamma[c] += d_out[i] * state.x_hat[i];
                d_beta[c] += d_out[i];
            }
        }
    }
    let mut d_in = vec![0.0; d_out.len()];
    let n = state.count as f64;
    for c in 0..channels {
        let inv = 1.0 / (state.var[c] + bn.eps).sqrt();
        for b in 0..batch {
            let start = (b * channels + c) * inner;
            for i in start..start + inner {
                d_in[i] = match state.mode {
                    BatchNormMode::Eval => d_out[i] * bn.gamma[c] * inv,
                    BatchNormMode::Train => {
                        bn.gamma[c] * inv / n
                            * (n * d_out[i] - d_beta[c] - state.x_hat[i] * d_gamma[c])
                    }
                };
            }
        }
    }
    BatchNormGrads {
        gamma: d_gamma,
        beta: d_beta,
        input: d_in,
    }
}
