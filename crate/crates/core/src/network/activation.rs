//! Activation functions carrying one scale per neuron (or per channel).
//!
//! A scale `t` turns the base function `f` into `g(x) = t * f(x / t)`;
//! its derivative is `g'(x) = f'(x / t)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const ELU_ALPHA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Tanh,
    Elu,
    Linear,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 5] = [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::Tanh,
        ActivationKind::Elu,
        ActivationKind::Linear,
    ];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Elu => {
                if x > 0.0 {
                    x
                } else {
                    ELU_ALPHA * x.exp_m1()
                }
            }
            ActivationKind::Linear => x,
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            ActivationKind::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    ELU_ALPHA * x.exp()
                }
            }
            ActivationKind::Linear => 1.0,
        }
    }

    /// `f(c x) = c f(x)` for every `c > 0`.
    pub fn is_positive_homogeneous(self) -> bool {
        matches!(
            self,
            ActivationKind::Relu | ActivationKind::LeakyRelu | ActivationKind::Linear
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky-relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Elu => "elu",
            ActivationKind::Linear => "linear",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::LeakyRelu => 1,
            ActivationKind::Tanh => 2,
            ActivationKind::Elu => 3,
            ActivationKind::Linear => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown activation '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDescriptor {
    pub kind: ActivationKind,
    /// Cumulative change-of-basis product per neuron/channel.
    pub scales: Vec<f64>,
}

impl ActivationDescriptor {
    pub fn new(kind: ActivationKind, neurons: usize) -> Self {
        ActivationDescriptor {
            kind,
            scales: vec![1.0; neurons],
        }
    }

    pub fn with_scales(kind: ActivationKind, scales: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scales.iter().find(|s| **s == 0.0 || !s.is_finite()) {
            return Err(Error::InvalidCob(format!(
                "activation scale must be finite and non-zero, got {bad}"
            )));
        }
        Ok(ActivationDescriptor { kind, scales })
    }

    /// `(batch, channels, inner)` for a tensor laid out as
    /// `[batch, channels, ...]`, or a single rank-1 sample.
    fn layout(&self, z: &Tensor) -> Result<(usize, usize, usize)> {
        let s = z.shape();
        let (batch, channels, inner) = match s.len() {
            1 => (1, s[0], 1),
            _ => (s[0], s[1], s[2..].iter().product()),
        };
        if channels != self.scales.len() {
            return Err(Error::shape("activation", s, &[self.scales.len()]));
        }
        Ok((batch, channels, inner))
    }

    fn map_scaled(&self, z: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (batch, channels, inner) = self.layout(z)?;
        let mut out = z.clone();
        let data = out.data_mut();
        for b in 0..batch {
            for (c, &t) in self.scales.iter().enumerate().take(channels) {
                let start = (b * channels + c) * inner;
                for v in &mut data[start..start + inner] {
                    *v = f(*v, t);
                }
            }
        }
        Ok(out)
    }

    /// `t * f(z / t)` per neuron.
    pub fn eval(&self, z: &Tensor) -> Result<Tensor> {
        let kind = self.kind;
        self.map_scaled(z, |x, t| t * kind.apply(x / t))
    }

    /// `f'(z / t)` per neuron; there is no outer factor of `t`.
    pub fn derivative(&self, z: &Tensor) -> Result<Tensor> {
        let kind = self.kind;
        self.map_scaled(z, |x, t| kind.derivative(x / t))
    }
}
