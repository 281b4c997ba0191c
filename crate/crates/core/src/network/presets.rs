use std::fmt;
use std::str::FromStr;

use super::{ActivationDescriptor, ActivationKind, BatchNorm, Conv2d, Dense, Layer, Network};
use crate::error::{Error, Result};

/// Channels used by the convolutional presets.
pub const CONV_CHANNELS: usize = 8;

/// Named architectures. All parameters start at zero (batch-norm at
/// gamma = 1, beta = 0); use [`crate::trainer::initialize`] to draw weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Five hidden layers of 500 ReLU units.
    Mlp,
    /// Two hidden layers of 128 ReLU units.
    MlpSmall,
    /// Two Conv-BN-ReLU blocks followed by a dense classifier.
    SmallConvNet,
    /// Conv-BN-ReLU stem, two identity residual blocks, dense classifier.
    SmallResNet,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Mlp, Preset::MlpSmall, Preset::SmallConvNet, Preset::SmallResNet];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Mlp => "mlp",
            Preset::MlpSmall => "mlp-s",
            Preset::SmallConvNet => "small-convnet",
            Preset::SmallResNet => "small-resnet",
        }
    }

    pub fn build(self, input_shape: &[usize], classes: usize) -> Result<Network> {
        self.build_with(input_shape, classes, ActivationKind::Relu)
    }

    pub fn build_with(self, input_shape: &[usize], classes: usize, activation: ActivationKind) -> Result<Network> {
        match self {
            Preset::Mlp => mlp(input_shape, &[500; 5], classes, activation),
            Preset::MlpSmall => mlp(input_shape, &[128, 128], classes, activation),
            Preset::SmallConvNet => small_convnet(input_shape, classes, activation),
            Preset::SmallResNet => small_resnet(input_shape, classes, activation),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model preset '{s}'")))
    }
}

/// Dense network with the given hidden widths. Inputs of rank > 1 are
/// flattened first.
pub fn mlp(input_shape: &[usize], hidden: &[usize], classes: usize, activation: ActivationKind) -> Result<Network> {
    let mut layers = Vec::new();
    if input_shape.len() > 1 {
        layers.push(Layer::Flatten);
    }
    let mut width: usize = input_shape.iter().product();
    for &h in hidden {
        layers.push(Layer::Dense(Dense::zeros(width, h, true)));
        layers.push(Layer::Activation(ActivationDescriptor::new(activation, h)));
        width = h;
    }
    layers.push(Layer::Dense(Dense::zeros(width, classes, true)));
    Network::new(input_shape.to_vec(), layers)
}

fn conv_block(layers: &mut Vec<Layer>, in_c: usize, out_c: usize, activation: ActivationKind) {
    layers.push(Layer::Conv2d(Conv2d::same(in_c, out_c, 3, false)));
    layers.push(Layer::BatchNorm(BatchNorm::new(out_c)));
    layers.push(Layer::Activation(ActivationDescriptor::new(activation, out_c)));
}

fn image_dims(input_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match input_shape {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::Architecture(format!(
            "convolutional presets need a [channels, height, width] input, got {s:?}"
        ))),
    }
}

fn small_convnet(input_shape: &[usize], classes: usize, activation: ActivationKind) -> Result<Network> {
    let (c, h, w) = image_dims(input_shape)?;
    let mut layers = Vec::new();
    conv_block(&mut layers, c, CONV_CHANNELS, activation);
    conv_block(&mut layers, CONV_CHANNELS, CONV_CHANNELS, activation);
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense(Dense::zeros(CONV_CHANNELS * h * w, classes, true)));
    Network::new(input_shape.to_vec(), layers)
}

fn small_resnet(input_shape: &[usize], classes: usize, activation: ActivationKind) -> Result<Network> {
    let (c, h, w) = image_dims(input_shape)?;
    let mut layers = Vec::new();
    conv_block(&mut layers, c, CONV_CHANNELS, activation);
    for _ in 0..2 {
        // Node index of the block input (the previous block's output).
        let skip = layers.len();
        conv_block(&mut layers, CONV_CHANNELS, CONV_CHANNELS, activation);
        layers.push(Layer::Conv2d(Conv2d::same(CONV_CHANNELS, CONV_CHANNELS, 3, false)));
        layers.push(Layer::BatchNorm(BatchNorm::new(CONV_CHANNELS)));
        layers.push(Layer::ResidualAdd { source: skip });
        layers.push(Layer::Activation(ActivationDescriptor::new(activation, CONV_CHANNELS)));
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense(Dense::zeros(CONV_CHANNELS * h * w, classes, true)));
    Network::new(input_shape.to_vec(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("vgg".parse::<Preset>().is_err());
    }

    #[test]
    fn mlp_small_layout() {
        let net = Preset::MlpSmall.build(&[1, 28, 28], 10).unwrap();
        assert_eq!(net.layers().len(), 6);
        assert_eq!(net.parameter_count(), 784 * 128 + 128 + 128 * 128 + 128 + 128 * 10 + 10);
    }

    #[test]
    fn resnet_skips_are_identity_shaped() {
        let net = Preset::SmallResNet.build(&[1, 6, 6], 3).unwrap();
        let skips: Vec<usize> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::ResidualAdd { source } => Some(*source),
                _ => None,
            })
            .collect();
        assert_eq!(skips, vec![3, 10]);
    }

    #[test]
    fn conv_presets_need_images() {
        assert!(Preset::SmallConvNet.build(&[10], 2).is_err());
    }
}
