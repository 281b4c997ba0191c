//! Binary network checkpoints.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "NTLP"  u32 version
//! u32 input rank, u32 dims...
//! u32 layer count
//! per layer: u8 tag, then the layer record
//! ```
//!
//! Float payloads are raw `f64` bit patterns, so a round trip is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{
    ActivationDescriptor, ActivationKind, BatchNorm, BatchNormMode, Conv2d, Dense, Layer, Network,
};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTLP";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_CONV: u8 = 2;
const TAG_BATCHNORM: u8 = 3;
const TAG_ACTIVATION: u8 = 4;
const TAG_FLATTEN: u8 = 5;
const TAG_RESIDUAL: u8 = 6;
const TAG_CONCAT: u8 = 7;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len());
        dims.iter().for_each(|&d| self.u32(d));
    }

    /// Length-prefixed float vector.
    fn floats(&mut self, v: &[f64]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }

    fn optional(&mut self, v: Option<&Vec<f64>>) {
        match v {
            Some(v) => {
                self.u8(1);
                self.floats(v);
            }
            None => self.u8(0),
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.dims(t.shape());
        t.data().iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("checkpoint truncated at byte {} (needed {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }

    fn float_count(&mut self, n: usize) -> Result<Vec<f64>> {
        // Bound the allocation by what the buffer can actually hold.
        if n > (self.bytes.len() - self.at) / 8 {
            return Err(Error::Format(format!("checkpoint truncated: {n} floats declared")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        self.float_count(n)
    }

    fn optional(&mut self) -> Result<Option<Vec<f64>>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.floats()?)),
            f => Err(Error::Format(format!("invalid presence flag {f}"))),
        }
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.dims()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let data = self.float_count(n)?;
        Tensor::new(shape, data).map_err(|e| Error::Format(format!("bad tensor record: {e}")))
    }
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.dims(net.input_shape());
    w.u32(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                w.u8(TAG_DENSE);
                w.tensor(&d.weight);
                w.optional(d.bias.as_ref());
            }
            Layer::Conv2d(c) => {
                w.u8(TAG_CONV);
                w.tensor(&c.kernel);
                w.optional(c.bias.as_ref());
                w.u32(c.stride);
                w.u32(c.padding);
            }
            Layer::BatchNorm(bn) => {
                w.u8(TAG_BATCHNORM);
                w.floats(&bn.gamma);
                w.floats(&bn.beta);
                w.floats(&bn.running_mean);
                w.floats(&bn.running_var);
                w.f64(bn.eps);
                w.u8(match bn.mode {
                    BatchNormMode::Train => 0,
                    BatchNormMode::Eval => 1,
                });
            }
            Layer::Activation(a) => {
                w.u8(TAG_ACTIVATION);
                w.u8(a.kind.tag());
                w.floats(&a.scales);
            }
            Layer::Flatten => w.u8(TAG_FLATTEN),
            Layer::ResidualAdd { source } => {
                w.u8(TAG_RESIDUAL);
                w.u32(*source);
            }
            Layer::Concat { sources } => {
                w.u8(TAG_CONCAT);
                w.dims(sources);
            }
        }
    }
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4).map_err(|_| Error::Format("file too short for a checkpoint header".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"NTLP\"")));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let input_shape = r.dims()?;
    let count = r.u32()?;
    let mut layers = Vec::new();
    for k in 0..count {
        let layer = match r.u8()? {
            TAG_DENSE => {
                let weight = r.tensor()?;
                Layer::Dense(Dense::new(weight, r.optional()?))
            }
            TAG_CONV => Layer::Conv2d(Conv2d {
                kernel: r.tensor()?,
                bias: r.optional()?,
                stride: r.u32()?,
                padding: r.u32()?,
            }),
            TAG_BATCHNORM => Layer::BatchNorm(BatchNorm {
                gamma: r.floats()?,
                beta: r.floats()?,
                running_mean: r.floats()?,
                running_var: r.floats()?,
                eps: r.f64()?,
                mode: match r.u8()? {
                    0 => BatchNormMode::Train,
                    1 => BatchNormMode::Eval,
                    m => return Err(Error::Format(format!("layer {k}: unknown batch-norm mode {m}"))),
                },
            }),
            TAG_ACTIVATION => {
                let tag = r.u8()?;
                let kind = ActivationKind::from_tag(tag)
                    .ok_or_else(|| Error::Format(format!("layer {k}: unknown activation tag {tag}")))?;
                Layer::Activation(
                    ActivationDescriptor::with_scales(kind, r.floats()?)
                        .map_err(|e| Error::Format(format!("layer {k}: {e}")))?,
                )
            }
            TAG_FLATTEN => Layer::Flatten,
            TAG_RESIDUAL => Layer::ResidualAdd { source: r.u32()? },
            TAG_CONCAT => Layer::Concat { sources: r.dims()? },
            t => return Err(Error::Format(format!("layer {k}: unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after the last layer", bytes.len() - r.at)));
    }
    Network::new(input_shape, layers).map_err(|e| Error::Format(format!("checkpoint describes an invalid network: {e}")))
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    from_bytes(&fs::read(path)?)
}
