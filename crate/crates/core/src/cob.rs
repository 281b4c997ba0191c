//! Change-of-basis assignments.
//!
//! A [`ChangeOfBasis`] stores one vector per network node (see
//! [`crate::network`] for node numbering): one entry per feature of a flat
//! node, one per channel of an image node. Architectural constraints tie
//! entries together:
//!
//! 1. input and output nodes are fixed to 1 (bias neurons are implicit),
//! 2. both ends of a residual connection and its output share one vector,
//! 3. every spatial position of a feature map shares its channel's entry,
//!    so a flattened feature inherits the entry of its source channel,
//! 4. the input of a batch-norm layer is fixed to 1,
//! 5. a concat output is the concatenation of its sources' vectors.
//!
//! In addition an activation's input and output carry the same vector.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeOfBasis {
    nodes: Vec<Vec<f64>>,
}

impl ChangeOfBasis {
    pub fn identity(net: &Network) -> Self {
        ChangeOfBasis {
            nodes: (0..net.node_count()).map(|i| vec![1.0; net.node_channels(i)]).collect(),
        }
    }

    /// Wrap raw per-node vectors. No constraint is checked here; see
    /// [`validate_cob`].
    pub fn from_nodes(nodes: Vec<Vec<f64>>) -> Self {
        ChangeOfBasis { nodes }
    }

    pub fn nodes(&self) -> &[Vec<f64>] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> &[f64] {
        &self.nodes[index]
    }

    pub fn node_mut(&mut self, index: usize) -> &mut Vec<f64> {
        &mut self.nodes[index]
    }

    pub fn is_identity(&self) -> bool {
        self.nodes.iter().flatten().all(|&t| t == 1.0)
    }

    fn check_same_shape(&self, other: &ChangeOfBasis) -> Result<()> {
        let a: Vec<usize> = self.nodes.iter().map(Vec::len).collect();
        let b: Vec<usize> = other.nodes.iter().map(Vec::len).collect();
        if a != b {
            return Err(Error::shape("compose_cob", &a, &b));
        }
        Ok(())
    }

    /// Elementwise product; teleporting by `a` then `b` equals teleporting
    /// by `a.compose(&b)`.
    pub fn compose(&self, other: &ChangeOfBasis) -> Result<ChangeOfBasis> {
        self.check_same_shape(other)?;
        Ok(ChangeOfBasis {
            nodes: self
                .nodes
                .iter()
                .zip(&other.nodes)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
                .collect(),
        })
    }

    pub fn invert(&self) -> ChangeOfBasis {
        ChangeOfBasis {
            nodes: self
                .nodes
                .iter()
                .map(|v| v.iter().map(|t| 1.0 / t).collect())
                .collect(),
        }
    }
}

pub fn compose_cob(a: &ChangeOfBasis, b: &ChangeOfBasis) -> Result<ChangeOfBasis> {
    a.compose(b)
}

pub fn invert_cob(a: &ChangeOfBasis) -> ChangeOfBasis {
    a.invert()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CobKind {
    /// Entries uniform in `[1 - s, 1 + s]`.
    Intra,
    /// Entries uniform in `[1 - s, 1 + s]` with a random sign.
    Inter,
    /// Same distribution as `Intra`, meant for ranges close to zero.
    Micro,
}

impl CobKind {
    pub fn name(self) -> &'static str {
        match self {
            CobKind::Intra => "intra",
            CobKind::Inter => "inter",
            CobKind::Micro => "micro",
        }
    }
}

impl fmt::Display for CobKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CobKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(CobKind::Intra),
            "inter" => Ok(CobKind::Inter),
            "micro" => Ok(CobKind::Micro),
            _ => Err(Error::InvalidArgument(format!("unknown CoB kind '{s}' (intra, inter, micro)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CobSamplingSpec {
    pub kind: CobKind,
    /// Half-width of the sampling interval, strictly inside (0, 1).
    pub range: f64,
    pub seed: u64,
}

impl CobSamplingSpec {
    pub fn new(kind: CobKind, range: f64, seed: u64) -> Result<Self> {
        let spec = CobSamplingSpec { kind, range, seed };
        spec.check()?;
        Ok(spec)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        CobSamplingSpec { seed, ..self }
    }

    fn check(&self) -> Result<()> {
        if !(self.range > 0.0 && self.range < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "CoB range must lie strictly between 0 and 1, got {}",
                self.range
            )));
        }
        Ok(())
    }
}

/// Union-find over scalar neurons (one per node entry).
struct Classes {
    parent: Vec<usize>,
    pinned: Vec<bool>,
}

impl Classes {
    fn new(n: usize) -> Self {
        Classes {
            parent: (0..n).collect(),
            pinned: vec![false; n],
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.parent[hi] = lo;
            self.pinned[lo] |= self.pinned[hi];
        }
    }

    fn pin(&mut self, i: usize) {
        let r = self.find(i);
        self.pinned[r] = true;
    }
}

/// Spatial positions per channel of a node (1 for flat nodes).
fn spatial(net: &Network, node: usize) -> usize {
    net.node_shapes()[node][1..].iter().product()
}

fn equality_classes(net: &Network) -> (Classes, Vec<usize>) {
    let mut offsets = Vec::with_capacity(net.node_count() + 1);
    let mut total = 0;
    for i in 0..net.node_count() {
        offsets.push(total);
        total += net.node_channels(i);
    }
    offsets.push(total);
    let mut classes = Classes::new(total);
    let pin_node = |c: &mut Classes, node: usize| {
        for i in offsets[node]..offsets[node + 1] {
            c.pin(i);
        }
    };
    let unify_nodes = |c: &mut Classes, a: usize, b: usize| {
        for i in 0..net.node_channels(a) {
            c.union(offsets[a] + i, offsets[b] + i);
        }
    };
    pin_node(&mut classes, 0);
    pin_node(&mut classes, net.node_count() - 1);
    for (k, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense(_) | Layer::Conv2d(_) => {}
            Layer::BatchNorm(_) => pin_node(&mut classes, k),
            Layer::Activation(_) => unify_nodes(&mut classes, k, k + 1),
            Layer::Flatten => {
                let hw = spatial(net, k);
                for f in 0..net.node_channels(k + 1) {
                    classes.union(offsets[k + 1] + f, offsets[k] + f / hw);
                }
            }
            Layer::ResidualAdd { source } => {
                unify_nodes(&mut classes, k, *source);
                unify_nodes(&mut classes, k, k + 1);
            }
            Layer::Concat { sources } => {
                let mut at = offsets[k + 1];
                for &s in sources {
                    for i in 0..net.node_channels(s) {
                        classes.union(at + i, offsets[s] + i);
                    }
                    at += net.node_channels(s);
                }
            }
        }
    }
    (classes, offsets)
}

/// Draw a CoB that satisfies every architectural constraint by
/// construction: one value per equality class, classes touching a fixed
/// node get 1.
pub fn sample_cob(net: &Network, spec: &CobSamplingSpec) -> Result<ChangeOfBasis> {
    spec.check()?;
    let (mut classes, offsets) = equality_classes(net);
    let total = *offsets.last().expect("non-empty");
    let mut rng = rng::stream(spec.seed, rng::STREAM_COB);
    let s = spec.range;
    let mut value: Vec<Option<f64>> = vec![None; total];
    let mut flat = vec![0.0; total];
    for (i, slot) in flat.iter_mut().enumerate() {
        let r = classes.find(i);
        *slot = match value[r] {
            Some(v) => v,
            None => {
                let v = if classes.pinned[r] {
                    1.0
                } else {
                    let magnitude = rng.gen_range(1.0 - s..=1.0 + s);
                    match spec.kind {
                        CobKind::Inter if rng.gen_bool(0.5) => -magnitude,
                        _ => magnitude,
                    }
                };
                value[r] = Some(v);
                v
            }
        };
    }
    Ok(ChangeOfBasis {
        nodes: offsets.windows(2).map(|w| flat[w[0]..w[1]].to_vec()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CobRule {
    /// Entries must be finite and non-zero.
    NonZero,
    /// Input and output nodes are fixed to 1.
    Boundary,
    /// Residual endpoints share one vector.
    Residual,
    /// Flattened features inherit their channel's entry.
    FeatureMap,
    /// Batch-norm inputs are fixed to 1.
    BatchNorm,
    /// Concat output equals the concatenated source vectors.
    Concat,
    /// Activation input and output share one vector.
    ActivationLoop,
    /// Vector count or length does not match the network.
    Shape,
}

impl CobRule {
    /// Architectural condition number (1 to 5) where one applies.
    pub fn number(self) -> Option<u8> {
        match self {
            CobRule::Boundary => Some(1),
            CobRule::Residual => Some(2),
            CobRule::FeatureMap => Some(3),
            CobRule::BatchNorm => Some(4),
            CobRule::Concat => Some(5),
            CobRule::NonZero | CobRule::ActivationLoop | CobRule::Shape => None,
        }
    }

    fn describe(self) -> &'static str {
        match self {
            CobRule::NonZero => "non-zero",
            CobRule::Boundary => "boundary",
            CobRule::Residual => "residual",
            CobRule::FeatureMap => "feature map",
            CobRule::BatchNorm => "batch-norm input",
            CobRule::Concat => "concat",
            CobRule::ActivationLoop => "activation loop",
            CobRule::Shape => "shape",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CobViolation {
    pub rule: CobRule,
    pub node: usize,
    /// Layer whose constraint is broken, `None` for node-level rules on the
    /// input node.
    pub layer: Option<usize>,
    pub detail: String,
}

impl fmt::Display for CobViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rule.number() {
            Some(n) => write!(f, "rule {n} ({})", self.rule.describe())?,
            None => write!(f, "{} rule", self.rule.describe())?,
        }
        write!(f, " at node {}", self.node)?;
        if let Some(l) = self.layer {
            write!(f, " (layer {l})")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Every constraint violation of `cob` on `net`; empty means valid.
pub fn validate_cob(net: &Network, cob: &ChangeOfBasis) -> Vec<CobViolation> {
    let mut out = Vec::new();
    let layer_of = |node: usize| node.checked_sub(1);
    if cob.nodes.len() != net.node_count() {
        out.push(CobViolation {
            rule: CobRule::Shape,
            node: 0,
            layer: None,
            detail: format!("{} vectors for {} nodes", cob.nodes.len(), net.node_count()),
        });
        return out;
    }
    for (i, v) in cob.nodes.iter().enumerate() {
        if v.len() != net.node_channels(i) {
            out.push(CobViolation {
                rule: CobRule::Shape,
                node: i,
                layer: layer_of(i),
                detail: format!("length {} but node has {} channels", v.len(), net.node_channels(i)),
            });
        }
    }
    if !out.is_empty() {
        return out;
    }
    for (i, v) in cob.nodes.iter().enumerate() {
        if let Some(j) = v.iter().position(|t| *t == 0.0 || !t.is_finite()) {
            out.push(CobViolation {
                rule: CobRule::NonZero,
                node: i,
                layer: layer_of(i),
                detail: format!("entry {j} is {}", v[j]),
            });
        }
    }
    let last = net.node_count() - 1;
    for node in [0, last] {
        if let Some(j) = cob.nodes[node].iter().position(|t| *t != 1.0) {
            out.push(CobViolation {
                rule: CobRule::Boundary,
                node,
                layer: layer_of(node),
                detail: format!(
                    "{} entry {j} is {} instead of 1",
                    if node == 0 { "input" } else { "output" },
                    cob.nodes[node][j]
                ),
            });
        }
    }
    let mismatch = |a: &[f64], b: &[f64]| a.iter().zip(b).position(|(x, y)| x != y);
    for (k, layer) in net.layers().iter().enumerate() {
        let (input, output) = (&cob.nodes[k], &cob.nodes[k + 1]);
        let mut push = |rule, node, detail: String| {
            out.push(CobViolation {
                rule,
                node,
                layer: Some(k),
                detail,
            })
        };
        match layer {
            Layer::Dense(_) | Layer::Conv2d(_) => {}
            Layer::BatchNorm(_) => {
                if let Some(j) = input.iter().position(|t| *t != 1.0) {
                    push(CobRule::BatchNorm, k, format!("input entry {j} is {} instead of 1", input[j]));
                }
            }
            Layer::Activation(_) => {
                if let Some(j) = mismatch(input, output) {
                    push(
                        CobRule::ActivationLoop,
                        k + 1,
                        format!("entry {j}: input {} vs output {}", input[j], output[j]),
                    );
                }
            }
            Layer::Flatten => {
                let hw = spatial(net, k);
                if let Some(f) = (0..output.len()).find(|&f| output[f] != input[f / hw]) {
                    push(
                        CobRule::FeatureMap,
                        k + 1,
                        format!("feature {f} is {} but its channel {} has {}", output[f], f / hw, input[f / hw]),
                    );
                }
            }
            Layer::ResidualAdd { source } => {
                let src = &cob.nodes[*source];
                if let Some(j) = mismatch(input, src) {
                    push(
                        CobRule::Residual,
                        *source,
                        format!("entry {j}: skip source {} vs branch {}", src[j], input[j]),
                    );
                }
                if let Some(j) = mismatch(input, output) {
                    push(
                        CobRule::Residual,
                        k + 1,
                        format!("entry {j}: sum output {} vs branch {}", output[j], input[j]),
                    );
                }
            }
            Layer::Concat { sources } => {
                let expected: Vec<f64> = sources.iter().flat_map(|&s| cob.nodes[s].iter().copied()).collect();
                if let Some(j) = mismatch(&expected, output) {
                    push(
                        CobRule::Concat,
                        k + 1,
                        format!("entry {j} is {} but concatenated sources give {}", output[j], expected[j]),
                    );
                }
            }
        }
    }
    out
}

/// [`validate_cob`] as a `Result`.
pub fn check_cob(net: &Network, cob: &ChangeOfBasis) -> Result<()> {
    let violations = validate_cob(net, cob);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::CobViolations(violations))
    }
}
