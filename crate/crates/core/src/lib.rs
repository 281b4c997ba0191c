//! Function-preserving reparameterization ("teleportation") of small
//! feedforward networks, with the numerical tooling to study it.
//!
//! Networks are built from [`network::Layer`]s, trained with
//! [`trainer::train`], and teleported by a [`cob::ChangeOfBasis`] through
//! [`teleport::teleport`]. The [`analysis`] module measures what a
//! teleportation does to gradients and to the loss landscape, and
//! [`experiments`] wires everything to CSV-producing runs.

pub mod analysis;
pub mod checkpoint;
pub mod cob;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod network;
pub mod rng;
pub mod teleport;
pub mod tensor;
pub mod trainer;

pub use cob::{sample_cob, validate_cob, ChangeOfBasis, CobKind, CobSamplingSpec};
pub use error::{Error, Result};
pub use network::{Network, Preset};
pub use teleport::{micro_teleport, pseudo_teleport, teleport};
pub use tensor::Tensor;
