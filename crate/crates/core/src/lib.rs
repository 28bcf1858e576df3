//! Multimodal multiple-instance learning over bags of patch features.
//!
//! A bag's instances are projected, tagged with a sinusoidal encoding of
//! their grid position, routed to morphology-anchored and free experts,
//! aligned with a text embedding, pooled and scored for classification or
//! survival. Every stage has an explicit backward pass that is verified
//! against finite differences.

pub mod checkpoint;
pub mod error;
pub mod hcma;
pub mod heads;
pub mod maps;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod priors;
pub mod rng;
pub mod spe;
pub mod synthdata;
pub mod trainer;

pub use error::{HpdpError, Result};
pub use numerics::Matrix;
