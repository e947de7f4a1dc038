//! Low-rank gradient projection onto columns of a fixed orthogonal (DCT)
//! basis, and the DCT-AdamW optimizer built on it.

pub mod analysis;
pub mod checkpoint;
pub mod efq;
pub mod error;
pub mod harness;
pub mod optimizer;
pub mod projector;
pub mod rng;
pub mod transform;

pub use efq::{EfMode, ErrorFeedback, QuantBuffer};
pub use error::{Error, Result};
pub use optimizer::{adamw_reference_step, AdamMoments, AdamParams, DctAdamW, Hyper, LayerState, Rotation, StepInfo};
pub use projector::{NormMode, Projection, ProjectorKind, Selection, Side};
pub use transform::{BasisKind, BasisRegistry, OrthoBasis};

pub use nalgebra::DMatrix;
