//! Class-incremental segmentation: a multi-headed U-Net extended one head
//! per dataset, with soft-target distillation and confidence-ranked,
//! coverage-pruned exemplar replay.

pub mod checkpoint;
pub mod confidence;
pub mod coverage;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod layers;
pub mod losses;
pub mod network;
pub mod optim;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{BodySpec, HeadSpec, Mode, Network};
pub use tensor::Tensor;
