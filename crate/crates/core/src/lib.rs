//! Permanent random connectome channel-pooling networks.

pub mod alloc_track;
pub mod arch;
pub mod checkpoint;
pub mod connectome;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod invariance;
pub mod layers;
pub mod linalg;
pub mod mnist;
pub mod model;
pub mod optim;
pub mod pool_kernel;
pub mod prcn_layer;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
