//! Discontinuous Galerkin neural operators for spatially varying defocus
//! deblurring, with the synthetic data, training and evaluation around them.

pub mod checkpoint;
pub mod dataset;
pub mod dg;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod image_io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod partition;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use partition::{BoundaryCondition, ElementPartition, Neighbor, NeighborMap, Side};
pub use tape::{Activation, Gradients, NodeId, Tape};
pub use tensor::Tensor;
