pub mod arch;
pub mod atlasio;
pub mod cortexfield;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod tiling;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
