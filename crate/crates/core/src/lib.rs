pub mod anchors;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod gradcheck;
pub mod pointcloud;
pub mod renderer;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
