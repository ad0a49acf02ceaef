pub mod analysis;
pub mod budget;
pub mod compress;
pub mod distill;
pub mod bundle_io;
pub mod factorize;
pub mod hybrid;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod svd;
pub mod task;
pub mod tensor;
pub mod train;

pub use tensor::{DenseMatrix, Group, ParamBundle};
