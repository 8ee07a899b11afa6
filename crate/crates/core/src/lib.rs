//! Multi-scale spatial-temporal recurrent network (MSSTRN) for traffic flow
//! forecasting: adaptive position graph generation, node-adaptive Chebyshev
//! graph convolution, spatial-temporal synchronous attention, single- and
//! multi-step GRU stacks, plus the data pipeline and training loop needed to
//! fit and evaluate the model on CPU.

pub mod error;
pub mod tensor;
pub mod tape;
pub mod params;
pub mod gradcheck;
pub mod graphgen;
pub mod graphconv;
pub mod attention;
pub mod recurrent;
pub mod model;
pub mod data;
pub mod train;

pub use error::{Error, Result};
pub use tensor::DenseArray;
