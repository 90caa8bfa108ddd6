// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod hvs;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod raster;
pub mod seeding;
pub mod synth;
pub mod tensor;
pub mod tensor_file;

pub use error::{Error, Result};
pub use tensor::Tensor;
