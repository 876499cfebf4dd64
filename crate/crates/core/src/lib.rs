#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::needless_range_loop,
    clippy::large_enum_variant
)]

pub mod autodiff;
pub mod error;
pub mod featurize;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod noise;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
