#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;

pub mod autodiff;
pub mod eigen;
pub mod error;
pub mod graph;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use autodiff::{FlopReport, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{FlopCounter, Tensor};
