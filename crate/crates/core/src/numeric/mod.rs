//! Dense tensors, a reverse-mode computation record, parameter storage and a
//! finite-difference gradient verifier.

mod gemm;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
