//! Dense kernels with hand-written backward passes, the parameter store and
//! a central-difference gradient checker.
//!
//! Everything is computed in `f64` with a fixed, sequential reduction order,
//! so identical inputs produce bit-identical outputs.

mod fd;
mod kernels;
mod params;

pub use fd::{fd_check, FdCoverage};
pub use kernels::*;
pub use params::{Grads, LoraLink, ParamEntry, ParamId, ParamStore, Tensor};
