//! Differentiable primitives: the tape, parameter storage, neural blocks and
//! finite-difference checking.

pub mod blocks;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use params::{Param, ParameterStore};
pub use tape::{Gradients, Tape, Var};
