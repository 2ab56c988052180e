//! Reverse-mode automatic differentiation and the neural primitives built
//! on it.

mod gradcheck;
pub mod nn;
mod tape;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use tape::{NodeId, Tape};
