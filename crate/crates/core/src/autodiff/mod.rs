//! Reverse-mode automatic differentiation and its finite-difference check.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, rel_error, GradCheckConfig, GradCheckReport, GradFailure};
pub use tape::{Gradients, NodeId, Tape};
