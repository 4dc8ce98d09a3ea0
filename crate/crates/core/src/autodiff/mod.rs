//! Reverse-mode automatic differentiation and finite-difference checking.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport, ParamAccess};
pub use tape::{BatchStats, Gradients, NormStats, ParamKey, Tape, Var};
