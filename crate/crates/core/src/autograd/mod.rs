//! Reverse-mode gradients for the Cross-D pipeline.

pub mod gradcheck;
pub mod tape;
pub mod vjp;

pub use gradcheck::{
    adjoint_checks, grad_check, relative_error, AdjointCheck, GradCheckConfig, GradReport,
    ParamReport,
};
pub use tape::{CrossdVars, Gradients, Tape, Var, VjpFault};
pub use vjp::*;
