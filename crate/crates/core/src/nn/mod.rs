//! Numeric foundation: arrays, recorded ops with reverse passes, AdamW,
//! finite-difference checking and checkpoint files.

pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tape::{Axis, Gradients, Tape, Var};
