//! Reverse-mode differentiation, feed-forward networks and Adam.

mod adam;
mod mlp;
mod params;
mod tape;

pub use adam::AdamState;
pub use mlp::{mlp_forward, Activation, MlpLayout};
pub use params::{ParamVector, Segment};
pub use tape::{grad_scalar, Tape, Var};
