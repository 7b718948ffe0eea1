//! Tape-based reverse-mode autodiff with the layers, optimizer, and
//! gradient checker used by the speech-synthesis workspace.
//!
//! Kept deliberately small: dense `f64` matrices, a flat op tape, and
//! explicit layer structs that register weights by hierarchical name.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;

pub use tape::{Grads, Matrix, Tape, Var};
