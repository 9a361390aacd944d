//! Minimal numeric kernel: dense f64 matrices, a reverse-mode tape over a
//! closed primitive set, SGD/Adam, a finite-difference gradient checker, and
//! a binary checkpoint format.
//!
//! Everything is 64-bit and single-threaded by design: the models here are
//! tiny and bit-reproducibility matters more than speed.

mod checkpoint;
mod gradcheck;
mod matrix;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, BlockCheck, GradCheckReport};
pub use matrix::Matrix;
pub use optim::{Adam, AdamConfig, Sgd};
pub use tape::{Tape, VarId};
