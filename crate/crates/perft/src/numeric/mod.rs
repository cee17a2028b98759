//! Deterministic dense linear algebra with reverse-mode differentiation.

mod grad_check;
mod io;
mod matrix;
mod rng;

pub use grad_check::{grad_check, GradCheckReport};
pub use io::{read_matrix, write_matrix};
pub use matrix::{sigmoid, softmax, top_k, Matrix};
pub use rng::{init_matrix, InitScheme, Rng};
