//! Dense arrays, a reverse-mode tape, and a finite-difference oracle.

mod array;
mod gradcheck;
mod tape;

pub use array::DenseArray;
pub use gradcheck::{finite_difference_gradient, max_relative_discrepancy};
pub use tape::{Gradients, NodeId, OpKind, Tape};
