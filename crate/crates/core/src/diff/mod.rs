//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] records one forward pass. Values are immutable once recorded;
//! [`Graph::backward`] walks the tape in reverse and returns adjoints for every
//! node that depends on a [`Graph::param`] leaf. Adjoints from fan-out are
//! summed.

mod check;
mod graph;

pub use check::{grad_check, GradCheck};
pub use graph::{Gradients, Graph, Var};

pub(crate) use graph::softmax_in_place;
