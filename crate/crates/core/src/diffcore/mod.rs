//! Minimal reverse-mode differentiable array engine.
//!
//! Operations are recorded on a [`Graph`] as they execute. Each node owns its
//! value; `backward` replays the record in reverse and sums gradient
//! contributions from every consumer. Everything is `f64`.

mod array;
mod gradcheck;
mod graph;
mod ops;

pub use array::Array;
pub use gradcheck::{finite_diff_check, relative_error, GradReport, ParamCheck, REL_FLOOR};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{Mode, RunningStats, BN_EPS};

#[cfg(test)]
mod tests;
