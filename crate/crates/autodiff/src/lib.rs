//! A small reverse-mode differentiation engine in 64-bit floats.
//!
//! Graphs are rebuilt per example (define-by-run). Parameters live in a
//! [`ParamStore`] shared read-only by any number of graphs; each graph's
//! gradients are folded into a [`Gradients`] buffer and applied by an
//! optimizer between steps.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use nn::{gru_cell, gru_sequence, GruWeights, Linear};
pub use optim::Adam;
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
