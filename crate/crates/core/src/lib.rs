//! Pixel-wise explanations for small feedforward networks by layer-wise
//! relevance propagation, together with the numerical checks and
//! evaluation measures that go with it.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the command
//! line tool and anything else touching the OS live in the `relprop` crate.

#![no_std]

extern crate alloc;

pub mod engine;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod model;
pub mod render;
pub mod rules;
pub mod taylor;
pub mod tensor;

pub use engine::{forward, forward_traced, gradient, ActivationTrace};
pub use error::{Error, Result};
pub use model::{Conv2D, Dense, Layer, Metadata, Model, Pool2D};
pub use rules::{explain, linear_decompose, propagate, sensitivity_map, RelevanceMap, Rule, RuleConfig};
pub use tensor::Tensor;
