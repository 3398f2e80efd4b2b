//! Depth completion from sparse depth and RGB with co-attention graph
//! propagation over observed pixels and symmetric gated fusion.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod harness;
pub mod io;
pub mod network;
pub mod parallel;
pub mod propagation;

pub use error::{Error, Result};
