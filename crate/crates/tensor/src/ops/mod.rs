//! Differentiable operations, implemented as methods on [`Graph`](crate::Graph).
//!
//! Convolutions use the cross-correlation convention (no kernel flip).

pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod pool;
pub mod shape;
