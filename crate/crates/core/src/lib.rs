//! Point-cloud correspondence with a transformer encoder whose attention
//! heads can be fixed Gaussian kernels over within-shape distances.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
