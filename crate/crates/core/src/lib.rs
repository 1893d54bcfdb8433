//! Incremental sequence encoding with linear-attention transformer encoders.

pub mod data;
pub mod incremental;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
