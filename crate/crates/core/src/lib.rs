//! Sleep-stage classification with demographic subgroup fine-tuning.

pub mod data;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod seed;
pub mod stratify;
pub mod train;

pub use autodiff;
