//! Desk-scale ReLU MLP lab: model, synthetic data and the monitored trainer.

mod data;
mod model;
mod train;

pub use data::*;
pub use model::*;
pub use train::*;
