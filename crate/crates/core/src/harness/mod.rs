//! Configuration, models, training, evaluation, ablations, and self-checks.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod model;
pub mod train;
pub mod verify;

pub use config::{Precision, RunConfig, Task, Variant};
pub use model::{Model, ModelSpec, Prediction};
