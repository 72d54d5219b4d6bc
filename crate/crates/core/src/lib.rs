//! Continuity and robustness of optimal control for diffusions under model approximation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod family;
pub mod generator;
pub mod grid;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod parabolic;
pub mod policy;
pub mod robustness;
pub mod stationary;
pub mod system;

pub use error::{Error, Result};
pub use grid::{Grid, ValueField};
pub use model::{ActionSet, DiffusionModel};
