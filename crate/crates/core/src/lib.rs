//! Multi-task meta learning on a small reverse-mode autodiff engine.
//!
//! The crate covers the whole training stack: tensors and gradients
//! ([`tensor`]), the synthetic heterogeneous tasks ([`tasks`]), the shared
//! trunk / per-task head network ([`network`]), losses and metrics
//! ([`objectives`]), power-set episode construction ([`episodes`]),
//! optimizers ([`optim`]), the bi-level meta step ([`meta`]) and the learning
//! paradigms with early stopping ([`train`]).

pub mod episodes;
pub mod error;
pub mod meta;
pub mod network;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
