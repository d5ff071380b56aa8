//! Minimal reverse-mode gradient engine, AdamW, finite-difference
//! checking, and checkpoint I/O. Everything runs in f64.

mod adamw;
mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, ParamStore, Parameter};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::grad_check;
pub use tape::{stable_sigmoid, Gradients, NodeId, Tape};
pub use tensor::{NnError, Tensor};
