//! Rehearsal-free class-incremental learning for spiking transformers.
//!
//! The system trains a small spiking-transformer feature extractor once, then
//! adapts to each new task by learning only a per-task classifier head and
//! per-channel firing thresholds for the DTLIF neurons, with a gating MLP
//! routing test samples to the right task head at inference time.

pub mod backbone;
pub mod cil;
pub mod data;
pub mod dtlif;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod router;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{BnMode, NodeId, SurrogateKind, SurrogateSpec, Tape};
pub use tensor::Tensor;
