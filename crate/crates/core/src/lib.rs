//! Context-driven dynamic pruning for a toy encoder-decoder transformer.
//!
//! Gate predictors decide, per input, which attention / convolutional-gating /
//! feed-forward modules run. Utterance-wise gating ([`gates::GlobalGatePredictor`])
//! emits one decision per module; layer-local gating ([`gates::LocalGatePredictor`])
//! attends over an accumulating memory of external context and earlier layer
//! inputs to emit per-frame (or per-token) decisions.

pub mod analysis;
pub mod context;
pub mod error;
pub mod exec;
pub mod flops;
pub mod gates;
pub mod model;
pub mod tensor;
pub mod train;

pub use context::{ContextBundle, ContextConfig, StreamKind, SyntheticUtterance};
pub use error::{Error, Result};
pub use exec::ExecMode;
pub use gates::{GateSet, ModuleGate};
pub use model::{Model, ModelConfig, ModuleKind, PrunableModuleSpec, Stage};
pub use tensor::{RngState, Tensor};
