//! Random pruning for static sparse training.
//!
//! The pipeline is `arch` (network description) → `alloc` (layer-wise
//! densities) → `mask` (seeded random positions) → `engine` (masked training,
//! saliency scores) → `eval` (metrics).

pub mod alloc;
pub mod arch;
pub mod engine;
pub mod eval;
pub mod mask;
pub mod rng;

pub use alloc::{Method, SparsityPlan};
pub use arch::{LayerKind, LayerSpec, NetworkSpec, Pool};
pub use engine::{Batch, ParamState, TrainConfig};
pub use eval::{AttackConfig, MetricsRecord};
pub use mask::{Mask, MaskMode};
