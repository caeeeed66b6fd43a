//! Lightweight instance-segmentation network: building blocks, a
//! declarative architecture builder, parameter/FLOP audit and a small
//! training harness.
//!
//! Tensors are `f64` `[batch, channels, height, width]` arrays. Gradients come
//! from a recorded [`tape::Tape`].

pub mod audit;
pub mod blocks;
pub mod network;
pub mod ops;
pub mod params;
pub mod tape;
pub mod train;

pub use audit::{audit, audit_flops, audit_parameters, AuditReport, AuditRow};
pub use network::{build_network, LayerKind, LayerSpec, Network, NetworkConfig};
pub use params::{ParamId, ParamKind, ParamStore};
pub use tape::{Tape, Tensor, Var};
pub use train::{LossParts, TrainConfig, TrainInstance, TrainSample, Trainer};
