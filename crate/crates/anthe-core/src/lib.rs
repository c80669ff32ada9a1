//! Anthe: a transformer with pre-attention gating, hierarchical soft
//! positional embeddings, and Tensor Chain factorized linear layers, built
//! on a small reverse-mode autodiff tape.
//!
//! The crate is organized bottom-up:
//!
//! - [`array`] / [`graph`]: dense arrays and the autodiff tape with the
//!   fixed op set every model component is written in.
//! - [`tc`]: Tensor Chain factorized linear layers (planning, implicit
//!   forward, materialization, SVD decomposition).
//! - [`attention`]: multi-head attention with the pre-attention gating
//!   family.
//! - [`hsoftpos`]: hierarchical soft positional embeddings.
//! - [`config`] / [`model`]: architecture configuration, parameter census,
//!   and model assembly.
//! - [`data`] / [`train`] / [`checkpoint`]: corpus handling, the training
//!   loop, and checkpoint serialization.

pub mod array;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod hsoftpos;
pub mod init;
pub mod model;
pub mod scalar;
pub mod tc;
pub mod train;

pub use array::Array;
pub use attention::{gate_streams, multi_head_attention, AttentionParams, GateKind, Projection};
pub use checkpoint::{load_model, save_model, Record};
pub use config::{preset, ArchConfig, EmbeddingKind, FfKind, TcPlanMap, PRESET_NAMES};
pub use data::{TokenBatch, TokenizerKind, Vocabulary};
pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use model::{forward, greedy_decode, loss, Mode, Model, ModelPlan, ParamCensus};
pub use scalar::Scalar;
pub use tc::{plan_factors, tc_forward, TcLinear, TcShapePlan};
pub use train::{evaluate, train_loop, Adam, EpochStats, TrainConfig, TrainReport};
