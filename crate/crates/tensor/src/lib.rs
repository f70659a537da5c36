//! Dense CPU tensors with tape-based reverse-mode automatic differentiation.
//!
//! The crate is deliberately small: row-major [`Tensor`]s of `f32` or `f64`,
//! a [`Graph`] that records operations for one forward/backward pass, a
//! [`ParamStore`] of named trainable tensors, and the training utilities that
//! operate on it ([`Adam`], [`clip_grad_norm`], [`Ema`]). Parameters and EMA
//! shadows persist through the [`Checkpoint`] format.

pub mod checkpoint;
pub mod element;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::{AnyTensor, Checkpoint, CheckpointElement, CheckpointError};
pub use element::{DType, Element};
pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use ops::downsample_mask;
pub use optim::{clip_grad_norm, Adam, AdamConfig, Ema, LrSchedule};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{Result, Tensor, TensorError};
