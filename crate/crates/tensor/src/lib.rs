//! Dense tensors, a single-use autodiff tape, and Adam.
//!
//! Covers the operation set needed by heatmap pose networks: convolution,
//! pooling, batch norm, batched matmul, softmax and per-sample depthwise
//! correlation.

pub mod adam;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod param;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamSettings};
pub use element::Element;
pub use error::{Result, TensorError};
pub use param::{NamedStats, ParamId, ParamStore, Parameter, Session, StatsId};
pub use tape::{BnStats, Mode, Tape, Var, BN_EPS, BN_MOMENTUM};
pub use tensor::Tensor;
