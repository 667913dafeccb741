//! Dense tensors, reverse-mode differentiation and transformer layers.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use layers::{AttentionConfig, Block, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamGrads, ParamId, ParamStore, Parameter};
pub use tape::{AttnSpec, Tape, Var};
pub use tensor::{gemm, Real, Tensor};
