//! Post-training quantization, normalization fusion and integer-only
//! lowering of CNN and ViT compute graphs, with export to hardware memory
//! files.

// Range checks are written as negated comparisons so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod export;
pub mod fixed;
pub mod fixtures;
pub mod fuse;
pub mod ir;
pub mod purity;
pub mod qparams;
pub mod quant;
pub mod sparsity;
pub mod tensor;

pub use fixed::{FixedPointCode, FixedPointSpec};
pub use ir::{Graph, Node, OpKind};
pub use qparams::QuantParams;
pub use tensor::{DType, Tensor};
