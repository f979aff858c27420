//! Execution engine: float reference, fake-quantized and integer-only
//! executors over the same graph, plus the integer kernels they share.

use thiserror::Error;

use crate::fixed::FixedPointError;
use crate::fuse::FuseError;
use crate::ir::IrError;
use crate::quant::QuantError;
use crate::tensor::TensorError;

pub mod attention;
pub mod exec;
pub mod kernels;
pub mod layernorm;
pub mod lut;
pub mod report;
pub mod requant;

pub use attention::IntAttention;
pub use exec::{exec_fakequant, exec_fakequant_trace, exec_float, exec_float_trace, exec_int, exec_int_trace, IntRun, Trace};
pub use layernorm::{int_layernorm_instant, inv_sqrt, IntLayerNorm};
pub use lut::{int_gelu, int_softmax, lut_build, LutFn, LutTable};
pub use report::{compare_paths, ExecReport, LayerDiff, PathKind};
pub use requant::requantize;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("node '{node}': missing {what}")]
    Missing { node: String, what: String },
    #[error("node '{node}': {message}")]
    Shape { node: String, message: String },
    #[error("node '{node}': accumulator overflow ({value})")]
    Overflow { node: String, value: i128 },
    #[error("missing quantization annotation: {0}")]
    Annotation(String),
    #[error("graph is not lowered to integers: {0}")]
    NotFused(String),
    #[error("integer path executed {0} float operations")]
    Impure(u64),
    #[error("lookup table: {0}")]
    Lut(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Fixed(#[from] FixedPointError),
    #[error(transparent)]
    Fuse(Box<FuseError>),
}

impl From<FuseError> for EngineError {
    fn from(e: FuseError) -> Self {
        EngineError::Fuse(Box::new(e))
    }
}
