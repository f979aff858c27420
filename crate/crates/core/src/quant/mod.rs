//! Quantizers: calibration observers, scale/zero-point selection,
//! quantize/dequantize/fake-quantize and learned rounding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::IrError;
use crate::tensor::TensorError;

pub mod adaround;
pub mod calibrate;
pub mod observer;
pub mod ops;

pub use adaround::{adaround_fit, adaround_freeze, AdaRoundConfig, AdaRoundProblem, AdaRoundState};
pub use calibrate::{calibrate_graph, CalibrationReport};
pub use observer::{
    compute_qparams, compute_qparams_mse, qparams_from_range, Observer, ObserverMode, QParamsResult,
};
pub use ops::{dequantize, fake_quant, quantize};

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("invalid quantization parameters: {0:?}")]
    InvalidParams(Vec<String>),
    #[error("{channels} per-channel parameters along axis {axis} do not match extent {extent:?}")]
    ChannelMismatch {
        channels: usize,
        axis: usize,
        extent: Option<usize>,
    },
    #[error("edge '{edge}': non-finite value at element {index}")]
    NonFinite { edge: String, index: usize },
    #[error("observer '{0}' has seen no samples")]
    Empty(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("learned rounding diverged at iteration {iter}: loss {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error("configuration: {0}")]
    Config(String),
    #[error("execution failed during calibration: {0}")]
    Exec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CalibMethod {
    #[default]
    MinMax,
    Mse,
    AdaRound,
}

fn default_bits() -> u8 {
    8
}
fn default_true() -> bool {
    true
}

/// Quantization recipe. Asymmetric activations use unsigned codes, symmetric
/// ones signed codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QConfig {
    #[serde(default = "default_bits")]
    pub w_bits: u8,
    #[serde(default = "default_bits")]
    pub a_bits: u8,
    #[serde(default = "default_true")]
    pub symmetric_w: bool,
    #[serde(default)]
    pub symmetric_a: bool,
    #[serde(default = "default_true")]
    pub per_channel_w: bool,
    #[serde(default)]
    pub method: CalibMethod,
    /// Upper bound on batches consumed; 0 means all.
    #[serde(default)]
    pub calib_batches: usize,
    #[serde(default = "default_act_observer")]
    pub act_observer: ObserverMode,
    #[serde(default)]
    pub adaround: AdaRoundConfig,
}

fn default_act_observer() -> ObserverMode {
    ObserverMode::MinMax
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            w_bits: 8,
            a_bits: 8,
            symmetric_w: true,
            symmetric_a: false,
            per_channel_w: true,
            method: CalibMethod::MinMax,
            calib_batches: 0,
            act_observer: ObserverMode::MinMax,
            adaround: AdaRoundConfig::default(),
        }
    }
}

impl QConfig {
    pub fn bits(w_bits: u8, a_bits: u8) -> Self {
        QConfig {
            w_bits,
            a_bits,
            ..QConfig::default()
        }
    }

    pub fn check(&self) -> Result<(), QuantError> {
        for (what, b) in [("w_bits", self.w_bits), ("a_bits", self.a_bits)] {
            if !(2..=16).contains(&b) {
                return Err(QuantError::Config(format!("{what} = {b} outside 2..=16")));
            }
        }
        if let ObserverMode::Percentile { p } = self.act_observer {
            if !(50.0..=100.0).contains(&p) {
                return Err(QuantError::Config(format!("percentile {p} outside [50, 100]")));
            }
        }
        Ok(())
    }

    pub fn a_signed(&self) -> bool {
        self.symmetric_a
    }
}
