use std::process::ExitCode;

use intlower::engine::EngineError;
use intlower::export::ExportError;
use intlower::fuse::FuseError;
use intlower::ir::IrError;
use intlower::quant::QuantError;
use intlower::sparsity::SparsityError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verify(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Verify(_) => 3,
            CliError::Io(_) => 4,
        }
    }

    pub fn exit(&self) -> ExitCode {
        ExitCode::from(self.code())
    }
}

impl From<IrError> for CliError {
    fn from(e: IrError) -> Self {
        match e {
            IrError::Io { .. } => CliError::Io(e.to_string()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<QuantError> for CliError {
    fn from(e: QuantError) -> Self {
        match e {
            QuantError::Ir(e) => e.into(),
            e => CliError::Config(format!("calibration: {e}")),
        }
    }
}

impl From<FuseError> for CliError {
    fn from(e: FuseError) -> Self {
        CliError::Config(format!("fusion: {e}"))
    }
}

impl From<SparsityError> for CliError {
    fn from(e: SparsityError) -> Self {
        CliError::Config(format!("pruning: {e}"))
    }
}

impl From<ExportError> for CliError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::Io { .. } => CliError::Io(e.to_string()),
            ExportError::Ir(e) => e.into(),
            e => CliError::Config(format!("export: {e}")),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Ir(e) => e.into(),
            e => CliError::Config(format!("execution: {e}")),
        }
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
