use ascnet::model::ModelError;
use ascnet::pipeline::PipelineError;
use ascnet::trainer::TrainError;
use ascnet::wfdb::WfdbError;

pub const OK: u8 = 0;
pub const BAD_ARGS: u8 = 2;
pub const PARSE: u8 = 3;
pub const DIVERGED: u8 = 4;
pub const CONFIG_MISMATCH: u8 = 5;
pub const SCHEMA_MISMATCH: u8 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }
}

pub fn fail<T>(code: u8, msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::new(code, anyhow::anyhow!(msg.into())))
}

/// Attaches an exit code and a context line to a fallible result.
pub trait WithCode<T> {
    fn code(self, code: u8, context: impl FnOnce() -> String) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8, context: impl FnOnce() -> String) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(code, e.into().context(context())))
    }
}

impl From<WfdbError> for CliError {
    fn from(e: WfdbError) -> Self {
        let code = match &e {
            WfdbError::ChannelOutOfRange { .. } => BAD_ARGS,
            WfdbError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => BAD_ARGS,
            _ => PARSE,
        };
        Self::new(code, e)
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Format(_) | PipelineError::Json(_) | PipelineError::NoiseSourceTooShort { .. } => PARSE,
            PipelineError::Io(io) if io.kind() != std::io::ErrorKind::NotFound => PARSE,
            _ => BAD_ARGS,
        };
        Self::new(code, e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let code = match e {
            ModelError::InvalidConfig(_) => BAD_ARGS,
            _ => CONFIG_MISMATCH,
        };
        Self::new(code, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Divergence { .. } => DIVERGED,
            TrainError::ConfigMismatch(_) => CONFIG_MISMATCH,
            TrainError::Model(ModelError::InvalidConfig(_)) => BAD_ARGS,
            TrainError::Model(_) => CONFIG_MISMATCH,
            TrainError::CorruptFile(_) | TrainError::VersionMismatch { .. } => PARSE,
            TrainError::Pipeline(PipelineError::Format(_)) => PARSE,
            _ => BAD_ARGS,
        };
        Self::new(code, e)
    }
}
