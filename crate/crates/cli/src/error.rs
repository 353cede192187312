use mmvae::chords::ChordError;
use mmvae::corpus::CorpusError;
use mmvae::render::RenderError;
use mmvae::smf::SmfError;
use mmvae::{LatentError, VaeError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SmfError> for CliError {
    fn from(e: SmfError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ChordError> for CliError {
    fn from(e: ChordError) -> Self {
        match e {
            ChordError::BadChordName(_) | ChordError::BadParams(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<RenderError> for CliError {
    fn from(e: RenderError) -> Self {
        match e {
            RenderError::UnknownFormat(_) => CliError::Usage(e.to_string()),
            RenderError::BadText { .. } => CliError::Data(e.to_string()),
        }
    }
}

impl From<VaeError> for CliError {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::BadConfig(_) => CliError::Usage(e.to_string()),
            VaeError::NonFiniteLoss { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LatentError> for CliError {
    fn from(e: LatentError) -> Self {
        match e {
            LatentError::Vae(v) => v.into(),
            LatentError::Chord(c) => c.into(),
            LatentError::Smf(s) => s.into(),
            LatentError::OddProgression(_) | LatentError::TooFewSteps(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
