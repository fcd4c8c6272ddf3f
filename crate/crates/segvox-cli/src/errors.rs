use segvox_core::audio::AudioError;
use segvox_core::corpus::CorpusError;
use segvox_core::decoder::DecodeError;
use segvox_core::eval::EvalError;
use segvox_core::model::ModelError;
use segvox_core::vad::VadError;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Data(_) => EXIT_DATA,
            AppError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn usage(msg: impl Into<String>) -> AppError {
        AppError::Usage(msg.into())
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<AudioError> for AppError {
    fn from(e: AudioError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<CorpusError> for AppError {
    fn from(e: CorpusError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<VadError> for AppError {
    fn from(e: VadError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<EvalError> for AppError {
    fn from(e: EvalError) -> AppError {
        AppError::Data(e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> AppError {
        match &e {
            ModelError::Numeric { .. } => AppError::Numeric(e.to_string()),
            ModelError::Train(msg) if msg.contains("diverged") => {
                AppError::Numeric(e.to_string())
            }
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<DecodeError> for AppError {
    fn from(e: DecodeError) -> AppError {
        fn classify(e: &DecodeError) -> bool {
            match e {
                DecodeError::Model(ModelError::Numeric { .. }) => true,
                DecodeError::Window { source, .. } => classify(source),
                _ => false,
            }
        }
        if classify(&e) {
            AppError::Numeric(e.to_string())
        } else {
            AppError::Data(e.to_string())
        }
    }
}
